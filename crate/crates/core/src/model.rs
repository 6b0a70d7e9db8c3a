//! Per-frame linear sequence classifier and greedy CTC decoding.
//!
//! The classifier maps each frame `x_i` (length `dim`) to class logits
//! `x_i · W + b`, with `W` stored row-major as `dim × classes`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};

/// A sequence of feature frames, `len × dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    frames: Vec<f64>,
    len: usize,
    dim: usize,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(TtaError::Config(format!(
                "feature sequence needs at least one frame and one dimension (got {len}x{dim})"
            )));
        }
        if frames.len() != len * dim {
            return Err(TtaError::Dimension { what: "feature buffer length", expected: len * dim, got: frames.len() });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(TtaError::Config("feature sequence contains non-finite values".into()));
        }
        Ok(Self { frames, len, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(TtaError::Config("ragged feature rows".into()));
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.frames.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.frames
    }
}

/// Adaptable parameters of the classifier: `weight` (`dim × classes`) and `bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    weight: Vec<f64>,
    bias: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl ParamSet {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self { weight: vec![0.0; dim * classes], bias: vec![0.0; classes], dim, classes }
    }

    pub fn new(weight: Vec<f64>, bias: Vec<f64>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(TtaError::Config("parameter set needs dim >= 1 and classes >= 1".into()));
        }
        if weight.len() != dim * classes {
            return Err(TtaError::Dimension { what: "weight length", expected: dim * classes, got: weight.len() });
        }
        if bias.len() != classes {
            return Err(TtaError::Dimension { what: "bias length", expected: classes, got: bias.len() });
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(TtaError::Config("parameter set contains non-finite values".into()));
        }
        Ok(Self { weight, bias, dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// `W[k][j]`, feature `k` to class `j`.
    pub fn w(&self, k: usize, j: usize) -> f64 {
        self.weight[k * self.classes + j]
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view over all scalars: weight entries first, then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.dim == other.dim && self.classes == other.classes
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Deep copy of the parameters.
    pub fn snapshot(&self) -> ParamSet {
        self.clone()
    }

    /// Overwrite `self` with the values of `src`.
    pub fn restore(&mut self, src: &ParamSet) -> Result<()> {
        if !self.same_shape(src) {
            return Err(TtaError::Dimension { what: "restore parameter count", expected: self.len(), got: src.len() });
        }
        self.weight.copy_from_slice(&src.weight);
        self.bias.copy_from_slice(&src.bias);
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn combine(&self, a: f64, other: &ParamSet, b: f64) -> Result<ParamSet> {
        if !self.same_shape(other) {
            return Err(TtaError::Dimension {
                what: "combined parameter count",
                expected: self.len(),
                got: other.len(),
            });
        }
        let mut out = self.clone();
        for (o, v) in out.values_mut().zip(other.values()) {
            *o = a * *o + b * v;
        }
        Ok(out)
    }
}

/// Per-frame class scores, `rows × cols` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl LogitMatrix {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TtaError::Dimension { what: "logit buffer length", expected: rows * cols, got: data.len() });
        }
        Ok(Self { data, rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Decoded class ids with the blank removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        TokenSequence(v)
    }
}

pub fn forward(params: &ParamSet, x: &FeatureSequence) -> Result<LogitMatrix> {
    if x.dim() != params.dim() {
        return Err(TtaError::Dimension { what: "feature dimension", expected: params.dim(), got: x.dim() });
    }
    let c = params.classes();
    let mut data = Vec::with_capacity(x.len() * c);
    for frame in x.frames() {
        let start = data.len();
        data.extend_from_slice(params.bias());
        let row = &mut data[start..];
        for (k, &xk) in frame.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            let wrow = &params.weight()[k * c..(k + 1) * c];
            for (o, &w) in row.iter_mut().zip(wrow) {
                *o += xk * w;
            }
        }
    }
    LogitMatrix::new(data, x.len(), c)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Greedy CTC: per-frame argmax, merge consecutive repeats, drop blanks.
pub fn greedy_ctc_decode(logits: &LogitMatrix, blank: usize) -> TokenSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.iter_rows() {
        let best = argmax(row);
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    TokenSequence(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, d: usize, c: usize) -> ParamSet {
        let w = (0..d * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        ParamSet::new(w, b, d, c).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, l: usize, d: usize) -> FeatureSequence {
        let f = (0..l * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureSequence::new(f, l, d).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_seq(&mut rng, 7, 4);
        let logits = forward(&ParamSet::zeros(4, 5), &x).unwrap();
        assert_eq!(logits.rows(), 7);
        assert_eq!(logits.cols(), 5);
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weight_reproduces_basis_vector() {
        let c = 4;
        let mut w = vec![0.0; c * c];
        for j in 0..c {
            w[j * c + j] = 1.0;
        }
        let p = ParamSet::new(w, vec![0.0; c], c, c).unwrap();
        for j in 0..c {
            let mut e = vec![0.0; c];
            e[j] = 1.0;
            let x = FeatureSequence::new(e.clone(), 1, c).unwrap();
            assert_eq!(forward(&p, &x).unwrap().row(0), e.as_slice());
        }
    }

    #[test]
    fn forward_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (l, d, c) = (9, 6, 5);
        let p = random_params(&mut rng, d, c);
        let x = random_seq(&mut rng, l, d);
        let got = forward(&p, &x).unwrap();
        for i in 0..l {
            for j in 0..c {
                let mut acc = p.bias()[j];
                for k in 0..d {
                    acc += x.frame(i)[k] * p.w(k, j);
                }
                assert!((got.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let x = FeatureSequence::new(vec![1.0; 6], 2, 3).unwrap();
        let err = forward(&ParamSet::zeros(4, 2), &x).unwrap_err();
        assert!(matches!(err, TtaError::Dimension { .. }));
    }

    #[test]
    fn forward_is_linear_in_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p1 = random_params(&mut rng, 5, 3);
        let p2 = random_params(&mut rng, 5, 3);
        let x = random_seq(&mut rng, 4, 5);
        let (a, b) = (0.7, -1.3);
        let mix = forward(&p1.combine(a, &p2, b).unwrap(), &x).unwrap();
        let l1 = forward(&p1, &x).unwrap();
        let l2 = forward(&p2, &x).unwrap();
        for ((m, u), v) in mix.as_slice().iter().zip(l1.as_slice()).zip(l2.as_slice()) {
            assert!((m - (a * u + b * v)).abs() < 1e-12);
        }
    }

    fn onehot_logits(argmaxes: &[usize], c: usize) -> LogitMatrix {
        let mut data = vec![0.0; argmaxes.len() * c];
        for (i, &a) in argmaxes.iter().enumerate() {
            data[i * c + a] = 1.0;
        }
        LogitMatrix::new(data, argmaxes.len(), c).unwrap()
    }

    #[test]
    fn all_blank_decodes_empty() {
        let logits = onehot_logits(&[0, 0, 0, 0], 3);
        assert!(greedy_ctc_decode(&logits, 0).is_empty());
    }

    #[test]
    fn collapse_then_remove_blank() {
        let (a, b, blank) = (1, 2, 0);
        let logits = onehot_logits(&[a, a, blank, a, b], 3);
        assert_eq!(greedy_ctc_decode(&logits, blank).0, vec![a, a, b]);
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
    }

    // Reference decoder written from the two rules: collapse runs, then drop blanks.
    fn reference_decode(logits: &LogitMatrix, blank: usize) -> Vec<usize> {
        let best: Vec<usize> = logits
            .iter_rows()
            .map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                r.iter().position(|&v| v == m).unwrap()
            })
            .collect();
        let mut collapsed: Vec<usize> = Vec::new();
        for b in best {
            if collapsed.last() != Some(&b) {
                collapsed.push(b);
            }
        }
        collapsed.into_iter().filter(|&b| b != blank).collect()
    }

    #[test]
    fn decode_matches_reference_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let c = 4;
            let data = (0..50 * c).map(|_| rng.random_range(0..3) as f64).collect();
            let logits = LogitMatrix::new(data, 50, c).unwrap();
            assert_eq!(greedy_ctc_decode(&logits, 0).0, reference_decode(&logits, 0));
        }
    }

    #[test]
    fn snapshot_is_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_params(&mut rng, 3, 3);
        let snap = p.snapshot();
        p.weight_mut()[0] += 1.0;
        p.bias_mut()[2] -= 1.0;
        assert_ne!(p, snap);
        assert_eq!(snap.snapshot(), snap);
    }

    #[test]
    fn restore_reproduces_logits_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pre = random_params(&mut rng, 4, 3);
        let mut cur = random_params(&mut rng, 4, 3);
        let x = random_seq(&mut rng, 5, 4);
        cur.restore(&pre).unwrap();
        assert_eq!(forward(&cur, &x).unwrap(), forward(&pre, &x).unwrap());
        let err = cur.restore(&ParamSet::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, TtaError::Dimension { .. }));
    }

    proptest::proptest! {
        // Integer-valued logits and shifts keep the comparison exact.
        #[test]
        fn decode_invariant_under_row_shift(
            vals in proptest::collection::vec(-8i32..8, 24),
            shifts in proptest::collection::vec(-1000i32..1000, 6),
        ) {
            let logits: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let shifted: Vec<f64> = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| (v + shifts[i / 4]) as f64)
                .collect();
            let logits = LogitMatrix::new(logits, 6, 4).unwrap();
            let shifted = LogitMatrix::new(shifted, 6, 4).unwrap();
            proptest::prop_assert_eq!(
                greedy_ctc_decode(&logits, 0),
                greedy_ctc_decode(&shifted, 0)
            );
        }
    }
}
