//! Synthetic multi-domain utterance streams.
//!
//! An utterance is a random token sequence expanded into frames (each token
//! held for a few frames, separated by blank frames). Every frame is the
//! prototype vector of its class plus isotropic noise; a domain then applies
//! its corruption on top. The source model is a linear discriminant fitted
//! on clean, held-out utterances.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TtaError};
use crate::model::{FeatureSequence, ParamSet, TokenSequence};

/// Shape of the underlying recognition task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    /// Number of classes including the blank.
    pub classes: usize,
    pub dim: usize,
    pub blank: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Frames per token, inclusive range.
    pub min_repeat: usize,
    pub max_repeat: usize,
    /// Blank frames after each token, inclusive range.
    pub min_blank: usize,
    pub max_blank: usize,
    /// Expected norm of a class prototype.
    pub prototype_scale: f64,
    /// Standard deviation of the isotropic per-frame noise.
    pub frame_noise: f64,
    pub prototype_seed: u64,
    /// Utterances longer than this many frames are dropped (off by default).
    pub max_frames: Option<usize>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 12,
            dim: 16,
            blank: 0,
            min_tokens: 5,
            max_tokens: 20,
            min_repeat: 1,
            max_repeat: 3,
            min_blank: 1,
            max_blank: 2,
            prototype_scale: 4.0,
            frame_noise: 0.8,
            prototype_seed: 17,
            max_frames: None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TtaError::Config(format!("task: {m}")));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if self.blank >= self.classes {
            return bad("blank id out of range");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token length range invalid");
        }
        if self.min_repeat == 0 || self.min_repeat > self.max_repeat {
            return bad("repeat range invalid");
        }
        if self.min_blank > self.max_blank {
            return bad("blank range invalid");
        }
        if !(self.frame_noise >= 0.0) || !(self.prototype_scale > 0.0) {
            return bad("noise and prototype scale must be non-negative / positive");
        }
        if self.max_frames == Some(0) {
            return bad("max_frames must be >= 1");
        }
        Ok(())
    }

    /// Class prototypes, `classes × dim`, fixed by `prototype_seed`.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.prototype_seed);
        let scale = self.prototype_scale / (self.dim as f64).sqrt();
        (0..self.classes).map(|_| (0..self.dim).map(|_| scale * gauss(&mut rng)).collect()).collect()
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

/// One corruption component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Corruption {
    /// Per-frame Gaussian noise along a fixed random unit direction.
    AdditiveNoise { scale: f64, direction_seed: u64 },
    /// Constant offset added to every frame.
    FeatureShift { offset: Vec<f64> },
    /// Per-dimension gains; `severity` interpolates from 1 to the gain.
    ChannelScale { gains: Vec<f64> },
}

impl Corruption {
    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Corruption::AdditiveNoise { scale, .. } if !(*scale >= 0.0) => {
                Err(TtaError::Config("additive noise scale must be >= 0".into()))
            }
            Corruption::FeatureShift { offset } if offset.len() != dim => {
                Err(TtaError::Dimension { what: "feature shift offset", expected: dim, got: offset.len() })
            }
            Corruption::ChannelScale { gains } if gains.len() != dim => {
                Err(TtaError::Dimension { what: "channel gains", expected: dim, got: gains.len() })
            }
            _ => Ok(()),
        }
    }
}

/// A test domain: corruption components applied in order at a severity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub id: String,
    #[serde(default = "one")]
    pub severity: f64,
    #[serde(default)]
    pub corruption: Vec<Corruption>,
}

fn one() -> f64 {
    1.0
}

impl DomainSpec {
    pub fn clean(id: &str) -> Self {
        Self { id: id.into(), severity: 0.0, corruption: Vec::new() }
    }

    pub fn new(id: &str, severity: f64, corruption: Vec<Corruption>) -> Self {
        Self { id: id.into(), severity, corruption }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.severity >= 0.0) {
            return Err(TtaError::Config(format!("domain {}: severity must be >= 0", self.id)));
        }
        self.corruption.iter().try_for_each(|c| c.validate(dim))
    }

    /// Apply the corruption to one frame in place.
    fn corrupt(&self, frame: &mut [f64], rng: &mut ChaCha8Rng, dirs: &[Option<Vec<f64>>]) {
        let s = self.severity;
        if s == 0.0 {
            return;
        }
        for (c, dir) in self.corruption.iter().zip(dirs) {
            match c {
                Corruption::AdditiveNoise { scale, .. } => {
                    let dir = dir.as_ref().expect("direction precomputed");
                    let n = s * scale * gauss(rng);
                    frame.iter_mut().zip(dir).for_each(|(f, u)| *f += n * u);
                }
                Corruption::FeatureShift { offset } => {
                    frame.iter_mut().zip(offset).for_each(|(f, o)| *f += s * o);
                }
                Corruption::ChannelScale { gains } => {
                    frame.iter_mut().zip(gains).for_each(|(f, g)| *f *= 1.0 + s * (g - 1.0));
                }
            }
        }
    }

    fn directions(&self, dim: usize) -> Vec<Option<Vec<f64>>> {
        self.corruption
            .iter()
            .map(|c| match c {
                Corruption::AdditiveNoise { direction_seed, .. } => Some(unit_direction(dim, *direction_seed)),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    /// 1-based stream position.
    pub t: u64,
    pub domain_id: String,
    pub features: FeatureSequence,
    pub reference: TokenSequence,
    /// Generating class of every frame (hidden; used for source fitting).
    pub frame_labels: Vec<usize>,
}

/// Reusable generator for one task: prototypes and per-domain directions
/// are computed once.
pub struct UtteranceGenerator {
    task: TaskSpec,
    prototypes: Vec<Vec<f64>>,
}

impl UtteranceGenerator {
    pub fn new(task: &TaskSpec) -> Result<Self> {
        task.validate()?;
        Ok(Self { prototypes: task.prototypes(), task: task.clone() })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    fn sample_alignment(&self, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
        let task = &self.task;
        let n_tokens = rng.random_range(task.min_tokens..=task.max_tokens);
        let non_blank: Vec<usize> = (0..task.classes).filter(|&c| c != task.blank).collect();
        let mut reference = Vec::with_capacity(n_tokens);
        let mut labels = Vec::new();
        for _ in 0..rng.random_range(0..=task.max_blank) {
            labels.push(task.blank);
        }
        for _ in 0..n_tokens {
            let tok = non_blank[rng.random_range(0..non_blank.len())];
            reference.push(tok);
            for _ in 0..rng.random_range(task.min_repeat..=task.max_repeat) {
                labels.push(tok);
            }
            // At least one blank separates tokens so repeats survive decoding.
            for _ in 0..rng.random_range(task.min_blank.max(1)..=task.max_blank.max(1)) {
                labels.push(task.blank);
            }
        }
        (reference, labels)
    }

    pub fn generate(&self, domain: &DomainSpec, t: u64, rng: &mut ChaCha8Rng) -> Result<Utterance> {
        domain.validate(self.task.dim)?;
        let dirs = domain.directions(self.task.dim);
        self.generate_with(domain, &dirs, t, rng)
    }

    fn generate_with(
        &self,
        domain: &DomainSpec,
        dirs: &[Option<Vec<f64>>],
        t: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Utterance> {
        let d = self.task.dim;
        let (reference, labels) = self.sample_alignment(rng);
        let mut frames = Vec::with_capacity(labels.len() * d);
        for &label in &labels {
            let start = frames.len();
            frames.extend(self.prototypes[label].iter().map(|&p| p + self.task.frame_noise * gauss(rng)));
            domain.corrupt(&mut frames[start..], rng, dirs);
        }
        Ok(Utterance {
            t,
            domain_id: domain.id.clone(),
            features: FeatureSequence::new(frames, labels.len(), d)?,
            reference: TokenSequence(reference),
            frame_labels: labels,
        })
    }
}

/// Convenience wrapper over [`UtteranceGenerator::generate`].
pub fn gen_utterance(task: &TaskSpec, domain: &DomainSpec, rng: &mut ChaCha8Rng) -> Result<Utterance> {
    UtteranceGenerator::new(task)?.generate(domain, 0, rng)
}

/// Fit the source model on clean utterances: a linear discriminant with
/// empirical class means, pooled isotropic variance and empirical priors.
pub fn fit_source_model(task: &TaskSpec, utterances: usize, seed: u64) -> Result<ParamSet> {
    let gen = UtteranceGenerator::new(task)?;
    let (c, d) = (task.classes, task.dim);
    let clean = DomainSpec::clean("clean");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![vec![0.0; d]; c];
    let mut counts = vec![0usize; c];
    let mut frames: Vec<(usize, Vec<f64>)> = Vec::new();
    for _ in 0..utterances.max(1) {
        let u = gen.generate(&clean, 0, &mut rng)?;
        for (f, &label) in u.features.frames().zip(&u.frame_labels) {
            counts[label] += 1;
            sums[label].iter_mut().zip(f).for_each(|(s, v)| *s += v);
            frames.push((label, f.to_vec()));
        }
    }
    if counts.contains(&0) {
        return Err(TtaError::Config("too few source utterances to see every class".into()));
    }
    let means: Vec<Vec<f64>> =
        sums.iter().zip(&counts).map(|(s, &n)| s.iter().map(|v| v / n as f64).collect()).collect();
    let mut ss = 0.0;
    for (label, f) in &frames {
        ss += f.iter().zip(&means[*label]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let var = (ss / (frames.len() * d) as f64).max(1e-6);
    let total = frames.len() as f64;
    let mut weight = vec![0.0; d * c];
    let mut bias = vec![0.0; c];
    for j in 0..c {
        for k in 0..d {
            weight[k * c + j] = means[j][k] / var;
        }
        let norm2: f64 = means[j].iter().map(|v| v * v).sum();
        bias[j] = -norm2 / (2.0 * var) + (counts[j] as f64 / total).ln();
    }
    ParamSet::new(weight, bias, d, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub domain: String,
    pub length: usize,
}

/// How domains are laid out along the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Layout {
    /// Explicit ordered segments.
    Segments { segments: Vec<Segment> },
    /// `order` repeated `repeats` times, each segment `segment_length` long.
    Repeated { order: Vec<String>, segment_length: usize, repeats: usize },
    /// Random domains (uniform, repeats allowed) with random segment lengths
    /// in `[min_length, max_length]` summing to exactly `total`. Every
    /// length stays in range whenever `max_length >= 2 * min_length - 1`
    /// and `total >= min_length`.
    Random { pool: Vec<String>, total: usize, min_length: usize, max_length: usize },
}

/// Full description of a stream; serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub task: TaskSpec,
    pub domains: Vec<DomainSpec>,
    pub layout: Layout,
}

impl StreamSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: StreamSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TtaError::Parse(e.to_string()))
    }

    pub fn domain(&self, id: &str) -> Result<&DomainSpec> {
        self.domains.iter().find(|d| d.id == id).ok_or_else(|| TtaError::Config(format!("undefined domain id '{id}'")))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let mut seen = BTreeSet::new();
        for d in &self.domains {
            if !seen.insert(d.id.as_str()) {
                return Err(TtaError::Config(format!("duplicate domain id '{}'", d.id)));
            }
            d.validate(self.task.dim)?;
        }
        let ids: Vec<&String> = match &self.layout {
            Layout::Segments { segments } => {
                if segments.iter().any(|s| s.length == 0) {
                    return Err(TtaError::Config("segment length must be >= 1".into()));
                }
                segments.iter().map(|s| &s.domain).collect()
            }
            Layout::Repeated { order, segment_length, .. } => {
                if *segment_length == 0 {
                    return Err(TtaError::Config("segment length must be >= 1".into()));
                }
                order.iter().collect()
            }
            Layout::Random { pool, total, min_length, max_length } => {
                if pool.is_empty() || *total == 0 {
                    return Err(TtaError::Config("random layout needs a pool and total >= 1".into()));
                }
                if *min_length == 0 || min_length > max_length {
                    return Err(TtaError::Config("random layout length range invalid".into()));
                }
                pool.iter().collect()
            }
        };
        for id in ids {
            self.domain(id)?;
        }
        Ok(())
    }

    /// Resolve the layout into concrete segments for a given stream seed.
    pub fn segments(&self, seed: u64) -> Vec<Segment> {
        match &self.layout {
            Layout::Segments { segments } => segments.clone(),
            Layout::Repeated { order, segment_length, repeats } => (0..*repeats)
                .flat_map(|_| order.iter())
                .map(|d| Segment { domain: d.clone(), length: *segment_length })
                .collect(),
            Layout::Random { pool, total, min_length, max_length } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a70_u64);
                random_segments(pool, *total, *min_length, *max_length, &mut rng)
            }
        }
    }
}

fn random_segments(
    pool: &[String],
    total: usize,
    min_length: usize,
    max_length: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut len = 0;
    while len < total {
        let domain = pool[rng.random_range(0..pool.len())].clone();
        let rem = total - len;
        let mut length = rng.random_range(min_length..=max_length);
        if length >= rem {
            length = rem;
        } else if rem - length < min_length {
            // Leave a tail of exactly `min_length` or absorb the remainder.
            length = if rem - min_length >= min_length { rem - min_length } else { rem.min(max_length) };
        }
        len += length;
        out.push(Segment { domain, length });
    }
    out
}

/// A materialized stream with its ground-truth domain boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub utterances: Vec<Utterance>,
    pub segments: Vec<Segment>,
    /// Step indices `t` after which the domain changes.
    pub boundaries: BTreeSet<u64>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Cumulative segment ends, excluding the final one.
pub fn boundaries_of(segments: &[Segment]) -> BTreeSet<u64> {
    let mut acc = 0u64;
    let mut out = BTreeSet::new();
    for s in segments.iter().take(segments.len().saturating_sub(1)) {
        acc += s.length as u64;
        out.insert(acc);
    }
    out
}

/// Domain specs keyed by id, with their resolved corruption directions.
type DomainTable<'a> = BTreeMap<&'a str, (&'a DomainSpec, Vec<Option<Vec<f64>>>)>;

fn materialize(
    gen: &UtteranceGenerator,
    domains: &DomainTable<'_>,
    segments: Vec<Segment>,
    seed: u64,
) -> Result<Stream> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_frames = gen.task().max_frames;
    let mut utterances = Vec::new();
    let mut t = 0u64;
    for seg in &segments {
        let (domain, dirs) = domains
            .get(seg.domain.as_str())
            .ok_or_else(|| TtaError::Config(format!("undefined domain id '{}'", seg.domain)))?;
        let mut produced = 0;
        while produced < seg.length {
            let u = gen.generate_with(domain, dirs, t + 1, &mut rng)?;
            if max_frames.is_some_and(|m| u.features.len() > m) {
                continue;
            }
            t += 1;
            produced += 1;
            utterances.push(u);
        }
    }
    let boundaries = boundaries_of(&segments);
    Ok(Stream { utterances, segments, boundaries })
}

fn domain_table(domains: &[DomainSpec], dim: usize) -> DomainTable<'_> {
    domains.iter().map(|d| (d.id.as_str(), (d, d.directions(dim)))).collect()
}

/// Build the stream described by `spec`, using `spec.seed`.
pub fn build_stream(spec: &StreamSpec) -> Result<Stream> {
    build_stream_seeded(spec, spec.seed)
}

/// Build the stream with an explicit seed (layout randomness and samples).
pub fn build_stream_seeded(spec: &StreamSpec, seed: u64) -> Result<Stream> {
    spec.validate()?;
    let gen = UtteranceGenerator::new(&spec.task)?;
    let table = domain_table(&spec.domains, spec.task.dim);
    materialize(&gen, &table, spec.segments(seed), seed)
}

/// Random-length segments over `domains` until exactly `total` samples.
pub fn build_long_stream(task: &TaskSpec, domains: &[DomainSpec], seed: u64, total: usize) -> Result<Stream> {
    if total == 0 || domains.is_empty() {
        return Err(TtaError::Config("long stream needs total >= 1 and a domain pool".into()));
    }
    let spec = StreamSpec {
        name: "long".into(),
        seed,
        task: task.clone(),
        domains: domains.to_vec(),
        layout: Layout::Random {
            pool: domains.iter().map(|d| d.id.clone()).collect(),
            total,
            min_length: 20,
            max_length: 500,
        },
    };
    build_stream(&spec)
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamRecord {
    t: u64,
    domain_id: String,
    frames: usize,
    dim: usize,
    features: String,
    reference: String,
}

fn join<T: ToString>(v: impl Iterator<Item = T>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// CSV export: `t,domain_id,frames,dim,features,reference`, with features
/// (row-major) and reference tokens space-separated.
pub fn write_stream_csv<W: Write>(stream: &Stream, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for u in &stream.utterances {
        w.serialize(StreamRecord {
            t: u.t,
            domain_id: u.domain_id.clone(),
            frames: u.features.len(),
            dim: u.features.dim(),
            features: join(u.features.as_slice().iter().map(|v| format!("{v:?}"))),
            reference: join(u.reference.0.iter()),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a CSV export. Frame labels are not stored and come back empty.
pub fn read_stream_csv<R: std::io::Read>(input: R) -> Result<Vec<Utterance>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: StreamRecord = rec?;
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| TtaError::Parse(e.to_string()));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| TtaError::Parse(e.to_string()));
        let feats = rec.features.split_whitespace().map(parse_f).collect::<Result<Vec<_>>>()?;
        let reference = rec.reference.split_whitespace().map(parse_u).collect::<Result<Vec<_>>>()?;
        out.push(Utterance {
            t: rec.t,
            domain_id: rec.domain_id,
            features: FeatureSequence::new(feats, rec.frames, rec.dim)?,
            reference: TokenSequence(reference),
            frame_labels: Vec::new(),
        });
    }
    Ok(out)
}
