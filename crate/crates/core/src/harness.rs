//! Experiment runner: drives controllers over seeded streams, scores the
//! predictions and writes reports.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controllers::{AdaptConfig, Controller, Csuta, Dsuta, ResetPolicy, SourceModel, Suta};
pub use crate::counters::StepCounters;
use crate::error::{Result, TtaError};
use crate::model::ParamSet;
use crate::reset::{DetectorEvent, ResetConfig};
use crate::stream::{build_stream_seeded, fit_source_model, Stream, StreamSpec};

/// Window used for error-difference curves.
pub const CURVE_WINDOW: usize = 100;

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over reference length. `None` for an empty reference,
/// which is excluded from aggregates.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> Option<f64> {
    if reference.is_empty() {
        None
    } else {
        Some(edit_distance(hyp, reference) as f64 / reference.len() as f64)
    }
}

/// Trailing moving average; the first `window - 1` entries average the
/// available prefix.
pub fn smooth_curve(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Source,
    Suta,
    Csuta,
    Dsuta,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Suta => "suta",
            Method::Csuta => "csuta",
            Method::Dsuta => "dsuta",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    /// Clean utterances used to fit the source model.
    pub utterances: usize,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { utterances: 2000, seed: 99 }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// One experiment cell: a method, its reset strategy and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub reset: ResetConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    /// Stream spec path, relative to the run config file.
    #[serde(default)]
    pub stream: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub source: SourceConfig,
}

impl RunConfig {
    pub fn new(method: Method, reset: ResetConfig, adapt: AdaptConfig) -> Self {
        Self {
            name: String::new(),
            method,
            reset,
            adapt,
            stream: String::new(),
            seeds: default_seeds(),
            source: SourceConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reset != ResetConfig::None && self.method != Method::Dsuta {
            return Err(TtaError::Config(format!(
                "reset strategy '{}' requires method dsuta, got {}",
                self.reset.label(),
                self.method.name()
            )));
        }
        if self.seeds.is_empty() {
            return Err(TtaError::Config("at least one seed is required".into()));
        }
        self.reset.validate()?;
        self.adapt.validate()
    }

    /// Method plus reset strategy, e.g. `dsuta+fixed-50`.
    pub fn label(&self) -> String {
        match self.reset {
            ResetConfig::None => self.method.name().to_string(),
            ref r => format!("{}+{}", self.method.name(), r.label()),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Load a run config and the stream spec it references.
pub fn load_run(path: &Path) -> Result<(RunConfig, StreamSpec)> {
    let cfg = RunConfig::from_toml_str(&fs::read_to_string(path)?)?;
    if cfg.stream.is_empty() {
        return Err(TtaError::Config("run config must name a stream spec".into()));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let stream = StreamSpec::load(&base.join(&cfg.stream))?;
    Ok((cfg, stream))
}

/// Stream seed for a run seed: each run seed gets an independent stream.
pub fn stream_seed(spec: &StreamSpec, run_seed: u64) -> u64 {
    spec.seed.wrapping_mul(1_000_003).wrapping_add(run_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t: u64,
    pub domain_id: String,
    pub token_error: Option<f64>,
    pub edits: usize,
    pub ref_len: usize,
    pub reset_fired: bool,
    pub meta_updated: bool,
    pub lii: Option<f64>,
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub stream_fingerprint: String,
    /// Total edits over total reference tokens.
    pub token_error_rate: f64,
    /// Unweighted mean of per-sample error rates.
    pub mean_sample_error: f64,
    pub counters: StepCounters,
    pub resets: Vec<u64>,
    pub events: Vec<DetectorEvent>,
    pub failed: Option<String>,
    #[serde(skip)]
    pub records: Vec<SampleRecord>,
}

impl SeedReport {
    fn from_records(
        seed: u64,
        fingerprint: String,
        records: Vec<SampleRecord>,
        counters: StepCounters,
        events: Vec<DetectorEvent>,
        failed: Option<String>,
    ) -> Self {
        let (edits, tokens) = records
            .iter()
            .filter(|r| r.token_error.is_some())
            .fold((0usize, 0usize), |(e, n), r| (e + r.edits, n + r.ref_len));
        let scored: Vec<f64> = records.iter().filter_map(|r| r.token_error).collect();
        let mean_sample_error = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
        Self {
            seed,
            stream_fingerprint: fingerprint,
            token_error_rate: if tokens == 0 { 0.0 } else { edits as f64 / tokens as f64 },
            mean_sample_error,
            counters,
            resets: records.iter().filter(|r| r.reset_fired).map(|r| r.t).collect(),
            events,
            failed,
            records,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub config: RunConfig,
    pub stream_name: String,
    pub aggregate: String,
    /// Mean over seeds of the micro-averaged token error rate.
    pub token_error_rate: f64,
    pub mean_sample_error: f64,
    pub seeds: Vec<SeedReport>,
}

impl RunReport {
    pub fn failed(&self) -> bool {
        self.seeds.iter().any(|s| s.failed.is_some())
    }

    /// SHA-256 over the summary and every per-sample record.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("report serializes"));
        for s in &self.seeds {
            for r in &s.records {
                h.update(serde_json::to_vec(r).expect("record serializes"));
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a stream (domains, features and references).
pub fn stream_fingerprint(stream: &Stream) -> String {
    let mut h = Sha256::new();
    for u in &stream.utterances {
        h.update(u.t.to_le_bytes());
        h.update(u.domain_id.as_bytes());
        for v in u.features.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &tok in u.reference.as_slice() {
            h.update((tok as u64).to_le_bytes());
        }
    }
    hex(&h.finalize()[..16])
}

pub fn build_controller(
    cfg: &RunConfig,
    phi_pre: &ParamSet,
    boundaries: &BTreeSet<u64>,
) -> Result<Box<dyn Controller + Send>> {
    let pre = phi_pre.snapshot();
    Ok(match cfg.method {
        Method::Source => Box::new(SourceModel::new(pre, cfg.adapt)?),
        Method::Suta => Box::new(Suta::new(pre, cfg.adapt)?),
        Method::Csuta => Box::new(Csuta::new(pre, cfg.adapt)?),
        Method::Dsuta => {
            let policy = ResetPolicy::from_config(&cfg.reset, boundaries)?;
            Box::new(Dsuta::new(pre, cfg.adapt, policy)?)
        }
    })
}

/// Run one controller over a stream, recording every sample. A controller
/// error stops the run and is returned alongside the partial records.
pub fn drive(
    controller: &mut dyn Controller,
    stream: &Stream,
) -> (Vec<SampleRecord>, Vec<DetectorEvent>, Option<TtaError>) {
    let mut records = Vec::with_capacity(stream.len());
    let mut events = Vec::new();
    for u in &stream.utterances {
        let out = match controller.step(&u.features) {
            Ok(o) => o,
            Err(e) => return (records, events, Some(e)),
        };
        let hyp = out.prediction.as_slice();
        let reference = u.reference.as_slice();
        if let Some(e) = out.detector_event {
            events.push(e);
        }
        records.push(SampleRecord {
            t: u.t,
            domain_id: u.domain_id.clone(),
            token_error: token_error_rate(hyp, reference),
            edits: edit_distance(hyp, reference),
            ref_len: reference.len(),
            reset_fired: out.reset_fired,
            meta_updated: out.meta_updated,
            lii: out.lii,
            z: out.detector_event.map(|e| e.z),
        });
    }
    (records, events, None)
}

fn run_seed(cfg: &RunConfig, spec: &StreamSpec, phi_pre: &ParamSet, seed: u64) -> Result<SeedReport> {
    let stream = build_stream_seeded(spec, stream_seed(spec, seed))?;
    let fingerprint = stream_fingerprint(&stream);
    let mut controller = build_controller(cfg, phi_pre, &stream.boundaries)?;
    let (records, events, err) = drive(controller.as_mut(), &stream);
    let failed = err.map(|e| format!("[{}] {e}", e.category()));
    Ok(SeedReport::from_records(seed, fingerprint, records, controller.counters(), events, failed))
}

/// Run every seed of `cfg` on `spec`. Seeds run on separate threads and are
/// merged in seed order.
pub fn run_experiment(cfg: &RunConfig, spec: &StreamSpec) -> Result<RunReport> {
    cfg.validate()?;
    spec.validate()?;
    let phi_pre = fit_source_model(&spec.task, cfg.source.utterances, cfg.source.seed)?;
    let seeds: Vec<SeedReport> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let phi_pre = &phi_pre;
                scope.spawn(move || run_seed(cfg, spec, phi_pre, seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect::<Result<Vec<_>>>()
    })?;
    let n = seeds.len() as f64;
    Ok(RunReport {
        label: cfg.label(),
        config: cfg.clone(),
        stream_name: spec.name.clone(),
        aggregate: "micro-averaged token error rate (total edits / total reference tokens), \
                    mean over seeds"
            .into(),
        token_error_rate: seeds.iter().map(|s| s.token_error_rate).sum::<f64>() / n,
        mean_sample_error: seeds.iter().map(|s| s.mean_sample_error).sum::<f64>() / n,
        seeds,
    })
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    seed: u64,
    #[serde(flatten)]
    record: SampleRecord,
}

/// Write `summary.json`, `records.jsonl` and `curve.csv` into `dir`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(report)?)?;

    let mut w = BufWriter::new(File::create(dir.join("records.jsonl"))?);
    for s in &report.seeds {
        for r in &s.records {
            serde_json::to_writer(&mut w, &RecordLine { seed: s.seed, record: r.clone() })?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;

    let mut csv = csv::Writer::from_path(dir.join("curve.csv"))?;
    csv.write_record(["seed", "t", "token_error", "smoothed"])?;
    for s in &report.seeds {
        let errs: Vec<f64> = s.records.iter().map(|r| r.token_error.unwrap_or(0.0)).collect();
        for (r, sm) in s.records.iter().zip(smooth_curve(&errs, CURVE_WINDOW)) {
            csv.write_record([
                s.seed.to_string(),
                r.t.to_string(),
                format!("{}", r.token_error.unwrap_or(0.0)),
                format!("{sm}"),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Load a report directory written by [`write_report`].
pub fn read_report(dir: &Path) -> Result<RunReport> {
    let mut report: RunReport = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
    let file = File::open(dir.join("records.jsonl"))?;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line)?;
        let seed = report
            .seeds
            .iter_mut()
            .find(|s| s.seed == rec.seed)
            .ok_or_else(|| TtaError::Parse(format!("record for unknown seed {}", rec.seed)))?;
        seed.records.push(rec.record);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub token_error_rate: f64,
    pub per_seed: Vec<f64>,
    pub forwards: u64,
    pub backwards: u64,
    pub resets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
    /// Smoothed per-sample error difference (method - baseline), averaged
    /// over seeds, one curve per row.
    pub curves: Vec<(String, Vec<f64>)>,
}

impl Comparison {
    pub fn render_table(&self) -> String {
        let mut out =
            format!("{:<32} {:>10} {:>12} {:>12} {:>8}\n", "method", "TER(%)", "forwards", "backwards", "resets");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<32} {:>10.2} {:>12} {:>12} {:>8}\n",
                r.label,
                100.0 * r.token_error_rate,
                r.forwards,
                r.backwards,
                r.resets
            ));
        }
        out
    }

    /// CSV with one column per curve: `t,<label>...`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("t");
        for (label, _) in &self.curves {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        let len = self.curves.first().map_or(0, |c| c.1.len());
        for i in 0..len {
            out.push_str(&(i + 1).to_string());
            for (_, c) in &self.curves {
                out.push_str(&format!(",{}", c[i]));
            }
            out.push('\n');
        }
        out
    }
}

/// Align reports on identical streams. Rows are ordered by label; the
/// baseline for difference curves is the `source` report when present,
/// otherwise the first row.
pub fn compare_reports(reports: &[RunReport]) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(TtaError::Usage("nothing to compare".into()));
    }
    let reference = &reports[0];
    for r in reports {
        let same = r.seeds.len() == reference.seeds.len()
            && r.seeds.iter().zip(&reference.seeds).all(|(a, b)| {
                a.seed == b.seed && a.stream_fingerprint == b.stream_fingerprint && a.records.len() == b.records.len()
            });
        if !same {
            return Err(TtaError::Usage(format!(
                "report '{}' was produced on a different stream than '{}'",
                r.label, reference.label
            )));
        }
    }
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.label.cmp(&b.label));
    let baseline = sorted.iter().find(|r| r.config.method == Method::Source).copied().unwrap_or(sorted[0]);

    let n_seeds = baseline.seeds.len() as f64;
    let errs = |s: &SeedReport| -> Vec<f64> { s.records.iter().map(|r| r.token_error.unwrap_or(0.0)).collect() };
    let rows = sorted
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            token_error_rate: r.token_error_rate,
            per_seed: r.seeds.iter().map(|s| s.token_error_rate).collect(),
            forwards: r.seeds.iter().map(|s| s.counters.forwards).sum::<u64>() / r.seeds.len() as u64,
            backwards: r.seeds.iter().map(|s| s.counters.backwards).sum::<u64>() / r.seeds.len() as u64,
            resets: r.seeds.iter().map(|s| s.resets.len()).sum(),
        })
        .collect();
    let curves = sorted
        .iter()
        .map(|r| {
            let len = baseline.seeds[0].records.len();
            let mut diff = vec![0.0; len];
            for (s, b) in r.seeds.iter().zip(&baseline.seeds) {
                for (d, (x, y)) in diff.iter_mut().zip(errs(s).iter().zip(errs(b))) {
                    *d += (x - y) / n_seeds;
                }
            }
            (r.label.clone(), smooth_curve(&diff, CURVE_WINDOW))
        })
        .collect();
    Ok(Comparison { baseline: baseline.label.clone(), rows, curves })
}

/// Resolve a list of report directories.
pub fn read_reports(dirs: &[PathBuf]) -> Result<Vec<RunReport>> {
    dirs.iter().map(|d| read_report(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Textbook O(nm) table for comparison.
    fn dp_edit(a: &[usize], b: &[usize]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in t.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in t[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = usize::from(a[i - 1] != b[j - 1]);
                t[i][j] = (t[i - 1][j] + 1).min(t[i][j - 1] + 1).min(t[i - 1][j - 1] + c);
            }
        }
        t[a.len()][b.len()]
    }

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]), Some(0.0));
        let ter = token_error_rate(&[1, 9, 3], &[1, 2, 3]).unwrap();
        assert!((ter - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_error_rate(&[], &[4, 5, 6, 7]), Some(1.0));
        assert_eq!(token_error_rate(&[1], &[]), None);
        assert_eq!(token_error_rate(&[1, 1, 1, 1, 1], &[2]), Some(5.0));
    }

    proptest::proptest! {
        #[test]
        fn edit_distance_matches_table(
            a in proptest::collection::vec(0usize..4, 0..12),
            b in proptest::collection::vec(0usize..4, 0..12),
        ) {
            proptest::prop_assert_eq!(edit_distance(&a, &b), dp_edit(&a, &b));
            proptest::prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        }
    }

    #[test]
    fn smoothing_examples() {
        let v = [0.3, 1.7, -2.0, 5.0];
        assert_eq!(smooth_curve(&v, 1), v.to_vec());
        assert!(smooth_curve(&[2.5; 10], 4).iter().all(|&x| (x - 2.5).abs() < 1e-15));
        let alt: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
        let s = smooth_curve(&alt, 2);
        assert_eq!(s[0], 0.0);
        assert!(s[1..].iter().all(|&x| x == 0.5));
        // Prefix averaging before the window fills.
        assert_eq!(smooth_curve(&[3.0, 1.0, 2.0], 5), vec![3.0, 2.0, 2.0]);
    }

    #[test]
    fn reset_requires_dsuta() {
        let cfg = RunConfig::new(Method::Suta, ResetConfig::Fixed { freq: 50 }, AdaptConfig::default());
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::new(Method::Dsuta, ResetConfig::Fixed { freq: 50 }, AdaptConfig::default());
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.label(), "dsuta+fixed-50");
    }

    #[test]
    fn run_config_parses_from_toml() {
        let cfg = RunConfig::from_toml_str(
            r#"
            name = "x"
            method = "dsuta"
            stream = "s.toml"
            seeds = [4, 5]
            [reset]
            kind = "dynamic"
            construction = 100
            patience = 2
            [adapt]
            steps = 5
            buffer_size = 5
            [adapt.fast]
            kind = "plain-gd"
            learning_rate = 0.01
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.reset, ResetConfig::Dynamic { construction: 100, patience: 2 });
        assert_eq!(cfg.adapt.fast.learning_rate, 0.01);
        assert_eq!(cfg.adapt.alpha, 0.3);
        assert!(RunConfig::from_toml_str("method = \"suta\"\nbogus = 1").is_err());
    }
}
