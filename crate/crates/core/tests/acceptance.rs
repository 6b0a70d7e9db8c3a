//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 2 4`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fastslow_tta::controllers::{suta_adapt, AdaptConfig, Controller, Dsuta, ResetPolicy, Suta};
use fastslow_tta::harness::{
    build_controller, drive, load_run, run_experiment, stream_seed, write_report, Method, RunConfig, RunReport,
};
use fastslow_tta::objective::{
    entropy_loss, mcc_loss, suta_loss, suta_loss_from_logits, suta_loss_grad, temperature_softmax, ProbMatrix,
};
use fastslow_tta::optim::Optimizer;
use fastslow_tta::reset::{lii, ResetConfig};
use fastslow_tta::stream::{build_stream_seeded, fit_source_model, Layout, StreamSpec, UtteranceGenerator};
use fastslow_tta::{FeatureSequence, LogitMatrix, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run_cfg(name: &str) -> (RunConfig, StreamSpec) {
    load_run(&configs().join("runs").join(format!("{name}.toml"))).expect("shipped run config")
}

fn stream_spec(name: &str) -> StreamSpec {
    StreamSpec::load(&configs().join("streams").join(format!("{name}.toml"))).expect("shipped stream")
}

fn experiment(name: &str) -> RunReport {
    let (cfg, spec) = run_cfg(name);
    let report = run_experiment(&cfg, &spec).expect("experiment runs");
    assert!(!report.failed(), "{name} aborted");
    report
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Shipped adaptation settings for the DSUTA family.
fn dsuta_adapt() -> AdaptConfig {
    run_cfg("md-hard-dsuta").0.adapt
}

// 1. Forward/backward step counts on a 10000-sample stream.
fn step_counts() -> Verdict {
    let spec = stream_spec("md-long");
    let stream = build_stream_seeded(&spec, stream_seed(&spec, 0)).unwrap();
    assert_eq!(stream.len(), 10_000);
    let pre = fit_source_model(&spec.task, 2000, 99).unwrap();
    let count = |cfg: RunConfig| {
        let mut c = build_controller(&cfg, &pre, &stream.boundaries).unwrap();
        let (records, _, err) = drive(c.as_mut(), &stream);
        assert!(err.is_none());
        let resets = records.iter().filter(|r| r.reset_fired).count();
        (c.counters().forwards, c.counters().backwards, resets)
    };

    let suta = count(run_cfg("md-long-suta").0);
    let dsuta = count(run_cfg("md-long-dsuta").0);
    let dynamic = count(run_cfg("md-long-dsuta-dynamic").0);
    // Same controller with a patience no window can reach: zero resets.
    let mut quiet = run_cfg("md-long-dsuta-dynamic").0;
    quiet.reset = ResetConfig::Dynamic { construction: 100, patience: 1_000_000 };
    let quiet = count(quiet);

    let suta_ok = (suta.0, suta.1) == (100_000, 100_000);
    let dsuta_ok = (dsuta.0, dsuta.1) == (52_000, 52_000);
    let quiet_ok = quiet.2 == 0 && (quiet.0, quiet.1) == (72_000, 52_000);
    let dyn_ok = dynamic.1 == 52_000 && dynamic.0 <= 72_000;
    verdict(
        suta_ok && dsuta_ok && quiet_ok && dyn_ok,
        format!(
            "suta {}/{}, dsuta {}/{}, dynamic without resets {}/{}, \
             dynamic {}/{} with {} resets (backwards == 52000: {})",
            suta.0,
            suta.1,
            dsuta.0,
            dsuta.1,
            quiet.0,
            quiet.1,
            dynamic.0,
            dynamic.1,
            dynamic.2,
            dynamic.1 == 52_000
        ),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

// 2. Analytic gradient against central differences.
fn gradient_check() -> Verdict {
    let task = stream_spec("md-hard").task;
    let spec = stream_spec("md-hard");
    let gen = UtteranceGenerator::new(&task).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for pair in 0..100 {
        let (d, c) = (task.dim, task.classes);
        let scale = 0.05 + 0.2 * (pair % 5) as f64;
        let w = (0..d * c).map(|_| scale * gauss(&mut rng)).collect();
        let b = (0..c).map(|_| scale * gauss(&mut rng)).collect();
        let params = ParamSet::new(w, b, d, c).unwrap();
        let domain = &spec.domains[pair % spec.domains.len()];
        let x = gen.generate(domain, 1, &mut rng).unwrap().features;
        let (_, grad) = suta_loss_grad(&params, &x, 0.3, 2.5).unwrap();
        let analytic: Vec<f64> = grad.values().copied().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *plus.values_mut().nth(i).unwrap() += h;
            *minus.values_mut().nth(i).unwrap() -= h;
            let lp = suta_loss(&plus, &x, 0.3, 2.5).unwrap().total;
            let lm = suta_loss(&minus, &x, 0.3, 2.5).unwrap().total;
            numeric.push((lp - lm) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 100 pairs (bound 1e-4)"))
}

// 3. DSUTA with an identity slow update predicts exactly like SUTA.
fn degeneration() -> Verdict {
    let mut spec = stream_spec("md-long");
    if let Layout::Random { total, .. } = &mut spec.layout {
        *total = 1000;
    }
    let pre = fit_source_model(&spec.task, 2000, 99).unwrap();
    let cfg = AdaptConfig { steps: 10, meta_update: false, ..dsuta_adapt() };
    let mut mismatches = 0;
    let mut counted = 0;
    for seed in [0u64, 1, 2] {
        let stream = build_stream_seeded(&spec, stream_seed(&spec, seed)).unwrap();
        let mut suta = Suta::new(pre.clone(), cfg).unwrap();
        let mut dsuta = Dsuta::new(pre.clone(), cfg, ResetPolicy::None).unwrap();
        for u in &stream.utterances {
            let a = suta.step(&u.features).unwrap();
            let b = dsuta.step(&u.features).unwrap();
            counted += 1;
            if a.prediction != b.prediction || a.adapted_loss_trace != b.adapted_loss_trace {
                mismatches += 1;
            }
        }
        assert_eq!(dsuta.meta_params(), &pre);
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches over {counted} samples (3 seeds)"))
}

// 4. Loss laws on random probability matrices.
fn loss_laws() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad_range = 0;
    let mut worst_mix: f64 = 0.0;
    for _ in 0..10_000 {
        let l = rng.random_range(1..40);
        let c = rng.random_range(2..24);
        let spread = rng.random_range(0.0..8.0);
        let data = (0..l * c).map(|_| spread * gauss(&mut rng)).collect();
        let logits = LogitMatrix::new(data, l, c).unwrap();
        let t = rng.random_range(0.5..4.0);
        let probs = temperature_softmax(&logits, t).unwrap();
        let em = entropy_loss(&probs);
        if !(0.0..=(c as f64).ln() + 1e-12).contains(&em) {
            bad_range += 1;
        }
        let alpha = rng.random_range(0.0..=1.0);
        let b = suta_loss_from_logits(&logits, alpha, t).unwrap();
        worst_mix = worst_mix.max((b.total - (alpha * b.em + (1.0 - alpha) * b.mcc)).abs());
    }
    let mut nonzero_mcc = 0;
    for _ in 0..1000 {
        let l = rng.random_range(1..40);
        let c = rng.random_range(2..24);
        let k = rng.random_range(0..c);
        let mut data = vec![0.0; l * c];
        (0..l).for_each(|i| data[i * c + k] = 1.0);
        if mcc_loss(&ProbMatrix::new(data, l, c).unwrap()) != 0.0 {
            nonzero_mcc += 1;
        }
    }
    verdict(
        bad_range == 0 && nonzero_mcc == 0 && worst_mix <= 1e-12,
        format!(
            "entropy out of [0, log C]: {bad_range}/10000, nonzero MCC on one-hot: {nonzero_mcc}/1000, \
             max mixture residual {worst_mix:.1e}"
        ),
    )
}

/// Standardized mean difference between OOD and in-domain indicator values,
/// each averaged over random windows of `w` samples.
fn standardized_gap(inside: &[f64], outside: &[f64], w: usize, rng: &mut ChaCha8Rng) -> f64 {
    let windows = |v: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        if w == 1 {
            return v.to_vec();
        }
        (0..500)
            .map(|_| {
                let idx = rand::seq::index::sample(rng, v.len(), w);
                idx.iter().map(|i| v[i]).sum::<f64>() / w as f64
            })
            .collect()
    };
    let (a, b) = (windows(inside, rng), windows(outside, rng));
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var)
    };
    let ((ma, va), (mb, vb)) = (stats(&a), stats(&b));
    (mb - ma) / ((va + vb) / 2.0).sqrt()
}

// 5. LII separates in-domain from out-of-domain samples; ablated indicators
// separate worse.
fn lii_separation() -> Verdict {
    let spec = stream_spec("md-hard");
    let gen = UtteranceGenerator::new(&spec.task).unwrap();
    let pre = fit_source_model(&spec.task, 2000, 99).unwrap();
    let adapt = dsuta_adapt();
    let (alpha, temp) = (adapt.alpha, adapt.temperature);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    // In-domain: the additive-noise domain. Out-of-domain: the other four.
    let home = spec.domain("hum").unwrap();
    let others: Vec<_> = spec.domains.iter().filter(|d| d.id != home.id).collect();
    let mut draw =
        |d, n| -> Vec<FeatureSequence> { (0..n).map(|_| gen.generate(d, 1, &mut rng).unwrap().features).collect() };
    let train = draw(home, 100);
    let held_in = draw(home, 400);
    let held_out: Vec<FeatureSequence> = others.iter().flat_map(|d| draw(d, 400 / others.len())).collect();

    // Domain model: 100 mini-batch steps of the slow optimizer over the
    // 100 in-domain training samples.
    let mut phi_d = pre.clone();
    let mut slow = Optimizer::new(adapt.slow).unwrap();
    let m = adapt.buffer_size;
    for step in 0..100 {
        let start = (step * m) % train.len();
        let batch = &train[start..start + m];
        let (_, g) = fastslow_tta::objective::batched_suta_loss_grad(&phi_d, batch, alpha, temp).unwrap();
        slow.step(&mut phi_d, &g).unwrap();
    }

    let loss = |p: &ParamSet, x: &FeatureSequence| suta_loss(p, x, alpha, temp).unwrap().total;
    let indicators = |xs: &[FeatureSequence]| {
        let mut lii_v = Vec::new();
        let mut raw = Vec::new();
        let mut post = Vec::new();
        for x in xs {
            lii_v.push(lii(&phi_d, &pre, x, alpha, temp).unwrap());
            raw.push(loss(&phi_d, x));
            let a_d = suta_adapt(&phi_d, x, &adapt).unwrap();
            let a_pre = suta_adapt(&pre, x, &adapt).unwrap();
            post.push(loss(&a_d, x) - loss(&a_pre, x));
        }
        (lii_v, raw, post)
    };
    let (lii_in, raw_in, post_in) = indicators(&held_in);
    let (lii_out, raw_out, post_out) = indicators(&held_out);

    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let g1 = standardized_gap(&lii_in, &lii_out, 1, &mut rng);
    let g5 = standardized_gap(&lii_in, &lii_out, 5, &mut rng);
    let g20 = standardized_gap(&lii_in, &lii_out, 20, &mut rng);
    let g_raw = standardized_gap(&raw_in, &raw_out, 5, &mut rng);
    let g_post = standardized_gap(&post_in, &post_out, 5, &mut rng);
    verdict(
        g5 >= 3.0 && g1 < g5 && g20 >= g5 && g_raw < g5 && g_post < g5,
        format!(
            "gap window5 {g5:.2} (>= 3), single {g1:.2}, window20 {g20:.2}, \
             unnormalized {g_raw:.2}, post-adaptation {g_post:.2}"
        ),
    )
}

fn reset_times(spec: &StreamSpec, cfg: &RunConfig, pre: &ParamSet, run: u64) -> Vec<u64> {
    let stream = build_stream_seeded(spec, stream_seed(spec, run)).unwrap();
    let mut c = build_controller(cfg, pre, &BTreeSet::new()).unwrap();
    let (records, _, err) = drive(c.as_mut(), &stream);
    assert!(err.is_none());
    records.iter().filter(|r| r.reset_fired).map(|r| r.t).collect()
}

// 6. Detector false positives, detection delay and the construction guard.
fn detector_behavior() -> Verdict {
    let stationary = stream_spec("stationary");
    let jump = stream_spec("severity-jump");
    let mut cfg = RunConfig::new(Method::Dsuta, ResetConfig::Dynamic { construction: 100, patience: 2 }, dsuta_adapt());
    cfg.adapt.steps = 5;
    let pre = fit_source_model(&stationary.task, 2000, 99).unwrap();
    let k = 100u64;
    let m = cfg.adapt.buffer_size as u64;
    let mut guard_violations = 0;
    let mut check_guard = |times: &[u64]| {
        let mut last = 0;
        for &t in times {
            if t <= last + k {
                guard_violations += 1;
            }
            last = t;
        }
    };

    let mut false_runs = 0;
    for run in 0..100 {
        let times = reset_times(&stationary, &cfg, &pre, run);
        check_guard(&times);
        false_runs += usize::from(!times.is_empty());
    }
    let mut detected = 0;
    for run in 0..100 {
        let times = reset_times(&jump, &cfg, &pre, run);
        check_guard(&times);
        detected += usize::from(times.iter().any(|&t| t > 600 && t <= 600 + 10 * m));
    }
    verdict(
        false_runs <= 5 && detected >= 95 && guard_violations == 0,
        format!(
            "stationary runs with a reset: {false_runs}/100 (<= 5), \
             shifts detected within {} samples: {detected}/100 (>= 95), \
             resets inside construction: {guard_violations}",
            10 * m
        ),
    )
}

// 7. Method ordering on the shipped hard and long streams.
fn directional_benchmark() -> Verdict {
    let ter = |name: &str| experiment(name).token_error_rate;
    let (src, suta, dsuta, dynamic) =
        (ter("md-hard-source"), ter("md-hard-suta"), ter("md-hard-dsuta"), ter("md-hard-dsuta-dynamic"));
    let (long_dyn, long_fixed) = (ter("md-long-dsuta-dynamic"), ter("md-long-dsuta-fixed"));
    verdict(
        dsuta < suta && suta < src && dynamic <= dsuta && long_dyn <= long_fixed,
        format!(
            "hard: dsuta {dsuta:.4} < suta {suta:.4} < source {src:.4}, dynamic {dynamic:.4} <= dsuta; \
             long: dynamic {long_dyn:.4} <= fixed(50) {long_fixed:.4}"
        ),
    )
}

// 8. Fast domain transitions: boundary resets hurt more than dynamic resets.
fn transition_rate() -> Verdict {
    let oracle = experiment("md-hard-s20-dsuta-oracle").token_error_rate;
    let dynamic = experiment("md-hard-s20-dsuta-dynamic").token_error_rate;
    verdict(oracle > dynamic, format!("s=20: oracle {oracle:.4} > dynamic {dynamic:.4}"))
}

fn hash_dir(dir: &Path) -> String {
    let mut h = Sha256::new();
    for f in ["summary.json", "records.jsonl", "curve.csv"] {
        h.update(std::fs::read(dir.join(f)).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// 9. Replays are bit-identical.
fn determinism() -> Verdict {
    let mut same = true;
    let mut detail = Vec::new();
    for name in ["md-hard-s20-dsuta-dynamic", "md-easy-csuta", "md-easy-dsuta-fixed"] {
        let a = experiment(name);
        let b = experiment(name);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_report(&a, da.path()).unwrap();
        write_report(&b, db.path()).unwrap();
        let ok = a.digest() == b.digest() && hash_dir(da.path()) == hash_dir(db.path());
        same &= ok;
        detail.push(format!("{name} {}", &a.digest()[..12]));
    }
    verdict(same, format!("replayed digests equal: {same} ({})", detail.join(", ")))
}

type Criterion = (u32, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "step counts", step_counts),
        (2, "gradient correctness", gradient_check),
        (3, "degeneration to per-sample adaptation", degeneration),
        (4, "loss laws", loss_laws),
        (5, "LII separation", lii_separation),
        (6, "detector behavior", detector_behavior),
        (7, "directional benchmark", directional_benchmark),
        (8, "transition rate", transition_rate),
        (9, "determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("acceptance {id} {status} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
