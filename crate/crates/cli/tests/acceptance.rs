//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p xdvmr-cli --test acceptance` runs everything; pass
//! criterion numbers as arguments (`-- 1 4 5`) to run a subset.

// The oracles are deliberately written as plain index loops.
#![allow(clippy::needless_range_loop)]

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdvmr_core::eval::{evaluate, EvalConfig};
use xdvmr_core::gradsuite::{run_suite, SuiteOptions, TOLERANCE};
use xdvmr_core::losses::{mean_of_rows, mmd, std_of_means, triplet_loss, Bandwidth, MmdConfig, MmdVariant};
use xdvmr_core::objective::Ablation;
use xdvmr_core::synth::{generate, GenConfig, Preset};
use xdvmr_core::{
    expand_moment, main_train, mean_iou, pretrain, recall_at, temporal_iou, DomainDataset, Execution, ModelConfig,
    ModelParams, MomentBoundary, ScoreSequence, TrainConfig,
};

type Criterion = (u32, &'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// 1. gradient suite

fn gradient_suite() -> Verdict {
    let report = match run_suite(&SuiteOptions::default()) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("suite errored: {e}")),
    };
    let required = ["L_SL", "L_DV", "L_DQ", "L_M1", "L_M2", "L_SA", "L_final"];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|n| !report.cases.iter().any(|c| c.name == *n))
        .collect();
    let worst = report.worst();
    let fast = report.elapsed <= Duration::from_secs(60);
    verdict(
        report.passed(TOLERANCE) && fast && missing.is_empty() && report.cases.iter().all(|c| c.instances == 100),
        format!(
            "{} cases x 100 instances, worst {} at {:.2e} (tolerance {TOLERANCE:e}), {:.1?}{}",
            report.cases.len(),
            worst.name,
            worst.max_rel_error,
            report.elapsed,
            if missing.is_empty() {
                String::new()
            } else {
                format!(", missing {missing:?}")
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. MMD oracle

fn points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

fn oracle_kernel(u: &[f64], w: &[f64], h: f64) -> f64 {
    let mut d2 = 0.0;
    for k in 0..u.len() {
        d2 += (u[k] - w[k]) * (u[k] - w[k]);
    }
    (-d2 / (2.0 * h * h)).exp()
}

fn oracle_median(u: &[Vec<f64>], w: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = u.iter().chain(w).collect();
    let mut d = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let mut s = 0.0;
            for k in 0..all[i].len() {
                s += (all[i][k] - all[j][k]) * (all[i][k] - all[j][k]);
            }
            d.push(s.sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0
    };
    m.max(1e-6)
}

fn oracle_mmd(u: &[Vec<f64>], w: &[Vec<f64>], h: f64, cross: f64) -> f64 {
    let mean = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += oracle_kernel(x, y, h);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    mean(u, u) + mean(w, w) + cross * mean(u, w)
}

fn mmd_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_std, mut worst_lit, mut worst_self, mut worst_sym) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut cases = 0;
    for n in 1..=6 {
        for m in 1..=6 {
            for rep in 0..4 {
                let d = 1 + (n + m + rep) % 5;
                let u = points(&mut rng, n, d);
                let w = points(&mut rng, m, d);
                let fixed = rng.random_range(0.3..3.0);
                for (bandwidth, h) in [
                    (Bandwidth::Median, oracle_median(&u, &w)),
                    (Bandwidth::Fixed(fixed), fixed),
                ] {
                    let std = MmdConfig {
                        variant: MmdVariant::Standard,
                        bandwidth,
                    };
                    let lit = MmdConfig {
                        variant: MmdVariant::Literal,
                        bandwidth,
                    };
                    let a = mmd(&u, &w, std).unwrap();
                    worst_std = worst_std.max((a - oracle_mmd(&u, &w, h, -2.0)).abs());
                    worst_sym = worst_sym.max((a - mmd(&w, &u, std).unwrap()).abs());
                    worst_self = worst_self.max(mmd(&u, &u, std).unwrap().abs());
                    let l = mmd(&u, &w, lit).unwrap();
                    worst_lit = worst_lit.max((l - oracle_mmd(&u, &w, h, 1.0)).abs());
                    cases += 1;
                }
            }
        }
    }
    verdict(
        worst_std <= 1e-12 && worst_lit <= 1e-12 && worst_self <= 1e-10 && worst_sym <= 1e-12,
        format!(
            "{cases} cases, sizes 1..=6: standard {worst_std:.1e}, literal {worst_lit:.1e}, MMD(X,X) {worst_self:.1e}, symmetry {worst_sym:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. statistics and triplet oracles

fn statistics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mu, mut worst_sigma) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = rng.random_range(1..=8);
        let t = rng.random_range(1..=12);
        let rows = points(&mut rng, t, d);
        let mu = mean_of_rows(&rows).unwrap();
        for k in 0..d {
            let mut s = 0.0;
            for r in &rows {
                s += r[k];
            }
            worst_mu = worst_mu.max((mu[k] - s / t as f64).abs());
        }
        let sigma = std_of_means(&rows).unwrap();
        for k in 0..d {
            let mut mean = 0.0;
            for r in &rows {
                mean += r[k];
            }
            mean /= t as f64;
            let mut var = 0.0;
            for r in &rows {
                var += (r[k] - mean) * (r[k] - mean);
            }
            worst_sigma = worst_sigma.max((sigma[k] - (var / t as f64).sqrt()).abs());
        }
    }
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut triplets = 0;
    let mut worst_triplet = 0.0f64;
    for &margin in &[0.0, 0.2, 0.5] {
        for &p in &grid {
            for &n1 in &grid {
                for &n2 in &grid {
                    let hand = f64::max(0.0, margin - p + n1) + f64::max(0.0, margin - p + n2);
                    let got = triplet_loss(p, &[n1, n2], margin).unwrap();
                    worst_triplet = worst_triplet.max((got - hand).abs());
                    triplets += 1;
                }
            }
        }
    }
    verdict(
        worst_mu <= 1e-12 && worst_sigma <= 1e-12 && worst_triplet == 0.0,
        format!(
            "1000 cases: mu {worst_mu:.1e}, sigma {worst_sigma:.1e}; {triplets} triplets: max deviation {worst_triplet:.1e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. metrics oracle

fn frames(b: &MomentBoundary) -> Vec<usize> {
    (b.start..=b.end).collect()
}

fn brute_iou(a: &MomentBoundary, b: &MomentBoundary) -> f64 {
    let fa = frames(a);
    let fb = frames(b);
    let inter = fa.iter().filter(|f| fb.contains(f)).count();
    let mut union: Vec<usize> = fa.iter().chain(&fb).copied().collect();
    union.sort_unstable();
    union.dedup();
    inter as f64 / union.len() as f64
}

fn random_span(rng: &mut ChaCha8Rng, t: usize) -> MomentBoundary {
    let s = rng.random_range(0..t);
    let e = rng.random_range(s..t);
    MomentBoundary { start: s, end: e }
}

fn metrics_oracle() -> Verdict {
    let span = |s, e| MomentBoundary { start: s, end: e };
    let hand = temporal_iou(&span(3, 9), &span(3, 9)) == 1.0
        && temporal_iou(&span(0, 4), &span(5, 9)) == 0.0
        && temporal_iou(&span(10, 19), &span(15, 24)) == 1.0 / 3.0;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut truths = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..20 {
        let t = rng.random_range(8..=30);
        truths.push(random_span(&mut rng, t));
        let k = rng.random_range(1..=5);
        preds.push((0..k).map(|_| random_span(&mut rng, t)).collect::<Vec<_>>());
    }
    let mut exact = true;
    for n in [1, 2, 5] {
        for m in [0.1, 0.3, 0.5, 0.7] {
            let mut hits = 0;
            for (p, t) in preds.iter().zip(&truths) {
                let mut hit = false;
                for cand in p.iter().take(n) {
                    if brute_iou(cand, t) > m {
                        hit = true;
                    }
                }
                if hit {
                    hits += 1;
                }
            }
            exact &= recall_at(&preds, &truths, n, m).unwrap() == hits as f64 / 20.0;
        }
    }
    let top1: Vec<MomentBoundary> = preds.iter().map(|p| p[0]).collect();
    let mut total = 0.0;
    for (p, t) in top1.iter().zip(&truths) {
        total += brute_iou(p, t);
    }
    exact &= mean_iou(&top1, &truths).unwrap() == total / 20.0;
    verdict(
        hand && exact,
        format!(
            "hand IoU cases {}; recall/mIoU on 20-sample fixture {}",
            ok(hand),
            if exact { "exact" } else { "differ" }
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "WRONG"
    }
}

// ---------------------------------------------------------------------------
// 5. inference traces

fn inference_traces() -> Verdict {
    let s = |v: &[f64]| ScoreSequence::new(v.to_vec()).unwrap();
    let b = |sc: &ScoreSequence, th: f64| {
        let m = expand_moment(sc, th).unwrap();
        (m.start, m.end)
    };
    let traces = b(&s(&[0.2, 0.85, 1.0, 0.95, 0.3]), 0.9) == (2, 3)
        && b(&s(&[0.6; 9]), 1.0) == (0, 8)
        && b(&s(&[0.6; 9]), 0.35) == (0, 8)
        && b(&s(&[0.42]), 0.8) == (0, 0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=40);
        let scores = s(&(0..t).map(|_| rng.random_range(-0.2..1.0)).collect::<Vec<_>>());
        let mut th = [rng.random_range(0.01..=1.0), rng.random_range(0.01..=1.0)];
        th.sort_by(f64::total_cmp);
        let wide = expand_moment(&scores, th[0]).unwrap();
        let narrow = expand_moment(&scores, th[1]).unwrap();
        let peak = (0..t).fold(0, |best, i| {
            if scores.values()[i] > scores.values()[best] {
                i
            } else {
                best
            }
        });
        if !wide.contains_span(&narrow) || !narrow.contains(peak) {
            violations += 1;
        }
    }
    verdict(
        traces && violations == 0,
        format!("hand traces {}; nesting/peak violations {violations}/1000", ok(traces)),
    )
}

// ---------------------------------------------------------------------------
// 6 & 7. transfer experiment

const SEEDS: u64 = 5;

struct SeedRun {
    source: DomainDataset,
    target: DomainDataset,
    pretrained: ModelParams,
    source_only: f64,
    full: f64,
}

fn target_miou(model: &ModelParams, target: &DomainDataset) -> f64 {
    let config = EvalConfig {
        threshold: Preset::Charades.threshold(),
        ..EvalConfig::default()
    };
    evaluate(target, model, &config, Execution::Sequential)
        .unwrap()
        .report
        .miou
}

fn benchmark(seed: u64) -> GenConfig {
    let c = GenConfig::with_presets(Preset::Activity, Preset::Charades, seed);
    assert_eq!((c.source.count, c.target.count, c.shift.translation), (200, 200, 3.0));
    c
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

fn run_seed(seed: u64) -> SeedRun {
    let gen = benchmark(seed);
    let (source, target) = generate(&gen).unwrap();
    let model = ModelConfig {
        video_input_dim: gen.feature_dim,
        vocab_size: gen.vocab_size(),
        seed,
        ..ModelConfig::default()
    };
    let config = train_config(seed);
    let pretrained = pretrain(&source, model, &config).unwrap().model;
    let source_only = target_miou(&pretrained, &target);
    let adapted = main_train(&source, &target.unlabeled(), &pretrained, &config)
        .unwrap()
        .model;
    let full = target_miou(&adapted, &target);
    SeedRun {
        source,
        target,
        pretrained,
        source_only,
        full,
    }
}

fn transfer(runs: &[SeedRun], elapsed: Duration) -> Verdict {
    let n = runs.len() as f64;
    let so = runs.iter().map(|r| r.source_only).sum::<f64>() / n;
    let full = runs.iter().map(|r| r.full).sum::<f64>() / n;
    let gain = 100.0 * (full - so);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.1}->{:.1}", 100.0 * r.source_only, 100.0 * r.full))
        .collect();
    verdict(
        gain >= 5.0 && elapsed <= Duration::from_secs(600),
        format!(
            "mIoU Source-Only {:.2} vs full {:.2} (+{gain:.2} points; per seed {}) in {:.0?}",
            100.0 * so,
            100.0 * full,
            per_seed.join(", "),
            elapsed
        ),
    )
}

fn ablation(runs: &[SeedRun]) -> Verdict {
    let mut wins = 0;
    let mut detail = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let config = train_config(seed as u64);
        let variant = |a: Ablation| {
            let c = TrainConfig {
                weights: a.apply(&config.weights),
                ..config.clone()
            };
            let m = main_train(&r.source, &r.target.unlabeled(), &r.pretrained, &c)
                .unwrap()
                .model;
            target_miou(&m, &r.target)
        };
        let (no_da, no_sa) = (variant(Ablation::Da), variant(Ablation::Sa));
        if no_da < no_sa {
            wins += 1;
        }
        detail.push(format!("{:.1}<{:.1}", 100.0 * no_da, 100.0 * no_sa));
    }
    verdict(
        wins >= 3,
        format!(
            "w/o DA below w/o SA in {wins}/{} seeds ({})",
            runs.len(),
            detail.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. pipeline determinism

const PIPELINE: &str = r#"{
  "data": {
    "source": {"count": 40, "frames": [16, 24], "words": [4, 7], "moment_fraction": [0.25, 0.5]},
    "target": {"count": 40, "frames": [12, 20], "words": [3, 6], "moment_fraction": [0.15, 0.35]}
  },
  "train": {"epochs": 4, "batch_size": 8}
}"#;

fn xdvmr(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_xdvmr"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let p = |rel: &str| dir.join(rel).to_string_lossy().into_owned();
    fs::write(dir.join("cfg.json"), PIPELINE).map_err(|e| e.to_string())?;
    let cfg = p("cfg.json");
    xdvmr(&["gen-data", "--out", &p("data"), "--seed", "11", "--config", &cfg])?;
    xdvmr(&[
        "pretrain",
        "--source",
        &p("data/source"),
        "--out",
        &p("pre.json"),
        "--seed",
        "11",
        "--config",
        &cfg,
    ])?;
    xdvmr(&[
        "train",
        "--source",
        &p("data/source"),
        "--target",
        &p("data/target"),
        "--init",
        &p("pre.json"),
        "--out",
        &p("full.json"),
        "--seed",
        "11",
        "--config",
        &cfg,
    ])?;
    xdvmr(&[
        "eval",
        "--model",
        &p("full.json"),
        "--data",
        &p("data/target"),
        "--threshold",
        "0.9",
        "--report",
        &p("report.json"),
        "--samples-csv",
        &p("samples.csv"),
    ])
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if let Err(e) = pipeline(a.path()).and_then(|_| pipeline(b.path())) {
        return verdict(false, format!("pipeline failed: {e}"));
    }
    let artefacts = [
        "report.json",
        "samples.csv",
        "pre.json",
        "pre.bin",
        "pre.log.csv",
        "full.json",
        "full.bin",
        "full.log.csv",
    ];
    let differing: Vec<&str> = artefacts
        .iter()
        .copied()
        .filter(|f| fs::read(a.path().join(f)).ok() != fs::read(b.path().join(f)).ok())
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artefacts byte-identical across two runs", artefacts.len())
        } else {
            format!("differ: {differing:?}")
        },
    )
}

// ---------------------------------------------------------------------------
// 9. target boundaries cannot reach training

fn no_label_leakage() -> Verdict {
    let mut gen = benchmark(9);
    gen.source.count = 48;
    gen.target.count = 48;
    let (source, target) = generate(&gen).unwrap();
    let model = ModelParams::new(ModelConfig {
        video_input_dim: gen.feature_dim,
        vocab_size: gen.vocab_size(),
        seed: 9,
        ..ModelConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut corrupted = target.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for s in &mut corrupted.samples {
        s.boundary = if rng.random_bool(0.3) {
            None
        } else {
            Some(random_span(&mut rng, s.video.len()))
        };
    }
    assert_ne!(corrupted, target);
    let a = main_train(&source, &target.unlabeled(), &model, &config).unwrap();
    let b = main_train(&source, &corrupted.unlabeled(), &model, &config).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_params = bits(&a.model.to_flat()) == bits(&b.model.to_flat());
    let same_log = a.log.len() == b.log.len()
        && a.log.iter().zip(&b.log).all(|(x, y)| {
            bits(&[
                x.losses.total,
                x.losses.specific,
                x.grad_norm,
                x.validation.unwrap_or(0.0),
            ]) == bits(&[
                y.losses.total,
                y.losses.specific,
                y.grad_norm,
                y.validation.unwrap_or(0.0),
            ])
        });
    verdict(
        same_params && same_log,
        format!(
            "{} epochs; parameters {}, per-epoch losses {}",
            a.log.len(),
            if same_params { "bit-identical" } else { "DIFFER" },
            if same_log { "bit-identical" } else { "DIFFER" }
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |k: u32, name: &'static str, v: Verdict| {
        println!("{} [{k}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((k, name, v));
    };

    let cheap: [Criterion; 7] = [
        (1, "gradient suite", gradient_suite),
        (2, "MMD oracle", mmd_oracle),
        (3, "statistics oracles", statistics_oracle),
        (4, "metrics oracle", metrics_oracle),
        (5, "inference traces", inference_traces),
        (8, "pipeline determinism", determinism),
        (9, "no label leakage", no_label_leakage),
    ];
    for (k, name, f) in cheap {
        if run(k) {
            report(k, name, f());
        }
    }
    if run(6) || run(7) {
        let start = Instant::now();
        let runs: Vec<SeedRun> = (0..SEEDS).map(run_seed).collect();
        let elapsed = start.elapsed();
        if run(6) {
            report(6, "transfer experiment", transfer(&runs, elapsed));
        }
        if run(7) {
            report(7, "ablation ordering", ablation(&runs));
        }
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
