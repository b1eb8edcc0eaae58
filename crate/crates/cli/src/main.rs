//! `xdvmr` — generate synthetic domains, train, evaluate and grad-check.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 configuration or usage
//! error, 3 I/O error, 4 numeric failure, 5 dataset lacks boundaries.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use xdvmr_core::eval::{evaluate, save_samples_csv, Evaluation, OracleScorer};
use xdvmr_core::gradsuite::{run_suite, SuiteOptions, TOLERANCE};
use xdvmr_core::objective::Ablation;
use xdvmr_core::synth::{generate_with_latents, GenConfig, Preset};
use xdvmr_core::trainer::save_log_csv;
use xdvmr_core::{
    load_checkpoint, load_dataset, main_train, pretrain, save_checkpoint, save_dataset, top_n_moments, DomainDataset,
    Error, Execution, TrainOutcome,
};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "xdvmr", version, about = "Cross-domain video moment retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic source/target pair.
    GenData(GenDataArgs),
    /// Stage one: supervised training on the annotated source.
    Pretrain(PretrainArgs),
    /// Stage two: joint training on source and unannotated target.
    Train(TrainArgs),
    /// Localise every sample of a dataset and report R@n and mIoU.
    Eval(EvalArgs),
    /// Localise one sample and print the predicted moment.
    Infer(InferArgs),
    /// Compare every analytic gradient against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory; receives `source/` and `target/`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Source domain shape: activity, charades or tacos.
    #[arg(long)]
    profile: Option<String>,
    /// Target domain shape.
    #[arg(long)]
    target_profile: Option<String>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    source: Option<PathBuf>,
    /// Checkpoint manifest to write; weights and log go next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Stage-one checkpoint to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop one alignment term: da, ma or sa.
    #[arg(long)]
    ablate: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',')]
    iou: Option<Vec<f64>>,
    /// Comma-separated candidate counts.
    #[arg(long, value_delimiter = ',')]
    topn: Option<Vec<usize>>,
    /// Expansion threshold in (0, 1].
    #[arg(long)]
    threshold: Option<f64>,
    /// Metrics report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-sample predictions and IoU (CSV).
    #[arg(long)]
    samples_csv: Option<PathBuf>,
    /// Score with the annotated boundaries instead of a model.
    #[arg(long, hide = true)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample id within the dataset.
    #[arg(long)]
    sample: String,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Perturb the analytic gradient of one case (tests the checker).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

/// A command failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Manifest { .. } | Error::FileShape { .. } | Error::Csv(_) => 3,
            Error::NonFinite(_) => 4,
            Error::MissingAnnotation(_) => 5,
            _ => 2,
        };
        let message = match &e {
            Error::MissingAnnotation(id) => format!("sample {id} has no moment boundary"),
            _ => e.to_string(),
        };
        Failure { code, message }
    }
}

type CmdResult = std::result::Result<u8, Failure>;

fn usage(subcommand: &str, message: &str) -> Failure {
    let mut cmd = Cli::command();
    cmd.build();
    let help = cmd
        .find_subcommand_mut(subcommand)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    Failure {
        code: 2,
        message: format!("{message}\n\n{help}"),
    }
}

fn required(
    value: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    flag: &str,
    subcommand: &str,
) -> Result<PathBuf, Failure> {
    value
        .or_else(|| fallback.clone())
        .ok_or_else(|| usage(subcommand, &format!("missing required argument --{flag}")))
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let mut c = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        c.data.seed = seed;
        c.model.seed = seed;
        c.train.seed = seed;
    }
    Ok(c)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serialisable") + "\n";
    std::fs::write(path, text).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.csv")
}

fn save_outcome(outcome: &TrainOutcome, out: &Path) -> Result<(), Failure> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| {
            Failure::from(Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        })?;
    }
    save_checkpoint(&outcome.model, out)?;
    save_log_csv(&outcome.log, log_path(out))?;
    println!(
        "{} epochs, best epoch {}{}; checkpoint {}",
        outcome.log.len(),
        outcome.best_epoch,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        out.display()
    );
    Ok(())
}

fn gen_data(args: GenDataArgs) -> CmdResult {
    let c = load(&args.common)?;
    let out = required(args.out, &c.paths.out, "out", "gen-data")?;
    let mut gen: GenConfig = c.data;
    if let Some(p) = args.profile {
        gen.source = Preset::parse(&p)?.profile();
    }
    if let Some(p) = args.target_profile {
        gen.target = Preset::parse(&p)?.profile();
    }
    gen.validate()?;
    let g = generate_with_latents(&gen, Execution::default())?;
    save_dataset(&g.source, out.join("source"))?;
    save_dataset(&g.target, out.join("target"))?;
    println!(
        "wrote {} source and {} target samples (dim {}, vocab {}) to {}",
        g.source.len(),
        g.target.len(),
        gen.feature_dim,
        gen.vocab_size(),
        out.display()
    );
    Ok(0)
}

fn check_pair(source: &DomainDataset, target: &DomainDataset) -> Result<(), Failure> {
    if source.dim != target.dim || source.vocab_size != target.vocab_size {
        return Err(Error::Config(format!(
            "source (dim {}, vocab {}) and target (dim {}, vocab {}) disagree",
            source.dim, source.vocab_size, target.dim, target.vocab_size
        ))
        .into());
    }
    Ok(())
}

fn pretrain_cmd(args: PretrainArgs) -> CmdResult {
    let c = load(&args.common)?;
    let source_dir = required(args.source, &c.paths.source, "source", "pretrain")?;
    let out = required(args.out, &c.paths.out, "out", "pretrain")?;
    c.train.validate()?;
    let source = load_dataset(&source_dir)?;
    let mut model = c.model;
    model.video_input_dim = source.dim;
    model.vocab_size = source.vocab_size;
    let outcome = pretrain(&source, model, &c.train)?;
    save_outcome(&outcome, &out)?;
    Ok(0)
}

fn train_cmd(args: TrainArgs) -> CmdResult {
    let c = load(&args.common)?;
    let source_dir = required(args.source, &c.paths.source, "source", "train")?;
    let target_dir = required(args.target, &c.paths.target, "target", "train")?;
    let init = required(args.init, &c.paths.init, "init", "train")?;
    let out = required(args.out, &c.paths.out, "out", "train")?;
    let mut train = c.train;
    if let Some(a) = args.ablate {
        train.weights = Ablation::parse(&a)?.apply(&train.weights);
    }
    train.validate()?;
    let source = load_dataset(&source_dir)?;
    let target = load_dataset(&target_dir)?;
    check_pair(&source, &target)?;
    let model = load_checkpoint(&init)?;
    let outcome = main_train(&source, &target.unlabeled(), &model, &train)?;
    save_outcome(&outcome, &out)?;
    Ok(0)
}

fn eval_cmd(args: EvalArgs) -> CmdResult {
    let c = load(&args.common)?;
    let data = required(args.data, &c.paths.data, "data", "eval")?;
    let mut ec = c.eval;
    if let Some(v) = args.iou {
        ec.ious = v;
    }
    if let Some(v) = args.topn {
        ec.top_n = v;
    }
    if let Some(v) = args.threshold {
        ec.threshold = v;
    }
    if ec.ious.is_empty() || ec.top_n.is_empty() || ec.top_n.contains(&0) {
        return Err(usage("eval", "--iou and --topn need at least one value, and n >= 1"));
    }
    if !(ec.threshold > 0.0 && ec.threshold <= 1.0) {
        return Err(Error::Config(format!("threshold {} outside (0, 1]", ec.threshold)).into());
    }
    let dataset = load_dataset(&data)?;
    let result: Evaluation = if args.oracle {
        evaluate(&dataset, &OracleScorer, &ec, Execution::default())?
    } else {
        let model_path = required(args.model, &c.paths.model, "model", "eval")?;
        let model = load_checkpoint(&model_path)?;
        evaluate(&dataset, &model, &ec, Execution::default())?
    };
    print!("{}", result.report.table());
    if let Some(path) = args.report.or(c.paths.report) {
        write_json(&result.report, &path)?;
    }
    if let Some(path) = args.samples_csv {
        save_samples_csv(&result.samples, &path)?;
    }
    Ok(0)
}

fn infer_cmd(args: InferArgs) -> CmdResult {
    let c = load(&args.common)?;
    let model_path = required(args.model, &c.paths.model, "model", "infer")?;
    let data = required(args.data, &c.paths.data, "data", "infer")?;
    let threshold = args.threshold.unwrap_or(c.eval.threshold);
    let dataset = load_dataset(&data)?;
    let sample = dataset.samples.iter().find(|s| s.id == args.sample).ok_or_else(|| {
        Failure::from(Error::Config(format!(
            "no sample `{}` in {}",
            args.sample,
            data.display()
        )))
    })?;
    let model = load_checkpoint(&model_path)?;
    let scores = model.frame_scores(&sample.video, &sample.query)?;
    let best = top_n_moments(&scores, threshold, 1)?[0];
    let record = serde_json::json!({
        "start": best.start,
        "end": best.end,
        "peak_score": best.peak_score,
        "threshold": threshold,
    });
    println!("{record}");
    Ok(0)
}

fn grad_check(args: GradCheckArgs) -> CmdResult {
    if args.instances == 0 {
        return Err(usage("grad-check", "--instances must be at least 1"));
    }
    let report = run_suite(&SuiteOptions {
        seed: args.seed,
        instances: args.instances,
        corrupt: args.corrupt,
        ..SuiteOptions::default()
    })?;
    for c in &report.cases {
        println!(
            "{:<22} {:>7} entries  max rel err {:.3e}",
            c.name, c.entries, c.max_rel_error
        );
    }
    let worst = report.worst();
    println!(
        "worst: {} (instance {}, analytic {:.6e}, numeric {:.6e}, rel err {:.3e}) in {:.2?}",
        worst.name, worst.worst_instance, worst.analytic, worst.numeric, worst.max_rel_error, report.elapsed
    );
    if report.passed(TOLERANCE) {
        println!("PASS: max relative error {:.3e} <= {TOLERANCE:e}", worst.max_rel_error);
        Ok(0)
    } else {
        eprintln!(
            "FAIL: {} exceeds tolerance {TOLERANCE:e} with relative error {:.3e}",
            worst.name, worst.max_rel_error
        );
        Ok(1)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("XDVMR_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
