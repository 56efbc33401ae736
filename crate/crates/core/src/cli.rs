//! Command-line surface. Exit codes: 0 ok, 1 usage, 2 validation or check
//! failure, 3 I/O.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{load_bundle, validate_bundle, DatasetBundle, ValidationMode, CLASSES_FILE};
use crate::error::{Error, Result};
use crate::format::{read_feature_matrix, FeatureMatrix};
use crate::gradcheck::{run_suite, LossKind, THRESHOLD};
use crate::inference::{predict_dataset, write_predictions_csv, EscalationPolicy, PredictOptions};
use crate::metrics::{score_predictions, PDenominator};
use crate::pca::{fit_pca, load_pca, save_pca};
use crate::prior::{compute_prototypes, load_prior, prior_training_set, save_prior, train_prior, PriorArtifact};
use crate::synthetic::{generate, write_synth, TEST_DIR, TRAIN_DIR};

pub const THREADS_ENV: &str = "VENOMGUARD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "venomguard", version, about = "Location prior, joint inference, venomous escalation and scoring")]
pub struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset directory (or a synth output with train/ and test/).
    Validate(ValidateArgs),
    /// Fit PCA to a feature matrix.
    Pca(PcaArgs),
    /// Train the location prior.
    TrainPrior(TrainPriorArgs),
    /// Predict one class per observation.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Score(ScoreArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic long-tailed dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub dir: PathBuf,
    /// `strict` fails on dangling references, `drop` reports and removes them.
    #[arg(long, default_value = "strict", value_parser = ["strict", "drop"])]
    pub mode: String,
    /// Accept rows without a class label.
    #[arg(long)]
    pub allow_unlabeled: bool,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    /// Input `VGF1` feature matrix.
    pub features: PathBuf,
    /// Components kept [default: pca.components, capped at the input rank bound].
    #[arg(short)]
    pub k: Option<usize>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    /// Labelled dataset directory with embeddings.vgf.
    pub dir: PathBuf,
    /// PCA model applied to metadata features.
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Per-epoch loss trace [default: <output>.trace.csv].
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// [default: prior.epochs = 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: prior.seed = 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: prior.lambda = 10]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// [default: prior.batch_size = 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: prior.hidden = 256]
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Dataset directory with logits.vgf.
    pub dir: PathBuf,
    /// Trained prior; omitted means image scores only.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Escalation confidence threshold [default: infer.tau = 0.5].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Disable venomous escalation.
    #[arg(long)]
    pub no_escalate: bool,
    /// Add pre-escalation class and top score columns.
    #[arg(long)]
    pub explain: bool,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// classes.csv, or a dataset directory containing one.
    #[arg(long)]
    pub classes: PathBuf,
    /// P1-P4 denominators: status, all or errors [default: metric.pdenom = status].
    #[arg(long)]
    pub pdenom: Option<PDenominator>,
    /// Average F1 over every class, including ones absent from the truth.
    #[arg(long)]
    pub f1_all_classes: bool,
    /// Also write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// ce, seesaw, rwwce or loc; all when omitted.
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// [default: synth.seed = 2023]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Rayon pool size from `VENOMGUARD_THREADS` (unset or 0 means automatic).
pub fn configure_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn load_validated(dir: &Path, allow_unlabeled: bool, mode: ValidationMode) -> Result<DatasetBundle> {
    let bundle = load_bundle(dir, allow_unlabeled)?;
    let (bundle, report) = validate_bundle(bundle, mode)?;
    if report.count() > 0 {
        log::warn!("{}: dropped {} observation rows", dir.display(), report.count());
    }
    Ok(bundle)
}

fn validate(args: &ValidateArgs) -> Result<String> {
    let mode = if args.mode == "drop" {
        ValidationMode::Drop
    } else {
        ValidationMode::Strict
    };
    let dirs: Vec<(PathBuf, bool)> = if args.dir.join(CLASSES_FILE).exists() {
        vec![(args.dir.clone(), args.allow_unlabeled)]
    } else if args.dir.join(TRAIN_DIR).is_dir() && args.dir.join(TEST_DIR).is_dir() {
        vec![(args.dir.join(TRAIN_DIR), false), (args.dir.join(TEST_DIR), true)]
    } else {
        return Err(Error::arg(format!("{}: not a dataset directory", args.dir.display())));
    };
    let mut out = String::new();
    for (dir, unlabeled) in dirs {
        let bundle = load_bundle(&dir, unlabeled)?;
        let rows = bundle.observations.len();
        let (bundle, report) = validate_bundle(bundle, mode)?;
        let _ = writeln!(
            out,
            "{}: {} classes, {} rows, {} observations, {} dropped",
            dir.display(),
            bundle.classes.len(),
            rows,
            bundle.observations.groups().len(),
            report.count()
        );
        for d in report.dropped.iter().take(10) {
            let _ = writeln!(out, "  row {} ({}): {}", d.row, d.observation_id, d.reason);
        }
    }
    Ok(out)
}

fn pca(args: &PcaArgs, cfg: &RunConfig) -> Result<String> {
    let x = read_feature_matrix(&args.features)?;
    let k = match args.k {
        Some(k) => k,
        None => {
            let cap = x.rows().min(x.dims());
            if cfg.pca_components > cap {
                log::warn!("pca.components {} exceeds min(n, d) = {cap}; using {cap}", cfg.pca_components);
            }
            cfg.pca_components.min(cap)
        }
    };
    let model = fit_pca(&x, k)?;
    save_pca(&model, &args.output)?;
    Ok(format!(
        "k = {}, d = {}, explained variance ratio = {:.6}\n",
        model.k(),
        model.input_dims(),
        model.explained_variance_ratio()
    ))
}

fn train(args: &TrainPriorArgs, cfg: &RunConfig) -> Result<String> {
    let bundle = load_validated(&args.dir, false, cfg.validation_mode)?;
    let emb = bundle.embeddings()?;
    let rows: Vec<&[f64]> = bundle.observations.rows.iter().map(|r| emb.row(r.image_index)).collect();
    let labels = bundle.observations.labels()?;
    let features = if rows.is_empty() {
        FeatureMatrix::zeros(0, emb.dims())
    } else {
        FeatureMatrix::from_rows(&rows)?
    };
    let prototypes = compute_prototypes(&features, &labels, bundle.classes.len(), cfg.normalize_prototypes)?;
    let pca = args.pca.as_ref().map(load_pca).transpose()?;
    let data = prior_training_set(&bundle, pca.as_ref())?;
    let outcome = train_prior(&data, &prototypes, &cfg.prior)?;
    let artifact = PriorArtifact {
        model: outcome.model,
        prototypes,
        pca,
    };
    save_prior(&artifact, &args.output)?;

    let trace_path = args.trace.clone().unwrap_or_else(|| {
        let mut p = args.output.clone().into_os_string();
        p.push(".trace.csv");
        PathBuf::from(p)
    });
    let mut trace = String::from("epoch,mean_loss\n");
    for (i, v) in outcome.loss_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{v}");
    }
    std::fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;
    let last = outcome.loss_trace.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained on {} examples, {} epochs, final mean loss {last:.6}\n",
        data.labels.len(),
        outcome.loss_trace.len()
    ))
}

fn infer(args: &InferArgs, cfg: &RunConfig) -> Result<String> {
    let bundle = load_validated(&args.dir, true, cfg.validation_mode)?;
    let prior = args.prior.as_ref().map(load_prior).transpose()?;
    let escalation = if args.no_escalate || !cfg.escalate {
        None
    } else {
        Some(match args.tau {
            Some(t) => EscalationPolicy::new(t, cfg.escalation.k)?,
            None => cfg.escalation,
        })
    };
    let opts = PredictOptions {
        escalation,
        score_kind: cfg.score_kind,
    };
    let run = predict_dataset(&bundle, prior.as_ref(), &opts)?;
    write_predictions_csv(&run.predictions, &args.output, args.explain)?;
    let changed = run.predictions.iter().filter(|p| p.class_id != p.pre_escalation).count();
    Ok(format!(
        "{} observations predicted, {changed} escalated, {} prior fallbacks\n",
        run.predictions.len(),
        run.fallbacks
    ))
}

fn score(args: &ScoreArgs, cfg: &RunConfig) -> Result<String> {
    let classes_path = if args.classes.is_dir() {
        args.classes.join(CLASSES_FILE)
    } else {
        args.classes.clone()
    };
    let classes = crate::data::parse_classes_csv(classes_path)?;
    let mut opts = cfg.metric;
    if let Some(p) = args.pdenom {
        opts.pdenom = p;
    }
    opts.f1_all_classes |= args.f1_all_classes;
    let report = score_predictions(&args.truth, &args.pred, &classes, &opts)?;
    if let Some(j) = &args.json {
        std::fs::write(j, report.to_json() + "\n").map_err(|e| Error::io(j, e))?;
    }
    Ok(report.to_text())
}

fn gradcheck(args: &GradcheckArgs) -> Result<String> {
    let kinds: Vec<LossKind> = args.loss.map_or_else(|| LossKind::ALL.to_vec(), |k| vec![k]);
    let mut out = String::new();
    let mut failed = Vec::new();
    for kind in kinds {
        let s = run_suite(kind, args.trials, args.seed)?;
        let _ = writeln!(
            out,
            "{:<7} trials {:>4}  max rel err {:.3e}  {}",
            kind.name(),
            s.trials,
            s.max_rel_err,
            if s.passed() { "PASS" } else { "FAIL" }
        );
        if !s.passed() {
            failed.push(format!(
                "{}: {} of {} trials above {THRESHOLD:e}",
                kind.name(),
                s.failures,
                s.trials
            ));
        }
    }
    if failed.is_empty() {
        Ok(out)
    } else {
        print!("{out}");
        Err(Error::validation(failed))
    }
}

fn synth(args: &SynthArgs, cfg: &RunConfig) -> Result<String> {
    let ds = generate(&cfg.synth)?;
    write_synth(&ds, &cfg.synth, &args.output)?;
    Ok(format!(
        "{} train / {} test observations written to {}\n",
        ds.train.observations.groups().len(),
        ds.truth.len(),
        args.output.display()
    ))
}

/// Resolves config and flag overrides, then runs the subcommand. Returns
/// the text printed on stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::TrainPrior(a) => {
            let p = &mut cfg.prior;
            p.epochs = a.epochs.unwrap_or(p.epochs);
            p.seed = a.seed.unwrap_or(p.seed);
            p.lambda = a.lambda.unwrap_or(p.lambda);
            p.batch_size = a.batch_size.unwrap_or(p.batch_size);
            p.hidden = a.hidden.unwrap_or(p.hidden);
        }
        Command::Infer(a) => {
            if let Some(t) = a.tau {
                cfg.escalation = EscalationPolicy::new(t, cfg.escalation.k)?;
            }
            cfg.escalate &= !a.no_escalate;
        }
        Command::Synth(a) => cfg.synth.seed = a.seed.unwrap_or(cfg.synth.seed),
        _ => {}
    }
    cfg.log_resolved();
    match &cli.command {
        Command::Validate(a) => validate(a),
        Command::Pca(a) => pca(a, &cfg),
        Command::TrainPrior(a) => train(a, &cfg),
        Command::Infer(a) => infer(a, &cfg),
        Command::Score(a) => score(a, &cfg),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a, &cfg),
    }
}
