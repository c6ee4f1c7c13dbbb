//! `mspn` command line tool: synthesise data, train, evaluate, ablate and
//! gradient-check.

use clap::{Args, Parser, Subcommand};
use mspn::baseline::{PatchNet, DEFAULT_EVAL_SEED};
use mspn::data::{
    load_dataset, load_dataset_with, synth_generate, write_synth, DatasetManifest, Preprocess, Sample, Split, SynthSpec,
    PATCH_SOURCE_HEIGHT,
};
use mspn::experiment::{ablation_table, evaluate_baseline, fit_baseline, fit_variant, run_ablation, ExperimentConfig};
use mspn::gradcheck::{run_gradcheck, TOLERANCE};
use mspn::optim::{EpochRecord, TrainConfig, TrainHistory};
use mspn::{Architecture, Error, MspnConfig, NetworkGraph, PoolMode, Variant, VariantOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "mspn", version, about = "Script identification with spatially-sensitive pooling networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic corpus as PNG files.
    Synth(SynthArgs),
    /// Train one pooling-network variant on DATA/train.
    Train(TrainArgs),
    /// Evaluate a checkpoint on DATA/test and write reports.
    Eval(EvalArgs),
    /// Train and evaluate all six pooling configurations.
    Ablate(AblateArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Train the patch-averaging baseline.
    BaselineTrain(BaselineTrainArgs),
    /// Evaluate a patch-network checkpoint by patch averaging.
    BaselineEval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    shared_frac: f64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

/// Hyper-parameters shared by every training subcommand.
#[derive(Args, Debug, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 500)]
    max_epochs: usize,
    #[arg(long, env = "MSPN_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "max")]
    pool_mode: String,
    /// Output maps of conv1..conv4, comma separated.
    #[arg(long, default_value = "96,256,384,512")]
    channels: String,
    /// Widths of fc1 and fc2, comma separated.
    #[arg(long, default_value = "1024,1024")]
    fc: String,
    /// fc2 width of the reduced-width table row.
    #[arg(long, default_value_t = 512)]
    starred_fc2: usize,
    /// Fraction of each training class held out for validation.
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "MSPN")]
    variant: String,
    /// Epoch history as JSON lines; defaults to OUT with `.history.jsonl`.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct BaselineTrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Seed for test-time patch sampling (patch networks only).
    #[arg(long, default_value_t = DEFAULT_EVAL_SEED)]
    eval_seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random shapes per layer kind (at least 20).
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn flag_error(flag: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("--{flag}: {msg}"))
}

fn parse_list<const N: usize>(flag: &str, s: &str) -> Result<[usize; N], Error> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| flag_error(flag, format!("{s:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| flag_error(flag, format!("expected {N} comma-separated integers, got {s:?}")))
}

impl HyperArgs {
    fn experiment(&self) -> Result<ExperimentConfig, Error> {
        let ssp_mode: PoolMode = self.pool_mode.parse().map_err(|e| flag_error("pool-mode", e))?;
        let base = MspnConfig {
            channels: parse_list("channels", &self.channels)?,
            fc_widths: parse_list("fc", &self.fc)?,
            ssp_mode,
            ..MspnConfig::default()
        };
        base.validate().map_err(|e| flag_error("channels/--fc", e))?;
        if self.starred_fc2 == 0 {
            return Err(flag_error("starred-fc2", "must be positive"));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(flag_error("val-frac", format!("{} not in (0, 1)", self.val_frac)));
        }
        let train = TrainConfig {
            initial_lr: self.lr,
            momentum: self.momentum,
            plateau_patience: self.patience,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            workers: self.workers,
            ..TrainConfig::default()
        };
        let checks: [(&str, bool, &str); 5] = [
            ("lr", self.lr > 0.0 && self.lr.is_finite(), "must be positive"),
            ("momentum", (0.0..1.0).contains(&self.momentum), "must be in [0, 1)"),
            ("patience", self.patience > 0, "must be positive"),
            ("batch-size", self.batch_size > 0, "must be positive"),
            ("workers", self.workers > 0, "must be positive"),
        ];
        for (flag, ok, msg) in checks {
            if !ok {
                return Err(flag_error(flag, msg));
            }
        }
        train.validate()?;
        Ok(ExperimentConfig {
            base,
            variant_options: VariantOptions {
                starred_fc2: self.starred_fc2,
                ..VariantOptions::default()
            },
            train,
            val_fraction: self.val_frac,
        })
    }
}

fn log_epoch(tag: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r| {
        log::info!(
            "{tag} epoch {:>3}  loss {:.4}  val error {:.4}  lr {:e}",
            r.epoch,
            r.train_loss,
            r.val_error,
            r.lr
        )
    }
}

fn write_history(history: &TrainHistory, explicit: Option<&PathBuf>, model: &Path) -> Result<PathBuf, Error> {
    let path = explicit.cloned().unwrap_or_else(|| model.with_extension("history.jsonl"));
    let mut buf = Vec::new();
    history.write_jsonl(&mut buf)?;
    std::fs::write(&path, buf).map_err(|source| Error::Io { path: path.clone(), source })?;
    Ok(path)
}

fn describe(manifest: &DatasetManifest) {
    log::info!(
        "{}: {} images in {} classes{}{}",
        manifest.root.join(manifest.split.dir_name()).display(),
        manifest.total(),
        manifest.class_names.len(),
        if manifest.skipped > 0 { format!(", {} unreadable files skipped", manifest.skipped) } else { String::new() },
        if manifest.siw10_verified { ", counts match SIW-10" } else { "" }
    );
}

fn load(root: &Path, split: Split, prep: Option<Preprocess>) -> Result<(Vec<Sample>, DatasetManifest), Error> {
    let (samples, manifest) = match prep {
        Some(p) => load_dataset_with(root, split, &p)?,
        None => load_dataset(root, split)?,
    };
    describe(&manifest);
    Ok((samples, manifest))
}

fn patch_source() -> Preprocess {
    Preprocess {
        height: PATCH_SOURCE_HEIGHT,
        min_width: 1,
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<(), Error> {
    if !(0.0..1.0).contains(&a.shared_frac) {
        return Err(flag_error("shared-frac", format!("{} not in [0, 1)", a.shared_frac)));
    }
    if a.train_per_class == 0 {
        return Err(flag_error("train-per-class", "must be positive"));
    }
    let spec = SynthSpec {
        n_classes: a.classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        shared_fraction: a.shared_frac,
        seed: a.seed,
        ..SynthSpec::default()
    };
    spec.validate().map_err(|e| flag_error("shared-frac/--classes", e))?;
    let corpus = synth_generate(&spec)?;
    write_synth(&a.out, &corpus)?;
    println!(
        "wrote {} train and {} test images in {} classes to {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.class_names.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), Error> {
    let variant: Variant = a.variant.parse().map_err(|e| flag_error("variant", e))?;
    let cfg = a.hyper.experiment()?;
    let (train, manifest) = load(&a.data, Split::Train, None)?;
    let tag = variant.to_string();
    let (model, history) = fit_variant(variant, &train, &manifest.class_names, &cfg, log_epoch(&tag))?;
    mspn::save_checkpoint(&model, &a.out)?;
    let hist = write_history(&history, a.history.as_ref(), &a.out)?;
    let best = history.epochs.iter().find(|r| r.epoch == history.best_epoch);
    println!(
        "{variant}: {} epochs, best epoch {} (val error {}), model {}, history {}",
        history.epochs.len(),
        history.best_epoch,
        best.map_or("n/a".to_string(), |r| format!("{:.4}", r.val_error)),
        a.out.display(),
        hist.display()
    );
    Ok(())
}

fn print_eval(e: &mspn::Evaluation, report: &Path) {
    println!("accuracy {:.4}  average error {:.4}", e.accuracy, e.avg_error);
    for (name, acc) in e.confusion.class_names.iter().zip(&e.per_class) {
        match acc {
            Some(a) => println!("  {name:<12} {a:.4}"),
            None => println!("  {name:<12} n/a"),
        }
    }
    println!("reports written to {}", report.display());
}

fn check_names(model: &[String], data: &[String], model_path: &Path) -> Result<(), Error> {
    if model != data {
        return Err(Error::Config(format!(
            "{}: model classes {model:?} differ from dataset classes {data:?}",
            model_path.display()
        )));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, patch_only: bool) -> Result<(), Error> {
    let graph: NetworkGraph<f32> = mspn::load_checkpoint(&a.model).map_err(|e| match e {
        Error::Checkpoint { offset, reason } => Error::Checkpoint {
            offset,
            reason: format!("{}: {reason}", a.model.display()),
        },
        other => other,
    })?;
    let evaluation = match graph.architecture() {
        Architecture::Mspn(_) if patch_only => {
            return Err(Error::Config(format!("{}: not a patch-network checkpoint", a.model.display())))
        }
        Architecture::Mspn(_) => {
            let (test, m) = load(&a.data, Split::Test, None)?;
            check_names(graph.class_names(), &m.class_names, &a.model)?;
            mspn::evaluate(&graph, &mspn::data::to_inputs(&test))?
        }
        Architecture::Patch(_) => {
            let (test, m) = load(&a.data, Split::Test, Some(patch_source()))?;
            check_names(graph.class_names(), &m.class_names, &a.model)?;
            evaluate_baseline(&PatchNet::from_graph(graph)?, &test, a.eval_seed)?
        }
    };
    evaluation.write_reports(&a.report)?;
    print_eval(&evaluation, &a.report);
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<(), Error> {
    let cfg = a.hyper.experiment()?;
    let (train, manifest) = load(&a.data, Split::Train, None)?;
    let (test, tm) = load(&a.data, Split::Test, None)?;
    check_names(&manifest.class_names, &tm.class_names, &a.data)?;
    let rows = run_ablation(&train, &test, &manifest.class_names, &cfg, |r| {
        log::info!("{}: average error {:.4}", r.variant, r.avg_error)
    })?;
    let table = ablation_table(&rows);
    std::fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "method": r.variant.name(),
                "configuration": r.variant.configuration(),
                "avg_error": r.avg_error,
                "accuracy": r.accuracy,
                "epochs": r.epochs,
            })
        })
        .collect();
    for (file, body) in [
        ("ablation.txt", table.clone()),
        ("ablation.json", serde_json::to_string_pretty(&json)? + "\n"),
    ] {
        let path = a.out.join(file);
        std::fs::write(&path, body).map_err(|source| Error::Io { path, source })?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_baseline_train(a: &BaselineTrainArgs) -> Result<(), Error> {
    let cfg = a.hyper.experiment()?;
    let (train, manifest) = load(&a.data, Split::Train, Some(patch_source()))?;
    let (model, history) = fit_baseline(&train, &manifest.class_names, &cfg, log_epoch("CNN-Simple"))?;
    mspn::save_checkpoint(model.graph(), &a.out)?;
    let hist = write_history(&history, a.history.as_ref(), &a.out)?;
    println!(
        "CNN-Simple: {} epochs, best epoch {}, model {}, history {}",
        history.epochs.len(),
        history.best_epoch,
        a.out.display(),
        hist.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool, Error> {
    let report = run_gradcheck(a.trials, a.seed)?;
    println!("{:<14} {:>6} {:>7} {:>7} {:>12}", "kind", "shapes", "coords", "skipped", "max rel err");
    for e in &report.entries {
        let mark = if e.max_rel_error < TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<14} {:>6} {:>7} {:>7} {:>12.3e}  {mark}", e.kind, e.shapes, e.coords, e.skipped, e.max_rel_error);
    }
    Ok(report.passed())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) => 3,
        _ => 2,
    }
}

/// Dispatches parsed arguments; returns the process exit status.
fn run(cli: Cli) -> u8 {
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| 0),
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Eval(a) => cmd_eval(a, false).map(|_| 0),
        Command::Ablate(a) => cmd_ablate(a).map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|ok| if ok { 0 } else { 3 }),
        Command::BaselineTrain(a) => cmd_baseline_train(a).map(|_| 0),
        Command::BaselineEval(a) => cmd_eval(a, true).map(|_| 0),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(run(cli))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn list_flags_parse() {
        assert_eq!(parse_list::<2>("fc", "64, 32").unwrap(), [64, 32]);
        let err = parse_list::<4>("channels", "1,2,3").unwrap_err();
        assert!(err.to_string().contains("--channels"));
        assert!(parse_list::<2>("fc", "a,b").unwrap_err().to_string().contains("--fc"));
    }

    #[test]
    fn contract_errors_map_to_three() {
        assert_eq!(exit_code(&Error::Contract("x".into())), 3);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
    }

    #[test]
    fn bad_hyper_parameters_name_their_flag() {
        let cli = Cli::try_parse_from(["mspn", "ablate", "--data", "d", "--out", "o", "--momentum", "1.5"]).unwrap();
        let Command::Ablate(a) = cli.command else { unreachable!() };
        assert!(a.hyper.experiment().unwrap_err().to_string().contains("--momentum"));
        let cli = Cli::try_parse_from(["mspn", "ablate", "--data", "d", "--out", "o", "--pool-mode", "median"]).unwrap();
        let Command::Ablate(a) = cli.command else { unreachable!() };
        assert!(a.hyper.experiment().unwrap_err().to_string().contains("--pool-mode"));
    }
}
