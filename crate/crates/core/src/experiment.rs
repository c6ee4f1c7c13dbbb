//! End-to-end runs shared by the command line tool and the test suites:
//! split, train, evaluate, and the ablation table.

use crate::baseline::{baseline_train, predict_images, PatchNet, DEFAULT_EVAL_SEED};
use crate::data::{stratified_split, to_inputs, Sample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_predictions, Evaluation};
use crate::graph::{MspnConfig, NetworkGraph, PatchNetConfig, Variant, VariantOptions};
use crate::optim::{train_with_callback, EpochRecord, TrainConfig, TrainHistory};
use std::fmt::Write as _;

/// Fraction of each training class held out to drive the schedule.
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub base: MspnConfig,
    pub variant_options: VariantOptions,
    pub train: TrainConfig,
    pub val_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            base: MspnConfig::default(),
            variant_options: VariantOptions::default(),
            train: TrainConfig::default(),
            val_fraction: DEFAULT_VAL_FRACTION,
        }
    }
}

impl ExperimentConfig {
    /// Copy with a different seed for initialisation, shuffling and the split.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }
}

pub struct RunResult<M> {
    pub model: M,
    pub history: TrainHistory,
    pub evaluation: Evaluation,
}

fn check_classes(train: &[Sample], class_names: &[String]) -> Result<()> {
    if let Some(s) = train.iter().find(|s| s.label >= class_names.len()) {
        return Err(Error::config(format!("sample {} has label {} beyond {} classes", s.source_id, s.label, class_names.len())));
    }
    Ok(())
}

/// Trains one table row on `train`, holding out a stratified validation part
/// that drives the schedule and model selection.
pub fn fit_variant(
    variant: Variant,
    train: &[Sample],
    class_names: &[String],
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NetworkGraph<f32>, TrainHistory)> {
    check_classes(train, class_names)?;
    let mut base = cfg.base.clone();
    base.n_classes = class_names.len();
    let mut net = NetworkGraph::<f32>::variant(variant, &base, &cfg.variant_options, cfg.train.seed)?;
    net.set_class_names(class_names.to_vec())?;
    let (fit, val) = stratified_split(train, cfg.val_fraction, cfg.train.seed);
    train_with_callback(&mut net, &to_inputs(&fit), &to_inputs(&val), &cfg.train, on_epoch)
}

/// [`fit_variant`] followed by scoring on `test`.
pub fn run_variant(
    variant: Variant,
    train: &[Sample],
    test: &[Sample],
    class_names: &[String],
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunResult<NetworkGraph<f32>>> {
    let (model, history) = fit_variant(variant, train, class_names, cfg, on_epoch)?;
    let evaluation = evaluate(&model, &to_inputs(test))?;
    Ok(RunResult {
        model,
        history,
        evaluation,
    })
}

/// Scores a patch network on whole images by patch averaging.
pub fn evaluate_baseline(net: &PatchNet<f32>, test: &[Sample], eval_seed: u64) -> Result<Evaluation> {
    let preds = predict_images(net, test, eval_seed)?;
    let pairs: Vec<(usize, usize)> = test.iter().zip(preds).map(|(s, p)| (s.label, p)).collect();
    evaluate_predictions(&pairs, net.graph().class_names())
}

/// Trains the patch baseline with the same conv and fc sizes as `cfg.base`.
pub fn fit_baseline(
    train: &[Sample],
    class_names: &[String],
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(PatchNet<f32>, TrainHistory)> {
    check_classes(train, class_names)?;
    let mut pcfg = PatchNetConfig::mirroring(&cfg.base);
    pcfg.n_classes = class_names.len();
    let mut net = PatchNet::<f32>::new(pcfg, cfg.train.seed)?;
    net.graph_mut().set_class_names(class_names.to_vec())?;
    let (fit, val) = stratified_split(train, cfg.val_fraction, cfg.train.seed);
    baseline_train(net, &fit, &val, &cfg.train, on_epoch)
}

/// [`fit_baseline`] followed by patch-averaged scoring on `test`.
pub fn run_baseline(
    train: &[Sample],
    test: &[Sample],
    class_names: &[String],
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunResult<PatchNet<f32>>> {
    let (model, history) = fit_baseline(train, class_names, cfg, on_epoch)?;
    let evaluation = evaluate_baseline(&model, test, DEFAULT_EVAL_SEED)?;
    Ok(RunResult {
        model,
        history,
        evaluation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub avg_error: f64,
    pub accuracy: f64,
    pub epochs: usize,
}

/// Fixed-width text table, one line per row in the given order.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<10}  {:<21}  {:>9}  {:>8}  {:>6}\n", "Method", "Configuration", "Avg error", "Accuracy", "Epochs");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10}  {:<21}  {:>8.2}%  {:>7.2}%  {:>6}",
            r.variant.name(),
            r.variant.configuration(),
            100.0 * r.avg_error,
            100.0 * r.accuracy,
            r.epochs
        );
    }
    s
}

/// Trains and scores all six rows in table order.
pub fn run_ablation(
    train: &[Sample],
    test: &[Sample],
    class_names: &[String],
    cfg: &ExperimentConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .into_iter()
        .map(|v| {
            let run = run_variant(v, train, test, class_names, cfg, |rec| {
                log::debug!("{v} epoch {} loss {:.4} val {:.4} lr {:e}", rec.epoch, rec.train_loss, rec.val_error, rec.lr)
            })?;
            let row = AblationRow {
                variant: v,
                avg_error: run.evaluation.avg_error,
                accuracy: run.evaluation.accuracy,
                epochs: run.history.epochs.len(),
            };
            on_row(&row);
            Ok(row)
        })
        .collect()
}
