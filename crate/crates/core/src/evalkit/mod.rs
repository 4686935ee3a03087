//! Splits, metrics, cross-validated probe evaluation and layer sweeps.

mod metrics;
mod report;
mod splits;

use rayon::prelude::*;
use thiserror::Error;

use crate::extract::{EmbeddingCache, ExtractError};
use crate::numkit::Tensor;
use crate::probe::{argmax, gather_rows, train_probe, ProbeError, ProbeKind, ProbeModel, Standardizer, TrainConfig};

pub use metrics::{accuracy, auc, auc_binary, macro_f1};
pub use report::{format_table, Aggregate, CellError, FoldMetrics, Metric, MetricReport, SweepReport};
pub use splits::{make_kfold_splits, make_loso_splits, Fold, SplitPlan};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split: {0}")]
    Split(String),
    #[error("cannot stratify: class {class} has {count} records, k = {k}")]
    Stratification { class: usize, count: usize, k: usize },
    #[error("AUC undefined: only one class present")]
    UndefinedAuc,
    #[error("metric: {0}")]
    Metric(String),
    #[error("no folds evaluated")]
    Empty,
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
}

/// Metrics for one fold from predicted class probabilities.
pub fn fold_metrics(fold: usize, f: &Fold, labels: &[usize], n_classes: usize, probs: &Tensor<f64>) -> Result<FoldMetrics, EvalError> {
    let y: Vec<usize> = f.test.iter().map(|&i| labels[i]).collect();
    let pred: Vec<usize> = (0..y.len()).map(|i| argmax(probs.row(i))).collect();
    let auc = match auc(&y, probs) {
        Ok(v) => Some(v),
        Err(EvalError::UndefinedAuc) => None,
        Err(e) => return Err(e),
    };
    Ok(FoldMetrics {
        fold,
        n_train: f.train.len(),
        n_test: f.test.len(),
        macro_f1: macro_f1(&y, &pred, n_classes),
        accuracy: accuracy(&y, &pred),
        auc,
    })
}

/// Runs `fit_predict` on every fold in parallel; it returns test-row class
/// probabilities. Fold order in the report follows the plan.
pub fn cross_validate<E, F>(
    plan: &SplitPlan,
    labels: &[usize],
    n_classes: usize,
    config: serde_json::Value,
    fit_predict: F,
) -> Result<MetricReport, E>
where
    E: From<EvalError> + Send,
    F: Fn(usize, &Fold) -> Result<Tensor<f64>, E> + Sync,
{
    let folds: Vec<FoldMetrics> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let probs = fit_predict(i, f)?;
            Ok(fold_metrics(i, f, labels, n_classes, &probs)?)
        })
        .collect::<Result<_, E>>()?;
    Ok(MetricReport::from_folds(config, folds).ok_or(EvalError::Empty)?)
}

/// Fits fold-local standardization (if enabled) and a probe on the train
/// rows, then scores the test rows.
pub fn probe_fold(
    x: &Tensor<f64>,
    labels: &[usize],
    n_classes: usize,
    fold: &Fold,
    kind: ProbeKind,
    train: &TrainConfig,
    standardize: bool,
) -> Result<(Tensor<f64>, ProbeModel<f64>), EvalError> {
    let tx = gather_rows(x, &fold.train);
    let ty: Vec<usize> = fold.train.iter().map(|&i| labels[i]).collect();
    let scaler = if standardize {
        Some(Standardizer::fit(&tx, &fold.train)?)
    } else {
        None
    };
    let tx = match &scaler {
        Some(s) => s.transform(&tx)?,
        None => tx,
    };
    let (mut model, _) = train_probe(&tx, &ty, n_classes, train, kind)?;
    model.standardizer = scaler;
    let probs = model.predict_batch(&gather_rows(x, &fold.test))?;
    Ok((probs, model))
}

/// Cross-validated probe evaluation on a fixed embedding matrix. The
/// trained per-fold models are returned alongside the report.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_probe(
    x: &Tensor<f64>,
    labels: &[usize],
    n_classes: usize,
    plan: &SplitPlan,
    kind: ProbeKind,
    train: &TrainConfig,
    standardize: bool,
    config: serde_json::Value,
) -> Result<(MetricReport, Vec<ProbeModel<f64>>), EvalError> {
    let results: Vec<(FoldMetrics, ProbeModel<f64>)> = plan
        .folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let (probs, model) = probe_fold(x, labels, n_classes, f, kind, train, standardize)?;
            Ok((fold_metrics(i, f, labels, n_classes, &probs)?, model))
        })
        .collect::<Result<_, EvalError>>()?;
    let (folds, models): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = MetricReport::from_folds(config, folds).ok_or(EvalError::Empty)?;
    Ok((report, models))
}

/// One probe per (layer, fold) cell, all cells in parallel. Failed cells
/// are reported and drop their layer from the aggregate.
#[allow(clippy::too_many_arguments)]
pub fn run_layer_sweep(
    cache: &EmbeddingCache,
    layers: &[usize],
    n_classes: usize,
    plan: &SplitPlan,
    kind: ProbeKind,
    train: &TrainConfig,
    standardize: bool,
    config: serde_json::Value,
) -> Result<SweepReport, EvalError> {
    let matrices: Vec<(usize, Tensor<f64>)> = layers
        .iter()
        .map(|&l| Ok((l, cache.matrix(l)?)))
        .collect::<Result<_, EvalError>>()?;
    let labels = cache.labels();
    let cells: Vec<(usize, usize)> = (0..matrices.len())
        .flat_map(|li| (0..plan.folds.len()).map(move |f| (li, f)))
        .collect();
    let outcomes: Vec<Result<FoldMetrics, EvalError>> = cells
        .par_iter()
        .map(|&(li, f)| {
            let fold = &plan.folds[f];
            let (probs, _) = probe_fold(&matrices[li].1, &labels, n_classes, fold, kind, train, standardize)?;
            fold_metrics(f, fold, &labels, n_classes, &probs)
        })
        .collect();

    let mut report = SweepReport {
        config: config.clone(),
        layers: Default::default(),
        errors: Vec::new(),
    };
    let mut outcomes = outcomes.into_iter();
    for (layer, _) in &matrices {
        let mut folds = Vec::new();
        let mut failed = false;
        for f in 0..plan.folds.len() {
            match outcomes.next().expect("one outcome per cell") {
                Ok(m) => folds.push(m),
                Err(e) => {
                    failed = true;
                    report.errors.push(CellError {
                        layer: *layer,
                        fold: f,
                        message: e.to_string(),
                        diverged: matches!(e, EvalError::Probe(ProbeError::Divergence { .. })),
                    });
                }
            }
        }
        if !failed {
            let mut echo = config.clone();
            if let Some(obj) = echo.as_object_mut() {
                obj.insert("layer".into(), (*layer).into());
            }
            if let Some(r) = MetricReport::from_folds(echo, folds) {
                report.layers.insert(*layer, r);
            }
        }
    }
    Ok(report)
}
