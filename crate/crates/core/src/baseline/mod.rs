//! Engineered features and a random-forest classifier.

mod features;
mod forest;

use rayon::prelude::*;
use thiserror::Error;

use crate::evalkit::{cross_validate, EvalError, MetricReport, SplitPlan};
use crate::ingest::{DatasetManifest, IngestError};
use crate::numkit::{Tensor, TensorError};
use crate::probe::gather_rows;

pub use features::{
    engineered_features, feature_names, pearson, power_spectrum, zero_crossing_rate, FeatureVector, CHANNEL_FEATURES,
};
pub use forest::{train_forest, tree_rng, Forest, ForestConfig, MaxFeatures, Node, Tree};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("window of {0} samples is too short for feature extraction")]
    WindowTooShort(usize),
    #[error("forest config: {0}")]
    Config(String),
    #[error("labels: {0}")]
    Labels(String),
    #[error("record {record}: {source}")]
    Record {
        record: usize,
        #[source]
        source: Box<BaselineError>,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Features for every manifest record at the native sample rate, rows in
/// record order.
pub fn feature_matrix(manifest: &DatasetManifest) -> Result<Tensor<f64>, BaselineError> {
    let rows: Vec<Vec<f64>> = (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let w = manifest.load_window(i)?;
            engineered_features(&w)
                .map(|f| f.values)
                .map_err(|e| BaselineError::Record {
                    record: i,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_, _>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

/// Cross-validated forest on a feature matrix.
pub fn evaluate_forest(
    x: &Tensor<f64>,
    labels: &[usize],
    n_classes: usize,
    plan: &SplitPlan,
    config: &ForestConfig,
    echo: serde_json::Value,
) -> Result<MetricReport, BaselineError> {
    cross_validate(plan, labels, n_classes, echo, |_, fold| {
        let tx = gather_rows(x, &fold.train);
        let ty: Vec<usize> = fold.train.iter().map(|&i| labels[i]).collect();
        let forest = train_forest(&tx, &ty, n_classes, config)?;
        forest.predict_batch(&gather_rows(x, &fold.test))
    })
}
