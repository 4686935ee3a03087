//! Linear and MLP probes trained on pooled embeddings.

mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{self, GradTape, Tensor, TensorError, Var};
use crate::scalar::Scalar;
use crate::weight_io::{read_container, write_container, CheckpointError, Container, ContainerKind};

pub use optim::{OptimState, Optimizer};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("degenerate labels: training needs at least 2 classes, found {0}")]
    DegenerateLabels(usize),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

impl ProbeKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Self::Linear),
            "mlp" => Some(Self::Mlp),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    /// Stop after this many epochs without validation-loss improvement.
    pub patience: Option<usize>,
    /// Inverse-frequency class weights in the loss.
    pub class_weighting: bool,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            weight_decay: 1e-5,
            optimizer: Optimizer::default(),
            patience: None,
            class_weighting: false,
            hidden_dim: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return bad("adam needs betas in [0, 1) and positive eps");
            }
        }
        Ok(())
    }
}

/// Per-dimension z-score fitted on a set of training records.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    /// Record indices the statistics were computed from.
    pub fitted_on: Vec<usize>,
}

impl<T: Scalar> Standardizer<T> {
    /// `x` rows correspond to `records`. Dimensions with variance below
    /// 1e-12 keep unit scale.
    pub fn fit(x: &Tensor<T>, records: &[usize]) -> Result<Self, ProbeError> {
        let (n, d) = x.dims2("standardizer")?;
        if n == 0 || records.len() != n {
            return Err(ProbeError::Config(format!(
                "{n} rows but {} record ids",
                records.len()
            )));
        }
        let nt = T::of(n as f64);
        let mut mean = vec![T::zero(); d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nt);
        let mut var = vec![T::zero(); d];
        for i in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let s = s / nt;
                if s < T::of(1e-12) {
                    T::one()
                } else {
                    s.sqrt()
                }
            })
            .collect();
        Ok(Self {
            mean,
            std,
            fitted_on: records.to_vec(),
        })
    }

    pub fn transform(&self, x: &Tensor<T>) -> Result<Tensor<T>, ProbeError> {
        let (n, d) = x.dims2("standardizer")?;
        if d != self.mean.len() {
            return Err(TensorError::Shape {
                op: "standardize",
                left: vec![n, d],
                right: vec![self.mean.len()],
            }
            .into());
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
}

/// Dense layers `(W: out×in, b: out)` with GELU between consecutive layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel<T> {
    pub kind: ProbeKind,
    pub input_dim: usize,
    pub n_classes: usize,
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub meta: TrainMeta,
    /// Applied to raw inputs by [`ProbeModel::predict`] when present.
    pub standardizer: Option<Standardizer<T>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
}

impl<T: Scalar> ProbeModel<T> {
    /// Seeded initialization: normal weights with variance 1/fan_in, zero biases.
    pub fn init(kind: ProbeKind, input_dim: usize, n_classes: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = match kind {
            ProbeKind::Linear => vec![(n_classes, input_dim)],
            ProbeKind::Mlp => vec![(hidden_dim, input_dim), (n_classes, hidden_dim)],
        };
        let layers = dims
            .into_iter()
            .map(|(o, i)| {
                let normal = Normal::new(0.0, (1.0 / i as f64).sqrt()).expect("positive std");
                let w = (0..o * i).map(|_| T::of(normal.sample(&mut rng))).collect();
                (Tensor::from_parts(vec![o, i], w), Tensor::zeros(&[o]))
            })
            .collect();
        Self {
            kind,
            input_dim,
            n_classes,
            layers,
            meta: TrainMeta {
                seed,
                epochs_run: 0,
                final_loss: None,
            },
            standardizer: None,
        }
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        match self.kind {
            ProbeKind::Linear => None,
            ProbeKind::Mlp => Some(self.layers[0].0.shape()[0]),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Records every weight and bias as a tape parameter.
    pub fn push_params(&self, tape: &mut GradTape<T>) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|(w, b)| (tape.param(w.clone()), tape.param(b.clone())))
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    /// Logits `n×C` for already-standardized rows.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>, ProbeError> {
        let (_, d) = x.dims2("probe")?;
        if d != self.input_dim {
            return Err(TensorError::Shape {
                op: "probe",
                left: x.shape().to_vec(),
                right: vec![self.input_dim],
            }
            .into());
        }
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                h = numkit::gelu(&h);
            }
            h = numkit::linear(&h, w, Some(b))?;
        }
        Ok(h)
    }

    /// Class probabilities for raw rows `n×input_dim`.
    pub fn predict_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>, ProbeError> {
        let x = match &self.standardizer {
            Some(s) => s.transform(x)?,
            None => x.clone(),
        };
        Ok(numkit::softmax(&self.logits(&x)?))
    }

    pub fn predict(&self, embedding: &[T]) -> Result<Vec<T>, ProbeError> {
        let x = Tensor::new(vec![1, embedding.len()], embedding.to_vec())?;
        Ok(self.predict_batch(&x)?.into_data())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::ProbeModel);
        let meta = StoredProbeMeta {
            kind: self.kind,
            input_dim: self.input_dim,
            n_classes: self.n_classes,
            hidden_dim: self.hidden_dim(),
            train: self.meta.clone(),
            standardizer_fitted_on: self.standardizer.as_ref().map(|s| s.fitted_on.clone()),
        };
        c.meta = serde_json::to_string(&meta).expect("probe meta serializes");
        for (i, (w, b)) in self.layers.iter().enumerate() {
            c.push(format!("layer.{i}.weight"), w);
            c.push(format!("layer.{i}.bias"), b);
        }
        if let Some(s) = &self.standardizer {
            let d = s.mean.len();
            c.push("standardizer.mean", &Tensor::from_parts(vec![d], s.mean.clone()));
            c.push("standardizer.std", &Tensor::from_parts(vec![d], s.std.clone()));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ProbeError> {
        c.expect_kind(ContainerKind::ProbeModel)?;
        let meta: StoredProbeMeta =
            serde_json::from_str(&c.meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let get = |name: &str| -> Result<Tensor<T>, ProbeError> {
            Ok(c
                .get(name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?
                .to())
        };
        let n_layers = match meta.kind {
            ProbeKind::Linear => 1,
            ProbeKind::Mlp => 2,
        };
        let mut layers = Vec::new();
        let mut fan_in = meta.input_dim;
        for i in 0..n_layers {
            let w = get(&format!("layer.{i}.weight"))?;
            let b = get(&format!("layer.{i}.bias"))?;
            let out = if i + 1 == n_layers {
                meta.n_classes
            } else {
                meta.hidden_dim.unwrap_or(0)
            };
            if w.shape() != [out, fan_in] || b.shape() != [out] {
                return Err(CheckpointError::corrupt(
                    &format!("layer.{i}.weight"),
                    format!("probe layer shape {:?} does not match [{out}, {fan_in}]", w.shape()),
                )
                .into());
            }
            fan_in = out;
            layers.push((w, b));
        }
        let standardizer = match meta.standardizer_fitted_on {
            Some(fitted_on) => {
                let mean = get("standardizer.mean")?.into_data();
                let std = get("standardizer.std")?.into_data();
                if mean.len() != meta.input_dim || std.len() != meta.input_dim {
                    return Err(CheckpointError::corrupt("standardizer.mean", "length differs from input_dim").into());
                }
                Some(Standardizer { mean, std, fitted_on })
            }
            None => None,
        };
        Ok(Self {
            kind: meta.kind,
            input_dim: meta.input_dim,
            n_classes: meta.n_classes,
            layers,
            meta: meta.train,
            standardizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ProbeError> {
        Ok(write_container(&self.to_container(), path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        Self::from_container(&read_container(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredProbeMeta {
    kind: ProbeKind,
    input_dim: usize,
    n_classes: usize,
    hidden_dim: Option<usize>,
    train: TrainMeta,
    standardizer_fitted_on: Option<Vec<usize>>,
}

/// Records the probe forward pass on `tape`.
pub fn taped_logits<T: Scalar>(tape: &mut GradTape<T>, x: Var, params: &[(Var, Var)]) -> Result<Var, TensorError> {
    let mut h = x;
    for (i, &(w, b)) in params.iter().enumerate() {
        if i > 0 {
            h = tape.gelu(h);
        }
        h = tape.linear(h, w, Some(b))?;
    }
    Ok(h)
}

/// Inverse-frequency weights `n / (C · n_c)`; absent classes get 0.
pub fn class_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (n_classes as f64 * c as f64) })
        .collect()
}

pub(crate) fn check_labels(labels: &[usize], n_classes: usize) -> Result<(), ProbeError> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(ProbeError::Config(format!("label {bad} outside {n_classes} classes")));
    }
    let mut seen = vec![false; n_classes];
    labels.iter().for_each(|&y| seen[y] = true);
    let present = seen.iter().filter(|&&s| s).count();
    if present < 2 {
        return Err(ProbeError::DegenerateLabels(present));
    }
    Ok(())
}

pub(crate) fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::from_parts(vec![idx.len(), d], data)
}

/// Seeded epoch shuffler shared by probe and adapter training.
pub(crate) fn shuffler(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub(crate) fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Mean weighted cross-entropy of `model` on `(x, y)`.
pub fn probe_loss<T: Scalar>(
    model: &ProbeModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    weights: Option<&[T]>,
) -> Result<f64, ProbeError> {
    let mut tape = GradTape::new();
    let logits = tape.constant(model.logits(x)?);
    let loss = tape.cross_entropy(logits, y, weights)?;
    Ok(tape.value(loss).data()[0].f64())
}

/// Trains a probe by minibatch descent on mean softmax cross-entropy.
/// `x` rows are the (already standardized) embeddings.
pub fn train_probe<T: Scalar>(
    x: &Tensor<T>,
    y: &[usize],
    n_classes: usize,
    config: &TrainConfig,
    kind: ProbeKind,
) -> Result<(ProbeModel<T>, LossCurve), ProbeError> {
    train_probe_validated(x, y, None, n_classes, config, kind)
}

/// As [`train_probe`], with an optional validation set driving early
/// stopping; the best-validation parameters are returned.
pub fn train_probe_validated<T: Scalar>(
    x: &Tensor<T>,
    y: &[usize],
    validation: Option<(&Tensor<T>, &[usize])>,
    n_classes: usize,
    config: &TrainConfig,
    kind: ProbeKind,
) -> Result<(ProbeModel<T>, LossCurve), ProbeError> {
    config.validate()?;
    let (n, d) = x.dims2("train_probe")?;
    if y.len() != n {
        return Err(TensorError::Shape {
            op: "train_probe",
            left: vec![n, d],
            right: vec![y.len()],
        }
        .into());
    }
    check_labels(y, n_classes)?;
    let weights: Option<Vec<T>> = config
        .class_weighting
        .then(|| class_weights(y, n_classes).into_iter().map(T::of).collect());

    let mut model = ProbeModel::<T>::init(kind, d, n_classes, config.hidden_dim, config.seed);
    let mut curve = LossCurve::default();
    let mut opt = {
        let refs: Vec<&Tensor<T>> = model.layers.iter().flat_map(|(w, b)| [w, b]).collect();
        OptimState::new(config.optimizer, &refs)
    };
    let mut rng = shuffler(config.seed);
    let mut best: Option<(f64, ProbeModel<T>)> = None;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        let order = shuffled(&mut rng, n);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let bx = gather_rows(x, batch);
            let by: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let mut tape = GradTape::new();
            let xv = tape.constant(bx);
            let vars = model.push_params(&mut tape);
            let logits = taped_logits(&mut tape, xv, &vars)?;
            let loss = tape.cross_entropy(logits, &by, weights.as_deref())?;
            let lv = tape.value(loss).data()[0].f64();
            if !lv.is_finite() {
                return Err(ProbeError::Divergence { epoch, loss: lv });
            }
            total += lv * batch.len() as f64;
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars
                .iter()
                .flat_map(|&(w, b)| [w, b])
                .map(|v| g.take(v).expect("parameter gradient"))
                .collect();
            opt.step(&mut model.params_mut(), &grads, config.learning_rate, config.weight_decay);
        }
        let epoch_loss = total / n as f64;
        if !epoch_loss.is_finite() || model.layers.iter().any(|(w, b)| !w.is_finite() || !b.is_finite()) {
            return Err(ProbeError::Divergence { epoch, loss: epoch_loss });
        }
        curve.train.push(epoch_loss);
        model.meta.epochs_run = epoch;
        model.meta.final_loss = Some(epoch_loss);

        if let Some((vx, vy)) = validation {
            let vl = probe_loss(&model, vx, vy, weights.as_deref())?;
            curve.validation.push(vl);
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if config.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
    }
    if config.patience.is_some() {
        if let Some((_, m)) = best {
            model = m;
        }
    }
    Ok((model, curve))
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
