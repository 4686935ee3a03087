//! Joint training of adapters and a probe with the base encoder frozen.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LoraAdapter, LoraError, LoraSet, Projection};
use crate::encoder::{encode, taped_block, EncoderConfig, EncoderWeights, TapedAdapters, TapedLora};
use crate::extract::Pooling;
use crate::numkit::{finite_difference_check, GradTape, Tensor, TensorError, Var};
use crate::probe::{
    check_labels, class_weights, shuffled, shuffler, taped_logits, LossCurve, OptimState, ProbeKind, ProbeModel,
    TrainConfig,
};
use crate::scalar::Scalar;
use crate::weight_io::{read_container, weights_checksum, write_container, CheckpointError, Container, ContainerKind};

/// Relative-error ceiling for the optional gradient check.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub projections: Vec<Projection>,
    /// Transformer layers (1-based) that get adapters; empty means all.
    pub layers: Vec<usize>,
    /// Layer whose pooled output feeds the probe; `None` is the last layer.
    pub probe_layer: Option<usize>,
    pub pooling: Pooling,
    /// Check adapter gradients against finite differences before training.
    pub grad_check: bool,
    pub train: TrainConfig,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            projections: vec![Projection::Query, Projection::Value],
            layers: Vec::new(),
            probe_layer: None,
            pooling: Pooling::Mean,
            grad_check: false,
            train: TrainConfig::default(),
        }
    }
}

impl LoraConfig {
    pub fn target_layers(&self, config: &EncoderConfig) -> BTreeSet<usize> {
        if self.layers.is_empty() {
            (1..=config.n_layers).collect()
        } else {
            self.layers.iter().copied().collect()
        }
    }

    pub fn resolved_probe_layer(&self, config: &EncoderConfig) -> usize {
        self.probe_layer.unwrap_or(config.n_layers)
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<(), LoraError> {
        let bad = |m: String| Err(LoraError::Config(m));
        if self.projections.is_empty() {
            return bad("no target projections".into());
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        if self.rank == 0 || self.rank > config.d_model {
            return Err(LoraError::Rank {
                rank: self.rank,
                max: config.d_model,
            });
        }
        let probe = self.resolved_probe_layer(config);
        if probe == 0 || probe > config.n_layers {
            return bad(format!("probe layer {probe} outside 1..={}", config.n_layers));
        }
        for &l in &self.target_layers(config) {
            if l == 0 || l > config.n_layers {
                return bad(format!("adapter layer {l} outside 1..={}", config.n_layers));
            }
            if l > probe {
                return bad(format!("adapter layer {l} sits above probe layer {probe}"));
            }
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Fresh adapters for every target layer and projection, `B = 0`.
pub fn init_adapters<T: Scalar>(config: &EncoderConfig, lora: &LoraConfig) -> Result<LoraSet<T>, LoraError> {
    let mut rng = ChaCha8Rng::seed_from_u64(lora.train.seed);
    rng.set_stream(2);
    let mut set = LoraSet::new();
    for l in lora.target_layers(config) {
        for &p in &lora.projections {
            set.insert(LoraAdapter::init(
                l,
                p,
                config.d_model,
                config.d_model,
                lora.rank,
                lora.alpha,
                &mut rng,
            )?);
        }
    }
    Ok(set)
}

/// Prepared waveforms (`[record][channel][sample]`) with labels.
#[derive(Clone, Copy, Debug)]
pub struct LoraTask<'a> {
    pub waves: &'a [Vec<Vec<f64>>],
    pub labels: &'a [usize],
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedAdapters<T> {
    pub adapters: LoraSet<T>,
    pub probe: ProbeModel<T>,
    pub curve: LossCurve,
    /// Full-data loss before the first update.
    pub initial_loss: f64,
    pub base_checksum: String,
    pub grad_check_error: Option<f64>,
}

struct Frozen<'a, T> {
    config: &'a EncoderConfig,
    weights: &'a EncoderWeights<T>,
    lowest: usize,
    probe_layer: usize,
    pooling: Pooling,
}

impl<T: Scalar> Frozen<'_, T> {
    /// Hidden state below the lowest adapted layer, per channel.
    fn prefix(&self, channels: &[Vec<f64>]) -> Result<Vec<Tensor<T>>, LoraError> {
        let tap = BTreeSet::from([self.lowest - 1]);
        channels
            .iter()
            .map(|w| {
                let x: Vec<T> = w.iter().map(|&v| T::of(v)).collect();
                let mut hs = encode(&x, self.weights, self.config, &tap, None)?.into_layers();
                Ok(hs.remove(&(self.lowest - 1)).expect("requested tap"))
            })
            .collect()
    }

    /// Pooled, channel-concatenated embeddings for `batch` as a `m×D` var.
    fn embed(
        &self,
        tape: &mut GradTape<T>,
        prefixes: &[Vec<Tensor<T>>],
        batch: &[usize],
        adapters: &TapedAdapters<T>,
    ) -> Result<Var, LoraError> {
        let mut rows = Vec::with_capacity(batch.len());
        for &i in batch {
            let mut parts = Vec::with_capacity(prefixes[i].len());
            for h0 in &prefixes[i] {
                let mut h = tape.constant(h0.clone());
                for l in self.lowest..=self.probe_layer {
                    h = taped_block(tape, h, l, self.weights, self.config, adapters)?;
                }
                parts.push(match self.pooling {
                    Pooling::Mean => tape.mean_rows(h)?,
                    Pooling::Max => tape.max_rows(h)?,
                });
            }
            rows.push(if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? });
        }
        Ok(tape.concat_rows(&rows)?)
    }
}

fn push_adapters<T: Scalar>(tape: &mut GradTape<T>, set: &LoraSet<T>) -> (TapedAdapters<T>, Vec<Var>) {
    let mut taped = BTreeMap::new();
    let mut vars = Vec::new();
    for ad in set.iter() {
        let a = tape.param(ad.a.clone());
        let b = tape.param(ad.b.clone());
        vars.extend([a, b]);
        taped.insert(
            (ad.layer, ad.projection),
            TapedLora {
                a,
                b,
                scale: ad.scale(),
            },
        );
    }
    (taped, vars)
}

fn full_loss<T: Scalar>(
    frozen: &Frozen<'_, T>,
    prefixes: &[Vec<Tensor<T>>],
    labels: &[usize],
    adapters: &LoraSet<T>,
    probe: &ProbeModel<T>,
    weights: Option<&[T]>,
) -> Result<f64, LoraError> {
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(64) {
        let mut tape = GradTape::new();
        let (taped, _) = push_adapters(&mut tape, adapters);
        let x = frozen.embed(&mut tape, prefixes, chunk, &taped)?;
        let params = probe.push_params(&mut tape);
        let logits = taped_logits(&mut tape, x, &params)?;
        let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let loss = tape.cross_entropy(logits, &by, weights)?;
        total += tape.value(loss).data()[0].f64() * chunk.len() as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Worst finite-difference relative error over every adapter factor, in
/// 64-bit, on a few records. `B` is nudged off zero so the `A` gradient is
/// not identically zero.
fn adapter_grad_check<T: Scalar>(
    frozen: &Frozen<'_, T>,
    task: &LoraTask<'_>,
    adapters: &LoraSet<T>,
    probe: &ProbeModel<T>,
) -> Result<f64, LoraError> {
    let weights = frozen.weights.cast::<f64>();
    let f = Frozen {
        config: frozen.config,
        weights: &weights,
        lowest: frozen.lowest,
        probe_layer: frozen.probe_layer,
        pooling: frozen.pooling,
    };
    let batch: Vec<usize> = (0..task.labels.len().min(3)).collect();
    let prefixes: Vec<Vec<Tensor<f64>>> = batch
        .iter()
        .map(|&i| f.prefix(&task.waves[i]))
        .collect::<Result<_, _>>()?;
    let labels: Vec<usize> = batch.iter().map(|&i| task.labels[i]).collect();
    let probe = ProbeModel::<f64> {
        kind: probe.kind,
        input_dim: probe.input_dim,
        n_classes: probe.n_classes,
        layers: probe.layers.iter().map(|(w, b)| (w.cast(), b.cast())).collect(),
        meta: probe.meta.clone(),
        standardizer: None,
    };
    let mut set = adapters.cast::<f64>();
    let normal = Normal::new(0.0, 0.05).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ad in set.iter_mut() {
        ad.b.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
    }
    let keys: Vec<(usize, Projection)> = set.iter().map(|a| (a.layer, a.projection)).collect();
    let mut worst = 0.0f64;
    for key in keys {
        for factor_b in [false, true] {
            let ad = set.get(key.0, key.1).expect("listed adapter");
            let point = if factor_b { ad.b.clone() } else { ad.a.clone() };
            let err = finite_difference_check(
                |tape, x| {
                    let (mut taped, _) = push_adapters(tape, &set);
                    let entry = taped.get_mut(&key).expect("listed adapter");
                    if factor_b {
                        entry.b = x;
                    } else {
                        entry.a = x;
                    }
                    let emb = f
                        .embed(tape, &prefixes, &(0..labels.len()).collect::<Vec<_>>(), &taped)
                        .map_err(|e| TensorError::Invalid(e.to_string()))?;
                    let params = probe.push_params(tape);
                    let logits = taped_logits(tape, emb, &params)?;
                    tape.cross_entropy(logits, &labels, None)
                },
                &point,
                1e-5,
            )?;
            worst = worst.max(err);
            if err >= GRAD_CHECK_TOLERANCE {
                return Err(LoraError::GradCheck {
                    layer: key.0,
                    projection: key.1.tag(),
                    factor: if factor_b { "B" } else { "A" },
                    error: err,
                });
            }
        }
    }
    Ok(worst)
}

/// Trains adapters and a probe jointly by minibatch cross-entropy. Only
/// layers from the lowest adapter up to the probe layer are recorded on
/// the tape; the frozen prefix is computed once.
pub fn train_adapters<T: Scalar>(
    task: &LoraTask<'_>,
    config: &EncoderConfig,
    weights: &EncoderWeights<T>,
    lora: &LoraConfig,
    kind: ProbeKind,
) -> Result<TrainedAdapters<T>, LoraError> {
    lora.validate(config)?;
    if task.waves.len() != task.labels.len() {
        return Err(LoraError::Config(format!(
            "{} waveforms for {} labels",
            task.waves.len(),
            task.labels.len()
        )));
    }
    check_labels(task.labels, task.n_classes)?;
    let before = weights_checksum(weights);
    let mut adapters = init_adapters::<T>(config, lora)?;
    adapters.check_against(config)?;
    let frozen = Frozen {
        config,
        weights,
        lowest: adapters.lowest_layer().expect("at least one adapter"),
        probe_layer: lora.resolved_probe_layer(config),
        pooling: lora.pooling,
    };
    let prefixes: Vec<Vec<Tensor<T>>> = task
        .waves
        .par_iter()
        .map(|w| frozen.prefix(w))
        .collect::<Result<_, _>>()?;
    let n_channels = prefixes.first().map_or(1, Vec::len);
    if prefixes.iter().any(|p| p.len() != n_channels) {
        return Err(LoraError::Config("records differ in channel count".into()));
    }

    let tc = &lora.train;
    let cw: Option<Vec<T>> = tc
        .class_weighting
        .then(|| class_weights(task.labels, task.n_classes).into_iter().map(T::of).collect());
    let mut probe = ProbeModel::<T>::init(kind, config.d_model * n_channels, task.n_classes, tc.hidden_dim, tc.seed);
    let grad_check_error = if lora.grad_check {
        Some(adapter_grad_check(&frozen, task, &adapters, &probe)?)
    } else {
        None
    };
    let initial_loss = full_loss(&frozen, &prefixes, task.labels, &adapters, &probe, cw.as_deref())?;

    let mut opt = {
        let refs: Vec<&Tensor<T>> = adapters
            .iter()
            .flat_map(|a| [&a.a, &a.b])
            .chain(probe.layers.iter().flat_map(|(w, b)| [w, b]))
            .collect();
        OptimState::new(tc.optimizer, &refs)
    };
    let mut rng = shuffler(tc.seed);
    let mut curve = LossCurve::default();
    let n = task.labels.len();
    for epoch in 1..=tc.epochs {
        let order = shuffled(&mut rng, n);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut tape = GradTape::new();
            let (taped, avars) = push_adapters(&mut tape, &adapters);
            let x = frozen.embed(&mut tape, &prefixes, batch, &taped)?;
            let pvars = probe.push_params(&mut tape);
            let logits = taped_logits(&mut tape, x, &pvars)?;
            let by: Vec<usize> = batch.iter().map(|&i| task.labels[i]).collect();
            let loss = tape.cross_entropy(logits, &by, cw.as_deref())?;
            let lv = tape.value(loss).data()[0].f64();
            if !lv.is_finite() {
                return Err(LoraError::Divergence { epoch, loss: lv });
            }
            total += lv * batch.len() as f64;
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor<T>> = avars
                .iter()
                .copied()
                .chain(pvars.iter().flat_map(|&(w, b)| [w, b]))
                .map(|v| g.take(v).expect("parameter gradient"))
                .collect();
            let mut params: Vec<&mut Tensor<T>> = adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect();
            params.extend(probe.params_mut());
            opt.step(&mut params, &grads, tc.learning_rate, tc.weight_decay);
        }
        let epoch_loss = total / n as f64;
        let finite = adapters.iter().all(|a| a.a.is_finite() && a.b.is_finite())
            && probe.layers.iter().all(|(w, b)| w.is_finite() && b.is_finite());
        if !epoch_loss.is_finite() || !finite {
            return Err(LoraError::Divergence { epoch, loss: epoch_loss });
        }
        curve.train.push(epoch_loss);
        probe.meta.epochs_run = epoch;
        probe.meta.final_loss = Some(epoch_loss);
    }

    let after = weights_checksum(weights);
    if before != after {
        return Err(LoraError::BaseMutated { before, after });
    }
    Ok(TrainedAdapters {
        adapters,
        probe,
        curve,
        initial_loss,
        base_checksum: after,
        grad_check_error,
    })
}

/// Class probabilities for prepared waveforms through the adapted encoder.
pub fn predict_adapted<T: Scalar>(
    channels: &[Vec<f64>],
    config: &EncoderConfig,
    weights: &EncoderWeights<T>,
    trained: &TrainedAdapters<T>,
    probe_layer: usize,
    pooling: Pooling,
) -> Result<Vec<T>, LoraError> {
    let taps = BTreeSet::from([probe_layer]);
    let mut emb = Vec::new();
    for w in channels {
        let x: Vec<T> = w.iter().map(|&v| T::of(v)).collect();
        let hs = encode(&x, weights, config, &taps, Some(&trained.adapters))?;
        let frames = hs.get(probe_layer).expect("requested tap");
        emb.extend(crate::extract::pool(frames, pooling).map_err(|e| LoraError::Config(e.to_string()))?);
    }
    Ok(trained.probe.predict(&emb)?)
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    config: serde_json::Value,
    adapters: Vec<AdapterMeta>,
    probe_meta: String,
    initial_loss: f64,
    curve: LossCurve,
    base_checksum: String,
    grad_check_error: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    layer: usize,
    projection: Projection,
    alpha: f64,
}

/// An adapter set, its probe and the run's config echo in one container.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBundle<T> {
    pub config: serde_json::Value,
    pub trained: TrainedAdapters<T>,
}

fn adapter_name(layer: usize, p: Projection, factor: &str) -> String {
    format!("adapter.{layer}.{}.{factor}", p.tag())
}

impl<T: Scalar> AdapterBundle<T> {
    pub fn to_container(&self) -> Container {
        let t = &self.trained;
        let probe = t.probe.to_container();
        let meta = BundleMeta {
            config: self.config.clone(),
            adapters: t
                .adapters
                .iter()
                .map(|a| AdapterMeta {
                    layer: a.layer,
                    projection: a.projection,
                    alpha: a.alpha,
                })
                .collect(),
            probe_meta: probe.meta.clone(),
            initial_loss: t.initial_loss,
            curve: t.curve.clone(),
            base_checksum: t.base_checksum.clone(),
            grad_check_error: t.grad_check_error,
        };
        let mut c = Container::new(ContainerKind::AdapterBundle);
        c.meta = serde_json::to_string(&meta).expect("bundle meta serializes");
        for a in t.adapters.iter() {
            c.push(adapter_name(a.layer, a.projection, "A"), &a.a);
            c.push(adapter_name(a.layer, a.projection, "B"), &a.b);
        }
        for (name, tensor) in probe.tensors {
            c.tensors.push((format!("probe.{name}"), tensor));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, LoraError> {
        c.expect_kind(ContainerKind::AdapterBundle)?;
        let meta: BundleMeta = serde_json::from_str(&c.meta).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        let get = |name: String| -> Result<Tensor<T>, LoraError> {
            Ok(c.get(&name).ok_or(CheckpointError::MissingTensor(name))?.to())
        };
        let mut adapters = LoraSet::new();
        for m in &meta.adapters {
            adapters.insert(LoraAdapter::from_parts(
                m.layer,
                m.projection,
                get(adapter_name(m.layer, m.projection, "A"))?,
                get(adapter_name(m.layer, m.projection, "B"))?,
                m.alpha,
            )?);
        }
        let mut pc = Container::new(ContainerKind::ProbeModel);
        pc.meta = meta.probe_meta;
        pc.tensors = c
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("probe.").map(|s| (s.to_string(), t.clone())))
            .collect();
        Ok(Self {
            config: meta.config,
            trained: TrainedAdapters {
                adapters,
                probe: ProbeModel::from_container(&pc)?,
                curve: meta.curve,
                initial_loss: meta.initial_loss,
                base_checksum: meta.base_checksum,
                grad_check_error: meta.grad_check_error,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LoraError> {
        Ok(write_container(&self.to_container(), path)?)
    }

    pub fn load(path: &Path) -> Result<Self, LoraError> {
        Self::from_container(&read_container(path)?)
    }
}
