use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LoraError;
use crate::encoder::{EncoderConfig, EncoderError};
use crate::numkit::{self as nk, Tensor, TensorError};
use crate::scalar::Scalar;

/// Attention projection an adapter attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "v")]
    Value,
}

impl Projection {
    pub fn tag(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" | "query" => Some(Projection::Query),
            "v" | "value" => Some(Projection::Value),
            _ => None,
        }
    }
}

/// Rank-`r` update `(alpha/r)·B·A` on one projection of one transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub layer: usize,
    pub projection: Projection,
    /// `r × d_in`
    pub a: Tensor<T>,
    /// `d_out × r`
    pub b: Tensor<T>,
    pub alpha: f64,
}

pub const LORA_INIT_STD: f64 = 0.02;

impl<T: Scalar> LoraAdapter<T> {
    /// Fresh adapter: `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(
        layer: usize,
        projection: Projection,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self, LoraError> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(LoraError::Rank {
                rank,
                max: d_in.min(d_out),
            });
        }
        let normal = Normal::new(0.0, LORA_INIT_STD).expect("positive std");
        let a = (0..rank * d_in).map(|_| T::of(normal.sample(rng))).collect();
        Ok(Self {
            layer,
            projection,
            a: Tensor::from_parts(vec![rank, d_in], a),
            b: Tensor::zeros(&[d_out, rank]),
            alpha,
        })
    }

    pub fn from_parts(
        layer: usize,
        projection: Projection,
        a: Tensor<T>,
        b: Tensor<T>,
        alpha: f64,
    ) -> Result<Self, LoraError> {
        let (r, d_in) = a.dims2("lora A")?;
        let (d_out, r2) = b.dims2("lora B")?;
        if r != r2 {
            return Err(TensorError::Shape {
                op: "lora factors",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            }
            .into());
        }
        if r > d_in.min(d_out) {
            return Err(LoraError::Rank {
                rank: r,
                max: d_in.min(d_out),
            });
        }
        Ok(Self {
            layer,
            projection,
            a,
            b,
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// `alpha / r`
    pub fn scale(&self) -> T {
        T::of(self.alpha / self.rank() as f64)
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `scale·(x·Aᵀ)·Bᵀ` for row-vector inputs `x: n×d_in`.
    pub fn delta(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let xa = nk::matmul_nt(x, &self.a)?;
        let s = self.scale();
        Ok(nk::matmul_nt(&xa, &self.b)?.map(|v| v * s))
    }
}

fn as_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    match x.shape() {
        [n] => x.clone().reshape(&[1, *n]),
        [_, _] => Ok(x.clone()),
        other => Err(TensorError::Shape {
            op: "adapted_forward",
            left: other.to_vec(),
            right: vec![],
        }),
    }
}

/// `y = W·x + (alpha/r)·B·(A·x)` with `W: d_out×d_in`. `x` is one vector
/// (`d_in`) or a batch of row vectors (`n×d_in`); `y` has the matching layout.
pub fn adapted_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    adapter: &LoraAdapter<T>,
) -> Result<Tensor<T>, LoraError> {
    let (d_out, d_in) = weight.dims2("adapted_forward")?;
    if adapter.d_in() != d_in || adapter.d_out() != d_out {
        return Err(TensorError::Shape {
            op: "adapted_forward",
            left: weight.shape().to_vec(),
            right: vec![adapter.d_out(), adapter.d_in()],
        }
        .into());
    }
    let rows = as_rows(x)?;
    let y = nk::add(&nk::matmul_nt(&rows, weight)?, &adapter.delta(&rows)?)?;
    Ok(if x.rank() == 1 { y.reshape(&[d_out])? } else { y })
}

/// `W' = W + (alpha/r)·B·A`.
pub fn merge<T: Scalar>(weight: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>, LoraError> {
    let (d_out, d_in) = weight.dims2("merge")?;
    if adapter.d_in() != d_in || adapter.d_out() != d_out {
        return Err(TensorError::Shape {
            op: "merge",
            left: weight.shape().to_vec(),
            right: vec![adapter.d_out(), adapter.d_in()],
        }
        .into());
    }
    let s = adapter.scale();
    let ba = nk::matmul(&adapter.b, &adapter.a)?;
    Ok(nk::add(weight, &ba.map(|v| v * s))?)
}

/// Closed-form adapter size: `r·(d_in + d_out)` per adapted projection.
pub fn lora_parameter_count(rank: usize, d_in: usize, d_out: usize) -> usize {
    rank * (d_in + d_out)
}

/// Adapters keyed by `(layer, projection)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoraSet<T> {
    adapters: BTreeMap<(usize, Projection), LoraAdapter<T>>,
}

impl<T: Scalar> LoraSet<T> {
    pub fn new() -> Self {
        Self {
            adapters: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, adapter: LoraAdapter<T>) -> Option<LoraAdapter<T>> {
        self.adapters
            .insert((adapter.layer, adapter.projection), adapter)
    }

    pub fn get(&self, layer: usize, projection: Projection) -> Option<&LoraAdapter<T>> {
        self.adapters.get(&(layer, projection))
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter<T>> {
        self.adapters.values_mut()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.iter().map(LoraAdapter::parameter_count).sum()
    }

    pub fn lowest_layer(&self) -> Option<usize> {
        self.adapters.keys().map(|k| k.0).min()
    }

    /// Every adapter targets an existing layer with matching width.
    pub fn check_against(&self, config: &EncoderConfig) -> Result<(), EncoderError> {
        for a in self.iter() {
            if a.layer == 0 || a.layer > config.n_layers {
                return Err(EncoderError::Adapter(format!(
                    "layer {} outside transformer layers 1..={}",
                    a.layer, config.n_layers
                )));
            }
            if a.d_in() != config.d_model || a.d_out() != config.d_model {
                return Err(EncoderError::Adapter(format!(
                    "adapter on layer {} is {}x{}, model width is {}",
                    a.layer,
                    a.d_out(),
                    a.d_in(),
                    config.d_model
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> LoraSet<U> {
        LoraSet {
            adapters: self
                .adapters
                .iter()
                .map(|(k, a)| {
                    (
                        *k,
                        LoraAdapter {
                            layer: a.layer,
                            projection: a.projection,
                            a: a.a.cast(),
                            b: a.b.cast(),
                            alpha: a.alpha,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn hand_rank_one_case() {
        let ad = LoraAdapter::from_parts(1, Projection::Query, t(&[1, 2], &[1.0, 0.0]), t(&[2, 1], &[1.0, 0.0]), 1.0)
            .unwrap();
        let w = Tensor::zeros(&[2, 2]);
        let y = adapted_forward(&t(&[2], &[3.0, 5.0]), &w, &ad).unwrap();
        assert_eq!(y.data(), &[3.0, 0.0]);
    }

    #[test]
    fn zero_b_and_zero_alpha_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.25]);
        let x = t(&[3], &[0.3, -0.7, 2.0]);
        let base = nk::matmul_nt(&x.clone().reshape(&[1, 3]).unwrap(), &w).unwrap();
        let ad = LoraAdapter::<f64>::init(1, Projection::Value, 3, 2, 2, 16.0, &mut rng).unwrap();
        assert_eq!(adapted_forward(&x, &w, &ad).unwrap().data(), base.data());
        assert_eq!(merge(&w, &ad).unwrap(), w);

        let mut ad = ad;
        ad.b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        ad.alpha = 0.0;
        assert_eq!(adapted_forward(&x, &w, &ad).unwrap().data(), base.data());
    }

    #[test]
    fn merge_scale_two_rank_one_hand_case() {
        // alpha/r = 2, B·A = [[2,4],[3,6]] -> doubled and added to W
        let ad = LoraAdapter::from_parts(1, Projection::Query, t(&[1, 2], &[1.0, 2.0]), t(&[2, 1], &[2.0, 3.0]), 2.0)
            .unwrap();
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(merge(&w, &ad).unwrap().data(), &[5.0, 8.0, 6.0, 13.0]);
    }

    #[test]
    fn rank_bounds_and_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(matches!(
            LoraAdapter::<f64>::init(1, Projection::Query, 4, 3, 4, 1.0, &mut rng),
            Err(LoraError::Rank { rank: 4, max: 3 })
        ));
        assert!(LoraAdapter::<f64>::init(1, Projection::Query, 4, 3, 0, 1.0, &mut rng).is_err());
        let ad = LoraAdapter::<f64>::init(1, Projection::Query, 12, 7, 3, 1.0, &mut rng).unwrap();
        assert_eq!(ad.parameter_count(), lora_parameter_count(3, 12, 7));
        assert_eq!(lora_parameter_count(8, 768, 768), 12_288);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ad = LoraAdapter::<f64>::init(1, Projection::Query, 3, 3, 1, 1.0, &mut rng).unwrap();
        let w = Tensor::zeros(&[2, 3]);
        assert!(adapted_forward(&t(&[3], &[1.0, 2.0, 3.0]), &w, &ad).is_err());
        assert!(merge(&w, &ad).is_err());
    }
}
