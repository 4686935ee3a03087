use serde::{Deserialize, Serialize};

use crate::numkit::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment buffers. Weight decay is added to the gradient
/// (L2 penalty) before the update.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    kind: Optimizer,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(kind: Optimizer, shapes: &[&Tensor<T>]) -> Self {
        let zeros = |t: &&Tensor<T>| vec![T::zero(); t.len()];
        Self {
            kind,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update; `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64, weight_decay: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), self.m.len(), "parameter count fixed at construction");
        self.steps += 1;
        let lr = T::of(lr);
        let wd = T::of(weight_decay);
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * (d + wd * *w);
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                let c1 = T::one() - b1.powi(self.steps);
                let c2 = T::one() - b2.powi(self.steps);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = d + wd * *w;
                        m[j] = b1 * m[j] + (T::one() - b1) * d;
                        v[j] = b2 * v[j] + (T::one() - b2) * d * d;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
