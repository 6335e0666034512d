//! Named trainable parameters and gradient clipping.

use crate::numeric::tensor::Tensor;
use crate::numeric::Float;

/// A named model parameter. Names must be unique within a model; the
/// checkpoint writer enforces this.
#[derive(Debug, Clone)]
pub struct Parameter<T: Float = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

impl<T: Float> Parameter<T> {
    /// Wraps a tensor as a trainable parameter, marking it so gradients
    /// accumulate during backward.
    pub fn trainable(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.trainable(),
            trainable: true,
        }
    }

    /// Wraps a tensor that is saved with the model but never updated.
    pub fn frozen(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            trainable: false,
        }
    }
}

/// How [`clip_gradients`] bounds gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Clamp every gradient element to `[-limit, +limit]`.
    #[default]
    Element,
    /// Rescale all gradients together when their joint L2 norm exceeds
    /// `limit`.
    GlobalNorm,
}

/// Bounds the gradients of every trainable parameter in place.
pub fn clip_gradients<T: Float>(params: &[Parameter<T>], limit: f64, mode: ClipMode) {
    match mode {
        ClipMode::Element => {
            let lo = T::from_f64(-limit);
            let hi = T::from_f64(limit);
            for p in params.iter().filter(|p| p.trainable) {
                p.tensor.grad_mut(|g| {
                    for x in g.iter_mut() {
                        *x = x.clamp(lo, hi);
                    }
                });
            }
        }
        ClipMode::GlobalNorm => {
            let mut sq = 0.0f64;
            for p in params.iter().filter(|p| p.trainable) {
                p.tensor.grad_mut(|g| {
                    for x in g.iter() {
                        sq += x.to_f64() * x.to_f64();
                    }
                });
            }
            let norm = sq.sqrt();
            if norm > limit && norm > 0.0 {
                let scale = limit / norm;
                for p in params.iter().filter(|p| p.trainable) {
                    p.tensor.grad_mut(|g| {
                        for x in g.iter_mut() {
                            *x = T::from_f64(x.to_f64() * scale);
                        }
                    });
                }
            }
        }
    }
}
