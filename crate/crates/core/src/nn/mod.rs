//! Layer primitives with explicit forward and backward passes.
//!
//! Every layer caches what its backward pass needs when the forward context
//! asks for recording. All computation is sequential `f64`, so two runs with
//! identical weights and inputs are bitwise identical.

mod adam;
mod batchnorm;
mod conv;
mod pool;
mod upsample;

pub use adam::Adam;
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};
pub use upsample::{bilinear_resize, bilinear_resize_backward};

use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;

/// A trainable tensor with its gradient accumulator. The gradient buffer is
/// allocated on first use so inference-only models stay lean.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            value,
            grad: Vec::new(),
        }
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_empty() {
            self.grad = vec![0.0; self.value.numel()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = 0.0;
        }
    }
}

/// Forward-pass switches.
///
/// `training` selects batch statistics in batch norm (and, at the model
/// level, enables the projection head). `record` stores the activations the
/// backward pass needs. `update_stats` lets batch norm update its running
/// statistics; gradient probes keep it off so repeated forwards stay pure.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx {
    pub training: bool,
    pub record: bool,
    pub update_stats: bool,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            record: false,
            update_stats: false,
        }
    }

    pub fn train() -> Self {
        ForwardCtx {
            training: true,
            record: true,
            update_stats: true,
        }
    }

    /// Training-mode math with recording but frozen running statistics;
    /// used by gradient checks so the analytic pass and the finite
    /// difference probes see the same state.
    pub fn train_frozen() -> Self {
        ForwardCtx {
            training: true,
            record: true,
            update_stats: false,
        }
    }

    /// Training-mode math with no side effects at all (finite-difference
    /// probing, shape checks).
    pub fn probe() -> Self {
        ForwardCtx {
            training: true,
            record: false,
            update_stats: false,
        }
    }
}

/// Uniform traversal of the trainable parameters of a layer or model.
/// Names are hierarchical (`"rgb_encoder.stem.conv.weight"`), built from
/// the prefix; the visit order is fixed, which keeps the optimizer state
/// and checkpoints deterministic.
pub trait Params {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    /// Non-trainable state that still belongs in checkpoints (batch-norm
    /// running statistics).
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

/// Standard normal sample (Box-Muller).
pub fn randn(rng: &mut ChaCha12Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// He-normal initialization: N(0, sqrt(2 / fan_in)).
pub fn he_tensor(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| randn(rng) * std).collect();
    Tensor::from_vec(shape, data).expect("shape/product mismatch")
}

/// Rectified linear unit with a cached activity mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { mask: None }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let mut out = x.clone();
        if ctx.record {
            let mask = x.data().iter().map(|&v| v > 0.0).collect();
            self.mask = Some(mask);
        }
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without recorded forward");
        assert_eq!(mask.len(), grad_out.numel());
        let mut g = grad_out.clone();
        for (v, keep) in g.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
        g
    }
}
