//! Segmentation and projection heads.

use crate::nn::{BatchNorm2d, Conv2d, ForwardCtx, Param, Params, Relu};
use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;

/// Segmentation head: 3x3 convolution, nonlinearity, 1x1 convolution to the
/// two class logits. No softmax is applied. The activation after the 3x3
/// convolution is the "penultimate" feature used for per-class mean-feature
/// export.
#[derive(Debug, Clone)]
pub struct SegHead {
    conv1: Conv2d,
    relu: Relu,
    conv2: Conv2d,
}

impl SegHead {
    pub fn new(in_channels: usize, num_classes: usize, rng: &mut ChaCha12Rng) -> Self {
        SegHead {
            conv1: Conv2d::new(in_channels, in_channels, 3, 1, 1, 1, rng),
            relu: Relu::new(),
            conv2: Conv2d::new(in_channels, num_classes, 1, 1, 0, 1, rng),
        }
    }

    /// Returns `(logits, penultimate)`.
    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> (Tensor, Tensor) {
        let y = self.conv1.forward(x, ctx);
        let penultimate = self.relu.forward(&y, ctx);
        let logits = self.conv2.forward(&penultimate, ctx);
        (logits, penultimate)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Tensor {
        let g = self.conv2.backward(grad_logits);
        let g = self.relu.backward(&g);
        self.conv1.backward(&g)
    }
}

impl Params for SegHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
    }
}

/// Projection head: 1x1 convolution, batch norm, nonlinearity, 1x1
/// convolution to the embedding width. Outputs raw (un-normalized)
/// embeddings; unit normalization happens inside the contrastive loss.
/// Only used in training mode.
#[derive(Debug, Clone)]
pub struct ProjHead {
    conv1: Conv2d,
    bn: BatchNorm2d,
    relu: Relu,
    conv2: Conv2d,
}

impl ProjHead {
    pub fn new(in_channels: usize, embed_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        ProjHead {
            conv1: Conv2d::new(in_channels, embed_dim, 1, 1, 0, 1, rng),
            bn: BatchNorm2d::new(embed_dim),
            relu: Relu::new(),
            conv2: Conv2d::new(embed_dim, embed_dim, 1, 1, 0, 1, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let y = self.conv1.forward(x, ctx);
        let y = self.bn.forward(&y, ctx);
        let y = self.relu.forward(&y, ctx);
        self.conv2.forward(&y, ctx)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.conv2.backward(grad_out);
        let g = self.relu.backward(&g);
        let g = self.bn.backward(&g);
        self.conv1.backward(&g)
    }
}

impl Params for ProjHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }
}
