//! Encoder backbones: a bottleneck-residual network for the full model and
//! a small strided convnet for CPU-scale runs.

use crate::nn::{BatchNorm2d, Conv2d, ForwardCtx, MaxPool2d, Param, Params, Relu};
use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;

/// Convolution followed by batch norm, the building block of everything.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(in_ch, out_ch, kernel, stride, padding, dilation, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let y = self.conv.forward(x, ctx);
        self.bn.forward(&y, ctx)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.bn.backward(grad_out);
        self.conv.backward(&g)
    }
}

impl Params for ConvBn {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }
}

/// 1x1 -> 3x3 -> 1x1 bottleneck with a residual connection and an optional
/// strided 1x1 projection on the shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: ConvBn,
    relu1: Relu,
    conv2: ConvBn,
    relu2: Relu,
    conv3: ConvBn,
    shortcut: Option<ConvBn>,
    relu_out: Relu,
}

impl Bottleneck {
    pub fn new(in_ch: usize, mid_ch: usize, stride: usize, rng: &mut ChaCha12Rng) -> Self {
        let out_ch = mid_ch * 4;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some(ConvBn::new(in_ch, out_ch, 1, stride, 0, 1, rng))
        } else {
            None
        };
        Bottleneck {
            conv1: ConvBn::new(in_ch, mid_ch, 1, 1, 0, 1, rng),
            relu1: Relu::new(),
            conv2: ConvBn::new(mid_ch, mid_ch, 3, stride, 1, 1, rng),
            relu2: Relu::new(),
            conv3: ConvBn::new(mid_ch, out_ch, 1, 1, 0, 1, rng),
            shortcut,
            relu_out: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let mut y = self.conv1.forward(x, ctx);
        y = self.relu1.forward(&y, ctx);
        y = self.conv2.forward(&y, ctx);
        y = self.relu2.forward(&y, ctx);
        y = self.conv3.forward(&y, ctx);
        let skip = match &mut self.shortcut {
            Some(proj) => proj.forward(x, ctx),
            None => x.clone(),
        };
        self.relu_out.forward(&y.add(&skip), ctx)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let g = self.relu_out.backward(grad_out);
        let mut gx = self.conv3.backward(&g);
        gx = self.relu2.backward(&gx);
        gx = self.conv2.backward(&gx);
        gx = self.relu1.backward(&gx);
        gx = self.conv1.backward(&gx);
        let g_skip = match &mut self.shortcut {
            Some(proj) => proj.backward(&g),
            None => g,
        };
        gx.add(&g_skip)
    }
}

impl Params for Bottleneck {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.conv3.visit_params(&format!("{prefix}.conv3"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params(&format!("{prefix}.shortcut"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_buffers(&format!("{prefix}.conv1"), f);
        self.conv2.visit_buffers(&format!("{prefix}.conv2"), f);
        self.conv3.visit_buffers(&format!("{prefix}.conv3"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_buffers(&format!("{prefix}.shortcut"), f);
        }
    }
}

/// Residual encoder: 7x7/2 stem, 3x3/2 max pool, then bottleneck stages.
/// The 50-layer variant uses stages (3, 4, 6, 3); the truncated variant
/// keeps the first two stages (output stride 8).
#[derive(Debug, Clone)]
pub struct ResnetEncoder {
    stem: ConvBn,
    stem_relu: Relu,
    stem_pool: MaxPool2d,
    stages: Vec<Vec<Bottleneck>>,
    out_channels: usize,
}

impl ResnetEncoder {
    pub fn new(num_stages: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!((1..=4).contains(&num_stages));
        let spec: &[(usize, usize, usize)] = &[
            (3, 64, 1),  // stage 1: in 64 after stem, out 256
            (4, 128, 2), // stage 2: out 512
            (6, 256, 2), // stage 3: out 1024
            (3, 512, 2), // stage 4: out 2048
        ];
        let mut stages = Vec::new();
        let mut in_ch = 64;
        for &(blocks, mid, stride) in &spec[..num_stages] {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                stage.push(Bottleneck::new(in_ch, mid, s, rng));
                in_ch = mid * 4;
            }
            stages.push(stage);
        }
        ResnetEncoder {
            stem: ConvBn::new(3, 64, 7, 2, 3, 1, rng),
            stem_relu: Relu::new(),
            stem_pool: MaxPool2d::new(3, 2, 1),
            stages,
            out_channels: in_ch,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stride(&self) -> usize {
        // Stem contributes 4; every stage after the first halves again.
        4 * (1 << (self.stages.len() - 1))
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let mut y = self.stem.forward(x, ctx);
        y = self.stem_relu.forward(&y, ctx);
        y = self.stem_pool.forward(&y, ctx);
        for stage in &mut self.stages {
            for block in stage {
                y = block.forward(&y, ctx);
            }
        }
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for stage in self.stages.iter_mut().rev() {
            for block in stage.iter_mut().rev() {
                g = block.backward(&g);
            }
        }
        g = self.stem_pool.backward(&g);
        g = self.stem_relu.backward(&g);
        self.stem.backward(&g)
    }
}

impl Params for ResnetEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_params(&format!("{prefix}.stage{}.block{}", i + 1, b), f);
            }
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_buffers(&format!("{prefix}.stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit_buffers(&format!("{prefix}.stage{}.block{}", i + 1, b), f);
            }
        }
    }
}

/// Small strided convnet (stride 8, 64 channels) for desk-scale training.
#[derive(Debug, Clone)]
pub struct TinyEncoder {
    blocks: Vec<(ConvBn, Relu)>,
    out_channels: usize,
}

impl TinyEncoder {
    pub fn new(rng: &mut ChaCha12Rng) -> Self {
        let widths = [(3usize, 16usize), (16, 32), (32, 64)];
        let blocks = widths
            .iter()
            .map(|&(i, o)| (ConvBn::new(i, o, 3, 2, 1, 1, rng), Relu::new()))
            .collect();
        TinyEncoder {
            blocks,
            out_channels: 64,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stride(&self) -> usize {
        1 << self.blocks.len()
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let mut y = x.clone();
        for (conv, relu) in &mut self.blocks {
            y = conv.forward(&y, ctx);
            y = relu.forward(&y, ctx);
        }
        y
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for (conv, relu) in self.blocks.iter_mut().rev() {
            g = relu.backward(&g);
            g = conv.backward(&g);
        }
        g
    }
}

impl Params for TinyEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, (conv, _)) in self.blocks.iter_mut().enumerate() {
            conv.visit_params(&format!("{prefix}.block{i}"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (conv, _)) in self.blocks.iter_mut().enumerate() {
            conv.visit_buffers(&format!("{prefix}.block{i}"), f);
        }
    }
}

/// One encoder stream of the two-stream model.
#[derive(Debug, Clone)]
pub enum Encoder {
    Resnet(ResnetEncoder),
    Tiny(TinyEncoder),
}

impl Encoder {
    pub fn out_channels(&self) -> usize {
        match self {
            Encoder::Resnet(e) => e.out_channels(),
            Encoder::Tiny(e) => e.out_channels(),
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Encoder::Resnet(e) => e.stride(),
            Encoder::Tiny(e) => e.stride(),
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        match self {
            Encoder::Resnet(e) => e.forward(x, ctx),
            Encoder::Tiny(e) => e.forward(x, ctx),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        match self {
            Encoder::Resnet(e) => e.backward(grad_out),
            Encoder::Tiny(e) => e.backward(grad_out),
        }
    }
}

impl Params for Encoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Encoder::Resnet(e) => e.visit_params(prefix, f),
            Encoder::Tiny(e) => e.visit_params(prefix, f),
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Encoder::Resnet(e) => e.visit_buffers(prefix, f),
            Encoder::Tiny(e) => e.visit_buffers(prefix, f),
        }
    }
}
