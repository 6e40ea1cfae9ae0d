//! The two-stream forgery-localization model.
//!
//! One encoder stream reads the standardized RGB image, the other reads the
//! raw-pixel noise residual. Their deepest feature maps are concatenated
//! channel-wise, passed through ASPP, bilinearly upsampled, and fed to the
//! segmentation head (always) and the projection head (training mode only).

mod aspp;
mod checkpoint;
mod encoder;
mod heads;

pub use aspp::Aspp;
pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint};
pub use encoder::{Bottleneck, ConvBn, Encoder, ResnetEncoder, TinyEncoder};
pub use heads::{ProjHead, SegHead};

use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, bilinear_resize_backward, ForwardCtx, Param, Params};
use crate::srm::apply_srm_batch;
use crate::tensor::{concat_channels, split_channels, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Channel statistics used to standardize the RGB stream input (the
/// residual stream consumes raw [0, 255] pixels).
pub const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    /// Bottleneck-residual encoder, stages (3, 4, 6, 3), stride 32.
    #[serde(rename = "resnet50")]
    Resnet50,
    /// The same encoder truncated to its first two stages (stride 8).
    #[serde(rename = "resnet50-2stage")]
    Resnet50TwoStage,
    /// Small strided convnet for CPU-scale experiments.
    #[serde(rename = "tiny")]
    Tiny,
}

impl EncoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderKind::Resnet50 => "resnet50",
            EncoderKind::Resnet50TwoStage => "resnet50-2stage",
            EncoderKind::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50" => Ok(EncoderKind::Resnet50),
            "resnet50-2stage" => Ok(EncoderKind::Resnet50TwoStage),
            "tiny" => Ok(EncoderKind::Tiny),
            other => Err(Error::Config(format!(
                "unknown encoder '{other}' (expected resnet50, resnet50-2stage, or tiny)"
            ))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input size in pixels.
    pub input_size: usize,
    /// Projection embedding width.
    pub embed_dim: usize,
    /// Segmentation classes; always 2 (untampered, tampered).
    pub num_classes: usize,
    /// Dilation rates of the ASPP branches.
    pub aspp_rates: Vec<usize>,
    /// Channels per ASPP branch and of its projected output.
    pub aspp_channels: usize,
    pub encoder: EncoderKind,
    /// 1 runs both heads at full resolution; 4 runs them at 1/4 resolution
    /// (logits are upsampled back) for memory-constrained settings.
    pub head_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 256,
            embed_dim: 256,
            num_classes: 2,
            aspp_rates: vec![6, 12, 18],
            aspp_channels: 256,
            encoder: EncoderKind::Resnet50,
            head_stride: 1,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU-scale training and tests.
    pub fn tiny(input_size: usize) -> Self {
        ModelConfig {
            input_size,
            embed_dim: 32,
            num_classes: 2,
            aspp_rates: vec![6, 12, 18],
            aspp_channels: 48,
            encoder: EncoderKind::Tiny,
            head_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        if self.head_stride != 1 && self.head_stride != 4 {
            return Err(Error::Config(format!(
                "head_stride must be 1 or 4, got {}",
                self.head_stride
            )));
        }
        let stride = match self.encoder {
            EncoderKind::Resnet50 => 32,
            EncoderKind::Resnet50TwoStage | EncoderKind::Tiny => 8,
        };
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of the encoder stride {stride}",
                self.input_size
            )));
        }
        if self.input_size % self.head_stride != 0 {
            return Err(Error::Config(format!(
                "input_size {} not divisible by head_stride {}",
                self.input_size, self.head_stride
            )));
        }
        if self.embed_dim == 0 || self.aspp_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// Model outputs for one batch. `projection` is present only in training
/// mode; in the reduced-resolution head mode its spatial size is
/// `input_size / head_stride`, otherwise it matches the input.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Bx2xHxW pre-softmax segmentation logits at input resolution.
    pub logits: Tensor,
    /// BxDxH'xW' projection feature map.
    pub projection: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct ForwardSizes {
    aspp_hw: (usize, usize),
    head_hw: (usize, usize),
    stream_channels: (usize, usize),
}

pub struct Model {
    config: ModelConfig,
    rgb_encoder: Encoder,
    srm_encoder: Encoder,
    aspp: Aspp,
    seg_head: SegHead,
    proj_head: ProjHead,
    sizes: Option<ForwardSizes>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let build_encoder = |rng: &mut ChaCha12Rng| match config.encoder {
            EncoderKind::Resnet50 => Encoder::Resnet(ResnetEncoder::new(4, rng)),
            EncoderKind::Resnet50TwoStage => Encoder::Resnet(ResnetEncoder::new(2, rng)),
            EncoderKind::Tiny => Encoder::Tiny(TinyEncoder::new(rng)),
        };
        let rgb_encoder = build_encoder(&mut rng);
        let srm_encoder = build_encoder(&mut rng);
        let fused_channels = rgb_encoder.out_channels() + srm_encoder.out_channels();
        let aspp = Aspp::new(
            fused_channels,
            config.aspp_channels,
            &config.aspp_rates,
            &mut rng,
        );
        let seg_head = SegHead::new(config.aspp_channels, config.num_classes, &mut rng);
        let proj_head = ProjHead::new(config.aspp_channels, config.embed_dim, &mut rng);
        Ok(Model {
            config,
            rgb_encoder,
            srm_encoder,
            aspp,
            seg_head,
            proj_head,
            sizes: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Channel-wise fusion of the deepest feature maps of the two streams.
    pub fn encode_two_stream(&mut self, rgb: &Tensor, srm: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let (_, _, rh, rw) = rgb.dims4();
        let (_, _, sh, sw) = srm.dims4();
        if (rh, rw) != (sh, sw) {
            return Err(Error::InvalidInput(format!(
                "stream spatial mismatch: rgb {rh}x{rw} vs residual {sh}x{sw}"
            )));
        }
        let rgb_feat = self.rgb_encoder.forward(rgb, ctx);
        let srm_feat = self.srm_encoder.forward(srm, ctx);
        Ok(concat_channels(&[&rgb_feat, &srm_feat]))
    }

    /// Full forward pass on a batch of raw RGB images (Bx3xSxS, values in
    /// [0, 255]). The noise residual and the RGB standardization are
    /// computed internally. The projection head runs only when
    /// `ctx.training` is set.
    pub fn forward(&mut self, images: &Tensor, ctx: &ForwardCtx) -> Result<ModelOutput> {
        Ok(self.forward_with_features(images, ctx)?.0)
    }

    /// [`Model::forward`] that also returns the segmentation head's
    /// penultimate activation (Bx(aspp_channels)xH'xW').
    pub fn forward_with_features(
        &mut self,
        images: &Tensor,
        ctx: &ForwardCtx,
    ) -> Result<(ModelOutput, Tensor)> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::InvalidInput(format!(
                "expected a Bx3xSxS image batch, got {shape:?}"
            )));
        }
        let s = self.config.input_size;
        if shape[2] != s || shape[3] != s {
            return Err(Error::InvalidInput(format!(
                "expected {s}x{s} input, got {}x{}",
                shape[2], shape[3]
            )));
        }

        let srm = apply_srm_batch(images)?;
        let rgb = standardize_rgb(images);
        let fused = self.encode_two_stream(&rgb, &srm, ctx)?;
        let (_, _, ah, aw) = fused.dims4();
        let multi_scale = self.aspp.forward(&fused, ctx);
        let head_size = s / self.config.head_stride;
        let upsampled = bilinear_resize(&multi_scale, head_size, head_size);
        let (head_logits, penultimate) = self.seg_head.forward(&upsampled, ctx);
        let logits = if self.config.head_stride == 1 {
            head_logits
        } else {
            bilinear_resize(&head_logits, s, s)
        };
        let projection = if ctx.training {
            Some(self.proj_head.forward(&upsampled, ctx))
        } else {
            None
        };
        if ctx.record {
            self.sizes = Some(ForwardSizes {
                aspp_hw: (ah, aw),
                head_hw: (head_size, head_size),
                stream_channels: (
                    self.rgb_encoder.out_channels(),
                    self.srm_encoder.out_channels(),
                ),
            });
        }
        Ok((ModelOutput { logits, projection }, penultimate))
    }

    /// Backward pass from gradients on the outputs of a recorded training
    /// forward. Accumulates parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor, grad_projection: Option<&Tensor>) {
        let sizes = self.sizes.take().expect("model backward without recorded forward");
        let (hh, hw) = sizes.head_hw;
        let g_head_logits = if self.config.head_stride == 1 {
            grad_logits.clone()
        } else {
            bilinear_resize_backward(grad_logits, hh, hw)
        };
        let mut g_up = self.seg_head.backward(&g_head_logits);
        if let Some(gp) = grad_projection {
            let g_proj = self.proj_head.backward(gp);
            g_up = g_up.add(&g_proj);
        }
        let (ah, aw) = sizes.aspp_hw;
        let g_aspp = bilinear_resize_backward(&g_up, ah, aw);
        let g_fused = self.aspp.backward(&g_aspp);
        let (c_rgb, c_srm) = sizes.stream_channels;
        let parts = split_channels(&g_fused, &[c_rgb, c_srm]);
        self.rgb_encoder.backward(&parts[0]);
        self.srm_encoder.backward(&parts[1]);
    }
}

impl Params for Model {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.rgb_encoder.visit_params(&format!("{prefix}.rgb_encoder"), f);
        self.srm_encoder.visit_params(&format!("{prefix}.srm_encoder"), f);
        self.aspp.visit_params(&format!("{prefix}.aspp"), f);
        self.seg_head.visit_params(&format!("{prefix}.seg_head"), f);
        self.proj_head.visit_params(&format!("{prefix}.proj_head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.rgb_encoder.visit_buffers(&format!("{prefix}.rgb_encoder"), f);
        self.srm_encoder.visit_buffers(&format!("{prefix}.srm_encoder"), f);
        self.aspp.visit_buffers(&format!("{prefix}.aspp"), f);
        self.seg_head.visit_buffers(&format!("{prefix}.seg_head"), f);
        self.proj_head.visit_buffers(&format!("{prefix}.proj_head"), f);
    }
}

/// Scales raw [0, 255] RGB to [0, 1] and standardizes each channel with the
/// generic natural-image statistics.
pub fn standardize_rgb(images: &Tensor) -> Tensor {
    let (b, c, h, w) = images.dims4();
    assert_eq!(c, 3);
    let mut out = images.clone();
    let plane = h * w;
    for n in 0..b {
        for ch in 0..3 {
            let base = (n * 3 + ch) * plane;
            let mean = RGB_MEAN[ch];
            let std = RGB_STD[ch];
            for v in &mut out.data_mut()[base..base + plane] {
                *v = (*v / 255.0 - mean) / std;
            }
        }
    }
    out
}
