//! Dataset types, configuration, loading, and preprocessing.
//!
//! On-disk layout: `root/{images,masks}/<id>.<ext>` with name-matched files
//! (masks are 8-bit single-channel PNGs, 0 = authentic, 255 = tampered),
//! plus one plain-text manifest per split (`root/<split>.txt`, one id per
//! line). Masks binarize at > 127.

use crate::error::{Error, Result};
use crate::model::EncoderKind;
use crate::tensor::Tensor;
use image::RgbImage;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// An RGB image paired with its binary tamper mask (1 = tampered).
#[derive(Debug, Clone)]
pub struct ForgerySample {
    pub image: RgbImage,
    /// Row-major, one value in {0, 1} per pixel.
    pub mask: Vec<u8>,
    pub id: String,
    pub source_tag: String,
}

impl ForgerySample {
    pub fn new(image: RgbImage, mask: Vec<u8>, id: String, source_tag: String) -> Result<Self> {
        let (w, h) = image.dimensions();
        if mask.len() != (w * h) as usize {
            return Err(Error::InvalidInput(format!(
                "sample {id}: mask has {} values for a {w}x{h} image",
                mask.len()
            )));
        }
        if let Some(&bad) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!(
                "sample {id}: mask value {bad} is not binary"
            )));
        }
        Ok(ForgerySample {
            image,
            mask,
            id,
            source_tag,
        })
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// Fraction of tampered pixels.
    pub fn tamper_ratio(&self) -> f64 {
        let ones: usize = self.mask.iter().map(|&v| v as usize).sum();
        ones as f64 / self.mask.len() as f64
    }
}

/// How per-image contrastive losses combine across a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchReduction {
    Mean,
    Sum,
}

impl std::str::FromStr for BatchReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(BatchReduction::Mean),
            "sum" => Ok(BatchReduction::Sum),
            other => Err(Error::Config(format!(
                "unknown reduction '{other}' (expected mean or sum)"
            ))),
        }
    }
}

impl std::fmt::Display for BatchReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BatchReduction::Mean => "mean",
            BatchReduction::Sum => "sum",
        })
    }
}

/// Training configuration. Serializes to (and parses from) a flat
/// `key = value` text file; every key below is also accepted as a
/// `--override KEY=VALUE` on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub image_size: usize,
    pub k: usize,
    pub tau: f64,
    pub ce_weights: (f64, f64),
    pub seed: u64,
    pub encoder: EncoderKind,
    pub embed_dim: usize,
    pub aspp_channels: usize,
    pub head_stride: usize,
    /// Train with the contrastive term (false = cross-entropy only).
    pub contrastive: bool,
    /// Batch reduction of the per-image contrastive losses.
    pub lcon_batch: BatchReduction,
    /// Stop after this many optimizer steps (0 = run all epochs).
    pub max_steps: usize,
    /// Run validation every N epochs (0 = never).
    pub val_every: usize,
    pub train_split: String,
    pub val_split: String,
    /// Random horizontal flips during training.
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            lr_decay_factor: 0.8,
            lr_decay_epochs: 20,
            batch_size: 4,
            epochs: 100,
            image_size: 256,
            k: 64,
            tau: 0.1,
            ce_weights: (1.0, 10.0),
            seed: 0,
            encoder: EncoderKind::Resnet50,
            embed_dim: 256,
            aspp_channels: 256,
            head_stride: 1,
            contrastive: true,
            lcon_batch: BatchReduction::Mean,
            max_steps: 0,
            val_every: 1,
            train_split: "train".into(),
            val_split: "val".into(),
            flip_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Config("lr and tau must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.lr_decay_epochs == 0 || !(0.0..=1.0).contains(&self.lr_decay_factor) {
            return Err(Error::Config(
                "lr_decay_epochs must be positive and lr_decay_factor in (0, 1]".into(),
            ));
        }
        if self.k == 0 || self.image_size % self.k != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by k {}",
                self.image_size, self.k
            )));
        }
        let head_size = self.image_size / self.head_stride.max(1);
        if head_size % self.k != 0 {
            return Err(Error::Config(format!(
                "projection resolution {head_size} must be divisible by k {}",
                self.k
            )));
        }
        if self.ce_weights.0 <= 0.0 || self.ce_weights.1 <= 0.0 {
            return Err(Error::Config("ce_weights must be positive".into()));
        }
        self.model_config().validate()
    }

    /// The model configuration implied by this training configuration.
    pub fn model_config(&self) -> crate::model::ModelConfig {
        crate::model::ModelConfig {
            input_size: self.image_size,
            embed_dim: self.embed_dim,
            num_classes: 2,
            aspp_rates: vec![6, 12, 18],
            aspp_channels: self.aspp_channels,
            encoder: self.encoder,
            head_stride: self.head_stride,
        }
    }

    /// Applies one `key = value` (or `key=value`) assignment. Unknown keys
    /// are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad_value =
            |e: String| Error::Config(format!("key '{key}': bad value '{value}': {e}"));
        macro_rules! parse {
            () => {
                value.parse().map_err(|e| bad_value(format!("{e}")))?
            };
        }
        match key {
            "lr" => self.lr = parse!(),
            "lr_decay_factor" => self.lr_decay_factor = parse!(),
            "lr_decay_epochs" => self.lr_decay_epochs = parse!(),
            "batch_size" => self.batch_size = parse!(),
            "epochs" => self.epochs = parse!(),
            "image_size" => self.image_size = parse!(),
            "k" => self.k = parse!(),
            "tau" => self.tau = parse!(),
            "ce_weights" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(bad_value("expected two comma-separated weights".into()));
                }
                let w0 = parts[0].parse().map_err(|e| bad_value(format!("{e}")))?;
                let w1 = parts[1].parse().map_err(|e| bad_value(format!("{e}")))?;
                self.ce_weights = (w0, w1);
            }
            "seed" => self.seed = parse!(),
            "encoder" => self.encoder = parse!(),
            "embed_dim" => self.embed_dim = parse!(),
            "aspp_channels" => self.aspp_channels = parse!(),
            "head_stride" => self.head_stride = parse!(),
            "contrastive" => self.contrastive = parse!(),
            "lcon_batch" => self.lcon_batch = parse!(),
            "max_steps" => self.max_steps = parse!(),
            "val_every" => self.val_every = parse!(),
            "train_split" => self.train_split = value.to_string(),
            "val_split" => self.val_split = value.to_string(),
            "flip_augment" => self.flip_augment = parse!(),
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parses a flat key-value config file (`key = value` lines, `#`
    /// comments) on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// The flat key-value form of this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(s, "lr_decay_epochs = {}", self.lr_decay_epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "ce_weights = {},{}", self.ce_weights.0, self.ce_weights.1);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "encoder = {}", self.encoder);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "aspp_channels = {}", self.aspp_channels);
        let _ = writeln!(s, "head_stride = {}", self.head_stride);
        let _ = writeln!(s, "contrastive = {}", self.contrastive);
        let _ = writeln!(s, "lcon_batch = {}", self.lcon_batch);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "val_every = {}", self.val_every);
        let _ = writeln!(s, "train_split = {}", self.train_split);
        let _ = writeln!(s, "val_split = {}", self.val_split);
        let _ = writeln!(s, "flip_augment = {}", self.flip_augment);
        s
    }

    pub fn loss_config(&self) -> crate::loss::LossConfig {
        crate::loss::LossConfig {
            k: self.k,
            tau: self.tau,
            ce_weights: self.ce_weights,
        }
    }
}

/// A loaded split plus bookkeeping about skipped entries.
#[derive(Debug)]
pub struct LoadedDataset {
    pub samples: Vec<ForgerySample>,
    /// Manifest entries skipped because their mask file was missing.
    pub missing_masks: usize,
}

fn stem_index(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                map.insert(stem.to_string(), path);
            }
        }
    }
    Ok(map)
}

/// Loads the samples named by `root/<split>.txt`, in manifest order.
/// Entries without a mask are skipped and counted; unreadable files are an
/// error naming the path.
pub fn load_dataset(root: &Path, split: &str) -> Result<LoadedDataset> {
    let manifest = root.join(format!("{split}.txt"));
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let images = stem_index(&root.join("images"))?;
    let masks = stem_index(&root.join("masks"))?;
    let source_tag = root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();

    let mut samples = Vec::new();
    let mut missing_masks = 0usize;
    for raw in text.lines() {
        let id = raw.trim();
        if id.is_empty() || id.starts_with('#') {
            continue;
        }
        let image_path = images.get(id).ok_or_else(|| {
            Error::Dataset(format!("{split}: no image file for id '{id}'"))
        })?;
        let Some(mask_path) = masks.get(id) else {
            missing_masks += 1;
            continue;
        };
        let image = image::open(image_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", image_path.display())))?
            .to_rgb8();
        let mask_img = image::open(mask_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", mask_path.display())))?
            .to_luma8();
        if mask_img.dimensions() != image.dimensions() {
            return Err(Error::Dataset(format!(
                "{id}: mask {}x{} does not match image {}x{}",
                mask_img.width(),
                mask_img.height(),
                image.width(),
                image.height()
            )));
        }
        let mask: Vec<u8> = mask_img.pixels().map(|p| u8::from(p.0[0] > 127)).collect();
        samples.push(ForgerySample::new(
            image,
            mask,
            id.to_string(),
            source_tag.clone(),
        )?);
    }
    Ok(LoadedDataset {
        samples,
        missing_masks,
    })
}

/// A model-ready pair: the image as a 3xSxS tensor with raw [0, 255]
/// values (the model standardizes internally) and the binary mask as SxS.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub id: String,
}

/// Resizes a sample to the configured square size: bilinear for the image,
/// nearest-neighbor for the mask (which therefore stays binary).
pub fn preprocess(sample: &ForgerySample, image_size: usize) -> PreparedSample {
    let s = image_size as u32;
    let resized = if sample.image.dimensions() == (s, s) {
        sample.image.clone()
    } else {
        image::imageops::resize(&sample.image, s, s, image::imageops::FilterType::Triangle)
    };
    let mask_resized: Vec<u8> = if sample.image.dimensions() == (s, s) {
        sample.mask.clone()
    } else {
        let (w, h) = sample.image.dimensions();
        nearest_resize(&sample.mask, w as usize, h as usize, image_size)
    };

    let n = image_size * image_size;
    let mut image_data = vec![0.0; 3 * n];
    for (i, px) in resized.pixels().enumerate() {
        image_data[i] = px.0[0] as f64;
        image_data[n + i] = px.0[1] as f64;
        image_data[2 * n + i] = px.0[2] as f64;
    }
    let mask_data: Vec<f64> = mask_resized.iter().map(|&v| v as f64).collect();
    PreparedSample {
        image: Tensor::from_vec(&[3, image_size, image_size], image_data).expect("image shape"),
        mask: Tensor::from_vec(&[image_size, image_size], mask_data).expect("mask shape"),
        id: sample.id.clone(),
    }
}

fn nearest_resize(mask: &[u8], w: usize, h: usize, out: usize) -> Vec<u8> {
    let mut resized = vec![0u8; out * out];
    for y in 0..out {
        // Same half-pixel-center convention as the image resize.
        let sy = (((y as f64 + 0.5) * h as f64 / out as f64) as usize).min(h - 1);
        for x in 0..out {
            let sx = (((x as f64 + 0.5) * w as f64 / out as f64) as usize).min(w - 1);
            resized[y * out + x] = mask[sy * w + sx];
        }
    }
    resized
}

/// Horizontal flip of a prepared sample (training augmentation).
pub fn flip_horizontal(sample: &PreparedSample) -> PreparedSample {
    let (c, h, w) = sample.image.dims3();
    let mut image = sample.image.clone();
    for ch in 0..c {
        for y in 0..h {
            let row = &mut image.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w];
            row.reverse();
        }
    }
    let mut mask = sample.mask.clone();
    for y in 0..h {
        let row = &mut mask.data_mut()[y * w..(y + 1) * w];
        row.reverse();
    }
    PreparedSample {
        image,
        mask,
        id: sample.id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn checker_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            if (x + y) % 2 == 0 {
                Rgb([200, 100, 50])
            } else {
                Rgb([10, 20, 30])
            }
        })
    }

    #[test]
    fn config_roundtrip_and_overrides() {
        let mut cfg = TrainConfig::default();
        cfg.apply("epochs", "5").unwrap();
        cfg.apply("ce_weights", "2, 20").unwrap();
        cfg.apply("encoder", "tiny").unwrap();
        cfg.apply("lcon_batch", "sum").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.ce_weights, (2.0, 20.0));
        assert_eq!(cfg.encoder, EncoderKind::Tiny);
        let parsed = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let mut cfg = TrainConfig::default();
        assert!(matches!(
            cfg.apply("learning_rate", "0.1"),
            Err(Error::Config(_))
        ));
        assert!(TrainConfig::from_text("nonsense = 1\n").is_err());
    }

    #[test]
    fn validates_grid_divisibility() {
        let mut cfg = TrainConfig::default();
        cfg.image_size = 100;
        cfg.k = 64;
        cfg.encoder = EncoderKind::Tiny;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.image_size = 64;
        cfg.k = 16;
        cfg.encoder = EncoderKind::Tiny;
        cfg.embed_dim = 8;
        cfg.aspp_channels = 8;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn dataset_loading_skips_missing_masks() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        for i in 0..3 {
            checker_image(16, 12)
                .save(root.join(format!("images/s{i}.png")))
                .unwrap();
        }
        // Mask values 200 binarize to 1; only two samples get masks.
        for i in 0..2 {
            let mask = image::GrayImage::from_fn(16, 12, |x, _| {
                image::Luma([if x < 8 { 200 } else { 0 }])
            });
            mask.save(root.join(format!("masks/s{i}.png"))).unwrap();
        }
        std::fs::write(root.join("train.txt"), "s0\ns1\ns2\n").unwrap();

        let loaded = load_dataset(root, "train").unwrap();
        assert_eq!(loaded.samples.len(), 2);
        assert_eq!(loaded.missing_masks, 1);
        assert_eq!(loaded.samples[0].id, "s0");
        let ones: usize = loaded.samples[0].mask.iter().map(|&v| v as usize).sum();
        assert_eq!(ones, 8 * 12);
    }

    #[test]
    fn preprocess_resizes_and_keeps_mask_binary() {
        let image = checker_image(512, 384);
        let mask: Vec<u8> = (0..512 * 384).map(|i| u8::from(i % 3 == 0)).collect();
        let sample = ForgerySample::new(image, mask, "a".into(), "t".into()).unwrap();
        let prepared = preprocess(&sample, 256);
        assert_eq!(prepared.image.shape(), &[3, 256, 256]);
        assert_eq!(prepared.mask.shape(), &[256, 256]);
        assert!(prepared
            .mask
            .data()
            .iter()
            .all(|&v| v == 0.0 || v == 1.0));
        assert!(prepared
            .image
            .data()
            .iter()
            .all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn preprocess_identity_for_matching_size() {
        let image = checker_image(64, 64);
        let mask: Vec<u8> = (0..64 * 64).map(|i| u8::from(i % 5 == 0)).collect();
        let sample = ForgerySample::new(image, mask.clone(), "a".into(), "t".into()).unwrap();
        let prepared = preprocess(&sample, 64);
        for (a, b) in prepared.mask.data().iter().zip(&mask) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let image = checker_image(8, 8);
        let mask: Vec<u8> = (0..64).map(|i| u8::from(i % 7 == 0)).collect();
        let sample = ForgerySample::new(image, mask, "a".into(), "t".into()).unwrap();
        let prepared = preprocess(&sample, 8);
        let twice = flip_horizontal(&flip_horizontal(&prepared));
        assert_eq!(twice.image, prepared.image);
        assert_eq!(twice.mask, prepared.mask);
    }
}
