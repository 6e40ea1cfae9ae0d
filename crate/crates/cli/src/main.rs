//! Command-line entry points for training, evaluation, prediction,
//! synthetic dataset generation, feature export, and self-testing.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime/data error.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use forgeloc_core::data::{load_dataset, preprocess, TrainConfig};
use forgeloc_core::eval::{
    cross_dataset_eval, evaluate_model, export_mean_features, features_to_text,
    tamper_probabilities,
};
use forgeloc_core::model::{load_checkpoint, Model};
use forgeloc_core::nn::ForwardCtx;
use forgeloc_core::selftest::{run_all, Perturbation};
use forgeloc_core::synth::{write_synth_dataset, SynthOp};
use forgeloc_core::train::train;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "forgeloc", version, about = "Image forgery localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory.
    Train {
        /// Dataset root (images/, masks/, split manifests).
        #[arg(long)]
        dataset: PathBuf,
        /// Flat key-value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, repeatable (KEY=VALUE).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (checkpoints, log, manifest).
        #[arg(long)]
        output: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a dataset split with a trained model.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Split manifest name.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate every checkpoint on every dataset (a train x eval grid).
    CrossEval {
        /// Checkpoint path, repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Dataset root, repeatable.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write tamper probability and binary mask images for one input.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic forgery dataset.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Comma-separated ops: splice, copymove, removal.
        #[arg(long, default_value = "splice,copymove,removal")]
        ops: String,
        /// Procedural authentic pool size.
        #[arg(long, default_value_t = 8)]
        pool_size: usize,
        /// Directory of authentic images to tamper instead of the
        /// procedural pool.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Export per-image class-mean segmentation features.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the built-in oracle and gradient suites.
    Selftest {
        /// Fault-injection hook used to verify the suites can fail.
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

/// A reproducibility manifest written into every command's output
/// directory.
fn write_manifest(output: &Path, command: &str, detail: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(output)
        .with_context(|| format!("creating {}", output.display()))?;
    let mut s = String::new();
    let _ = writeln!(s, "forgeloc-run-manifest v1");
    let _ = writeln!(s, "tool_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "command = {command}");
    let args: Vec<String> = std::env::args().collect();
    let _ = writeln!(s, "invocation = {}", args.join(" "));
    s.push_str(detail);
    let path = output.join("run-manifest.txt");
    std::fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_config(
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> anyhow::Result<TrainConfig> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    for entry in overrides {
        let (key, value) = entry
            .split_once('=')
            .with_context(|| format!("override '{entry}' is not KEY=VALUE"))?;
        cfg.apply(key.trim(), value.trim())?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train {
            dataset,
            config,
            overrides,
            output,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), &overrides, seed)?;
            let train_set = load_dataset(&dataset, &cfg.train_split)?;
            if train_set.missing_masks > 0 {
                eprintln!(
                    "warning: skipped {} sample(s) without masks",
                    train_set.missing_masks
                );
            }
            let val_set = match load_dataset(&dataset, &cfg.val_split) {
                Ok(set) => set.samples,
                Err(forgeloc_core::Error::Io { .. }) => {
                    eprintln!(
                        "warning: no '{}' split manifest; training without validation",
                        cfg.val_split
                    );
                    Vec::new()
                }
                Err(e) => return Err(e.into()),
            };
            write_manifest(
                &output,
                "train",
                &format!("dataset = {}\n{}", dataset.display(), cfg.to_text()),
            )?;
            let mut model = Model::new(cfg.model_config(), cfg.seed)?;
            let report = train(&mut model, &train_set.samples, &val_set, &cfg, &output)?;
            println!(
                "trained {} step(s) over {} epoch(s); final checkpoint: {}",
                report.steps,
                report.epochs_run,
                report.final_checkpoint.display()
            );
            if let (Some(auc), Some(path)) = (report.best_val_auc, &report.best_checkpoint) {
                println!("best validation auc {auc:.6}: {}", path.display());
            }
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            split,
            output,
        } => {
            let mut model = load_checkpoint(&checkpoint)?;
            let set = load_dataset(&dataset, &split)?;
            if set.missing_masks > 0 {
                eprintln!("warning: skipped {} sample(s) without masks", set.missing_masks);
            }
            let report = evaluate_model(&mut model, &set.samples)?;
            write_manifest(
                &output,
                "evaluate",
                &format!(
                    "checkpoint = {}\ndataset = {}\nsplit = {split}\nconfig_hash = {}\n",
                    checkpoint.display(),
                    dataset.display(),
                    report.config_hash
                ),
            )?;
            let path = output.join("eval-report.txt");
            std::fs::write(&path, report.to_text())
                .with_context(|| format!("writing {}", path.display()))?;
            println!(
                "mean pixel AUC {:.6} over {} image(s) ({} skipped); report: {}",
                report.mean_auc,
                report.per_image.len(),
                report.skipped,
                path.display()
            );
        }
        Command::CrossEval {
            checkpoints,
            datasets,
            split,
            output,
        } => {
            let mut models = Vec::new();
            for path in &checkpoints {
                let model = load_checkpoint(path)?;
                models.push((path.display().to_string(), model));
            }
            let mut sets = Vec::new();
            for root in &datasets {
                let set = load_dataset(root, &split)?;
                sets.push((root.display().to_string(), set.samples));
            }
            let report = cross_dataset_eval(&mut models, &sets)?;
            write_manifest(
                &output,
                "cross-eval",
                &format!(
                    "checkpoints = {}\ndatasets = {}\nsplit = {split}\n",
                    checkpoints.len(),
                    datasets.len()
                ),
            )?;
            let path = output.join("cross-eval.txt");
            std::fs::write(&path, report.to_text())
                .with_context(|| format!("writing {}", path.display()))?;
            print!("{}", report.to_text());
        }
        Command::Predict {
            checkpoint,
            image,
            output,
        } => {
            let mut model = load_checkpoint(&checkpoint)?;
            let rgb = image::open(&image)
                .with_context(|| format!("reading {}", image.display()))?
                .to_rgb8();
            let (orig_w, orig_h) = rgb.dimensions();
            let stem = image
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("input")
                .to_string();
            let sample = forgeloc_core::data::ForgerySample::new(
                rgb,
                vec![0; (orig_w * orig_h) as usize],
                stem.clone(),
                "predict".into(),
            )?;
            let size = model.config().input_size;
            let prepared = preprocess(&sample, size);
            let batch = prepared.image.clone().reshaped(&[1, 3, size, size])?;
            let out = model.forward(&batch, &ForwardCtx::eval())?;
            let probs = tamper_probabilities(&out.logits.batch_item(0));

            // Back to the source resolution for the emitted maps.
            let probs4 = probs.clone().reshaped(&[1, 1, size, size])?;
            let resized =
                forgeloc_core::nn::bilinear_resize(&probs4, orig_h as usize, orig_w as usize);
            write_manifest(
                &output,
                "predict",
                &format!("checkpoint = {}\nimage = {}\n", checkpoint.display(), image.display()),
            )?;
            let mut prob_img = image::GrayImage::new(orig_w, orig_h);
            let mut mask_img = image::GrayImage::new(orig_w, orig_h);
            for y in 0..orig_h {
                for x in 0..orig_w {
                    let p = resized.data()[(y * orig_w + x) as usize];
                    prob_img.put_pixel(x, y, image::Luma([(255.0 * p).round() as u8]));
                    mask_img.put_pixel(x, y, image::Luma([if p >= 0.5 { 255 } else { 0 }]));
                }
            }
            let prob_path = output.join(format!("{stem}_prob.png"));
            let mask_path = output.join(format!("{stem}_mask.png"));
            prob_img
                .save(&prob_path)
                .with_context(|| format!("writing {}", prob_path.display()))?;
            mask_img
                .save(&mask_path)
                .with_context(|| format!("writing {}", mask_path.display()))?;
            println!("wrote {} and {}", prob_path.display(), mask_path.display());
        }
        Command::Synth {
            output,
            count,
            seed,
            size,
            ops,
            pool_size,
            source,
        } => {
            let ops: Vec<SynthOp> = ops
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<forgeloc_core::Result<_>>()?;
            write_manifest(
                &output,
                "synth",
                &format!(
                    "count = {count}\nseed = {seed}\nsize = {size}\nops = {}\npool_size = {pool_size}\nsource = {}\n",
                    ops.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(","),
                    source.as_ref().map_or("procedural".to_string(), |p| p.display().to_string()),
                ),
            )?;
            let ids = if let Some(src) = source {
                let pool = load_image_pool(&src, size)?;
                forgeloc_core::synth::write_synth_dataset_from_pool(
                    &output, count, seed, &ops, &pool,
                )?
            } else {
                write_synth_dataset(&output, count, size, seed, &ops, pool_size)?
            };
            println!("wrote {} sample(s) under {}", ids.len(), output.display());
        }
        Command::ExportFeatures {
            checkpoint,
            dataset,
            split,
            output,
        } => {
            let mut model = load_checkpoint(&checkpoint)?;
            let set = load_dataset(&dataset, &split)?;
            if set.samples.is_empty() {
                bail!("empty dataset");
            }
            let rows = export_mean_features(&mut model, &set.samples)?;
            write_manifest(
                &output,
                "export-features",
                &format!(
                    "checkpoint = {}\ndataset = {}\nsplit = {split}\nrows = {}\n",
                    checkpoint.display(),
                    dataset.display(),
                    rows.len()
                ),
            )?;
            let path = output.join("features.txt");
            std::fs::write(&path, features_to_text(&rows))
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {} feature row(s) to {}", rows.len(), path.display());
        }
        Command::Selftest { perturb } => {
            let perturb: Option<Perturbation> = match perturb.as_deref() {
                Some(s) => Some(s.parse()?),
                None => None,
            };
            let results = run_all(perturb);
            let mut all_ok = true;
            for suite in &results {
                println!(
                    "{} {} ({})",
                    if suite.passed { "PASS" } else { "FAIL" },
                    suite.name,
                    suite.detail
                );
                all_ok &= suite.passed;
            }
            if !all_ok {
                bail!("selftest failed");
            }
            println!("all suites passed");
        }
    }
    Ok(())
}

fn load_image_pool(dir: &Path, size: usize) -> anyhow::Result<Vec<image::RgbImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut pool = Vec::new();
    for path in paths {
        let img = image::open(&path)
            .with_context(|| format!("reading {}", path.display()))?
            .to_rgb8();
        let resized = image::imageops::resize(
            &img,
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        );
        pool.push(resized);
    }
    if pool.is_empty() {
        bail!("no readable images in {}", dir.display());
    }
    Ok(pool)
}
