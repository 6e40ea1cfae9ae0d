//! Training loop: Adam on the combined objective with a stepped
//! learning-rate schedule, line-delimited logging, and checkpointing.

use crate::data::{flip_horizontal, preprocess, BatchReduction, ForgerySample, PreparedSample, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::loss::{combined_loss_grads, weighted_ce_loss_grad, LossBreakdown};
use crate::model::{save_checkpoint, Model};
use crate::nn::{Adam, ForwardCtx};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// The stepped schedule: the base rate times `factor^(epoch / every)` with
/// integer division over the 0-based epoch index.
pub fn lr_for_epoch(cfg: &TrainConfig, epoch0: usize) -> f64 {
    cfg.lr * cfg.lr_decay_factor.powi((epoch0 / cfg.lr_decay_epochs) as i32)
}

/// Stacks prepared samples into one Bx3xSxS batch plus per-image masks.
pub fn assemble_batch(batch: &[PreparedSample]) -> (Tensor, Vec<Tensor>) {
    assert!(!batch.is_empty());
    let (c, h, w) = batch[0].image.dims3();
    let mut images = Tensor::zeros(&[batch.len(), c, h, w]);
    let plane = c * h * w;
    let mut masks = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        images.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(sample.image.data());
        masks.push(sample.mask.clone());
    }
    (images, masks)
}

/// Batch-aggregated loss and output gradients.
pub struct BatchEval {
    pub breakdown: LossBreakdown,
    pub grad_logits: Tensor,
    pub grad_projection: Option<Tensor>,
}

/// Forward pass plus per-image losses, aggregated over the batch
/// (cross-entropy by mean; the contrastive term by the configured
/// reduction), with gradients scaled to match.
pub fn batch_loss_and_grads(
    model: &mut Model,
    batch: &[PreparedSample],
    cfg: &TrainConfig,
    ctx: &ForwardCtx,
) -> Result<BatchEval> {
    let (images, masks) = assemble_batch(batch);
    let out = model.forward(&images, ctx)?;
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let lcon_scale = match cfg.lcon_batch {
        BatchReduction::Mean => inv_b,
        BatchReduction::Sum => 1.0,
    };
    let loss_cfg = cfg.loss_config();

    let mut grad_logits = Tensor::zeros(out.logits.shape());
    let logit_plane = out.logits.numel() / b;
    let mut grad_projection = if cfg.contrastive {
        let proj = out
            .projection
            .as_ref()
            .ok_or_else(|| Error::ContractViolation("training forward lost projection".into()))?;
        Some(Tensor::zeros(proj.shape()))
    } else {
        None
    };

    let mut l_ce = 0.0;
    let mut l_con = 0.0;
    let mut anchors_used = 0usize;
    for i in 0..b {
        let logits_i = out.logits.batch_item(i);
        if cfg.contrastive {
            let proj = out.projection.as_ref().unwrap();
            let proj_i = proj.batch_item(i);
            let (bd, gl, gp) =
                combined_loss_grads(&logits_i, Some(&proj_i), &masks[i], &loss_cfg)?;
            l_ce += bd.l_ce * inv_b;
            l_con += bd.l_con * lcon_scale;
            anchors_used += bd.anchors_used;
            let dst = &mut grad_logits.data_mut()[i * logit_plane..(i + 1) * logit_plane];
            for (d, &g) in dst.iter_mut().zip(gl.data()) {
                *d = g * inv_b;
            }
            let gp_batch = grad_projection.as_mut().unwrap();
            let proj_plane = gp_batch.numel() / b;
            let dst = &mut gp_batch.data_mut()[i * proj_plane..(i + 1) * proj_plane];
            for (d, &g) in dst.iter_mut().zip(gp.data()) {
                *d = g * lcon_scale;
            }
        } else {
            let (ce, gl) = weighted_ce_loss_grad(&logits_i, &masks[i], cfg.ce_weights)?;
            l_ce += ce * inv_b;
            let dst = &mut grad_logits.data_mut()[i * logit_plane..(i + 1) * logit_plane];
            for (d, &g) in dst.iter_mut().zip(gl.data()) {
                *d = g * inv_b;
            }
        }
    }
    Ok(BatchEval {
        breakdown: LossBreakdown {
            l_ce,
            l_con,
            total: l_ce + l_con,
            anchors_used,
        },
        grad_logits,
        grad_projection,
    })
}

/// Loss only, with a side-effect-free forward; used by gradient probes.
pub fn batch_loss_only(
    model: &mut Model,
    batch: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (images, masks) = assemble_batch(batch);
    let out = model.forward(&images, &ForwardCtx::probe())?;
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let lcon_scale = match cfg.lcon_batch {
        BatchReduction::Mean => inv_b,
        BatchReduction::Sum => 1.0,
    };
    let loss_cfg = cfg.loss_config();
    let mut l_ce = 0.0;
    let mut l_con = 0.0;
    let mut anchors_used = 0usize;
    for i in 0..b {
        let logits_i = out.logits.batch_item(i);
        if cfg.contrastive {
            let proj_i = out.projection.as_ref().unwrap().batch_item(i);
            let bd = crate::loss::combined_loss(&logits_i, Some(&proj_i), &masks[i], &loss_cfg)?;
            l_ce += bd.l_ce * inv_b;
            l_con += bd.l_con * lcon_scale;
            anchors_used += bd.anchors_used;
        } else {
            let ce = crate::loss::weighted_ce_loss(&logits_i, &masks[i], cfg.ce_weights)?;
            l_ce += ce * inv_b;
        }
    }
    Ok(LossBreakdown {
        l_ce,
        l_con,
        total: l_ce + l_con,
        anchors_used,
    })
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs_run: usize,
    pub best_val_auc: Option<f64>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    /// The full line-delimited training log.
    pub log: String,
}

/// Trains the model in place. Per-epoch and per-step records go to
/// `<out_dir>/train.log`; checkpoints are written at the end
/// (`final.fglc`) and at every new best validation AUC (`best.fglc`).
/// Non-finite losses abort with the offending batch ids.
pub fn train(
    model: &mut Model,
    train_samples: &[ForgerySample],
    val_samples: &[ForgerySample],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Dataset("empty training dataset".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train.log");
    let final_path = out_dir.join("final.fglc");
    let best_path = out_dir.join("best.fglc");

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut log = String::new();
    let mut step = 0usize;
    let mut best_val: Option<f64> = None;
    let mut wrote_best = false;
    let mut epochs_run = 0usize;

    // Prepared samples are cached; flips are applied per use.
    let prepared: Vec<PreparedSample> = train_samples
        .iter()
        .map(|s| preprocess(s, cfg.image_size))
        .collect();

    'training: for epoch0 in 0..cfg.epochs {
        let lr = lr_for_epoch(cfg, epoch0);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        epochs_run = epoch0 + 1;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreparedSample> = chunk
                .iter()
                .map(|&idx| {
                    if cfg.flip_augment && rng.gen_bool(0.5) {
                        flip_horizontal(&prepared[idx])
                    } else {
                        prepared[idx].clone()
                    }
                })
                .collect();
            let eval = batch_loss_and_grads(model, &batch, cfg, &ForwardCtx::train())?;
            if !eval.breakdown.total.is_finite() {
                std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
                return Err(Error::NonFiniteLoss {
                    epoch: epoch0 + 1,
                    step: step + 1,
                    batch_ids: batch.iter().map(|s| s.id.clone()).collect(),
                });
            }
            Adam::zero_grads(model);
            model.backward(&eval.grad_logits, eval.grad_projection.as_ref());
            adam.step(model, lr);
            step += 1;
            let _ = writeln!(
                log,
                "epoch={} step={} l_ce={:.6e} l_con={:.6e} total={:.6e} lr={:.6e}",
                epoch0 + 1,
                step,
                eval.breakdown.l_ce,
                eval.breakdown.l_con,
                eval.breakdown.total,
                lr
            );
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'training;
            }
        }

        let validate_now = cfg.val_every > 0
            && !val_samples.is_empty()
            && (epoch0 + 1) % cfg.val_every == 0;
        if validate_now {
            let report = evaluate_model(model, val_samples)?;
            let _ = writeln!(
                log,
                "epoch={} val_auc={:.6e} scored={} skipped={}",
                epoch0 + 1,
                report.mean_auc,
                report.per_image.len(),
                report.skipped
            );
            if best_val.map_or(true, |b| report.mean_auc > b) {
                best_val = Some(report.mean_auc);
                save_checkpoint(model, &best_path)?;
                wrote_best = true;
            }
        }
    }

    save_checkpoint(model, &final_path)?;
    std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainReport {
        steps: step,
        epochs_run,
        best_val_auc: best_val,
        final_checkpoint: final_path,
        best_checkpoint: wrote_best.then_some(best_path),
        log,
    })
}
