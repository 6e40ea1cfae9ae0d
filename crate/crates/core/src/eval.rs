//! Pixel-wise AUC scoring, model evaluation, cross-dataset grids, and
//! per-class mean-feature export.

use crate::data::{preprocess, ForgerySample};
use crate::error::{Error, Result};
use crate::loss::downsample_mask_majority;
use crate::model::{config_hash, Model};
use crate::nn::ForwardCtx;
use crate::tensor::Tensor;
use std::fmt::Write as _;

/// Rank-statistic ROC AUC with average ranks for ties. `labels` must hold
/// both classes; otherwise the AUC is undefined and the caller is expected
/// to skip the image.
pub fn pixel_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of positive ranks, with tied scores sharing their average rank.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// [`pixel_auc`] over an HxW score map and a binary mask tensor.
pub fn pixel_auc_map(scores: &Tensor, mask: &Tensor) -> Result<f64> {
    if scores.shape() != mask.shape() {
        return Err(Error::InvalidInput(format!(
            "score shape {:?} vs mask shape {:?}",
            scores.shape(),
            mask.shape()
        )));
    }
    let labels: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(0u8)
            } else if v == 1.0 {
                Ok(1u8)
            } else {
                Err(Error::InvalidInput(format!("mask value {v} is not binary")))
            }
        })
        .collect::<Result<_>>()?;
    pixel_auc(scores.data(), &labels)
}

/// Softmax probability of the tampered class from a 2xHxW logit map.
pub fn tamper_probabilities(logits: &Tensor) -> Tensor {
    let (c, h, w) = logits.dims3();
    assert_eq!(c, 2);
    let hw = h * w;
    let mut out = Tensor::zeros(&[h, w]);
    for p in 0..hw {
        let z0 = logits.data()[p];
        let z1 = logits.data()[hw + p];
        let m = z0.max(z1);
        let e0 = (z0 - m).exp();
        let e1 = (z1 - m).exp();
        out.data_mut()[p] = e1 / (e0 + e1);
    }
    out
}

/// Per-image and aggregate pixel-AUC scores for one dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_image: Vec<(String, f64)>,
    pub mean_auc: f64,
    /// Images skipped because their mask holds a single class.
    pub skipped: usize,
    pub config_hash: String,
}

impl EvalReport {
    /// Structured text form: a version header, one row per image, and a
    /// summary block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "forgeloc-eval-report v1");
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "aggregation = per-image mean");
        for (id, auc) in &self.per_image {
            let _ = writeln!(s, "image {id} auc {auc:.6}");
        }
        let _ = writeln!(s, "scored = {}", self.per_image.len());
        let _ = writeln!(s, "skipped = {}", self.skipped);
        let _ = writeln!(s, "mean_auc = {:.6}", self.mean_auc);
        s
    }
}

/// Scores every sample with the model in evaluation mode (projection head
/// off) and averages the per-image AUCs. Fully-authentic (or fully
/// tampered) images are skipped and counted.
pub fn evaluate_model(model: &mut Model, samples: &[ForgerySample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let size = model.config().input_size;
    let hash = config_hash(model.config());
    let mut per_image = Vec::new();
    let mut skipped = 0usize;
    for sample in samples {
        let prepared = preprocess(sample, size);
        let batch = prepared.image.clone().reshaped(&[1, 3, size, size])?;
        let out = model.forward(&batch, &ForwardCtx::eval())?;
        let probs = tamper_probabilities(&out.logits.batch_item(0));
        match pixel_auc_map(&probs, &prepared.mask) {
            Ok(auc) => per_image.push((sample.id.clone(), auc)),
            Err(Error::AucUndefined) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mean_auc = if per_image.is_empty() {
        f64::NAN
    } else {
        per_image.iter().map(|(_, a)| a).sum::<f64>() / per_image.len() as f64
    };
    Ok(EvalReport {
        per_image,
        mean_auc,
        skipped,
        config_hash: hash,
    })
}

/// Mean AUC of every (checkpoint, dataset) pair: one row per trained model,
/// one column per evaluation dataset.
pub struct CrossEvalReport {
    pub eval_names: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl CrossEvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "forgeloc-cross-eval v1");
        let _ = writeln!(s, "trained-on \\ evaluated-on\t{}", self.eval_names.join("\t"));
        for (name, cells) in &self.rows {
            let formatted: Vec<String> = cells.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{name}\t{}", formatted.join("\t"));
        }
        s
    }
}

pub fn cross_dataset_eval(
    models: &mut [(String, Model)],
    datasets: &[(String, Vec<ForgerySample>)],
) -> Result<CrossEvalReport> {
    let eval_names: Vec<String> = datasets.iter().map(|(n, _)| n.clone()).collect();
    let mut rows = Vec::new();
    for (name, model) in models.iter_mut() {
        let mut cells = Vec::new();
        for (_, samples) in datasets {
            cells.push(evaluate_model(model, samples)?.mean_auc);
        }
        rows.push((name.clone(), cells));
    }
    Ok(CrossEvalReport { eval_names, rows })
}

/// One exported mean-feature vector: the average of the segmentation
/// head's penultimate features over the pixels of one ground-truth class.
#[derive(Debug, Clone)]
pub struct FeatureRow {
    pub id: String,
    pub class: u8,
    pub vector: Vec<f64>,
}

/// Per-image class-mean features. Authentic images produce one row (class
/// 0); mixed images produce two.
pub fn export_mean_features(model: &mut Model, samples: &[ForgerySample]) -> Result<Vec<FeatureRow>> {
    let size = model.config().input_size;
    let head_size = size / model.config().head_stride;
    let mut rows = Vec::new();
    for sample in samples {
        let prepared = preprocess(sample, size);
        let batch = prepared.image.clone().reshaped(&[1, 3, size, size])?;
        let (_, penultimate) = model.forward_with_features(&batch, &ForwardCtx::eval())?;
        let feat = penultimate.batch_item(0);
        let (c, fh, fw) = feat.dims3();
        debug_assert_eq!((fh, fw), (head_size, head_size));
        // Majority-vote the mask down to the feature resolution when the
        // heads run reduced; at full resolution this is the identity.
        let labels = downsample_mask_majority(&prepared.mask, head_size)?;
        let mut sums = [vec![0.0; c], vec![0.0; c]];
        let mut counts = [0usize; 2];
        for (p, &label) in labels.iter().enumerate() {
            let cls = label as usize;
            counts[cls] += 1;
            for ch in 0..c {
                sums[cls][ch] += feat.data()[ch * fh * fw + p];
            }
        }
        for cls in 0..2 {
            if counts[cls] > 0 {
                let mut vector = std::mem::take(&mut sums[cls]);
                for v in &mut vector {
                    *v /= counts[cls] as f64;
                }
                rows.push(FeatureRow {
                    id: sample.id.clone(),
                    class: cls as u8,
                    vector,
                });
            }
        }
    }
    Ok(rows)
}

/// Delimited text form of a feature export (version header, then
/// `id class v0 v1 ...` per row).
pub fn features_to_text(rows: &[FeatureRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "forgeloc-features v1");
    for row in rows {
        let _ = write!(s, "{} {}", row.id, row.class);
        for v in &row.vector {
            let _ = write!(s, " {v:.8e}");
        }
        let _ = writeln!(s);
    }
    s
}

/// Within-class versus between-class mean cosine similarity of exported
/// feature rows.
#[derive(Debug, Clone, Copy)]
pub struct SeparationStats {
    pub within: f64,
    pub between: f64,
}

impl SeparationStats {
    pub fn gap(&self) -> f64 {
        self.within - self.between
    }
}

pub fn cosine_separation(rows: &[FeatureRow]) -> Result<SeparationStats> {
    let cosine = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut within = (0.0, 0usize);
    let mut between = (0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let sim = cosine(&rows[i].vector, &rows[j].vector);
            if rows[i].class == rows[j].class {
                within.0 += sim;
                within.1 += 1;
            } else {
                between.0 += sim;
                between.1 += 1;
            }
        }
    }
    if within.1 == 0 || between.1 == 0 {
        return Err(Error::InvalidInput(
            "need both within-class and between-class pairs".into(),
        ));
    }
    Ok(SeparationStats {
        within: within.0 / within.1 as f64,
        between: between.0 / between.1 as f64,
    })
}
