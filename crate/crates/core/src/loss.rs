//! Training objective: weighted cross-entropy plus a per-image supervised
//! contrastive term over pooled patch embeddings.
//!
//! The projection feature map is partitioned into a k x k grid; the pixel
//! vectors of each patch are averaged and L2-normalized, the ground-truth
//! mask is downsampled to one label per patch by majority vote (ties go to
//! the tampered class), and the contrastive loss contrasts tampered against
//! untampered patch embeddings within the image. The final objective is the
//! plain sum `total = l_ce + l_con`.
//!
//! Every loss here comes with an analytic gradient; the test suites check
//! all of them against central finite differences.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cross-entropy class weights (untampered, tampered). The tampered class
/// gets ten times the weight.
pub const DEFAULT_CE_WEIGHTS: (f64, f64) = (1.0, 10.0);

/// Default temperature of the contrastive softmax.
pub const DEFAULT_TAU: f64 = 0.1;

/// Default patch grid: the feature map is split into 64 x 64 patches.
pub const DEFAULT_GRID: usize = 64;

/// Parameters of the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Patches per side of the contrastive grid.
    pub k: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Cross-entropy class weights (untampered, tampered).
    pub ce_weights: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            k: DEFAULT_GRID,
            tau: DEFAULT_TAU,
            ce_weights: DEFAULT_CE_WEIGHTS,
        }
    }
}

/// Per-image loss components. `total` is always the exact sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_con: f64,
    pub total: f64,
    /// Patches that acted as anchors (nonempty positive set).
    pub anchors_used: usize,
}

/// Pooled, unit-normalized patch embeddings of one feature map.
///
/// All-zero patches cannot be normalized; they stay zero vectors, are
/// marked invalid, and take part in the loss neither as anchors nor as
/// keys (they still count in the per-image average).
#[derive(Debug, Clone)]
pub struct PooledPatches {
    /// k^2 x d matrix, unit rows except for invalid (zero) rows.
    pub embeddings: Tensor,
    pub valid: Vec<bool>,
    /// Patches per side.
    pub grid: usize,
    /// Spatial size (h, w) of one patch.
    pub patch_size: (usize, usize),
    /// Norms of the pooled vectors before normalization; 0 for invalid rows.
    raw_norms: Vec<f64>,
}

/// Patch embeddings together with their majority-vote labels.
#[derive(Debug, Clone)]
pub struct PatchEmbeddingSet {
    pub patches: PooledPatches,
    pub labels: Vec<u8>,
}

/// Splits a CxHxW feature map into a k x k grid, averages the pixel vectors
/// of each patch (row-major patch order) and L2-normalizes the result.
pub fn partition_and_pool(f: &Tensor, k: usize) -> Result<PooledPatches> {
    let (c, h, w) = f.dims3();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidInput(format!(
            "grid {k} does not divide feature map {h}x{w}"
        )));
    }
    let (ph, pw) = (h / k, w / k);
    let inv_area = 1.0 / (ph * pw) as f64;
    let n = k * k;
    let mut emb = vec![0.0; n * c];
    // Accumulate channel by channel so the inner loops stay contiguous.
    for ch in 0..c {
        let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
        for pi in 0..k {
            for dy in 0..ph {
                let row = &plane[(pi * ph + dy) * w..(pi * ph + dy + 1) * w];
                for pj in 0..k {
                    let mut acc = 0.0;
                    for &v in &row[pj * pw..(pj + 1) * pw] {
                        acc += v;
                    }
                    emb[(pi * k + pj) * c + ch] += acc;
                }
            }
        }
    }
    let mut valid = vec![true; n];
    let mut raw_norms = vec![0.0; n];
    for i in 0..n {
        let row = &mut emb[i * c..(i + 1) * c];
        let mut norm = 0.0;
        for v in row.iter_mut() {
            *v *= inv_area;
            norm += *v * *v;
        }
        let norm = norm.sqrt();
        raw_norms[i] = norm;
        if norm == 0.0 {
            valid[i] = false;
        } else {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(PooledPatches {
        embeddings: Tensor::from_vec(&[n, c], emb)?,
        valid,
        grid: k,
        patch_size: (ph, pw),
        raw_norms,
    })
}

/// Majority-vote downsampling of a binary HxW mask to k^2 patch labels.
/// A patch that is exactly half tampered gets label 1.
pub fn downsample_mask_majority(mask: &Tensor, k: usize) -> Result<Vec<u8>> {
    let (h, w) = mask.dims2();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidInput(format!(
            "grid {k} does not divide mask {h}x{w}"
        )));
    }
    let (ph, pw) = (h / k, w / k);
    let patch_area = ph * pw; // 2 * ones >= area  <=>  ones >= zeros
    let mut labels = Vec::with_capacity(k * k);
    for pi in 0..k {
        for pj in 0..k {
            let mut ones = 0usize;
            for dy in 0..ph {
                let row = &mask.data()[(pi * ph + dy) * w + pj * pw..(pi * ph + dy) * w + (pj + 1) * pw];
                for &v in row {
                    if v == 1.0 {
                        ones += 1;
                    } else if v != 0.0 {
                        return Err(Error::InvalidInput(format!(
                            "mask value {v} is not binary"
                        )));
                    }
                }
            }
            labels.push(u8::from(2 * ones >= patch_area));
        }
    }
    Ok(labels)
}

/// Pools a feature map and labels the patches from the image mask. The mask
/// may live at a different resolution than the feature map as long as the
/// grid divides both.
pub fn patch_embedding_set(f: &Tensor, mask: &Tensor, k: usize) -> Result<PatchEmbeddingSet> {
    let patches = partition_and_pool(f, k)?;
    let labels = downsample_mask_majority(mask, k)?;
    Ok(PatchEmbeddingSet { patches, labels })
}

/// Supervised contrastive loss over unit-norm embeddings.
///
/// For each anchor, every same-label embedding is a positive and every
/// different-label embedding a negative; each positive contributes a
/// softmax term whose denominator holds that one positive plus all
/// negatives. Anchors without positives contribute zero. The result is the
/// mean over all embeddings.
pub fn supcon_loss(embeddings: &Tensor, labels: &[u8], tau: f64) -> Result<f64> {
    validate_supcon_inputs(embeddings, labels, tau)?;
    let (n, d) = embeddings.dims2();
    let valid = vec![true; n];
    let (loss, _, _) = supcon_core(
        embeddings.data(),
        n,
        d,
        labels,
        &valid,
        tau,
        n as f64,
        false,
    );
    Ok(loss)
}

/// [`supcon_loss`] plus its gradient with respect to the embeddings.
pub fn supcon_loss_grad(embeddings: &Tensor, labels: &[u8], tau: f64) -> Result<(f64, Tensor)> {
    validate_supcon_inputs(embeddings, labels, tau)?;
    let (n, d) = embeddings.dims2();
    let valid = vec![true; n];
    let (loss, _, grad) = supcon_core(
        embeddings.data(),
        n,
        d,
        labels,
        &valid,
        tau,
        n as f64,
        true,
    );
    Ok((loss, Tensor::from_vec(&[n, d], grad.unwrap())?))
}

/// Contrastive loss of raw (not yet normalized) embeddings: rows are L2
/// normalized first and the returned gradient is taken with respect to the
/// raw rows, i.e. it includes the normalization Jacobian. All-zero rows are
/// excluded as anchors and keys.
pub fn supcon_loss_from_raw(raw: &Tensor, labels: &[u8], tau: f64) -> Result<(f64, Tensor)> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (n, d) = raw.dims2();
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} embeddings but {} labels",
            labels.len()
        )));
    }
    let mut unit = raw.data().to_vec();
    let mut norms = vec![0.0; n];
    let mut valid = vec![true; n];
    for i in 0..n {
        let row = &mut unit[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[i] = norm;
        if norm == 0.0 {
            valid[i] = false;
        } else {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    let (loss, _, grad_unit) = supcon_core(&unit, n, d, labels, &valid, tau, n as f64, true);
    let grad_unit = grad_unit.unwrap();
    let mut grad_raw = vec![0.0; n * d];
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let f = &unit[i * d..(i + 1) * d];
        let g = &grad_unit[i * d..(i + 1) * d];
        let gdotf: f64 = g.iter().zip(f).map(|(a, b)| a * b).sum();
        let out = &mut grad_raw[i * d..(i + 1) * d];
        for t in 0..d {
            out[t] = (g[t] - gdotf * f[t]) / norms[i];
        }
    }
    Ok((loss, Tensor::from_vec(&[n, d], grad_raw)?))
}

fn validate_supcon_inputs(embeddings: &Tensor, labels: &[u8], tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (n, d) = embeddings.dims2();
    if n == 0 {
        return Err(Error::InvalidInput("no embeddings".into()));
    }
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} embeddings but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {bad} is not binary")));
    }
    for i in 0..n {
        let row = &embeddings.data()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidInput(format!(
                "embedding {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Shared contrastive-loss kernel.
///
/// The per-anchor logits are shifted by their maximum before
/// exponentiation (an identity on the loss value and gradient). Returns
/// `(loss, anchors_with_positives, gradient)` where the loss is divided by
/// `divisor` (the number of embeddings for the standalone loss, the full
/// patch count k^2 for the patched objective).
#[allow(clippy::too_many_arguments)]
fn supcon_core(
    emb: &[f64],
    n: usize,
    d: usize,
    labels: &[u8],
    valid: &[bool],
    tau: f64,
    divisor: f64,
    want_grad: bool,
) -> (f64, usize, Option<Vec<f64>>) {
    let mut total = 0.0;
    let mut anchors_used = 0usize;
    let mut grad = if want_grad { vec![0.0; n * d] } else { Vec::new() };
    let mut sims = vec![0.0; n];
    let inv_divisor = 1.0 / divisor;

    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let fi = &emb[i * d..(i + 1) * d];
        let mut max_logit = f64::NEG_INFINITY;
        let mut pos_count = 0usize;
        for j in 0..n {
            if j == i || !valid[j] {
                continue;
            }
            let fj = &emb[j * d..(j + 1) * d];
            let mut dot = 0.0;
            for t in 0..d {
                dot += fi[t] * fj[t];
            }
            let s = dot / tau;
            sims[j] = s;
            max_logit = max_logit.max(s);
            if labels[j] == labels[i] {
                pos_count += 1;
            }
        }
        if pos_count == 0 {
            continue;
        }
        anchors_used += 1;

        let mut neg_exp_sum = 0.0;
        for j in 0..n {
            if j != i && valid[j] && labels[j] != labels[i] {
                neg_exp_sum += (sims[j] - max_logit).exp();
            }
        }
        if neg_exp_sum == 0.0 {
            // No negatives: the denominator is the positive term alone, so
            // every per-positive term (and its gradient) is exactly zero.
            continue;
        }

        let inv_pos = 1.0 / pos_count as f64;
        let mut li = 0.0;
        let mut t_sum = 0.0; // sum over positives of 1 / (e_p + neg_exp_sum)
        for p in 0..n {
            if p == i || !valid[p] || labels[p] != labels[i] {
                continue;
            }
            let ep = (sims[p] - max_logit).exp();
            let denom = ep + neg_exp_sum;
            li += denom.ln() - (sims[p] - max_logit);
            if want_grad {
                t_sum += 1.0 / denom;
                // dL/ds_ip = inv_pos * (e_p / denom - 1)
                let coeff = inv_pos * (ep / denom - 1.0) * inv_divisor / tau;
                axpy(&mut grad, i, p, fi, &emb[p * d..(p + 1) * d], coeff, d);
            }
        }
        total += li * inv_pos;

        if want_grad && neg_exp_sum > 0.0 {
            for q in 0..n {
                if q == i || !valid[q] || labels[q] == labels[i] {
                    continue;
                }
                let eq = (sims[q] - max_logit).exp();
                // dL/ds_iq = inv_pos * e_q * sum_p 1/(e_p + neg_sum)
                let coeff = inv_pos * eq * t_sum * inv_divisor / tau;
                axpy(&mut grad, i, q, fi, &emb[q * d..(q + 1) * d], coeff, d);
            }
        }
    }
    (
        total * inv_divisor,
        anchors_used,
        if want_grad { Some(grad) } else { None },
    )
}

/// grad_i += coeff * f_j and grad_j += coeff * f_i.
fn axpy(grad: &mut [f64], i: usize, j: usize, fi: &[f64], fj: &[f64], coeff: f64, d: usize) {
    for t in 0..d {
        grad[i * d + t] += coeff * fj[t];
    }
    for t in 0..d {
        grad[j * d + t] += coeff * fi[t];
    }
}

/// Routes a gradient on the unit patch embeddings back to the feature map:
/// through the L2 normalization, then spread uniformly over the pixels of
/// each patch. Invalid (zero) patches receive no gradient.
pub fn pool_backward(patches: &PooledPatches, grad_embeddings: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let k = patches.grid;
    let (ph, pw) = patches.patch_size;
    assert_eq!(h, k * ph);
    assert_eq!(w, k * pw);
    let (n, dc) = grad_embeddings.dims2();
    assert_eq!(n, k * k);
    assert_eq!(dc, c);
    let inv_area = 1.0 / (ph * pw) as f64;
    let mut grad_f = Tensor::zeros(&[c, h, w]);
    for idx in 0..n {
        if !patches.valid[idx] {
            continue;
        }
        let f_row = &patches.embeddings.data()[idx * c..(idx + 1) * c];
        let g_row = &grad_embeddings.data()[idx * c..(idx + 1) * c];
        let gdotf: f64 = g_row.iter().zip(f_row).map(|(a, b)| a * b).sum();
        let norm = patches.raw_norms[idx];
        let (pi, pj) = (idx / k, idx % k);
        for ch in 0..c {
            let g_raw = (g_row[ch] - gdotf * f_row[ch]) / norm * inv_area;
            let plane = &mut grad_f.data_mut()[ch * h * w..(ch + 1) * h * w];
            for dy in 0..ph {
                let row = &mut plane[(pi * ph + dy) * w + pj * pw..(pi * ph + dy) * w + (pj + 1) * pw];
                for v in row.iter_mut() {
                    *v += g_raw;
                }
            }
        }
    }
    grad_f
}

/// Class-weighted pixel cross-entropy: the negative log softmax of the true
/// class per pixel, each pixel weighted by its class weight, normalized by
/// the total applied weight.
pub fn weighted_ce_loss(logits: &Tensor, mask: &Tensor, weights: (f64, f64)) -> Result<f64> {
    Ok(ce_core(logits, mask, weights, false)?.0)
}

/// [`weighted_ce_loss`] plus its gradient with respect to the logits.
pub fn weighted_ce_loss_grad(
    logits: &Tensor,
    mask: &Tensor,
    weights: (f64, f64),
) -> Result<(f64, Tensor)> {
    let (loss, grad) = ce_core(logits, mask, weights, true)?;
    Ok((loss, grad.unwrap()))
}

fn ce_core(
    logits: &Tensor,
    mask: &Tensor,
    weights: (f64, f64),
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let (classes, h, w) = logits.dims3();
    if classes != 2 {
        return Err(Error::InvalidInput(format!(
            "expected 2 logit channels, got {classes}"
        )));
    }
    if mask.shape() != [h, w] {
        return Err(Error::InvalidInput(format!(
            "mask shape {:?} does not match logits {}x{}",
            mask.shape(),
            h,
            w
        )));
    }
    let hw = h * w;
    let data = logits.data();
    let mut weight_sum = 0.0;
    let mut loss_sum = 0.0;
    // First pass: loss and total weight.
    let mut probs1 = vec![0.0; hw]; // softmax of the tampered channel
    for p in 0..hw {
        let m = mask.data()[p];
        if m != 0.0 && m != 1.0 {
            return Err(Error::InvalidInput(format!("mask value {m} is not binary")));
        }
        let z0 = data[p];
        let z1 = data[hw + p];
        let zmax = z0.max(z1);
        let e0 = (z0 - zmax).exp();
        let e1 = (z1 - zmax).exp();
        let denom = e0 + e1;
        let p1 = e1 / denom;
        probs1[p] = p1;
        let (wgt, log_true) = if m == 1.0 {
            (weights.1, (z1 - zmax) - denom.ln())
        } else {
            (weights.0, (z0 - zmax) - denom.ln())
        };
        weight_sum += wgt;
        loss_sum += -wgt * log_true;
    }
    let loss = loss_sum / weight_sum;
    let grad = if want_grad {
        let mut g = Tensor::zeros(&[2, h, w]);
        for p in 0..hw {
            let m = mask.data()[p];
            let wgt = if m == 1.0 { weights.1 } else { weights.0 };
            let scale = wgt / weight_sum;
            let p1 = probs1[p];
            let p0 = 1.0 - p1;
            // softmax minus one-hot of the true class
            g.data_mut()[p] = scale * (p0 - if m == 0.0 { 1.0 } else { 0.0 });
            g.data_mut()[hw + p] = scale * (p1 - if m == 1.0 { 1.0 } else { 0.0 });
        }
        Some(g)
    } else {
        None
    };
    Ok((loss, grad))
}

/// The combined per-image objective `total = l_ce + l_con`.
///
/// `projection` must be present (training mode); the mask labels the
/// contrastive patches by majority vote at grid `cfg.k`, which has to
/// divide both the mask and the projection map.
pub fn combined_loss(
    logits: &Tensor,
    projection: Option<&Tensor>,
    mask: &Tensor,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    combined_core(logits, projection, mask, cfg, false).map(|(b, _, _)| b)
}

/// [`combined_loss`] plus gradients with respect to the logits and the
/// projection feature map.
pub fn combined_loss_grads(
    logits: &Tensor,
    projection: Option<&Tensor>,
    mask: &Tensor,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor, Tensor)> {
    combined_core(logits, projection, mask, cfg, true)
        .map(|(b, gl, gp)| (b, gl.unwrap(), gp.unwrap()))
}

fn combined_core(
    logits: &Tensor,
    projection: Option<&Tensor>,
    mask: &Tensor,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Tensor>, Option<Tensor>)> {
    let projection = projection.ok_or_else(|| {
        Error::ContractViolation(
            "combined loss needs the projection feature map (training mode output)".into(),
        )
    })?;
    if cfg.tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {}",
            cfg.tau
        )));
    }
    let (l_ce, grad_logits) = if want_grad {
        let (l, g) = weighted_ce_loss_grad(logits, mask, cfg.ce_weights)?;
        (l, Some(g))
    } else {
        (weighted_ce_loss(logits, mask, cfg.ce_weights)?, None)
    };

    let set = patch_embedding_set(projection, mask, cfg.k)?;
    let (c, h, w) = projection.dims3();
    let n = cfg.k * cfg.k;
    let (l_con, anchors_used, grad_emb) = supcon_core(
        set.patches.embeddings.data(),
        n,
        c,
        &set.labels,
        &set.patches.valid,
        cfg.tau,
        n as f64,
        want_grad,
    );
    let grad_projection = if want_grad {
        let grad_emb = Tensor::from_vec(&[n, c], grad_emb.unwrap())?;
        Some(pool_backward(&set.patches, &grad_emb, c, h, w))
    } else {
        None
    };
    let breakdown = LossBreakdown {
        l_ce,
        l_con,
        total: l_ce + l_con,
        anchors_used,
    };
    Ok((breakdown, grad_logits, grad_projection))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{
        finite_difference_grad, grad_discrepancy, majority_labels_naive, pixel_supcon_oracle,
        pool_patches_naive, supcon_triple_loop,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn unit_rows(rng: &mut ChaCha12Rng, n: usize, d: usize) -> Tensor {
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let mut norm = 0.0;
            for t in 0..d {
                let v: f64 = rng.gen_range(-1.0..1.0);
                data[i * d + t] = v;
                norm += v * v;
            }
            let norm = norm.sqrt().max(1e-9);
            for t in 0..d {
                data[i * d + t] /= norm;
            }
        }
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    fn random_labels(rng: &mut ChaCha12Rng, n: usize) -> Vec<u8> {
        (0..n).map(|_| rng.gen_range(0..=1)).collect()
    }

    #[test]
    fn identical_embeddings_give_ln3() {
        let mut data = vec![0.0; 4 * 8];
        for row in 0..4 {
            data[row * 8] = 1.0;
        }
        let emb = Tensor::from_vec(&[4, 8], data).unwrap();
        let labels = [0, 0, 1, 1];
        for tau in [0.05, 0.1, 0.5] {
            let loss = supcon_loss(&emb, &labels, tau).unwrap();
            assert!(
                (loss - 3.0f64.ln()).abs() < 1e-9,
                "tau {tau}: loss {loss} vs ln 3"
            );
        }
    }

    #[test]
    fn no_positives_gives_zero() {
        let emb = unit_rows(&mut ChaCha12Rng::seed_from_u64(1), 2, 4);
        assert_eq!(supcon_loss(&emb, &[0, 1], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn antipodal_classes_reach_near_zero() {
        let mut data = vec![0.0; 4 * 4];
        data[0] = 1.0; // +e1
        data[4] = 1.0; // +e1
        data[8] = -1.0; // -e1
        data[12] = -1.0; // -e1
        let emb = Tensor::from_vec(&[4, 4], data).unwrap();
        let loss = supcon_loss(&emb, &[0, 0, 1, 1], 0.1).unwrap();
        let expected = (1.0 + 2.0 * (-20.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12, "loss {loss} vs {expected}");
        assert!(loss <= 1e-6);
    }

    #[test]
    fn single_label_input_is_exactly_zero() {
        let emb = unit_rows(&mut ChaCha12Rng::seed_from_u64(2), 6, 5);
        assert_eq!(supcon_loss(&emb, &[1; 6], 0.1).unwrap(), 0.0);
        assert_eq!(supcon_loss(&emb, &[0; 6], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..40 {
            let n = rng.gen_range(2..=24);
            let d = rng.gen_range(2..=16);
            let emb = unit_rows(&mut rng, n, d);
            let labels = random_labels(&mut rng, n);
            for tau in [0.05, 0.1, 0.5] {
                let fast = supcon_loss(&emb, &labels, tau).unwrap();
                let slow = supcon_triple_loop(&emb, &labels, tau);
                let denom = slow.abs().max(1e-12);
                assert!(
                    ((fast - slow) / denom).abs() < 1e-6,
                    "n={n} d={d} tau={tau}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn label_flip_symmetry() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..10 {
            let n = rng.gen_range(3..=12);
            let emb = unit_rows(&mut rng, n, 6);
            let labels = random_labels(&mut rng, n);
            let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
            let a = supcon_loss(&emb, &labels, 0.1).unwrap();
            let b = supcon_loss(&emb, &flipped, 0.1).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(2..=16);
            let emb = unit_rows(&mut rng, n, 8);
            let labels = random_labels(&mut rng, n);
            assert!(supcon_loss(&emb, &labels, 0.1).unwrap() >= 0.0);
        }
    }

    #[test]
    fn rotating_classes_apart_decreases_loss() {
        // Two class-0 embeddings fixed at e1; two class-1 embeddings rotated
        // away by angle theta in the (e1, e2) plane.
        let labels = [0u8, 0, 1, 1];
        let mut prev = f64::INFINITY;
        for step in 1..=8 {
            let theta = std::f64::consts::PI * step as f64 / 8.0;
            let (c, s) = (theta.cos(), theta.sin());
            let data = vec![
                1.0, 0.0, //
                1.0, 0.0, //
                c, s, //
                c, s,
            ];
            let emb = Tensor::from_vec(&[4, 2], data).unwrap();
            let loss = supcon_loss(&emb, &labels, 0.1).unwrap();
            assert!(
                loss < prev,
                "loss not strictly decreasing at theta={theta}: {loss} vs {prev}"
            );
            prev = loss;
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let emb = unit_rows(&mut ChaCha12Rng::seed_from_u64(6), 4, 4);
        assert!(matches!(
            supcon_loss(&emb, &[0, 1, 0, 1], 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            supcon_loss(&emb, &[0, 1, 0, 1], -1.0),
            Err(Error::InvalidParameter(_))
        ));
        let mut non_unit = emb.clone();
        non_unit.data_mut()[0] += 0.5;
        assert!(matches!(
            supcon_loss(&non_unit, &[0, 1, 0, 1], 0.1),
            Err(Error::InvalidInput(_))
        ));
        assert!(supcon_loss(&emb, &[0, 2, 0, 1], 0.1).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..5 {
            let n = rng.gen_range(3..=8);
            let d = rng.gen_range(2..=6);
            let raw_data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let raw = Tensor::from_vec(&[n, d], raw_data.clone()).unwrap();
            let labels = random_labels(&mut rng, n);
            let (_, grad) = supcon_loss_from_raw(&raw, &labels, 0.1).unwrap();
            let labels2 = labels.clone();
            let numeric = finite_difference_grad(&raw_data, 1e-5, move |x| {
                let t = Tensor::from_vec(&[n, d], x.to_vec()).unwrap();
                supcon_loss_from_raw(&t, &labels2, 0.1).unwrap().0
            });
            let rel = grad_discrepancy(grad.data(), &numeric);
            assert!(rel < 1e-4, "gradient mismatch {rel}");
        }
    }

    #[test]
    fn pooling_matches_naive_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..20 {
            let k = [1usize, 2, 4][rng.gen_range(0..3)];
            let mult = rng.gen_range(1..=3);
            let (h, w) = (k * mult, k * mult);
            let c = rng.gen_range(1..=8);
            let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = Tensor::from_vec(&[c, h, w], data).unwrap();
            let fast = partition_and_pool(&f, k).unwrap();
            let (naive, naive_valid) = pool_patches_naive(&f, k).unwrap();
            assert_eq!(fast.valid, naive_valid);
            for (a, b) in fast.embeddings.data().iter().zip(naive.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_fig3_shape() {
        // 8x8 map with a 4x4 grid: 16 embeddings, each averaging 4 vectors.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..16 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::from_vec(&[16, 8, 8], data).unwrap();
        let pooled = partition_and_pool(&f, 4).unwrap();
        assert_eq!(pooled.embeddings.shape(), &[16, 16]);
        assert_eq!(pooled.patch_size, (2, 2));
        for i in 0..16 {
            let row = &pooled.embeddings.data()[i * 16..(i + 1) * 16];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_pools_to_normalized_vector() {
        let c = 3;
        let mut f = Tensor::zeros(&[c, 4, 4]);
        for ch in 0..c {
            for p in 0..16 {
                f.data_mut()[ch * 16 + p] = (ch + 1) as f64;
            }
        }
        let pooled = partition_and_pool(&f, 2).unwrap();
        let norm = (1.0f64 + 4.0 + 9.0).sqrt();
        for i in 0..4 {
            for ch in 0..c {
                let got = pooled.embeddings.data()[i * c + ch];
                assert!((got - (ch + 1) as f64 / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_patch_is_excluded_but_counted() {
        // 2x2 grid on a 4x4 map; patch (0,0) all zero.
        let c = 2;
        let mut f = Tensor::zeros(&[c, 4, 4]);
        for ch in 0..c {
            for y in 0..4 {
                for x in 0..4 {
                    if y >= 2 || x >= 2 {
                        f.data_mut()[(ch * 4 + y) * 4 + x] = (ch + y + x) as f64 + 0.5;
                    }
                }
            }
        }
        let pooled = partition_and_pool(&f, 2).unwrap();
        assert_eq!(pooled.valid, vec![false, true, true, true]);
        let row0 = &pooled.embeddings.data()[0..c];
        assert!(row0.iter().all(|&v| v == 0.0));

        // The invalid patch is ignored as anchor/key: the loss equals a
        // 3-embedding loss scaled by 3/4 (divisor stays k^2 = 4).
        let mut mask = Tensor::zeros(&[4, 4]);
        for x in 2..4 {
            for y in 0..4 {
                mask.data_mut()[y * 4 + x] = 1.0;
            }
        }
        let logits = Tensor::zeros(&[2, 4, 4]);
        let cfg = LossConfig {
            k: 2,
            ..LossConfig::default()
        };
        let breakdown = combined_loss(&logits, Some(&f), &mask, &cfg).unwrap();
        let labels = downsample_mask_majority(&mask, 2).unwrap();
        let sub_labels = vec![labels[1], labels[2], labels[3]];
        let mut sub = Vec::new();
        for i in 1..4 {
            sub.extend_from_slice(&pooled.embeddings.data()[i * c..(i + 1) * c]);
        }
        let sub = Tensor::from_vec(&[3, c], sub).unwrap();
        let expected = supcon_loss(&sub, &sub_labels, cfg.tau).unwrap() * 3.0 / 4.0;
        assert!((breakdown.l_con - expected).abs() < 1e-12);
    }

    #[test]
    fn majority_matches_naive_and_tie_breaks_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for _ in 0..20 {
            let k = [1usize, 2, 4][rng.gen_range(0..3)];
            let mult = rng.gen_range(1..=4);
            let (h, w) = (k * mult, k * mult);
            let data: Vec<f64> = (0..h * w).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let mask = Tensor::from_vec(&[h, w], data).unwrap();
            assert_eq!(
                downsample_mask_majority(&mask, k).unwrap(),
                majority_labels_naive(&mask, k).unwrap()
            );
        }

        // Three 4x4 patches in a 12x12 mask (grid 3): unanimous zeros,
        // nine ones (strict majority), and an exact eight/eight tie.
        let mut mask = Tensor::zeros(&[12, 12]);
        for p in 0..9 {
            mask.data_mut()[(p / 3) * 12 + 4 + (p % 3)] = 1.0; // patch (0,1): 9 ones
        }
        for p in 0..8 {
            mask.data_mut()[(p / 2) * 12 + 8 + (p % 2)] = 1.0; // patch (0,2): 8 ones
        }
        let labels = downsample_mask_majority(&mask, 3).unwrap();
        assert_eq!(&labels[0..3], &[0, 1, 1]);
    }

    #[test]
    fn majority_rejects_non_binary_masks() {
        let mask = Tensor::full(&[4, 4], 0.5);
        assert!(downsample_mask_majority(&mask, 2).is_err());
    }

    #[test]
    fn ce_closed_forms() {
        let logits = Tensor::zeros(&[2, 4, 4]);
        let all_zero = Tensor::zeros(&[4, 4]);
        let all_one = Tensor::full(&[4, 4], 1.0);
        let ln2 = 2.0f64.ln();
        let a = weighted_ce_loss(&logits, &all_zero, DEFAULT_CE_WEIGHTS).unwrap();
        let b = weighted_ce_loss(&logits, &all_one, DEFAULT_CE_WEIGHTS).unwrap();
        assert!((a - ln2).abs() < 1e-12);
        assert!((b - ln2).abs() < 1e-12);

        // Perfect logits: huge margin toward the true class.
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.data_mut()[5] = 1.0;
        let mut perfect = Tensor::zeros(&[2, 4, 4]);
        for p in 0..16 {
            if mask.data()[p] == 1.0 {
                perfect.data_mut()[16 + p] = 50.0;
            } else {
                perfect.data_mut()[p] = 50.0;
            }
        }
        let c = weighted_ce_loss(&perfect, &mask, DEFAULT_CE_WEIGHTS).unwrap();
        assert!(c < 1e-12, "perfect-logit loss {c}");
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Tensor::from_vec(&[2, 3, 3], data.clone()).unwrap();
        let mask_data: Vec<f64> = (0..9).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let mask = Tensor::from_vec(&[3, 3], mask_data).unwrap();
        let (_, grad) = weighted_ce_loss_grad(&logits, &mask, DEFAULT_CE_WEIGHTS).unwrap();
        let mask2 = mask.clone();
        let numeric = finite_difference_grad(&data, 1e-5, move |x| {
            let t = Tensor::from_vec(&[2, 3, 3], x.to_vec()).unwrap();
            weighted_ce_loss(&t, &mask2, DEFAULT_CE_WEIGHTS).unwrap()
        });
        assert!(grad_discrepancy(grad.data(), &numeric) < 1e-4);
    }

    #[test]
    fn ce_rejects_non_binary_mask() {
        let logits = Tensor::zeros(&[2, 2, 2]);
        let mask = Tensor::full(&[2, 2], 0.3);
        assert!(weighted_ce_loss(&logits, &mask, DEFAULT_CE_WEIGHTS).is_err());
    }

    #[test]
    fn combined_requires_projection() {
        let logits = Tensor::zeros(&[2, 4, 4]);
        let mask = Tensor::zeros(&[4, 4]);
        let cfg = LossConfig {
            k: 2,
            ..LossConfig::default()
        };
        assert!(matches!(
            combined_loss(&logits, None, &mask, &cfg),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn combined_authentic_image_reduces_to_ce() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let f_data: Vec<f64> = (0..4 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::from_vec(&[4, 8, 8], f_data).unwrap();
        let logits_data: Vec<f64> = (0..2 * 8 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = Tensor::from_vec(&[2, 8, 8], logits_data).unwrap();
        let mask = Tensor::zeros(&[8, 8]);
        let cfg = LossConfig {
            k: 4,
            ..LossConfig::default()
        };
        let b = combined_loss(&logits, Some(&f), &mask, &cfg).unwrap();
        assert_eq!(b.l_con, 0.0);
        assert_eq!(b.total, b.l_ce);
    }

    #[test]
    fn combined_perfect_case_is_near_zero() {
        // Perfect logits plus antipodal patch embeddings: left half class 0
        // at +e1, right half class 1 at -e1, with a 2x2 grid on a 4x4 map.
        let c = 4;
        let mut f = Tensor::zeros(&[c, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                f.data_mut()[y * 4 + x] = if x < 2 { 1.0 } else { -1.0 };
            }
        }
        let mut mask = Tensor::zeros(&[4, 4]);
        let mut logits = Tensor::zeros(&[2, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                let p = y * 4 + x;
                if x >= 2 {
                    mask.data_mut()[p] = 1.0;
                    logits.data_mut()[16 + p] = 50.0;
                } else {
                    logits.data_mut()[p] = 50.0;
                }
            }
        }
        let cfg = LossConfig {
            k: 2,
            tau: 0.1,
            ce_weights: DEFAULT_CE_WEIGHTS,
        };
        let b = combined_loss(&logits, Some(&f), &mask, &cfg).unwrap();
        let expected_con = (1.0 + 2.0 * (-20.0f64).exp()).ln();
        assert!(b.l_ce < 1e-12);
        assert!((b.l_con - expected_con).abs() < 1e-12);
        assert!(b.total < 1e-6);
        assert_eq!(b.anchors_used, 4);
    }

    #[test]
    fn combined_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let c = 3;
        let (h, w) = (4usize, 4usize);
        let cfg = LossConfig {
            k: 2,
            tau: 0.1,
            ce_weights: DEFAULT_CE_WEIGHTS,
        };
        let f_data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits_data: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask_data: Vec<f64> = (0..h * w).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let f = Tensor::from_vec(&[c, h, w], f_data.clone()).unwrap();
        let logits = Tensor::from_vec(&[2, h, w], logits_data.clone()).unwrap();
        let mask = Tensor::from_vec(&[h, w], mask_data).unwrap();

        let (_, grad_logits, grad_f) =
            combined_loss_grads(&logits, Some(&f), &mask, &cfg).unwrap();

        let (mask2, cfg2, logits2) = (mask.clone(), cfg.clone(), logits.clone());
        let numeric_f = finite_difference_grad(&f_data, 1e-5, move |x| {
            let t = Tensor::from_vec(&[c, h, w], x.to_vec()).unwrap();
            combined_loss(&logits2, Some(&t), &mask2, &cfg2).unwrap().total
        });
        assert!(grad_discrepancy(grad_f.data(), &numeric_f) < 1e-4);

        let (mask3, cfg3, f3) = (mask.clone(), cfg.clone(), f.clone());
        let numeric_logits = finite_difference_grad(&logits_data, 1e-5, move |x| {
            let t = Tensor::from_vec(&[2, h, w], x.to_vec()).unwrap();
            combined_loss(&t, Some(&f3), &mask3, &cfg3).unwrap().total
        });
        assert!(grad_discrepancy(grad_logits.data(), &numeric_logits) < 1e-4);
    }

    #[test]
    fn patch_size_one_reduces_to_pixel_loss() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        for _ in 0..10 {
            let c = rng.gen_range(2..=6);
            let h = 8;
            let data: Vec<f64> = (0..c * h * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = Tensor::from_vec(&[c, h, h], data).unwrap();
            let mask_data: Vec<f64> = (0..h * h).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let mask = Tensor::from_vec(&[h, h], mask_data).unwrap();
            let pixel = pixel_supcon_oracle(&f, &mask, 0.1).unwrap();
            let set = patch_embedding_set(&f, &mask, h).unwrap();
            let n = h * h;
            let (patched, _, _) = super::supcon_core(
                set.patches.embeddings.data(),
                n,
                c,
                &set.labels,
                &set.patches.valid,
                0.1,
                n as f64,
                false,
            );
            assert!(
                (pixel - patched).abs() <= 1e-9,
                "pixel {pixel} vs patched {patched}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_invariance(seed in 0u64..1000, n in 3usize..12) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let d = 5;
            let emb = unit_rows(&mut rng, n, d);
            let labels = random_labels(&mut rng, n);
            let base = supcon_loss(&emb, &labels, 0.1).unwrap();

            // Deterministic permutation derived from the seed.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let mut pdata = vec![0.0; n * d];
            let mut plabels = vec![0u8; n];
            for (dst, &src) in perm.iter().enumerate() {
                pdata[dst * d..(dst + 1) * d]
                    .copy_from_slice(&emb.data()[src * d..(src + 1) * d]);
                plabels[dst] = labels[src];
            }
            let permuted = Tensor::from_vec(&[n, d], pdata).unwrap();
            let permuted_loss = supcon_loss(&permuted, &plabels, 0.1).unwrap();
            prop_assert!((base - permuted_loss).abs() <= 1e-9);
        }

        #[test]
        fn total_is_exact_sum(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let c = 3;
            let f_data: Vec<f64> = (0..c * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = Tensor::from_vec(&[c, 4, 4], f_data).unwrap();
            let logits_data: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let logits = Tensor::from_vec(&[2, 4, 4], logits_data).unwrap();
            let mask_data: Vec<f64> = (0..16).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let mask = Tensor::from_vec(&[4, 4], mask_data).unwrap();
            let cfg = LossConfig { k: 2, ..LossConfig::default() };
            let b = combined_loss(&logits, Some(&f), &mask, &cfg).unwrap();
            prop_assert_eq!(b.total, b.l_ce + b.l_con);
            prop_assert!(b.l_ce >= 0.0 && b.l_con >= 0.0);
        }
    }
}
