//! Brute-force reference implementations used to validate the fast paths.
//!
//! Everything in this module is written as literal nested loops with no
//! shared code with the production implementations in [`crate::loss`],
//! [`crate::srm`], or [`crate::eval`]. The `selftest` command and the test
//! suites compare the two routes against each other.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Literal evaluation of the per-anchor contrastive loss over a set of
/// unit-norm embeddings, averaged over all anchors.
///
/// For anchor `i` with positive set `A_i` (same label, other index) and
/// negatives (different label), each positive `p` contributes
/// `-ln(exp(s_ip) / (exp(s_ip) + sum_neg exp(s_iq)))` with `s = dot / tau`,
/// and the anchor contributes the mean over its positives. Anchors with no
/// positives contribute zero but still count in the average.
pub fn supcon_triple_loop(embeddings: &Tensor, labels: &[u8], tau: f64) -> f64 {
    let (n, d) = embeddings.dims2();
    assert_eq!(labels.len(), n);
    let e = embeddings.data();
    let dot = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..d {
            s += e[i * d + t] * e[j * d + t];
        }
        s
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut neg_sum = 0.0;
        for q in 0..n {
            if labels[q] != labels[i] {
                neg_sum += (dot(i, q) / tau).exp();
            }
        }
        let mut pos_terms = 0.0;
        let mut pos_count = 0usize;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                let ep = (dot(i, p) / tau).exp();
                pos_terms += -(ep / (ep + neg_sum)).ln();
                pos_count += 1;
            }
        }
        if pos_count > 0 {
            total += pos_terms / pos_count as f64;
        }
    }
    total / n as f64
}

/// Per-pixel contrastive loss evaluated literally over every pixel embedding
/// of a (small) feature map. Each pixel vector is L2-normalized, labelled by
/// the mask, and scored exactly like [`supcon_triple_loop`] with one anchor
/// per pixel. Zero pixel vectors are excluded both as anchors and as keys
/// but still count in the final average.
///
/// The map is refused above 256 pixels: the routine stores an implicit
/// HW x HW similarity structure and exists only as a test-scale reference.
pub fn pixel_supcon_oracle(f: &Tensor, mask: &Tensor, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (c, h, w) = f.dims3();
    if mask.shape() != [h, w] {
        return Err(Error::InvalidInput(format!(
            "mask shape {:?} does not match feature map {}x{}",
            mask.shape(),
            h,
            w
        )));
    }
    let pixels = h * w;
    if pixels > 256 {
        return Err(Error::InvalidInput(format!(
            "pixel-level loss refused for {pixels} pixels (limit 256); use the patched path"
        )));
    }
    let mut labels = Vec::with_capacity(pixels);
    for &m in mask.data() {
        if m != 0.0 && m != 1.0 {
            return Err(Error::InvalidInput(format!("mask value {m} is not binary")));
        }
        labels.push(m as u8);
    }

    // Normalized pixel embeddings, one per pixel, row-major.
    let mut emb = vec![0.0; pixels * c];
    let mut valid = vec![true; pixels];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut norm = 0.0;
            for ch in 0..c {
                let v = f.data()[(ch * h + y) * w + x];
                emb[p * c + ch] = v;
                norm += v * v;
            }
            let norm = norm.sqrt();
            if norm == 0.0 {
                valid[p] = false;
            } else {
                for ch in 0..c {
                    emb[p * c + ch] /= norm;
                }
            }
        }
    }

    let dot = |i: usize, j: usize| -> f64 {
        let mut s = 0.0;
        for t in 0..c {
            s += emb[i * c + t] * emb[j * c + t];
        }
        s
    };
    let mut total = 0.0;
    for i in 0..pixels {
        if !valid[i] {
            continue;
        }
        let mut neg_sum = 0.0;
        for q in 0..pixels {
            if valid[q] && labels[q] != labels[i] {
                neg_sum += (dot(i, q) / tau).exp();
            }
        }
        let mut pos_terms = 0.0;
        let mut pos_count = 0usize;
        for p in 0..pixels {
            if p != i && valid[p] && labels[p] == labels[i] {
                let ep = (dot(i, p) / tau).exp();
                pos_terms += -(ep / (ep + neg_sum)).ln();
                pos_count += 1;
            }
        }
        if pos_count > 0 {
            total += pos_terms / pos_count as f64;
        }
    }
    Ok(total / pixels as f64)
}

/// Nested-loop patch pooling reference: mean of the pixel vectors in each
/// `(H/k) x (W/k)` patch, then L2 normalization. Returns the `k^2 x C`
/// embedding matrix and the per-patch validity flags (false for all-zero
/// patches, which stay zero vectors).
pub fn pool_patches_naive(f: &Tensor, k: usize) -> Result<(Tensor, Vec<bool>)> {
    let (c, h, w) = f.dims3();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidInput(format!(
            "grid {k} does not divide feature map {h}x{w}"
        )));
    }
    let (ph, pw) = (h / k, w / k);
    let mut out = vec![0.0; k * k * c];
    let mut valid = vec![true; k * k];
    for pi in 0..k {
        for pj in 0..k {
            let idx = pi * k + pj;
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..ph {
                    for dx in 0..pw {
                        let y = pi * ph + dy;
                        let x = pj * pw + dx;
                        acc += f.data()[(ch * h + y) * w + x];
                    }
                }
                out[idx * c + ch] = acc / (ph * pw) as f64;
            }
            let mut norm = 0.0;
            for ch in 0..c {
                norm += out[idx * c + ch] * out[idx * c + ch];
            }
            let norm = norm.sqrt();
            if norm == 0.0 {
                valid[idx] = false;
            } else {
                for ch in 0..c {
                    out[idx * c + ch] /= norm;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[k * k, c], out)?, valid))
}

/// Nested-loop majority-vote mask downsampling reference. Ties go to 1.
pub fn majority_labels_naive(mask: &Tensor, k: usize) -> Result<Vec<u8>> {
    let (h, w) = mask.dims2();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::InvalidInput(format!(
            "grid {k} does not divide mask {h}x{w}"
        )));
    }
    let (ph, pw) = (h / k, w / k);
    let mut labels = Vec::with_capacity(k * k);
    for pi in 0..k {
        for pj in 0..k {
            let mut ones = 0usize;
            let mut zeros = 0usize;
            for dy in 0..ph {
                for dx in 0..pw {
                    let v = mask.data()[(pi * ph + dy) * w + (pj * pw + dx)];
                    if v == 1.0 {
                        ones += 1;
                    } else if v == 0.0 {
                        zeros += 1;
                    } else {
                        return Err(Error::InvalidInput(format!(
                            "mask value {v} is not binary"
                        )));
                    }
                }
            }
            labels.push(if ones >= zeros { 1 } else { 0 });
        }
    }
    Ok(labels)
}

/// Direct 2-D correlation of a 3-channel image with a bank of 5x5 kernels,
/// mirror padding (edge not repeated), output channel `c` = mean over input
/// channels of the correlation with kernel `c`. No clamping: this is the
/// pre-clamp reference.
pub fn srm_correlate_naive(image: &Tensor, kernels: &[[[f64; 5]; 5]; 3]) -> Tensor {
    let (c_in, h, w) = image.dims3();
    assert_eq!(c_in, 3);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let i = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
        i as usize
    };
    let mut out = Tensor::zeros(&[3, h, w]);
    for (kc, kernel) in kernels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ch in 0..3 {
                    for (i, row) in kernel.iter().enumerate() {
                        for (j, &kv) in row.iter().enumerate() {
                            let sy = reflect(y as isize + i as isize - 2, h);
                            let sx = reflect(x as isize + j as isize - 2, w);
                            acc += kv * image.data()[(ch * h + sy) * w + sx];
                        }
                    }
                }
                out.data_mut()[(kc * h + y) * w + x] = acc / 3.0;
            }
        }
    }
    out
}

/// Exhaustive concordant-pair AUC: every (positive, negative) pair scores
/// 1 if the positive ranks higher, 0.5 on a tie. Returns `None` when the
/// labels contain a single class.
pub fn auc_pair_count(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut credit = 0.0;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                credit += 1.0;
            } else if scores[i] == scores[j] {
                credit += 0.5;
            }
        }
    }
    if pairs == 0 {
        None
    } else {
        Some(credit / pairs as f64)
    }
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn finite_difference_grad(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Gradient discrepancy: infinity norm of the difference, normalized by the
/// largest gradient magnitude on either side (with a tiny floor so that two
/// all-zero gradients compare equal).
pub fn grad_discrepancy(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_diff = 0.0f64;
    let mut max_mag = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        max_diff = max_diff.max((a - n).abs());
        max_mag = max_mag.max(a.abs()).max(n.abs());
    }
    max_diff / max_mag.max(1e-12)
}
