//! Built-in verification suites: the fast implementations checked against
//! the brute-force references in [`crate::oracle`], plus finite-difference
//! gradient checks. The `selftest` command runs all of them.

use crate::loss::{
    combined_loss, combined_loss_grads, downsample_mask_majority, partition_and_pool, supcon_loss,
    supcon_loss_from_raw, LossConfig,
};
use crate::oracle::{
    auc_pair_count, finite_difference_grad, grad_discrepancy, majority_labels_naive,
    pool_patches_naive, srm_correlate_naive, supcon_triple_loop,
};
use crate::srm::{apply_srm, srm_kernels, CLAMP_LIMIT};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Deliberate fault injection for verifying that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// Scales the temperature passed to the fast contrastive loss, leaving
    /// the oracle untouched.
    TauScale,
}

impl std::str::FromStr for Perturbation {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "tau" => Ok(Perturbation::TauScale),
            other => Err(crate::Error::Config(format!(
                "unknown perturbation '{other}' (expected 'tau')"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

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
    Tensor::from_vec(&[n, d], data).expect("unit rows")
}

/// Contrastive loss against the literal triple-loop reference on 200
/// random instances (n <= 64, d <= 16, three temperatures).
pub fn suite_supcon(perturb: Option<Perturbation>) -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(0x5c0);
    let tau_scale = match perturb {
        Some(Perturbation::TauScale) => 1.01,
        None => 1.0,
    };
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.gen_range(2..=64);
        let d = rng.gen_range(2..=16);
        let emb = unit_rows(&mut rng, n, d);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        let tau = [0.05, 0.1, 0.5][case % 3];
        let fast = match supcon_loss(&emb, &labels, tau * tau_scale) {
            Ok(v) => v,
            Err(e) => {
                return SuiteResult {
                    name: "supcon-oracle",
                    passed: false,
                    detail: format!("case {case}: {e}"),
                }
            }
        };
        let slow = supcon_triple_loop(&emb, &labels, tau);
        let rel = (fast - slow).abs() / slow.abs().max(1e-12);
        worst = worst.max(rel);
    }
    SuiteResult {
        name: "supcon-oracle",
        passed: worst <= 1e-6,
        detail: format!("200 instances, worst relative error {worst:.3e}"),
    }
}

/// Patch pooling and majority downsampling against nested-loop references
/// on 100 random instances.
pub fn suite_pooling() -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(0xb00);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let k = [1usize, 2, 4, 8][rng.gen_range(0..4)];
        let mult = rng.gen_range(1..=3);
        let (h, w) = (k * mult, k * mult);
        let c = rng.gen_range(1..=12);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = Tensor::from_vec(&[c, h, w], data).expect("feature map");
        let mask_data: Vec<f64> = (0..h * w).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let mask = Tensor::from_vec(&[h, w], mask_data).expect("mask");

        let fast = partition_and_pool(&f, k).expect("pool");
        let (naive, naive_valid) = pool_patches_naive(&f, k).expect("naive pool");
        if fast.valid != naive_valid {
            return SuiteResult {
                name: "pooling-majority-oracle",
                passed: false,
                detail: format!("case {case}: validity flags diverge"),
            };
        }
        for (a, b) in fast.embeddings.data().iter().zip(naive.data()) {
            worst = worst.max((a - b).abs());
        }
        let fast_labels = downsample_mask_majority(&mask, k).expect("majority");
        let naive_labels = majority_labels_naive(&mask, k).expect("naive majority");
        if fast_labels != naive_labels {
            return SuiteResult {
                name: "pooling-majority-oracle",
                passed: false,
                detail: format!("case {case}: labels diverge"),
            };
        }
    }
    SuiteResult {
        name: "pooling-majority-oracle",
        passed: worst <= 1e-7,
        detail: format!("100 instances, worst embedding deviation {worst:.3e}"),
    }
}

/// Rank-based AUC against exhaustive pair counting on 500 random
/// score/mask instances (ties included).
pub fn suite_auc() -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(0xa0c);
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for case in 0..500 {
        let n = rng.gen_range(2..=64);
        let quantize = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if quantize {
                    (rng.gen_range(0..10) as f64) / 9.0
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        match (crate::eval::pixel_auc(&scores, &labels), auc_pair_count(&scores, &labels)) {
            (Ok(fast), Some(slow)) => {
                worst = worst.max((fast - slow).abs());
                compared += 1;
            }
            (Err(crate::Error::AucUndefined), None) => {}
            (a, b) => {
                return SuiteResult {
                    name: "auc-oracle",
                    passed: false,
                    detail: format!("case {case}: {a:?} vs {b:?}"),
                }
            }
        }
    }
    SuiteResult {
        name: "auc-oracle",
        passed: worst <= 1e-9,
        detail: format!("{compared} scored instances, worst deviation {worst:.3e}"),
    }
}

/// Residual filtering against the direct correlation reference on 50
/// random 16x16 images, plus the constant-image and clamp edge cases.
pub fn suite_srm() -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(0x5a1);
    let bank = srm_kernels();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let data: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..255.0)).collect();
        let image = Tensor::from_vec(&[3, 16, 16], data).expect("image");
        let fast = apply_srm(&image).expect("apply");
        let naive = srm_correlate_naive(&image, bank.kernels());
        for (a, b) in fast.data().data().iter().zip(naive.data()) {
            let clamped = b.clamp(-CLAMP_LIMIT, CLAMP_LIMIT);
            worst = worst.max((a - clamped).abs());
        }
    }

    let constant = Tensor::full(&[3, 8, 8], 77.0);
    let res = apply_srm(&constant).expect("constant");
    let constant_ok = res.data().data().iter().all(|&v| v == 0.0);

    let mut checker = Tensor::zeros(&[3, 8, 8]);
    for ch in 0..3 {
        for p in 0..64 {
            if (p / 8 + p % 8) % 2 == 0 {
                checker.data_mut()[ch * 64 + p] = 255.0;
            }
        }
    }
    let res = apply_srm(&checker).expect("checker");
    let clamp_ok = res.data().data().iter().all(|&v| v.abs() <= CLAMP_LIMIT);

    SuiteResult {
        name: "srm-oracle",
        passed: worst <= 1e-6 && constant_ok && clamp_ok,
        detail: format!(
            "50 instances, worst deviation {worst:.3e}, constant-zero {constant_ok}, clamp {clamp_ok}"
        ),
    }
}

/// Analytic gradients of the contrastive loss (through normalization and
/// pooling) and of the combined objective against central differences.
pub fn suite_gradients() -> SuiteResult {
    let mut rng = ChaCha12Rng::seed_from_u64(0x9add);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.gen_range(3..=8);
        let d = rng.gen_range(2..=6);
        let raw_data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw = Tensor::from_vec(&[n, d], raw_data.clone()).expect("raw");
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        let (_, grad) = supcon_loss_from_raw(&raw, &labels, 0.1).expect("grad");
        let labels2 = labels.clone();
        let numeric = finite_difference_grad(&raw_data, 1e-5, move |x| {
            let t = Tensor::from_vec(&[n, d], x.to_vec()).expect("probe");
            supcon_loss_from_raw(&t, &labels2, 0.1).expect("probe loss").0
        });
        worst = worst.max(grad_discrepancy(grad.data(), &numeric));
    }

    for _ in 0..10 {
        let c = rng.gen_range(2..=4);
        let (h, w) = (4usize, 4usize);
        let cfg = LossConfig {
            k: 2,
            tau: 0.1,
            ce_weights: (1.0, 10.0),
        };
        let f_data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits_data: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut mask_data: Vec<f64> = (0..h * w).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        mask_data[0] = 0.0;
        mask_data[1] = 1.0;
        let f = Tensor::from_vec(&[c, h, w], f_data.clone()).expect("f");
        let logits = Tensor::from_vec(&[2, h, w], logits_data).expect("logits");
        let mask = Tensor::from_vec(&[h, w], mask_data).expect("mask");
        let (_, _, grad_f) =
            combined_loss_grads(&logits, Some(&f), &mask, &cfg).expect("combined grads");
        let (logits2, mask2, cfg2) = (logits.clone(), mask.clone(), cfg.clone());
        let numeric = finite_difference_grad(&f_data, 1e-5, move |x| {
            let t = Tensor::from_vec(&[c, h, w], x.to_vec()).expect("probe f");
            combined_loss(&logits2, Some(&t), &mask2, &cfg2).expect("probe loss").total
        });
        worst = worst.max(grad_discrepancy(grad_f.data(), &numeric));
    }

    SuiteResult {
        name: "gradient-check",
        passed: worst < 1e-4,
        detail: format!("20 instances, worst relative discrepancy {worst:.3e}"),
    }
}

/// Runs every suite. `perturb` injects a deliberate fault (test hook used
/// to prove the suites can fail).
pub fn run_all(perturb: Option<Perturbation>) -> Vec<SuiteResult> {
    vec![
        suite_supcon(perturb),
        suite_pooling(),
        suite_auc(),
        suite_srm(),
        suite_gradients(),
    ]
}
