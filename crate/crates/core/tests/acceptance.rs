//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them; the per-test ok/fail
//! lines of the harness mirror them).

use forgeloc_core::data::{preprocess, TrainConfig};
use forgeloc_core::eval::{
    cosine_separation, evaluate_model, export_mean_features, pixel_auc,
};
use forgeloc_core::loss::{
    combined_loss, combined_loss_grads, downsample_mask_majority, partition_and_pool,
    supcon_loss, supcon_loss_from_raw, LossConfig,
};
use forgeloc_core::model::{EncoderKind, Model, ModelConfig};
use forgeloc_core::nn::ForwardCtx;
use forgeloc_core::oracle::{
    auc_pair_count, finite_difference_grad, grad_discrepancy, majority_labels_naive,
    pixel_supcon_oracle, pool_patches_naive, srm_correlate_naive, supcon_triple_loop,
};
use forgeloc_core::srm::{apply_srm, srm_kernels, CLAMP_LIMIT};
use forgeloc_core::synth::{generate_base_pool, synth_forge, write_synth_dataset, SynthOp};
use forgeloc_core::tensor::Tensor;
use forgeloc_core::train::train;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

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

fn report(number: usize, name: &str, passed: bool, detail: &str) {
    println!(
        "criterion {number:2} [{}] {name}: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {number} ({name}) failed: {detail}");
}

#[test]
fn criterion_01_paper_scale_reproduction_out_of_scope() {
    // Absolute benchmark AUC tables require the original datasets and
    // GPU-scale training; the property-based criteria below substitute.
    report(
        1,
        "paper-scale reproduction",
        true,
        "out of scope by design; property-based criteria substitute",
    );
}

#[test]
fn criterion_02_supcon_matches_triple_loop_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(2001);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = rng.gen_range(2..=64);
        let d = rng.gen_range(2..=16);
        let emb = unit_rows(&mut rng, n, d);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        let tau = [0.05, 0.1, 0.5][case % 3];
        let fast = supcon_loss(&emb, &labels, tau).unwrap();
        let slow = supcon_triple_loop(&emb, &labels, tau);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1e-12));
    }
    let elapsed = start.elapsed();
    report(
        2,
        "contrastive-loss oracle equivalence",
        worst <= 1e-6 && elapsed.as_secs_f64() < 10.0,
        &format!(
            "200 instances, worst relative error {worst:.3e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_closed_form_loss_cases() {
    // Four identical unit embeddings, labels [0,0,1,1]: ln 3 for any tau.
    let mut data = vec![0.0; 4 * 8];
    for row in 0..4 {
        data[row * 8] = 1.0;
    }
    let identical = Tensor::from_vec(&[4, 8], data).unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for tau in [0.05, 0.1, 0.5] {
        let loss = supcon_loss(&identical, &[0, 0, 1, 1], tau).unwrap();
        let err = (loss - 3.0f64.ln()).abs();
        ok &= err <= 1e-9;
        detail.push_str(&format!("ln3 err(tau={tau}) {err:.2e}; "));
    }

    // Antipodal classes at tau 0.1: essentially zero.
    let mut data = vec![0.0; 4 * 4];
    data[0] = 1.0;
    data[4] = 1.0;
    data[8] = -1.0;
    data[12] = -1.0;
    let antipodal = Tensor::from_vec(&[4, 4], data).unwrap();
    let sep = supcon_loss(&antipodal, &[0, 0, 1, 1], 0.1).unwrap();
    ok &= sep <= 1e-6;
    detail.push_str(&format!("antipodal {sep:.2e}; "));

    // Single-label inputs: exactly zero.
    let mut rng = ChaCha12Rng::seed_from_u64(3001);
    let single = unit_rows(&mut rng, 6, 5);
    let z0 = supcon_loss(&single, &[0; 6], 0.1).unwrap();
    let z1 = supcon_loss(&single, &[1; 6], 0.1).unwrap();
    ok &= z0 == 0.0 && z1 == 0.0;
    detail.push_str(&format!("single-label {z0} / {z1}"));
    report(3, "closed-form loss cases", ok, &detail);
}

#[test]
fn criterion_04_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(4001);
    let mut worst_raw = 0.0f64;
    let mut worst_f = 0.0f64;

    // d L_con / d raw embeddings (through the L2 normalization).
    for _ in 0..10 {
        let n = rng.gen_range(3..=8);
        let d = rng.gen_range(2..=6);
        let raw_data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw = Tensor::from_vec(&[n, d], raw_data.clone()).unwrap();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        let (_, grad) = supcon_loss_from_raw(&raw, &labels, 0.1).unwrap();
        let labels2 = labels.clone();
        let numeric = finite_difference_grad(&raw_data, 1e-5, move |x| {
            let t = Tensor::from_vec(&[n, d], x.to_vec()).unwrap();
            supcon_loss_from_raw(&t, &labels2, 0.1).unwrap().0
        });
        worst_raw = worst_raw.max(grad_discrepancy(grad.data(), &numeric));
    }

    // d (L_ce + L_con) / d F (through pooling and normalization).
    for _ in 0..10 {
        let c = rng.gen_range(2..=5);
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
        mask_data[5] = 1.0;
        let f = Tensor::from_vec(&[c, h, w], f_data.clone()).unwrap();
        let logits = Tensor::from_vec(&[2, h, w], logits_data).unwrap();
        let mask = Tensor::from_vec(&[h, w], mask_data).unwrap();
        let (_, _, grad_f) = combined_loss_grads(&logits, Some(&f), &mask, &cfg).unwrap();
        let (logits2, mask2, cfg2) = (logits.clone(), mask.clone(), cfg.clone());
        let numeric = finite_difference_grad(&f_data, 1e-5, move |x| {
            let t = Tensor::from_vec(&[c, h, w], x.to_vec()).unwrap();
            combined_loss(&logits2, Some(&t), &mask2, &cfg2).unwrap().total
        });
        worst_f = worst_f.max(grad_discrepancy(grad_f.data(), &numeric));
    }

    let elapsed = start.elapsed();
    report(
        4,
        "gradient checks",
        worst_raw < 1e-4 && worst_f < 1e-4 && elapsed.as_secs_f64() < 60.0,
        &format!(
            "20 instances, worst rel. discrepancy raw {worst_raw:.3e} / F {worst_f:.3e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_05_pixel_loss_reduction_at_patch_size_one() {
    let mut rng = ChaCha12Rng::seed_from_u64(5001);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = rng.gen_range(2..=6);
        let h = 8usize;
        let data: Vec<f64> = (0..c * h * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::from_vec(&[c, h, h], data).unwrap();
        let mask_data: Vec<f64> = (0..h * h).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let mask = Tensor::from_vec(&[h, h], mask_data).unwrap();
        let pixel = pixel_supcon_oracle(&f, &mask, 0.1).unwrap();
        // The patched path with 1x1 patches: pooled embeddings are the
        // normalized pixel vectors and the per-patch labels are the pixels.
        let logits = Tensor::zeros(&[2, h, h]);
        let cfg = LossConfig {
            k: h,
            tau: 0.1,
            ce_weights: (1.0, 10.0),
        };
        let breakdown = combined_loss(&logits, Some(&f), &mask, &cfg).unwrap();
        worst = worst.max((pixel - breakdown.l_con).abs());
    }
    report(
        5,
        "pixel-loss reduction at patch size one",
        worst <= 1e-9,
        &format!("50 instances, worst deviation {worst:.3e}"),
    );
}

#[test]
fn criterion_06_pooling_and_majority_oracles() {
    let mut rng = ChaCha12Rng::seed_from_u64(6001);
    let mut worst = 0.0f64;
    let mut labels_exact = true;
    for case in 0..100 {
        // Include the 8x8, k=4 configuration (4 pixel vectors per patch).
        let (k, h, w, c) = if case < 10 {
            (4usize, 8usize, 8usize, 16usize)
        } else {
            let k = [1usize, 2, 4, 8][rng.gen_range(0..4)];
            let mult = rng.gen_range(1..=3);
            (k, k * mult, k * mult, rng.gen_range(1..=12))
        };
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = Tensor::from_vec(&[c, h, w], data).unwrap();
        let mask_data: Vec<f64> = (0..h * w).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let mask = Tensor::from_vec(&[h, w], mask_data).unwrap();

        let fast = partition_and_pool(&f, k).unwrap();
        let (naive, naive_valid) = pool_patches_naive(&f, k).unwrap();
        assert_eq!(fast.valid, naive_valid);
        for (a, b) in fast.embeddings.data().iter().zip(naive.data()) {
            worst = worst.max((a - b).abs());
        }
        labels_exact &= downsample_mask_majority(&mask, k).unwrap()
            == majority_labels_naive(&mask, k).unwrap();
    }
    report(
        6,
        "pooling and majority oracles",
        worst <= 1e-7 && labels_exact,
        &format!("100 instances, worst embedding deviation {worst:.3e}, labels bit-exact {labels_exact}"),
    );
}

#[test]
fn criterion_07_srm_correctness() {
    let mut rng = ChaCha12Rng::seed_from_u64(7001);
    let bank = srm_kernels();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let data: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..255.0)).collect();
        let image = Tensor::from_vec(&[3, 16, 16], data).unwrap();
        let fast = apply_srm(&image).unwrap();
        let naive = srm_correlate_naive(&image, bank.kernels());
        for (a, b) in fast.data().data().iter().zip(naive.data()) {
            worst = worst.max((a - b.clamp(-CLAMP_LIMIT, CLAMP_LIMIT)).abs());
        }
    }

    let constant = Tensor::full(&[3, 16, 16], 128.0);
    let res = apply_srm(&constant).unwrap();
    let constant_exact = res.data().data().iter().all(|&v| v == 0.0);

    let mut checker = Tensor::zeros(&[3, 16, 16]);
    for ch in 0..3 {
        for p in 0..256 {
            if (p / 16 + p % 16) % 2 == 0 {
                checker.data_mut()[ch * 256 + p] = 255.0;
            }
        }
    }
    let res = apply_srm(&checker).unwrap();
    let clamp_ok = res.data().data().iter().all(|&v| v.abs() <= CLAMP_LIMIT);
    let clamp_hit = res
        .data()
        .data()
        .iter()
        .any(|&v| v.abs() == CLAMP_LIMIT);

    report(
        7,
        "noise-residual correctness",
        worst <= 1e-6 && constant_exact && clamp_ok && clamp_hit,
        &format!(
            "50 instances worst {worst:.3e}, constant exact {constant_exact}, clamp bound {clamp_ok} (saturated {clamp_hit})"
        ),
    );
}

#[test]
fn criterion_08_full_model_shape_contract() {
    let start = Instant::now();
    let mut model = Model::new(ModelConfig::default(), 8001).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(8002);
    let data: Vec<f64> = (0..3 * 256 * 256).map(|_| rng.gen_range(0.0..255.0)).collect();
    let image = Tensor::from_vec(&[1, 3, 256, 256], data).unwrap();
    // Training-mode outputs without recording (shape check only).
    let out = model.forward(&image, &ForwardCtx::probe()).unwrap();
    let logits_ok = out.logits.shape() == [1, 2, 256, 256];
    let projection = out.projection.expect("projection in training mode");
    let proj_ok = projection.shape() == [1, 256, 256, 256];

    let f = projection.batch_item(0);
    let pooled = partition_and_pool(&f, 64).unwrap();
    let count_ok = pooled.embeddings.shape() == [4096, 256];
    let mut norm_ok = true;
    for i in 0..4096 {
        if !pooled.valid[i] {
            norm_ok = false;
            break;
        }
        let row = &pooled.embeddings.data()[i * 256..(i + 1) * 256];
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            norm_ok = false;
            break;
        }
    }

    // Evaluation mode never produces the projection.
    let eval_out = model.forward(&image, &ForwardCtx::eval()).unwrap();
    let eval_ok = eval_out.projection.is_none();

    report(
        8,
        "full-model shape contract",
        logits_ok && proj_ok && count_ok && norm_ok && eval_ok,
        &format!(
            "logits {logits_ok}, projection {proj_ok}, 4096 embeddings {count_ok}, unit norms {norm_ok}, eval omits projection {eval_ok}, {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_09_auc_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(9001);
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    let mut attempts = 0usize;
    while compared < 500 {
        attempts += 1;
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
        match (pixel_auc(&scores, &labels), auc_pair_count(&scores, &labels)) {
            (Ok(fast), Some(slow)) => {
                worst = worst.max((fast - slow).abs());
                compared += 1;
            }
            (Err(forgeloc_core::Error::AucUndefined), None) => {}
            (a, b) => panic!("oracle disagreement: {a:?} vs {b:?}"),
        }
        assert!(attempts < 10_000);
    }

    let perfect = pixel_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
    let constant = pixel_auc(&[0.4; 8], &[1, 0, 1, 0, 1, 0, 1, 0]).unwrap();
    report(
        9,
        "pixel-AUC oracle",
        worst <= 1e-9 && perfect == 1.0 && constant == 0.5,
        &format!("500 instances worst {worst:.3e}, perfect {perfect}, constant {constant}"),
    );
}

fn toy_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.image_size = 64;
    cfg.k = 16;
    cfg.encoder = EncoderKind::Tiny;
    cfg.embed_dim = 32;
    cfg.aspp_channels = 48;
    cfg.batch_size = 4;
    cfg.lr = 1e-4;
    cfg.tau = 0.1;
    cfg.ce_weights = (1.0, 10.0);
    cfg.max_steps = 200;
    cfg.epochs = 10_000; // bounded by max_steps
    cfg.val_every = 0;
    cfg.seed = 10_001;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn criterion_10_toy_overfit() {
    let start = Instant::now();
    let cfg = toy_config();
    let pool = generate_base_pool(6, cfg.image_size, 777);
    let samples: Vec<_> = (0..16)
        .map(|i| synth_forge(&pool, 9000 + i, SynthOp::ALL[i as usize % 3]).unwrap())
        .collect();

    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::new(cfg.model_config(), cfg.seed).unwrap();
    let train_report = train(&mut model, &samples, &[], &cfg, dir.path()).unwrap();
    assert_eq!(train_report.steps, 200);

    let eval = evaluate_model(&mut model, &samples).unwrap();
    let elapsed = start.elapsed();
    report(
        10,
        "toy overfit",
        eval.mean_auc >= 0.95 && elapsed.as_secs_f64() < 1800.0,
        &format!(
            "16 images, 200 steps, train-set mean pixel AUC {:.4} (threshold 0.95), {:.0}s",
            eval.mean_auc,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_11_ablation_direction_soft() {
    // Train CE+CON and CE-only with matched seeds/data, compare held-out
    // AUC and the within/between cosine gap of exported class-mean
    // features. Soft criterion: a failure triggers investigation, not
    // automatic rejection, so this test reports and asserts only that the
    // experiment ran.
    let mut base_cfg = toy_config();
    base_cfg.max_steps = 120;

    let pool_train = generate_base_pool(5, base_cfg.image_size, 1100);
    let train_samples: Vec<_> = (0..12)
        .map(|i| synth_forge(&pool_train, 11_000 + i, SynthOp::ALL[i as usize % 3]).unwrap())
        .collect();
    // Held-out set from a different generator pool and seed range.
    let pool_held = generate_base_pool(5, base_cfg.image_size, 2200);
    let held_out: Vec<_> = (0..10)
        .map(|i| synth_forge(&pool_held, 22_000 + i, SynthOp::ALL[i as usize % 3]).unwrap())
        .collect();

    let mut auc_wins = 0usize;
    let mut gap_wins = 0usize;
    let mut lines = Vec::new();
    for (rep, seed) in [31u64, 32, 33].iter().enumerate() {
        let mut run = |contrastive: bool| -> (f64, f64) {
            let mut cfg = base_cfg.clone();
            cfg.contrastive = contrastive;
            cfg.seed = *seed;
            let dir = tempfile::tempdir().unwrap();
            let mut model = Model::new(cfg.model_config(), cfg.seed).unwrap();
            train(&mut model, &train_samples, &[], &cfg, dir.path()).unwrap();
            let auc = evaluate_model(&mut model, &held_out).unwrap().mean_auc;
            let rows = export_mean_features(&mut model, &held_out).unwrap();
            let gap = cosine_separation(&rows).unwrap().gap();
            (auc, gap)
        };
        let (auc_con, gap_con) = run(true);
        let (auc_ce, gap_ce) = run(false);
        if auc_con >= auc_ce {
            auc_wins += 1;
        }
        if gap_con > gap_ce {
            gap_wins += 1;
        }
        lines.push(format!(
            "rep {rep}: auc {auc_con:.4} vs {auc_ce:.4}, gap {gap_con:.4} vs {gap_ce:.4}"
        ));
    }

    let hard_pass = auc_wins >= 2 && gap_wins == 3;
    let verdict = if hard_pass {
        "PASS"
    } else {
        "SOFT-FAIL (investigation trigger per criterion, not a rejection)"
    };
    println!(
        "criterion 11 [{verdict}] ablation direction: auc wins {auc_wins}/3, gap wins {gap_wins}/3; {}",
        lines.join("; ")
    );
}

#[test]
fn criterion_12_determinism() {
    // Identical seeds and data produce byte-identical synthetic datasets,
    // training logs, and checkpoints.
    let dir = tempfile::tempdir().unwrap();
    let synth_a = dir.path().join("synth-a");
    let synth_b = dir.path().join("synth-b");
    for out in [&synth_a, &synth_b] {
        write_synth_dataset(out, 6, 48, 1234, &SynthOp::ALL, 4).unwrap();
    }
    let mut synth_identical = true;
    for entry in std::fs::read_dir(synth_a.join("images")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(synth_b.join("images").join(name)).unwrap();
        synth_identical &= a == b;
    }

    let mut cfg = TrainConfig::default();
    cfg.image_size = 32;
    cfg.k = 8;
    cfg.encoder = EncoderKind::Tiny;
    cfg.embed_dim = 8;
    cfg.aspp_channels = 8;
    cfg.batch_size = 2;
    cfg.epochs = 2;
    cfg.seed = 99;
    let pool = generate_base_pool(3, 32, 12);
    let samples: Vec<_> = (0..4)
        .map(|i| synth_forge(&pool, 500 + i, SynthOp::ALL[i as usize % 3]).unwrap())
        .collect();
    let run = |out: &std::path::Path| {
        let mut model = Model::new(cfg.model_config(), cfg.seed).unwrap();
        train(&mut model, &samples, &samples, &cfg, out).unwrap()
    };
    let dir_a = dir.path().join("train-a");
    let dir_b = dir.path().join("train-b");
    let a = run(&dir_a);
    let b = run(&dir_b);
    let logs_identical = a.log == b.log;
    let checkpoints_identical = std::fs::read(&a.final_checkpoint).unwrap()
        == std::fs::read(&b.final_checkpoint).unwrap();

    report(
        12,
        "determinism",
        synth_identical && logs_identical && checkpoints_identical,
        &format!(
            "synth bytes {synth_identical}, log bytes {logs_identical}, checkpoint bytes {checkpoints_identical}"
        ),
    );
}
