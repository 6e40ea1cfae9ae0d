//! Synthetic tampering: seeded generation of spliced, copy-moved, and
//! inpainting-style forgeries over procedurally generated base images.
//!
//! Every operation pastes an irregular polygonal region and marks exactly
//! the pasted pixels in the mask, so sample invariants (binary mask, exact
//! pixel correspondence) hold by construction and the whole pipeline is
//! reproducible from a seed.

use crate::data::ForgerySample;
use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthOp {
    Splice,
    CopyMove,
    Removal,
}

impl SynthOp {
    pub const ALL: [SynthOp; 3] = [SynthOp::Splice, SynthOp::CopyMove, SynthOp::Removal];

    pub fn as_str(&self) -> &'static str {
        match self {
            SynthOp::Splice => "splice",
            SynthOp::CopyMove => "copymove",
            SynthOp::Removal => "removal",
        }
    }
}

impl std::str::FromStr for SynthOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "splice" => Ok(SynthOp::Splice),
            "copymove" => Ok(SynthOp::CopyMove),
            "removal" => Ok(SynthOp::Removal),
            other => Err(Error::Config(format!(
                "unknown forgery op '{other}' (expected splice, copymove, or removal)"
            ))),
        }
    }
}

impl std::fmt::Display for SynthOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Procedural authentic image: a smooth random color field, a few soft
/// ellipses, and light pixel noise.
pub fn base_image(size: usize, rng: &mut ChaCha12Rng) -> RgbImage {
    let grid = 5usize;
    let mut control = [[[0.0f64; 3]; 5]; 5];
    for row in control.iter_mut() {
        for cell in row.iter_mut() {
            for ch in cell.iter_mut() {
                *ch = rng.gen_range(40.0..215.0);
            }
        }
    }
    let mut img = RgbImage::new(size as u32, size as u32);
    let scale = (grid - 1) as f64 / size as f64;
    for y in 0..size {
        let gy = y as f64 * scale;
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(grid - 1);
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 * scale;
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(grid - 1);
            let fx = gx - x0 as f64;
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = control[y0][x0][ch] * (1.0 - fx) + control[y0][x1][ch] * fx;
                let bottom = control[y1][x0][ch] * (1.0 - fx) + control[y1][x1][ch] * fx;
                px[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }

    let blobs = rng.gen_range(3..=6);
    for _ in 0..blobs {
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let rx = rng.gen_range(size as f64 * 0.06..size as f64 * 0.22);
        let ry = rng.gen_range(size as f64 * 0.06..size as f64 * 0.22);
        let color = [
            rng.gen_range(0.0..255.0),
            rng.gen_range(0.0..255.0),
            rng.gen_range(0.0..255.0),
        ];
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let d = dx * dx + dy * dy;
                if d < 1.0 {
                    let alpha = (1.0 - d).min(1.0) * 0.8;
                    let p = img.get_pixel_mut(x as u32, y as u32);
                    for ch in 0..3 {
                        let v = p.0[ch] as f64 * (1.0 - alpha) + color[ch] * alpha;
                        p.0[ch] = v.round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }

    for p in img.pixels_mut() {
        for ch in 0..3 {
            let noise: f64 = rng.gen_range(-6.0..6.0);
            p.0[ch] = (p.0[ch] as f64 + noise).round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// A deterministic pool of authentic base images.
pub fn generate_base_pool(count: usize, size: usize, seed: u64) -> Vec<RgbImage> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count).map(|_| base_image(size, &mut rng)).collect()
}

/// Pixels of a random irregular polygon relative to its center, plus the
/// bounding radius actually used.
fn polygon_pixels(rng: &mut ChaCha12Rng, max_radius: f64) -> Vec<(i32, i32)> {
    let vertices = rng.gen_range(5..=9);
    let mut angles: Vec<f64> = (0..vertices)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    angles.sort_by(f64::total_cmp);
    let poly: Vec<(f64, f64)> = angles
        .iter()
        .map(|&a| {
            let r = rng.gen_range(0.45..1.0) * max_radius;
            (r * a.cos(), r * a.sin())
        })
        .collect();

    // Even-odd rasterization over the bounding box.
    let bound = max_radius.ceil() as i32;
    let mut pixels = Vec::new();
    for y in -bound..=bound {
        for x in -bound..=bound {
            if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly) {
                pixels.push((y, x));
            }
        }
    }
    pixels
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if ((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi) {
            inside = true;
        }
        j = i;
    }
    inside
}

/// Center placement so that every polygon pixel lands inside a w x h image.
fn place(
    rng: &mut ChaCha12Rng,
    pixels: &[(i32, i32)],
    w: u32,
    h: u32,
) -> Option<(i32, i32)> {
    let min_y = pixels.iter().map(|p| p.0).min()?;
    let max_y = pixels.iter().map(|p| p.0).max()?;
    let min_x = pixels.iter().map(|p| p.1).min()?;
    let max_x = pixels.iter().map(|p| p.1).max()?;
    let lo_y = -min_y;
    let hi_y = h as i32 - 1 - max_y;
    let lo_x = -min_x;
    let hi_x = w as i32 - 1 - max_x;
    if lo_y > hi_y || lo_x > hi_x {
        return None;
    }
    Some((rng.gen_range(lo_y..=hi_y), rng.gen_range(lo_x..=hi_x)))
}

/// Generates one forged sample from a pool of authentic images.
/// Deterministic in `(pool, seed, op)`. Splicing needs at least two pool
/// images; every op needs at least one.
pub fn synth_forge(pool: &[RgbImage], seed: u64, op: SynthOp) -> Result<ForgerySample> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty authentic pool".into()));
    }
    if op == SynthOp::Splice && pool.len() < 2 {
        return Err(Error::InvalidInput(
            "splicing needs at least two pool images".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let host_idx = rng.gen_range(0..pool.len());
    let mut host = pool[host_idx].clone();
    let (w, h) = host.dimensions();
    let max_radius = (w.min(h) as f64 * 0.20).max(4.0);

    // Region shape and destination, with bounded retries for small hosts.
    let mut attempt = 0;
    let (pixels, dst) = loop {
        let pixels = polygon_pixels(&mut rng, max_radius);
        if !pixels.is_empty() {
            if let Some(dst) = place(&mut rng, &pixels, w, h) {
                break (pixels, dst);
            }
        }
        attempt += 1;
        if attempt >= 20 {
            return Err(Error::InvalidInput(format!(
                "could not fit a tamper region into a {w}x{h} host"
            )));
        }
    };

    let gather = |img: &RgbImage, center: (i32, i32)| -> Vec<Rgb<u8>> {
        pixels
            .iter()
            .map(|&(dy, dx)| *img.get_pixel((center.1 + dx) as u32, (center.0 + dy) as u32))
            .collect()
    };

    let content: Vec<Rgb<u8>> = match op {
        SynthOp::Splice => {
            let mut donor_idx = rng.gen_range(0..pool.len() - 1);
            if donor_idx >= host_idx {
                donor_idx += 1;
            }
            let donor = &pool[donor_idx];
            let src = place(&mut rng, &pixels, donor.width(), donor.height())
                .ok_or_else(|| Error::InvalidInput("donor image too small".into()))?;
            gather(donor, src)
        }
        SynthOp::CopyMove => {
            // A source location separated from the destination.
            let mut src = dst;
            for _ in 0..40 {
                if let Some(cand) = place(&mut rng, &pixels, w, h) {
                    let dist2 = (cand.0 - dst.0).pow(2) + (cand.1 - dst.1).pow(2);
                    if (dist2 as f64).sqrt() >= max_radius {
                        src = cand;
                        break;
                    }
                }
            }
            gather(&host, src)
        }
        SynthOp::Removal => {
            // Clone-stamp fill: content from a shifted nearby location.
            let mut src = dst;
            for _ in 0..40 {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let dist = rng.gen_range(max_radius..2.0 * max_radius);
                let cand = (
                    dst.0 + (dist * angle.sin()).round() as i32,
                    dst.1 + (dist * angle.cos()).round() as i32,
                );
                let fits = pixels.iter().all(|&(dy, dx)| {
                    let y = cand.0 + dy;
                    let x = cand.1 + dx;
                    y >= 0 && x >= 0 && (y as u32) < h && (x as u32) < w
                });
                if fits {
                    src = cand;
                    break;
                }
            }
            gather(&host, src)
        }
    };

    let mut mask = vec![0u8; (w * h) as usize];
    for (&(dy, dx), px) in pixels.iter().zip(content) {
        let y = (dst.0 + dy) as u32;
        let x = (dst.1 + dx) as u32;
        host.put_pixel(x, y, px);
        mask[(y * w + x) as usize] = 1;
    }

    ForgerySample::new(
        host,
        mask,
        format!("{op}-{seed:010}"),
        "synth".to_string(),
    )
}

/// Writes a synthetic dataset under `root`: `images/`, `masks/`, and
/// manifests (`all`, `train`, `val`, `test` all listing every sample, which
/// is the desk-scale arrangement: held-out data comes from a second
/// generated dataset with different settings). Returns the sample ids.
pub fn write_synth_dataset(
    root: &std::path::Path,
    count: usize,
    image_size: usize,
    seed: u64,
    ops: &[SynthOp],
    pool_size: usize,
) -> Result<Vec<String>> {
    let pool = generate_base_pool(pool_size.max(2), image_size, seed ^ 0x9e3779b97f4a7c15);
    write_synth_dataset_from_pool(root, count, seed, ops, &pool)
}

/// [`write_synth_dataset`] over a caller-supplied authentic pool.
pub fn write_synth_dataset_from_pool(
    root: &std::path::Path,
    count: usize,
    seed: u64,
    ops: &[SynthOp],
    pool: &[RgbImage],
) -> Result<Vec<String>> {
    if count == 0 || ops.is_empty() {
        return Err(Error::InvalidInput("count and ops must be nonempty".into()));
    }
    std::fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    std::fs::create_dir_all(root.join("masks")).map_err(|e| Error::io(root, e))?;

    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let op = ops[i % ops.len()];
        let sample_seed = seed.wrapping_add(1).wrapping_mul(0x100000001b3) ^ (i as u64);
        let sample = synth_forge(pool, sample_seed, op)?;
        let id = format!("{:05}-{}", i, op);
        let image_path = root.join(format!("images/{id}.png"));
        sample
            .image
            .save(&image_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", image_path.display())))?;
        let (w, h) = sample.image.dimensions();
        let mask_img = image::GrayImage::from_fn(w, h, |x, y| {
            image::Luma([sample.mask[(y * w + x) as usize] * 255])
        });
        let mask_path = root.join(format!("masks/{id}.png"));
        mask_img
            .save(&mask_path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", mask_path.display())))?;
        ids.push(id);
    }

    let manifest = ids.join("\n") + "\n";
    for split in ["all", "train", "val", "test"] {
        let path = root.join(format!("{split}.txt"));
        std::fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
    }
    Ok(ids)
}
