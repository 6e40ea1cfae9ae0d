//! Fixed high-pass noise-residual filtering of RGB images.
//!
//! Three 5x5 steganalysis-style kernels (second-order, third-order square,
//! and first-order horizontal) are correlated with every input channel;
//! output channel `c` is the mean over the three input channels of the
//! correlation with kernel `c`, mirror-padded and clamped to [-3, 3]. The
//! kernels are constants, not trainable parameters: the residual is a
//! preprocessing transform, so no gradient flows through it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Residual values are truncated to this symmetric range.
pub const CLAMP_LIMIT: f64 = 3.0;

/// Unscaled kernel taps (all integers, so accumulation is exact).
#[rustfmt::skip]
const INT_KERNELS: [[[f64; 5]; 5]; 3] = [
    [
        [0.0,  0.0,  0.0,  0.0, 0.0],
        [0.0, -1.0,  2.0, -1.0, 0.0],
        [0.0,  2.0, -4.0,  2.0, 0.0],
        [0.0, -1.0,  2.0, -1.0, 0.0],
        [0.0,  0.0,  0.0,  0.0, 0.0],
    ],
    [
        [-1.0,  2.0,  -2.0,  2.0, -1.0],
        [ 2.0, -6.0,   8.0, -6.0,  2.0],
        [-2.0,  8.0, -12.0,  8.0, -2.0],
        [ 2.0, -6.0,   8.0, -6.0,  2.0],
        [-1.0,  2.0,  -2.0,  2.0, -1.0],
    ],
    [
        [0.0, 0.0,  0.0, 0.0, 0.0],
        [0.0, 0.0,  0.0, 0.0, 0.0],
        [0.0, 1.0, -2.0, 1.0, 0.0],
        [0.0, 0.0,  0.0, 0.0, 0.0],
        [0.0, 0.0,  0.0, 0.0, 0.0],
    ],
];

const KERNEL_SCALES: [f64; 3] = [0.25, 1.0 / 12.0, 0.5];

/// The three fixed 5x5 high-pass kernels, already scaled by their
/// normalizers (1/4, 1/12, 1/2). Every kernel sums to zero, so constant
/// image regions produce a zero residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SrmKernelBank {
    kernels: [[[f64; 5]; 5]; 3],
}

impl SrmKernelBank {
    pub fn kernels(&self) -> &[[[f64; 5]; 5]; 3] {
        &self.kernels
    }
}

/// Returns the fixed kernel bank. Deterministic and never trainable.
pub fn srm_kernels() -> SrmKernelBank {
    let mut kernels = [[[0.0; 5]; 5]; 3];
    for (dst, (raw, scale)) in kernels
        .iter_mut()
        .zip(INT_KERNELS.iter().zip(KERNEL_SCALES))
    {
        for (drow, srow) in dst.iter_mut().zip(raw.iter()) {
            for (d, &s) in drow.iter_mut().zip(srow.iter()) {
                *d = s * scale;
            }
        }
    }
    SrmKernelBank { kernels }
}

/// A 3-channel noise-residual map with the same spatial size as its source
/// image; every value lies in [-3, 3].
#[derive(Debug, Clone, PartialEq)]
pub struct SrmResidual {
    data: Tensor,
}

impl SrmResidual {
    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Computes the noise residual of a 3xHxW RGB image with values in [0, 255].
///
/// Mirror padding (edge pixel not repeated) preserves the spatial size.
pub fn apply_srm(image: &Tensor) -> Result<SrmResidual> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidInput(format!(
            "expected a 3xHxW image, got shape {shape:?}"
        )));
    }
    let (_, h, w) = image.dims3();
    if h < 5 || w < 5 {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} is smaller than the 5x5 kernel support"
        )));
    }
    let mut out = Tensor::zeros(&[3, h, w]);

    // Mirror-pad each channel once, then run all three kernels over it.
    let (ph, pw) = (h + 4, w + 4);
    let mut padded = vec![0.0; 3 * ph * pw];
    for ch in 0..3 {
        let src = &image.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut padded[ch * ph * pw..(ch + 1) * ph * pw];
        for py in 0..ph {
            let sy = mirror(py as isize - 2, h);
            for px in 0..pw {
                let sx = mirror(px as isize - 2, w);
                dst[py * pw + px] = src[sy * w + sx];
            }
        }
    }

    // Accumulate with the integer kernel taps and apply the normalizer at
    // the end: integer sums are exact in f64, so zero-sum kernels map
    // constant regions to exactly zero.
    for (kc, (kernel, scale)) in INT_KERNELS.iter().zip(KERNEL_SCALES).enumerate() {
        let plane = &mut out.data_mut()[kc * h * w..(kc + 1) * h * w];
        for ch in 0..3 {
            let pad = &padded[ch * ph * pw..(ch + 1) * ph * pw];
            for y in 0..h {
                for (i, row) in kernel.iter().enumerate() {
                    let src_row = &pad[(y + i) * pw..(y + i) * pw + w + 4];
                    for (j, &kv) in row.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let out_row = &mut plane[y * w..(y + 1) * w];
                        for x in 0..w {
                            out_row[x] += kv * src_row[x + j];
                        }
                    }
                }
            }
        }
        let normalizer = scale / 3.0;
        for v in plane.iter_mut() {
            *v = (*v * normalizer).clamp(-CLAMP_LIMIT, CLAMP_LIMIT);
        }
    }
    Ok(SrmResidual { data: out })
}

/// Batched residual: applies [`apply_srm`] to every image of a Bx3xHxW tensor.
pub fn apply_srm_batch(images: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4();
    if c != 3 {
        return Err(Error::InvalidInput(format!(
            "expected 3-channel images, got {c}"
        )));
    }
    let mut out = Tensor::zeros(&[b, 3, h, w]);
    let plane = 3 * h * w;
    for n in 0..b {
        let item = images.batch_item(n);
        let res = apply_srm(&item)?;
        out.data_mut()[n * plane..(n + 1) * plane].copy_from_slice(res.data().data());
    }
    Ok(out)
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let i = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    i as usize
}
