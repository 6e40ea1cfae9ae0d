//! Max pooling and global average pooling.

use super::ForwardCtx;
use crate::tensor::Tensor;

/// Max pooling with implicit -inf padding. Ties resolve to the first
/// maximum in scan order, so the backward routing is deterministic.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn out_spatial(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let (b, c, ih, iw) = x.dims4();
        let (oh, ow) = (self.out_spatial(ih), self.out_spatial(iw));
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = if ctx.record {
            vec![0usize; b * c * oh * ow]
        } else {
            Vec::new()
        };
        for n in 0..b {
            for ch in 0..c {
                let x_plane = &x.data()[(n * c + ch) * ih * iw..(n * c + ch + 1) * ih * iw];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy as usize >= ih {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix as usize >= iw {
                                    continue;
                                }
                                let idx = iy as usize * iw + ix as usize;
                                let v = x_plane[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        let o_idx = ((n * c + ch) * oh + oy) * ow + ox;
                        out.data_mut()[o_idx] = best;
                        if ctx.record {
                            argmax[o_idx] = (n * c + ch) * ih * iw + best_idx;
                        }
                    }
                }
            }
        }
        if ctx.record {
            self.cache = Some(PoolCache {
                argmax,
                in_shape: vec![b, c, ih, iw],
            });
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("maxpool backward without recorded forward");
        let mut grad_in = Tensor::zeros(&cache.in_shape);
        for (o_idx, &src) in cache.argmax.iter().enumerate() {
            grad_in.data_mut()[src] += grad_out.data()[o_idx];
        }
        grad_in
    }
}

/// Mean over the spatial axes: NxCxHxW -> NxCx1x1.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(&[b, c, 1, 1]);
    for i in 0..b * c {
        let mut acc = 0.0;
        for &v in &x.data()[i * plane..(i + 1) * plane] {
            acc += v;
        }
        out.data_mut()[i] = acc / plane as f64;
    }
    out
}

pub fn global_avg_pool_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (b, c, oh, ow) = grad_out.dims4();
    assert_eq!((oh, ow), (1, 1));
    let plane = h * w;
    let mut grad_in = Tensor::zeros(&[b, c, h, w]);
    for i in 0..b * c {
        let g = grad_out.data()[i] / plane as f64;
        for v in &mut grad_in.data_mut()[i * plane..(i + 1) * plane] {
            *v = g;
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_difference_grad, grad_discrepancy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn resnet_stem_pool_shape() {
        let mut pool = MaxPool2d::new(3, 2, 1);
        let y = pool.forward(&Tensor::zeros(&[1, 4, 8, 8]), &ForwardCtx::eval());
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let mut pool = MaxPool2d::new(2, 2, 0);
        let y = pool.forward(&x, &ForwardCtx::train());
        assert_eq!(y.data(), &[5.0]);
        let g = pool.backward(&Tensor::full(&[1, 1, 1, 1], 2.0));
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x_data: Vec<f64> = (0..2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[1, 2, 6, 6], x_data.clone()).unwrap();
        let mut pool = MaxPool2d::new(3, 2, 1);
        let out = pool.forward(&x, &ForwardCtx::train_frozen());
        let probe: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad_in = pool.backward(&Tensor::from_vec(out.shape(), probe.clone()).unwrap());
        let mut p2 = MaxPool2d::new(3, 2, 1);
        let numeric = finite_difference_grad(&x_data, 1e-6, move |xs| {
            let t = Tensor::from_vec(&[1, 2, 6, 6], xs.to_vec()).unwrap();
            p2.forward(&t, &ForwardCtx::probe())
                .data()
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        });
        assert!(grad_discrepancy(grad_in.data(), &numeric) < 1e-5);
    }

    #[test]
    fn gap_roundtrip() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = global_avg_pool(&x);
        assert_eq!(y.data(), &[3.0]);
        let g = global_avg_pool_backward(&Tensor::full(&[1, 1, 1, 1], 4.0), 2, 2);
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
