//! Per-channel batch normalization over NCHW tensors.

use super::{ForwardCtx, Param, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    training: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let (b, c, h, w) = x.dims4();
        assert_eq!(c, self.gamma.value.numel(), "batchnorm channel mismatch");
        let m = b * h * w;
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, c, h, w]);
        let mut xhat = Tensor::zeros(&[b, c, h, w]);
        let mut inv_std_all = vec![0.0; c];

        for ch in 0..c {
            let (mean, inv_std) = if ctx.training {
                let mut sum = 0.0;
                for n in 0..b {
                    let base = (n * c + ch) * plane;
                    for &v in &x.data()[base..base + plane] {
                        sum += v;
                    }
                }
                let mean = sum / m as f64;
                let mut var_sum = 0.0;
                for n in 0..b {
                    let base = (n * c + ch) * plane;
                    for &v in &x.data()[base..base + plane] {
                        let d = v - mean;
                        var_sum += d * d;
                    }
                }
                let var = var_sum / m as f64;
                if ctx.update_stats {
                    let mom = self.momentum;
                    let unbiased = if m > 1 {
                        var_sum / (m - 1) as f64
                    } else {
                        var
                    };
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (1.0 - mom) * *rm + mom * mean;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (1.0 - mom) * *rv + mom * unbiased;
                }
                (mean, 1.0 / (var + self.eps).sqrt())
            } else {
                let mean = self.running_mean.data()[ch];
                let var = self.running_var.data()[ch];
                (mean, 1.0 / (var + self.eps).sqrt())
            };
            inv_std_all[ch] = inv_std;
            let g = self.gamma.value.data()[ch];
            let bta = self.beta.value.data()[ch];
            for n in 0..b {
                let base = (n * c + ch) * plane;
                for i in 0..plane {
                    let xh = (x.data()[base + i] - mean) * inv_std;
                    xhat.data_mut()[base + i] = xh;
                    out.data_mut()[base + i] = g * xh + bta;
                }
            }
        }

        if ctx.record {
            self.cache = Some(BnCache {
                xhat,
                inv_std: inv_std_all,
                training: ctx.training,
            });
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batchnorm backward without recorded forward");
        let (b, c, h, w) = grad_out.dims4();
        let plane = h * w;
        let m = (b * plane) as f64;
        let mut grad_in = Tensor::zeros(&[b, c, h, w]);

        for ch in 0..c {
            // Batch-local reductions of this gradient (not the accumulated
            // parameter gradients).
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for n in 0..b {
                let base = (n * c + ch) * plane;
                for i in 0..plane {
                    let g = grad_out.data()[base + i];
                    sum_g += g;
                    sum_gx += g * cache.xhat.data()[base + i];
                }
            }
            self.gamma.grad_mut()[ch] += sum_gx;
            self.beta.grad_mut()[ch] += sum_g;

            let gamma = self.gamma.value.data()[ch];
            let inv_std = cache.inv_std[ch];
            if cache.training {
                let mean_g = sum_g / m;
                let mean_gx = sum_gx / m;
                for n in 0..b {
                    let base = (n * c + ch) * plane;
                    for i in 0..plane {
                        let g = grad_out.data()[base + i];
                        let xh = cache.xhat.data()[base + i];
                        grad_in.data_mut()[base + i] =
                            gamma * inv_std * (g - mean_g - xh * mean_gx);
                    }
                }
            } else {
                for n in 0..b {
                    let base = (n * c + ch) * plane;
                    for i in 0..plane {
                        grad_in.data_mut()[base + i] =
                            grad_out.data()[base + i] * gamma * inv_std;
                    }
                }
            }
        }
        grad_in
    }
}

impl Params for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}
