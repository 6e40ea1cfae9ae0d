//! Direct 2-D convolution (cross-correlation) with zero padding.

use super::{he_tensor, ForwardCtx, Param, Params};
use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param, // [out_c, in_c, kh, kw]
    pub bias: Param,   // [out_c]
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::new(he_tensor(
                rng,
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
            )),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation,
            cache: None,
        }
    }

    pub fn out_spatial(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let (b, ic, ih, iw) = x.dims4();
        assert_eq!(ic, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = (self.out_spatial(ih), self.out_spatial(iw));
        let oc = self.out_channels;
        let k = self.kernel;
        let (s, p, d) = (self.stride, self.padding, self.dilation);
        let w = self.weight.value.data();
        let bias = self.bias.value.data();
        let xd = x.data();
        let mut out = Tensor::zeros(&[b, oc, oh, ow]);
        let od = out.data_mut();

        for n in 0..b {
            for co in 0..oc {
                let out_plane = &mut od[(n * oc + co) * oh * ow..(n * oc + co + 1) * oh * ow];
                out_plane.fill(bias[co]);
                for cin in 0..ic {
                    let x_plane = &xd[(n * ic + cin) * ih * iw..(n * ic + cin + 1) * ih * iw];
                    let w_base = ((co * ic) + cin) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w[w_base + ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_start, ox_end) = valid_range(kx, d, p, s, iw, ow);
                            if ox_start > ox_end {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * s + ky * d) as isize - p as isize;
                                if iy < 0 || iy as usize >= ih {
                                    continue;
                                }
                                let x_row = &x_plane[iy as usize * iw..(iy as usize + 1) * iw];
                                let o_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                                let mut ix = (ox_start * s + kx * d) - p;
                                if s == 1 {
                                    for ox in ox_start..=ox_end {
                                        o_row[ox] += wv * x_row[ix];
                                        ix += 1;
                                    }
                                } else {
                                    for ox in ox_start..=ox_end {
                                        o_row[ox] += wv * x_row[ix];
                                        ix += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if ctx.record {
            self.cache = Some(x.clone());
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv backward without recorded forward");
        let (b, ic, ih, iw) = x.dims4();
        let (gb, oc, oh, ow) = grad_out.dims4();
        assert_eq!(gb, b);
        assert_eq!(oc, self.out_channels);
        let k = self.kernel;
        let (s, p, d) = (self.stride, self.padding, self.dilation);
        let xd = x.data();
        let gd = grad_out.data();

        // Bias gradient.
        {
            let gbias = self.bias.grad_mut();
            for n in 0..b {
                for co in 0..oc {
                    let plane = &gd[(n * oc + co) * oh * ow..(n * oc + co + 1) * oh * ow];
                    let mut acc = 0.0;
                    for &g in plane {
                        acc += g;
                    }
                    gbias[co] += acc;
                }
            }
        }

        // Weight gradient.
        {
            let gw = self.weight.grad_mut();
            for n in 0..b {
                for co in 0..oc {
                    let g_plane = &gd[(n * oc + co) * oh * ow..(n * oc + co + 1) * oh * ow];
                    for cin in 0..ic {
                        let x_plane = &xd[(n * ic + cin) * ih * iw..(n * ic + cin + 1) * ih * iw];
                        let w_base = ((co * ic) + cin) * k * k;
                        for ky in 0..k {
                            for kx in 0..k {
                                let (ox_start, ox_end) = valid_range(kx, d, p, s, iw, ow);
                                if ox_start > ox_end {
                                    continue;
                                }
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let iy = (oy * s + ky * d) as isize - p as isize;
                                    if iy < 0 || iy as usize >= ih {
                                        continue;
                                    }
                                    let x_row =
                                        &x_plane[iy as usize * iw..(iy as usize + 1) * iw];
                                    let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                                    let mut ix = (ox_start * s + kx * d) - p;
                                    if s == 1 {
                                        for ox in ox_start..=ox_end {
                                            acc += g_row[ox] * x_row[ix];
                                            ix += 1;
                                        }
                                    } else {
                                        for ox in ox_start..=ox_end {
                                            acc += g_row[ox] * x_row[ix];
                                            ix += s;
                                        }
                                    }
                                }
                                gw[w_base + ky * k + kx] += acc;
                            }
                        }
                    }
                }
            }
        }

        // Input gradient.
        let w = self.weight.value.data();
        let mut grad_in = Tensor::zeros(&[b, ic, ih, iw]);
        let gid = grad_in.data_mut();
        for n in 0..b {
            for co in 0..oc {
                let g_plane = &gd[(n * oc + co) * oh * ow..(n * oc + co + 1) * oh * ow];
                for cin in 0..ic {
                    let gi_plane =
                        &mut gid[(n * ic + cin) * ih * iw..(n * ic + cin + 1) * ih * iw];
                    let w_base = ((co * ic) + cin) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = w[w_base + ky * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_start, ox_end) = valid_range(kx, d, p, s, iw, ow);
                            if ox_start > ox_end {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * s + ky * d) as isize - p as isize;
                                if iy < 0 || iy as usize >= ih {
                                    continue;
                                }
                                let gi_row =
                                    &mut gi_plane[iy as usize * iw..(iy as usize + 1) * iw];
                                let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                                let mut ix = (ox_start * s + kx * d) - p;
                                if s == 1 {
                                    for ox in ox_start..=ox_end {
                                        gi_row[ix] += wv * g_row[ox];
                                        ix += 1;
                                    }
                                } else {
                                    for ox in ox_start..=ox_end {
                                        gi_row[ix] += wv * g_row[ox];
                                        ix += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

/// Output-coordinate range for which `ix = ox*s + kx*d - p` stays inside
/// `[0, input)`. Returns an empty range as (1, 0) when nothing is valid.
fn valid_range(
    kx: usize,
    dilation: usize,
    padding: usize,
    stride: usize,
    input: usize,
    output: usize,
) -> (usize, usize) {
    let offset = kx as isize * dilation as isize - padding as isize;
    // ox*s + offset >= 0
    let start = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    // ox*s + offset <= input - 1
    let max_ix = input as isize - 1 - offset;
    if max_ix < 0 {
        return (1, 0);
    }
    let end = (max_ix as usize / stride).min(output.saturating_sub(1));
    if start > end {
        (1, 0)
    } else {
        (start, end)
    }
}

impl Params for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_difference_grad, grad_discrepancy};
    use rand::{Rng, SeedableRng};

    fn scalar_probe(out: &Tensor, weights: &[f64]) -> f64 {
        out.data().iter().zip(weights).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn known_value_identity_kernel() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(1, 1, 3, 1, 1, 1, &mut rng);
        conv.weight.value = Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        conv.bias.value = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv.forward(&x, &ForwardCtx::eval());
        assert_eq!(y.data(), &[1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn stride_and_dilation_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, 1, &mut rng);
        let y = conv.forward(&Tensor::zeros(&[1, 2, 8, 8]), &ForwardCtx::eval());
        assert_eq!(y.shape(), &[1, 3, 4, 4]);

        let mut dilated = Conv2d::new(2, 3, 3, 1, 6, 6, &mut rng);
        let y = dilated.forward(&Tensor::zeros(&[1, 2, 8, 8]), &ForwardCtx::eval());
        assert_eq!(y.shape(), &[1, 3, 8, 8]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for (stride, padding, dilation) in [(1usize, 1usize, 1usize), (2, 1, 1), (1, 2, 2)] {
            let mut conv = Conv2d::new(2, 3, 3, stride, padding, dilation, &mut rng);
            let x_data: Vec<f64> = (0..2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(&[1, 2, 6, 6], x_data.clone()).unwrap();
            let out = conv.forward(&x, &ForwardCtx::train_frozen());
            let probe: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grad_in = conv.backward(
                &Tensor::from_vec(out.shape(), probe.clone()).unwrap(),
            );

            // Input gradient.
            let mut c2 = conv.clone();
            let probe2 = probe.clone();
            let numeric_x = finite_difference_grad(&x_data, 1e-5, move |xs| {
                let t = Tensor::from_vec(&[1, 2, 6, 6], xs.to_vec()).unwrap();
                scalar_probe(&c2.forward(&t, &ForwardCtx::probe()), &probe2)
            });
            assert!(
                grad_discrepancy(grad_in.data(), &numeric_x) < 1e-6,
                "input grad mismatch (s={stride} p={padding} d={dilation})"
            );

            // Weight gradient.
            let w_data = conv.weight.value.data().to_vec();
            let mut c3 = conv.clone();
            let x3 = x.clone();
            let probe3 = probe.clone();
            let numeric_w = finite_difference_grad(&w_data, 1e-5, move |ws| {
                c3.weight.value = Tensor::from_vec(c3.weight.value.shape(), ws.to_vec()).unwrap();
                scalar_probe(&c3.forward(&x3, &ForwardCtx::probe()), &probe3)
            });
            assert!(
                grad_discrepancy(conv.weight.grad(), &numeric_w) < 1e-6,
                "weight grad mismatch (s={stride} p={padding} d={dilation})"
            );

            // Bias gradient.
            let b_data = conv.bias.value.data().to_vec();
            let mut c4 = conv.clone();
            let x4 = x.clone();
            let probe4 = probe.clone();
            let numeric_b = finite_difference_grad(&b_data, 1e-5, move |bs| {
                c4.bias.value = Tensor::from_vec(&[3], bs.to_vec()).unwrap();
                scalar_probe(&c4.forward(&x4, &ForwardCtx::probe()), &probe4)
            });
            assert!(grad_discrepancy(conv.bias.grad(), &numeric_b) < 1e-6);
        }
    }
}
