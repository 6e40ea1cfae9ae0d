//! Bilinear resizing (half-pixel centers, clamped borders) and its adjoint.

use crate::tensor::Tensor;

/// Per-axis interpolation table: source indices and fractional weight.
fn axis_table(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (b, c, ih, iw) = x.dims4();
    if (ih, iw) == (out_h, out_w) {
        return x.clone();
    }
    let ys = axis_table(out_h, ih);
    let xs = axis_table(out_w, iw);
    let mut out = Tensor::zeros(&[b, c, out_h, out_w]);
    for i in 0..b * c {
        let x_plane = &x.data()[i * ih * iw..(i + 1) * ih * iw];
        let o_plane = &mut out.data_mut()[i * out_h * out_w..(i + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row0 = &x_plane[y0 * iw..(y0 + 1) * iw];
            let row1 = &x_plane[y1 * iw..(y1 + 1) * iw];
            let o_row = &mut o_plane[oy * out_w..(oy + 1) * out_w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = row0[x0] * (1.0 - fx) + row0[x1] * fx;
                let bottom = row1[x0] * (1.0 - fx) + row1[x1] * fx;
                o_row[ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatters the output gradient back onto
/// the input grid with the same interpolation weights.
pub fn bilinear_resize_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (b, c, oh, ow) = grad_out.dims4();
    if (oh, ow) == (in_h, in_w) {
        return grad_out.clone();
    }
    let ys = axis_table(oh, in_h);
    let xs = axis_table(ow, in_w);
    let mut grad_in = Tensor::zeros(&[b, c, in_h, in_w]);
    for i in 0..b * c {
        let g_plane = &grad_out.data()[i * oh * ow..(i + 1) * oh * ow];
        let gi_plane = &mut grad_in.data_mut()[i * in_h * in_w..(i + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = g_plane[oy * ow + ox];
                gi_plane[y0 * in_w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gi_plane[y0 * in_w + x1] += g * (1.0 - fy) * fx;
                gi_plane[y1 * in_w + x0] += g * fy * (1.0 - fx);
                gi_plane[y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    grad_in
}
