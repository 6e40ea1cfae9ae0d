//! Atrous spatial pyramid pooling: a 1x1 branch, one dilated 3x3 branch per
//! rate, and a global-pooling branch, concatenated and projected back to a
//! fixed width. Spatial size is preserved.

use super::encoder::ConvBn;
use crate::nn::{
    bilinear_resize, bilinear_resize_backward, global_avg_pool, global_avg_pool_backward,
    ForwardCtx, Param, Params, Relu,
};
use crate::tensor::{concat_channels, split_channels, Tensor};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct Aspp {
    branches: Vec<(ConvBn, Relu)>,
    pool_conv: ConvBn,
    pool_relu: Relu,
    project: ConvBn,
    project_relu: Relu,
    branch_channels: usize,
    spatial: Option<(usize, usize)>,
}

impl Aspp {
    pub fn new(in_channels: usize, branch_channels: usize, rates: &[usize], rng: &mut ChaCha12Rng) -> Self {
        let mut branches = Vec::new();
        branches.push((
            ConvBn::new(in_channels, branch_channels, 1, 1, 0, 1, rng),
            Relu::new(),
        ));
        for &rate in rates {
            branches.push((
                ConvBn::new(in_channels, branch_channels, 3, 1, rate, rate, rng),
                Relu::new(),
            ));
        }
        let concat_width = branch_channels * (branches.len() + 1);
        Aspp {
            branches,
            pool_conv: ConvBn::new(in_channels, branch_channels, 1, 1, 0, 1, rng),
            pool_relu: Relu::new(),
            project: ConvBn::new(concat_width, branch_channels, 1, 1, 0, 1, rng),
            project_relu: Relu::new(),
            branch_channels,
            spatial: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.branch_channels
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &ForwardCtx) -> Tensor {
        let (_, _, h, w) = x.dims4();
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for (conv, relu) in &mut self.branches {
            let y = conv.forward(x, ctx);
            outs.push(relu.forward(&y, ctx));
        }
        let pooled = global_avg_pool(x);
        let y = self.pool_conv.forward(&pooled, ctx);
        let y = self.pool_relu.forward(&y, ctx);
        outs.push(bilinear_resize(&y, h, w));
        if ctx.record {
            self.spatial = Some((h, w));
        }
        let fused = concat_channels(&outs.iter().collect::<Vec<_>>());
        let y = self.project.forward(&fused, ctx);
        self.project_relu.forward(&y, ctx)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (h, w) = self.spatial.take().expect("aspp backward without recorded forward");
        let g = self.project_relu.backward(grad_out);
        let g = self.project.backward(&g);
        let widths = vec![self.branch_channels; self.branches.len() + 1];
        let mut parts = split_channels(&g, &widths);
        let g_pool = parts.pop().expect("pool branch gradient");

        let mut grad_in: Option<Tensor> = None;
        for ((conv, relu), g_branch) in self.branches.iter_mut().zip(parts) {
            let gb = relu.backward(&g_branch);
            let gb = conv.backward(&gb);
            grad_in = Some(match grad_in {
                Some(acc) => acc.add(&gb),
                None => gb,
            });
        }

        let gp = bilinear_resize_backward(&g_pool, 1, 1);
        let gp = self.pool_relu.backward(&gp);
        let gp = self.pool_conv.backward(&gp);
        let gp = global_avg_pool_backward(&gp, h, w);
        match grad_in {
            Some(acc) => acc.add(&gp),
            None => gp,
        }
    }
}

impl Params for Aspp {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, (conv, _)) in self.branches.iter_mut().enumerate() {
            conv.visit_params(&format!("{prefix}.branch{i}"), f);
        }
        self.pool_conv.visit_params(&format!("{prefix}.pool"), f);
        self.project.visit_params(&format!("{prefix}.project"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, (conv, _)) in self.branches.iter_mut().enumerate() {
            conv.visit_buffers(&format!("{prefix}.branch{i}"), f);
        }
        self.pool_conv.visit_buffers(&format!("{prefix}.pool"), f);
        self.project.visit_buffers(&format!("{prefix}.project"), f);
    }
}
