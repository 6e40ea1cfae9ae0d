//! Adam optimizer over the parameters of a [`Params`] model.

use super::{Param, Params};

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over every parameter of the model, in visit order. The
    /// moment buffers are keyed by that order, so the model structure must
    /// not change between steps.
    pub fn step<M: Params + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut slot = 0usize;
        model.visit_params("model", &mut |_name, p: &mut Param| {
            if slot == m_all.len() {
                m_all.push(vec![0.0; p.value.numel()]);
                v_all.push(vec![0.0; p.value.numel()]);
            }
            let m = &mut m_all[slot];
            let v = &mut v_all[slot];
            assert_eq!(m.len(), p.value.numel(), "parameter {slot} changed size");
            let grads_present = !p.grad().is_empty();
            if grads_present {
                let grad = p.grad().to_vec();
                for (i, value) in p.value.data_mut().iter_mut().enumerate() {
                    let g = grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    *value -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            slot += 1;
        });
    }

    /// Clears the gradient accumulators of every parameter.
    pub fn zero_grads<M: Params + ?Sized>(model: &mut M) {
        model.visit_params("model", &mut |_name, p: &mut Param| {
            p.zero_grad();
        });
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}
