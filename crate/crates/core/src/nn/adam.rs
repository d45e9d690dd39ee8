//! Adam with bias correction.

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    /// The conventional conditional-GAN regime.
    fn default() -> Self {
        AdamHyper {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Debug)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

pub struct Adam<T: Scalar> {
    params: Vec<Tensor<T>>,
    pub hyper: AdamHyper,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<Tensor<T>>, hyper: AdamHyper) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Adam {
            params,
            hyper,
            state: AdamState { m, v, step: 0 },
        }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// One bias-corrected update from the gradients currently stored on the
    /// parameters. Parameters without a gradient are left untouched.
    pub fn step(&mut self) {
        self.state.step += 1;
        let t = self.state.step as f64;
        let h = self.hyper;
        let b1 = T::from_f64(h.beta1);
        let b2 = T::from_f64(h.beta2);
        let one_m_b1 = T::from_f64(1.0 - h.beta1);
        let one_m_b2 = T::from_f64(1.0 - h.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - h.beta1.powf(t)));
        let corr2 = T::from_f64(1.0 / (1.0 - h.beta2.powf(t)));
        let lr = T::from_f64(h.lr);
        let eps = T::from_f64(h.eps);
        for (i, p) in self.params.iter().enumerate() {
            let grad = match p.grad_to_vec() {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            p.with_data_mut(|data| {
                for j in 0..data.len() {
                    let g = grad[j];
                    m[j] = b1 * m[j] + one_m_b1 * g;
                    v[j] = b2 * v[j] + one_m_b2 * g * g;
                    let mhat = m[j] * corr1;
                    let vhat = v[j] * corr2;
                    data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
