//! Adam optimizer over a [`ParamStore`].

use numcore::{Real, Tensor};

use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub step: u64,
    pub first: Vec<Tensor<S>>,
    pub second: Vec<Tensor<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: S) -> Self {
        let zeros: Vec<Tensor<S>> = store.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = S::one() - self.beta1.powi(t);
        let c2 = S::one() - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
            let w = store.values_mut()[i].data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (S::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (S::one() - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
