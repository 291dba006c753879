use super::tensor::Tensor;
use super::ParamStore;
use crate::scalar::Scalar;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: T, beta1: T, beta2: T, eps: T) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Apply one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let c1 = T::one() - self.beta1.powi(self.step);
        let c2 = T::one() - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).data().to_vec();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] = p[i] - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
