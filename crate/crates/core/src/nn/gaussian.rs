//! Diagonal Gaussian policy head with sigmoid squashing into a box.
//!
//! Log-probabilities are taken on the pre-squash sample `z`. The squash
//! Jacobian depends only on `z`, so it cancels in PPO probability ratios.

use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::{NnError, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct SquashedSample<T> {
    pub z: Vec<T>,
    pub action: Vec<T>,
    pub log_prob: T,
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianPolicy {
    pub log_std: ParamId,
    pub dim: usize,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl GaussianPolicy {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, log_std_init: f64) -> Self {
        let log_std = store.add(&format!("{name}.log_std"), Tensor::full(&[dim], T::lit(log_std_init)));
        Self { log_std, dim }
    }

    pub fn log_std_values<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<T> {
        let (lo, hi) = (T::lit(LOG_STD_MIN), T::lit(LOG_STD_MAX));
        store.value(self.log_std).data().iter().map(|&x| x.max(lo).min(hi)).collect()
    }

    /// Map `z` into `[lo, hi]` per dimension.
    pub fn squash<T: Scalar>(z: &[T], bounds: &[(T, T)]) -> Vec<T> {
        z.iter().zip(bounds).map(|(&x, &(lo, hi))| lo + (hi - lo) * sigmoid(x)).collect()
    }

    /// Log-density of `z` under `N(mean, std)` summed over active dimensions.
    pub fn log_prob_values<T: Scalar>(&self, store: &ParamStore<T>, mean: &[T], z: &[T], active: &[bool]) -> T {
        let ls = self.log_std_values(store);
        let c = T::lit(HALF_LOG_TWO_PI);
        let half = T::lit(0.5);
        (0..self.dim)
            .filter(|&i| active[i])
            .map(|i| {
                let u = (z[i] - mean[i]) / ls[i].exp();
                -half * u * u - ls[i] - c
            })
            .sum()
    }

    /// Draw `z ~ N(mean, std)` and squash. Inactive dimensions keep `z = mean`.
    pub fn sample<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        mean: &[T],
        bounds: &[(T, T)],
        active: &[bool],
        rng: &mut impl Rng,
    ) -> SquashedSample<T> {
        let ls = self.log_std_values(store);
        let z: Vec<T> = (0..self.dim)
            .map(|i| {
                let eps: f64 = rng.sample(StandardNormal);
                if active[i] {
                    mean[i] + ls[i].exp() * T::lit(eps)
                } else {
                    mean[i]
                }
            })
            .collect();
        let action = Self::squash(&z, bounds);
        let log_prob = self.log_prob_values(store, mean, &z, active);
        SquashedSample { z, action, log_prob }
    }

    /// Squashed mean, used for deterministic evaluation.
    pub fn mode<T: Scalar>(mean: &[T], bounds: &[(T, T)]) -> Vec<T> {
        Self::squash(mean, bounds)
    }

    /// Per-row log-probabilities `[B]` of stored samples `z [B, A]`;
    /// `mask [B, A]` holds 1 for active dimensions and 0 otherwise.
    pub fn log_prob<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mean: NodeId,
        z: Tensor<T>,
        mask: Tensor<T>,
    ) -> Result<NodeId, NnError> {
        let (b, _) = g.value(mean).dims2();
        let ls = self.clamped_log_std(g, store, b);
        let zi = g.input(z);
        let diff = g.sub(zi, mean)?;
        let neg = g.scale(ls, -T::one());
        let inv_std = g.exp(neg);
        let u = g.mul(diff, inv_std)?;
        let u2 = g.square(u);
        let quad = g.scale(u2, T::lit(-0.5));
        let per_dim = g.sub(quad, ls)?;
        let per_dim = g.add_scalar(per_dim, T::lit(-HALF_LOG_TWO_PI));
        let m = g.input(mask);
        let masked = g.mul(per_dim, m)?;
        Ok(g.sum_cols(masked))
    }

    /// Per-row entropies `[B]` of the z-space Gaussian over active dimensions.
    pub fn entropy<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mask: Tensor<T>) -> Result<NodeId, NnError> {
        let (b, _) = mask.dims2();
        let ls = self.clamped_log_std(g, store, b);
        let h = g.add_scalar(ls, T::lit(0.5 + HALF_LOG_TWO_PI));
        let m = g.input(mask);
        let masked = g.mul(h, m)?;
        Ok(g.sum_cols(masked))
    }

    fn clamped_log_std<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, rows: usize) -> NodeId {
        let p = g.param(store, self.log_std);
        let c = g.clamp(p, T::lit(LOG_STD_MIN), T::lit(LOG_STD_MAX));
        g.broadcast_rows(c, rows)
    }
}
