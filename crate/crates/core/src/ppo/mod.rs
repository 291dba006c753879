//! Proximal policy optimization: advantages, the clipped loss and minibatch updates.

mod gae;
mod loss;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::config::PpoHyper;
use crate::nn::{Adam, Graph, NnError, NodeId, ParamStore};
use crate::scalar::Scalar;

pub use gae::{compute_gae, normalize};
pub use loss::{clipped_surrogate, ppo_loss, LossInputs, LossStats};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One recorded decision of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<O, T> {
    pub obs: O,
    /// Pre-squash Gaussian sample.
    pub z: Vec<T>,
    pub active: Vec<bool>,
    pub log_prob: T,
    pub value: T,
    pub reward: T,
    pub done: bool,
    pub slot: usize,
}

/// Transitions of a single agent stream in time order.
#[derive(Debug, Clone)]
pub struct RolloutBuffer<O, T> {
    transitions: Vec<Transition<O, T>>,
}

impl<O, T: Scalar> Default for RolloutBuffer<O, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<O, T: Scalar> RolloutBuffer<O, T> {
    pub fn new() -> Self {
        Self {
            transitions: Vec::new(),
        }
    }

    pub fn push(&mut self, t: Transition<O, T>) {
        self.transitions.push(t);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition<O, T>] {
        &self.transitions
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
    }

    /// GAE over the stored stream. The final transition bootstraps from
    /// `last_value` unless it is marked done.
    pub fn advantages(&self, gamma: T, lambda: T, last_value: T) -> Result<(Vec<T>, Vec<T>), PpoError> {
        let rewards: Vec<T> = self.transitions.iter().map(|t| t.reward).collect();
        let mut values: Vec<T> = self.transitions.iter().map(|t| t.value).collect();
        values.push(last_value);
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        compute_gae(&rewards, &values, &dones, gamma, lambda)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    /// Mean of per-minibatch loss statistics.
    pub loss: LossStats,
    pub grad_norm: f64,
    pub minibatches: usize,
    pub epochs: usize,
    pub early_stopped: bool,
}

/// Run shuffled minibatch epochs over `n_samples` indices.
///
/// `build` records the total loss for a minibatch of sample indices and
/// returns it with its statistics. Every minibatch takes one optimizer step
/// after global gradient-norm clipping. With `kl_early_stop`, the update ends
/// as soon as a minibatch's approximate KL exceeds `target_kl`.
pub fn update<T, F>(
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    n_samples: usize,
    hyper: &PpoHyper,
    rng: &mut impl Rng,
    mut build: F,
) -> Result<UpdateStats, PpoError>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>, &[usize]) -> Result<(NodeId, LossStats), PpoError>,
{
    if n_samples == 0 {
        return Err(PpoError::EmptyBatch);
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut stats = UpdateStats::default();
    let mut grad_norm = 0.0;
    'epochs: for _ in 0..hyper.epochs {
        stats.epochs += 1;
        order.shuffle(rng);
        for chunk in order.chunks(hyper.minibatch_size) {
            let mut g = Graph::new();
            let (loss, s) = build(&mut g, store, chunk)?;
            g.backward(loss)?;
            store.zero_grads();
            g.accumulate_param_grads(store);
            let norm = if hyper.max_grad_norm > 0.0 {
                store.clip_grad_norm(T::lit(hyper.max_grad_norm))
            } else {
                store.grad_norm()
            };
            opt.step(store);
            stats.loss.accumulate(&s);
            grad_norm += norm.as_f64();
            stats.minibatches += 1;
            if hyper.kl_early_stop && s.approx_kl > hyper.target_kl {
                stats.early_stopped = true;
                break 'epochs;
            }
        }
    }
    let k = 1.0 / stats.minibatches as f64;
    stats.loss = stats.loss.scaled(k);
    stats.grad_norm = grad_norm * k;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{GaussianPolicy, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One-dimensional bandit: the action itself is the reward.
    struct Bandit {
        store: ParamStore<f64>,
        mean: crate::nn::ParamId,
        value: crate::nn::ParamId,
        pi: GaussianPolicy,
    }

    impl Bandit {
        fn new() -> Self {
            let mut store = ParamStore::new();
            let mean = store.add("mean", Tensor::zeros(&[1, 1]));
            let value = store.add("value", Tensor::zeros(&[1, 1]));
            let pi = GaussianPolicy::new(&mut store, "pi", 1, 0.0);
            Self { store, mean, value, pi }
        }

        fn build(
            &self,
            g: &mut Graph<f64>,
            store: &ParamStore<f64>,
            idx: &[usize],
            z: &[f64],
            old: &[f64],
            adv: &[f64],
            hyper: &PpoHyper,
        ) -> Result<(NodeId, LossStats), PpoError> {
            let b = idx.len();
            let ones = g.input(Tensor::full(&[b, 1], 1.0));
            let m = g.param(store, self.mean);
            let mean = g.matmul(ones, m)?;
            let zt = Tensor::from_vec(&[b, 1], idx.iter().map(|&i| z[i]).collect())?;
            let lp = self.pi.log_prob(g, store, mean, zt, Tensor::full(&[b, 1], 1.0))?;
            let v = g.param(store, self.value);
            let vb = g.matmul(ones, v)?;
            let value = g.sum_cols(vb);
            let entropy = self.pi.entropy(g, store, Tensor::full(&[b, 1], 1.0))?;
            let sel = |x: &[f64]| idx.iter().map(|&i| x[i]).collect::<Vec<_>>();
            let (o, a) = (sel(old), sel(adv));
            ppo_loss(
                g,
                LossInputs {
                    log_prob: lp,
                    value,
                    entropy,
                    old_log_prob: &o,
                    advantages: &a,
                    returns: &a,
                },
                hyper,
            )
        }
    }

    fn rollout(b: &Bandit, n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mean = b.store.value(b.mean).data()[0];
        let mut z = Vec::new();
        let mut lp = Vec::new();
        for _ in 0..n {
            let s = b.pi.sample(&b.store, &[mean], &[(-1e9, 1e9)], &[true], rng);
            z.push(s.z[0]);
            lp.push(s.log_prob);
        }
        let mut adv = z.clone();
        normalize(&mut adv);
        (z, lp, adv)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut b = Bandit::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (z, lp, adv) = rollout(&b, 32, &mut rng);
        let hyper = PpoHyper {
            learning_rate: 0.0,
            minibatch_size: 8,
            epochs: 2,
            ..PpoHyper::default()
        };
        let before = b.store.entries();
        let mut opt = Adam::new(&b.store, 0.0, 0.9, 0.999, 1e-8);
        let mut store = b.store.clone();
        let stats = update(&mut store, &mut opt, 32, &hyper, &mut rng, |g, s, idx| {
            b.build(g, s, idx, &z, &lp, &adv, &hyper)
        })
        .unwrap();
        b.store = store;
        assert_eq!(b.store.entries(), before);
        assert_eq!(stats.minibatches, 8);
    }

    #[test]
    fn update_raises_probability_of_advantaged_actions() {
        let b = Bandit::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (z, lp, adv) = rollout(&b, 64, &mut rng);
        let hyper = PpoHyper {
            minibatch_size: 16,
            epochs: 4,
            learning_rate: 1e-2,
            ..PpoHyper::default()
        };
        let mut opt = Adam::new(&b.store, 1e-2, 0.9, 0.999, 1e-8);
        let mut store = b.store.clone();
        update(&mut store, &mut opt, 64, &hyper, &mut rng, |g, s, idx| {
            b.build(g, s, idx, &z, &lp, &adv, &hyper)
        })
        .unwrap();
        let best = (0..64).max_by(|&i, &j| adv[i].total_cmp(&adv[j])).unwrap();
        let worst = (0..64).min_by(|&i, &j| adv[i].total_cmp(&adv[j])).unwrap();
        let new_mean = store.value(b.mean).data()[0];
        let lp_new = |i: usize| b.pi.log_prob_values(&store, &[new_mean], &[z[i]], &[true]);
        assert!(lp_new(best) > lp[best]);
        assert!(lp_new(worst) < lp[worst]);
        assert!(new_mean > 0.0);
    }

    #[test]
    fn divergent_ratios_trigger_early_stop() {
        let b = Bandit::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (z, lp, adv) = rollout(&b, 32, &mut rng);
        // stale log-probabilities far from the current policy
        let stale: Vec<f64> = lp.iter().map(|x| x - 1.0).collect();
        let hyper = PpoHyper {
            minibatch_size: 8,
            epochs: 3,
            kl_early_stop: true,
            target_kl: 0.05,
            ..PpoHyper::default()
        };
        let mut opt = Adam::new(&b.store, 3e-4, 0.9, 0.999, 1e-8);
        let mut store = b.store.clone();
        let stats = update(&mut store, &mut opt, 32, &hyper, &mut rng, |g, s, idx| {
            b.build(g, s, idx, &z, &stale, &adv, &hyper)
        })
        .unwrap();
        assert!(stats.early_stopped);
        assert_eq!(stats.minibatches, 1);
        assert!(stats.loss.approx_kl > 0.05);
    }

    #[test]
    fn buffer_advantages_use_bootstrap() {
        let mut buf = RolloutBuffer::<(), f64>::new();
        for (i, r) in [1.0, 2.0].into_iter().enumerate() {
            buf.push(Transition {
                obs: (),
                z: vec![],
                active: vec![],
                log_prob: 0.0,
                value: 0.0,
                reward: r,
                done: false,
                slot: i,
            });
        }
        let (adv, _) = buf.advantages(0.99, 0.95, 0.0).unwrap();
        assert!((adv[0] - 2.881).abs() < 1e-12);
        buf.clear();
        assert!(buf.is_empty());
    }
}
