use super::PpoError;
use crate::config::PpoHyper;
use crate::nn::{Graph, NodeId, Tensor};
use crate::scalar::Scalar;

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate<T: Scalar>(ratio: T, advantage: T, eps: T) -> T {
    let clipped = ratio.max(T::one() - eps).min(T::one() + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Graph nodes and recorded quantities for one role's minibatch.
pub struct LossInputs<'a, T> {
    /// `[B]` log-probabilities of the stored actions under the current policy.
    pub log_prob: NodeId,
    /// `[B]` value predictions.
    pub value: NodeId,
    /// `[B]` policy entropies.
    pub entropy: NodeId,
    pub old_log_prob: &'a [T],
    pub advantages: &'a [T],
    pub returns: &'a [T],
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    /// Clipped surrogate objective (maximized).
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl LossStats {
    pub fn accumulate(&mut self, other: &LossStats) {
        self.loss += other.loss;
        self.surrogate += other.surrogate;
        self.value_loss += other.value_loss;
        self.entropy += other.entropy;
        self.approx_kl += other.approx_kl;
        self.clip_fraction += other.clip_fraction;
    }

    pub fn scaled(&self, s: f64) -> LossStats {
        LossStats {
            loss: self.loss * s,
            surrogate: self.surrogate * s,
            value_loss: self.value_loss * s,
            entropy: self.entropy * s,
            approx_kl: self.approx_kl * s,
            clip_fraction: self.clip_fraction * s,
        }
    }
}

/// `-L_clip + c1 * mean((V - R)^2) - c2 * mean(H)`.
pub fn ppo_loss<T: Scalar>(
    g: &mut Graph<T>,
    inputs: LossInputs<'_, T>,
    hyper: &PpoHyper,
) -> Result<(NodeId, LossStats), PpoError> {
    let b = inputs.old_log_prob.len();
    if b == 0 {
        return Err(PpoError::EmptyBatch);
    }
    for (what, len) in [
        ("advantages", inputs.advantages.len()),
        ("returns", inputs.returns.len()),
        ("log_prob", g.value(inputs.log_prob).len()),
        ("value", g.value(inputs.value).len()),
        ("entropy", g.value(inputs.entropy).len()),
    ] {
        if len != b {
            return Err(PpoError::LengthMismatch {
                what,
                expected: b,
                got: len,
            });
        }
    }
    let vec = |x: &[T]| Tensor::from_vec(&[b], x.to_vec()).expect("rank 1");
    let eps = T::lit(hyper.clip_eps);

    let old = g.input(vec(inputs.old_log_prob));
    let log_ratio = g.sub(inputs.log_prob, old)?;
    let ratio = g.exp(log_ratio);
    let adv = g.input(vec(inputs.advantages));
    let unclipped = g.mul(ratio, adv)?;
    let clipped_ratio = g.clamp(ratio, T::one() - eps, T::one() + eps);
    let clipped = g.mul(clipped_ratio, adv)?;
    let pessimistic = g.min(unclipped, clipped)?;
    let surrogate = g.mean(pessimistic);

    let ret = g.input(vec(inputs.returns));
    let verr = g.sub(inputs.value, ret)?;
    let verr2 = g.square(verr);
    let value_loss = g.mean(verr2);
    let entropy = g.mean(inputs.entropy);

    let neg_surr = g.scale(surrogate, -T::one());
    let vterm = g.scale(value_loss, T::lit(hyper.value_coef));
    let eterm = g.scale(entropy, T::lit(hyper.entropy_coef));
    let partial = g.add(neg_surr, vterm)?;
    let loss = g.sub(partial, eterm)?;

    let ratios = g.value(ratio).data();
    let mut kl = 0.0;
    let mut clipped_count = 0usize;
    for &r in ratios {
        let r = r.as_f64();
        kl += (r - 1.0) - r.ln();
        if (r - 1.0).abs() > hyper.clip_eps {
            clipped_count += 1;
        }
    }
    let stats = LossStats {
        loss: g.value(loss).data()[0].as_f64(),
        surrogate: g.value(surrogate).data()[0].as_f64(),
        value_loss: g.value(value_loss).data()[0].as_f64(),
        entropy: g.value(entropy).data()[0].as_f64(),
        approx_kl: kl / b as f64,
        clip_fraction: clipped_count as f64 / b as f64,
    };
    Ok((loss, stats))
}
