use super::PpoError;
use crate::scalar::Scalar;

/// Truncated generalized advantage estimates and value targets.
///
/// `values` carries one bootstrap entry past the last reward. A `done` flag
/// at step `n` cuts both the bootstrap and the advantage recursion there.
pub fn compute_gae<T: Scalar>(
    rewards: &[T],
    values: &[T],
    dones: &[bool],
    gamma: T,
    lambda: T,
) -> Result<(Vec<T>, Vec<T>), PpoError> {
    let n = rewards.len();
    if values.len() != n + 1 {
        return Err(PpoError::LengthMismatch {
            what: "values",
            expected: n + 1,
            got: values.len(),
        });
    }
    if dones.len() != n {
        return Err(PpoError::LengthMismatch {
            what: "dones",
            expected: n,
            got: dones.len(),
        });
    }
    let mut adv = vec![T::zero(); n];
    let mut next = T::zero();
    for i in (0..n).rev() {
        let live = if dones[i] { T::zero() } else { T::one() };
        let delta = rewards[i] + gamma * values[i + 1] * live - values[i];
        next = delta + gamma * lambda * live * next;
        adv[i] = next;
    }
    let returns = adv.iter().zip(values).map(|(&a, &v)| a + v).collect();
    Ok((adv, returns))
}

/// Shift and scale to zero mean and unit (population) standard deviation.
pub fn normalize<T: Scalar>(x: &mut [T]) {
    if x.len() < 2 {
        return;
    }
    let n = T::count(x.len());
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let std = var.sqrt() + T::lit(1e-8);
    x.iter_mut().for_each(|v| *v = (*v - mean) / std);
}
