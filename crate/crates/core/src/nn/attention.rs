//! Masked set attention with one head per user slot.
//!
//! Head `h` queries from slot `h` and attends over every active slot of the
//! same sample. Inactive slots contribute no keys and produce zero output, so
//! the encoding of a set does not depend on how many padding slots follow it.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::{NnError, ParamId, ParamStore};
use crate::scalar::Scalar;

fn check_shapes<T: Scalar>(
    states: &Tensor<T>,
    mask: &[bool],
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<(usize, usize, usize, usize), NnError> {
    let [b, m, d] = *states.shape() else {
        return Err(NnError::Shape {
            op: "attention",
            detail: format!("states must be [B, M, d], got {:?}", states.shape()),
        });
    };
    if mask.len() != b * m {
        return Err(NnError::Shape {
            op: "attention",
            detail: format!("mask has {} entries for {b}x{m}", mask.len()),
        });
    }
    let [m2, d2, k] = *wq.shape() else {
        return Err(NnError::Shape {
            op: "attention",
            detail: format!("weights must be [M, d, k], got {:?}", wq.shape()),
        });
    };
    if m2 != m || d2 != d || wk.shape() != wq.shape() || wv.shape() != wq.shape() {
        return Err(NnError::Shape {
            op: "attention",
            detail: format!("weights {:?} do not match states {:?}", wq.shape(), states.shape()),
        });
    }
    Ok((b, m, d, k))
}

/// `x [d] . w [d, k]`.
fn project<T: Scalar>(x: &[T], w: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[i * k..(i + 1) * k]) {
            *o = *o + xi * wv;
        }
    }
    out
}

fn add_outer<T: Scalar>(acc: &mut [T], x: &[T], g: &[T], k: usize) {
    for (i, &xi) in x.iter().enumerate() {
        for (a, &gv) in acc[i * k..(i + 1) * k].iter_mut().zip(g) {
            *a = *a + xi * gv;
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

struct HeadPass<T> {
    active: Vec<usize>,
    q: Vec<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    weights: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn head_forward<T: Scalar>(
    sd: &[T],
    mask: &[bool],
    wq: &[T],
    wk: &[T],
    wv: &[T],
    (b, h): (usize, usize),
    (m, d, k): (usize, usize, usize),
    inv_scale: T,
) -> HeadPass<T> {
    let state = |j: usize| &sd[(b * m + j) * d..(b * m + j + 1) * d];
    let range = h * d * k..(h + 1) * d * k;
    let (wq, wk, wv) = (&wq[range.clone()], &wk[range.clone()], &wv[range]);
    let active: Vec<usize> = (0..m).filter(|&j| mask[b * m + j]).collect();
    let q = project(state(h), wq, k);
    let keys: Vec<Vec<T>> = active.iter().map(|&j| project(state(j), wk, k)).collect();
    let values: Vec<Vec<T>> = active.iter().map(|&j| project(state(j), wv, k)).collect();
    let scores: Vec<T> = keys.iter().map(|kj| dot(&q, kj) * inv_scale).collect();
    let top = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|&s| (s - top).exp()).collect();
    let z: T = exps.iter().copied().sum();
    let weights = exps.into_iter().map(|e| e / z).collect();
    HeadPass {
        active,
        q,
        keys,
        values,
        weights,
    }
}

/// `softmax(Q K^T / sqrt(d_u)) V` for `Q [n, k]`, `K [m, k]`, `V [m, c]`.
/// Also returns the `[n, m]` attention weights.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    d_u: usize,
) -> Result<(Tensor<T>, Tensor<T>), NnError> {
    let (n, kq) = q.dims2();
    let (m, kk) = k.dims2();
    let (mv, c) = v.dims2();
    if kq != kk || m != mv || m == 0 || d_u == 0 {
        return Err(NnError::Shape {
            op: "scaled_dot_attention",
            detail: format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    let inv_scale = T::one() / T::count(d_u).sqrt();
    let mut weights = Vec::with_capacity(n * m);
    let mut out = vec![T::zero(); n * c];
    for i in 0..n {
        let scores: Vec<T> = (0..m).map(|j| dot(q.row(i), k.row(j)) * inv_scale).collect();
        let top = scores.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = scores.iter().map(|&s| (s - top).exp()).collect();
        let z: T = exps.iter().copied().sum();
        for (j, e) in exps.into_iter().enumerate() {
            let a = e / z;
            weights.push(a);
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(v.row(j)) {
                *o = *o + a * x;
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c], out)?, Tensor::from_vec(&[n, m], weights)?))
}

/// Forward pass returning `[B, M*k]`.
pub fn set_attention_forward<T: Scalar>(
    states: &Tensor<T>,
    mask: &[bool],
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (b, m, d, k) = check_shapes(states, mask, wq, wk, wv)?;
    let inv_scale = T::one() / T::count(d).sqrt();
    let mut out = vec![T::zero(); b * m * k];
    for bi in 0..b {
        for h in 0..m {
            if !mask[bi * m + h] {
                continue;
            }
            let pass = head_forward(
                states.data(),
                mask,
                wq.data(),
                wk.data(),
                wv.data(),
                (bi, h),
                (m, d, k),
                inv_scale,
            );
            let dst = &mut out[(bi * m + h) * k..(bi * m + h + 1) * k];
            for (a, v) in pass.weights.iter().zip(&pass.values) {
                for (o, &x) in dst.iter_mut().zip(v) {
                    *o = *o + *a * x;
                }
            }
        }
    }
    Tensor::from_vec(&[b, m * k], out)
}

/// Weight gradients for an upstream gradient `g [B, M*k]`.
pub fn set_attention_backward<T: Scalar>(
    states: &Tensor<T>,
    mask: &[bool],
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, m, d, k) = check_shapes(states, mask, wq, wk, wv).expect("checked in forward");
    let inv_scale = T::one() / T::count(d).sqrt();
    let mut gq = Tensor::zeros(wq.shape());
    let mut gk = Tensor::zeros(wk.shape());
    let mut gv = Tensor::zeros(wv.shape());
    let sd = states.data();
    let state = |bi: usize, j: usize| &sd[(bi * m + j) * d..(bi * m + j + 1) * d];
    for bi in 0..b {
        for h in 0..m {
            if !mask[bi * m + h] {
                continue;
            }
            let go = &g.data()[(bi * m + h) * k..(bi * m + h + 1) * k];
            if go.iter().all(|x| *x == T::zero()) {
                continue;
            }
            let pass = head_forward(sd, mask, wq.data(), wk.data(), wv.data(), (bi, h), (m, d, k), inv_scale);
            let dattn: Vec<T> = pass.values.iter().map(|v| dot(go, v)).collect();
            let mean: T = pass.weights.iter().zip(&dattn).map(|(&a, &da)| a * da).sum();
            let mut dq = vec![T::zero(); k];
            let range = h * d * k..(h + 1) * d * k;
            for (idx, &j) in pass.active.iter().enumerate() {
                let a = pass.weights[idx];
                let dv: Vec<T> = go.iter().map(|&x| a * x).collect();
                add_outer(&mut gv.data_mut()[range.clone()], state(bi, j), &dv, k);
                let ds = a * (dattn[idx] - mean) * inv_scale;
                for (q, &kv) in dq.iter_mut().zip(&pass.keys[idx]) {
                    *q = *q + ds * kv;
                }
                let dk: Vec<T> = pass.q.iter().map(|&x| ds * x).collect();
                add_outer(&mut gk.data_mut()[range.clone()], state(bi, j), &dk, k);
            }
            add_outer(&mut gq.data_mut()[range], state(bi, h), &dq, k);
        }
    }
    (gq, gk, gv)
}

/// Pad per-sample user-state lists into `[B, M, d]` with an activity mask.
pub fn pack_states<T: Scalar>(
    samples: &[Vec<Vec<T>>],
    max_users: usize,
    state_dim: usize,
) -> Result<(Tensor<T>, Vec<bool>), NnError> {
    let mut data = vec![T::zero(); samples.len() * max_users * state_dim];
    let mut mask = vec![false; samples.len() * max_users];
    for (bi, users) in samples.iter().enumerate() {
        if users.len() > max_users {
            return Err(NnError::Overflow {
                max_users,
                got: users.len(),
            });
        }
        for (j, s) in users.iter().enumerate() {
            if s.len() != state_dim {
                return Err(NnError::Shape {
                    op: "pack_states",
                    detail: format!("user state has {} entries, expected {state_dim}", s.len()),
                });
            }
            let off = (bi * max_users + j) * state_dim;
            data[off..off + state_dim].copy_from_slice(s);
            mask[bi * max_users + j] = true;
        }
    }
    let t = Tensor::from_vec(&[samples.len(), max_users, state_dim], data)?;
    Ok((t, mask))
}

/// Parameters of one set encoder.
#[derive(Debug, Clone, Copy)]
pub struct MhaEncoder {
    pub max_users: usize,
    pub state_dim: usize,
    pub head_dim: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

impl MhaEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        max_users: usize,
        state_dim: usize,
        head_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let bound = 1.0 / (state_dim as f64).sqrt();
        let shape = [max_users, state_dim, head_dim];
        let mut init = |name: &str| store.add_uniform(&format!("{prefix}.{name}"), &shape, bound, rng);
        let wq = init("wq");
        let wk = init("wk");
        let wv = init("wv");
        Self {
            max_users,
            state_dim,
            head_dim,
            wq,
            wk,
            wv,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.max_users * self.head_dim
    }

    /// Encode a batch of user sets into `[B, max_users * head_dim]`.
    pub fn encode<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        samples: &[Vec<Vec<T>>],
    ) -> Result<NodeId, NnError> {
        let (states, mask) = pack_states(samples, self.max_users, self.state_dim)?;
        let wq = graph.param(store, self.wq);
        let wk = graph.param(store, self.wk);
        let wv = graph.param(store, self.wv);
        graph.mha(states, mask, wq, wk, wv)
    }

    /// Forward pass without recording gradients.
    pub fn encode_values<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        samples: &[Vec<Vec<T>>],
    ) -> Result<Tensor<T>, NnError> {
        let (states, mask) = pack_states(samples, self.max_users, self.state_dim)?;
        set_attention_forward(&states, &mask, store.value(self.wq), store.value(self.wk), store.value(self.wv))
    }
}
