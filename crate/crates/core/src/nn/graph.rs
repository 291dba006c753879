//! Tape-based reverse-mode differentiation over small dense tensors.

use super::attention;
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::{NnError, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Min(NodeId, NodeId),
    Clamp(NodeId, T, T),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    BroadcastRows(NodeId),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    Mha {
        states: Tensor<T>,
        mask: Vec<bool>,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward computation so gradients of a scalar output can be
/// propagated back to every input and parameter node.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("shapes checked")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `[n,m] + [m]` broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let (n, m) = self.value(a).dims2();
        let b = self.value(bias);
        if b.len() != m {
            return Err(NnError::Shape {
                op: "add_bias",
                detail: format!("{:?} + {:?}", self.value(a).shape(), b.shape()),
            });
        }
        let mut v = self.value(a).clone();
        let bd = b.data().to_vec();
        for i in 0..n {
            for (x, &y) in v.data_mut()[i * m..(i + 1) * m].iter_mut().zip(&bd) {
                *x = *x + y;
            }
        }
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        same_shape("min", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| if x <= y { x } else { y });
        Ok(self.push(v, Op::Min(a, b)))
    }

    /// Clamp to `[lo, hi]`; gradient flows only where the input is strictly inside.
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::count(t.len().max(1)));
        self.push(v, Op::MeanAll(a))
    }

    /// `[n,m] -> [n]` row sums.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (n, _) = t.dims2();
        let data = (0..n).map(|i| t.row(i).iter().copied().sum()).collect();
        let v = Tensor::from_vec(&[n], data).expect("rank 1");
        self.push(v, Op::SumCols(a))
    }

    /// `[m] -> [n,m]` by repeating rows.
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let t = self.value(a);
        let m = t.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(&[n, m], data).expect("broadcast");
        self.push(v, Op::BroadcastRows(a))
    }

    /// Concatenate `[n, m_i]` blocks along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let n = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        if parts.iter().any(|&p| self.value(p).dims2().0 != n) {
            return Err(NnError::Shape {
                op: "concat_cols",
                detail: "row counts differ".into(),
            });
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::from_vec(&[n, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId, NnError> {
        let t = self.value(a);
        let (n, m) = t.dims2();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NnError::Shape {
                op: "gather_rows",
                detail: format!("row {bad} of {n}"),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let v = Tensor::from_vec(&[rows.len(), m], data)?;
        Ok(self.push(v, Op::GatherRows(a, rows.to_vec())))
    }

    /// Per-slot set attention over padded user states `[B, M, d]`.
    /// Weights `wq`, `wk`, `wv` have shape `[M, d, k]`; the output is `[B, M*k]`.
    pub fn mha(
        &mut self,
        states: Tensor<T>,
        mask: Vec<bool>,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
    ) -> Result<NodeId, NnError> {
        let v = attention::set_attention_forward(&states, &mask, self.value(wq), self.value(wk), self.value(wv))?;
        Ok(self.push(
            v,
            Op::Mha {
                states,
                mask,
                wq,
                wk,
                wv,
            },
        ))
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Backpropagate from a single-element node.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&g, self.value(b));
                    let gb = matmul_tn(self.value(a), &g);
                    let ga = ga.reshape(self.value(a).shape())?;
                    let gb = gb.reshape(self.value(b).shape())?;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::AddBias(a, bias) => {
                    let (n, m) = g.dims2();
                    let mut gb = vec![T::zero(); m];
                    for i in 0..n {
                        for (acc, &x) in gb.iter_mut().zip(g.row(i)) {
                            *acc = *acc + x;
                        }
                    }
                    let gb = Tensor::from_vec(self.value(bias).shape(), gb)?;
                    self.accumulate(bias, gb);
                    self.accumulate(a, g);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(b, g.map(|x| -x));
                    self.accumulate(a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(b), |x, y| x * y);
                    let gb = zip_map(&g, self.value(a), |x, y| x * y);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Scale(a, c) => self.accumulate(a, g.map(|x| x * c)),
                Op::AddScalar(a) => self.accumulate(a, g),
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = zip_map(&g, y, |x, t| x * (T::one() - t * t));
                    self.accumulate(a, ga);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[idx].value;
                    let ga = zip_map(&g, y, |x, e| x * e);
                    self.accumulate(a, ga);
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    let ga = zip_map(&g, self.value(a), |x, v| two * x * v);
                    self.accumulate(a, ga);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let pick_a: Vec<bool> = va.data().iter().zip(vb.data()).map(|(x, y)| x <= y).collect();
                    let ga = Tensor::from_vec(
                        g.shape(),
                        g.data().iter().zip(&pick_a).map(|(&x, &p)| if p { x } else { T::zero() }).collect(),
                    )?;
                    let gb = Tensor::from_vec(
                        g.shape(),
                        g.data().iter().zip(&pick_a).map(|(&x, &p)| if p { T::zero() } else { x }).collect(),
                    )?;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = zip_map(&g, self.value(a), |x, v| if v > lo && v < hi { x } else { T::zero() });
                    self.accumulate(a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Tensor::full(self.value(a).shape(), g.data()[0]);
                    self.accumulate(a, ga);
                }
                Op::MeanAll(a) => {
                    let n = T::count(self.value(a).len().max(1));
                    let ga = Tensor::full(self.value(a).shape(), g.data()[0] / n);
                    self.accumulate(a, ga);
                }
                Op::SumCols(a) => {
                    let (n, m) = self.value(a).dims2();
                    let mut data = Vec::with_capacity(n * m);
                    for i in 0..n {
                        data.extend(std::iter::repeat_n(g.data()[i], m));
                    }
                    let ga = Tensor::from_vec(self.value(a).shape(), data)?;
                    self.accumulate(a, ga);
                }
                Op::BroadcastRows(a) => {
                    let (n, m) = g.dims2();
                    let mut acc = vec![T::zero(); m];
                    for i in 0..n {
                        for (s, &x) in acc.iter_mut().zip(g.row(i)) {
                            *s = *s + x;
                        }
                    }
                    let ga = Tensor::from_vec(self.value(a).shape(), acc)?;
                    self.accumulate(a, ga);
                }
                Op::ConcatCols(parts) => {
                    let (n, total) = g.dims2();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(p).dims2().1;
                        let mut data = Vec::with_capacity(n * w);
                        for i in 0..n {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        let gp = Tensor::from_vec(self.value(p).shape(), data)?;
                        self.accumulate(p, gp);
                    }
                }
                Op::GatherRows(a, rows) => {
                    let (_, m) = g.dims2();
                    let mut ga = Tensor::zeros(self.value(a).shape());
                    for (k, &r) in rows.iter().enumerate() {
                        let dst = &mut ga.data_mut()[r * m..(r + 1) * m];
                        for (d, &x) in dst.iter_mut().zip(g.row(k)) {
                            *d = *d + x;
                        }
                    }
                    self.accumulate(a, ga);
                }
                Op::Mha {
                    states,
                    mask,
                    wq,
                    wk,
                    wv,
                } => {
                    let (gq, gk, gv) = attention::set_attention_backward(
                        &states,
                        &mask,
                        self.value(wq),
                        self.value(wk),
                        self.value(wv),
                        &g,
                    );
                    self.accumulate(wq, gq);
                    self.accumulate(wk, gk);
                    self.accumulate(wv, gv);
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Add parameter gradients of the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.grad_mut(*id).add_assign(g);
            }
        }
    }
}
