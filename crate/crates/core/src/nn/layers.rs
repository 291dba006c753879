use rand::Rng;

use super::graph::{Graph, NodeId};
use super::tensor::{matmul, Tensor};
use super::{NnError, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform init with bound `gain / sqrt(fan_in)`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = gain / (fan_in as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), &[fan_in, fan_out], bound, rng);
        let b = store.add_uniform(&format!("{name}.b"), &[fan_out], bound, rng);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId, NnError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn forward_values<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut y = matmul(x, store.value(self.w))?;
        let (n, m) = y.dims2();
        let b = store.value(self.b).data().to_vec();
        for i in 0..n {
            for (v, &bv) in y.data_mut()[i * m..(i + 1) * m].iter_mut().zip(&b) {
                *v = *v + bv;
            }
        }
        Ok(y)
    }
}

/// Tanh multilayer perceptron with a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `out_gain` scales the last layer init; small values keep initial outputs near zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = input;
        for i in 0..hidden_layers {
            layers.push(Linear::new(store, &format!("{name}.l{i}"), fan_in, hidden, 1.0, rng));
            fan_in = hidden;
        }
        layers.push(Linear::new(store, &format!("{name}.out"), fan_in, output, out_gain, rng));
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId, NnError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn forward_values<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_values(store, &h)?;
            if i < last {
                h = h.map(T::tanh);
            }
        }
        Ok(h)
    }
}
