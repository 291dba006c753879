//! Small dense networks with reverse-mode gradients.

mod adam;
mod attention;
mod gaussian;
mod graph;
mod layers;
mod tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use adam::Adam;
pub use attention::{pack_states, scaled_dot_attention, set_attention_forward, MhaEncoder};
pub use gaussian::{GaussianPolicy, SquashedSample};
pub use graph::{Graph, NodeId};
pub use layers::{Linear, Mlp};
pub use tensor::{matmul, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{got} users exceed the encoder capacity of {max_users}")]
    Overflow { max_users: usize, got: usize },
    #[error("parameter `{name}`: {detail}")]
    ParamMismatch { name: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Serialized form of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named parameter tensors and their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_owned());
        ParamId(self.values.len() - 1)
    }

    /// Parameter drawn from `U(-bound, bound)`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        self.add(name, Tensor::from_vec(shape, data).expect("shape product"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn grad_norm(&self) -> T {
        self.grads.iter().map(Tensor::norm_sq).sum::<T>().sqrt()
    }

    /// Rescale all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            let s = max_norm / norm;
            for g in &mut self.grads {
                *g = g.map(|x| x * s);
            }
        }
        norm
    }

    pub fn entries(&self) -> Vec<ParamEntry> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| ParamEntry {
                name: name.clone(),
                shape: v.shape().to_vec(),
                values: v.data().iter().map(|x| x.as_f64()).collect(),
            })
            .collect()
    }

    /// Overwrite values from serialized entries; names and shapes must match exactly.
    pub fn load_entries(&mut self, entries: &[ParamEntry]) -> Result<(), NnError> {
        if entries.len() != self.values.len() {
            return Err(NnError::ParamMismatch {
                name: "*".into(),
                detail: format!("expected {} tensors, found {}", self.values.len(), entries.len()),
            });
        }
        for (i, e) in entries.iter().enumerate() {
            if e.name != self.names[i] {
                return Err(NnError::ParamMismatch {
                    name: e.name.clone(),
                    detail: format!("expected `{}` at position {i}", self.names[i]),
                });
            }
            if e.shape != self.values[i].shape() {
                return Err(NnError::ParamMismatch {
                    name: e.name.clone(),
                    detail: format!("shape {:?} vs {:?}", e.shape, self.values[i].shape()),
                });
            }
            let data = e.values.iter().map(|&x| T::lit(x)).collect();
            self.values[i] = Tensor::from_vec(&e.shape, data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entries_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f64>::new();
        a.add_uniform("w", &[3, 2], 0.5, &mut rng);
        a.add_uniform("b", &[2], 0.5, &mut rng);
        let mut b = ParamStore::<f64>::new();
        b.add("w", Tensor::zeros(&[3, 2]));
        b.add("b", Tensor::zeros(&[2]));
        b.load_entries(&a.entries()).unwrap();
        for id in a.ids() {
            assert_eq!(a.value(id), b.value(id));
        }
        let mut c = ParamStore::<f64>::new();
        c.add("w", Tensor::zeros(&[2, 3]));
        c.add("b", Tensor::zeros(&[2]));
        assert!(c.load_entries(&a.entries()).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(&[2]));
        s.grad_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
        assert_eq!(s.clip_grad_norm(10.0), 1.0);
    }
}
