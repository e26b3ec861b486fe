//! Named parameter storage shared by the network modules and the optimizer.
//!
//! Layers register their tensors once at construction and keep [`ParamId`]
//! handles; each training step watches the live values onto a fresh tape,
//! and the optimizer routes gradients back through the id → node mapping the
//! tape collected.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::{trunc_normal, uniform, SeedRng};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Puts the parameter on the tape as a gradient-requiring leaf; in
    /// frozen (inference) mode the value passes through untracked and the
    /// tape records nothing.
    pub fn watch(&self, tape: &mut Tape, id: ParamId) -> Tensor {
        if self.frozen {
            return self.values[id.0].clone();
        }
        tape.watch_param(id.0, &self.values[id.0])
    }

    /// Freezes or unfreezes the store for inference-only forwards.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Replaces a stored value, keeping the shape contract.
    pub fn load(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))?;
        let shape = self.values[id.0].shape().to_vec();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "parameter '{name}' expects shape {shape:?}, got {} values",
                data.len()
            )));
        }
        self.values[id.0] = Tensor::new(shape, data)?;
        Ok(())
    }
}

/// Truncated normal init (std, clipped at two sigma) for transformer weights.
pub fn init_trunc_normal(shape: Vec<usize>, std: f64, rng: &mut SeedRng) -> Tensor {
    Tensor::from_fn(shape, |_| trunc_normal(rng, std))
}

/// Fan-in uniform init for convolution kernels.
pub fn init_conv(shape: Vec<usize>, rng: &mut SeedRng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| uniform(rng, -bound, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn register_watch_and_route_gradients() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(store.lookup("w"), Some(id));

        let mut tape = Tape::new();
        let w = store.watch(&mut tape, id);
        let sq = tape.mul(&w, &w).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let (slot, node) = tape.param_nodes()[0];
        assert_eq!(slot, id.0);
        assert_eq!(grads.node(node).unwrap(), &[6.0, 8.0]);
    }

    #[test]
    fn load_validates_shape() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(vec![2, 2]));
        assert!(store.load("w", vec![1.0; 4]).is_ok());
        assert!(store.load("w", vec![1.0; 3]).is_err());
        assert!(store.load("nope", vec![]).is_err());
    }

    #[test]
    fn init_shapes() {
        let mut rng = rng_from_seed(0);
        let t = init_trunc_normal(vec![5, 5], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-12));
        let c = init_conv(vec![4, 2, 3, 3], &mut rng);
        assert!(c.data().iter().all(|v| v.abs() <= (1.0f64 / 18.0).sqrt()));
    }
}
