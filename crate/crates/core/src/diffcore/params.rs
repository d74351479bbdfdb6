//! Trainable parameters and their storage.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name, value, grad }
    }
}

/// Owning container for all parameters of a model. Gradients are written
/// into it by [`Tape::backward`](super::tape::Tape::backward) and consumed by
/// the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Register a 2-D parameter drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape/data"))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Accumulate `g` into the gradient of `id`.
    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != g.shape() {
            return Err(Error::dim("accumulate_grad", p.grad.shape(), g.shape()));
        }
        p.grad.add_assign(g);
        Ok(())
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let id = store.add_uniform("w", &[4, 16], 16, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(store.value(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn grads_start_zero_and_accumulate() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(&[1.0, 2.0]));
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
        store
            .accumulate_grad(id, &Tensor::vector(&[0.5, 0.5]))
            .unwrap();
        store
            .accumulate_grad(id, &Tensor::vector(&[0.25, 0.0]))
            .unwrap();
        assert_eq!(store.grad(id).data(), &[0.75, 0.5]);
        store.zero_grads();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lookup_by_name() {
        let mut store = ParamStore::new();
        let id = store.add("fusion.w", Tensor::scalar(0.0));
        assert_eq!(store.by_name("fusion.w"), Some(id));
        assert_eq!(store.by_name("missing"), None);
    }
}
