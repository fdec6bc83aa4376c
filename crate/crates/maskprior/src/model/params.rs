//! Named parameter and buffer storage.
//!
//! Parameters are trainable tensors; buffers (batch-norm running statistics)
//! are updated outside the gradient path. Both maps are ordered, so every
//! iteration — initialization, clipping, the optimizer update, checkpoint
//! serialization — visits tensors in the same deterministic order.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamStore<S: Scalar> {
    params: BTreeMap<String, Tensor<S>>,
    buffers: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert_param(&mut self, name: &str, t: Tensor<S>) {
        assert!(
            self.params.insert(name.to_string(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn insert_buffer(&mut self, name: &str, t: Tensor<S>) {
        assert!(
            self.buffers.insert(name.to_string(), t).is_none(),
            "duplicate buffer {name}"
        );
    }

    pub fn param(&self, name: &str) -> &Tensor<S> {
        self.params.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.params.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor<S> {
        self.buffers.get(name).unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.buffers.get_mut(name).unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Trainable parameters in deterministic (lexicographic) order.
    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.params.iter_mut()
    }

    /// Non-trainable buffers in deterministic order.
    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.data().len()).sum()
    }
}

/// Kaiming-uniform fan-in initialization for a conv/linear weight: values
/// drawn from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, rng, -limit, limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_orders_and_counts() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.insert_param("b.w", Tensor::zeros(&[2]));
        s.insert_param("a.w", Tensor::zeros(&[3]));
        s.insert_buffer("z.rm", Tensor::zeros(&[1]));
        let names: Vec<&String> = s.params().map(|(n, _)| n).collect();
        assert_eq!(names, ["a.w", "b.w"]);
        assert_eq!(s.num_scalars(), 5);
        assert!(s.has_param("a.w") && !s.has_param("z.rm"));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_param_panics() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.insert_param("w", Tensor::zeros(&[1]));
        s.insert_param("w", Tensor::zeros(&[1]));
    }

    #[test]
    fn kaiming_bounds_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = kaiming_uniform::<f64>(&mut rng, &[8, 8], 24);
        let limit = (6.0f64 / 24.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        // Not degenerate.
        assert!(t.data().iter().any(|v| v.abs() > limit / 10.0));
    }
}
