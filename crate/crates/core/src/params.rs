//! Named, ordered parameter storage shared by the networks, the optimizer,
//! and the checkpoint codec.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::autodiff::{Graph, Scalar, Var};
use crate::error::{Error, Result};

/// Parameter tensors in a stable insertion order. Order is part of the
/// contract: the optimizer state and the checkpoint layout both index by it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParameters {
    entries: IndexMap<String, ArrayD<f32>>,
}

impl ModelParameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f32>> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f32>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar weights across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(ArrayD::len).sum()
    }

    /// `(name, shape)` listing used to validate checkpoints against a model.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Registers every tensor as a differentiable leaf in `g`, converting to
    /// the graph's float type. Returned handles share this store's order.
    pub fn bind<F: Scalar>(&self, g: &mut Graph<F>) -> BoundParameters {
        let vars = self
            .entries
            .iter()
            .map(|(name, value)| {
                let arr = value.mapv(|v| F::from_f64(v as f64));
                (name.clone(), g.leaf(arr))
            })
            .collect();
        BoundParameters { vars }
    }
}

/// Graph handles for one [`ModelParameters`] store, keyed by name.
#[derive(Clone, Debug)]
pub struct BoundParameters {
    vars: IndexMap<String, Var>,
}

impl BoundParameters {
    /// Handle for `name`; panics if absent, since lookups use compile-time
    /// manifest names and a miss is a construction bug.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Weight initializers. All draw from a caller-owned seeded RNG so model
/// construction is reproducible end to end.
pub mod init {
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Uniform Kaiming fan-in init: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
        assert!(fan_in > 0, "fan_in must be positive");
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let vals: Vec<f32> = (0..n)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), vals).expect("consistent shape")
    }

    /// Convolution kernel `[co, ci, kh, kw]` with fan-in `ci * kh * kw`.
    pub fn conv_kernel(rng: &mut ChaCha8Rng, co: usize, ci: usize, kh: usize, kw: usize) -> ArrayD<f32> {
        kaiming_uniform(rng, &[co, ci, kh, kw], ci * kh * kw)
    }

    /// Dense matrix `[out, inp]` with fan-in `inp`.
    pub fn matrix(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> ArrayD<f32> {
        kaiming_uniform(rng, &[out, inp], inp)
    }

    pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones(shape: &[usize]) -> ArrayD<f32> {
        ArrayD::from_elem(IxDyn(shape), 1.0)
    }
}
