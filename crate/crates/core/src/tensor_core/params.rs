use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::error::TensorError;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named collection of trainable tensors with a shape registry.
///
/// Registration order is stable and defines checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, TensorError> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::InvalidArgument(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Registers a tensor drawn from a zero-mean Gaussian truncated at two
    /// standard deviations.
    pub fn register_gaussian(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId, TensorError> {
        let value = truncated_normal(rows, cols, std, rng);
        self.register(name, value)
    }

    pub fn register_zeros(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<ParamId, TensorError> {
        self.register(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    /// `(name, shape)` pairs in registration order.
    pub fn shape_registry(&self) -> Vec<(String, [usize; 2])> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.shape()))
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Adds `scale * grads` into the stored gradient accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<T>, scale: T) {
        for (entry, g) in self.entries.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, &b) in entry.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    /// Global L2 norm of the stored gradients.
    pub fn grad_norm(&self) -> T {
        self.entries
            .iter()
            .map(|e| e.grad.sq_norm())
            .sum::<T>()
            .sqrt()
    }

    /// Copies into another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
///
/// Parameters the loss does not reach hold `None`, which reads as zero.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    /// Gradient for `id`, materialising zeros for unreachable parameters.
    pub fn get(&self, id: ParamId, store: &ParamStore<T>) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = store.value(id).shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn is_reached(&self, id: ParamId) -> bool {
        self.grads[id.0].is_some()
    }
}

/// Gaussian sample truncated at `±2 std` by rejection.
pub fn truncated_normal<T: Scalar>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let normal = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("valid std");
    Tensor::from_fn(rows, cols, |_, _| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::lit(v);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.register_zeros("a", 1, 2).unwrap();
        assert!(s.register_zeros("a", 1, 2).is_err());
    }

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = truncated_normal(50, 40, 0.1, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.2));
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 0.01);
    }
}
