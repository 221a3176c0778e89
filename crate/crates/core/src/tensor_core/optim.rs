use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Adagrad with elementwise gradient clipping.
///
/// Each gradient component is clipped into `clip` before it is squared into
/// the accumulator; the update is `lr * g / (sqrt(acc) + eps)`.
#[derive(Clone, Debug)]
pub struct Adagrad<T> {
    pub lr: T,
    pub eps: T,
    pub clip: (T, T),
    accum: Vec<Tensor<T>>,
}

impl<T: Scalar> Adagrad<T> {
    pub fn new(store: &ParamStore<T>, lr: T, eps: T, clip: (T, T), initial_accumulator: T) -> Self {
        let accum = store
            .entries()
            .iter()
            .map(|e| Tensor::filled(e.value.rows(), e.value.cols(), initial_accumulator))
            .collect();
        Self { lr, eps, clip, accum }
    }

    pub fn accumulators(&self) -> &[Tensor<T>] {
        &self.accum
    }

    pub(crate) fn set_accumulators(&mut self, accum: Vec<Tensor<T>>) {
        self.accum = accum;
    }

    /// Applies one update from the gradients stored in `store`, then zeroes
    /// them. Returns the global gradient norm measured before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> T {
        let norm = store.grad_norm();
        let (lo, hi) = self.clip;
        for (entry, acc) in store.entries_mut().iter_mut().zip(&mut self.accum) {
            let values = entry.value.data_mut();
            let grads = entry.grad.data_mut();
            for ((p, g), a) in values.iter_mut().zip(grads.iter_mut()).zip(acc.data_mut()) {
                let gc = g.max(lo).min(hi);
                *g = T::zero();
                if gc == T::zero() {
                    continue;
                }
                *a += gc * gc;
                *p -= self.lr * gc / (a.sqrt() + self.eps);
            }
        }
        norm
    }
}
