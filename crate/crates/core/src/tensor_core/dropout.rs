use rand::Rng;

use super::error::TensorError;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Inverted-dropout mask: each entry is `1 / keep_prob` with probability
/// `keep_prob`, else 0. The expected value of every entry is 1.
pub fn dropout_mask<T: Scalar>(
    rows: usize,
    cols: usize,
    keep_prob: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<T>, TensorError> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(TensorError::InvalidArgument(format!(
            "keep probability must be in (0, 1], got {keep_prob}"
        )));
    }
    if keep_prob == 1.0 {
        return Ok(Tensor::filled(rows, cols, T::one()));
    }
    let kept = T::lit(1.0 / keep_prob);
    Ok(Tensor::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < keep_prob {
            kept
        } else {
            T::zero()
        }
    }))
}
