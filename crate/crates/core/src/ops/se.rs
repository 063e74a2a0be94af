//! Squeeze-and-excitation channel gate.

use super::elementwise::sigmoid_scalar;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Channel reduction used by the gate's bottleneck.
pub const SE_RATIO: f64 = 0.25;

/// Bottleneck width for a block whose input has `w_in` channels:
/// `round(w_in / 4)`, at least 8.
pub fn se_width(w_in: usize) -> usize {
    ((w_in as f64 * SE_RATIO).round() as usize).max(8)
}

/// `x * sigmoid(w2 . relu(w1 . gap(x) + b1) + b2)`, gated per channel.
///
/// `w1` has shape `(r, c, 1, 1)` and `w2` shape `(c, r, 1, 1)`; both act as
/// matrices on the pooled channel vector.
pub fn se_block<T: Scalar>(input: &Tensor<T>, w1: &Tensor<T>, b1: &[T], w2: &Tensor<T>, b2: &[T]) -> Result<Tensor<T>> {
    let s = input.shape();
    let r = w1.shape().n;
    if w1.shape() != Shape::new(r, s.c, 1, 1)
        || w2.shape() != Shape::new(s.c, r, 1, 1)
        || b1.len() != r
        || b2.len() != s.c
    {
        return Err(Error::Shape(format!(
            "SE parameters w1 {} w2 {} b1 {} b2 {} do not fit {} channels",
            w1.shape(),
            w2.shape(),
            b1.len(),
            b2.len(),
            s.c
        )));
    }
    let pooled = super::pool::global_avg_pool(input);
    let mut out = input.clone();
    let mut hidden = vec![T::zero(); r];
    for n in 0..s.n {
        let v = &pooled.data()[n * s.c..(n + 1) * s.c];
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &w1.data()[j * s.c..(j + 1) * s.c];
            let z = row.iter().zip(v).fold(b1[j], |acc, (&a, &b)| acc + a * b);
            *h = z.max(T::zero());
        }
        for c in 0..s.c {
            let row = &w2.data()[c * r..(c + 1) * r];
            let z = row.iter().zip(&hidden).fold(b2[c], |acc, (&a, &b)| acc + a * b);
            let gate = sigmoid_scalar(z);
            out.plane_mut(n, c).iter_mut().for_each(|x| *x = *x * gate);
        }
    }
    Ok(out)
}
