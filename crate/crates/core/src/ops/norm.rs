//! Inference-mode batch normalization and its folding into convolutions.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel statistics and affine parameters of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub mean: &'a [T],
    pub var: &'a [T],
    pub eps: T,
}

impl<T: Scalar> BatchNormParams<'_, T> {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, c: usize) -> Result<()> {
        let lens = [self.gamma.len(), self.beta.len(), self.mean.len(), self.var.len()];
        if lens.iter().any(|&l| l != c) {
            return Err(Error::Shape(format!(
                "batch-norm parameter lengths {lens:?} do not match {c} channels"
            )));
        }
        Ok(())
    }

    /// `gamma / sqrt(var + eps)` per channel.
    pub fn scales(&self) -> Vec<T> {
        self.gamma
            .iter()
            .zip(self.var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect()
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per element.
pub fn batchnorm_infer<T: Scalar>(input: &Tensor<T>, bn: &BatchNormParams<'_, T>) -> Result<Tensor<T>> {
    let s = input.shape();
    bn.check(s.c)?;
    let denom: Vec<T> = bn.var.iter().map(|&v| (v + bn.eps).sqrt()).collect();
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (g, b, m, d) = (bn.gamma[c], bn.beta[c], bn.mean[c], denom[c]);
            out.plane_mut(n, c).iter_mut().for_each(|x| *x = g * (*x - m) / d + b);
        }
    }
    Ok(out)
}

/// Folds a following batch norm into convolution weights and bias.
///
/// Weights have output channels on the leading extent. Returns the scaled
/// weights and the combined bias.
pub fn fold_batchnorm<T: Scalar>(
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    bn: &BatchNormParams<'_, T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let out_c = weights.shape().n;
    bn.check(out_c)?;
    if bias.is_some_and(|b| b.len() != out_c) {
        return Err(Error::Shape("bias length does not match output channels".into()));
    }
    let scales = bn.scales();
    let row = weights.len() / out_c;
    let mut folded = weights.clone();
    for (o, chunk) in folded.data_mut().chunks_mut(row).enumerate() {
        chunk.iter_mut().for_each(|w| *w = *w * scales[o]);
    }
    let new_bias = (0..out_c)
        .map(|o| {
            let b = bias.map_or(T::zero(), |b| b[o]);
            bn.beta[o] + (b - bn.mean[o]) * scales[o]
        })
        .collect();
    Ok((folded, new_bias))
}
