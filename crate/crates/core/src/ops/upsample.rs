//! Bilinear resampling with half-pixel centers.
//!
//! Destination pixel `d` samples source coordinate `(d + 0.5) * in / out - 0.5`,
//! clamped to the valid range. This is the `align_corners = false` convention
//! of common training frameworks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Source index pair and blend weight for every destination coordinate.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Resizes every plane to `out_h x out_w`.
pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Value("bilinear target extents must be >= 1".into()));
    }
    let s = input.shape();
    let ys = taps(s.h, out_h);
    let xs: Vec<(usize, usize, T)> = taps(s.w, out_w)
        .into_iter()
        .map(|(a, b, t)| (a, b, T::from_f64_lossy(t)))
        .collect();
    let mut out = Tensor::zeroed_unchecked(Shape::new(s.n, s.c, out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                let ty = T::from_f64_lossy(ty);
                let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                let row = &mut dst[oy * out_w..(oy + 1) * out_w];
                for (v, &(x0, x1, tx)) in row.iter_mut().zip(&xs) {
                    let top = r0[x0] + (r0[x1] - r0[x0]) * tx;
                    let bottom = r1[x0] + (r1[x1] - r1[x0]) * tx;
                    *v = top + (bottom - top) * ty;
                }
            }
        }
    }
    Ok(out)
}

/// Upsamples by an integer factor in both spatial extents.
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::Value("upsample factor must be >= 1".into()));
    }
    let s = input.shape();
    bilinear_resize(input, s.h * factor, s.w * factor)
}
