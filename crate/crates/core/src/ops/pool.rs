use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Output extent of [`avgpool2x2`]: partial windows at odd borders are kept.
pub fn avgpool2x2_extent(input: usize) -> usize {
    input.div_ceil(2)
}

/// 2x2 average pooling with stride 2. A window hanging over an odd border
/// averages only the cells that exist.
pub fn avgpool2x2<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let (oh, ow) = (avgpool2x2_extent(s.h), avgpool2x2_extent(s.w));
    let mut out = Tensor::zeroed_unchecked(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..oh {
                let rows = (2 * oy)..(2 * oy + 2).min(s.h);
                for ox in 0..ow {
                    let cols = (2 * ox)..(2 * ox + 2).min(s.w);
                    let mut sum = T::zero();
                    let mut count = 0usize;
                    for y in rows.clone() {
                        for x in cols.clone() {
                            sum = sum + src[y * s.w + x];
                            count += 1;
                        }
                    }
                    dst[oy * ow + ox] = sum / T::from_usize(count).unwrap();
                }
            }
        }
    }
    out
}

/// Per-channel spatial mean, shape `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let mut out = Tensor::zeroed_unchecked(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let sum: f64 = input.plane(n, c).iter().map(|v| v.to_f64_lossy()).sum();
            out.set(n, c, 0, 0, T::from_f64_lossy(sum / s.plane() as f64));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_halves() {
        let t = Tensor::full([1, 2, 4, 6], 3.5f32).unwrap();
        let p = avgpool2x2(&t);
        assert_eq!(p.shape(), Shape::new(1, 2, 2, 3));
        assert!(p.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn two_by_two_arithmetic() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 5.0]).unwrap();
        assert_eq!(avgpool2x2(&t).data(), &[2.75]);
    }

    #[test]
    fn odd_border_averages_valid_cells() {
        let t = Tensor::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let p = avgpool2x2(&t);
        assert_eq!(p.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(p.data(), &[3.0, 4.5, 7.5, 9.0]);
    }

    #[test]
    fn random_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..64 * 128).map(|_| rng.random_range(-10.0..10.0)).collect();
        let t = Tensor::from_vec([1, 1, 64, 128], data).unwrap();
        let p = avgpool2x2(&t);
        for y in 0..32 {
            for x in 0..64 {
                let want = (t.get(0, 0, 2 * y, 2 * x) as f64
                    + t.get(0, 0, 2 * y, 2 * x + 1) as f64
                    + t.get(0, 0, 2 * y + 1, 2 * x) as f64
                    + t.get(0, 0, 2 * y + 1, 2 * x + 1) as f64)
                    / 4.0;
                assert!((p.get(0, 0, y, x) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn global_pool_cases() {
        let mut t = Tensor::<f32>::zeros([1, 2, 3, 3]).unwrap();
        assert!(global_avg_pool(&t).data().iter().all(|&v| v == 0.0));
        t.plane_mut(0, 0).fill(4.0);
        t.plane_mut(0, 1).fill(-1.5);
        assert_eq!(global_avg_pool(&t).data(), &[4.0, -1.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..2 * 3 * 5 * 7).map(|_| rng.random_range(-10.0..10.0)).collect();
        let r = Tensor::from_vec([2, 3, 5, 7], data).unwrap();
        let g = global_avg_pool(&r);
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0f64;
                for y in 0..5 {
                    for x in 0..7 {
                        s += r.get(n, c, y, x) as f64;
                    }
                }
                assert!((g.get(n, c, 0, 0) as f64 - s / 35.0).abs() < 1e-5);
            }
        }
    }
}
