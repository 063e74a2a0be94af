//! Named parameter maps and deterministic random initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelGraph;
use crate::ops::norm::DEFAULT_EPS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter slot name to tensor.
pub type WeightMap<T = f32> = BTreeMap<String, Tensor<T>>;

/// Random weights for every slot of `graph`, reproducible from `seed`.
///
/// Convolution and SE weights are uniform with variance `1/fan_in`; batch-norm
/// statistics are drawn near the identity so deep stacks stay well scaled.
pub fn init_weights<T: Scalar>(graph: &ModelGraph, seed: u64) -> WeightMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = WeightMap::new();
    for slot in graph.param_slots() {
        let n = slot.shape.numel();
        let suffix = slot.name.rsplit('.').next().unwrap_or("");
        let mut draw =
            |lo: f64, hi: f64| -> Vec<T> { (0..n).map(|_| T::from_f64_lossy(rng.random_range(lo..hi))).collect() };
        let data = match suffix {
            "w" => {
                let fan_in = slot.shape.c * slot.shape.h * slot.shape.w;
                let a = (3.0 / fan_in as f64).sqrt();
                draw(-a, a)
            }
            "b" | "beta" | "mean" => draw(-0.1, 0.1),
            "gamma" => draw(0.5, 1.0),
            "var" => draw(0.5, 1.5),
            "eps" => vec![T::from_f64_lossy(DEFAULT_EPS); n],
            other => unreachable!("unknown slot suffix '{other}'"),
        };
        out.insert(slot.name, Tensor::from_vec(slot.shape, data).expect("slot shape"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_y_block;

    #[test]
    fn covers_every_slot_and_is_reproducible() {
        let g = build_y_block(32, 64, 2, 16).unwrap();
        let a = init_weights::<f32>(&g, 11);
        let b = init_weights::<f32>(&g, 11);
        let c = init_weights::<f32>(&g, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for slot in g.param_slots() {
            assert_eq!(a[&slot.name].shape(), slot.shape);
        }
        assert!(a["block.conv1.bn.var"].data().iter().all(|&v| v > 0.0));
    }
}
