//! Timing protocol: untimed warmup runs, then timed runs summarized by mean
//! and standard deviation.

use std::time::{Duration, Instant};

use regseg_core::graph::{build_d_block, build_y_block, init_weights, BlockSpec, BoundModel, ExecOptions};
use regseg_core::{Dilations, Result, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    /// Seconds per measured iteration.
    pub samples: Vec<f64>,
}

impl Timing {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Sample standard deviation; 0 for a single sample.
    pub fn stddev(&self) -> f64 {
        let n = self.samples.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Calls `f` `warmup` times untimed, then `iters` times under a monotonic
/// clock.
pub fn measure(warmup: usize, iters: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(Timing { samples })
}

/// Block width, group width and input shape of the block comparison.
pub const BLOCK_WIDTH: usize = 256;
pub const BLOCK_GROUP_WIDTH: usize = 16;
pub const BLOCK_INPUT: Shape = Shape::new(1, 256, 64, 128);

#[derive(Clone, Debug)]
pub struct BlockRow {
    pub name: String,
    pub timing: Timing,
}

/// The four blocks compared: Y, D(1,1), D(1,4), D(1,10).
pub fn comparison_blocks() -> Result<Vec<(String, regseg_core::ModelGraph)>> {
    let w = BLOCK_WIDTH;
    let mut out = vec![("Y block".to_string(), build_y_block(w, w, 1, BLOCK_GROUP_WIDTH)?)];
    for rates in [[1, 1], [1, 4], [1, 10]] {
        let d = Dilations::new(rates.to_vec())?;
        let g = build_d_block(&BlockSpec::new(w, w, 1, d.clone(), BLOCK_GROUP_WIDTH))?;
        out.push((format!("D block{d}"), g));
    }
    Ok(out)
}

pub fn block_comparison(warmup: usize, iters: usize, seed: u64) -> Result<Vec<BlockRow>> {
    let input = Tensor::full(BLOCK_INPUT, 0.5f32)?;
    comparison_blocks()?
        .into_iter()
        .map(|(name, g)| {
            let m = BoundModel::bind(&g, &init_weights(&g, seed), ExecOptions::default())?;
            let timing = measure(warmup, iters, || m.forward(&input).map(drop))?;
            Ok(BlockRow { name, timing })
        })
        .collect()
}

/// Full-model timing with per-block means.
#[derive(Clone, Debug)]
pub struct ModelTiming {
    pub total: Timing,
    pub blocks: Vec<(String, Duration)>,
}

pub fn model_timing(model: &BoundModel<f32>, input: &Tensor<f32>, warmup: usize, iters: usize) -> Result<ModelTiming> {
    let mut sums: Vec<(String, Duration)> = Vec::new();
    let mut measured = 0usize;
    let mut calls = 0usize;
    let total = measure(warmup, iters, || {
        let (_, profile) = model.forward_profiled(input)?;
        calls += 1;
        if calls > warmup {
            measured += 1;
            for (k, d) in profile.by_block() {
                match sums.iter_mut().find(|(n, _)| *n == k) {
                    Some((_, t)) => *t += d,
                    None => sums.push((k, d)),
                }
            }
        }
        Ok(())
    })?;
    let blocks = sums.into_iter().map(|(k, d)| (k, d / measured.max(1) as u32)).collect();
    Ok(ModelTiming { total, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_calls() {
        let mut n = 0;
        let t = measure(10, 100, || {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 110);
        assert_eq!(t.samples.len(), 100);
    }

    #[test]
    fn stats() {
        let t = Timing {
            samples: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(t.mean(), 2.5);
        assert!((t.stddev() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn four_blocks() {
        let names: Vec<String> = comparison_blocks().unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["Y block", "D block(1,1)", "D block(1,4)", "D block(1,10)"]);
    }
}
