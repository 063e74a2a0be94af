//! Weight binding and topological execution.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::{LayerKind, ModelGraph, WeightMap};
use crate::error::{Error, Result};
use crate::ops::{
    self, avgpool2x2, batchnorm_infer, bilinear_upsample, branch_specs, conv2d_fast, fold_batchnorm,
    multi_dilation_group_conv, se_block, BatchNormParams, ConvSpec,
};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecOptions {
    /// Fold each batch norm into the convolution feeding it.
    pub fold_batchnorm: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { fold_batchnorm: true }
    }
}

#[derive(Clone, Debug)]
struct BnOwned<T> {
    gamma: Vec<T>,
    beta: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
    eps: T,
}

impl<T: Scalar> BnOwned<T> {
    fn params(&self) -> BatchNormParams<'_, T> {
        BatchNormParams {
            gamma: &self.gamma,
            beta: &self.beta,
            mean: &self.mean,
            var: &self.var,
            eps: self.eps,
        }
    }

    fn channels(&self, lo: usize, hi: usize) -> Self {
        BnOwned {
            gamma: self.gamma[lo..hi].to_vec(),
            beta: self.beta[lo..hi].to_vec(),
            mean: self.mean[lo..hi].to_vec(),
            var: self.var[lo..hi].to_vec(),
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Conv {
        spec: ConvSpec,
        weight: Tensor<T>,
        bias: Option<Vec<T>>,
    },
    Branches {
        spec: ConvSpec,
        dilations: Vec<usize>,
        weights: Vec<Tensor<T>>,
        bias: Option<Vec<Vec<T>>>,
    },
    BatchNorm(BnOwned<T>),
    /// A batch norm already folded into its producer.
    Identity,
    Relu,
    Se {
        w1: Tensor<T>,
        b1: Vec<T>,
        w2: Tensor<T>,
        b2: Vec<T>,
    },
    Pool,
    Upsample(usize),
    Add,
    Concat,
}

/// Per-node wall-clock times of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Profile {
    pub nodes: Vec<(String, Duration)>,
}

impl Profile {
    pub fn total(&self) -> Duration {
        self.nodes.iter().map(|(_, d)| *d).sum()
    }

    /// Times summed per block (`stage16.block3`), with `stem` and `decoder`
    /// as their own groups. Order of first appearance.
    pub fn by_block(&self) -> Vec<(String, Duration)> {
        let mut out: Vec<(String, Duration)> = Vec::new();
        for (name, d) in &self.nodes {
            let parts: Vec<&str> = name.split('.').collect();
            let key = if parts.len() >= 2 && (parts[0].starts_with("stage") || parts[0] == "block") {
                if parts[0] == "block" {
                    "block".to_string()
                } else {
                    format!("{}.{}", parts[0], parts[1])
                }
            } else {
                parts[0].to_string()
            };
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, t)) => *t += *d,
                None => out.push((key, *d)),
            }
        }
        out
    }
}

/// A graph with every parameter slot resolved, ready to run.
#[derive(Clone, Debug)]
pub struct BoundModel<T: Scalar = f32> {
    graph: ModelGraph,
    ops: Vec<Op<T>>,
}

fn take_vec<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    t.data().to_vec()
}

impl<T: Scalar> BoundModel<T> {
    /// Resolves every slot. Fails with a binding error naming all missing and
    /// mismatched slots before any computation.
    pub fn bind(graph: &ModelGraph, weights: &WeightMap<T>, options: ExecOptions) -> Result<Self> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for (id, node) in graph.nodes().iter().enumerate() {
            if let LayerKind::SqueezeExcite { channels, prefix, .. } = &node.kind {
                check_se(weights, prefix, *channels, &mut missing, &mut mismatched);
                continue;
            }
            for slot in graph.node_slots(id) {
                match weights.get(&slot.name) {
                    None => missing.push(slot.name),
                    Some(t) if t.shape() != slot.shape => {
                        mismatched.push(format!("{}: expected {}, found {}", slot.name, slot.shape, t.shape()))
                    }
                    Some(_) => {}
                }
            }
        }
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Binding { missing, mismatched });
        }

        let get = |name: &str| &weights[name];
        let consumers = graph.consumer_counts();
        let mut ops: Vec<Op<T>> = Vec::with_capacity(graph.nodes().len());
        for node in graph.nodes() {
            let op = match &node.kind {
                LayerKind::Input { .. } => Op::Input,
                LayerKind::Conv { spec, weight, bias } => Op::Conv {
                    spec: *spec,
                    weight: get(weight).clone(),
                    bias: bias.as_deref().map(|b| take_vec(get(b))),
                },
                LayerKind::DilatedGroupConv {
                    spec,
                    dilations,
                    weights: names,
                } => Op::Branches {
                    spec: *spec,
                    dilations: dilations.rates().to_vec(),
                    weights: names.iter().map(|n| get(n).clone()).collect(),
                    bias: None,
                },
                LayerKind::BatchNorm { prefix, .. } => {
                    let v = |s: &str| take_vec(get(&format!("{prefix}.{s}")));
                    let bn = BnOwned {
                        gamma: v("gamma"),
                        beta: v("beta"),
                        mean: v("mean"),
                        var: v("var"),
                        eps: get(&format!("{prefix}.eps")).data()[0],
                    };
                    let producer = node.inputs[0];
                    let foldable = options.fold_batchnorm
                        && consumers[producer] == 1
                        && matches!(ops[producer], Op::Conv { .. } | Op::Branches { .. });
                    if foldable {
                        fold_into(&mut ops[producer], &bn)?;
                        Op::Identity
                    } else {
                        Op::BatchNorm(bn)
                    }
                }
                LayerKind::Relu => Op::Relu,
                LayerKind::SqueezeExcite { prefix, .. } => Op::Se {
                    w1: get(&format!("{prefix}.fc1.w")).clone(),
                    b1: take_vec(get(&format!("{prefix}.fc1.b"))),
                    w2: get(&format!("{prefix}.fc2.w")).clone(),
                    b2: take_vec(get(&format!("{prefix}.fc2.b"))),
                },
                LayerKind::AvgPool2x2 => Op::Pool,
                LayerKind::Upsample { factor } => Op::Upsample(*factor),
                LayerKind::Add => Op::Add,
                LayerKind::Concat => Op::Concat,
            };
            ops.push(op);
        }
        Ok(BoundModel {
            graph: graph.clone(),
            ops,
        })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    /// Primary output.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut outs = self.run(input, &[0], None)?;
        Ok(outs.pop().expect("one output requested"))
    }

    /// Every named output.
    pub fn forward_outputs(&self, input: &Tensor<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let idx: Vec<usize> = (0..self.graph.outputs().len()).collect();
        let outs = self.run(input, &idx, None)?;
        Ok(self.graph.outputs().iter().map(|(n, _)| n.clone()).zip(outs).collect())
    }

    /// Primary output plus per-node timing.
    pub fn forward_profiled(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Profile)> {
        let mut profile = Profile::default();
        let mut outs = self.run(input, &[0], Some(&mut profile))?;
        Ok((outs.pop().expect("one output requested"), profile))
    }

    fn run(&self, input: &Tensor<T>, wanted: &[usize], mut profile: Option<&mut Profile>) -> Result<Vec<Tensor<T>>> {
        self.graph.infer_shapes(input.shape())?;
        let nodes = self.graph.nodes();
        let mut remaining = self.graph.consumer_counts();
        let targets: Vec<usize> = wanted.iter().map(|&i| self.graph.outputs()[i].1).collect();
        for &t in &targets {
            remaining[t] += 1;
        }
        let mut values: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        for (id, node) in nodes.iter().enumerate() {
            let start = Instant::now();
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&i| values[i].as_ref().expect("producer evaluated"))
                .collect();
            let out = match &self.ops[id] {
                Op::Input => input.clone(),
                Op::Conv { spec, weight, bias } => conv2d_fast(args[0], weight, bias.as_deref(), spec)?,
                Op::Branches {
                    spec,
                    dilations,
                    weights,
                    bias,
                } => {
                    let w: Vec<&Tensor<T>> = weights.iter().collect();
                    let b: Option<Vec<&[T]>> = bias.as_ref().map(|bb| bb.iter().map(Vec::as_slice).collect());
                    multi_dilation_group_conv(args[0], &w, b.as_deref(), dilations, spec)?
                }
                Op::BatchNorm(bn) => batchnorm_infer(args[0], &bn.params())?,
                Op::Identity => args[0].clone(),
                Op::Relu => ops::relu(args[0]),
                Op::Se { w1, b1, w2, b2 } => se_block(args[0], w1, b1, w2, b2)?,
                Op::Pool => avgpool2x2(args[0]),
                Op::Upsample(f) => bilinear_upsample(args[0], *f)?,
                Op::Add => {
                    let mut acc = ops::add(args[0], args[1])?;
                    for extra in &args[2..] {
                        acc = ops::add(&acc, extra)?;
                    }
                    acc
                }
                Op::Concat => Tensor::concat_channels(&args)?,
            };
            drop(args);
            if let Some(p) = profile.as_deref_mut() {
                p.nodes.push((node.name.clone(), start.elapsed()));
            }
            for &i in &node.inputs {
                remaining[i] -= 1;
                if remaining[i] == 0 {
                    values[i] = None;
                }
            }
            values[id] = Some(out);
        }
        Ok(targets
            .iter()
            .map(|&t| values[t].clone().expect("output kept alive"))
            .collect())
    }
}

/// SE slots are checked for mutual consistency rather than a fixed width, so
/// weights exported with any bottleneck rounding still bind.
fn check_se<T: Scalar>(
    weights: &WeightMap<T>,
    prefix: &str,
    channels: usize,
    missing: &mut Vec<String>,
    mismatched: &mut Vec<String>,
) {
    let names = ["fc1.w", "fc1.b", "fc2.w", "fc2.b"].map(|s| format!("{prefix}.{s}"));
    let found: Vec<Option<Shape>> = names.iter().map(|n| weights.get(n).map(Tensor::shape)).collect();
    for (n, f) in names.iter().zip(&found) {
        if f.is_none() {
            missing.push(n.clone());
        }
    }
    let r = match found[0] {
        Some(s) if s.c == channels && s.h == 1 && s.w == 1 && s.n >= 1 => s.n,
        Some(s) => {
            mismatched.push(format!("{}: expected (r,{channels},1,1), found {s}", names[0]));
            return;
        }
        None => return,
    };
    let want = [
        None,
        Some(Shape::new(r, 1, 1, 1)),
        Some(Shape::new(channels, r, 1, 1)),
        Some(Shape::new(channels, 1, 1, 1)),
    ];
    for i in 1..4 {
        if let (Some(f), Some(w)) = (found[i], want[i]) {
            if f != w {
                mismatched.push(format!("{}: expected {w}, found {f}", names[i]));
            }
        }
    }
}

fn fold_into<T: Scalar>(op: &mut Op<T>, bn: &BnOwned<T>) -> Result<()> {
    match op {
        Op::Conv { weight, bias, .. } => {
            let (w, b) = fold_batchnorm(weight, bias.as_deref(), &bn.params())?;
            *weight = w;
            *bias = Some(b);
        }
        Op::Branches {
            spec,
            dilations,
            weights,
            bias,
        } => {
            let per = branch_specs(spec, dilations)?[0].out_channels;
            let mut biases = Vec::with_capacity(weights.len());
            for (i, w) in weights.iter_mut().enumerate() {
                let part = bn.channels(i * per, (i + 1) * per);
                let (fw, fb) = fold_batchnorm(w, None, &part.params())?;
                *w = fw;
                biases.push(fb);
            }
            *bias = Some(biases);
        }
        _ => unreachable!("only convolutions fold"),
    }
    Ok(())
}

/// Binds with default options and runs once.
pub fn forward<T: Scalar>(graph: &ModelGraph, weights: &WeightMap<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    BoundModel::bind(graph, weights, ExecOptions::default())?.forward(input)
}
