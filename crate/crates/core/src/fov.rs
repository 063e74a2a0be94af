//! Field-of-view analysis: the analytic `(k, s)` recurrence over a graph,
//! the hole-free check, and empirical measurement on a linearized twin.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, NodeId};
use crate::ops::{add, avgpool2x2, bilinear_upsample, conv2d_fast, ConvSpec};
use crate::tensor::{Shape, Tensor};

/// Running field of view `k` and cumulative stride `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FovState {
    pub k: usize,
    pub s: usize,
}

impl FovState {
    pub const INITIAL: FovState = FovState { k: 1, s: 1 };

    /// Appends a layer with kernel extent `k` and stride `s`.
    pub fn compose(self, k: usize, s: usize) -> FovState {
        FovState {
            k: self.k + (k - 1) * self.s,
            s: self.s * s,
        }
    }

    /// Whether a dilation-`r` kernel applied at this state leaves no gaps:
    /// `k / s >= r`.
    pub fn admits_dilation(&self, r: usize) -> bool {
        self.k >= r * self.s
    }
}

impl Default for FovState {
    fn default() -> Self {
        Self::INITIAL
    }
}

/// Extent covered by a `k`-tap kernel at dilation `r`.
pub fn effective_kernel(k: usize, r: usize) -> usize {
    r * (k - 1) + 1
}

pub fn fov_compose(state: FovState, k: usize, s: usize) -> FovState {
    state.compose(k, s)
}

/// Kernel, stride and (maximum) dilation of a node that moves the field of
/// view. SE, batch norm, activations and upsampling do not.
fn layer_geometry(kind: &LayerKind) -> Option<(usize, usize, usize)> {
    match kind {
        LayerKind::Conv { spec, .. } => Some((spec.kernel, spec.stride, spec.dilation)),
        LayerKind::DilatedGroupConv { spec, dilations, .. } => Some((spec.kernel, spec.stride, dilations.max())),
        LayerKind::AvgPool2x2 => Some((2, 2, 1)),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FovRow {
    pub node: NodeId,
    pub layer: String,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub before: FovState,
    pub after: FovState,
}

impl FovRow {
    pub fn hole_free(&self) -> bool {
        self.before.admits_dilation(self.dilation)
    }
}

/// A dilated layer whose input state does not satisfy `k / s >= r`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub node: NodeId,
    pub layer: String,
    pub k: usize,
    pub s: usize,
    pub r: usize,
}

impl Violation {
    pub fn ratio(&self) -> f64 {
        self.k as f64 / self.s as f64
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: k/s = {}/{} = {:.2} < r = {}",
            self.layer,
            self.k,
            self.s,
            self.ratio(),
            self.r
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FovReport {
    /// Output the analysis ends at.
    pub output: String,
    /// Main-path layers that change the state, in order.
    pub rows: Vec<FovRow>,
    pub final_state: FovState,
}

impl FovReport {
    pub fn fov(&self) -> usize {
        self.final_state.k
    }

    pub fn violations(&self) -> Vec<Violation> {
        self.rows
            .iter()
            .filter(|r| !r.hole_free())
            .map(|r| Violation {
                node: r.node,
                layer: r.layer.clone(),
                k: r.before.k,
                s: r.before.s,
                r: r.dilation,
            })
            .collect()
    }

    /// Per-layer table. With an input size, a footer gives the extents a
    /// corner output pixel needs to see the whole image.
    pub fn to_text(&self, input: Option<(usize, usize)>) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<34} {:>3} {:>3} {:>3} {:>6} {:>4}  hole-free",
            "layer", "k'", "s'", "r", "k", "s"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<34} {:>3} {:>3} {:>3} {:>6} {:>4}  {}",
                r.layer,
                r.kernel,
                r.stride,
                r.dilation,
                r.after.k,
                r.after.s,
                if r.hole_free() { "yes" } else { "NO" }
            );
        }
        let _ = writeln!(out, "field of view at '{}': {}", self.output, self.fov());
        if let Some((h, w)) = input {
            let _ = writeln!(
                out,
                "corner pixel coverage at {h}x{w} needs {} (to the opposite edge) and {} (to the opposite corner)",
                2 * h - 1,
                2 * w - 1
            );
        }
        out
    }
}

fn target_output(graph: &ModelGraph) -> (String, NodeId) {
    match graph.output("x16") {
        Some(id) => ("x16".into(), id),
        None => graph.outputs()[0].clone(),
    }
}

/// Folds the recurrence over the graph and reports the main path ending at
/// the backbone output (`x16` when present, else the primary output).
///
/// Each node's state is that of its input with the largest `k`, composed
/// with the node's own geometry; multi-branch convolutions count once at
/// their largest dilation.
pub fn analyze_graph_fov(graph: &ModelGraph) -> FovReport {
    let nodes = graph.nodes();
    let mut states = Vec::with_capacity(nodes.len());
    let mut from: Vec<Option<NodeId>> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let pred = node.inputs.iter().copied().max_by(|&a, &b| {
            let (sa, sb): (FovState, FovState) = (states[a], states[b]);
            sa.k.cmp(&sb.k).then(b.cmp(&a))
        });
        let base = pred.map_or(FovState::INITIAL, |p| states[p]);
        let state = match layer_geometry(&node.kind) {
            Some((k, s, r)) => base.compose(effective_kernel(k, r), s),
            None => base,
        };
        states.push(state);
        from.push(pred);
    }
    let (output, target) = target_output(graph);
    let mut path = vec![target];
    while let Some(p) = from[*path.last().expect("non-empty")] {
        path.push(p);
    }
    path.reverse();
    let rows = path
        .iter()
        .filter_map(|&id| {
            let (k, s, r) = layer_geometry(&nodes[id].kind)?;
            if k == 1 && s == 1 {
                return None;
            }
            Some(FovRow {
                node: id,
                layer: nodes[id].name.clone(),
                kernel: k,
                stride: s,
                dilation: r,
                before: from[id].map_or(FovState::INITIAL, |p| states[p]),
                after: states[id],
            })
        })
        .collect();
    FovReport {
        output,
        rows,
        final_state: states[target],
    }
}

pub fn check_hole_free(graph: &ModelGraph) -> Vec<Violation> {
    analyze_graph_fov(graph).violations()
}

/// Influence of one input line on one output element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sweep {
    /// Input coordinates with nonzero influence, ascending.
    pub support: Vec<usize>,
    /// Zero-influence coordinates strictly inside the support's span.
    pub holes: Vec<usize>,
    /// The support reaches the image border, so the true extent may be larger.
    pub clipped: bool,
}

impl Sweep {
    fn from_influence(influence: &[bool]) -> Sweep {
        let support: Vec<usize> = (0..influence.len()).filter(|&i| influence[i]).collect();
        let holes = match (support.first(), support.last()) {
            (Some(&lo), Some(&hi)) => (lo..=hi).filter(|&i| !influence[i]).collect(),
            _ => Vec::new(),
        };
        let clipped = influence.first() == Some(&true) || influence.last() == Some(&true);
        Sweep {
            support,
            holes,
            clipped,
        }
    }

    /// `max - min + 1` over the support; 0 when empty.
    pub fn extent(&self) -> usize {
        match (self.support.first(), self.support.last()) {
            (Some(lo), Some(hi)) => hi - lo + 1,
            _ => 0,
        }
    }

    pub fn is_hole_free(&self) -> bool {
        self.holes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmpiricalFov {
    pub output_position: (usize, usize),
    /// Sweep along the input row through the output's center.
    pub horizontal: Sweep,
    /// Sweep along the input column through the output's center.
    pub vertical: Sweep,
}

impl EmpiricalFov {
    pub fn extent(&self) -> usize {
        self.horizontal.extent().max(self.vertical.extent())
    }

    pub fn clipped(&self) -> bool {
        self.horizontal.clipped || self.vertical.clipped
    }

    pub fn is_hole_free(&self) -> bool {
        self.horizontal.is_hole_free() && self.vertical.is_hole_free()
    }
}

#[derive(Clone, Debug)]
enum TwinOp {
    Source,
    Pass,
    /// All-ones single-channel kernels, one per dilation, summed.
    Conv {
        kernel: usize,
        stride: usize,
        dilations: Vec<usize>,
    },
    Pool,
    Upsample(usize),
    Sum,
}

/// Single-channel stand-in for a graph: every convolution becomes an
/// all-ones kernel of the same geometry (multi-dilation layers sum their
/// branches), normalization, activations and SE pass values through, and
/// concatenation sums. Influence is strictly positive along every path, so
/// the support of an impulse response equals that of the full-width network
/// with positive weights, whose pointwise convolutions mix all channels
/// before each grouped one.
struct Twin {
    ops: Vec<TwinOp>,
    inputs: Vec<Vec<NodeId>>,
    target: NodeId,
}

impl Twin {
    fn new(graph: &ModelGraph, target: NodeId) -> Twin {
        let ops = graph
            .nodes()
            .iter()
            .map(|n| match &n.kind {
                LayerKind::Input { .. } => TwinOp::Source,
                LayerKind::Conv { spec, .. } if spec.kernel == 1 && spec.stride == 1 => TwinOp::Pass,
                LayerKind::Conv { spec, .. } => TwinOp::Conv {
                    kernel: spec.kernel,
                    stride: spec.stride,
                    dilations: vec![spec.dilation],
                },
                LayerKind::DilatedGroupConv { spec, dilations, .. } => TwinOp::Conv {
                    kernel: spec.kernel,
                    stride: spec.stride,
                    dilations: dilations.rates().to_vec(),
                },
                LayerKind::BatchNorm { .. } | LayerKind::Relu | LayerKind::SqueezeExcite { .. } => TwinOp::Pass,
                LayerKind::AvgPool2x2 => TwinOp::Pool,
                LayerKind::Upsample { factor } => TwinOp::Upsample(*factor),
                LayerKind::Add | LayerKind::Concat => TwinOp::Sum,
            })
            .collect();
        Twin {
            ops,
            inputs: graph.nodes().iter().map(|n| n.inputs.clone()).collect(),
            target,
        }
    }

    fn run(&self, input: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut values: Vec<Option<Tensor<f64>>> = vec![None; self.ops.len()];
        for id in 0..=self.target {
            let args: Vec<&Tensor<f64>> = self.inputs[id]
                .iter()
                .map(|&i| values[i].as_ref().expect("topological"))
                .collect();
            let out = match &self.ops[id] {
                TwinOp::Source => input.clone(),
                TwinOp::Pass => args[0].clone(),
                TwinOp::Conv {
                    kernel,
                    stride,
                    dilations,
                } => {
                    let ones = Tensor::full([1, 1, *kernel, *kernel], 1.0)?;
                    let mut acc: Option<Tensor<f64>> = None;
                    for &r in dilations {
                        let spec = ConvSpec::new(1, 1, *kernel).stride(*stride).dilation(r);
                        let y = conv2d_fast(args[0], &ones, None, &spec)?;
                        acc = Some(match acc {
                            Some(a) => add(&a, &y)?,
                            None => y,
                        });
                    }
                    acc.expect("at least one dilation")
                }
                TwinOp::Pool => avgpool2x2(args[0]),
                TwinOp::Upsample(f) => bilinear_upsample(args[0], *f)?,
                TwinOp::Sum => {
                    let mut acc = args[0].clone();
                    for a in &args[1..] {
                        acc = add(&acc, a)?;
                    }
                    acc
                }
            };
            values[id] = Some(out);
        }
        Ok(values[self.target].take().expect("target evaluated"))
    }
}

/// Measures which input pixels influence output element `output_position`
/// of the backbone output (see [`analyze_graph_fov`]) by feeding impulses
/// along the input row and column through the output's center, one
/// position at a time, into the linearized twin.
pub fn measure_empirical_fov(
    graph: &ModelGraph,
    output_position: (usize, usize),
    input_size: (usize, usize),
) -> Result<EmpiricalFov> {
    let (_, target) = target_output(graph);
    let (h, w) = input_size;
    let shapes = graph.infer_shapes(Shape::new(1, graph.input_channels(), h, w))?;
    let out = shapes[target];
    let (oy, ox) = output_position;
    if oy >= out.h || ox >= out.w {
        return Err(Error::Index(format!(
            "output position ({oy}, {ox}) outside {}x{} output",
            out.h, out.w
        )));
    }
    let center = |o: usize, out_len: usize, in_len: usize| -> usize { (o * in_len / out_len).min(in_len - 1) };
    let (cy, cx) = (center(oy, out.h, h), center(ox, out.w, w));
    let twin = Twin::new(graph, target);

    let probe = |y: usize, x: usize| -> Result<bool> {
        let mut input = Tensor::zeros([1, 1, h, w])?;
        input.set(0, 0, y, x, 1.0);
        Ok(twin.run(&input)?.get(0, 0, oy, ox) > 0.0)
    };
    let horizontal = (0..w).map(|x| probe(cy, x)).collect::<Result<Vec<_>>>()?;
    let vertical = (0..h).map(|y| probe(y, cx)).collect::<Result<Vec<_>>>()?;
    Ok(EmpiricalFov {
        output_position,
        horizontal: Sweep::from_influence(&horizontal),
        vertical: Sweep::from_influence(&vertical),
    })
}
