//! Model graphs: an immutable, topologically ordered DAG of typed layers with
//! named parameter slots.

mod builder;
mod exec;
mod preset;
mod weights;

use std::collections::{BTreeMap, HashSet};

pub use builder::{
    build_backbone, build_backbone_prefix, build_d_block, build_decoder, build_regseg, build_y_block, BackboneConfig,
    BackboneTaps, BlockSpec, DecoderConfig, GraphBuilder, StageConfig,
};
pub use exec::{forward, BoundModel, ExecOptions, Profile};
pub use preset::{LayerRow, Preset};
pub use weights::{init_weights, WeightMap};

use crate::error::{Error, Result};
use crate::ops::pool::avgpool2x2_extent;
use crate::ops::ConvSpec;
use crate::schedule::Dilations;
use crate::tensor::Shape;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    /// Single-dilation convolution with slot `weight` and optional `bias`.
    Conv {
        spec: ConvSpec,
        weight: String,
        bias: Option<String>,
    },
    /// 3x3 grouped convolution whose groups are split into branches with their
    /// own dilation rates; one weight slot per branch.
    DilatedGroupConv {
        spec: ConvSpec,
        dilations: Dilations,
        weights: Vec<String>,
    },
    /// Inference batch norm with slots `{prefix}.{gamma,beta,mean,var,eps}`.
    BatchNorm {
        channels: usize,
        prefix: String,
    },
    Relu,
    /// Squeeze-and-excitation with slots `{prefix}.fc1.{w,b}`, `{prefix}.fc2.{w,b}`.
    SqueezeExcite {
        channels: usize,
        reduced: usize,
        prefix: String,
    },
    AvgPool2x2,
    Upsample {
        factor: usize,
    },
    Add,
    Concat,
}

impl LayerKind {
    /// Short operator name for tables and structural comparison.
    pub fn op_name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::DilatedGroupConv { .. } => "dilated_group_conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::SqueezeExcite { .. } => "se",
            LayerKind::AvgPool2x2 => "avgpool2x2",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

/// Whether a parameter is trained or a running statistic / constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Learnable,
    Statistic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Shape,
    pub kind: SlotKind,
}

/// Executable model description. Nodes are stored in topological order and
/// every node only consumes earlier nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    input: NodeId,
    outputs: Vec<(String, NodeId)>,
}

fn vector_shape(c: usize) -> Shape {
    Shape::new(c, 1, 1, 1)
}

impl ModelGraph {
    pub(crate) fn from_parts(nodes: Vec<Node>, input: NodeId, outputs: Vec<(String, NodeId)>) -> Result<Self> {
        let graph = ModelGraph { nodes, input, outputs };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<()> {
        if !matches!(
            self.nodes.get(self.input).map(|n| &n.kind),
            Some(LayerKind::Input { .. })
        ) {
            return Err(Error::spec("graph input must be an input node"));
        }
        let mut names = HashSet::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if !names.insert(node.name.as_str()) {
                return Err(Error::spec(format!("duplicate node name '{}'", node.name)));
            }
            if node.inputs.iter().any(|&i| i >= id) {
                return Err(Error::spec(format!(
                    "node '{}' is not topologically ordered",
                    node.name
                )));
            }
        }
        if self.outputs.is_empty() || self.outputs.iter().any(|(_, id)| *id >= self.nodes.len()) {
            return Err(Error::spec("graph needs at least one valid output"));
        }
        let mut slots = HashSet::new();
        for slot in self.param_slots() {
            if !slots.insert(slot.name.clone()) {
                return Err(Error::spec(format!("duplicate parameter slot '{}'", slot.name)));
            }
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn input_channels(&self) -> usize {
        match self.nodes[self.input].kind {
            LayerKind::Input { channels } => channels,
            _ => unreachable!("validated"),
        }
    }

    /// Named outputs; the first one is the primary result of [`forward`].
    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Parameter slots of one node, in a fixed order.
    pub fn node_slots(&self, id: NodeId) -> Vec<ParamSlot> {
        let learn = |name: String, shape: Shape| ParamSlot {
            name,
            shape,
            kind: SlotKind::Learnable,
        };
        let stat = |name: String, shape: Shape| ParamSlot {
            name,
            shape,
            kind: SlotKind::Statistic,
        };
        match &self.nodes[id].kind {
            LayerKind::Conv { spec, weight, bias } => {
                let mut v = vec![learn(weight.clone(), spec.weight_shape())];
                if let Some(b) = bias {
                    v.push(learn(b.clone(), vector_shape(spec.out_channels)));
                }
                v
            }
            LayerKind::DilatedGroupConv {
                spec,
                dilations,
                weights,
            } => {
                let b = dilations.branches();
                let branch = ConvSpec {
                    in_channels: spec.in_channels / b,
                    out_channels: spec.out_channels / b,
                    groups: spec.groups / b,
                    ..*spec
                };
                weights
                    .iter()
                    .map(|w| learn(w.clone(), branch.weight_shape()))
                    .collect()
            }
            LayerKind::BatchNorm { channels, prefix } => vec![
                learn(format!("{prefix}.gamma"), vector_shape(*channels)),
                learn(format!("{prefix}.beta"), vector_shape(*channels)),
                stat(format!("{prefix}.mean"), vector_shape(*channels)),
                stat(format!("{prefix}.var"), vector_shape(*channels)),
                stat(format!("{prefix}.eps"), vector_shape(1)),
            ],
            LayerKind::SqueezeExcite {
                channels,
                reduced,
                prefix,
            } => vec![
                learn(format!("{prefix}.fc1.w"), Shape::new(*reduced, *channels, 1, 1)),
                learn(format!("{prefix}.fc1.b"), vector_shape(*reduced)),
                learn(format!("{prefix}.fc2.w"), Shape::new(*channels, *reduced, 1, 1)),
                learn(format!("{prefix}.fc2.b"), vector_shape(*channels)),
            ],
            _ => Vec::new(),
        }
    }

    /// Every parameter slot in node order.
    pub fn param_slots(&self) -> Vec<ParamSlot> {
        (0..self.nodes.len()).flat_map(|id| self.node_slots(id)).collect()
    }

    /// Output shape of every node for the given input shape.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let ins: Vec<Shape> = node.inputs.iter().map(|&i| shapes[i]).collect();
            let fail = |msg: String| Error::shape(format!("node '{}': {msg}", node.name));
            let first = || -> Result<Shape> { ins.first().copied().ok_or_else(|| fail("missing input".into())) };
            let shape = match &node.kind {
                LayerKind::Input { channels } => {
                    if id != self.input {
                        return Err(fail("second input node".into()));
                    }
                    if input.c != *channels {
                        return Err(fail(format!("expected {channels} channels, got {}", input.c)));
                    }
                    input
                }
                LayerKind::Conv { spec, .. } | LayerKind::DilatedGroupConv { spec, .. } => {
                    let s = first()?;
                    if s.c != spec.in_channels {
                        return Err(fail(format!("expects {} channels, got {}", spec.in_channels, s.c)));
                    }
                    let spec = match &node.kind {
                        LayerKind::DilatedGroupConv { dilations, .. } => spec.dilation(dilations.max()),
                        _ => *spec,
                    };
                    spec.output_shape(s).map_err(|e| fail(e.to_string()))?
                }
                LayerKind::BatchNorm { channels, .. } | LayerKind::SqueezeExcite { channels, .. } => {
                    let s = first()?;
                    if s.c != *channels {
                        return Err(fail(format!("expects {channels} channels, got {}", s.c)));
                    }
                    s
                }
                LayerKind::Relu => first()?,
                LayerKind::AvgPool2x2 => {
                    let s = first()?;
                    s.with_spatial(avgpool2x2_extent(s.h), avgpool2x2_extent(s.w))
                }
                LayerKind::Upsample { factor } => {
                    let s = first()?;
                    s.with_spatial(s.h * factor, s.w * factor)
                }
                LayerKind::Add => {
                    let s = first()?;
                    if ins.iter().any(|o| *o != s) {
                        return Err(fail(format!("add of mismatched shapes {ins:?}")));
                    }
                    s
                }
                LayerKind::Concat => {
                    let s = first()?;
                    if ins.iter().any(|o| (o.n, o.h, o.w) != (s.n, s.h, s.w)) {
                        return Err(fail(format!("concat of mismatched shapes {ins:?}")));
                    }
                    s.with_channels(ins.iter().map(|o| o.c).sum())
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Shapes of the named outputs.
    pub fn output_shapes(&self, input: Shape) -> Result<BTreeMap<String, Shape>> {
        let shapes = self.infer_shapes(input)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), shapes[*id]))
            .collect())
    }

    /// Sequence of (operator, output shape), the structural fingerprint used
    /// to compare graphs built different ways.
    pub fn signature(&self, input: Shape) -> Result<Vec<(&'static str, Shape)>> {
        let shapes = self.infer_shapes(input)?;
        Ok(self
            .nodes
            .iter()
            .zip(shapes)
            .map(|(n, s)| (n.kind.op_name(), s))
            .collect())
    }

    /// Number of nodes consuming each node's output.
    pub(crate) fn consumer_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.nodes.len()];
        for node in &self.nodes {
            for &i in &node.inputs {
                counts[i] += 1;
            }
        }
        counts
    }
}
