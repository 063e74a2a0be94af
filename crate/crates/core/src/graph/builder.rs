//! Construction of D blocks, the backbone, the decoder and the full network.

use super::{LayerKind, ModelGraph, Node, NodeId};
use crate::error::{Error, Result};
use crate::ops::{se_width, ConvSpec};
use crate::schedule::{DilationSchedule, Dilations};

/// One residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilations: Dilations,
    pub group_width: usize,
    /// Squeeze-and-excitation width; `None` means [`se_width`] of the input.
    pub se_channels: Option<usize>,
}

impl BlockSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dilations: Dilations,
        group_width: usize,
    ) -> Self {
        BlockSpec {
            in_channels,
            out_channels,
            stride,
            dilations,
            group_width,
            se_channels: None,
        }
    }

    pub fn groups(&self) -> usize {
        self.out_channels / self.group_width
    }

    pub fn se_reduced(&self) -> usize {
        self.se_channels.unwrap_or_else(|| se_width(self.in_channels))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.group_width == 0 {
            return Err(Error::spec("block channel counts and group width must be >= 1"));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::spec(format!("block stride {} not in {{1, 2}}", self.stride)));
        }
        if !self.out_channels.is_multiple_of(self.group_width) {
            return Err(Error::spec(format!(
                "group width {} does not divide {} channels",
                self.group_width, self.out_channels
            )));
        }
        if !self.groups().is_multiple_of(self.dilations.branches()) {
            return Err(Error::spec(format!(
                "{} groups cannot be split into {} dilation branches",
                self.groups(),
                self.dilations.branches()
            )));
        }
        if self.se_reduced() == 0 {
            return Err(Error::spec("squeeze-excitation width must be >= 1"));
        }
        Ok(())
    }

    /// The grouped 3x3 stage over all branches (dilation is per branch).
    pub fn grouped_conv_spec(&self) -> ConvSpec {
        ConvSpec::new(self.out_channels, self.out_channels, 3)
            .stride(self.stride)
            .groups(self.groups())
    }
}

/// Incrementally assembles a [`ModelGraph`].
#[derive(Debug)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
}

/// The three feature maps the decoder consumes.
#[derive(Clone, Copy, Debug)]
pub struct BackboneTaps {
    pub x4: NodeId,
    pub x8: NodeId,
    pub x16: NodeId,
}

impl GraphBuilder {
    pub fn new(in_channels: usize) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                kind: LayerKind::Input { channels: in_channels },
                inputs: Vec::new(),
            }],
            outputs: Vec::new(),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node {
            name: name.into(),
            kind,
            inputs,
        });
        self.nodes.len() - 1
    }

    /// Convolution with slots `{name}.w` and, if the conv has a bias, `{name}.b`.
    pub fn conv(&mut self, name: &str, input: NodeId, spec: ConvSpec) -> NodeId {
        let kind = LayerKind::Conv {
            spec,
            weight: format!("{name}.w"),
            bias: spec.bias.then(|| format!("{name}.b")),
        };
        self.push(name, kind, vec![input])
    }

    pub fn batchnorm(&mut self, prefix: &str, input: NodeId, channels: usize) -> NodeId {
        let kind = LayerKind::BatchNorm {
            channels,
            prefix: prefix.into(),
        };
        self.push(prefix, kind, vec![input])
    }

    pub fn relu(&mut self, name: &str, input: NodeId) -> NodeId {
        self.push(name, LayerKind::Relu, vec![input])
    }

    /// conv -> BN (slots `{bn_prefix}.*`) -> optional ReLU.
    pub fn conv_bn(&mut self, name: &str, bn_prefix: &str, input: NodeId, spec: ConvSpec, relu: bool) -> NodeId {
        let c = self.conv(name, input, spec);
        let b = self.batchnorm(bn_prefix, c, spec.out_channels);
        if relu {
            self.relu(&format!("{name}.relu"), b)
        } else {
            b
        }
    }

    /// Residual block: 1x1 conv, multi-dilation grouped 3x3, SE, 1x1 conv,
    /// summed with the shortcut and passed through a final ReLU.
    pub fn d_block(&mut self, prefix: &str, input: NodeId, spec: &BlockSpec) -> Result<NodeId> {
        spec.validate()?;
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let conv1 = format!("{prefix}.conv1");
        let x = self.conv_bn(&conv1, &format!("{conv1}.bn"), input, ConvSpec::new(cin, cout, 1), true);

        let conv2 = format!("{prefix}.conv2");
        let weights = (0..spec.dilations.branches())
            .map(|j| format!("{conv2}.branch{j}.w"))
            .collect();
        let x = self.push(
            conv2.as_str(),
            LayerKind::DilatedGroupConv {
                spec: spec.grouped_conv_spec(),
                dilations: spec.dilations.clone(),
                weights,
            },
            vec![x],
        );
        let x = self.batchnorm(&format!("{conv2}.bn"), x, cout);
        let x = self.relu(&format!("{conv2}.relu"), x);

        let x = self.push(
            format!("{prefix}.se"),
            LayerKind::SqueezeExcite {
                channels: cout,
                reduced: spec.se_reduced(),
                prefix: format!("{prefix}.se"),
            },
            vec![x],
        );
        let conv3 = format!("{prefix}.conv3");
        let main = self.conv_bn(&conv3, &format!("{conv3}.bn"), x, ConvSpec::new(cout, cout, 1), false);

        let shortcut = if spec.stride == 2 || cin != cout {
            let mut s = input;
            if spec.stride == 2 {
                s = self.push(format!("{prefix}.shortcut.pool"), LayerKind::AvgPool2x2, vec![s]);
            }
            let name = format!("{prefix}.shortcut.conv");
            self.conv_bn(&name, &format!("{name}.bn"), s, ConvSpec::new(cin, cout, 1), false)
        } else {
            input
        };
        let sum = self.push(format!("{prefix}.add"), LayerKind::Add, vec![main, shortcut]);
        Ok(self.relu(&format!("{prefix}.relu"), sum))
    }

    /// Stem plus the first `limit` blocks (all blocks when `None`).
    /// Returns the taps reached and the last node.
    fn backbone_nodes(
        &mut self,
        config: &BackboneConfig,
        schedule: &DilationSchedule,
        limit: Option<usize>,
    ) -> Result<(Option<BackboneTaps>, NodeId)> {
        let blocks = config.blocks(schedule)?;
        let stem = ConvSpec::new(config.in_channels, config.stem_channels, 3).stride(2);
        let mut x = self.conv_bn("stem.conv", "stem.bn", self.input(), stem, true);
        let mut last_of_stage = [None; 3];
        let take = limit.unwrap_or(blocks.len()).min(blocks.len());
        for (stage, index, spec) in blocks.iter().take(take) {
            x = self.d_block(&format!("stage{}.block{index}", STAGE_NAMES[*stage]), x, spec)?;
            last_of_stage[*stage] = Some(x);
        }
        let taps = match last_of_stage {
            [Some(x4), Some(x8), Some(x16)] if take == blocks.len() => Some(BackboneTaps { x4, x8, x16 }),
            _ => None,
        };
        Ok((taps, x))
    }

    /// Full backbone; returns the 1/4, 1/8 and 1/16 feature maps.
    pub fn backbone(&mut self, config: &BackboneConfig, schedule: &DilationSchedule) -> Result<BackboneTaps> {
        let (taps, _) = self.backbone_nodes(config, schedule, None)?;
        taps.ok_or_else(|| Error::spec("backbone needs at least one block per stage"))
    }

    /// Lightweight decoder over the backbone taps. Returns per-pixel logits at
    /// input resolution.
    pub fn decoder(&mut self, taps: BackboneTaps, channels: [usize; 3], config: &DecoderConfig) -> Result<NodeId> {
        if config.num_classes < 2 {
            return Err(Error::spec("decoder needs at least two classes"));
        }
        let [c4, c8, c16] = channels;
        let d = config;
        let pw = |i, o| ConvSpec::new(i, o, 1);
        let h16 = self.conv_bn("decoder.head16", "decoder.head16.bn", taps.x16, pw(c16, d.head16), true);
        let h8 = self.conv_bn("decoder.head8", "decoder.head8.bn", taps.x8, pw(c8, d.head8), true);
        let h4 = self.conv_bn("decoder.head4", "decoder.head4.bn", taps.x4, pw(c4, d.head4), true);
        if d.head16 != d.head8 {
            return Err(Error::spec("1/16 and 1/8 heads must have equal widths to be summed"));
        }
        let up16 = self.push("decoder.up16", LayerKind::Upsample { factor: 2 }, vec![h16]);
        let sum8 = self.push("decoder.sum8", LayerKind::Add, vec![up16, h8]);
        let conv8 = self.conv_bn(
            "decoder.conv8",
            "decoder.conv8.bn",
            sum8,
            ConvSpec::new(d.head8, d.conv8, 3),
            true,
        );
        let up8 = self.push("decoder.up8", LayerKind::Upsample { factor: 2 }, vec![conv8]);
        let cat4 = self.push("decoder.cat4", LayerKind::Concat, vec![up8, h4]);
        let conv4 = self.conv_bn(
            "decoder.conv4",
            "decoder.conv4.bn",
            cat4,
            ConvSpec::new(d.conv8 + d.head4, d.conv4, 3),
            true,
        );
        let logits = self.conv(
            "decoder.classifier",
            conv4,
            ConvSpec::new(d.conv4, d.num_classes, 1).with_bias(true),
        );
        Ok(self.push("decoder.upsample", LayerKind::Upsample { factor: 4 }, vec![logits]))
    }

    pub fn output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.push((name.into(), id));
    }

    pub fn finish(self) -> Result<ModelGraph> {
        ModelGraph::from_parts(self.nodes, 0, self.outputs)
    }
}

const STAGE_NAMES: [usize; 3] = [4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub repeats: usize,
}

/// Channel and repeat layout of the backbone. The first block of each stage
/// has stride 2; the 1/16 stage is followed by one more stride-1 block of
/// `final_channels`. The dilation schedule covers every stride-1 block of the
/// last stage plus that final block; all other blocks are single-branch and
/// undilated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage4: StageConfig,
    pub stage8: StageConfig,
    pub stage16: StageConfig,
    pub final_channels: usize,
    pub group_width: usize,
}

impl BackboneConfig {
    pub fn regseg() -> Self {
        BackboneConfig {
            in_channels: 3,
            stem_channels: 32,
            stage4: StageConfig {
                channels: 48,
                repeats: 1,
            },
            stage8: StageConfig {
                channels: 128,
                repeats: 3,
            },
            stage16: StageConfig {
                channels: 256,
                repeats: 13,
            },
            final_channels: 320,
            group_width: 16,
        }
    }

    pub fn with_group_width(self, group_width: usize) -> Self {
        BackboneConfig { group_width, ..self }
    }

    /// Number of schedule entries the backbone consumes.
    pub fn schedule_len(&self) -> usize {
        self.stage16.repeats
    }

    /// Every block as (stage index, block index within stage, spec).
    pub fn blocks(&self, schedule: &DilationSchedule) -> Result<Vec<(usize, usize, BlockSpec)>> {
        if schedule.len() != self.schedule_len() {
            return Err(Error::spec(format!(
                "schedule has {} entries, backbone needs {}",
                schedule.len(),
                self.schedule_len()
            )));
        }
        let stages = [self.stage4, self.stage8, self.stage16];
        if stages.iter().any(|s| s.repeats == 0) {
            return Err(Error::spec("every stage needs at least one block"));
        }
        let mut out = Vec::new();
        let mut cin = self.stem_channels;
        let mut dil = schedule.blocks().iter();
        for (si, stage) in stages.iter().enumerate() {
            for bi in 0..stage.repeats {
                let stride = if bi == 0 { 2 } else { 1 };
                let d = if si == 2 && bi > 0 {
                    dil.next().expect("length checked").clone()
                } else {
                    Dilations::unit()
                };
                out.push((si, bi, BlockSpec::new(cin, stage.channels, stride, d, self.group_width)));
                cin = stage.channels;
            }
        }
        let d = dil.next().expect("length checked").clone();
        out.push((
            2,
            self.stage16.repeats,
            BlockSpec::new(cin, self.final_channels, 1, d, self.group_width),
        ));
        Ok(out)
    }

    pub fn tap_channels(&self) -> [usize; 3] {
        [self.stage4.channels, self.stage8.channels, self.final_channels]
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::regseg()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub head16: usize,
    pub head8: usize,
    pub head4: usize,
    pub conv8: usize,
    pub conv4: usize,
    pub num_classes: usize,
}

impl DecoderConfig {
    pub fn regseg(num_classes: usize) -> Self {
        DecoderConfig {
            head16: 128,
            head8: 128,
            head4: 8,
            conv8: 64,
            conv4: 64,
            num_classes,
        }
    }
}

/// Standalone graph holding one D block; slots are prefixed `block`.
pub fn build_d_block(spec: &BlockSpec) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(spec.in_channels);
    let out = b.d_block("block", b.input(), spec)?;
    b.output("out", out);
    b.finish()
}

/// A Y block: the D block with a single undilated branch.
pub fn build_y_block(in_channels: usize, out_channels: usize, stride: usize, group_width: usize) -> Result<ModelGraph> {
    build_d_block(&BlockSpec::new(
        in_channels,
        out_channels,
        stride,
        Dilations::unit(),
        group_width,
    ))
}

/// Backbone graph with outputs `x16` (primary), `x8` and `x4`.
pub fn build_backbone(config: &BackboneConfig, schedule: &DilationSchedule) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(config.in_channels);
    let taps = b.backbone(config, schedule)?;
    b.output("x16", taps.x16);
    b.output("x8", taps.x8);
    b.output("x4", taps.x4);
    b.finish()
}

/// Stem followed by the first `blocks` backbone blocks; output `out`.
pub fn build_backbone_prefix(
    config: &BackboneConfig,
    schedule: &DilationSchedule,
    blocks: usize,
) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(config.in_channels);
    let (_, last) = b.backbone_nodes(config, schedule, Some(blocks))?;
    b.output("out", last);
    b.finish()
}

/// Decoder fragment appended to a builder that already holds a backbone.
pub fn build_decoder(
    builder: &mut GraphBuilder,
    taps: BackboneTaps,
    channels: [usize; 3],
    config: &DecoderConfig,
) -> Result<NodeId> {
    builder.decoder(taps, channels, config)
}

/// Backbone plus decoder. Outputs: `logits` (primary, input resolution),
/// then the backbone taps `x16`, `x8`, `x4`.
pub fn build_regseg(config: &BackboneConfig, schedule: &DilationSchedule, num_classes: usize) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new(config.in_channels);
    let taps = b.backbone(config, schedule)?;
    let logits = build_decoder(&mut b, taps, config.tap_channels(), &DecoderConfig::regseg(num_classes))?;
    b.output("logits", logits);
    b.output("x16", taps.x16);
    b.output("x8", taps.x8);
    b.output("x4", taps.x4);
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SlotKind;
    use crate::tensor::Shape;

    fn d(rates: &[usize]) -> Dilations {
        Dilations::new(rates.to_vec()).unwrap()
    }

    #[test]
    fn d_block_one_one_matches_y_block_structure() {
        let dblock = build_d_block(&BlockSpec::new(256, 256, 1, d(&[1, 1]), 16)).unwrap();
        let yblock = build_y_block(256, 256, 1, 16).unwrap();
        let input = Shape::new(1, 256, 16, 32);
        assert_eq!(dblock.signature(input).unwrap(), yblock.signature(input).unwrap());
        let total = |g: &ModelGraph| g.param_slots().iter().map(|s| s.shape.numel()).sum::<usize>();
        assert_eq!(total(&dblock), total(&yblock));
    }

    #[test]
    fn stride_two_block_pools_shortcut() {
        let g = build_d_block(&BlockSpec::new(128, 256, 2, Dilations::unit(), 16)).unwrap();
        assert!(g
            .nodes()
            .iter()
            .any(|n| n.kind == LayerKind::AvgPool2x2 && n.name == "block.shortcut.pool"));
        let s = g.output_shapes(Shape::new(1, 128, 32, 64)).unwrap();
        assert_eq!(s["out"], Shape::new(1, 256, 16, 32));
    }

    #[test]
    fn identity_shortcut_when_shapes_agree() {
        let g = build_d_block(&BlockSpec::new(256, 256, 1, d(&[1, 4]), 16)).unwrap();
        assert!(!g.nodes().iter().any(|n| n.name.contains("shortcut")));
    }

    #[test]
    fn forty_eight_channels_make_three_groups() {
        let spec = BlockSpec::new(32, 48, 2, Dilations::unit(), 16);
        assert_eq!(spec.grouped_conv_spec().groups, 3);
        let bad = BlockSpec::new(32, 48, 2, d(&[1, 2]), 16);
        assert!(matches!(build_d_block(&bad), Err(Error::Spec(_))));
        let not_divisible = BlockSpec::new(32, 40, 1, Dilations::unit(), 16);
        assert!(matches!(not_divisible.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn default_backbone_layout() {
        let cfg = BackboneConfig::regseg();
        let sched = DilationSchedule::default_backbone();
        let blocks = cfg.blocks(&sched).unwrap();
        assert_eq!(blocks.len(), 1 + 3 + 13 + 1);
        let at16: Vec<_> = blocks.iter().filter(|(s, _, _)| *s == 2).collect();
        assert_eq!(at16.len(), 14);
        let stride1: Vec<_> = at16.iter().filter(|(_, _, b)| b.stride == 1).collect();
        assert_eq!(stride1.len(), 13);
        assert_eq!(stride1[0].2.dilations, d(&[1, 1]));
        assert_eq!(stride1[1].2.dilations, d(&[1, 2]));
        assert_eq!(stride1[12].2.out_channels, 320);
        assert_eq!(stride1[12].2.dilations, d(&[1, 14]));
        assert_eq!(stride1.iter().filter(|(_, _, b)| b.out_channels == 256).count(), 12);
    }

    #[test]
    fn backbone_taps_at_cityscapes_resolution() {
        let g = build_backbone(&BackboneConfig::regseg(), &DilationSchedule::default_backbone()).unwrap();
        let s = g.output_shapes(Shape::new(1, 3, 1024, 2048)).unwrap();
        assert_eq!(s["x4"], Shape::new(1, 48, 256, 512));
        assert_eq!(s["x8"], Shape::new(1, 128, 128, 256));
        assert_eq!(s["x16"], Shape::new(1, 320, 64, 128));
    }

    #[test]
    fn wrong_schedule_length() {
        let short = DilationSchedule::parse("12*(1,1)").unwrap();
        assert!(matches!(
            build_backbone(&BackboneConfig::regseg(), &short),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn decoder_channels() {
        for classes in [19, 11] {
            let g = build_regseg(
                &BackboneConfig::regseg(),
                &DilationSchedule::default_backbone(),
                classes,
            )
            .unwrap();
            let cls = &g.node(g.find("decoder.classifier").unwrap()).kind;
            match cls {
                LayerKind::Conv { spec, .. } => assert_eq!(spec.out_channels, classes),
                k => panic!("unexpected {k:?}"),
            }
            let shapes = g.infer_shapes(Shape::new(1, 3, 64, 64)).unwrap();
            assert_eq!(shapes[g.find("decoder.cat4").unwrap()].c, 72);
            assert_eq!(shapes[g.outputs()[0].1], Shape::new(1, classes, 64, 64));
        }
        let g = build_regseg(&BackboneConfig::regseg(), &DilationSchedule::default_backbone(), 1);
        assert!(matches!(g, Err(Error::Spec(_))));
    }

    #[test]
    fn all_ones_schedule_yields_y_equivalent_blocks() {
        let sched = DilationSchedule::uniform(13, &[1, 1]).unwrap();
        let cfg = BackboneConfig::regseg();
        for (_, _, b) in cfg.blocks(&sched).unwrap() {
            assert!(b.dilations.is_uniform() && b.dilations.max() == 1);
        }
    }

    #[test]
    fn slot_names_follow_scheme() {
        let g = build_regseg(&BackboneConfig::regseg(), &DilationSchedule::default_backbone(), 19).unwrap();
        let names: Vec<String> = g.param_slots().into_iter().map(|s| s.name).collect();
        for want in [
            "stem.conv.w",
            "stem.bn.gamma",
            "stem.bn.eps",
            "stage4.block0.conv1.w",
            "stage4.block0.conv1.bn.var",
            "stage4.block0.conv2.branch0.w",
            "stage4.block0.shortcut.conv.w",
            "stage4.block0.shortcut.conv.bn.mean",
            "stage8.block2.se.fc1.w",
            "stage8.block2.se.fc2.b",
            "stage16.block1.conv2.branch1.w",
            "stage16.block13.conv3.bn.beta",
            "stage16.block13.shortcut.conv.w",
            "decoder.head16.w",
            "decoder.head4.bn.gamma",
            "decoder.conv4.w",
            "decoder.classifier.w",
            "decoder.classifier.b",
        ] {
            assert!(names.iter().any(|n| n == want), "missing {want}");
        }
        assert!(!names.iter().any(|n| n == "stage16.block1.shortcut.conv.w"));
        let stats = g
            .param_slots()
            .into_iter()
            .filter(|s| s.kind == SlotKind::Statistic)
            .count();
        assert_eq!(stats % 3, 0);
    }
}
