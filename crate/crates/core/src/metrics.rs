//! Parameter and multiply-accumulate counts, and segmentation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, SlotKind};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Cityscapes train-ID class names.
pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Truck, bus and train.
pub const DEFAULT_EXCLUDED: [usize; 3] = [14, 15, 16];

pub const IGNORE_LABEL: u8 = 255;

/// Learnable parameters: convolution weights and biases, batch-norm scale and
/// shift, SE matrices and biases. Running statistics are not counted.
pub fn count_params(graph: &ModelGraph) -> u64 {
    graph
        .param_slots()
        .iter()
        .filter(|s| s.kind == SlotKind::Learnable)
        .map(|s| s.shape.numel() as u64)
        .sum()
}

/// Per-layer multiply-accumulate counts for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacCount {
    pub layers: Vec<(String, u64)>,
}

impl MacCount {
    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|(_, m)| m).sum()
    }

    /// Two operations per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }
}

/// Convolutions count `H_out * W_out * C_out * (C_in / groups) * k^2`; SE
/// counts its two matrices. Normalization, activations, pooling and
/// resampling are free.
pub fn count_macs(graph: &ModelGraph, input_size: (usize, usize)) -> Result<MacCount> {
    let input = Shape::new(1, graph.input_channels(), input_size.0, input_size.1);
    let shapes = graph.infer_shapes(input)?;
    let mut layers = Vec::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        let out = shapes[id];
        let m = match &node.kind {
            LayerKind::Conv { spec, .. } | LayerKind::DilatedGroupConv { spec, .. } => {
                (out.h * out.w * spec.out_channels * spec.in_per_group() * spec.kernel * spec.kernel) as u64
            }
            LayerKind::SqueezeExcite { channels, reduced, .. } => (2 * channels * reduced) as u64,
            _ => continue,
        };
        layers.push((node.name.clone(), m));
    }
    Ok(MacCount { layers })
}

/// A row-major `h x w` map of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Size {
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(LabelMap { height, width, data })
    }
}

/// Per-pixel argmax over the channels of a `(1, C, H, W)` logit tensor.
/// Ties go to the lowest class index.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMap> {
    let s = logits.shape();
    if s.n != 1 || s.c > IGNORE_LABEL as usize {
        return Err(Error::Shape(format!(
            "argmax needs one image with at most {IGNORE_LABEL} classes, got {s}"
        )));
    }
    let mut best = logits.plane(0, 0).to_vec();
    let mut data = vec![0u8; s.plane()];
    for c in 1..s.c {
        for (i, &v) in logits.plane(0, c).iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                data[i] = c as u8;
            }
        }
    }
    LabelMap::new(s.h, s.w, data)
}

/// Pixel tallies; row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignore_label: u8,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self::with_ignore(classes, IGNORE_LABEL)
    }

    pub fn with_ignore(classes: usize, ignore_label: u8) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
            ignore_label,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/label pair. Validates everything first, so on
    /// error the matrix is unchanged.
    pub fn accumulate(&mut self, prediction: &LabelMap, label: &LabelMap) -> Result<()> {
        if (prediction.height, prediction.width) != (label.height, label.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs label {}x{}",
                prediction.height, prediction.width, label.height, label.width
            )));
        }
        let c = self.classes;
        if let Some(p) = prediction.data.iter().find(|&&p| p as usize >= c) {
            return Err(Error::Value(format!(
                "predicted class {p} out of range for {c} classes"
            )));
        }
        if let Some(l) = label.data.iter().find(|&&l| l != self.ignore_label && l as usize >= c) {
            return Err(Error::Value(format!("label {l} out of range for {c} classes")));
        }
        for (&p, &l) in prediction.data.iter().zip(&label.data) {
            if l != self.ignore_label {
                self.counts[l as usize * c + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "cannot merge {} and {} class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` where the class never occurs in labels or predictions.
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
    /// Mean over classes not in `excluded`.
    pub miou_reduced: Option<f64>,
    pub excluded: Vec<usize>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// `IOU_c = tp / (row_c + col_c - tp)`. Classes with a zero denominator are
/// left out of both means.
pub fn compute_iou(cm: &ConfusionMatrix, excluded: &[usize]) -> IouReport {
    let c = cm.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let miou = mean(per_class.iter().flatten().copied());
    let miou_reduced = mean(
        per_class
            .iter()
            .enumerate()
            .filter(|(k, _)| !excluded.contains(k))
            .filter_map(|(_, v)| *v),
    );
    let mut excluded = excluded.to_vec();
    excluded.sort_unstable();
    excluded.dedup();
    IouReport {
        per_class,
        miou,
        miou_reduced,
        excluded,
    }
}

fn class_name(k: usize, classes: usize) -> String {
    if classes == CITYSCAPES_CLASSES.len() {
        CITYSCAPES_CLASSES[k].to_string()
    } else {
        format!("class{k}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v))
}

impl IouReport {
    pub fn to_text(&self) -> String {
        let n = self.per_class.len();
        let mut out = String::new();
        let _ = writeln!(out, "{:>5}  {:<14} {:>8}", "class", "name", "IOU");
        for (k, v) in self.per_class.iter().enumerate() {
            let mark = if self.excluded.contains(&k) {
                " (excluded from mIOU^R)"
            } else {
                ""
            };
            let _ = writeln!(out, "{k:>5}  {:<14} {:>8}{mark}", class_name(k, n), fmt_opt(*v));
        }
        let _ = writeln!(out, "mIOU   {}", fmt_opt(self.miou));
        let _ = writeln!(out, "mIOU^R {}", fmt_opt(self.miou_reduced));
        out
    }

    pub fn to_csv(&self) -> String {
        let n = self.per_class.len();
        let mut out = String::from("class,name,iou\n");
        for (k, v) in self.per_class.iter().enumerate() {
            let v = v.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{k},{},{v}", class_name(k, n));
        }
        let _ = writeln!(out, "miou,,{}", self.miou.map_or(String::new(), |v| format!("{v:.6}")));
        let _ = writeln!(
            out,
            "miou_reduced,,{}",
            self.miou_reduced.map_or(String::new(), |v| format!("{v:.6}"))
        );
        out
    }
}
