//! Verification suites run by `regseg selftest`.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regseg_core::fov::analyze_graph_fov;
use regseg_core::graph::{
    build_backbone, build_d_block, build_y_block, init_weights, BackboneConfig, BlockSpec, BoundModel, ExecOptions,
    WeightMap,
};
use regseg_core::io::container::{decode_container, encode_container, Metadata};
use regseg_core::metrics::{compute_iou, ConfusionMatrix, LabelMap};
use regseg_core::ops::{conv2d_direct, conv2d_fast, ConvSpec};
use regseg_core::{DilationSchedule, Dilations, Error, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor<f32> {
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("sized")
}

/// A random convolution over the tested parameter grid, with operands.
pub fn random_conv_case(rng: &mut ChaCha8Rng) -> (ConvSpec, Tensor<f32>, Tensor<f32>, Option<Vec<f32>>) {
    let k = [1, 3][rng.random_range(0..2)];
    let s = rng.random_range(1..=2);
    let r = [1, 2, 4, 14][rng.random_range(0..4)];
    let g = [1, 2, 8, 16][rng.random_range(0..4)];
    let cin = g * rng.random_range(1..=3);
    let cout = g * rng.random_range(1..=3);
    let bias = rng.random_bool(0.5);
    let spec = ConvSpec::new(cin, cout, k)
        .stride(s)
        .dilation(r)
        .groups(g)
        .with_bias(bias);
    let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
    let input = uniform(rng, Shape::new(1, cin, h, w), -10.0, 10.0);
    let weights = uniform(rng, spec.weight_shape(), -1.0, 1.0);
    let b = bias.then(|| (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect());
    (spec, input, weights, b)
}

pub fn conv_differential(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..cases {
        let (spec, x, w, b) = random_conv_case(&mut rng);
        let res = conv2d_direct(&x, &w, b.as_deref(), &spec).and_then(|d| {
            let f = conv2d_fast(&x, &w, b.as_deref(), &spec)?;
            d.max_abs_diff(&f)
        });
        match res {
            Ok(diff) if diff <= 1e-4 => {}
            Ok(diff) => failures.push(format!("case {i} {spec:?}: max-abs {diff:e}")),
            Err(e) => failures.push(format!("case {i} {spec:?}: {e}")),
        }
    }
    SuiteReport {
        name: "conv differential",
        cases,
        failures,
    }
}

/// Backbone schedules with their known field-of-view values.
pub const FOV_TABLE: [(&str, usize); 6] = [
    ("(1,1)+(1,2)+4*(1,4)+7*(1,14)", 3807),
    ("(1,1)+(1,2)+(1,4)+(1,6)+(1,8)+(1,10)+7*(1,12)", 3743),
    ("(1,1)+(1,2)+(1,4)+(1,6)+(1,8)+8*(1,10)", 3295),
    ("(1,1)+(1,2)+(1,4)+10*(1,6)", 2207),
    ("(1,1)+(1,2)+(1,4)+(1,6)+(1,8)+(1,10)+(1,12)+6*(1,14)", 4127),
    ("5*(1,4)+8*(1,10)", 3263),
];

pub fn fov_table() -> SuiteReport {
    let mut failures = Vec::new();
    for (schedule, want) in FOV_TABLE {
        let got = DilationSchedule::parse(schedule)
            .and_then(|s| build_backbone(&BackboneConfig::regseg(), &s))
            .map(|g| analyze_graph_fov(&g).fov());
        match got {
            Ok(k) if k == want => {}
            Ok(k) => failures.push(format!("{schedule}: {k} != {want}")),
            Err(e) => failures.push(format!("{schedule}: {e}")),
        }
    }
    SuiteReport {
        name: "field-of-view table",
        cases: FOV_TABLE.len(),
        failures,
    }
}

pub fn random_tensor_set(rng: &mut ChaCha8Rng) -> WeightMap<f32> {
    let mut out = WeightMap::new();
    for i in 0..rng.random_range(0..6) {
        let shape = Shape::new(
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let data = (0..shape.numel())
            .map(|_| f32::from_bits(rng.random::<u32>() & 0xbfff_ffff))
            .collect();
        out.insert(format!("t{i}.w"), Tensor::from_vec(shape, data).expect("sized"));
    }
    out
}

fn entries(t: &WeightMap<f32>) -> Vec<(&str, &Tensor<f32>)> {
    t.iter().map(|(k, v)| (k.as_str(), v)).collect()
}

/// Applies one random corruption to the magic, length field or header, or
/// truncates the file.
pub fn corrupt(rng: &mut ChaCha8Rng, bytes: &[u8]) -> Vec<u8> {
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let mut b = bytes.to_vec();
    match rng.random_range(0..4) {
        0 => {
            let i = rng.random_range(0..16 + hlen);
            let v = loop {
                let v: u8 = rng.random();
                if v != b[i] {
                    break v;
                }
            };
            b[i] = v;
        }
        1 => {
            let i = rng.random_range(0..16 + hlen);
            b[i] ^= 1 << rng.random_range(0..8);
        }
        2 => {
            let len = loop {
                let v: u64 = rng.random();
                if v != hlen as u64 {
                    break v >> rng.random_range(0..64);
                }
            };
            if len != hlen as u64 {
                b[8..16].copy_from_slice(&len.to_le_bytes());
            } else {
                b[8] ^= 1;
            }
        }
        _ => {
            let cut = rng.random_range(0..b.len());
            b.truncate(cut);
        }
    }
    b
}

pub fn container_fuzz(cases: usize, round_trips: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut meta = Metadata::new();
    meta.insert("preset".into(), "regseg".into());
    for i in 0..round_trips {
        let t = random_tensor_set(&mut rng);
        match encode_container(&entries(&t), &meta).and_then(|b| decode_container(&b)) {
            Ok(c)
                if c.tensors.iter().zip(&t).all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.shape() == b.shape()
                        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                }) && c.tensors.len() == t.len()
                    && c.metadata == meta => {}
            Ok(_) => failures.push(format!("round trip {i} not bit-exact")),
            Err(e) => failures.push(format!("round trip {i}: {e}")),
        }
    }
    for i in 0..cases {
        let mut t = random_tensor_set(&mut rng);
        if t.is_empty() {
            t.insert("x".into(), Tensor::zeros([1, 1, 2, 2]).expect("shape"));
        }
        let bytes = encode_container(&entries(&t), &meta).expect("valid container");
        let bad = corrupt(&mut rng, &bytes);
        match catch_unwind(AssertUnwindSafe(|| decode_container(&bad))) {
            Err(_) => failures.push(format!("fuzz case {i}: reader panicked")),
            Ok(Ok(_)) => failures.push(format!("fuzz case {i}: corruption accepted")),
            Ok(Err(Error::Format(_) | Error::Corruption(_))) => {}
            Ok(Err(e)) => failures.push(format!("fuzz case {i}: untyped error {e}")),
        }
    }
    SuiteReport {
        name: "container fuzz",
        cases: cases + round_trips,
        failures,
    }
}

/// D(1,1) and Y blocks with the same weights must agree bit for bit.
pub fn block_identity(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let mut run = || -> regseg_core::Result<Vec<String>> {
        let y = build_y_block(64, 64, 1, 16)?;
        let d = build_d_block(&BlockSpec::new(64, 64, 1, Dilations::new(vec![1, 1])?, 16))?;
        let wy = init_weights::<f32>(&y, seed);
        let mut wd = wy.clone();
        let full = wd.remove("block.conv2.branch0.w").expect("slot");
        let halves = full.split_leading(2)?;
        wd.insert("block.conv2.branch0.w".into(), halves[0].clone());
        wd.insert("block.conv2.branch1.w".into(), halves[1].clone());
        let my = BoundModel::bind(&y, &wy, ExecOptions::default())?;
        let md = BoundModel::bind(&d, &wd, ExecOptions::default())?;
        let mut bad = Vec::new();
        for i in 0..cases {
            let x = uniform(&mut rng, Shape::new(1, 64, 16, 24), -3.0, 3.0);
            let (a, b) = (my.forward(&x)?, md.forward(&x)?);
            if a.data().iter().zip(b.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
                bad.push(format!("input {i}: outputs differ"));
            }
        }
        Ok(bad)
    };
    match run() {
        Ok(bad) => failures.extend(bad),
        Err(e) => failures.push(e.to_string()),
    }
    SuiteReport {
        name: "D(1,1) / Y block identity",
        cases,
        failures,
    }
}

/// Per-class IOU by set arithmetic over pixel indices.
pub fn brute_force_iou(pred: &[u8], label: &[u8], classes: usize) -> Vec<Option<f64>> {
    (0..classes as u8)
        .map(|c| {
            let valid = |i: &usize| label[*i] != 255;
            let inter = (0..pred.len())
                .filter(valid)
                .filter(|&i| pred[i] == c && label[i] == c)
                .count();
            let union = (0..pred.len())
                .filter(valid)
                .filter(|&i| pred[i] == c || label[i] == c)
                .count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

pub fn metrics_oracle(cases: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..cases {
        let classes = rng.random_range(2..8);
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let pred: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..classes as u8)).collect();
        let label: Vec<u8> = (0..h * w)
            .map(|_| {
                if rng.random_bool(0.1) {
                    255
                } else {
                    rng.random_range(0..classes as u8)
                }
            })
            .collect();
        let mut cm = ConfusionMatrix::new(classes);
        let ok =
            LabelMap::new(h, w, pred.clone()).and_then(|p| cm.accumulate(&p, &LabelMap::new(h, w, label.clone())?));
        if let Err(e) = ok {
            failures.push(format!("case {i}: {e}"));
            continue;
        }
        if compute_iou(&cm, &[]).per_class != brute_force_iou(&pred, &label, classes) {
            failures.push(format!("case {i}: per-class IOU differs"));
        }
    }
    SuiteReport {
        name: "IOU vs set arithmetic",
        cases,
        failures,
    }
}

pub fn all(seed: u64) -> Vec<SuiteReport> {
    vec![
        conv_differential(200, seed),
        fov_table(),
        container_fuzz(1000, 100, seed),
        block_identity(5, seed),
        metrics_oracle(50, seed),
    ]
}
