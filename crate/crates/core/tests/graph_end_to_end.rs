use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regseg_core::graph::{build_d_block, init_weights, BlockSpec, BoundModel, ExecOptions, WeightMap};
use regseg_core::ops::{
    add, avgpool2x2, batchnorm_infer, branch_specs, conv2d_direct, relu, se_block, BatchNormParams, ConvSpec,
};
use regseg_core::{Dilations, Preset, Shape, Tensor};

fn random_input(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn logits_match_input_size() {
    let graph = Preset::regseg().build().unwrap();
    let shapes = graph.output_shapes(Shape::new(1, 3, 1024, 2048)).unwrap();
    assert_eq!(shapes["logits"], Shape::new(1, 19, 1024, 2048));
    assert_eq!(shapes["x16"], Shape::new(1, 320, 64, 128));
    assert_eq!(shapes["x8"], Shape::new(1, 128, 128, 256));
    assert_eq!(shapes["x4"], Shape::new(1, 48, 256, 512));

    let model = BoundModel::bind(&graph, &init_weights(&graph, 3), ExecOptions::default()).unwrap();
    let y = model.forward(&random_input(Shape::new(1, 3, 64, 96), 1)).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 19, 64, 96));
    assert!(y.data().iter().all(|v| v.is_finite()));
}

#[test]
fn camvid_preset_has_eleven_classes() {
    let graph = Preset::by_name("regseg-camvid").unwrap().build().unwrap();
    let model = BoundModel::bind(&graph, &init_weights(&graph, 0), ExecOptions::default()).unwrap();
    let y = model.forward(&random_input(Shape::new(1, 3, 48, 64), 2)).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 11, 48, 64));
}

#[test]
fn forward_is_deterministic() {
    let graph = Preset::regseg().build().unwrap();
    let model = BoundModel::bind(&graph, &init_weights(&graph, 5), ExecOptions::default()).unwrap();
    let x = random_input(Shape::new(1, 3, 32, 64), 9);
    let a = model.forward(&x).unwrap();
    let b = model.forward(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn folded_and_unfolded_agree() {
    let graph = Preset::regseg().build().unwrap();
    let w = init_weights(&graph, 8);
    let x = random_input(Shape::new(1, 3, 64, 64), 4);
    let folded = BoundModel::bind(&graph, &w, ExecOptions { fold_batchnorm: true }).unwrap();
    let plain = BoundModel::bind(&graph, &w, ExecOptions { fold_batchnorm: false }).unwrap();
    let diff = folded
        .forward(&x)
        .unwrap()
        .max_abs_diff(&plain.forward(&x).unwrap())
        .unwrap();
    assert!(diff < 1e-4, "{diff}");
}

fn bn<'a>(w: &'a WeightMap<f32>, prefix: &str) -> BatchNormParams<'a, f32> {
    let get = |s: &str| w[&format!("{prefix}.{s}")].data();
    BatchNormParams {
        gamma: get("gamma"),
        beta: get("beta"),
        mean: get("mean"),
        var: get("var"),
        eps: get("eps")[0],
    }
}

#[test]
fn block_matches_manual_composition() {
    let spec = BlockSpec::new(64, 128, 2, Dilations::new(vec![1, 4]).unwrap(), 16);
    let graph = build_d_block(&spec).unwrap();
    let w = init_weights::<f32>(&graph, 21);
    let x = random_input(Shape::new(1, 64, 64, 64), 22);

    let c1 = conv2d_direct(&x, &w["block.conv1.w"], None, &ConvSpec::new(64, 128, 1)).unwrap();
    let x1 = relu(&batchnorm_infer(&c1, &bn(&w, "block.conv1.bn")).unwrap());

    let grouped = ConvSpec::new(128, 128, 3).stride(2).groups(8);
    let branches = branch_specs(&grouped, &[1, 4]).unwrap();
    let mut parts = Vec::new();
    let mut lo = 0;
    for (j, b) in branches.iter().enumerate() {
        let slice = x1.slice_channels(lo, lo + b.in_channels).unwrap();
        lo += b.in_channels;
        parts.push(conv2d_direct(&slice, &w[&format!("block.conv2.branch{j}.w")], None, b).unwrap());
    }
    let c2 = Tensor::concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap();
    let x2 = relu(&batchnorm_infer(&c2, &bn(&w, "block.conv2.bn")).unwrap());
    let x3 = se_block(
        &x2,
        &w["block.se.fc1.w"],
        w["block.se.fc1.b"].data(),
        &w["block.se.fc2.w"],
        w["block.se.fc2.b"].data(),
    )
    .unwrap();
    let c3 = conv2d_direct(&x3, &w["block.conv3.w"], None, &ConvSpec::new(128, 128, 1)).unwrap();
    let main = batchnorm_infer(&c3, &bn(&w, "block.conv3.bn")).unwrap();
    let sc = conv2d_direct(
        &avgpool2x2(&x),
        &w["block.shortcut.conv.w"],
        None,
        &ConvSpec::new(64, 128, 1),
    )
    .unwrap();
    let sc = batchnorm_infer(&sc, &bn(&w, "block.shortcut.conv.bn")).unwrap();
    let want = relu(&add(&main, &sc).unwrap());

    for fold in [false, true] {
        let model = BoundModel::bind(&graph, &w, ExecOptions { fold_batchnorm: fold }).unwrap();
        let got = model.forward(&x).unwrap();
        assert_eq!(got.shape(), Shape::new(1, 128, 32, 32));
        let diff = got.max_abs_diff(&want).unwrap();
        assert!(diff <= 1e-4, "fold {fold}: {diff}");
    }
}
