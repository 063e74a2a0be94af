use regseg_core::graph::{init_weights, BoundModel, ExecOptions};
use regseg_core::io::container::keys;
use regseg_core::io::{read_container, write_container, Metadata, Normalization};
use regseg_core::{Error, Preset, Shape, Tensor};

fn default_metadata(p: &Preset) -> Metadata {
    let mut m = Metadata::new();
    m.insert(keys::PRESET.into(), p.name.clone());
    m.insert(keys::SCHEDULE.into(), p.schedule.to_string());
    m.insert(keys::NUM_CLASSES.into(), p.num_classes.to_string());
    Normalization::default().write_metadata(&mut m);
    m
}

#[test]
fn written_container_binds_with_no_unresolved_slots() {
    let preset = Preset::regseg();
    let graph = preset.build().unwrap();
    let weights = init_weights::<f32>(&graph, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rtc");
    write_container(&path, &weights, &default_metadata(&preset)).unwrap();

    let c = read_container(&path).unwrap();
    assert_eq!(c.metadata[keys::PRESET], "regseg");
    assert_eq!(c.metadata[keys::SCHEDULE], "(1,1)+(1,2)+4*(1,4)+7*(1,14)");
    assert_eq!(
        Normalization::from_metadata(&c.metadata).unwrap(),
        Normalization::default()
    );
    let slots = graph.param_slots();
    assert_eq!(c.tensors.len(), slots.len());
    for s in &slots {
        assert_eq!(c.tensors[&s.name].shape(), s.shape, "{}", s.name);
    }

    let x = Tensor::full([1, 3, 32, 32], 0.25f32).unwrap();
    let a = BoundModel::bind(&graph, &c.tensors, ExecOptions::default())
        .unwrap()
        .forward(&x)
        .unwrap();
    let b = BoundModel::bind(&graph, &weights, ExecOptions::default())
        .unwrap()
        .forward(&x)
        .unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn writing_twice_is_byte_identical() {
    let preset = Preset::regseg();
    let graph = preset.build().unwrap();
    let weights = init_weights::<f32>(&graph, 1);
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.rtc"), dir.path().join("b.rtc"));
    write_container(&p1, &weights, &default_metadata(&preset)).unwrap();
    write_container(&p2, &weights, &default_metadata(&preset)).unwrap();
    assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
}

#[test]
fn slot_names_follow_the_export_scheme() {
    let graph = Preset::regseg().build().unwrap();
    let names: Vec<String> = graph.param_slots().into_iter().map(|s| s.name).collect();
    for n in [
        "stem.conv.w",
        "stem.bn.eps",
        "stage4.block0.conv1.w",
        "stage8.block0.shortcut.conv.w",
        "stage16.block0.shortcut.conv.bn.var",
        "stage16.block2.conv2.branch0.w",
        "stage16.block13.conv2.branch1.w",
        "stage16.block13.se.fc1.b",
        "decoder.head16.w",
        "decoder.conv4.bn.gamma",
        "decoder.classifier.b",
    ] {
        assert!(names.iter().any(|x| x == n), "missing {n}");
    }
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
}

#[test]
fn binding_reports_missing_and_mismatched_slots() {
    let graph = Preset::regseg().build().unwrap();
    let mut weights = init_weights::<f32>(&graph, 2);
    weights.remove("stage8.block2.conv3.w");
    weights.insert(
        "decoder.conv8.w".into(),
        Tensor::zeros(Shape::new(64, 128, 1, 1)).unwrap(),
    );
    match BoundModel::bind(&graph, &weights, ExecOptions::default()) {
        Err(Error::Binding { missing, mismatched }) => {
            assert_eq!(missing, vec!["stage8.block2.conv3.w".to_string()]);
            assert_eq!(mismatched.len(), 1);
            assert!(mismatched[0].contains("decoder.conv8.w"));
        }
        other => panic!("expected binding error, got {:?}", other.err()),
    }
}
