use std::path::Path;
use std::process::{Command, Output};
use std::time::Duration;

use regseg_cli::bench::measure;
use regseg_core::graph::init_weights;
use regseg_core::io::{read_container, save_label, write_container, Metadata};
use regseg_core::metrics::LabelMap;
use regseg_core::Preset;

fn regseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regseg")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_ppm(path: &Path, w: usize, h: usize, seed: u8) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend((0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)));
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn describe_default_preset() {
    let o = regseg(&["describe"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("field of view   3807"), "{s}");
    assert!(s.contains("3334951 (3.335M)"), "{s}");
    assert!(s.contains("hole-free       yes"));
}

#[test]
fn describe_with_schedule_override() {
    let o = regseg(&[
        "describe",
        "--schedule",
        "(1,1)+(1,2)+(1,4)+10*(1,6)",
        "--report",
        "csv",
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("fov,2207"));
}

#[test]
fn fov_reports_violations_and_measures() {
    let o = regseg(&["fov", "--schedule", "7*(1,14)+6*(1,1)"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("violation: stage16.block1.conv2"));
    let o = regseg(&["fov", "--prefix", "6", "--size", "256x256", "--measure"]);
    assert!(
        stdout(&o).contains("extent 95x95, holes 0, clipped false"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn config_errors_exit_with_two() {
    for args in [
        vec!["describe", "--preset", "unknown"],
        vec!["bench", "--warmup", "0"],
        vec!["bench", "--iters", "0"],
        vec!["describe", "--size", "1000x2048"],
        vec!["describe", "--schedule", "(1,1)+"],
        vec!["infer"],
    ] {
        assert_eq!(code(&regseg(&args)), 2, "{args:?}");
    }
}

#[test]
fn infer_random_weights_keeps_size_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.ppm");
    write_ppm(&img, 96, 64, 3);
    let mut outs = Vec::new();
    for (name, threads) in [("a.png", "1"), ("b.png", "1"), ("c.png", "2")] {
        let out = dir.path().join(name);
        let o = regseg(&[
            "infer",
            "--input",
            p(&img),
            "--output",
            p(&out),
            "--threads",
            threads,
            "--color",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let labels = regseg_core::io::load_label(&out).unwrap();
        assert_eq!((labels.height, labels.width), (64, 96));
        assert!(dir.path().join(name.replace(".png", "_color.png")).exists());
        outs.push(std::fs::read(out).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);
}

#[test]
fn infer_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("in"), dir.path().join("out"));
    std::fs::create_dir(&src).unwrap();
    write_ppm(&src.join("x.ppm"), 32, 32, 1);
    write_ppm(&src.join("y.ppm"), 48, 32, 2);
    std::fs::write(src.join("notes.txt"), "ignored").unwrap();
    let o = regseg(&["infer", "--input", p(&src), "--output", p(&dst)]);
    assert_eq!(code(&o), 0);
    assert!(dst.join("x.png").exists() && dst.join("y.png").exists());
}

#[test]
fn infer_with_container_matches_seeded_weights() {
    let dir = tempfile::tempdir().unwrap();
    let graph = Preset::regseg().build().unwrap();
    let model = dir.path().join("model.rtc");
    let mut meta = Metadata::new();
    meta.insert("preset".into(), "regseg".into());
    write_container(&model, &init_weights(&graph, 7), &meta).unwrap();
    let img = dir.path().join("img.ppm");
    write_ppm(&img, 64, 32, 9);
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    assert_eq!(
        code(&regseg(&[
            "infer",
            "--input",
            p(&img),
            "--output",
            p(&a),
            "--weights",
            p(&model)
        ])),
        0
    );
    assert_eq!(
        code(&regseg(&[
            "infer",
            "--input",
            p(&img),
            "--output",
            p(&b),
            "--seed",
            "7"
        ])),
        0
    );
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn weight_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.ppm");
    write_ppm(&img, 32, 32, 0);
    let out = dir.path().join("o.png");
    let graph = Preset::regseg().build().unwrap();
    let good = dir.path().join("good.rtc");
    write_container(&good, &init_weights(&graph, 0), &Metadata::new()).unwrap();
    let bytes = std::fs::read(&good).unwrap();

    let bad_magic = dir.path().join("magic.rtc");
    let mut b = bytes.clone();
    b[0] = b'X';
    std::fs::write(&bad_magic, b).unwrap();

    let truncated = dir.path().join("trunc.rtc");
    std::fs::write(&truncated, &bytes[..bytes.len() - 100]).unwrap();

    let partial = dir.path().join("partial.rtc");
    let mut c = read_container(&good).unwrap();
    c.tensors.remove("stem.conv.w");
    write_container(&partial, &c.tensors, &c.metadata).unwrap();

    for (path, want) in [(&bad_magic, 3), (&partial, 4), (&truncated, 5)] {
        let o = regseg(&["infer", "--input", p(&img), "--output", p(&out), "--weights", p(path)]);
        assert_eq!(code(&o), want, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = regseg(&[
        "infer",
        "--input",
        p(&img),
        "--output",
        p(&out),
        "--weights",
        p(&partial),
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stem.conv.w"));
}

fn write_labels(dir: &Path, maps: &[(&str, [u8; 4])]) {
    std::fs::create_dir_all(dir).unwrap();
    for (name, data) in maps {
        save_label(&dir.join(name), &LabelMap::new(1, 4, data.to_vec()).unwrap()).unwrap();
    }
}

#[test]
fn eval_hand_tally() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    write_labels(
        &gt,
        &[
            ("1.png", [0, 0, 1, 1]),
            ("2.png", [2, 2, 0, 255]),
            ("3.png", [1, 2, 2, 2]),
        ],
    );
    write_labels(
        &pred,
        &[
            ("1.png", [0, 1, 1, 1]),
            ("2.png", [2, 0, 0, 1]),
            ("3.png", [1, 2, 2, 0]),
        ],
    );
    let base = [
        "eval",
        "--input",
        p(&pred),
        "--labels",
        p(&gt),
        "--classes",
        "3",
        "--report",
        "csv",
    ];

    let o = regseg(&[&base[..], &["--exclude-classes", "1"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    for line in [
        "0,class0,0.400000",
        "1,class1,0.750000",
        "2,class2,0.600000",
        "miou,,0.583333",
        "miou_reduced,,0.500000",
    ] {
        assert!(s.contains(line), "{line} not in\n{s}");
    }

    let s = stdout(&regseg(&[&base[..], &["--exclude-classes", ""]].concat()));
    assert!(
        s.contains("miou,,0.583333") && s.contains("miou_reduced,,0.583333"),
        "{s}"
    );
}

#[test]
fn eval_perfect_predictions_and_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    write_labels(&a, &[("x.png", [0, 5, 18, 7]), ("y.png", [3, 3, 3, 3])]);
    write_labels(&b, &[("x.png", [0, 5, 18, 255]), ("y.png", [3, 3, 3, 3])]);
    let o = regseg(&["eval", "--input", p(&a), "--labels", p(&b)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("mIOU   1.0000"), "{}", stdout(&o));

    write_labels(&b, &[("z.png", [0, 0, 0, 0])]);
    assert_eq!(code(&regseg(&["eval", "--input", p(&a), "--labels", p(&b)])), 2);
}

#[test]
fn selftest_passes() {
    let o = regseg(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 5);
}

#[test]
fn bench_mean_on_sleeping_stub() {
    let t = measure(2, 5, || {
        std::thread::sleep(Duration::from_millis(3));
        Ok(())
    })
    .unwrap();
    assert_eq!(t.samples.len(), 5);
    assert_eq!(t.mean(), t.samples.iter().sum::<f64>() / 5.0);
    assert!(t.mean() >= 0.003);
}

#[test]
fn bench_blocks_only() {
    let o = regseg(&[
        "bench",
        "--skip-model",
        "--warmup",
        "1",
        "--iters",
        "1",
        "--report",
        "csv",
    ]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    for row in ["Y block,", "D block(1,1),", "D block(1,4),", "D block(1,10),"] {
        assert!(s.contains(row), "{s}");
    }
}
