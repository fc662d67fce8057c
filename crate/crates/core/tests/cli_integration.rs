use std::path::Path;
use std::process::{Command, Output};

fn tpgan(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpgan"))
        .args(args)
        .env("TPGAN_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tpgan(&["--help"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("dataset-gen"));
}

#[test]
fn unknown_command_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(tpgan(&["frobnicate"], tmp.path()).status.code(), Some(2));
}

#[test]
fn module_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.json");
    let out = tpgan(&["train-embedder", "--data", s(&missing)], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dataset_gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = tpgan(&["--seed", "7", "dataset-gen", "--identities", "2", "--yaws=0,-45,90", "--out", s(dir)], tmp.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let (pa, pb) = (a.join(&name), b.join(&name));
        if pa.is_file() {
            let ta = std::fs::read_to_string(&pa).ok();
            let tb = std::fs::read_to_string(&pb).ok();
            match (ta, tb) {
                // Manifests hold absolute paths that differ by directory.
                (Some(x), Some(y)) => assert_eq!(x.replace(s(&a), ""), y.replace(s(&b), "")),
                _ => assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap(), "{name:?}"),
            }
        }
    }
}

#[test]
fn train_then_synthesize_writes_an_image() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let out = tpgan(&["dataset-gen", "--identities", "2", "--yaws=0,60", "--out", s(&data)], tmp.path());
    assert!(out.status.success());
    let out_dir = format!("output_dir=\"{}\"", s(&run));
    let out = tpgan(
        &[
            "train",
            "--data",
            s(&data.join("train.json")),
            "--override",
            "use_ip=false",
            "--override",
            "total_steps=1",
            "--override",
            "batch_size=2",
            "--override",
            "width_multiplier=0.125",
            "--override",
            &out_dir,
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint-000001.ckpt");
    assert!(ckpt.exists());

    let face = tpgan::dataset::FaceParams::sample(0, 0);
    let input = tmp.path().join("profile.png");
    face.render(-60).save_png(&input).unwrap();
    let lms: Vec<String> = face.landmarks(-60).to_flat().iter().map(|v| v.to_string()).collect();
    let synth = tmp.path().join("front.png");
    let out = tpgan(
        &["synthesize", "--input", s(&input), "--landmarks", &lms.join(","), "--generator", s(&ckpt), "--flip", "--out", s(&synth)],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = tpgan::dataset::Image::load_png(&synth).unwrap();
    assert_eq!((img.width(), img.height(), img.channels()), (128, 128, 3));
}
