use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vmad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vmad")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        stdout(o),
        stderr(o)
    );
    stdout(o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(root: &Path) {
    ok(&vmad(&[
        "generate",
        "--out",
        p(root),
        "--classes",
        "3",
        "--per-class",
        "8",
        "--seed",
        "3",
    ]));
}

/// Smoke model on a small dataset, one epoch.
fn run_args<'a>(data: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec![
        "--preset",
        "smoke",
        "--dataset",
        p(data),
        "--out",
        p(out),
        "--override",
        "optim.epochs=1",
    ]
}

#[test]
fn generate_train_evaluate_infer() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("run"));
    generate(&data);
    let ann: Value = serde_json::from_str(&std::fs::read_to_string(data.join("annotations.json")).unwrap()).unwrap();
    assert_eq!(ann["records"].as_array().unwrap().len(), 24);

    let args = run_args(&data, &out);
    let mut train = vec!["train"];
    train.extend(&args);
    let text = ok(&vmad(&train));
    assert!(text.contains("epoch 1:"), "{text}");
    for f in [
        "checkpoint.bin",
        "optimizer.bin",
        "state.json",
        "config.json",
        "losses.csv",
        "queues.tsv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    let mut eval = vec!["evaluate"];
    eval.extend(&args);
    let text = ok(&vmad(&eval));
    assert!(text.starts_with("class,images,img,pixel,pro,img_ap,pixel_ap"), "{text}");
    let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let pix = m["mean"]["pixel_auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pix));

    eval.push("--oracle");
    ok(&vmad(&eval));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["mean"]["pixel_auroc"].as_f64(), Some(1.0));
    assert_eq!(m["mean"]["aupro"].as_f64(), Some(1.0));

    // A non-square input exercises the resize both ways.
    let img_path = dir.path().join("odd.png");
    image::RgbImage::from_fn(40, 24, |x, y| image::Rgb([(x * 6) as u8, (y * 10) as u8, 128]))
        .save(&img_path)
        .unwrap();
    let infer_out = dir.path().join("infer");
    let mut infer = vec!["infer"];
    let mut iargs = run_args(&data, &infer_out);
    iargs.extend(["--checkpoint", p(&out.join("checkpoint.bin")).to_owned().leak()]);
    infer.extend(&iargs);
    infer.extend([
        "--image",
        p(&img_path),
        "--instruction",
        "are there any abnormalities in the tile ? please output the defect segmentation result .",
    ]);
    let text = ok(&vmad(&infer));
    assert!(text.contains("answer:"), "{text}");
    let again = ok(&vmad(&infer));
    assert_eq!(text, again);
    assert!(infer_out.join("answer.txt").is_file());
    for f in ["mask.png", "heatmap.png"] {
        let im = image::open(infer_out.join(f)).unwrap();
        assert_eq!((im.width(), im.height()), (40, 24), "{f}");
    }
}

#[test]
fn resume_checks_the_saved_config() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("run"));
    generate(&data);
    let args = run_args(&data, &out);
    let mut train = vec!["train"];
    train.extend(&args);
    ok(&vmad(&train));

    // A finished run resumes to a no-op.
    let mut resume = vec!["train", "--resume"];
    resume.extend(&args);
    ok(&vmad(&resume));
    let losses = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 2, "{losses}");

    // The schedule depends on the epoch count, so changing it is refused.
    let mut changed = vec!["train", "--resume"];
    changed.extend(&args[..args.len() - 1]);
    changed.push("optim.epochs=2");
    let o = vmad(&changed);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("differs"), "{}", stderr(&o));
}

#[test]
fn config_applies_overrides_in_order() {
    let o = vmad(&[
        "config",
        "--preset",
        "smoke",
        "--seed",
        "9",
        "--override",
        "loss.pbsd=0",
        "--override",
        "model.projector=\"mlp\"",
        "--override",
        "optim.lr=0.001",
    ]);
    let cfg: Value = serde_json::from_str(&ok(&o)).unwrap();
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["loss"]["pbsd"].as_f64(), Some(0.0));
    assert_eq!(cfg["model"]["projector"], "mlp");
    assert_eq!(cfg["optim"]["lr"].as_f64(), Some(0.001));
}

#[test]
fn config_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&vmad(&["config", "--preset", "smoke", "--override", "optim.epochs=3"]));
    let path = dir.path().join("run.json");
    std::fs::write(&path, &first).unwrap();
    let second = ok(&vmad(&["config", "--config", p(&path)]));
    assert_eq!(first, second);
}

#[test]
fn bad_configuration_exits_with_status_2() {
    for args in [
        vec!["config", "--override", "model.no_such_field=1"],
        vec!["config", "--override", "optim.epochs=\"many\""],
        vec!["config", "--preset", "smoke", "--override", "model.ltc.rho=3"],
        vec!["config", "--override", "missing-equals-sign"],
    ] {
        let o = vmad(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stdout(&o));
        assert!(stderr(&o).contains("error:"), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = vmad(&[
        "evaluate",
        "--preset",
        "smoke",
        "--dataset",
        p(&data),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));

    generate(&data);
    let again = vmad(&["generate", "--out", p(&data), "--classes", "3", "--per-class", "8"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("not empty"), "{}", stderr(&again));
    ok(&vmad(&[
        "generate",
        "--out",
        p(&data),
        "--classes",
        "3",
        "--per-class",
        "8",
        "--overwrite",
    ]));

    let o = vmad(&[
        "infer",
        "--preset",
        "smoke",
        "--dataset",
        p(&data),
        "--out",
        p(dir.path()),
        "--image",
        p(&dir.path().join("absent.png")),
        "--instruction",
        "is there a defect ?",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selfcheck_passes() {
    let o = vmad(&["selfcheck"]);
    let text = ok(&o);
    assert!(text.contains("0 failed"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn help_lists_every_subcommand() {
    let text = ok(&vmad(&["--help"]));
    for cmd in ["generate", "train", "evaluate", "infer", "selfcheck", "config"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}
