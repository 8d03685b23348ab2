use std::path::Path;
use std::process::{Command, Output};

use gaze_forge::dataset::load_manifest;
use gaze_forge::ensemble::{score, PredictionSet};
use gaze_forge::models::GazeModel;
use gaze_forge::train::evaluate;

fn gaze_forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaze-forge")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let out = gaze_forge(args);
    assert_eq!(code(&out), 0, "{args:?} failed:\n{}", stderr(&out));
    stdout(&out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn defaults_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("itracker.ckpt");
    let msg = ok(&["gen-data", "--out", s(&data)]);
    assert!(msg.contains("4000 samples from 20 subjects"), "{msg}");

    let out = gaze_forge(&["train", "--arch", "itracker", "--data", s(&data), "--out", s(&ckpt), "--epochs", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.starts_with("{\"command\":\"train\""), "resolved config not echoed first: {err}");
    assert!(err.contains("\"batch_size\":32") && err.contains("\"epochs\":2"), "{err}");
    let report = std::fs::read_to_string(dir.path().join("itracker.ckpt.report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("epoch,train_loss,val_error_deg,lr"));
    assert_eq!(report.lines().count(), 3);

    let val = "03,33,48,88";
    let printed = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--subjects", val]);
    let printed = printed.trim();
    assert_eq!(printed.split('.').nth(1).map(str::len), Some(4), "{printed}");

    let preds = dir.path().join("pred.csv");
    ok(&["predict", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&preds), "--subjects", val]);
    let spec = dir.path().join("single.json");
    std::fs::write(&spec, r#"{"members": [{"pred": "pred.csv", "weight": 1.0}]}"#).unwrap();
    let manifest = data.join("manifest.csv");
    let ens = ok(&["ensemble", "--spec", s(&spec), "--truth", s(&manifest)]);
    assert!(ens.contains(&format!("ensemble score: {printed}")), "{ens} vs {printed}");

    let model = GazeModel::<f32>::load(&ckpt).unwrap();
    let ds = load_manifest(&manifest).unwrap();
    let mut val_ds = ds.clone();
    val_ds.samples.retain(|x| ["03", "33", "48", "88"].contains(&x.subject.as_str()));
    let direct = evaluate(&model, &val_ds, 64).unwrap().mean_deg;
    let truth = PredictionSet::new("val", val_ds.samples.iter().map(|x| (x.id.clone(), x.label)).collect()).unwrap();
    let rescored = score(&PredictionSet::read_csv(&preds).unwrap(), &truth).unwrap();
    assert!((rescored - direct).abs() < 1e-9, "{rescored} vs {direct}");
    assert_eq!(format!("{direct:.4}"), printed);
}

#[test]
fn six_member_ensemble_with_search() {
    let dir = tempfile::tempdir().unwrap();
    let truth = "id,pitch,yaw\na,0.1,0.2\nb,-0.2,0.05\nc,0.3,-0.4\n";
    std::fs::write(dir.path().join("truth.csv"), truth).unwrap();
    let mut members = Vec::new();
    for (m, w) in [0.2, 0.1, 0.4, 0.1, 0.1, 0.1].iter().enumerate() {
        let off = (m as f64 - 2.5) * 0.01;
        let csv = format!("id,pitch,yaw\na,{},0.2\nb,-0.2,{}\nc,0.3,-0.4\n", 0.1 + off, 0.05 - off);
        std::fs::write(dir.path().join(format!("m{m}.csv")), csv).unwrap();
        members.push(format!(r#"{{"pred": "m{m}.csv", "weight": {w}}}"#));
    }
    let spec = dir.path().join("six_members.json");
    std::fs::write(&spec, format!(r#"{{"members": [{}]}}"#, members.join(", "))).unwrap();
    let truth = dir.path().join("truth.csv");
    let out = ok(&["ensemble", "--spec", s(&spec), "--truth", s(&truth), "--out", s(&dir.path().join("e.csv"))]);
    assert_eq!(out.lines().filter(|l| l.starts_with("member ")).count(), 6);
    assert!(out.lines().last().unwrap().starts_with("ensemble score: "), "{out}");
    assert!(dir.path().join("e.csv").exists());

    let out = ok(&["ensemble", "--spec", s(&spec), "--truth", s(&truth), "--search", "--step", "0.5"]);
    assert!(out.contains("searched 21 weight vectors"), "{out}");
    let out = gaze_forge(&["ensemble", "--spec", s(&spec), "--truth", s(&truth), "--search", "--step", "0.3"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn gradcheck_subsets() {
    let out = ok(&["gradcheck", "--op", "conv2d_strided"]);
    assert!(out.contains("1 gradient checks passed"), "{out}");
    let out = ok(&["gradcheck", "--op", "blocks"]);
    assert!(out.lines().filter(|l| l.starts_with("ok")).count() > 5, "{out}");
    let out = gaze_forge(&["gradcheck", "--op", "warp_drive"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("conv2d_strided"), "choices not listed: {}", stderr(&out));
}

#[test]
fn exit_codes() {
    assert_eq!(code(&gaze_forge(&["--help"])), 0);
    assert_eq!(code(&gaze_forge(&["--version"])), 0);
    assert_eq!(code(&gaze_forge(&[])), 1);
    assert_eq!(code(&gaze_forge(&["frobnicate"])), 1);
    assert_eq!(code(&gaze_forge(&["train", "--arch", "lenet", "--data", "x", "--out", "y"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = gaze_forge(&["eval", "--ckpt", s(&missing), "--data", s(&missing)]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.starts_with("{\"command\":\"eval\"") && err.contains("error:") && !err.contains("panicked"), "{err}");

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&gaze_forge(&["eval", "--ckpt", s(&junk), "--data", s(&missing)])), 2);

    let cfg = dir.path().join("gen.json");
    std::fs::write(&cfg, r#"{"subjects": 3}"#).unwrap();
    let out = gaze_forge(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("subjects"), "{}", stderr(&out));

    let out = Command::new(env!("CARGO_BIN_EXE_gaze-forge"))
        .args(["gradcheck", "--op", "add"])
        .env("GAZE_FORGE_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn exploding_learning_rate_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen-data", "--out", s(&data), "--num-subjects", "2", "--samples-per-subject", "8"]);
    let out = gaze_forge(&[
        "train", "--arch", "botnet", "--data", s(&data), "--out", s(&dir.path().join("m")), "--epochs", "2",
        "--batch-size", "4", "--lr", "1e30", "--val-subjects", "03",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("epoch") && err.contains("batch") && err.contains("lr"), "{err}");
    assert!(!dir.path().join("m").exists());
}
