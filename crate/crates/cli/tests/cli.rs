use std::path::Path;
use std::process::{Command, Output};

use iharmon_core::dataset::load_dataset;
use iharmon_core::inference::{harmonize, HarmonizeRequest};
use iharmon_core::io;
use iharmon_core::model::IphModel;

fn iharmon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iharmon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = iharmon(args);
    assert!(
        out.status.success(),
        "iharmon {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{"style_dim": 8, "base_channels": 4, "res_blocks": 1, "resolution": 32}"#;

#[test]
fn synth_train_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (src, data, model_json, stage1) = (d.join("src"), d.join("data"), d.join("model.json"), d.join("stage1.json"));
    ok(&["toy-sources", "--out", p(&src), "--count", "3", "--size", "48", "--seed", "1"]);
    ok(&["synth", "--src", p(&src), "--ann", p(&src.join("annotations.json")), "--out", p(&data), "--count", "4", "--seed", "2"]);
    assert_eq!(load_dataset(&data).unwrap().len(), 4);

    std::fs::write(&model_json, TINY).unwrap();
    let weights = d.join("init.ihw");
    ok(&["init", "--out", p(&weights), "--model", p(&model_json), "--seed", "3"]);

    std::fs::write(
        &stage1,
        format!(
            r#"{{"stage": 1, "dataset": "{}", "steps": 2, "batch_size": 2, "resolution": 32, "model": {TINY}}}"#,
            p(&data)
        ),
    )
    .unwrap();
    let trained = d.join("s1.ihw");
    let stdout = ok(&["train", "--stage", "1", "--config", p(&stage1), "--out", p(&trained)]);
    assert!(stdout.contains("step 2"), "{stdout}");

    let stage2 = d.join("stage2.toml");
    std::fs::write(
        &stage2,
        format!("stage = 2\ndataset = \"{}\"\nsteps = 1\nbatch_size = 2\nresolution = 32\n", p(&data)),
    )
    .unwrap();
    let s2 = d.join("s2.ihw");
    ok(&["train", "--stage", "2", "--config", p(&stage2), "--resume", p(&trained), "--out", p(&s2)]);
    let wrong = iharmon(&["train", "--stage", "2", "--config", p(&stage1)]);
    assert!(!wrong.status.success());
    let no_resume = iharmon(&["train", "--stage", "2", "--config", p(&stage2)]);
    assert!(!no_resume.status.success());

    let sample = d.join("data").join(&load_dataset(&data).unwrap()[0].meta.id);
    let out = d.join("out.png");
    ok(&[
        "run",
        "--composite",
        p(&sample.join("composite.png")),
        "--fg-mask",
        p(&sample.join("fg_mask.png")),
        "--guide-mask",
        p(&sample.join("guide_mask.png")),
        "--weights",
        p(&s2),
        "--out",
        p(&out),
    ]);
    let (model, _) = IphModel::load(&s2, None).unwrap();
    let req = HarmonizeRequest::new(
        io::read_image(sample.join("composite.png")).unwrap(),
        io::read_mask(sample.join("fg_mask.png")).unwrap(),
        Some(io::read_mask(sample.join("guide_mask.png")).unwrap()),
    );
    let expected = harmonize(&req, &model).unwrap().image.to_u8();
    assert_eq!(io::read_image(&out).unwrap().to_u8(), expected);

    let report = d.join("eval.json");
    let stdout = ok(&["eval", "--weights", p(&s2), "--data", p(&data), "--out", p(&report)]);
    assert!(stdout.contains("direct_composite") || stdout.contains("composite"), "{stdout}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["methods"].as_array().unwrap().len(), 2);
}

#[test]
fn ratios_need_color_weights() {
    let out = iharmon(&["run", "--composite", "a", "--fg-mask", "b", "--weights", "c", "--out", "d", "--r1", "0.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("color-weights"));
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = iharmon(&[
        "run",
        "--composite",
        p(&dir.path().join("nope.png")),
        "--fg-mask",
        p(&dir.path().join("nope_mask.png")),
        "--weights",
        p(&dir.path().join("nope.ihw")),
        "--out",
        p(&dir.path().join("o.png")),
    ]);
    assert!(!out.status.success());
    assert!(!dir.path().join("o.png").exists());
}

#[test]
fn init_rejects_conflicting_model_flags() {
    let out = iharmon(&["init", "--out", "x.ihw", "--toy", "--model", "m.json"]);
    assert!(!out.status.success());
}
