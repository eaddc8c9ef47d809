use std::path::Path;
use std::process::{Command, Output};

fn restrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_restrans")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .to_string()
}

const FULL_SCALE: [&str; 10] = ["--layers", "18", "--d-model", "512", "--d-ff", "2048", "--heads", "8", "--diag", "on"];

#[test]
fn params_reproduce_full_scale_counts() {
    let mut args = vec!["params", "--share-every", "3", "--rank", "16"];
    args.extend(FULL_SCALE);
    let out = restrans(&args);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(value(&text, "shared_total"), "18902016");
    assert_eq!(value(&text, "residual_total"), "2709504");
    assert!(text.contains("21.6M"));

    let mut args = vec!["params", "--share-every", "1", "--rank", "0"];
    args.extend(FULL_SCALE);
    assert_eq!(value(&stdout(&restrans(&args)), "transformer_total"), "56706048");
}

#[test]
fn diag_off_removes_one_diagonal_per_site_and_layer() {
    let total = |diag: &str| -> u64 {
        let out = restrans(&["params", "--share-every", "3", "--rank", "16", "--diag", diag]);
        value(&stdout(&out), "transformer_total").parse().unwrap()
    };
    assert_eq!(total("on") - total("off"), 18 * 6 * 512);
}

#[test]
fn tables_and_csv_output() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("tables.csv");
    let out = restrans(&["params", "--tables", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    for needle in ["56.7M", "18.9M", "9.5M", "6.3M", "3.2M", "21.6M", "12.2M", "9.0M", "5.9M"] {
        assert!(text.contains(needle), "{needle}");
    }
    let csv = std::fs::read_to_string(csv).unwrap();
    assert_eq!(csv.lines().count(), 21);

    let per_layer = dir.path().join("layers.csv");
    restrans(&["params", "--share-every", "3", "--out", per_layer.to_str().unwrap()]);
    let rows = std::fs::read_to_string(per_layer).unwrap();
    assert!(rows.starts_with("layer,group,shared_referenced,residual,norm\n0,0,"));
    assert!(rows.contains("\n17,5,"));
}

#[test]
fn loadsim_ratio_is_exact() {
    let out = restrans(&["loadsim", "--share-every", "3", "--rank", "0"]);
    assert!(out.status.success());
    let ratio: f64 = value(&stdout(&out), "ratio_vs_baseline").parse().unwrap();
    assert_eq!(ratio, 1.0 / 3.0);
    let out = restrans(&["loadsim", "--share-every", "3", "--rank", "16", "--bytes-per-param", "1"]);
    assert_eq!(value(&stdout(&out), "bytes_loaded_total"), "21611520");
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(restrans(&["params", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(restrans(&["params", "--diag", "maybe"]).status.code(), Some(2));
    let out = restrans(&["params", "--share-every", "19"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("share_every"));
    assert_eq!(restrans(&["loadsim", "--bytes-per-param", "0"]).status.code(), Some(2));
}

const TINY: [&str; 16] = [
    "--layers", "4", "--share-every", "2", "--d-model", "8", "--d-ff", "16", "--heads", "2", "--vocab", "6", "--length", "5",
    "--eval-size", "8",
];

fn train_stage1(dir: &Path, name: &str) -> (Output, Vec<u8>, String) {
    let ckpt = dir.join(format!("{name}.rtck"));
    let trace = dir.join(format!("{name}.csv"));
    let mut args = vec!["train", "--steps", "15", "--batch", "4", "--lr", "1e-2", "--precision", "f64"];
    args.extend(TINY);
    args.extend(["--out", ckpt.to_str().unwrap(), "--trace", trace.to_str().unwrap()]);
    let out = restrans(&args);
    (out, std::fs::read(ckpt).unwrap(), std::fs::read_to_string(trace).unwrap())
}

#[test]
fn two_stage_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let (out, bytes_a, trace_a) = train_stage1(dir.path(), "a");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, bytes_b, trace_b) = train_stage1(dir.path(), "b");
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(trace_a, trace_b);
    assert!(trace_a.starts_with("step,lr,loss\n"));
    assert_eq!(trace_a.lines().count(), 16);

    let s1 = dir.path().join("a.rtck");
    let s2 = dir.path().join("s2.rtck");
    let base = ["--vocab", "6", "--length", "5", "--eval-size", "8", "--steps", "5", "--batch", "4"];
    let mut args = vec!["train", "--from", s1.to_str().unwrap(), "--rank", "2", "--precision", "f64"];
    args.extend(base);
    args.extend(["--out", s2.to_str().unwrap()]);
    let out = restrans(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert_eq!(value(&text, "stage"), "2");
    assert_eq!(value(&text, "checkpoint_eval_loss"), value(&text, "initial_eval_loss"));

    let eval = restrans(&["eval", s2.to_str().unwrap(), "--vocab", "6", "--length", "5", "--eval-size", "8"]);
    assert!(eval.status.success());
    assert_eq!(value(&stdout(&eval), "rank"), "2");

    let mut args = vec!["train", "--from", s1.to_str().unwrap(), "--rank", "2", "--share-every", "4"];
    args.extend(base);
    let out = restrans(&args);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("share_every"));

    let mut args = vec!["train", "--from", s2.to_str().unwrap(), "--rank", "2"];
    args.extend(base);
    assert_eq!(restrans(&args).status.code(), Some(2));
}

#[test]
fn damaged_checkpoints_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let (_, bytes, _) = train_stage1(dir.path(), "c");
    let cut = dir.path().join("cut.rtck");
    std::fs::write(&cut, &bytes[..bytes.len() - 1]).unwrap();
    let out = restrans(&["eval", cut.to_str().unwrap(), "--vocab", "6", "--length", "5"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    std::fs::write(&cut, &bad).unwrap();
    let out = restrans(&["eval", cut.to_str().unwrap(), "--vocab", "6", "--length", "5"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt"));

    let good = dir.path().join("c.rtck");
    let out = restrans(&["eval", good.to_str().unwrap(), "--vocab", "7", "--length", "5"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(restrans(&["eval", "/nonexistent/x.rtck"]).status.code(), Some(3));
}

#[test]
fn gradcheck_passes_on_a_small_encoder() {
    let out = restrans(&["gradcheck", "--layers", "2", "--share-every", "2", "--rank", "1"]);
    let text = stdout(&out);
    assert!(out.status.success(), "{text}");
    assert_eq!(value(&text, "pass"), "true");
    assert!(value(&text, "max_rel_error").parse::<f64>().unwrap() < 1e-4);
    assert!(text.contains("encoder.layer1.ffn_out.diag"));
}
