use std::path::Path;
use std::process::{Command, Output};

fn rppg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rppg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rppg(args);
    assert!(
        out.status.success(),
        "rppg {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, domain: &str, n: usize, secs: f64, seed: u64, clean: bool) -> String {
    let (n, secs, seed) = (n.to_string(), secs.to_string(), seed.to_string());
    let mut args = vec![
        "synth", "--out", dir.to_str().unwrap(), "--domain", domain, "--subjects", &n, "--duration", &secs, "--seed", &seed,
    ];
    if clean {
        args.push("--clean");
    }
    ok(&args);
    dir.to_str().unwrap().to_string()
}

fn mae(run: &Path) -> f64 {
    let text = std::fs::read_to_string(run.join("metrics.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["overall"]["mae"].as_f64().unwrap()
}

#[test]
fn synth_then_demix_recovers_heart_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(&tmp.path().join("clean"), "A", 2, 20.0, 3, true);
    let out = tmp.path().join("pulses");
    let stdout = ok(&["demix", "--dataset", &ds, "--method", "pos", "--out", out.to_str().unwrap()]);
    assert_eq!(stdout.lines().filter(|l| l.ends_with("BPM")).count(), 2, "{stdout}");
    assert!(out.join("A-s00.csv").is_file());
    assert!(out.join("A-s01.csv").is_file());
}

#[test]
fn evaluate_pos_on_clean_set_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(&tmp.path().join("clean"), "B", 3, 40.0, 5, true);
    let run = tmp.path().join("runs/pos");
    let stdout = ok(&[
        "evaluate", "--mode", "pos", "--test-dataset", &ds, "--output-dir", run.to_str().unwrap(), "--seed", "1",
    ]);
    assert!(stdout.contains("MAE"), "{stdout}");
    assert!(mae(&run) <= 2.0, "MAE {}", mae(&run));
    assert!(!run.join("INCOMPLETE").exists());

    let runs = tmp.path().join("runs");
    let table = ok(&["report", runs.to_str().unwrap(), "--compare", runs.to_str().unwrap()]);
    assert!(table.contains("dMAE"), "{table}");
    assert!(table.contains("+0.000"), "{table}");
    assert!(runs.join("summary.csv").is_file());
}

#[test]
fn spec_file_is_accepted_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(&tmp.path().join("clean"), "A", 2, 40.0, 8, true);
    let spec = tmp.path().join("spec.json");
    let first = tmp.path().join("a");
    std::fs::write(
        &spec,
        serde_json::json!({
            "test_dataset": ds,
            "mode": "chrom",
            "seed": 4,
            "output_dir": first,
        })
        .to_string(),
    )
    .unwrap();
    ok(&["evaluate", "--spec", spec.to_str().unwrap()]);
    let manifest = std::fs::read_to_string(first.join("run_manifest.json")).unwrap();
    assert!(manifest.contains("\"chrom\""));

    let second = tmp.path().join("b");
    ok(&["evaluate", "--spec", spec.to_str().unwrap(), "--mode", "ica", "--output-dir", second.to_str().unwrap()]);
    let manifest = std::fs::read_to_string(second.join("run_manifest.json")).unwrap();
    assert!(manifest.contains("\"ica\""));
}

#[test]
fn failures_exit_nonzero_with_stage_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let run = tmp.path().join("run");
    let out = rppg(&[
        "evaluate", "--mode", "pos", "--test-dataset", missing.to_str().unwrap(), "--output-dir", run.to_str().unwrap(), "--seed", "0",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[load]"), "{err}");
    assert!(err.contains("nowhere"), "{err}");
    assert!(run.join("INCOMPLETE").is_file());

    let out = rppg(&["evaluate", "--mode", "pos", "--test-dataset", "x", "--output-dir", "y"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[evaluate]") && err.contains("seed"), "{err}");

    let out = rppg(&["report", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[report]"));
}

#[test]
fn train_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), "A", 2, 24.0, 1, false);
    let b = synth(&tmp.path().join("b"), "B", 1, 24.0, 2, false);
    let net = [
        "--input-resolution", "8", "--channels", "2,4", "--hidden", "4", "--seed", "9", "--support-seconds", "6",
    ];
    let pre = tmp.path().join("pre.pbparam");
    let mut args = vec!["pretrain", "--pretrain-dataset", &a, "--pretrain-epochs", "1", "--out", pre.to_str().unwrap()];
    args.extend(net);
    let stdout = ok(&args);
    assert!(stdout.contains("epoch 0"));

    let meta = tmp.path().join("meta.pbparam");
    let mut args = vec![
        "meta-train", "--meta-train-dataset", &a, "--init-checkpoint", pre.to_str().unwrap(), "--meta-epochs", "1",
        "--out", meta.to_str().unwrap(),
    ];
    args.extend(net);
    ok(&args);
    assert!(meta.is_file());
    assert_eq!(std::fs::read_to_string(meta.with_extension("jsonl")).unwrap().lines().count(), 2);

    let adapted = tmp.path().join("adapted");
    let mut args = vec![
        "adapt", "--init-checkpoint", meta.to_str().unwrap(), "--test-dataset", &b, "--out", adapted.to_str().unwrap(),
    ];
    args.extend(net);
    let stdout = ok(&args);
    assert!(stdout.contains("support frames 0..180"), "{stdout}");
    assert!(adapted.join("B-s00.pbparam").is_file());

    // a checkpoint built for another architecture is rejected while loading
    let args = vec![
        "adapt", "--init-checkpoint", meta.to_str().unwrap(), "--test-dataset", &b, "--out", adapted.to_str().unwrap(),
        "--hidden", "5", "--seed", "9",
    ];
    let out = rppg(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[load]"));
}
