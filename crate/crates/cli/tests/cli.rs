//! End-to-end tests of the `tanet` binary: every verb, the exit-code
//! contract, determinism of outputs, and the report's reference-row
//! fidelity.

use std::path::Path;
use std::process::{Command, Output};

fn tanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tanet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn synth_small(out: &Path, seed: u64) {
    let status = tanet(&[
        "synth",
        "--subjects",
        "2",
        "--trials",
        "4",
        "--seconds",
        "6",
        "--channels",
        "8",
        "--fs",
        "128",
        "--snr-db",
        "12",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    synth_small(d1.path(), 7);
    synth_small(d2.path(), 7);
    assert_eq!(dir_bytes(d1.path()), dir_bytes(d2.path()));
}

#[test]
fn synth_missing_out_is_usage_error() {
    let out = tanet(&["synth", "--subjects", "2"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_default_channels_is_64() {
    let out = tanet(&["synth", "--help"]);
    let text = stdout(&out);
    let channels_line = text
        .lines()
        .find(|l| l.contains("--channels"))
        .expect("help lists --channels");
    assert!(channels_line.contains("64"), "{channels_line}");
}

#[test]
fn train_defaults_are_protocol_constants() {
    let text = stdout(&tanet(&["train", "--help"]));
    for (flag, value) in [
        ("--lr", "0.001"),
        ("--epochs", "300"),
        ("--batch", "32"),
        ("--patience", "20"),
        ("--folds", "5"),
        ("--win", "0.1,0.25,0.3,0.4,0.5,1"),
    ] {
        let line = text
            .lines()
            .find(|l| l.contains(flag))
            .unwrap_or_else(|| panic!("help lists {flag}"));
        assert!(line.contains(value), "{flag}: {line}");
    }
}

#[test]
fn preprocess_writes_manifest_and_provenance_deterministically() {
    let raw = tempfile::tempdir().unwrap();
    synth_small(raw.path(), 3);
    let p1 = tempfile::tempdir().unwrap();
    let p2 = tempfile::tempdir().unwrap();
    for p in [&p1, &p2] {
        let out = tanet(&[
            "preprocess",
            "--input",
            raw.path().to_str().unwrap(),
            "--out",
            p.path().to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(dir_bytes(p1.path()), dir_bytes(p2.path()));

    let manifest = std::fs::read_to_string(p1.path().join("manifest.txt")).unwrap();
    for line in manifest.lines().skip(1) {
        // fs column is 128 after downsampling
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields[4], "128", "{line}");
    }
    let provenance =
        std::fs::read_to_string(p1.path().join("preprocess.provenance.txt")).unwrap();
    assert!(provenance.contains("band 1:50"), "{provenance}");
    assert!(provenance.contains("fs_out 128"), "{provenance}");
    assert!(provenance.contains("car,bandpass,downsample,zscore"));
}

#[test]
fn train_eval_report_round_trip() {
    let raw = tempfile::tempdir().unwrap();
    synth_small(raw.path(), 11);
    let pre = tempfile::tempdir().unwrap();
    let out = tanet(&[
        "preprocess",
        "--input",
        raw.path().to_str().unwrap(),
        "--out",
        pre.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let run = tempfile::tempdir().unwrap();
    let out = tanet(&[
        "train",
        "--input",
        pre.path().to_str().unwrap(),
        "--out",
        run.path().to_str().unwrap(),
        "--win",
        "0.5",
        "--epochs",
        "2",
        "--folds",
        "2",
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // results rows = subjects x folds x window lengths = 2 x 2 x 1
    let results = std::fs::read_to_string(run.path().join("results.txt")).unwrap();
    let rows: Vec<&str> = results
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .collect();
    assert_eq!(rows.len(), 4, "{results}");

    // per-fold checkpoints exist and evaluate
    let ckpt = run.path().join("ckpt_w0.5_s000_f0.tant");
    assert!(ckpt.exists());
    let out = tanet(&[
        "eval",
        "--model",
        ckpt.to_str().unwrap(),
        "--input",
        pre.path().to_str().unwrap(),
        "--win",
        "0.5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("accuracy"));

    // report renders the measured row and recomputes the grand mean
    let out = tanet(&[
        "report",
        "--results",
        run.path().join("results.txt").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("TAnet (measured)"), "{text}");
    assert!(text.contains("0.5"), "{text}");
}

#[test]
fn train_on_missing_manifest_is_input_error() {
    let run = tempfile::tempdir().unwrap();
    let out = tanet(&[
        "train",
        "--input",
        "/nonexistent/manifest.txt",
        "--out",
        run.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn locked_output_directory_is_rejected() {
    let raw = tempfile::tempdir().unwrap();
    std::fs::write(raw.path().join(".tanet.lock"), b"").unwrap();
    let out = tanet(&[
        "synth",
        "--subjects",
        "1",
        "--trials",
        "2",
        "--seconds",
        "2",
        "--channels",
        "4",
        "--out",
        raw.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("locked"), "{err}");
}

#[test]
fn verify_passes_and_is_deterministic() {
    // acceptance: two consecutive runs with identical seeds produce
    // bit-identical output
    let a = tanet(&["verify", "--seed", "7"]);
    assert!(a.status.success(), "{}", stdout(&a));
    let b = tanet(&["verify", "--seed", "7"]);
    assert!(b.status.success());
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.contains("[PASS] full-model gradient check"), "{text}");
    assert!(text.contains("[PASS] leakage pruning vs brute-force oracle"));
    assert!(text.contains("[PASS] protocol constants"));
    assert!(text.contains("[PASS] report reference row fidelity"));
}

#[test]
fn verify_seed_robustness() {
    let out = tanet(&["verify", "--seed", "31337"]);
    assert!(out.status.success(), "{}", stdout(&out));
}

#[test]
fn verify_fault_injection_fails_with_report() {
    let out = tanet(&["verify", "--fault-grad"]);
    assert_eq!(out.status.code(), Some(4));
    let text = stdout(&out);
    assert!(text.contains("[FAIL] full-model gradient check"), "{text}");
    assert!(text.contains("relative error"), "{text}");
}

#[test]
fn report_reference_row_is_verbatim() {
    // acceptance: the published reference row appears exactly, labeled
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.txt");
    std::fs::write(&results, "# subject fold win_seconds accuracy stop_epoch best_val_loss\n")
        .unwrap();
    let out = tanet(&[
        "report",
        "--results",
        results.to_str().unwrap(),
        "--reference",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(
        text.contains("TAnet (published reference, not reproduced)"),
        "{text}"
    );
    let row_line = text
        .lines()
        .find(|l| l.contains("published reference"))
        .unwrap();
    for v in ["92.4", "94.9", "95.1", "95.4", "95.5", "94.7"] {
        assert!(row_line.contains(v), "missing {v}: {row_line}");
    }
    // measured and reference rows never share a line
    assert!(!text.lines().any(|l| l.contains("measured") && l.contains("reference")));
}

#[test]
fn report_empty_results_is_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.txt");
    std::fs::write(&results, "").unwrap();
    let out = tanet(&["report", "--results", results.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("model"));
    assert!(!text.contains("measured"));
}

#[test]
fn report_grand_mean_matches_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.txt");
    std::fs::write(
        &results,
        "0 0 0.5 0.9 10 0.3\n0 1 0.5 1.0 10 0.3\n1 0 0.5 0.6 10 0.4\n1 1 0.5 0.8 10 0.4\n",
    )
    .unwrap();
    let csv = dir.path().join("table.csv");
    let out = tanet(&[
        "report",
        "--results",
        results.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // subject means 95.0 and 70.0 -> grand mean 82.5
    let text = stdout(&out);
    assert!(text.contains("82.5"), "{text}");
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.contains("82.5"), "{csv_text}");
}
