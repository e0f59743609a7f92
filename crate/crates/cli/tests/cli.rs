use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mfaf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfaf"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const SMALL: &str = r#"{"dataset": {"num_classes": 5, "drones_per_class": 3, "distractors": 2},
    "mcb": {"num_classes": 5}, "optim": {"epochs": 2}}"#;

#[test]
fn usage_and_io_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&mfaf(d, &["evaluate", "--bogus"])), 2);
    assert_eq!(code(&mfaf(d, &["evaluate", "--direction", "sideways"])), 2);
    assert_eq!(code(&mfaf(d, &["evaluate", "--checkpoint", "missing"])), 2);
    assert_eq!(code(&mfaf(d, &["train", "--config", "missing.json"])), 2);
    fs::write(d.join("bad.json"), r#"{"sed": 1}"#).unwrap();
    assert_eq!(code(&mfaf(d, &["generate", "--config", "bad.json"])), 2);
    let o = mfaf(d, &["train"]);
    assert_eq!(code(&o), 2, "training without a dataset");
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("small.json"), SMALL).unwrap();
    assert_eq!(code(&mfaf(d, &["generate", "--config", "small.json"])), 0);
    let train = mfaf(
        d,
        &[
            "train",
            "--config",
            "small.json",
            "--disable-branch",
            "lf",
            "--pooling",
            "mp",
            "--out",
            "run",
        ],
    );
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let stored = fs::read_to_string(d.join("run/checkpoint/manifest.json")).unwrap();
    assert!(stored.contains(r#""lf_branch": false"#) && stored.contains(r#""pooling": "mp""#));

    let eval = mfaf(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint",
            "--out",
            "run",
            "--direction",
            "s2d",
        ],
    );
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("queries,gallery,r@1"));
    assert!(d.join("run/metrics_s2d.json").exists());
    assert!(d.join("run/attention_s2d/w_freq_orig.pgm").exists());
    assert!(!d.join("run/attention_s2d/w_freq_lf.pgm").exists());

    let shift = mfaf(
        d,
        &[
            "shift-robustness",
            "--checkpoint",
            "run/checkpoint",
            "--out",
            "run",
            "--pad-mode",
            "flip",
            "--pad-px",
            "0,1,3",
        ],
    );
    assert_eq!(code(&shift), 0, "{}", String::from_utf8_lossy(&shift.stderr));
    let csv = fs::read_to_string(d.join("run/shift_d2s_flip.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("flip,0,"));

    let mismatch = mfaf(
        d,
        &["evaluate", "--config", "small.json", "--checkpoint", "run/checkpoint"],
    );
    assert_eq!(code(&mismatch), 2, "model differs from checkpoint");

    fs::write(d.join("longer.json"), SMALL.replace(r#""epochs": 2"#, r#""epochs": 3"#)).unwrap();
    let resume = mfaf(
        d,
        &[
            "train",
            "--config",
            "longer.json",
            "--disable-branch",
            "lf",
            "--pooling",
            "mp",
            "--out",
            "run",
            "--checkpoint",
            "run/checkpoint",
        ],
    );
    assert_eq!(code(&resume), 0, "{}", String::from_utf8_lossy(&resume.stderr));
    let loss = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    let epochs: Vec<&str> = loss.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3"]);
}

#[test]
fn gradcheck_passes_and_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mfaf(tmp.path(), &["gradcheck", "--out", "gc", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("gc/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["instances"], 100);
    assert!(report["ops"].as_array().unwrap().iter().all(|op| op["passed"] == true));
    assert!(fs::read_to_string(tmp.path().join("gc/gradcheck.csv"))
        .unwrap()
        .starts_with("op,"));
}
