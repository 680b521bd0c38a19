use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/quadratic.toml");

fn cbs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbs"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("spawn cbs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn full_protocol_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in ["train", "sweep", "noise", "warmup"] {
        let out = cbs(d, &[cmd, "--config", CONFIG, "--parallel", "2"]);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let curve = d.join("results/quadratic-s7/curve.csv");
    let curve_arg = curve.to_str().unwrap();
    let out = cbs(d, &["analyze", "--curve", curve_arg, "--family", "log", "--horizon", "1e5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("results/analysis/analysis_log_lower.json").is_file());

    let manifest = std::fs::read_to_string(d.join("runs/quadratic-s7/manifest")).unwrap();
    for tokens in [0, 2000, 5000, 10000, 20000, 40000] {
        assert!(manifest.contains(&format!("\"ckpt_{tokens}.bin\"")));
    }
    for arm in ["warmup", "small_batch", "large_batch"] {
        assert!(d.join(format!("runs/quadratic-s7-{arm}/log.csv")).is_file());
    }

    // Existing outputs are protected; --force regenerates identical bytes.
    let before = std::fs::read(&curve).unwrap();
    assert_eq!(code(&cbs(d, &["sweep", "--config", CONFIG])), 1);
    assert_eq!(code(&cbs(d, &["train", "--config", CONFIG])), 1);
    assert_eq!(code(&cbs(d, &["sweep", "--run", "quadratic-s7", "--force", "--parallel", "1"])), 0);
    assert_eq!(std::fs::read(&curve).unwrap(), before);

    // Unknown run, unknown checkpoint.
    assert_eq!(code(&cbs(d, &["noise", "--run", "nope-s1"])), 1);
    let out = cbs(d, &["noise", "--run", "quadratic-s7", "--at", "1234", "--force"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nearest available: 0, 2000"));
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(CONFIG).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, text.replace("tolerance = 0.01", "tolerence = 0.01")).unwrap();
    let out = cbs(dir.path(), &["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("tolerence"));
    assert!(!dir.path().join("runs/quadratic-s7").exists(), "nothing runs before validation");

    let out = cbs(dir.path(), &["analyze", "--curve", "x.csv", "--horizon", "-1"]);
    assert_ne!(code(&out), 0);
    // Not a flag combination clap accepts.
    assert_eq!(code(&cbs(dir.path(), &["train"])), 1);
}

#[test]
fn divergence_exits_3_and_marks_the_run_failed() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(CONFIG).unwrap();
    let hot = dir.path().join("hot.toml");
    std::fs::write(&hot, text.replace("base_lr = 0.05", "base_lr = 4.5")).unwrap();
    let out = cbs(dir.path(), &["train", "--config", hot.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("runs/quadratic-s7/manifest")).unwrap();
    assert!(manifest.contains("\"failed\""));
}
