use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 6] = ["generate", "simulate", "energy", "train", "eval", "render"];

fn cilab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cilab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CI_LAB_THREADS")
        .output()
        .expect("spawn cilab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Value of `key` in the `status=ok ...` line.
fn status_value(o: &Output, key: &str) -> String {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("status=ok")).expect("status line");
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .to_string()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout: {}\nstderr: {}", stdout(o), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_documents_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    for sub in SUBCOMMANDS {
        let o = cilab(&[sub, "--help"], dir.path());
        ok(&o);
        let text = stdout(&o);
        for line in text.lines().filter(|l| l.trim_start().starts_with("--")) {
            let doc = line.trim_start().splitn(2, "  ").nth(1).unwrap_or("").trim();
            assert!(!doc.is_empty(), "{sub}: undocumented flag line `{line}`");
        }
    }
    ok(&cilab(&["--help"], dir.path()));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(cilab(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(cilab(&["generate"], d).status.code(), Some(1));
    let o = cilab(&["generate", "--out", "x.cip", "--set", "pde.bogus=1"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.join("x.cip").exists());
    assert_eq!(cilab(&["generate", "--out", "x.cip", "--set", "noequals"], d).status.code(), Some(1));
    assert_eq!(cilab(&["--threads", "0", "generate", "--out", "x.cip"], d).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = cilab(&["eval", "--checkpoint", "missing.ckpt", "--data", "missing.cip", "--report", "r.json"], d);
    assert_eq!(o.status.code(), Some(2));
    // dt far beyond the explicit stability bound
    let o = cilab(&["generate", "--out", "x.cip", "--grid", "16", "--set", "pde.dt=1.0"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str, seed: &'static str| {
        ["generate", "--out", out, "--samples", "5", "--grid", "16", "--seed", seed]
    };
    let a = cilab(&args("a.cip", "7"), d);
    ok(&a);
    assert_eq!(status_value(&a, "samples"), "5");
    ok(&cilab(&args("b.cip", "7"), d));
    ok(&cilab(&args("c.cip", "8"), d));
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a.cip"), read("b.cip"));
    assert_ne!(read("a.cip"), read("c.cip"));
    assert!(d.join("a.meta.json").exists());

    // a config file with a flag overriding it
    std::fs::write(d.join("gen.json"), r#"{"grid_n": 16, "n_samples": 3, "seed": 7}"#).unwrap();
    let o = cilab(&["generate", "--config", "gen.json", "--samples", "5", "--out", "e.cip"], d);
    ok(&o);
    assert_eq!(read("a.cip"), read("e.cip"));
}

#[test]
fn simulate_and_energy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&cilab(&["generate", "--out", "t.cip", "--samples", "2", "--grid", "16", "--seed", "1"], d));
    let o = cilab(&["simulate", "--in", "t.cip", "--steps", "100", "--record-every", "25", "--out", "traj"], d);
    ok(&o);
    assert_eq!(status_value(&o, "snapshots"), "5");
    for step in [0, 25, 50, 75, 100] {
        assert!(d.join(format!("traj/step_{step:06}.npy")).exists());
    }

    let energy = |args: &[&str]| -> f64 {
        let o = cilab(args, d);
        ok(&o);
        stdout(&o).trim().parse().unwrap()
    };
    let mut prev = f64::INFINITY;
    for step in [0, 25, 50, 75, 100] {
        let e = energy(&["energy", "--in", &format!("traj/step_{step:06}.npy")]);
        assert!(e <= prev * (1.0 + 1e-10), "energy rose at step {step}");
        prev = e;
    }
    // dataset src is the stored late-time field (f32), the last snapshot is f64
    let src = energy(&["energy", "--in", "t.cip", "--which", "src"]);
    assert!((src - prev).abs() < 1e-6 * prev.abs(), "{src} vs {prev}");
}

#[test]
fn train_eval_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&cilab(&["generate", "--out", "t.cip", "--samples", "6", "--grid", "16", "--seed", "2"], d));
    std::fs::write(
        d.join("train.json"),
        r#"{"max_iters": 4, "checkpoint_every": 2, "model": {"generator": {"base_width": 4}, "critic": {"widths": [4, 8]}}}"#,
    )
    .unwrap();
    let train = |out: &str| {
        cilab(
            &["--threads", "2", "train", "--config", "train.json", "--train-data", "t.cip", "--out-dir", out, "--seed", "5", "--deterministic", "--set", "n_critic=2"],
            d,
        )
    };
    let o = train("run1");
    ok(&o);
    assert_eq!(status_value(&o, "iterations"), "4");
    ok(&train("run2"));
    let log = |r: &str| std::fs::read_to_string(d.join(r).join("train.log")).unwrap();
    assert_eq!(log("run1"), log("run2"));
    assert!(d.join("run1/checkpoints/iter_000004.ckpt").exists());

    let o = cilab(
        &["eval", "--checkpoint", "run1/best.ckpt", "--data", "t.cip", "--report", "r.json", "--csv", "r.csv", "--triptychs", "2", "--out-dir", "figs"],
        d,
    );
    ok(&o);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 6);
    for key in ["mae_mean", "mae_std", "sem"] {
        assert!(report[key].as_f64().unwrap().is_finite());
    }
    assert_eq!(std::fs::read_to_string(d.join("r.csv")).unwrap().lines().next(), Some("index,mae"));
    assert!(d.join("figs/triptych_000001.png").exists());

    ok(&cilab(&["render", "--data", "t.cip", "--index", "3", "--checkpoint", "run1/best.ckpt", "--out", "a.png"], d));
    ok(&cilab(&["render", "--data", "t.cip", "--index", "3", "--checkpoint", "run1/best.ckpt", "--out", "b.png"], d));
    assert_eq!(std::fs::read(d.join("a.png")).unwrap(), std::fs::read(d.join("b.png")).unwrap());

    // a checkpoint for a different grid is rejected at runtime
    ok(&cilab(&["generate", "--out", "big.cip", "--samples", "1", "--grid", "32", "--seed", "2"], d));
    let o = cilab(&["eval", "--checkpoint", "run1/best.ckpt", "--data", "big.cip", "--report", "r2.json"], d);
    assert_eq!(o.status.code(), Some(2));
}
