//! End-to-end runs of the `lfm` subcommands on a tiny configuration.

use std::path::{Path, PathBuf};

use lfm_core::diagnostics::cli::cli_main;
use lfm_core::diagnostics::parse_metrics_csv;
use lfm_core::pdelab::Dataset;

const TINY: &str = r#"{
  "data": {"problem": "heat2d", "n": 16, "frames": 12, "train": 2, "valid": 0, "test": 2},
  "codec": {"fine_extents": [8, 8], "latent_channels": 2, "hidden": 4, "heads": 2, "kernel_hidden": 4},
  "denoiser": {"width": 8, "heads": 2, "depth": 2},
  "ae": {"steps": 3, "batch": 2},
  "fm": {"steps": 3, "batch": 2},
  "ar": {"steps": 3, "batch": 2},
  "rollout": {"horizon": 6, "ensemble": 2},
  "eval": {"horizons": [3, 6], "spectrum_center": 3, "spectrum_half_width": 1}
}"#;

fn run<S: AsRef<str>>(args: &[S]) -> i32 {
    let mut argv = vec!["lfm".to_string(), "--deterministic".to_string()];
    argv.extend(args.iter().map(|a| a.as_ref().to_string()));
    cli_main(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("cfg.json"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train_all(&self) {
        let (cfg, data) = (self.p("cfg.json"), self.p("data.lfmd"));
        assert_eq!(run(&["gen-data", "--problem", "heat2d", "--config", s(&cfg), "--out", s(&data)]), 0);
        let (ae, log) = (self.p("ae.ckpt"), self.p("ae.csv"));
        assert_eq!(run(&["train-ae", "--config", s(&cfg), "--data", s(&data), "--out", s(&ae), "--log", s(&log)]), 0);
        for (cmd, out) in [("train-fm", "fm.ckpt"), ("train-ar", "ar.ckpt")] {
            let out = self.p(out);
            assert_eq!(run(&[cmd, "--config", s(&cfg), "--data", s(&data), "--codec", s(&ae), "--out", s(&out)]), 0, "{cmd}");
        }
    }
}

#[test]
fn full_pipeline_runs_and_writes_expected_files() {
    let p = Pipeline::new();
    p.train_all();
    let (cfg, data, codec) = (p.p("cfg.json"), p.p("data.lfmd"), p.p("ae.ckpt"));
    let losses = std::fs::read_to_string(p.p("ae.csv")).unwrap();
    assert!(losses.starts_with("step,loss\n"));
    assert_eq!(losses.lines().count(), 4);

    let ro = p.p("ro");
    let code = run(&[
        "rollout", "--config", s(&cfg), "--data", s(&data), "--codec", s(&codec), "--model", s(&p.p("fm.ckpt")), "--horizon", "5",
        "--ens", "2", "--mode", "flow-euler", "--seed", "3", "--out", s(&ro),
    ]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(ro.join("rollout.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    let saved = Dataset::read(&ro.join("rollout.lfmd")).unwrap();
    assert_eq!(saved.trajectories.len(), 3);
    assert_eq!(saved.trajectories[0].len(), 5);

    let ev = p.p("eval");
    let code = run(&[
        "eval", "--config", s(&cfg), "--data", s(&data), "--codec", s(&codec), "--fm", s(&p.p("fm.ckpt")), "--ar",
        s(&p.p("ar.ckpt")), "--seed", "1", "--out", s(&ev),
    ]);
    assert_eq!(code, 0);
    let rows = parse_metrics_csv(&std::fs::read_to_string(ev.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.value.is_finite() && r.value >= 0.0));
    assert!(ev.join("spectra.csv").exists() && ev.join("report.json").exists());
    let report = std::fs::read_to_string(ev.join("report.json")).unwrap();
    assert!(!report.contains("runtime"), "deterministic mode omits timings");

    let sp = p.p("spec");
    assert_eq!(run(&["spectrum", "--data", s(&data), "--center", "4", "--half-width", "1", "--out", s(&sp)]), 0);
    let spectra = std::fs::read_to_string(sp.join("spectra.csv")).unwrap();
    assert!(spectra.lines().count() > 2);

    // an out-of-window spectrum request is a runtime error
    assert_eq!(run(&["spectrum", "--data", s(&data), "--center", "11", "--half-width", "2", "--out", s(&sp)]), 1);
}

#[test]
fn eval_refuses_checkpoints_from_a_different_config() {
    let p = Pipeline::new();
    p.train_all();
    let other = p.p("other.json");
    std::fs::write(&other, TINY.replace(r#""fm": {"steps": 3"#, r#""fm": {"steps": 4"#)).unwrap();
    let code = run(&[
        "eval", "--config", s(&other), "--data", s(&p.p("data.lfmd")), "--codec", s(&p.p("ae.ckpt")), "--fm",
        s(&p.p("fm.ckpt")), "--out", s(&p.p("ev")),
    ]);
    assert_eq!(code, 1);
    assert!(!p.p("ev").join("metrics.csv").exists());

    // a flow model paired with a codec it was not trained against
    let cfg = p.p("cfg.json");
    let data = p.p("data.lfmd");
    assert_eq!(run(&["train-ae", "--config", s(&cfg), "--data", s(&data), "--seed", "9", "--out", s(&p.p("ae2.ckpt"))]), 0);
    let code = run(&[
        "rollout", "--config", s(&cfg), "--data", s(&data), "--codec", s(&p.p("ae2.ckpt")), "--model", s(&p.p("fm.ckpt")),
        "--out", s(&p.p("ro")),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn ablation_sweep_writes_one_row_per_variant() {
    let p = Pipeline::new();
    let (cfg, data) = (p.p("cfg.json"), p.p("data.lfmd"));
    let cfg_text = TINY.replace(r#""horizon": 6"#, r#""horizon": 3"#);
    std::fs::write(&cfg, cfg_text).unwrap();
    assert_eq!(run(&["gen-data", "--problem", "heat2d", "--config", s(&cfg), "--out", s(&data)]), 0);
    let out = p.p("abl");
    assert_eq!(run(&["ablate-schedules", "--config", s(&cfg), "--data", s(&data), "--steps", "2", "--seed", "4", "--out", s(&out)]), 0);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,horizon,nrmse");
    assert_eq!(lines.len(), 8);
    assert!(lines[1].starts_with("fm-k5,4,3,"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(run(&["gen-data", "--problem", "navier", "--out", s(&out)]), 1);
    assert_eq!(run(&["train-ae", "--data", s(&dir.path().join("missing.lfmd")), "--out", s(&out)]), 1);
    assert_eq!(run(&["rollout"]), 2);
}
