#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

/// A configuration small enough to run every verb in seconds.
pub fn tiny_config() -> Value {
    json!({
        "seed": 21,
        "system": { "antenna_rows": 6, "antenna_cols": 6 },
        "codebook": { "n_theta": 8, "n_phi": 6, "n_r": 5, "r_max": 40.0 },
        "dataset": { "n_episodes": 16, "n_scenes": 4, "split_scenes": [2, 1, 1], "history_len": 4, "future_len": 3 },
        "sensor": { "d_in": 8, "n_lidar_tokens": 8 },
        "model": { "d_model": 16, "d_in": 8, "n_heads": 2, "l_h": 4, "l_p": 3, "n_lidar_tokens": 8,
                   "dims": { "n_theta": 8, "n_phi": 6, "n_r": 5 } },
        "train": { "epochs": 2, "batch_size": 4 },
        "eval": { "budget": 30, "snr_db": [0.0, 20.0] }
    })
}

pub fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

pub fn nfbeam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfbeam")).args(args).output().expect("binary runs")
}

/// Runs a verb that must succeed and returns its stdout summary.
pub fn ok(verb: &str, config: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec![verb, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = nfbeam(&args);
    assert!(o.status.success(), "{verb} failed: {}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    if verb == "report" {
        return Value::String(text);
    }
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{verb} summary is not JSON ({e}): {text}"))
}

/// Runs a verb that must fail and returns the parsed stderr error object.
pub fn err(args: &[&str]) -> Value {
    let o = nfbeam(args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let text = String::from_utf8(o.stderr).unwrap();
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not a JSON error ({e}): {text}"))
}

/// gen-data, train and eval in `out`.
pub fn pipeline(config: &Path, out: &Path) {
    ok("gen-data", config, out, &[]);
    ok("train", config, out, &[]);
    ok("eval", config, out, &[]);
}
