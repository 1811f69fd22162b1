//! End-to-end runs of the `cup` binary on a small synthetic IDX dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SIDE: u32 = 4;

fn idx_images(n: usize, pixel: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut b = 0x0803u32.to_be_bytes().to_vec();
    for v in [n as u32, SIDE, SIDE] {
        b.extend(v.to_be_bytes());
    }
    let px = (SIDE * SIDE) as usize;
    for i in 0..n {
        b.extend((0..px).map(|p| pixel(i, p)));
    }
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = 0x0801u32.to_be_bytes().to_vec();
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend(labels);
    b
}

/// Ten classes; class `c` lights pixel `c` plus a little per-sample noise.
fn write_split(dir: &Path, prefix: &str, n: usize) {
    let label = |i: usize| (i * 7 % 10) as u8;
    let images = idx_images(n, |i, p| {
        if p == label(i) as usize {
            230
        } else {
            ((i * 31 + p * 17) % 40) as u8
        }
    });
    let labels: Vec<u8> = (0..n).map(label).collect();
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        fs::create_dir(&data).unwrap();
        write_split(&data, "train", 300);
        write_split(&data, "t10k", 60);
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cup(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_cup"))
            .args(args)
            .env("CUP_DATA_DIR", self.path("data"))
            .env_remove("RUST_LOG")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cup(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn train(&self, name: &str, arch: &str) -> PathBuf {
        let out = self.path(name);
        self.ok(&["train", "--arch", arch, "--epochs", "4", "--batch-size", "16", "--out", out.to_str().unwrap()]);
        out
    }
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"))
}

fn fails(out: &Output, code: i32, kind: &str) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{stderr}");
    assert!(stderr.starts_with(&format!("error[{kind}]: ")), "{stderr}");
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
}

#[test]
fn help_and_usage_errors() {
    let fx = Fixture::new();
    assert!(fx.cup(&["--help"]).status.success());
    fails(&fx.cup(&["train", "--arch", "16--10", "--out", "x.cupm"]), 2, "usage");
    fails(&fx.cup(&["frobnicate"]), 2, "usage");
    let model = fx.train("m.cupm", "16-12-8-10");
    let m = model.to_str().unwrap();
    fails(&fx.cup(&["prune", "--model", m, "--out", "p.cupm"]), 2, "usage");
    fails(&fx.cup(&["prune", "--model", m, "--mode", "manual", "--t", "1", "--out", "p.cupm"]), 2, "usage");
    fails(&fx.cup(&["sweep", "--param", "t", "--from", "1", "--to", "0", "--step", "0.1", "--model", m]), 2, "usage");
}

#[test]
fn training_learns_and_writes_log() {
    let fx = Fixture::new();
    let model = fx.path("m.cupm");
    let stdout = fx.ok(&["train", "--arch", "16-12-8-10", "--epochs", "20", "--batch-size", "8", "--out", model.to_str().unwrap()]);
    assert_eq!(value(&stdout, "arch"), "16-12-8-10");
    assert!(value(&stdout, "val_acc").parse::<f64>().unwrap() > 0.5, "{stdout}");
    let log = fs::read_to_string(fx.path("m.train.csv")).unwrap();
    assert_eq!(log.lines().nth(1), Some("epoch,lr,train_loss,val_acc,params,flops"));
    assert_eq!(log.lines().count(), 2 + 20);
}

#[test]
fn runtime_errors_are_reported_by_kind() {
    let fx = Fixture::new();
    let model = fx.train("m.cupm", "16-12-8-10");
    let m = model.to_str().unwrap();

    fails(&fx.cup(&["prune", "--model", m, "--mode", "manual", "--counts", "0,4", "--out", "p.cupm"]), 1, "plan");
    fails(&fx.cup(&["prune", "--model", m, "--mode", "manual", "--counts", "4", "--out", "p.cupm"]), 1, "plan");
    fails(&fx.cup(&["prune", "--model", m, "--t", "-1", "--out", "p.cupm"]), 1, "config");
    fails(&fx.cup(&["prune-ss", "--arch", "16-12-8-10", "--k", "0", "--b", "0", "--out", "s.cupm"]), 1, "config");

    let missing = fx.path("missing.cupm");
    let out = fx.cup(&["report", "--baseline-model", missing.to_str().unwrap(), "--compressed-model", m]);
    fails(&out, 1, "io");
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cupm"));

    fs::write(fx.path("junk.cupm"), b"not a model").unwrap();
    fails(&fx.cup(&["prune", "--model", fx.path("junk.cupm").to_str().unwrap(), "--t", "1", "--out", "p.cupm"]), 1, "format");

    let out = Command::new(env!("CARGO_BIN_EXE_cup"))
        .args(["train", "--arch", "16-4-10", "--epochs", "1", "--out", fx.path("n.cupm").to_str().unwrap()])
        .env_remove("CUP_DATA_DIR")
        .output()
        .unwrap();
    fails(&out, 1, "config");
}

#[test]
fn report_on_identical_and_mismatched_models() {
    let fx = Fixture::new();
    let a = fx.train("a.cupm", "16-12-8-10");
    let stdout = fx.ok(&["report", "--baseline-model", a.to_str().unwrap(), "--compressed-model", a.to_str().unwrap()]);
    assert_eq!(value(&stdout, "pr"), "1.0000");
    assert_eq!(value(&stdout, "fr"), "1.0000");
    assert!(stdout.contains("# cup-cost v1"));

    let other = fx.path("other.cupm");
    fx.ok(&["train", "--arch", "9-12-8-10", "--epochs", "0", "--out", other.to_str().unwrap()]);
    let out = fx.cup(&["report", "--baseline-model", a.to_str().unwrap(), "--compressed-model", other.to_str().unwrap()]);
    fails(&out, 1, "comparison");
}

#[test]
fn single_point_sweep_matches_prune() {
    let fx = Fixture::new();
    let model = fx.train("m.cupm", "16-12-8-10");
    let m = model.to_str().unwrap();
    let pruned = fx.ok(&["prune", "--model", m, "--t", "0.5", "--out", fx.path("p.cupm").to_str().unwrap()]);
    let sweep = fx.ok(&["sweep", "--param", "t", "--from", "0.5", "--to", "0.5", "--step", "0.1", "--model", m]);
    let rows: Vec<&str> = sweep.lines().skip(2).collect();
    assert_eq!(rows.len(), 1, "{sweep}");
    let cols: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(cols[0], "t");
    assert_eq!(cols[2], value(&pruned, "pr"));
    assert_eq!(cols[3], value(&pruned, "fr"));
    assert_eq!(cols[4], value(&pruned, "acc_before_retrain"));
    let arch = value(&pruned, "arch");
    assert_eq!(cols[7], &arch[arch.find('-').unwrap() + 1..]);

    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(fx.path("p.plan.json")).unwrap()).unwrap();
    assert_eq!(plan["layers"].as_array().unwrap().len(), 2);
    let cost = fs::read_to_string(fx.path("p.cost.csv")).unwrap();
    assert!(cost.starts_with("# cup-cost v1\n"));
}

#[test]
fn commands_are_deterministic() {
    let fx = Fixture::new();
    let a = fx.train("a.cupm", "16-12-8-10");
    let b = fx.train("b.cupm", "16-12-8-10");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = a.to_str().unwrap();

    let runs: [&[&str]; 3] = [
        &["prune", "--model", m, "--t", "0.6", "--retrain-epochs", "2"],
        &["prune-baseline", "--model", m, "--criterion", "random", "--counts", "6,4", "--retrain-epochs", "1"],
        &["prune-ss", "--arch", "16-12-8-10", "--epochs", "3", "--k", "0.2", "--b", "0.4", "--batch-size", "16"],
    ];
    for (i, args) in runs.iter().enumerate() {
        let outputs: Vec<Vec<u8>> = (0..2)
            .map(|r| {
                let out = fx.path(&format!("run{i}_{r}.cupm"));
                let mut full = args.to_vec();
                full.extend(["--out", out.to_str().unwrap()]);
                fx.ok(&full);
                fs::read(out).unwrap()
            })
            .collect();
        assert_eq!(outputs[0], outputs[1], "{args:?}");
    }
}
