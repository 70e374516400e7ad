use std::path::Path;
use std::process::{Command, Output};

fn gmmflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmmflow")).args(args).env_remove("GMMFLOW_WORKERS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gmmflow(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn slope_in(line: &str) -> f64 {
    let s = line.split("slope=").nth(1).unwrap();
    s.split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn verify_h_first_order_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = ["verify-h", "--dims", "10", "--ks", "5,10,20,50,100", "--traj", "1000", "--norm", "l2", "--seed", "42"];
    let stdout = ok(&[&args[..], &["--out", p(&a)]].concat());
    let slope = slope_in(stdout.lines().next().unwrap());
    assert!((slope - 1.0).abs() <= 0.15, "{stdout}");
    let out = Command::new(env!("CARGO_BIN_EXE_gmmflow"))
        .args(args)
        .args(["--out", p(&b)])
        .env("GMMFLOW_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "verify-h");
    assert_eq!(manifest["seed"], 42);
}

#[test]
fn rerun_from_manifest_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    ok(&["verify-h", "--dims", "4", "--ks", "10,20", "--traj", "8", "--seed", "3", "--out", p(&a)]);
    let b = dir.path().join("b.csv");
    let manifest = dir.path().join("a.manifest.json");
    ok(&["verify-h", "--config", p(&manifest), "--out", p(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let entries = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(entries, 4);
}

#[test]
fn single_trajectory_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one.csv");
    ok(&["verify-h", "--dims", "5", "--ks", "10,20", "--traj", "1", "--out", p(&out)]);
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "norm,d,K,h,sigma_tag,mean_error,std_error,n_traj,n_nonfinite");
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!((f[6], f[7], f[8]), ("0", "1", "0"));
    }
}

#[test]
fn verify_dim_single_dimension_and_linf() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["verify-dim", "--dims", "10", "--ks", "100", "--traj", "4", "--out", p(&dir.path().join("s.csv"))]);
    assert!(stdout.contains("slope undefined"), "{stdout}");
    let stdout = ok(&[
        "verify-dim", "--dims", "10,100", "--ks", "100", "--traj", "16", "--norm", "linf", "--out",
        p(&dir.path().join("i.csv")),
    ]);
    assert!(stdout.contains("a+b ln d") && stdout.contains("linear in d"), "{stdout}");
}

#[test]
fn verify_sigma_interior_minimum_and_lcurve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sigma.csv");
    let curve = dir.path().join("lcurve.csv");
    let stdout = ok(&["verify-sigma", "--traj", "200", "--out", p(&out), "--lcurve", p(&curve)]);
    let l2 = stdout.lines().find(|l| l.starts_with("l2")).unwrap();
    assert!(l2.contains("interior"), "{stdout}");
    let c = std::fs::read_to_string(&curve).unwrap();
    assert!(c.starts_with("sigma,L\n0.1,"), "{c}");
    assert!(c.contains("\n0.5,2\n"));
}

#[test]
fn lcurve_reports_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["lcurve", "--sigmas", "0.1,0.3,0.5,0.7", "--out", p(&dir.path().join("l.csv"))]);
    assert_eq!(stdout.trim(), "minimum L=2 at sigma=0.5");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_grid = gmmflow(&["verify-h", "--ks", "0", "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(bad_grid.status.code(), Some(2));
    let unwritable = gmmflow(&["verify-h", "--dims", "2", "--ks", "5", "--traj", "1", "--out", "/nonexistent/dir/x.csv"]);
    assert_eq!(unwritable.status.code(), Some(4));
    // Means of norm ~1e200 overflow the squared distances.
    let out = dir.path().join("nan.csv");
    let overflow = gmmflow(&["verify-h", "--dims", "2", "--ks", "5", "--traj", "2", "--radius", "1e200", "--out", p(&out)]);
    assert_eq!(overflow.status.code(), Some(3));
    assert!(std::fs::read_to_string(&out).unwrap().lines().nth(1).unwrap().ends_with(",2,2"));
}

#[test]
fn score_dump() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"means":[[1.0,0.0],[-1.0,0.0]],"cov":{"kind":"isotropic","sigma":0.5}}"#).unwrap();
    let stdout = ok(&["score", "--spec", p(&spec), "--z", "0,0", "--t", "0.5"]);
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows[0], "k,exact,mc");
    for row in &rows[1..] {
        let f: Vec<f64> = row.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!(f.iter().all(|v| v.abs() < 1e-15), "{row}");
    }
    assert_eq!(gmmflow(&["score", "--spec", p(&spec), "--z", "0,0", "--t", "0"]).status.code(), Some(2));
}

#[test]
fn distillation_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let labels = d.join("labels.gflb");
    ok(&["gen-labels", "--dim", "8", "--count", "2000", "--integrator", "heun", "--seed", "5", "--out", p(&labels)]);
    assert!(d.join("labels.spec.json").exists() && d.join("labels.manifest.json").exists());
    let split_dir = d.join("split");
    let stdout = ok(&["split", "--data", p(&labels), "--seed", "1", "--out-dir", p(&split_dir)]);
    assert_eq!(stdout.trim(), "train=1600 val=200 test=200");
    let model = d.join("model.ckpt");
    ok(&[
        "train", "--train", p(&split_dir.join("train.gflb")), "--val", p(&split_dir.join("val.gflb")),
        "--hidden", "128", "--max-epochs", "40", "--seed", "2", "--out", p(&model),
    ]);
    assert!(std::fs::read_to_string(d.join("model.history.csv")).unwrap().starts_with("epoch,train_loss,val_loss\n"));
    let eval = d.join("eval.csv");
    ok(&[
        "eval", "--model", p(&model), "--spec", p(&d.join("labels.spec.json")), "--train",
        p(&split_dir.join("train.gflb")), "--test", p(&split_dir.join("test.gflb")), "--out", p(&eval),
    ]);
    let csv = std::fs::read_to_string(&eval).unwrap();
    let value = |q: &str, s: &str| -> f64 {
        let row = csv.lines().find(|l| l.starts_with(&format!("{q},{s},"))).unwrap();
        row.rsplit(',').next().unwrap().parse().unwrap()
    };
    let disc = value("ode_discretization", "test");
    let (train, test) = (value("model", "train"), value("model", "test"));
    assert!(disc > 0.0 && test > disc, "{csv}");
    assert!(train <= test, "{csv}");
}
