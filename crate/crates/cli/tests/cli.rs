use std::path::Path;
use std::process::{Command, Output};

fn mhattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mhattn")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let o = mhattn(&["config", "--d", "6", "--k", "3", "--theta-norm", "6"]);
    assert!(o.status.success());
    let mut v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    v["phase1"]["n"] = 5000.into();
    v["crude"]["t"] = 5000.into();
    v["refine"] = serde_json::json!({ "n": 100, "max_draws": 50000, "pilot": 2000 });
    v["tight"]["t"] = 8000.into();
    v["tight"]["eps"] = 0.1.into();
    v["regression"]["n"] = 300.into();
    v["n_test"] = 300.into();
    let p = dir.join("c.json");
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

#[test]
fn gadget_verify_reports_exact_parity() {
    let o = mhattn(&["gadget-verify", "--d", "4", "--subset", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["max_error"].as_f64().unwrap() <= 1e-6);
    let o = mhattn(&["gadget-verify", "--d", "4", "--subset", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generate_then_audit() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("instance.json");
    let o = mhattn(&["generate", "--m", "2", "--d", "8", "--seed", "3", "--out", inst.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mhattn(&["audit", inst.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in ["uplambda", "kappa", "r_sig", "r_sig_subsets", "upsilon", "chi", "kappa_prime", "r_w", "uplambda_prime", "theta1_norm", "non_arithmetic"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn learn_is_deterministic_and_eval_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = mhattn(&["learn", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ca = std::fs::read(a.join("metrics.csv")).unwrap();
    let cb = std::fs::read(b.join("metrics.csv")).unwrap();
    assert_eq!(ca, cb);
    assert!(String::from_utf8(ca).unwrap().starts_with("seed,phase,samples,metrics\n"));
    let o = mhattn(&[
        "eval",
        "--hypothesis",
        a.join("hypothesis.json").to_str().unwrap(),
        "--instance",
        a.join("instance.json").to_str().unwrap(),
        "--k",
        "3",
        "--n",
        "500",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["loss"].as_f64().unwrap() >= 0.0);
}

#[test]
fn malformed_config_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\n  \"seed\": 1,\n  \"k\": oops\n}\n").unwrap();
    let o = mhattn(&["learn", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.json:3:"), "{}", stderr(&o));

    let cfg = small_config(dir.path());
    let text = std::fs::read_to_string(&cfg).unwrap().replacen("\"n_test\"", "\"n_tset\"", 1);
    std::fs::write(&cfg, text).unwrap();
    let o = mhattn(&["learn", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_tset"), "{}", stderr(&o));
}

#[test]
fn invalid_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["tight"]["eps"] = (-1.0).into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = mhattn(&["learn", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
