//! End-to-end runs of the binary on a tiny benchmark.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use resroute::train::read_compare_csv;

const TINY: &str = r#"{"train_per_class":3,"val_per_class":1,"test_per_class":2}"#;

fn resroute(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_resroute"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "resroute {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_tiny(dir: &Path) {
    fs::write(dir.join("spec.json"), TINY).unwrap();
    resroute(dir, &["gen", "--spec", "spec.json", "--out", "d.bin"]);
}

#[test]
fn every_subcommand_runs_and_writes_versioned_output() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_tiny(d);
    resroute(
        d,
        &["--epoch-scale", "0.1", "train", "--data", "d.bin", "--out", "ck.json", "--log", "log.csv"],
    );
    let log = fs::read_to_string(d.join("log.csv")).unwrap();
    assert!(log.starts_with(
        "epoch,stage,loss_acc,loss_flops,loss_uni,total,acc,gflops_f,gflops_v,tau\n"
    ));
    // 1 warm-up + 5 joint + 5 finetune epochs at scale 0.1
    assert_eq!(log.lines().count(), 1 + 11);

    let ck: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("ck.json")).unwrap()).unwrap();
    assert_eq!(ck["version"], 1);

    resroute(
        d,
        &["eval", "--checkpoint", "ck.json", "--data", "d.bin", "--metrics", "m.json", "--traces", "t.jsonl"],
    );
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["version"], 1);
    assert_eq!(m["videos"], 12);
    assert_eq!(m["cost_table"], "paper");
    let traces = fs::read_to_string(d.join("t.jsonl")).unwrap();
    assert_eq!(traces.lines().count(), 12 * 16);

    for kind in ["random", "multiscale"] {
        resroute(
            d,
            &["--seed", "3", "baseline", "--kind", kind, "--checkpoint", "ck.json", "--data", "d.bin", "--metrics", "b.json"],
        );
    }
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("b.json")).unwrap()).unwrap();
    // Every frame at every level.
    let expected = 16.0 * (4.1103 + 2.2490 + 0.4683 + 0.0529);
    assert!((b["gflops_v"].as_f64().unwrap() - expected).abs() < 1e-9);

    resroute(d, &["hist", "--traces", "t.jsonl", "--checkpoint", "ck.json", "--out", "h.csv"]);
    let h = fs::read_to_string(d.join("h.csv")).unwrap();
    assert!(h.starts_with("group,frames,a0,a1,a2,a3,a4,a5,a6,high_res_share,resolution_ratio\n"));
    assert!(h.lines().nth(1).unwrap().starts_with("all,192,"));

    fs::write(
        d.join("runs.json"),
        r#"[{"label":"a","checkpoint":"ck.json"},{"label":"b","checkpoint":"ck.json"}]"#,
    )
    .unwrap();
    resroute(d, &["curve", "--runs", "runs.json", "--data", "d.bin", "--out", "c.csv"]);
    let c = fs::read_to_string(d.join("c.csv")).unwrap();
    assert_eq!(c.lines().count(), 3);
    assert!(c.starts_with("label,gflops_v,accuracy,map\n"));
}

#[test]
fn analytic_table_and_full_accounting_change_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_tiny(d);
    resroute(
        d,
        &["--epoch-scale", "0.1", "train", "--data", "d.bin", "--out", "ck.json", "--log", "log.csv"],
    );
    resroute(
        d,
        &["--cost-table", "analytic", "--accounting", "full", "eval", "--checkpoint", "ck.json", "--data", "d.bin", "--metrics", "m.json"],
    );
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["cost_table"], "analytic");
    assert!(m["gflops_v_full"].as_f64().unwrap() >= m["gflops_v"].as_f64().unwrap());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_tiny(d);
    for run in ["a", "b"] {
        let (ck, log, m) = (format!("ck_{run}.json"), format!("log_{run}.csv"), format!("m_{run}.json"));
        resroute(
            d,
            &["--seed", "7", "--epoch-scale", "0.1", "train", "--data", "d.bin", "--out", &ck, "--log", &log],
        );
        resroute(d, &["eval", "--checkpoint", &ck, "--data", "d.bin", "--metrics", &m]);
    }
    for (a, b) in [("ck_a.json", "ck_b.json"), ("log_a.csv", "log_b.csv"), ("m_a.json", "m_b.json")] {
        assert_eq!(fs::read(d.join(a)).unwrap(), fs::read(d.join(b)).unwrap(), "{a} vs {b}");
    }
}

#[test]
fn compare_rl_emits_two_rows_over_identical_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_tiny(d);
    resroute(d, &["--epoch-scale", "0.1", "compare-rl", "--data", "d.bin", "--out", "cmp.csv"]);
    let rows = read_compare_csv(fs::File::open(d.join("cmp.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].method.to_string(), "gumbel");
    assert_eq!(rows[1].method.to_string(), "reinforce");
    assert_eq!(rows[0].split_digest, rows[1].split_digest);
    assert!(d.join("cmp.runs/gumbel.json").exists());
    assert!(d.join("cmp.runs/reinforce_log.csv").exists());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_tiny(d);
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_resroute"))
            .current_dir(d)
            .args(args)
            .output()
            .unwrap()
    };
    let out = run(&["baseline", "--kind", "oracle", "--checkpoint", "x", "--data", "d.bin", "--metrics", "m"]);
    assert!(!out.status.success());

    fs::write(d.join("cfg.json"), r#"{"batch_size":0}"#).unwrap();
    let out = run(&["train", "--config", "cfg.json", "--data", "d.bin", "--out", "c", "--log", "l"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = run(&["eval", "--checkpoint", "missing.json", "--data", "d.bin", "--metrics", "m"]);
    assert!(!out.status.success());
}
