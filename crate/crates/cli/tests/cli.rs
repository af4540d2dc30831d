//! End-to-end tests of the `pmlp` binary: exit codes, report shape,
//! determinism, and the parse/emit round trip.

use serde_json::Value;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmlp"))
}

fn write_tmp(name: &str, body: &str) -> PathBuf {
    let path = std::env::temp_dir().join(format!("pmlp-cli-{}-{name}", std::process::id()));
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

const TINY: &str = r#"{"name":"tiny","A":[[1.0,1.0]],"b":[1.0],"c":[1.0,0.0],"R_bound":4.0}"#;

#[test]
fn solve_emits_full_report() {
    let lp = write_tmp("tiny.json", TINY);
    let out = bin()
        .args(["solve", lp.to_str().unwrap(), "--sketch", "identity", "--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["name"], "tiny");
    assert_eq!(v["x"].as_array().unwrap().len(), 2);
    assert!(v["objective"].as_f64().unwrap() < 0.05);
    assert!(v["feasibility_l1"].as_f64().unwrap() >= 0.0);
    assert!(v["iterations"].as_u64().unwrap() > 0);
    for key in [
        "matrix_updates",
        "partial_matrix_updates",
        "vector_updates",
        "partial_vector_updates",
        "rejected_steps",
        "classical_steps",
    ] {
        assert!(v["counters"][key].is_u64(), "missing counter {key}");
    }
    assert!(v["potential_max"].is_f64());
}

#[test]
fn solve_is_byte_deterministic_and_seed_env_matches_flag() {
    let lp = write_tmp("det.json", TINY);
    let run = |env_seed: Option<&str>, flag_seed: Option<&str>| {
        let mut cmd = bin();
        cmd.args(["solve", lp.to_str().unwrap(), "--sketch", "srht"]);
        if let Some(s) = flag_seed {
            cmd.args(["--seed", s]);
        }
        cmd.env_remove("SEED");
        if let Some(s) = env_seed {
            cmd.env("SEED", s);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        out.stdout
    };
    let a = run(None, Some("11"));
    let b = run(None, Some("11"));
    assert_eq!(a, b, "same flags must give byte-identical stdout");
    let c = run(Some("11"), None);
    assert_eq!(a, c, "SEED env must act as the seed fallback");
}

#[test]
fn ragged_matrix_is_reported_with_row_index() {
    let lp = write_tmp(
        "ragged.json",
        r#"{"name":"bad","A":[[1.0,2.0],[3.0]],"b":[1.0,1.0],"c":[1.0,0.0]}"#,
    );
    let out = bin().args(["solve", lp.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("row 1"), "stderr: {}", stderr(&out));
}

#[test]
fn malformed_json_exits_one_with_position() {
    let lp = write_tmp("broken.json", "{\"name\":\"bad\",\"A\":[[1.0,\n");
    let out = bin().args(["solve", lp.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains(":2:"), "stderr: {}", stderr(&out));
}

#[test]
fn plan_pins_known_exponents_and_rejects_bad_ranges() {
    let out = bin().args(["plan", "--omega", "2.0", "--alpha", "1.0"]).output().unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((v["a"].as_f64().unwrap() - 8.0 / 9.0).abs() < 1e-12);
    assert!((v["atilde"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((v["exponent"].as_f64().unwrap() - (2.0 + 1.0 / 18.0)).abs() < 1e-12);
    for args in [["plan", "--omega", "1.9", "--alpha", "0.5"], ["plan", "--omega", "2.5", "--alpha", "1.1"]] {
        let out = bin().args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(1));
    }
}

#[test]
fn check_random_walk_passes_and_corruption_is_caught() {
    let out = bin()
        .args(["check", "--random", "16", "8", "3", "--steps", "40", "--sketch", "srht"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(v["max_residual"].as_f64().unwrap() <= 1e-6);
    assert!(v["query_oracle_max_err"].as_f64().unwrap() <= 1e-6);
    assert_eq!(v["eps_far_ok"], true);

    let out = bin()
        .args(["check", "--random", "12", "6", "5", "--steps", "30", "--self-test-corrupt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "corrupted state must fail the audit");
}

#[test]
fn check_threshold_overrides_change_counters() {
    let run = |extra: &[&str]| {
        let mut args = vec!["check", "--random", "16", "8", "9", "--steps", "30"];
        args.extend_from_slice(extra);
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
        v["counters"]["matrix_updates"].as_u64().unwrap()
    };
    let default_mu = run(&[]);
    let forced_mu = run(&["--threshold-k", "16", "--threshold-ktilde", "2"]);
    assert!(forced_mu < default_mu, "a high k threshold must defer full refreshes");
}

#[test]
fn emit_round_trips_exactly() {
    let lp = write_tmp("rt.json", TINY);
    let once = bin().args(["emit", lp.to_str().unwrap()]).output().unwrap();
    assert!(once.status.success());
    let emitted = write_tmp("rt2.json", &stdout(&once));
    let twice = bin().args(["emit", emitted.to_str().unwrap()]).output().unwrap();
    assert!(twice.status.success());
    assert_eq!(once.stdout, twice.stdout, "parse(emit(lp)) must equal lp");
}

#[test]
fn infeasible_instance_exits_two() {
    // sum of nonnegative coordinates can never equal -5
    let lp = write_tmp(
        "infeas.json",
        r#"{"name":"infeas","A":[[1.0,1.0,1.0]],"b":[-5.0],"c":[0.0,0.0,0.0],"R_bound":1.0}"#,
    );
    let out = bin()
        .args(["solve", lp.to_str().unwrap(), "--sketch", "identity", "--seed", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("infeasib"), "stderr: {}", stderr(&out));
}

#[test]
fn trace_file_is_line_delimited_json_matching_iterations() {
    let lp = write_tmp("traced.json", TINY);
    let trace = std::env::temp_dir().join(format!("pmlp-cli-{}-trace.jsonl", std::process::id()));
    let out = bin()
        .args([
            "solve",
            lp.to_str().unwrap(),
            "--sketch",
            "identity",
            "--seed",
            "5",
            "--trace",
            trace.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["trace_path"], trace.to_str().unwrap());
    let body = std::fs::read_to_string(&trace).unwrap();
    let mut lines = 0u64;
    for line in body.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        for key in ["iter", "t", "phi", "k", "ktilde", "p", "ptilde", "rejected", "classical"] {
            assert!(!rec[key].is_null(), "trace record missing {key}");
        }
        lines += 1;
    }
    assert_eq!(lines, report["iterations"].as_u64().unwrap());
}
