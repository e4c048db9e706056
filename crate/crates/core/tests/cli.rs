use std::path::Path;
use std::process::{Command, Output};

fn lls(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lls"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn setup(levels: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("schema.json"), format!(r#"{{"levels":{}}}"#, levels)).unwrap();
    let o = lls(
        dir.path(),
        &["generate", "--schema", "schema.json", "--k", "2", "--support", "3", "--n", "5000",
          "--seed", "4", "--model-out", "model.json", "--data-out", "data.csv"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&lls(dir.path(), &[])), 2);
    assert_eq!(code(&lls(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&lls(dir.path(), &["estimate", "--basis-out", "b.json"])), 2);
    assert_eq!(code(&lls(dir.path(), &["--version"])), 0);
}

#[test]
fn zero_moment_order_is_a_usage_error() {
    let dir = setup("[2,2,2,2,2]");
    let o = lls(
        dir.path(),
        &["moments", "--from-moments", "model.json", "--basis", "model.json", "--targets", "t",
          "--moment-order", "0", "--out", "m.csv"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn nonpositive_factor_is_a_usage_error() {
    let dir = setup("[2,2,2,2,2]");
    let o = lls(
        dir.path(),
        &["estimate", "--from-moments", "model.json", "--basis-out", "b.json",
          "--rank-threshold-factor", "-1"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn exact_pipeline_and_evaluation() {
    let dir = setup("[2,3,2,2,3,2]");
    let p = dir.path();
    let o = lls(p, &["estimate", "--from-moments", "model.json", "--basis-out", "basis.json",
                     "--report-out", "report.json", "--matrix-out", "matrix.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let matrix = std::fs::read_to_string(p.join("matrix.csv")).unwrap();
    assert!(matrix.contains("1:1"));
    assert!(matrix.contains('?'));

    std::fs::write(p.join("targets.txt"), "# targets\n1,2,0,0,0,0\n\n2,1,1,0,3,0\n").unwrap();
    let o = lls(p, &["moments", "--from-moments", "model.json", "--basis", "basis.json",
                     "--targets", "targets.txt", "--out", "moments.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("moments.json")).unwrap()).unwrap();
    assert!(report["residualNorm"].as_f64().unwrap() < 1e-9);
    assert!(report["relations"].as_u64().unwrap() > 0);
    assert!(report["anchors"].as_u64().unwrap() > 0);

    let o = lls(p, &["evaluate", "--model", "model.json", "--basis", "basis.json",
                     "--moments", "moments.csv", "--out", "eval.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ev: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("eval.json")).unwrap()).unwrap();
    assert!(ev["maxAngle"].as_f64().unwrap() < 1e-8);
    assert!(ev["conditionalMomentError"].as_f64().unwrap() < 1e-7);
    for f in ["basis.json", "moments.csv", "eval.json", "model.json"] {
        assert!(p.join(format!("{}.manifest.json", f)).exists(), "{} manifest", f);
    }
}

#[test]
fn sampled_data_default_rank_rule_or_fixed_k() {
    let dir = setup("[2,2,2,2,2,2,2]");
    let p = dir.path();
    let o = lls(p, &["estimate", "--schema", "schema.json", "--data", "data.csv",
                     "--basis-out", "b.json", "--k-override", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = lls(p, &["moments", "--schema", "schema.json", "--data", "data.csv", "--basis", "b.json",
                     "--targets", "observed", "--moment-order", "1", "--out", "m.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn zero_frequency_targets_are_skipped() {
    let dir = setup("[2,2,2,2,2,2,2,2,2,2,2,2]");
    let p = dir.path();
    assert_eq!(code(&lls(p, &["estimate", "--from-moments", "model.json", "--basis-out", "b.json"])), 0);
    // 4096 possible rows, 5000 draws: build a target absent from the data.
    let data = std::fs::read_to_string(p.join("data.csv")).unwrap();
    let seen: std::collections::HashSet<&str> = data.lines().skip(1).collect();
    let mut missing = None;
    for bits in 0..4096u32 {
        let row: Vec<String> = (0..12).map(|j| (1 + ((bits >> j) & 1)).to_string()).collect();
        let row = row.join(",");
        if !seen.contains(row.as_str()) {
            missing = Some(row);
            break;
        }
    }
    let missing = missing.expect("some pattern unobserved");
    std::fs::write(p.join("t.txt"), format!("1,0,0,0,0,0,0,0,0,0,0,0\n{}\n", missing)).unwrap();
    let o = lls(p, &["moments", "--schema", "schema.json", "--data", "data.csv", "--basis", "b.json",
                     "--targets", "t.txt", "--out", "m.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("m.json")).unwrap()).unwrap();
    assert_eq!(report["skippedTargets"][0].as_str().unwrap(), missing);
}

#[test]
fn constant_variable_is_a_data_error() {
    let dir = setup("[2,2,2,2,2]");
    let p = dir.path();
    let data = std::fs::read_to_string(p.join("data.csv")).unwrap();
    let fixed: Vec<String> = data
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                l.to_string()
            } else {
                let mut f: Vec<&str> = l.split(',').collect();
                f[2] = "1";
                f.join(",")
            }
        })
        .collect();
    std::fs::write(p.join("const.csv"), fixed.join("\n") + "\n").unwrap();
    let o = lls(p, &["estimate", "--schema", "schema.json", "--data", "const.csv", "--basis-out", "b.json"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("single observed value"));
}

#[test]
fn mismatched_levels_are_data_errors() {
    let dir = setup("[2,2,2,2,2]");
    let p = dir.path();
    std::fs::write(p.join("other.json"), r#"{"levels":[3,2,2,2,2]}"#).unwrap();
    let o = lls(p, &["estimate", "--schema", "other.json", "--from-moments", "model.json", "--basis-out", "b.json"]);
    assert_eq!(code(&o), 3);
    std::fs::write(p.join("bad.csv"), "a,b,c,d,e\n1,2,3,1,1\n").unwrap();
    let o = lls(p, &["estimate", "--schema", "schema.json", "--data", "bad.csv", "--basis-out", "b.json"]);
    assert_eq!(code(&o), 3);

    let other = setup("[2,2,2,2,2,2]");
    assert_eq!(code(&lls(other.path(), &["estimate", "--from-moments", "model.json", "--basis-out", "b.json"])), 0);
    let foreign = other.path().join("b.json");
    let o = lls(p, &["evaluate", "--model", "model.json", "--basis", foreign.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn generate_rejects_impossible_dimension() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("schema.json"), r#"{"levels":[2,2]}"#).unwrap();
    let o = lls(dir.path(), &["generate", "--schema", "schema.json", "--k", "5", "--support", "5",
                              "--n", "10", "--model-out", "m.json", "--data-out", "d.csv"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let dir = setup("[2,3,2,2,2]");
    let p = dir.path();
    let o = lls(p, &["replay", "model.json.manifest.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(p.join("data.csv")).unwrap();
    assert_eq!(code(&lls(p, &["replay", "model.json.manifest.json"])), 0);
    assert_eq!(std::fs::read(p.join("data.csv")).unwrap(), first);

    assert_eq!(code(&lls(p, &["estimate", "--from-moments", "model.json", "--basis-out", "b.json"])), 0);
    std::fs::write(p.join("model.json"), b"{}").unwrap();
    let o = lls(p, &["replay", "b.json.manifest.json"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("changed"));
}

#[test]
fn manifest_records_inputs_and_argv() {
    let dir = setup("[2,2,2,2,2]");
    let text = std::fs::read_to_string(dir.path().join("model.json.manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(m["command"], "generate");
    assert_eq!(m["argv"][0], "generate");
    assert_eq!(m["inputs"][0]["path"], "schema.json");
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["config"]["k"], 2);
}
