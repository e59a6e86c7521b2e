use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use serde_json::Value;
use tempfile::TempDir;

const THREE_LEVEL: &str = r#"
schema_version = 1
task = "mean-scalar"
seed = 4

[model]
type = "hierarchy"
mean = [1.0, 1.5, 2.0]
sigma = [1.0, 1.2, 1.5]
rho = [0.85, 0.9, 0.95]

[structure]
L = 3
groups = [[1], [1, 2], [2, 3]]
m = [120, 30, 8]
costs = [0.01, 0.11, 1.1]
"#;

fn mlblue(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mlblue"));
    cmd.args(args).env_remove("MLBLUE_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Value {
    let out = mlblue(args, &[]);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let path = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(&fs::read_to_string(path.trim()).unwrap()).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mlblue(args, &[]).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn weights_smoke_on_three_level_structure() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", THREE_LEVEL);
    let out = dir.path().join("out");
    let r = run_ok(&["weights", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r["task"], "mean-scalar");
    assert_eq!(r["weights"].as_array().unwrap().len(), 3);
    assert!(r["bias_defect"].as_f64().unwrap() < 1e-10);
    let v = r["variance"].as_f64().unwrap();
    assert!((v - r["exact_variance"].as_f64().unwrap()).abs() <= 1e-12 * v);
    let csv = fs::read_to_string(out.join("weights.csv")).unwrap();
    assert!(csv.starts_with("group,level,beta\n"));
    assert_eq!(csv.lines().count(), 1 + 5);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert!(manifest["timings"]["compute_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn budget_allocation_satisfies_constraints() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", THREE_LEVEL);
    let out = dir.path().join("out");
    let r = run_ok(&["allocate", "--budget", "25", "--config", s(&cfg), "--out", s(&out)]);
    let m: Vec<u64> = serde_json::from_value(r["m"].clone()).unwrap();
    let costs = [0.01, 0.11, 1.1];
    let cost: f64 = m.iter().zip(costs).map(|(&m, c)| m as f64 * c).sum();
    assert!(cost <= 25.0 * (1.0 + 1e-12));
    assert!((cost - r["cost"].as_f64().unwrap()).abs() < 1e-9);
    // Re-evaluate the variance from the closed form, independently of the tool.
    let sigma = [1.0, 1.2, 1.5];
    let rho = [0.85, 0.9, 0.95];
    let cov = |a: usize, b: usize| if a == b { sigma[a] * sigma[a] } else { sigma[a] * sigma[b] * rho[a] * rho[b] };
    let groups: [&[usize]; 3] = [&[0], &[0, 1], &[1, 2]];
    let mut psi = DMatrix::<f64>::zeros(3, 3);
    for (g, &mk) in groups.iter().zip(&m) {
        let c = DMatrix::from_fn(g.len(), g.len(), |i, j| cov(g[i], g[j]));
        let ci = c.try_inverse().unwrap();
        for (i, &a) in g.iter().enumerate() {
            for (j, &b) in g.iter().enumerate() {
                psi[(a, b)] += mk as f64 * ci[(i, j)];
            }
        }
    }
    let v = psi.try_inverse().unwrap()[(2, 2)];
    assert!((v - r["variance"].as_f64().unwrap()).abs() <= 1e-12 * v);
    assert!(v <= r["uniform_variance"].as_f64().unwrap());
    assert!(r["gap"].as_f64().unwrap() >= -1e-9);
    assert!(out.join("allocation.csv").exists());
}

#[test]
fn target_allocation_meets_target() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", THREE_LEVEL);
    let r = run_ok(&["allocate", "--target", "0.05", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(r["variance"].as_f64().unwrap() <= 0.05 * 0.05 * (1.0 + 1e-12));
}

#[test]
fn replicate_reports_empirical_and_theoretical_variance() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", THREE_LEVEL);
    let out = dir.path().join("out");
    let r = run_ok(&["replicate", "--count", "400", "--config", s(&cfg), "--out", s(&out)]);
    let emp = r["empirical_variance"].as_f64().unwrap();
    let theory = r["exact_variance"].as_f64().unwrap();
    // About 7% relative standard error at 400 replications.
    assert!((emp / theory - 1.0).abs() < 0.3, "{emp} vs {theory}");
    let table = fs::read_to_string(out.join("replicate.csv")).unwrap();
    assert!(table.starts_with("component,truth,mean,mean_se,variance,variance_se\n"));
}

#[test]
fn identical_runs_are_byte_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("{THREE_LEVEL}\n[moments]\nsource = \"sampled\"\nmembers = 300\n"),
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |o: &Path| vec!["replicate".to_string(), "--count".into(), "50".into(), "--config".into(), s(&cfg).into(), "--out".into(), s(o).into()];
    let oa = mlblue(&args(&a).iter().map(String::as_str).collect::<Vec<_>>(), &[("MLBLUE_THREADS", "1")]);
    let ob = mlblue(&args(&b).iter().map(String::as_str).collect::<Vec<_>>(), &[("MLBLUE_THREADS", "3")]);
    assert!(oa.status.success() && ob.status.success(), "{}", String::from_utf8_lossy(&ob.stderr));
    assert_eq!(fs::read(a.join("results.json")).unwrap(), fs::read(b.join("results.json")).unwrap());
    assert_eq!(fs::read(a.join("replicate.csv")).unwrap(), fs::read(b.join("replicate.csv")).unwrap());
    let ma: Value = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["threads"], 3);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", THREE_LEVEL);
    let a = run_ok(&["estimate", "--config", s(&cfg), "--out", s(&dir.path().join("a"))]);
    let b = run_ok(&["estimate", "--config", s(&cfg), "--seed", "4", "--out", s(&dir.path().join("b"))]);
    let c = run_ok(&["estimate", "--config", s(&cfg), "--seed", "5", "--out", s(&dir.path().join("c"))]);
    assert_eq!(a["estimate"], b["estimate"]);
    assert_ne!(a["estimate"], c["estimate"]);
    assert_eq!(c["seed"], 5);
}

#[test]
fn referenced_files_resolve_relative_to_config() {
    let dir = TempDir::new().unwrap();
    fs::create_dir(dir.path().join("specs")).unwrap();
    write_config(
        &dir.path().join("specs"),
        "model.toml",
        "type = \"field\"\nn = 8\nlevels = [{ coupling = 0.8, cutoff = 2.0 }, { coupling = 1.0 }]\n",
    );
    write_config(
        &dir.path().join("specs"),
        "structure.json",
        r#"{"L": 2, "groups": [[1], [1, 2]], "m": [40, 10]}"#,
    );
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "schema_version = 1\ntask = \"mean-vector(field)\"\nmodel_file = \"specs/model.toml\"\nstructure_file = \"specs/structure.json\"\n[output]\ncsv = false\n",
    );
    let out = dir.path().join("out");
    let r = run_ok(&["weights", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r["flavor"], "field");
    assert!(!out.join("weights.csv").exists());
    let missing = write_config(dir.path(), "m.toml", "schema_version = 1\ntask = \"mean-scalar\"\nmodel_file = \"nope.toml\"\n[structure]\nL = 1\ngroups = [[1]]\n");
    assert_eq!(code(&["validate", "--config", s(&missing), "--out", s(&out)]), 2);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = s(&out);
    assert_eq!(code(&["weights", "--config", "/does/not/exist.toml", "--out", o]), 2);
    assert_eq!(code(&["weights", "--out", o]), 2);
    let bad_version = write_config(dir.path(), "v.toml", &THREE_LEVEL.replace("schema_version = 1", "schema_version = 7"));
    assert_eq!(code(&["validate", "--config", s(&bad_version), "--out", o]), 2);
    let bad_group = write_config(dir.path(), "g.toml", &THREE_LEVEL.replace("[2, 3]]", "[2, 4]]"));
    assert_eq!(code(&["validate", "--config", s(&bad_group), "--out", o]), 2);
    let bad_flavor = write_config(dir.path(), "f.toml", &THREE_LEVEL.replace("\"mean-scalar\"", "\"mean-scalar(matrix)\""));
    assert_eq!(code(&["validate", "--config", s(&bad_flavor), "--out", o]), 2);
    let cfg = write_config(dir.path(), "c.toml", THREE_LEVEL);
    assert_eq!(code(&["allocate", "--config", s(&cfg), "--out", o]), 2);
    assert_eq!(code(&["localize", "--config", s(&cfg), "--out", o]), 2);
    assert_eq!(code(&["weights", "--config", s(&cfg), "--threads", "0", "--out", o]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    let cov_one = write_config(dir.path(), "one.toml", &THREE_LEVEL.replace("mean-scalar", "cov-scalar").replace("m = [120, 30, 8]", "m = [120, 30, 1]"));
    assert_eq!(code(&["weights", "--config", s(&cov_one), "--out", o]), 2);
}

#[test]
fn numerical_failures_exit_with_three() {
    // Levels 2 and 3 are identical, so group {2, 3} is singular.
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &THREE_LEVEL.replace("sigma = [1.0, 1.2, 1.5]", "sigma = [1.0, 1.0, 1.0]").replace("rho = [0.85, 0.9, 0.95]", "rho = [0.9, 1.0, 1.0]"),
    );
    let out = mlblue(&["weights", "--config", s(&cfg), "--out", s(&dir.path().join("o"))], &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("group 3") && err.contains("singular"), "{err}");
}

#[test]
fn vector_and_covariance_tasks_run_end_to_end() {
    let dir = TempDir::new().unwrap();
    let field = r#"
schema_version = 1
task = "TASK"
seed = 2

[model]
type = "field"
n = 6
basis = "dct"
levels = [{ coupling = 0.8, cutoff = 2.0 }, { coupling = 1.0 }]

[structure]
L = 2
groups = [[1], [1, 2]]
m = [30, 8]
costs = [0.1, 1.1]

[localize]
calibration_members = 6
"#;
    for task in [
        "mean-vector(scalar)",
        "mean-vector(field)",
        "mean-vector(wfield)",
        "mean-vector(matrix)",
        "cov-matrix(scalar)",
        "cov-matrix(entrywise)",
        "localize",
    ] {
        let cfg = write_config(dir.path(), "c.toml", &field.replace("TASK", task));
        let out = dir.path().join(task);
        let o = s(&out);
        let w = run_ok(&["weights", "--config", s(&cfg), "--out", o]);
        if task == "localize" {
            assert_eq!(w["localization"]["classes"].as_array().unwrap().len(), 4);
            continue;
        }
        assert!(w["bias_defect"].as_f64().unwrap() < 1e-9, "{task}");
        let e = run_ok(&["estimate", "--config", s(&cfg), "--out", o]);
        let expected = if task.starts_with("cov") { 36 } else { 6 };
        assert_eq!(e["estimate"].as_array().unwrap().len(), expected, "{task}");
        if task == "mean-vector(matrix)" {
            assert_eq!(code(&["allocate", "--budget", "20", "--config", s(&cfg), "--out", o]), 2);
            continue;
        }
        let a = run_ok(&["allocate", "--budget", "20", "--config", s(&cfg), "--out", o]);
        assert!(a["cost"].as_f64().unwrap() <= 20.0 * (1.0 + 1e-12), "{task}");
        if task != "mean-vector(scalar)" && task != "cov-matrix(scalar)" {
            let fv = a["flavor_variance"].as_f64().unwrap();
            assert!(fv <= a["variance"].as_f64().unwrap() * (1.0 + 1e-9), "{task}: {fv}");
        }
    }
}

#[test]
fn matrix_weights_allocate_over_candidates() {
    let dir = TempDir::new().unwrap();
    let base = r#"
schema_version = 1
task = "mean-vector(matrix)"

[model]
type = "field"
n = 4
basis = "dct"
levels = [{ coupling = 0.8, cutoff = 2.0 }, { coupling = 1.0 }]

[structure]
L = 2
groups = [[1], [1, 2]]
costs = [0.1, 1.1]

[allocation]
candidates = [[40, 8], [100, 5], [20, 10], [200, 2]]
"#;
    let cfg = write_config(dir.path(), "c.toml", base);
    let out = dir.path().join("o");
    let r = run_ok(&["allocate", "--budget", "12", "--config", s(&cfg), "--out", s(&out)]);
    let cands = r["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 4);
    let costs: Vec<f64> = cands.iter().map(|c| c["cost"].as_f64().unwrap()).collect();
    for (c, expect) in costs.iter().zip([12.8, 15.5, 13.0, 22.2]) {
        assert!((c - expect).abs() < 1e-9, "{c} vs {expect}");
    }
    // Every candidate is over a budget of 12.
    assert!(r["best"].is_null());
    let r = run_ok(&["allocate", "--budget", "16", "--config", s(&cfg), "--out", s(&out)]);
    let feasible: Vec<usize> = (0..4).filter(|&i| cands[i]["cost"].as_f64().unwrap() <= 16.0).collect();
    let best = feasible
        .iter()
        .copied()
        .min_by(|&a, &b| r["candidates"][a]["variance"].as_f64().unwrap().total_cmp(&r["candidates"][b]["variance"].as_f64().unwrap()))
        .unwrap();
    assert_eq!(r["best"], best + 1);
    assert!(fs::read_to_string(out.join("candidates.csv")).unwrap().starts_with("candidate,m,cost,variance,feasible\n"));
    let wrong_len = write_config(dir.path(), "w.toml", &base.replace("[200, 2]]", "[200]]"));
    assert_eq!(code(&["allocate", "--config", s(&wrong_len), "--out", s(&out)]), 2);
    let not_matrix = write_config(dir.path(), "f.toml", &base.replace("(matrix)", "(field)"));
    assert_eq!(code(&["validate", "--config", s(&not_matrix), "--out", s(&out)]), 2);
}

#[test]
fn bench_runs_without_config() {
    let dir = TempDir::new().unwrap();
    let r = run_ok(&[
        "bench",
        "--sizes",
        "50,100",
        "--members",
        "6",
        "--repeats",
        "1",
        "--naive-max",
        "100",
        "--out",
        s(&dir.path().join("b")),
    ]);
    let pts = r["bench"]["points"].as_array().unwrap();
    assert_eq!(pts.len(), 2);
    for p in pts {
        assert!(p["relative_difference"].as_f64().unwrap() < 1e-10);
    }
}
