use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn symq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symq"))
        .args(args)
        .current_dir(dir)
        .env_remove("SYMQ_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// The single run directory under `root` whose name starts with `prefix`.
fn run_dir(root: &Path, prefix: &str) -> PathBuf {
    let found: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(found.len(), 1, "{found:?}");
    found.into_iter().next().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn meta_value(path: &Path, key: &str) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
        .unwrap_or_else(|| panic!("{key} missing in {}", path.display()))
}

#[test]
fn abstract_reports_counts() {
    let t = TempDir::new().unwrap();
    write(t.path(), "c.toml", "[abstraction]\nn_state_cells = 40\nn_action_cells = 3\n");
    let o = symq(t.path(), &["abstract", "--config", "c.toml", "--out", "runs"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("state cells: 1600"), "{out}");
    assert!(out.contains("action cells: 3"), "{out}");
    assert!(out.contains("mean successors:"));
    assert!(out.contains("implied epsilon:"));
    let dir = run_dir(&t.path().join("runs"), "abstract_");
    assert!(dir.file_name().unwrap().to_string_lossy().ends_with("_seed0"));
    for f in ["abstraction.csv", "abstraction.csv.meta", "run.meta", "config.toml"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn abstraction_hash_is_stable_across_runs_and_jobs() {
    let t = TempDir::new().unwrap();
    write(t.path(), "c.toml", "[abstraction]\nn_state_cells = 30\n");
    for (out, jobs) in [("a", "1"), ("b", "2")] {
        let o = symq(t.path(), &["abstract", "--config", "c.toml", "--out", out, "--jobs", jobs]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = run_dir(&t.path().join("a"), "abstract_");
    let b = run_dir(&t.path().join("b"), "abstract_");
    assert_eq!(fs::read(a.join("abstraction.csv")).unwrap(), fs::read(b.join("abstraction.csv")).unwrap());
    assert_eq!(
        meta_value(&a.join("abstraction.csv.meta"), "content_hash"),
        meta_value(&b.join("abstraction.csv.meta"), "content_hash")
    );
}

#[test]
fn validation_failures_exit_2() {
    let t = TempDir::new().unwrap();
    write(t.path(), "eta.toml", "[abstraction]\neta = -0.5\n");
    let o = symq(t.path(), &["abstract", "--config", "eta.toml", "--out", "runs"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("eta"), "{}", stderr(&o));

    write(t.path(), "key.toml", "[learning]\ngama = 0.5\n");
    let o = symq(t.path(), &["train", "--config", "key.toml", "--out", "runs"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gama"), "{}", stderr(&o));

    let o = symq(t.path(), &["abstract", "--out", "runs"]);
    assert_eq!(code(&o), 2);
    let o = symq(t.path(), &["abstract", "--config", "absent.toml"]);
    assert_eq!(code(&o), 2);
    let o = symq(t.path(), &["abstract", "--config", "eta.toml", "--jobs", "0"]);
    assert_eq!(code(&o), 2);
    assert!(!t.path().join("runs").exists());
}

#[test]
fn simulate_without_policy_file_exits_2() {
    let t = TempDir::new().unwrap();
    write(t.path(), "s.toml", "[inputs]\npolicy = \"missing.csv\"\n");
    let o = symq(t.path(), &["simulate", "--config", "s.toml", "--out", "runs"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    write(t.path(), "s2.toml", "");
    let o = symq(t.path(), &["simulate", "--config", "s2.toml", "--out", "runs"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("inputs.policy"));
}

#[test]
fn non_convergence_exits_4() {
    let t = TempDir::new().unwrap();
    write(
        t.path(),
        "vi.toml",
        "[abstraction]\nn_state_cells = 10\n[learning]\nmethod = \"value_iteration\"\nmax_sweeps = 3\n",
    );
    let o = symq(t.path(), &["train", "--config", "vi.toml", "--out", "runs"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("residual"));
}

/// abstract, train, policy and simulate chained through their files.
#[test]
fn pipeline_and_artifact_checks() {
    let t = TempDir::new().unwrap();
    let root = t.path();
    let runs = root.join("runs");
    write(root, "a.toml", "[abstraction]\nn_state_cells = 24\n");
    assert_eq!(code(&symq(root, &["abstract", "--config", "a.toml", "--out", "runs"])), 0);
    let a = run_dir(&runs, "abstract_");
    let abs = a.join("abstraction.csv");
    let abs_before = fs::read(&abs).unwrap();

    let train_cfg = format!(
        "[abstraction]\nn_state_cells = 24\n[learning]\nepisodes = 300\n[inputs]\nabstraction = \"{}\"\n",
        abs.display()
    );
    write(root, "t.toml", &train_cfg);
    let o = symq(root, &["train", "--config", "t.toml", "--out", "runs", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tr = run_dir(&runs, "train_");
    assert!(tr.file_name().unwrap().to_string_lossy().ends_with("_seed3"));
    assert_eq!(fs::read(&abs).unwrap(), abs_before, "input must not change");
    assert_eq!(
        meta_value(&tr.join("qtables.csv.meta"), "abstraction_hash"),
        meta_value(&abs.with_extension("csv.meta"), "content_hash")
    );

    write(
        root,
        "p.toml",
        &format!(
            "[abstraction]\nn_state_cells = 24\n[inputs]\nabstraction = \"{}\"\nqtables = \"{}\"\n",
            abs.display(),
            tr.join("qtables.csv").display()
        ),
    );
    let o = symq(root, &["policy", "--config", "p.toml", "--out", "runs"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let p = run_dir(&runs, "policy_");
    let header = fs::read_to_string(p.join("policy_qmax.csv")).unwrap();
    assert!(header.starts_with("s_index,x1,x2,action_index,u1\n"));
    assert_eq!(header.lines().count(), 24 * 24 + 1);

    write(
        root,
        "s.toml",
        &format!(
            "[abstraction]\nn_state_cells = 24\n[simulation]\nhorizon = 50\n[inputs]\nabstraction = \"{}\"\npolicy = \"{}\"\n",
            abs.display(),
            p.join("policy_qmax.csv").display()
        ),
    );
    let o = symq(root, &["simulate", "--config", "s.toml", "--out", "runs"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = run_dir(&runs, "simulate_");
    let traj = fs::read_to_string(s.join("trajectory.csv")).unwrap();
    assert!(traj.starts_with("k,x1,x2,u1,reward\n0,-0.5,0,"), "{traj}");

    // A training config whose grid disagrees with the abstraction file.
    write(root, "bad.toml", &train_cfg.replace("n_state_cells = 24", "n_state_cells = 12"));
    let o = symq(root, &["train", "--config", "bad.toml", "--out", "other"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // A policy built against another abstraction.
    write(root, "a2.toml", "[abstraction]\nn_state_cells = 24\nn_action_cells = 4\n");
    assert_eq!(code(&symq(root, &["abstract", "--config", "a2.toml", "--out", "second"])), 0);
    let a2 = run_dir(&root.join("second"), "abstract_").join("abstraction.csv");
    write(
        root,
        "s2.toml",
        &format!(
            "[abstraction]\nn_state_cells = 24\nn_action_cells = 4\n[inputs]\nabstraction = \"{}\"\npolicy = \"{}\"\n",
            a2.display(),
            p.join("policy_qmax.csv").display()
        ),
    );
    let o = symq(root, &["simulate", "--config", "s2.toml", "--out", "other"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // Tampered abstraction content.
    let mut bytes = abs_before.clone();
    let n = bytes.len();
    bytes[n - 3] = if bytes[n - 3] == b'1' { b'2' } else { b'1' };
    let copy = root.join("tampered.csv");
    fs::write(&copy, &bytes).unwrap();
    fs::copy(abs.with_extension("csv.meta"), root.join("tampered.csv.meta")).unwrap();
    write(root, "tam.toml", &train_cfg.replace(&abs.display().to_string(), "tampered.csv"));
    let o = symq(root, &["train", "--config", "tam.toml", "--out", "other"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn analyze_reports_lmi_spectral_radius() {
    let t = TempDir::new().unwrap();
    write(
        t.path(),
        "a.toml",
        "[lipschitz]\nl_admissible = 1.0\n[analysis]\ngamma = 0.99\nhorizon = 50\n",
    );
    let o = symq(t.path(), &["analyze", "--config", "a.toml", "--out", "runs"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("lmi_spectral_radius = ").map(str::to_string))
        .expect("report line");
    // [[a, b], [a, b]] has eigenvalues 0 and a + b.
    let expected = 0.99 * (1.0025 + 1.0);
    assert!((line.parse::<f64>().unwrap() - expected).abs() < 1e-12, "{line}");
    let dir = run_dir(&t.path().join("runs"), "analyze_");
    assert!(fs::read_to_string(dir.join("analysis.txt")).unwrap().contains("lmi_feasible = false"));
}

#[test]
fn exp1_default_writes_policies_and_trajectories() {
    let t = TempDir::new().unwrap();
    write(t.path(), "e.toml", "");
    let o = symq(t.path(), &["experiment", "exp1", "--config", "e.toml", "--out", "runs"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dir = run_dir(&t.path().join("runs"), "exp1_");
    let names: Vec<String> = files(&dir).into_keys().collect();
    let policies = names.iter().filter(|n| n.starts_with("policy_") && n.ends_with(".csv")).count();
    let trajectories = names.iter().filter(|n| n.starts_with("trajectory_") && n.ends_with(".csv")).count();
    assert_eq!((policies, trajectories), (2, 2), "{names:?}");
    assert!(stdout(&o).contains("qmax_reached"));
}

#[test]
fn experiment_outputs_ignore_job_count_and_use_env_root() {
    let t = TempDir::new().unwrap();
    write(
        t.path(),
        "e.toml",
        "[experiment]\nstate_cells = [10, 16]\naction_cells = [3, 4]\n[learning]\nepisodes = 40\nmax_steps = 100\n",
    );
    let mut dirs = Vec::new();
    for (i, jobs) in ["1", "2", "3"].iter().enumerate() {
        let root = t.path().join(format!("env{i}"));
        let o = Command::new(env!("CARGO_BIN_EXE_symq"))
            .args(["experiment", "exp2", "--config", "e.toml", "--seed", "11", "--jobs", jobs])
            .current_dir(t.path())
            .env("SYMQ_OUT_DIR", &root)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dirs.push(run_dir(&root, "exp2_"));
    }
    assert!(dirs[0].file_name().unwrap().to_string_lossy().ends_with("_seed11"));
    let first = files(&dirs[0]);
    assert!(first.contains_key("table.csv") && first.contains_key("plot.gp"));
    for d in &dirs[1..] {
        assert_eq!(files(d), first);
    }
}
