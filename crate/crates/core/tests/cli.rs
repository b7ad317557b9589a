use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use splinevine::cli::{run_evaluate, run_fit, run_simulate, EvalSummary, Manifest, SimulateArgs};
use splinevine::io::read_csv;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splinevine"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, dgp: &str, n: &str, reps: &str, seed: &str) {
    run_ok(&["simulate", "--dgp", dgp, "--n", n, "--reps", reps, "--seed", seed, "--out", s(dir)]);
}

#[test]
fn simulate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    simulate(&a, "frank:p=3,case=b,beta=0.6", "200", "2", "7");
    simulate(&b, "frank:p=3,case=b,beta=0.6", "200", "2", "7");
    simulate(&c, "frank:p=3,case=b,beta=0.6", "200", "2", "8");
    for f in ["rep0_train.csv", "rep0_eval.csv", "rep1_train.csv", "rep1_eval.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        assert_ne!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("rep0_train.csv")).unwrap(), fs::read(a.join("rep1_train.csv")).unwrap());
    let t = read_csv(&a.join("rep1_train.csv")).unwrap();
    assert_eq!(t.header, vec!["u1", "u2", "u3"]);
    assert_eq!(t.data.shape(), (200, 3));
}

#[test]
fn manifest_replays_a_run() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    simulate(&a, "mixture:p=3", "150", "1", "3");
    let m: Manifest<SimulateArgs> = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "simulate");
    assert_eq!(m.outputs, vec!["rep0_train.csv", "rep0_eval.csv"]);
    let mut args = m.config;
    args.out = tmp.path().join("b");
    run_simulate(&args).unwrap();
    for f in &m.outputs {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(args.out.join(f)).unwrap());
    }
}

#[test]
fn fit_then_evaluate() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("sim");
    let fit = tmp.path().join("fit");
    let ev = tmp.path().join("ev");
    simulate(&sim, "frank:p=3,case=b,beta=0.6", "400", "1", "1");
    run_ok(&["fit", "--data", s(&sim.join("rep0_train.csv")), "--estimator", "simpa", "test", "--out", s(&fit)]);
    for f in ["rep0_train_simpa.json", "rep0_train_test.json", "rep0_train_simpa_edges.csv", "manifest.json"] {
        assert!(fit.join(f).exists(), "{f}");
    }
    assert!(!fit.join("rep0_train_cond.json").exists());
    let edges = read_edges(&fit.join("rep0_train_test_edges.csv"));
    assert_eq!(edges.len(), 4);
    assert_eq!(edges[0], "tree,edge,kind,n_coef,lambda,df,loglik,caic,converged,sa_statistic,sa_pvalue,sa_reject,caic_prefers_conditional");

    let models = [fit.join("rep0_train_simpa.json"), fit.join("rep0_train_test.json")];
    let stdout = run_ok(&[
        "evaluate",
        "--model",
        s(&models[0]),
        s(&models[1]),
        "--data",
        s(&sim.join("rep0_eval.csv")),
        "--dgp",
        "frank:p=3,case=b,beta=0.6",
        "--out",
        s(&ev),
    ]);
    assert!(stdout.contains("median KL"));
    let summary: EvalSummary = serde_json::from_str(&fs::read_to_string(ev.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(summary.reports.len(), 2);
    assert!(summary.reports.iter().all(|r| r.kl.is_some_and(|k| k.is_finite())));
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert!(csv.starts_with("replicate,estimator,kl,oos_loglik\n"));
    assert_eq!(csv.lines().count(), 3);

    let ev2 = tmp.path().join("ev2");
    run_ok(&["evaluate", "--model", s(&models[0]), "--data", s(&sim.join("rep0_eval.csv")), "--out", s(&ev2)]);
    let csv = fs::read_to_string(ev2.join("eval.csv")).unwrap();
    assert!(csv.starts_with("replicate,estimator,oos_loglik\n"));
}

fn read_edges(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(str::to_owned).collect()
}

#[test]
fn roc_curve_is_monotone() {
    let tmp = TempDir::new().unwrap();
    let (s0, s1) = (tmp.path().join("s0"), tmp.path().join("s1"));
    simulate(&s0, "frank:p=3,tau=0.5", "300", "1", "1");
    simulate(&s1, "frank:p=3,case=b,beta=0.6", "300", "1", "2");
    let fit = tmp.path().join("fit");
    let fit_args = splinevine::cli::FitArgs {
        data: vec![s0.join("rep0_train.csv"), s1.join("rep0_train.csv")],
        ranks: false,
        estimator: vec![splinevine::cli::Estimator::Simpa],
        basis: splinevine::cli::BasisArgs { d: 2, d2: 4, d3: 4, alpha: 0.05 },
        out: fit.clone(),
    };
    let mut a0 = fit_args.clone();
    a0.data.truncate(1);
    a0.out = fit.join("0");
    let mut a1 = fit_args;
    a1.data.remove(0);
    a1.out = fit.join("1");
    run_fit(&a0).unwrap();
    run_fit(&a1).unwrap();

    let e0 = fs::read_to_string(s0.join("rep0_eval.csv")).unwrap();
    let e1 = fs::read_to_string(s1.join("rep0_eval.csv")).unwrap();
    let mut pooled = e0.clone();
    pooled.extend(e1.lines().skip(1).map(|l| format!("{l}\n")));
    let data = tmp.path().join("pooled.csv");
    fs::write(&data, pooled).unwrap();
    let labels = tmp.path().join("labels.csv");
    let mut lab = String::from("label\n");
    lab.push_str(&"0\n".repeat(300));
    lab.push_str(&"1\n".repeat(300));
    fs::write(&labels, lab).unwrap();

    let out = tmp.path().join("roc");
    let mut args = splinevine::cli::EvaluateArgs {
        model: vec![fit.join("0/rep0_train_simpa.json"), fit.join("1/rep0_train_simpa.json")],
        data: vec![data],
        ranks: false,
        dgp: None,
        labels: Some(labels),
        pi0: 0.5,
        n: 500,
        n_eval: None,
        reps: 1,
        seed: 1,
        estimator: vec![splinevine::cli::Estimator::All],
        basis: splinevine::cli::BasisArgs { d: 2, d2: 4, d3: 4, alpha: 0.05 },
        out: out.clone(),
    };
    run_evaluate(&args).unwrap();
    let roc = read_csv(&out.join("roc.csv")).unwrap();
    assert_eq!(roc.header, vec!["threshold", "fpr", "tpr"]);
    let rows: Vec<[f64; 3]> = (0..roc.data.nrows()).map(|i| [roc.data[(i, 0)], roc.data[(i, 1)], roc.data[(i, 2)]]).collect();
    assert_eq!(rows[0], [0.0, 0.0, 0.0]);
    assert_eq!(rows.last().unwrap()[1..], [1.0, 1.0]);
    for w in rows.windows(2) {
        assert!(w[1][0] >= w[0][0] && w[1][1] >= w[0][1] && w[1][2] >= w[0][2]);
    }
    let auc: f64 = rows.windows(2).map(|w| (w[1][1] - w[0][1]) * (w[1][2] + w[0][2]) / 2.0).sum();
    assert!(auc > 0.6, "auc {auc}");

    args.model.pop();
    args.out = tmp.path().join("roc2");
    assert!(run_evaluate(&args).is_err());
}

#[test]
fn experiment_mode_reports_rejection_rate() {
    let tmp = TempDir::new().unwrap();
    let out: PathBuf = tmp.path().join("exp");
    let stdout = run_ok(&[
        "evaluate", "--dgp", "frank:p=3,case=b,beta=0.6", "--n", "300", "--reps", "2", "--seed", "5", "--out", s(&out),
    ]);
    assert!(stdout.contains("tree-2 SA rejection rate"));
    let summary: EvalSummary = serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    let names: Vec<&str> = summary.median_kl.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.len(), 3);
    assert!(summary.reports.iter().all(|r| r.replicates.len() == 2));
}

#[test]
fn satest_prints_one_row_per_conditional_edge() {
    let tmp = TempDir::new().unwrap();
    simulate(tmp.path(), "frank:p=4,case=b,beta=0.6", "300", "1", "1");
    let stdout = run_ok(&["satest", "--data", s(&tmp.path().join("rep0_train.csv")), "--out", s(&tmp.path().join("sa"))]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "tree,edge,statistic,pvalue,reject");
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert_eq!(fs::read_to_string(tmp.path().join("sa/satest.csv")).unwrap(), stdout);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "u1,u2\n0.1,0.2\n0.3,oops\n").unwrap();
    let out = bin().args(["fit", "--data", s(&bad), "--out", s(&tmp.path().join("o"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("oops"), "{err}");

    let out = bin().args(["simulate", "--dgp", "gumbel:p=3", "--out", s(tmp.path())]).output().unwrap();
    assert!(!out.status.success());
    let out = bin().args(["evaluate", "--out", s(tmp.path())]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
