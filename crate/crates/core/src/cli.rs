//! Command-line front end: `simulate`, `fit`, `evaluate` and `satest`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condreduce::standardized_ranks;
use crate::dgp::{replicate_rng, DgpSpec};
use crate::error::{Error, Result};
use crate::io::{check_unit, format_f64, read_csv, write_atomic, write_csv, Table};
use crate::metrics::{kl_from_ratios, median, posterior_prob, roc_points, EvalReport, ReplicateScore};
use crate::vine::{fit_vine_on, select_structure_with_fits, EdgeKind, FitMode, FittedVine, VineConfig, VineEvaluator};

#[derive(Debug, Parser)]
#[command(name = "splinevine", version, about = "Penalized B-spline vine copulas")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw train/eval samples from a data-generating process.
    Simulate(SimulateArgs),
    /// Fit vine copulas to CSV data.
    Fit(FitArgs),
    /// Score fitted models, or run a full simulation experiment.
    Evaluate(EvaluateArgs),
    /// Test the simplifying assumption on every conditional edge.
    Satest(SatestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Simpa,
    Cond,
    Test,
    All,
}

fn expand(estimators: &[Estimator]) -> Vec<FitMode> {
    let mut modes = Vec::new();
    for e in estimators {
        let add: &[FitMode] = match e {
            Estimator::Simpa => &[FitMode::SimpA],
            Estimator::Cond => &[FitMode::Cond],
            Estimator::Test => &[FitMode::Test],
            Estimator::All => &FitMode::ALL,
        };
        for m in add {
            if !modes.contains(m) {
                modes.push(*m);
            }
        }
    }
    modes.sort_by_key(|m| FitMode::ALL.iter().position(|x| x == m));
    modes
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BasisArgs {
    /// Knot resolution: 2^d + 1 knots per axis.
    #[arg(long, default_value_t = 2)]
    pub d: u32,
    /// Maximum cumulated level of bivariate bases.
    #[arg(long = "D2", default_value_t = 4)]
    pub d2: u32,
    /// Maximum cumulated level of trivariate (conditional) bases.
    #[arg(long = "D3", default_value_t = 4)]
    pub d3: u32,
    /// Significance level of the simplifying-assumption test.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

impl BasisArgs {
    pub fn config(&self) -> Result<VineConfig> {
        let mut c = VineConfig::new(self.d, self.d2, self.d3)?;
        c.alpha = self.alpha;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// e.g. `frank:p=3,case=b,beta=0.6`, `frank:p=3,tau=0.25`, `mixture:p=5`.
    #[arg(long)]
    pub dgp: DgpSpec,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Evaluation sample size (defaults to n).
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Training CSV files (one replicate each).
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Replace every column by its standardized ranks.
    #[arg(long)]
    pub ranks: bool,
    #[arg(long, value_enum, num_args = 1.., default_values_t = [Estimator::All])]
    pub estimator: Vec<Estimator>,
    #[command(flatten)]
    #[serde(flatten)]
    pub basis: BasisArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Fitted model files. Without models, a simulation experiment is run
    /// from `--dgp`.
    #[arg(long, num_args = 1..)]
    pub model: Vec<PathBuf>,
    /// Evaluation CSV files: one for all models, or one per model.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub ranks: bool,
    /// True copula, enabling KL divergences.
    #[arg(long)]
    pub dgp: Option<DgpSpec>,
    /// Class labels (0/1, one column) for a two-model ROC curve.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Prior probability of the first model's class.
    #[arg(long, default_value_t = 0.5)]
    pub pi0: f64,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, num_args = 1.., default_values_t = [Estimator::All])]
    pub estimator: Vec<Estimator>,
    #[command(flatten)]
    #[serde(flatten)]
    pub basis: BasisArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SatestArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ranks: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub basis: BasisArgs,
    /// Directory for `satest.csv`; the table is printed either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Record of a run, sufficient to reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub command: String,
    pub version: String,
    pub config: C,
    pub outputs: Vec<String>,
}

fn write_manifest<C: Serialize>(dir: &Path, command: &str, config: &C, outputs: &[PathBuf]) -> Result<()> {
    let m = Manifest {
        command: command.to_owned(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        config,
        outputs: outputs
            .iter()
            .map(|p| p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned()))
            .collect(),
    };
    write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&m)?.as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Reads a data file, optionally replacing columns by standardized ranks.
pub fn load_data(path: &Path, ranks: bool) -> Result<DMatrix<f64>> {
    let t = read_csv(path)?;
    let mut data = t.data;
    if ranks {
        for j in 0..data.ncols() {
            let col: Vec<f64> = data.column(j).iter().copied().collect();
            for (i, r) in standardized_ranks(&col).into_iter().enumerate() {
                data[(i, j)] = r;
            }
        }
    } else {
        check_unit(&data)?;
    }
    Ok(data)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => run_simulate(&a).map(|_| ()),
        Command::Fit(a) => run_fit(&a).map(|_| ()),
        Command::Evaluate(a) => run_evaluate(&a).map(|_| ()),
        Command::Satest(a) => run_satest(&a).map(|_| ()),
    }
}

/// Writes `rep{r}_train.csv` and `rep{r}_eval.csv` per replicate. Replicate
/// `r` draws train then eval from stream `r` of `seed`.
pub fn run_simulate(args: &SimulateArgs) -> Result<Vec<PathBuf>> {
    if args.n == 0 || args.reps == 0 {
        return Err(Error::invalid("n and reps must be positive"));
    }
    ensure_dir(&args.out)?;
    let dgp = args.dgp.build()?;
    let n_eval = args.n_eval.unwrap_or(args.n);
    let files: Vec<Vec<PathBuf>> = (0..args.reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(args.seed, r as u64);
            let train = dgp.sample(args.n, &mut rng)?;
            let eval = dgp.sample(n_eval, &mut rng)?;
            let tp = args.out.join(format!("rep{r}_train.csv"));
            let ep = args.out.join(format!("rep{r}_eval.csv"));
            write_csv(&tp, &Table::with_default_header(train))?;
            write_csv(&ep, &Table::with_default_header(eval))?;
            Ok(vec![tp, ep])
        })
        .collect::<Result<_>>()?;
    let files: Vec<PathBuf> = files.into_iter().flatten().collect();
    write_manifest(&args.out, "simulate", args, &files)?;
    log::info!("wrote {} files to {}", files.len(), args.out.display());
    Ok(files)
}

const REPORT_HEADER: [&str; 13] = [
    "tree",
    "edge",
    "kind",
    "n_coef",
    "lambda",
    "df",
    "loglik",
    "caic",
    "converged",
    "sa_statistic",
    "sa_pvalue",
    "sa_reject",
    "caic_prefers_conditional",
];

/// Per-edge summary table of a fitted vine.
pub fn edge_report(fv: &FittedVine) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(REPORT_HEADER).map_err(io)?;
    let opt = |x: Option<String>| x.unwrap_or_default();
    for (j, tree) in fv.edges.iter().enumerate() {
        for fe in tree {
            let sa = fe.sa_test.as_ref();
            w.write_record([
                (j + 1).to_string(),
                fe.edge.to_string(),
                match fe.kind {
                    EdgeKind::Partial => "partial".into(),
                    EdgeKind::Conditional => "conditional".into(),
                },
                fe.fit.coeffs.len().to_string(),
                format_f64(fe.fit.lambda),
                format_f64(fe.fit.df),
                format_f64(fe.fit.loglik),
                format_f64(fe.fit.caic),
                fe.fit.converged.to_string(),
                opt(sa.map(|t| format_f64(t.statistic))),
                opt(sa.map(|t| format_f64(t.pvalue))),
                opt(sa.map(|t| t.reject.to_string())),
                opt(fe.caic_prefers_conditional.map(|b| b.to_string())),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

fn model_file_name(stem: &str, mode: FitMode) -> String {
    format!("{stem}_{}.json", mode.to_string().to_lowercase())
}

/// Fits every requested estimator to every data file. Writes
/// `<stem>_<mode>.json` and `<stem>_<mode>_edges.csv`.
pub fn run_fit(args: &FitArgs) -> Result<Vec<PathBuf>> {
    let config = args.basis.config()?;
    let modes = expand(&args.estimator);
    ensure_dir(&args.out)?;
    let files: Vec<Vec<PathBuf>> = args
        .data
        .par_iter()
        .map(|path| {
            let data = load_data(path, args.ranks)?;
            let s = stem(path);
            let simpa = select_structure_with_fits(&data, &config)?;
            let mut out = Vec::new();
            for &mode in &modes {
                let fv = if mode == FitMode::SimpA {
                    simpa.clone()
                } else {
                    fit_vine_on(&data, &simpa.structure, mode, &config, Some(&simpa))?
                };
                let mp = args.out.join(model_file_name(&s, mode));
                write_atomic(&mp, fv.to_json()?.as_bytes())?;
                let rp = args.out.join(format!("{s}_{}_edges.csv", mode.to_string().to_lowercase()));
                write_atomic(&rp, edge_report(&fv)?.as_bytes())?;
                log::info!("{}: {mode} loglik {:.4}, {} conditional edges", path.display(), fv.loglik(), fv.conditional_edges());
                out.push(mp);
                out.push(rp);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let files: Vec<PathBuf> = files.into_iter().flatten().collect();
    write_manifest(&args.out, "fit", args, &files)?;
    Ok(files)
}

fn log_densities(fv: &FittedVine, data: &DMatrix<f64>) -> Result<Vec<f64>> {
    if data.ncols() != fv.structure.dim {
        return Err(Error::DimensionMismatch {
            expected: fv.structure.dim,
            found: data.ncols(),
        });
    }
    let ev = VineEvaluator::new(fv)?;
    (0..data.nrows())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = data.row(i).iter().copied().collect();
            ev.log_density(&x)
        })
        .collect()
}

fn true_log_densities(dgp: &DgpSpec, data: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = dgp.build()?;
    if d.dim() != data.ncols() {
        return Err(Error::DimensionMismatch {
            expected: d.dim(),
            found: data.ncols(),
        });
    }
    Ok((0..data.nrows())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = data.row(i).iter().copied().collect();
            d.log_density(&x)
        })
        .collect())
}

fn score(fit_ll: &[f64], true_ll: Option<&[f64]>, replicate: usize) -> Result<ReplicateScore> {
    let oos_loglik = fit_ll.iter().sum::<f64>() / fit_ll.len().max(1) as f64;
    let kl = match true_ll {
        Some(t) => {
            let ratios: Vec<f64> = t.iter().zip(fit_ll).map(|(a, b)| a - b).collect();
            Some(kl_from_ratios(&ratios, false)?.kl)
        }
        None => None,
    };
    Ok(ReplicateScore {
        replicate,
        oos_loglik,
        kl,
    })
}

/// Summary of an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub reports: Vec<EvalReport>,
    /// Per estimator: median KL over replicates.
    #[serde(default)]
    pub median_kl: Vec<(String, f64)>,
    /// Share of replicates whose Test-mode fit rejected the simplifying
    /// assumption on every edge of tree 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree2_rejection_rate: Option<f64>,
}

fn flat_csv(reports: &[EvalReport], with_kl: bool) -> String {
    let mut s = String::from(if with_kl { "replicate,estimator,kl,oos_loglik\n" } else { "replicate,estimator,oos_loglik\n" });
    let mut rows: Vec<(usize, &str, &ReplicateScore)> = reports
        .iter()
        .flat_map(|r| r.replicates.iter().map(move |x| (x.replicate, r.model.as_str(), x)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
    for (rep, est, x) in rows {
        match (with_kl, x.kl) {
            (true, Some(kl)) => s.push_str(&format!("{rep},{est},{},{}\n", format_f64(kl), format_f64(x.oos_loglik))),
            _ => s.push_str(&format!("{rep},{est},{}\n", format_f64(x.oos_loglik))),
        }
    }
    s
}

/// Scores model files on evaluation data, or with no models runs the
/// simulate-fit-score loop for `--reps` replicates of `--dgp`. Writes
/// `eval_report.json` and `eval.csv` (and `roc.csv` with `--labels`).
pub fn run_evaluate(args: &EvaluateArgs) -> Result<EvalSummary> {
    ensure_dir(&args.out)?;
    let summary = if args.model.is_empty() {
        run_experiment(args)?
    } else {
        evaluate_models(args)?
    };
    let with_kl = summary.reports.iter().all(|r| r.kl.is_some());
    let mut files = vec![args.out.join("eval_report.json"), args.out.join("eval.csv")];
    write_atomic(&files[0], serde_json::to_string_pretty(&summary)?.as_bytes())?;
    write_atomic(&files[1], flat_csv(&summary.reports, with_kl).as_bytes())?;
    if args.labels.is_some() {
        files.push(args.out.join("roc.csv"));
    }
    for (name, kl) in &summary.median_kl {
        println!("{name}: median KL {kl:.5}");
    }
    for r in &summary.reports {
        println!("{}: mean oos loglik {:.5}", r.model, r.mean_oos_loglik);
    }
    if let Some(rate) = summary.tree2_rejection_rate {
        println!("tree-2 SA rejection rate: {rate:.3}");
    }
    write_manifest(&args.out, "evaluate", args, &files)?;
    Ok(summary)
}

fn evaluate_models(args: &EvaluateArgs) -> Result<EvalSummary> {
    if args.data.is_empty() {
        return Err(Error::invalid("--data is required with --model"));
    }
    if args.data.len() != 1 && args.data.len() != args.model.len() {
        return Err(Error::invalid("pass one data file, or one per model"));
    }
    let models: Vec<FittedVine> = args
        .model
        .iter()
        .map(|p| FittedVine::from_json(&fs::read_to_string(p)?))
        .collect::<Result<_>>()?;
    let datasets: Vec<DMatrix<f64>> = args.data.iter().map(|p| load_data(p, args.ranks)).collect::<Result<_>>()?;
    let mut reports = Vec::new();
    let mut all_ll = Vec::new();
    for (i, (fv, path)) in models.iter().zip(&args.model).enumerate() {
        let k = if datasets.len() == 1 { 0 } else { i };
        let data = &datasets[k];
        let ll = log_densities(fv, data)?;
        let truth = args.dgp.as_ref().map(|d| true_log_densities(d, data)).transpose()?;
        let rep = score(&ll, truth.as_deref(), k)?;
        reports.push(EvalReport::from_replicates(stem(path), data.nrows(), vec![rep]));
        all_ll.push(ll);
    }
    if let Some(labels_path) = &args.labels {
        if models.len() != 2 || datasets.len() != 1 {
            return Err(Error::invalid("ROC needs exactly two models and one data file"));
        }
        let labels_table = read_csv(labels_path)?;
        if labels_table.data.ncols() != 1 || labels_table.data.nrows() != all_ll[0].len() {
            return Err(Error::invalid("labels must be one column with a row per evaluation point"));
        }
        let labels: Vec<u8> = labels_table
            .data
            .iter()
            .map(|&x| match x {
                0.0 => Ok(0),
                1.0 => Ok(1),
                _ => Err(Error::invalid(format!("label {x} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        let post: Vec<f64> = all_ll[0]
            .iter()
            .zip(&all_ll[1])
            .map(|(&a, &b)| posterior_prob(a, b, args.pi0))
            .collect::<Result<_>>()?;
        let roc = roc_points(&post, &labels)?;
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in roc {
            s.push_str(&format!("{},{},{}\n", format_f64(p.threshold), format_f64(p.fpr), format_f64(p.tpr)));
        }
        write_atomic(&args.out.join("roc.csv"), s.as_bytes())?;
    }
    Ok(EvalSummary {
        median_kl: median_kls(&reports),
        reports,
        tree2_rejection_rate: None,
    })
}

fn median_kls(reports: &[EvalReport]) -> Vec<(String, f64)> {
    reports
        .iter()
        .filter_map(|r| {
            let kls: Vec<f64> = r.replicates.iter().filter_map(|x| x.kl).collect();
            median(&kls).map(|m| (r.model.clone(), m))
        })
        .collect()
}

struct ReplicateOutcome {
    scores: Vec<(FitMode, ReplicateScore)>,
    tree2_rejected: Option<bool>,
}

fn run_experiment(args: &EvaluateArgs) -> Result<EvalSummary> {
    let spec = args
        .dgp
        .as_ref()
        .ok_or_else(|| Error::invalid("either --model or --dgp is required"))?;
    if args.n == 0 || args.reps == 0 {
        return Err(Error::invalid("n and reps must be positive"));
    }
    let dgp = spec.build()?;
    let config = args.basis.config()?;
    let modes = expand(&args.estimator);
    let n_eval = args.n_eval.unwrap_or(args.n);
    let outcomes: Vec<ReplicateOutcome> = (0..args.reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(args.seed, r as u64);
            let train = dgp.sample(args.n, &mut rng)?;
            let eval = dgp.sample(n_eval, &mut rng)?;
            let truth = true_log_densities(spec, &eval)?;
            let simpa = select_structure_with_fits(&train, &config)?;
            let mut scores = Vec::new();
            let mut tree2_rejected = None;
            for &mode in &modes {
                let fv = if mode == FitMode::SimpA {
                    simpa.clone()
                } else {
                    fit_vine_on(&train, &simpa.structure, mode, &config, Some(&simpa))?
                };
                if mode == FitMode::Test && fv.edges.len() > 1 {
                    tree2_rejected = Some(fv.edges[1].iter().all(|e| e.sa_test.as_ref().is_some_and(|t| t.reject)));
                }
                let ll = log_densities(&fv, &eval)?;
                scores.push((mode, score(&ll, Some(&truth), r)?));
            }
            log::info!("replicate {r} done");
            Ok(ReplicateOutcome { scores, tree2_rejected })
        })
        .collect::<Result<_>>()?;
    let reports: Vec<EvalReport> = modes
        .iter()
        .map(|&m| {
            let reps = outcomes
                .iter()
                .flat_map(|o| o.scores.iter().filter(|(x, _)| *x == m).map(|(_, s)| s.clone()))
                .collect();
            EvalReport::from_replicates(m.to_string(), n_eval, reps)
        })
        .collect();
    let flags: Vec<bool> = outcomes.iter().filter_map(|o| o.tree2_rejected).collect();
    let tree2_rejection_rate = if flags.is_empty() {
        None
    } else {
        Some(flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
    };
    Ok(EvalSummary {
        median_kl: median_kls(&reports),
        reports,
        tree2_rejection_rate,
    })
}

/// One row per edge with a nonempty conditioning set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaDecision {
    pub tree: usize,
    pub edge: String,
    pub statistic: Option<f64>,
    pub pvalue: Option<f64>,
    pub reject: Option<bool>,
}

/// Fits the Test-mode vine and reports the per-edge test decisions.
pub fn run_satest(args: &SatestArgs) -> Result<Vec<SaDecision>> {
    let config = args.basis.config()?;
    let data = load_data(&args.data, args.ranks)?;
    let simpa = select_structure_with_fits(&data, &config)?;
    let fv = fit_vine_on(&data, &simpa.structure, FitMode::Test, &config, Some(&simpa))?;
    let decisions: Vec<SaDecision> = fv
        .edges
        .iter()
        .enumerate()
        .skip(1)
        .flat_map(|(j, tree)| {
            tree.iter().map(move |fe| SaDecision {
                tree: j + 1,
                edge: fe.edge.to_string(),
                statistic: fe.sa_test.as_ref().map(|t| t.statistic),
                pvalue: fe.sa_test.as_ref().map(|t| t.pvalue),
                reject: fe.sa_test.as_ref().map(|t| t.reject),
            })
        })
        .collect();
    let mut s = String::from("tree,edge,statistic,pvalue,reject\n");
    for d in &decisions {
        let f = |x: Option<f64>| x.map(format_f64).unwrap_or_default();
        s.push_str(&format!(
            "{},\"{}\",{},{},{}\n",
            d.tree,
            d.edge,
            f(d.statistic),
            f(d.pvalue),
            d.reject.map(|b| b.to_string()).unwrap_or_default()
        ));
    }
    print!("{s}");
    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let p = out.join("satest.csv");
        write_atomic(&p, s.as_bytes())?;
        write_manifest(out, "satest", args, &[p])?;
    }
    Ok(decisions)
}
