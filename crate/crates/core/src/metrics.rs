//! Model scoring: out-of-sample KL divergence, posterior class
//! probabilities and ROC curves.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean of `true - fitted` log densities over evaluation points, with the
/// number of non-finite ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub kl: f64,
    pub n_used: usize,
    pub n_nonfinite: usize,
}

/// Monte-Carlo KL divergence at points drawn from the true copula. With
/// `exclude_nonfinite` unset, a non-finite log ratio is an error.
pub fn kl_oos<T, F>(true_log: T, fit_log: F, points: &DMatrix<f64>, exclude_nonfinite: bool) -> Result<KlEstimate>
where
    T: Fn(&[f64]) -> f64 + Sync,
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if points.nrows() == 0 {
        return Err(Error::InsufficientData("no evaluation points".into()));
    }
    let ratios: Vec<f64> = (0..points.nrows())
        .into_par_iter()
        .map(|i| {
            let x: Vec<f64> = points.row(i).iter().copied().collect();
            Ok(true_log(&x) - fit_log(&x)?)
        })
        .collect::<Result<_>>()?;
    kl_from_ratios(&ratios, exclude_nonfinite)
}

/// KL estimate from precomputed log ratios, summed in index order.
pub fn kl_from_ratios(ratios: &[f64], exclude_nonfinite: bool) -> Result<KlEstimate> {
    let bad = ratios.iter().filter(|r| !r.is_finite()).count();
    if bad > 0 && !exclude_nonfinite {
        return Err(Error::invalid(format!("{bad} non-finite log-density ratios")));
    }
    let used = ratios.len() - bad;
    if used == 0 {
        return Err(Error::InsufficientData("no finite log-density ratios".into()));
    }
    let sum: f64 = ratios.iter().filter(|r| r.is_finite()).sum();
    Ok(KlEstimate {
        kl: sum / used as f64,
        n_used: used,
        n_nonfinite: bad,
    })
}

/// Posterior probability of class 0 given the two class log densities.
pub fn posterior_prob(logf0: f64, logf1: f64, pi0: f64) -> Result<f64> {
    if !(pi0 > 0.0 && pi0 < 1.0) {
        return Err(Error::invalid(format!("prior {pi0} outside (0, 1)")));
    }
    if logf0.is_nan() || logf1.is_nan() {
        return Err(Error::invalid("NaN log density"));
    }
    let a = pi0.ln() + logf0;
    let b = (1.0 - pi0).ln() + logf1;
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        log::warn!("both class densities vanish; posterior set to 0.5");
        return Ok(0.5);
    }
    // p = 1 / (1 + exp(b - a))
    let z = b - a;
    Ok(if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve of the rule "classify as class 0 when the posterior of class
/// 0 exceeds 1 - α", swept from α = 0 to α = 1. Class 0 is the positive
/// class: TPR is the share of class-0 points classified as 0, FPR the share
/// of class-1 points classified as 0.
pub fn roc_points(posteriors: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    if posteriors.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: posteriors.len(),
            found: labels.len(),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if posteriors.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("posteriors must lie in [0, 1]"));
    }
    let n0 = labels.iter().filter(|&&l| l == 0).count();
    let n1 = labels.len() - n0;
    if n0 == 0 || n1 == 0 {
        return Err(Error::invalid("ROC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..posteriors.len()).collect();
    idx.sort_by(|&a, &b| posteriors[b].total_cmp(&posteriors[a]));
    let mut out = vec![RocPoint {
        threshold: 0.0,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < idx.len() {
        let p = posteriors[idx[k]];
        while k < idx.len() && posteriors[idx[k]] == p {
            if labels[idx[k]] == 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        // points with posterior >= p are classified as 0 when 1 - α = p
        out.push(RocPoint {
            threshold: 1.0 - p,
            fpr: fp as f64 / n1 as f64,
            tpr: tp as f64 / n0 as f64,
        });
    }
    let last = out.last().copied().expect("nonempty curve");
    if last.threshold < 1.0 {
        out.push(RocPoint {
            threshold: 1.0,
            ..last
        });
    }
    Ok(out)
}

/// Trapezoidal area under an ROC curve.
pub fn roc_auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateScore {
    pub replicate: usize,
    pub oos_loglik: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub n_eval: usize,
    pub mean_oos_loglik: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    pub replicates: Vec<ReplicateScore>,
}

impl EvalReport {
    pub fn from_replicates(model: impl Into<String>, n_eval: usize, replicates: Vec<ReplicateScore>) -> Self {
        let k = replicates.len().max(1) as f64;
        let mean_oos_loglik = replicates.iter().map(|r| r.oos_loglik).sum::<f64>() / k;
        let kl = if !replicates.is_empty() && replicates.iter().all(|r| r.kl.is_some()) {
            Some(replicates.iter().filter_map(|r| r.kl).sum::<f64>() / k)
        } else {
            None
        };
        EvalReport {
            model: model.into(),
            n_eval,
            mean_oos_loglik,
            kl,
            replicates,
        }
    }
}

/// Median of a sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
