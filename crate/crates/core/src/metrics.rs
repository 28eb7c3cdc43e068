//! Decorrelation diagnostics: dataset-level lag-1 temporal correlation,
//! Gaussian multi-information, NLL normalization, and generalization-gap
//! reporting.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::flow::LN_2PI;

/// Per-dimension lag-1 normalized auto-covariance, averaged over dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrReport {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// per-dim normalized lag-1 averages; `NaN` for excluded degenerate dims
    pub per_dim: Vec<f64>,
    pub corr: f64,
    pub degenerate_dims: usize,
}

/// `corr = (1/D) Σ_d E[(x_t - μ^d)(x_{t+1} - μ^d)] / (σ^d)²` over all
/// adjacent pairs and sequences, with population (1/N) moments. Dims with
/// σ below 1e-12 are excluded and counted.
pub fn temporal_correlation(data: &SequenceBatch) -> Result<CorrReport> {
    let (n, t, d) = (data.num_sequences(), data.num_steps(), data.dim());
    if t < 2 || n < 2 {
        return Err(Error::contract(format!(
            "temporal correlation needs T >= 2 and N >= 2, got T={t}, N={n}"
        )));
    }
    let count = (n * t) as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for dd in 0..d {
        for seq in 0..n {
            for step in 0..t {
                mean[dd] += data.get(seq, step, dd);
            }
        }
        mean[dd] /= count;
        for seq in 0..n {
            for step in 0..t {
                let v = data.get(seq, step, dd) - mean[dd];
                var[dd] += v * v;
            }
        }
        var[dd] /= count;
    }
    let pairs = (n * (t - 1)) as f64;
    let mut per_dim = vec![f64::NAN; d];
    let mut degenerate = 0;
    let (mut total, mut used) = (0.0, 0);
    for dd in 0..d {
        if var[dd].sqrt() < 1e-12 {
            degenerate += 1;
            continue;
        }
        let mut acc = 0.0;
        for seq in 0..n {
            for step in 0..(t - 1) {
                acc += (data.get(seq, step, dd) - mean[dd])
                    * (data.get(seq, step + 1, dd) - mean[dd]);
            }
        }
        let xi = acc / pairs / var[dd];
        per_dim[dd] = xi;
        total += xi;
        used += 1;
    }
    if used == 0 {
        return Err(Error::contract(
            "all dimensions are degenerate (zero variance)",
        ));
    }
    Ok(CorrReport {
        mean,
        std: var.iter().map(|v| v.sqrt()).collect(),
        per_dim,
        corr: total / used as f64,
        degenerate_dims: degenerate,
    })
}

/// Gaussian multi-information `I = Σ_t H(x_t) − H(x_{1:T})` in nats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiInfoReport {
    pub marginal_entropy_sum: f64,
    pub joint_entropy: f64,
    pub mi: f64,
    /// set when the empirical estimate is below −0.01 (sampling artifact)
    pub negative_warning: bool,
}

const RIDGE: f64 = 1e-6;

fn gaussian_entropy(cov: &DMatrix<f64>) -> Result<f64> {
    let k = cov.nrows();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("singular covariance after ridge"))?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(0.5 * (k as f64 * (LN_2PI + 1.0) + log_det))
}

/// Entropies from empirical covariances (population 1/N) with ridge 1e-6.
pub fn multi_information_gaussian(data: &SequenceBatch) -> Result<MultiInfoReport> {
    let (n, t, d) = (data.num_sequences(), data.num_steps(), data.dim());
    let k = t * d;
    if n <= k {
        return Err(Error::contract(format!(
            "multi-information needs N > T*D, got N={n}, T*D={k}"
        )));
    }
    // joint covariance over flattened [T*D] vectors
    let mut mean = vec![0.0; k];
    for seq in 0..n {
        for step in 0..t {
            for dd in 0..d {
                mean[step * d + dd] += data.get(seq, step, dd);
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for seq in 0..n {
        let row: Vec<f64> = (0..k)
            .map(|i| data.get(seq, i / d, i % d) - mean[i])
            .collect();
        for i in 0..k {
            for j in i..k {
                cov[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            cov[(i, j)] /= n as f64;
            cov[(j, i)] = cov[(i, j)];
        }
        cov[(i, i)] += RIDGE;
    }
    let joint = gaussian_entropy(&cov)?;
    let mut marginal_sum = 0.0;
    for step in 0..t {
        let mut sub = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                sub[(i, j)] = cov[(step * d + i, step * d + j)];
            }
        }
        marginal_sum += gaussian_entropy(&sub)?;
    }
    let mi = marginal_sum - joint;
    Ok(MultiInfoReport {
        marginal_entropy_sum: marginal_sum,
        joint_entropy: joint,
        mi,
        negative_warning: mi < -0.01,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    PerDim,
    PerStep,
}

impl Unit {
    pub fn parse(s: &str) -> Result<Unit> {
        match s {
            "per_dim" | "per-dim" => Ok(Unit::PerDim),
            "per_step" | "per-step" => Ok(Unit::PerStep),
            other => Err(Error::contract(format!(
                "unknown unit `{other}`; expected per-dim or per-step"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Unit::PerDim => "nats/dim",
            Unit::PerStep => "nats/step",
        }
    }
}

/// Normalizes a total NLL to nats per dimension or per step.
pub fn nll_normalize(total_nll: f64, t_eval: usize, d: usize, unit: Unit) -> Result<f64> {
    if t_eval < 1 || d < 1 {
        return Err(Error::contract(format!(
            "nll_normalize needs T_eval >= 1 and D >= 1, got {t_eval}, {d}"
        )));
    }
    Ok(match unit {
        Unit::PerDim => total_nll / (t_eval * d) as f64,
        Unit::PerStep => total_nll / t_eval as f64,
    })
}

/// `gap = mean(test) − mean(train)` plus fixed-width histograms over the
/// joint range of both lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub train_mean: f64,
    pub test_mean: f64,
    pub gap: f64,
    pub bin_lo: f64,
    pub bin_width: f64,
    pub train_hist: Vec<usize>,
    pub test_hist: Vec<usize>,
}

pub const GAP_BINS: usize = 20;

pub fn generalization_gap(train_nlls: &[f64], test_nlls: &[f64]) -> Result<GapReport> {
    if train_nlls.is_empty() || test_nlls.is_empty() {
        return Err(Error::contract("gap requires non-empty NLL lists"));
    }
    let all = train_nlls.iter().chain(test_nlls);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in all {
        if !v.is_finite() {
            return Err(Error::numeric("non-finite NLL in gap input"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let width = if hi > lo {
        (hi - lo) / GAP_BINS as f64
    } else {
        1.0
    };
    let hist = |vals: &[f64]| -> Vec<usize> {
        let mut h = vec![0usize; GAP_BINS];
        for &v in vals {
            let idx = (((v - lo) / width) as usize).min(GAP_BINS - 1);
            h[idx] += 1;
        }
        h
    };
    let train_mean = train_nlls.iter().sum::<f64>() / train_nlls.len() as f64;
    let test_mean = test_nlls.iter().sum::<f64>() / test_nlls.len() as f64;
    Ok(GapReport {
        train_mean,
        test_mean,
        gap: test_mean - train_mean,
        bin_lo: lo,
        bin_width: width,
        train_hist: hist(train_nlls),
        test_hist: hist(test_nlls),
    })
}
