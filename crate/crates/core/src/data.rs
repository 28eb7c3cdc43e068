//! Synthetic sequence generators, CSV ingestion, cropping, standardization
//! and dataset splits.
//!
//! CSV schema: header `seq_id,t,<dim_names...>`, rows sorted by
//! `(seq_id, t)`, `.` decimal separator. One flat file per dataset.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::rng::Prng;

/// Per-dimension standardization applied to a batch, kept so checkpoints can
/// replay the training-split statistics at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Dense `[N, T, D]` batch of real-valued sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    n: usize,
    t: usize,
    d: usize,
    data: Vec<f64>,
    pub seq_ids: Vec<String>,
    pub dim_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl SequenceBatch {
    pub fn zeros(n: usize, t: usize, d: usize) -> Self {
        SequenceBatch {
            n,
            t,
            d,
            data: vec![0.0; n * t * d],
            seq_ids: (0..n).map(|i| format!("seq{i:04}")).collect(),
            dim_names: (0..d).map(|i| format!("x{i}")).collect(),
            standardization: None,
        }
    }

    pub fn num_sequences(&self) -> usize {
        self.n
    }

    pub fn num_steps(&self) -> usize {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, n: usize, t: usize, d: usize) -> f64 {
        self.data[(n * self.t + t) * self.d + d]
    }

    pub fn set(&mut self, n: usize, t: usize, d: usize, v: f64) {
        self.data[(n * self.t + t) * self.d + d] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// All sequences at a single (0-based) time step, as an `[N, D]` matrix.
    pub fn step_matrix(&self, t: usize) -> DenseArray {
        let mut out = Vec::with_capacity(self.n * self.d);
        for n in 0..self.n {
            for d in 0..self.d {
                out.push(self.get(n, t, d));
            }
        }
        DenseArray::new(vec![self.n, self.d], out).unwrap()
    }

    pub fn set_step_matrix(&mut self, t: usize, m: &DenseArray) {
        for n in 0..self.n {
            for d in 0..self.d {
                self.set(n, t, d, m.at(n, d));
            }
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::numeric("non-finite entry in sequence batch"))
        }
    }

    /// Select a subset of sequences by index.
    pub fn select(&self, idx: &[usize]) -> SequenceBatch {
        let mut out = SequenceBatch::zeros(idx.len(), self.t, self.d);
        out.dim_names = self.dim_names.clone();
        out.standardization = self.standardization.clone();
        for (new_n, &old_n) in idx.iter().enumerate() {
            out.seq_ids[new_n] = self.seq_ids[old_n].clone();
            for t in 0..self.t {
                for d in 0..self.d {
                    out.set(new_n, t, d, self.get(old_n, t, d));
                }
            }
        }
        out
    }
}

/// Config for the second-order kinematic system: position integrates
/// velocity, velocity integrates iid Gaussian noise, both starting at zero.
#[derive(Debug, Clone)]
pub struct KinematicConfig {
    /// Noise covariance, `[D, D]` symmetric PSD.
    pub sigma: DenseArray,
    pub t: usize,
    pub n: usize,
    pub seed: u64,
}

fn psd_factor(sigma: &DenseArray) -> Result<DMatrix<f64>> {
    let d = sigma.rows();
    if sigma.cols() != d {
        return Err(Error::contract("noise covariance must be square"));
    }
    let m = DMatrix::from_fn(d, d, |i, j| sigma.at(i, j));
    if (&m - m.transpose()).abs().max() > 1e-12 {
        return Err(Error::contract("noise covariance must be symmetric"));
    }
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10) {
        return Err(Error::contract(
            "noise covariance must be positive semi-definite",
        ));
    }
    let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt_l)
}

/// Generate the kinematic system, returning `(x, u, w)`: position, velocity
/// and injected noise, all aligned in time.
///
/// The noise is snapped to a dyadic grid (multiples of 2^-26) so that the
/// running sums — and hence the differencing identities
/// `x_t - x_{t-1} = u_t` and `u_t - u_{t-1} = w_t` — hold exactly in
/// floating point, not just up to rounding. The quantum (~1.5e-8) is far
/// below any statistical effect at the scales involved.
pub fn gen_kinematic(cfg: &KinematicConfig) -> Result<(SequenceBatch, SequenceBatch, SequenceBatch)> {
    let d = cfg.sigma.rows();
    let factor = psd_factor(&cfg.sigma)?;
    let mut rng = Prng::seed_from(cfg.seed);
    let mut x = SequenceBatch::zeros(cfg.n, cfg.t, d);
    let mut u = SequenceBatch::zeros(cfg.n, cfg.t, d);
    let mut w = SequenceBatch::zeros(cfg.n, cfg.t, d);
    for n in 0..cfg.n {
        let mut xs = vec![0.0; d];
        let mut us = vec![0.0; d];
        for t in 0..cfg.t {
            let eps = nalgebra::DVector::from_fn(d, |_, _| rng.normal());
            let ws = (&factor * eps).map(|v| (v * 67108864.0).round() / 67108864.0);
            for k in 0..d {
                us[k] += ws[k];
                xs[k] += us[k];
                x.set(n, t, k, xs[k]);
                u.set(n, t, k, us[k]);
                w.set(n, t, k, ws[k]);
            }
        }
    }
    Ok((x, u, w))
}

/// Spectral radius of the AR companion matrix; must be < 1 for stationarity.
pub fn ar_spectral_radius(coeffs: &[f64]) -> f64 {
    let p = coeffs.len();
    let mut f = DMatrix::zeros(p, p);
    for (j, &c) in coeffs.iter().enumerate() {
        f[(0, j)] = c;
    }
    for i in 1..p {
        f[(i, i - 1)] = 1.0;
    }
    f.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

/// Stationary-initialized univariate AR(p) samples.
pub fn gen_ar(
    coeffs: &[f64],
    noise_std: f64,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    if coeffs.is_empty() || noise_std <= 0.0 {
        return Err(Error::contract("AR process needs coefficients and noise_std > 0"));
    }
    let radius = ar_spectral_radius(coeffs);
    if radius >= 1.0 {
        return Err(Error::contract(format!(
            "AR coefficients are non-stationary (companion spectral radius {radius:.4})"
        )));
    }
    let p = coeffs.len();
    // stationary state covariance by fixed-point iteration of V = F V F' + Q
    let mut f = DMatrix::zeros(p, p);
    for (j, &c) in coeffs.iter().enumerate() {
        f[(0, j)] = c;
    }
    for i in 1..p {
        f[(i, i - 1)] = 1.0;
    }
    let mut q = DMatrix::zeros(p, p);
    q[(0, 0)] = noise_std * noise_std;
    let mut v = q.clone();
    for _ in 0..20_000 {
        let next = &f * &v * f.transpose() + &q;
        let delta = (&next - &v).abs().max();
        v = next;
        if delta < 1e-14 {
            break;
        }
    }
    let chol = v
        .clone()
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::from_diagonal(&v.map_diagonal(|x| x.max(0.0).sqrt())));

    let mut rng = Prng::seed_from(seed);
    let mut out = SequenceBatch::zeros(n, t, 1);
    for seq in 0..n {
        let eps = nalgebra::DVector::from_fn(p, |_, _| rng.normal());
        let init = &chol * eps;
        // state holds [x_{t-1}, ..., x_{t-p}]
        let mut state: Vec<f64> = init.iter().copied().collect();
        for step in 0..t {
            let mut val = rng.normal() * noise_std;
            for (j, &c) in coeffs.iter().enumerate() {
                val += c * state[j];
            }
            out.set(seq, step, 0, val);
            state.rotate_right(1);
            state[0] = val;
        }
    }
    Ok(out)
}

/// Two-step, one-dimensional two-regime construction: the first step selects
/// a regime, the second step is a shifted/scaled standard normal.
pub fn gen_two_regime(
    n: usize,
    shifts: (f64, f64),
    scales: (f64, f64),
    seed: u64,
) -> Result<SequenceBatch> {
    if scales.0 <= 0.0 || scales.1 <= 0.0 {
        return Err(Error::contract("regime scales must be positive"));
    }
    let mut rng = Prng::seed_from(seed);
    let mut out = SequenceBatch::zeros(n, 2, 1);
    for seq in 0..n {
        let regime = rng.uniform(0.0, 1.0) < 0.5;
        let center = if regime { 1.0 } else { -1.0 };
        let (shift, scale) = if regime {
            (shifts.1, scales.1)
        } else {
            (shifts.0, scales.0)
        };
        out.set(seq, 0, 0, center + 0.25 * rng.normal());
        out.set(seq, 1, 0, shift + scale * rng.normal());
    }
    Ok(out)
}

/// Regime indicator for a two-regime first step (positive cluster = regime 1).
pub fn two_regime_of(x1: f64) -> usize {
    usize::from(x1 > 0.0)
}

pub fn save_csv(batch: &SequenceBatch, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["seq_id".to_string(), "t".to_string()];
    header.extend(batch.dim_names.iter().cloned());
    wtr.write_record(&header).map_err(csv_err)?;
    for n in 0..batch.n {
        for t in 0..batch.t {
            let mut rec = vec![batch.seq_ids[n].clone(), (t + 1).to_string()];
            for d in 0..batch.d {
                rec.push(format!("{}", batch.get(n, t, d)));
            }
            wtr.write_record(&rec).map_err(csv_err)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        line: 0,
        msg: e.to_string(),
    }
}

pub fn load_csv(path: &Path) -> Result<SequenceBatch> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "seq_id" || cols[1] != "t" {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "expected header `seq_id,t,<dims...>`, got `{}`",
                cols.join(",")
            ),
        });
    }
    let dim_names: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let d = dim_names.len();

    // seq_id -> (first-appearance order, t -> row values)
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if rec.len() != d + 2 {
            let missing = if rec.len() < d + 2 {
                format!("missing column `{}`", cols[rec.len()])
            } else {
                "extra columns".to_string()
            };
            return Err(Error::Parse { line, msg: missing });
        }
        let seq_id = rec[0].to_string();
        let t: i64 = rec[1].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("non-integer t `{}`", &rec[1]),
        })?;
        let mut vals = Vec::with_capacity(d);
        for (j, cell) in rec.iter().skip(2).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric cell `{cell}` in column `{}`", dim_names[j]),
            })?;
            vals.push(v);
        }
        if !rows.contains_key(&seq_id) {
            order.push(seq_id.clone());
        }
        rows.entry(seq_id).or_default().insert(t, vals);
    }
    if order.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let t_len = rows[&order[0]].len();
    for id in &order {
        if rows[id].len() != t_len {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "ragged rows: sequence `{id}` has {} steps, expected {t_len}",
                    rows[id].len()
                ),
            });
        }
    }
    let mut out = SequenceBatch::zeros(order.len(), t_len, d);
    out.dim_names = dim_names;
    out.seq_ids = order.clone();
    for (n, id) in order.iter().enumerate() {
        for (t, (_, vals)) in rows[id].iter().enumerate() {
            for (dd, &v) in vals.iter().enumerate() {
                out.set(n, t, dd, v);
            }
        }
    }
    out.check_finite()?;
    Ok(out)
}

/// One uniform random crop of `crop_len` steps per sequence.
pub fn crop_windows(batch: &SequenceBatch, crop_len: usize, rng: &mut Prng) -> Result<SequenceBatch> {
    if crop_len == 0 || crop_len > batch.t {
        return Err(Error::contract(format!(
            "crop_len {crop_len} out of range for T={}",
            batch.t
        )));
    }
    let mut out = SequenceBatch::zeros(batch.n, crop_len, batch.d);
    out.seq_ids = batch.seq_ids.clone();
    out.dim_names = batch.dim_names.clone();
    out.standardization = batch.standardization.clone();
    for n in 0..batch.n {
        let start = if crop_len == batch.t {
            0
        } else {
            rng.usize_below(batch.t - crop_len + 1)
        };
        for t in 0..crop_len {
            for d in 0..batch.d {
                out.set(n, t, d, batch.get(n, start + t, d));
            }
        }
    }
    Ok(out)
}

/// Per-dimension `(x - mean) / std`. With `stats: None` the statistics are
/// computed from `batch` itself (training split); degenerate dims keep
/// std = 1.
pub fn standardize(batch: &SequenceBatch, stats: Option<&Standardization>) -> SequenceBatch {
    let computed;
    let stats = match stats {
        Some(s) => s,
        None => {
            let count = (batch.n * batch.t) as f64;
            let mut mean = vec![0.0; batch.d];
            let mut var = vec![0.0; batch.d];
            for n in 0..batch.n {
                for t in 0..batch.t {
                    for d in 0..batch.d {
                        mean[d] += batch.get(n, t, d);
                    }
                }
            }
            for m in mean.iter_mut() {
                *m /= count;
            }
            for n in 0..batch.n {
                for t in 0..batch.t {
                    for d in 0..batch.d {
                        let c = batch.get(n, t, d) - mean[d];
                        var[d] += c * c;
                    }
                }
            }
            let std: Vec<f64> = var
                .iter()
                .map(|v| {
                    let s = (v / count).sqrt();
                    if s < 1e-12 {
                        1.0
                    } else {
                        s
                    }
                })
                .collect();
            computed = Standardization { mean, std };
            &computed
        }
    };
    let mut out = batch.clone();
    for n in 0..batch.n {
        for t in 0..batch.t {
            for d in 0..batch.d {
                out.set(n, t, d, (batch.get(n, t, d) - stats.mean[d]) / stats.std[d]);
            }
        }
    }
    out.standardization = Some(stats.clone());
    out
}

/// Inverse of [`standardize`]: `x = y * std + mean`.
pub fn unstandardize(batch: &SequenceBatch, stats: &Standardization) -> Result<SequenceBatch> {
    if stats.mean.len() != batch.d {
        return Err(Error::contract(format!(
            "standardization dim {} does not match batch dim {}",
            stats.mean.len(),
            batch.d
        )));
    }
    let mut out = batch.clone();
    for n in 0..batch.n {
        for t in 0..batch.t {
            for d in 0..batch.d {
                out.set(n, t, d, batch.get(n, t, d) * stats.std[d] + stats.mean[d]);
            }
        }
    }
    out.standardization = None;
    Ok(out)
}

/// Deterministic split into parts by sequence, with the given fractions.
pub fn split(batch: &SequenceBatch, fractions: &[f64], seed: u64) -> Result<Vec<SequenceBatch>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract("split fractions must sum to 1"));
    }
    let mut idx: Vec<usize> = (0..batch.n).collect();
    let mut rng = Prng::seed_from(seed);
    // Fisher-Yates
    for i in (1..idx.len()).rev() {
        let j = rng.usize_below(i + 1);
        idx.swap(i, j);
    }
    let mut out = Vec::new();
    let mut start = 0usize;
    for (k, f) in fractions.iter().enumerate() {
        let len = if k + 1 == fractions.len() {
            batch.n - start
        } else {
            ((batch.n as f64) * f).round() as usize
        };
        out.push(batch.select(&idx[start..start + len]));
        start += len;
    }
    Ok(out)
}

/// Dataset manifest emitted alongside generated CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub path: String,
    pub d: usize,
    pub dim_names: Vec<String>,
    pub n: usize,
    pub t: usize,
}
