//! Markov sequential latent variable model: per-step Gaussian prior,
//! approximate posterior and conditional likelihood, trained by a filtering
//! evidence lower bound. The model can sit behind a flow pre-processor (the
//! bound then includes the flow's log-determinant) and its prior dynamics can
//! themselves be transformed by a latent flow.


use crate::array::DenseArray;
use crate::autodiff::{Tape, Var};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::flow::{stack_tape_steps, FlowStack, LN_2PI};
use crate::latent::LatentFlow;
use crate::nn::{HighwayMlp, LinearTwoHead, Nonlin, ParamVars, Parameterized, TwoHeadNet};
use crate::rng::Prng;

/// Log-variance clamp on every Gaussian head; keeps densities proper on
/// near-deterministic data.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Diagonal Gaussian over a batch: `mean` and `log_var` are `[N, Z]`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: DenseArray,
    pub log_var: DenseArray,
}

impl GaussianParams {
    /// Clamps the log-variance into `[-10, 10]`.
    pub fn new(mean: DenseArray, log_var: DenseArray) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::contract(format!(
                "gaussian mean shape {:?} != log_var shape {:?}",
                mean.shape(),
                log_var.shape()
            )));
        }
        Ok(GaussianParams {
            mean,
            log_var: log_var.map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn sample(&self, rng: &mut Prng) -> DenseArray {
        let eps = rng.normal_array(self.mean.shape().to_vec());
        self.mean
            .zip(&self.log_var.zip(&eps, |lv, e| (0.5 * lv).exp() * e), |m, s| m + s)
    }

    /// Row-wise log-density of `x`, summed over dimensions.
    pub fn log_pdf(&self, x: &DenseArray) -> Result<Vec<f64>> {
        if x.shape() != self.mean.shape() {
            return Err(Error::contract("log_pdf shape mismatch"));
        }
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            for c in 0..cols {
                let lv = self.log_var.at(r, c);
                let diff = x.at(r, c) - self.mean.at(r, c);
                out[r] += -0.5 * (LN_2PI + lv + diff * diff / lv.exp());
            }
        }
        Ok(out)
    }
}

/// Analytic KL between diagonal Gaussians, one value per row (summed over
/// dimensions). Always non-negative up to rounding.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<Vec<f64>> {
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::contract(format!(
            "KL dim mismatch: q {:?} vs p {:?}",
            q.mean.shape(),
            p.mean.shape()
        )));
    }
    let (rows, cols) = (q.mean.rows(), q.mean.cols());
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        for c in 0..cols {
            let (mq, lq) = (q.mean.at(r, c), q.log_var.at(r, c));
            let (mp, lp) = (p.mean.at(r, c), p.log_var.at(r, c));
            let diff = mq - mp;
            out[r] += 0.5 * (lp - lq + (lq.exp() + diff * diff) / lp.exp() - 1.0);
        }
    }
    Ok(out)
}

/// Elementwise tape KL between diagonal Gaussians, `[N, Z]`.
fn gaussian_kl_tape(tape: &mut Tape, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
    let d_lv = tape.sub(lp, lq);
    let vq = tape.exp(lq);
    let diff = tape.sub(mq, mp);
    let diff2 = tape.mul(diff, diff);
    let num = tape.add(vq, diff2);
    let vp = tape.exp(lp);
    let ratio = tape.div(num, vp);
    let s = tape.add(d_lv, ratio);
    let s = tape.add_scalar(s, -1.0);
    tape.scale(s, 0.5)
}

/// The model: three two-headed networks sharing the latent width, plus a
/// latent flow on the prior dynamics (identity by default). `z_0 = 0`.
pub struct SlvmModel {
    latent_dim: usize,
    obs_dim: usize,
    pub prior_net: Box<dyn TwoHeadNet>,
    pub posterior_net: Box<dyn TwoHeadNet>,
    pub likelihood_net: Box<dyn TwoHeadNet>,
    pub latent_flow: LatentFlow,
}

impl SlvmModel {
    pub fn new(
        latent_dim: usize,
        obs_dim: usize,
        prior_net: Box<dyn TwoHeadNet>,
        posterior_net: Box<dyn TwoHeadNet>,
        likelihood_net: Box<dyn TwoHeadNet>,
        latent_flow: LatentFlow,
    ) -> Result<Self> {
        let checks = [
            (prior_net.input_dim() == latent_dim, "prior input"),
            (prior_net.output_dim() == latent_dim, "prior output"),
            (
                posterior_net.input_dim() == latent_dim + obs_dim,
                "posterior input",
            ),
            (posterior_net.output_dim() == latent_dim, "posterior output"),
            (likelihood_net.input_dim() == latent_dim, "likelihood input"),
            (likelihood_net.output_dim() == obs_dim, "likelihood output"),
            (latent_flow.latent_dim() == latent_dim, "latent flow dim"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(Error::contract(format!("{what} dim inconsistent")));
            }
        }
        Ok(SlvmModel {
            latent_dim,
            obs_dim,
            prior_net,
            posterior_net,
            likelihood_net,
            latent_flow,
        })
    }

    /// Highway-MLP networks (tanh), identity latent flow.
    pub fn new_highway(
        latent_dim: usize,
        obs_dim: usize,
        hidden_units: usize,
        hidden_layers: usize,
        rng: &mut Prng,
    ) -> Self {
        let mk = |name: &str, i: usize, o: usize, rng: &mut Prng| -> Box<dyn TwoHeadNet> {
            Box::new(HighwayMlp::new(name, i, o, hidden_units, hidden_layers, Nonlin::Tanh, rng))
        };
        SlvmModel::new(
            latent_dim,
            obs_dim,
            mk("prior", latent_dim, latent_dim, rng),
            mk("posterior", latent_dim + obs_dim, latent_dim, rng),
            mk("likelihood", latent_dim, obs_dim, rng),
            LatentFlow::identity(latent_dim),
        )
        .expect("dims consistent by construction")
    }

    /// All-linear networks, zero-initialized; used for linear-Gaussian tests.
    pub fn new_linear(latent_dim: usize, obs_dim: usize) -> Self {
        SlvmModel::new(
            latent_dim,
            obs_dim,
            Box::new(LinearTwoHead::new("prior", latent_dim, latent_dim)),
            Box::new(LinearTwoHead::new("posterior", latent_dim + obs_dim, latent_dim)),
            Box::new(LinearTwoHead::new("likelihood", latent_dim, obs_dim)),
            LatentFlow::identity(latent_dim),
        )
        .expect("dims consistent by construction")
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn net_plain(net: &dyn TwoHeadNet, x: &DenseArray) -> Result<GaussianParams> {
        let (mean, log_var) = net.forward_plain(x);
        GaussianParams::new(mean, log_var)
    }

    /// Base prior `p(z_t | z_{t-1})` before the latent flow.
    pub fn base_prior(&self, z_prev: &DenseArray) -> Result<GaussianParams> {
        Self::net_plain(self.prior_net.as_ref(), z_prev)
    }

    /// Effective prior after pushing the base through the latent flow, given
    /// the flattened latent context `[N, K*Z]`.
    pub fn prior(&self, z_prev: &DenseArray, z_context: &DenseArray) -> Result<GaussianParams> {
        let base = self.base_prior(z_prev)?;
        Ok(self.latent_flow.effective_prior(z_context, &base))
    }

    pub fn posterior(&self, z_prev: &DenseArray, y_t: &DenseArray) -> Result<GaussianParams> {
        let joined = hcat(z_prev, y_t)?;
        Self::net_plain(self.posterior_net.as_ref(), &joined)
    }

    pub fn likelihood(&self, z_t: &DenseArray) -> Result<GaussianParams> {
        Self::net_plain(self.likelihood_net.as_ref(), z_t)
    }
}

fn hcat(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    if a.rows() != b.rows() {
        return Err(Error::contract("hcat row mismatch"));
    }
    let (rows, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut out = DenseArray::zeros(vec![rows, ca + cb]);
    for r in 0..rows {
        for c in 0..ca {
            out.set(r, c, a.at(r, c));
        }
        for c in 0..cb {
            out.set(r, ca + c, b.at(r, c));
        }
    }
    Ok(out)
}

impl Parameterized for SlvmModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseArray)) {
        self.prior_net.visit_params(f);
        self.posterior_net.visit_params(f);
        self.likelihood_net.visit_params(f);
        self.latent_flow.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        self.prior_net.visit_params_mut(f);
        self.posterior_net.visit_params_mut(f);
        self.likelihood_net.visit_params_mut(f);
        self.latent_flow.visit_params_mut(f);
    }
}

/// Per-sequence decomposition of the bound: `elbo = recon - kl - log_det`.
#[derive(Debug, Clone)]
pub struct ElboBreakdown {
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    pub log_det: Vec<f64>,
    pub elbo: Vec<f64>,
}

impl ElboBreakdown {
    pub fn mean_elbo(&self) -> f64 {
        self.elbo.iter().sum::<f64>() / self.elbo.len() as f64
    }
}

/// Tape handles for the per-sequence `[N, 1]` bound terms plus the scalar
/// training objective (mean negative ELBO per evaluated step).
pub struct ElboVars {
    pub recon: Var,
    pub kl: Var,
    pub log_det: Var,
    pub elbo: Var,
    pub neg_elbo_per_step: Var,
}

/// Builds the differentiable filtering bound on `tape`.
///
/// The latent chain starts at `eval_start` with `z = 0`; earlier steps only
/// feed flow contexts. Reparameterization noise is drawn from `rng` at
/// construction time, so identical seeds freeze the noise across calls.
pub fn elbo_graph(
    model: &SlvmModel,
    tape: &mut Tape,
    pv: &ParamVars,
    x: &SequenceBatch,
    flow: Option<&FlowStack>,
    eval_start: usize,
    mc_samples: usize,
    rng: &mut Prng,
) -> Result<ElboVars> {
    let (n, t, d) = (x.num_sequences(), x.num_steps(), x.dim());
    if mc_samples < 1 {
        return Err(Error::contract("mc_samples must be >= 1"));
    }
    if eval_start < 1 || eval_start > t {
        return Err(Error::contract(format!(
            "eval_start {eval_start} out of range 1..={t}"
        )));
    }
    if d != model.obs_dim {
        return Err(Error::contract(format!(
            "batch dim {d} does not match model obs dim {}",
            model.obs_dim
        )));
    }
    let z = model.latent_dim;

    // pre-process through the flow (identity if absent)
    let (ys, lss): (Vec<Var>, Option<Vec<Var>>) = match flow {
        Some(stack) => {
            let (ys, lss) = stack_tape_steps(stack, tape, pv, x)?;
            (ys, Some(lss))
        }
        None => (
            (0..t).map(|s| tape.constant(x.step_matrix(s))).collect(),
            None,
        ),
    };

    let zero_n1 = tape.constant(DenseArray::zeros(vec![n, 1]));
    let mut log_det = zero_n1;
    if let Some(lss) = &lss {
        for step in (eval_start - 1)..t {
            let rs = tape.row_sum(lss[step]);
            log_det = tape.add(log_det, rs);
        }
    }

    let zero_nz = tape.constant(DenseArray::zeros(vec![n, z]));
    let k_lf = model.latent_flow.window();
    let mut z_hist: Vec<Var> = Vec::new(); // chain-local, starts empty
    let mut z_prev = zero_nz;
    let mut recon = zero_n1;
    let mut kl = zero_n1;
    for step in (eval_start - 1)..t {
        let y_t = ys[step];

        // posterior q(z_t | z_{t-1}, y_t)
        let q_in = tape.concat_cols(&[z_prev, y_t]);
        let (mq, lq_raw) = model.posterior_net.forward_tape(tape, q_in, pv);
        let lq = tape.clamp(lq_raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);

        // prior p(z_t | z_{t-1}), pushed through the latent flow
        let (mp_base, lp_raw) = model.prior_net.forward_tape(tape, z_prev, pv);
        let lp_base = tape.clamp(lp_raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        let ctx_parts: Vec<Var> = (0..k_lf)
            .map(|slot| {
                let idx = z_hist.len() as i64 - k_lf as i64 + slot as i64;
                if idx >= 0 {
                    z_hist[idx as usize]
                } else {
                    zero_nz
                }
            })
            .collect();
        let z_ctx = tape.concat_cols(&ctx_parts);
        let (mp, lp) = model
            .latent_flow
            .effective_prior_tape(tape, z_ctx, mp_base, lp_base, pv);

        let kl_t = gaussian_kl_tape(tape, mq, lq, mp, lp);
        let kl_rs = tape.row_sum(kl_t);
        kl = tape.add(kl, kl_rs);

        // reparameterized reconstruction, averaged over samples; the first
        // sample continues the chain
        let half_lq = tape.scale(lq, 0.5);
        let sd_q = tape.exp(half_lq);
        let mut recon_t: Option<Var> = None;
        let mut z_chain: Option<Var> = None;
        for s in 0..mc_samples {
            let eps = tape.constant(rng.normal_array(vec![n, z]));
            let noise = tape.mul(sd_q, eps);
            let z_s = tape.add(mq, noise);
            if s == 0 {
                z_chain = Some(z_s);
            }
            let (ml, ll_raw) = model.likelihood_net.forward_tape(tape, z_s, pv);
            let ll = tape.clamp(ll_raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
            let diff = tape.sub(y_t, ml);
            let diff2 = tape.mul(diff, diff);
            let var = tape.exp(ll);
            let maha = tape.div(diff2, var);
            let inner = tape.add(ll, maha);
            let inner = tape.add_scalar(inner, LN_2PI);
            let lp_y = tape.scale(inner, -0.5);
            let rs = tape.row_sum(lp_y);
            recon_t = Some(match recon_t {
                Some(acc) => tape.add(acc, rs),
                None => rs,
            });
        }
        let recon_t = recon_t.expect("mc_samples >= 1");
        let recon_t = tape.scale(recon_t, 1.0 / mc_samples as f64);
        recon = tape.add(recon, recon_t);

        let z_next = z_chain.expect("mc_samples >= 1");
        z_hist.push(z_next);
        z_prev = z_next;
    }

    let neg_kl = tape.scale(kl, -1.0);
    let neg_ld = tape.scale(log_det, -1.0);
    let partial = tape.add(recon, neg_kl);
    let elbo = tape.add(partial, neg_ld);
    let steps = (t - eval_start + 1) as f64;
    let m = tape.mean(elbo);
    let neg = tape.scale(m, -1.0 / steps);
    Ok(ElboVars {
        recon,
        kl,
        log_det,
        elbo,
        neg_elbo_per_step: neg,
    })
}

/// Per-sequence filtering bound, evaluated without gradients.
pub fn elbo(
    model: &SlvmModel,
    x: &SequenceBatch,
    flow: Option<&FlowStack>,
    eval_start: usize,
    mc_samples: usize,
    rng: &mut Prng,
) -> Result<ElboBreakdown> {
    let mut tape = Tape::new();
    let mut params = crate::nn::collect_params(model);
    if let Some(stack) = flow {
        params.extend(crate::nn::collect_params(stack));
    }
    let pv = crate::nn::inject_constants_map(&mut tape, &params);
    let vars = elbo_graph(model, &mut tape, &pv, x, flow, eval_start, mc_samples, rng)?;
    let col = |v: Var| -> Vec<f64> { tape.value(v).data().to_vec() };
    let breakdown = ElboBreakdown {
        recon: col(vars.recon),
        kl: col(vars.kl),
        log_det: col(vars.log_det),
        elbo: col(vars.elbo),
    };
    for ((r, k), (l, e)) in breakdown
        .recon
        .iter()
        .zip(&breakdown.kl)
        .zip(breakdown.log_det.iter().zip(&breakdown.elbo))
    {
        debug_assert!((r - k - l - e).abs() < 1e-9);
        if !e.is_finite() {
            return Err(Error::numeric("non-finite ELBO"));
        }
    }
    Ok(breakdown)
}

/// Sequential-Monte-Carlo estimate of `log p(x)` per sequence, using the
/// filtering posterior as proposal with multinomial resampling each step.
/// One particle reduces to a single-sample ELBO draw (with sampled KL).
pub fn iw_log_likelihood(
    model: &SlvmModel,
    x: &SequenceBatch,
    flow: Option<&FlowStack>,
    eval_start: usize,
    num_particles: usize,
    rng: &mut Prng,
) -> Result<Vec<f64>> {
    if num_particles < 1 {
        return Err(Error::contract("num_particles must be >= 1"));
    }
    let (n, t, d) = (x.num_sequences(), x.num_steps(), x.dim());
    if eval_start < 1 || eval_start > t {
        return Err(Error::contract(format!(
            "eval_start {eval_start} out of range 1..={t}"
        )));
    }
    let (y, log_det) = match flow {
        Some(stack) => {
            let res = stack.inverse_transform(x)?;
            (res.output().clone(), res.log_det_fwd(eval_start))
        }
        None => (x.clone(), vec![0.0; n]),
    };
    let z = model.latent_dim;
    let p = num_particles;
    let k_lf = model.latent_flow.window();
    let mut out = vec![0.0; n];
    for seq in 0..n {
        let mut z_prev = DenseArray::zeros(vec![p, z]);
        let mut hist: Vec<DenseArray> = Vec::new();
        let mut total = -log_det[seq];
        for step in (eval_start - 1)..t {
            let mut y_t = DenseArray::zeros(vec![p, d]);
            for part in 0..p {
                for dd in 0..d {
                    y_t.set(part, dd, y.get(seq, step, dd));
                }
            }
            let q = model.posterior(&z_prev, &y_t)?;
            let z_t = q.sample(rng);
            let mut z_ctx = DenseArray::zeros(vec![p, k_lf * z]);
            for slot in 0..k_lf {
                let idx = hist.len() as i64 - k_lf as i64 + slot as i64;
                if idx >= 0 {
                    let h = &hist[idx as usize];
                    for part in 0..p {
                        for c in 0..z {
                            z_ctx.set(part, slot * z + c, h.at(part, c));
                        }
                    }
                }
            }
            let base = model.base_prior(&z_prev)?;
            let lp_prior =
                crate::latent::latent_prior_log_prob(&z_t, &z_ctx, &base, &model.latent_flow)?;
            let lik = model.likelihood(&z_t)?;
            let lp_y = lik.log_pdf(&y_t)?;
            let lq = q.log_pdf(&z_t)?;
            let logw: Vec<f64> = (0..p)
                .map(|i| lp_prior[i] + lp_y[i] - lq[i])
                .collect();
            total += log_mean_exp(&logw)?;
            // multinomial resampling on normalized weights
            let max_w = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logw.iter().map(|w| (w - max_w).exp()).collect();
            let wsum: f64 = weights.iter().sum();
            let mut ancestors = Vec::with_capacity(p);
            for _ in 0..p {
                let mut u = rng.uniform(0.0, wsum);
                let mut pick = p - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        pick = i;
                        break;
                    }
                    u -= w;
                }
                ancestors.push(pick);
            }
            let reindex = |m: &DenseArray| -> DenseArray {
                let mut o = DenseArray::zeros(vec![p, m.cols()]);
                for (i, &a) in ancestors.iter().enumerate() {
                    for c in 0..m.cols() {
                        o.set(i, c, m.at(a, c));
                    }
                }
                o
            };
            hist = hist.iter().map(&reindex).collect();
            hist.push(reindex(&z_t));
            z_prev = hist.last().unwrap().clone();
        }
        if !total.is_finite() {
            return Err(Error::numeric("non-finite likelihood estimate"));
        }
        out[seq] = total;
    }
    Ok(out)
}

fn log_mean_exp(v: &[f64]) -> Result<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::numeric("degenerate particle weights"));
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    Ok(m + (s / v.len() as f64).ln())
}

/// Generate `n` sequences of length `t_len`: roll the prior chain, decode
/// through the likelihood, then map through the flow's generative pass.
pub fn slvm_sample(
    model: &SlvmModel,
    flow: Option<&FlowStack>,
    t_len: usize,
    n: usize,
    rng: &mut Prng,
) -> Result<SequenceBatch> {
    if t_len < 1 {
        return Err(Error::contract("sequence length must be >= 1"));
    }
    let (z, d) = (model.latent_dim, model.obs_dim);
    let k_lf = model.latent_flow.window();
    let mut y = SequenceBatch::zeros(n, t_len, d);
    let mut z_prev = DenseArray::zeros(vec![n, z]);
    let mut hist: Vec<DenseArray> = Vec::new();
    for step in 0..t_len {
        let base = model.base_prior(&z_prev)?;
        let mut z_ctx = DenseArray::zeros(vec![n, k_lf * z]);
        for slot in 0..k_lf {
            let idx = hist.len() as i64 - k_lf as i64 + slot as i64;
            if idx >= 0 {
                let h = &hist[idx as usize];
                for r in 0..n {
                    for c in 0..z {
                        z_ctx.set(r, slot * z + c, h.at(r, c));
                    }
                }
            }
        }
        let z_t = crate::latent::latent_prior_sample(&z_ctx, &base, &model.latent_flow, rng)?;
        let lik = model.likelihood(&z_t)?;
        let y_t = lik.sample(rng);
        y.set_step_matrix(step, &y_t);
        hist.push(z_t.clone());
        z_prev = z_t;
    }
    match flow {
        Some(stack) => stack.forward_transform(&y),
        None => Ok(y),
    }
}

/// Scalar linear-Gaussian state space `z_t = a z_{t-1} + N(0, q)`,
/// `y_t = c z_t + N(0, r)`, `z_0 = 0`. Used for exactness tests: the model
/// admits a closed-form likelihood and an exact per-step conditional
/// posterior.
#[derive(Debug, Clone, Copy)]
pub struct ScalarSsm {
    pub a: f64,
    pub q: f64,
    pub c: f64,
    pub r: f64,
}

/// One step of an affine-Gaussian posterior chain
/// `q(z_t | z_{t-1}) = N(g z_{t-1} + f, s)`.
#[derive(Debug, Clone, Copy)]
pub struct AffinePosteriorStep {
    pub g: f64,
    pub f: f64,
    pub s: f64,
}

/// Exact per-step conditional posterior `p(z_t | z_{t-1}, y_{t:T})` via a
/// backward information filter. With this chain the filtering bound is tight:
/// the chained conditionals multiply to the exact joint posterior.
pub fn exact_conditional_posterior(ssm: &ScalarSsm, y: &[f64]) -> Result<Vec<AffinePosteriorStep>> {
    if ssm.q <= 0.0 || ssm.r <= 0.0 {
        return Err(Error::contract("q and r must be positive"));
    }
    let t = y.len();
    let mut steps = vec![
        AffinePosteriorStep {
            g: 0.0,
            f: 0.0,
            s: 0.0
        };
        t
    ];
    // backward pass: p(y_{t+1:T} | z_t) ∝ exp(-0.5 λ_t z² + η_t z)
    let (mut lambda, mut eta) = (0.0, 0.0);
    for i in (0..t).rev() {
        let cap = 1.0 / ssm.q + ssm.c * ssm.c / ssm.r + lambda;
        let lin = ssm.c * y[i] / ssm.r + eta;
        steps[i] = AffinePosteriorStep {
            g: (ssm.a / ssm.q) / cap,
            f: lin / cap,
            s: 1.0 / cap,
        };
        lambda = ssm.a * ssm.a / ssm.q - (ssm.a / ssm.q) * (ssm.a / ssm.q) / cap;
        eta = (ssm.a / ssm.q) * lin / cap;
    }
    Ok(steps)
}

/// Closed-form (sample-free) filtering bound for [`ScalarSsm`] under an
/// affine-Gaussian posterior chain: expectations over the chain's Gaussian
/// marginals are evaluated analytically. Returns `(recon, kl, elbo)`.
pub fn closed_form_elbo(
    ssm: &ScalarSsm,
    y: &[f64],
    steps: &[AffinePosteriorStep],
) -> Result<(f64, f64, f64)> {
    if steps.len() != y.len() {
        return Err(Error::contract("posterior chain length != sequence length"));
    }
    let (mut m, mut pvar) = (0.0, 0.0); // marginal of z_{t-1} under the chain
    let (mut recon, mut kl) = (0.0, 0.0);
    for (yt, st) in y.iter().zip(steps) {
        if st.s <= 0.0 {
            return Err(Error::contract("posterior variances must be positive"));
        }
        // E over z_{t-1} of KL( N(g z + f, s) || N(a z, q) )
        let gd = st.g - ssm.a;
        let e_sq = (gd * m + st.f).powi(2) + gd * gd * pvar;
        kl += 0.5 * ((ssm.q / st.s).ln() + (st.s + e_sq) / ssm.q - 1.0);
        // marginal of z_t
        let m_t = st.g * m + st.f;
        let p_t = st.g * st.g * pvar + st.s;
        // E over z_t of log N(y_t ; c z_t, r)
        let e_res = (yt - ssm.c * m_t).powi(2) + ssm.c * ssm.c * p_t;
        recon += -0.5 * (LN_2PI + ssm.r.ln() + e_res / ssm.r);
        m = m_t;
        pvar = p_t;
    }
    Ok((recon, kl, recon - kl))
}
