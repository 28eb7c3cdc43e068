//! Affine autoregressive flow on the latent dynamics of the sequence model's
//! prior. The flow reparameterizes `z_t = alpha(z_<t) + beta(z_<t) * u_t`
//! with `u_t` drawn from the base prior, so the effective prior on `z_t`
//! stays diagonal-Gaussian and the analytic KL still applies.
//!
//! `latent_skip` (shift by `z_{t-1}`, unit scale) is the hard-coded special
//! case; `identity` disables the flow.

use crate::array::DenseArray;
use crate::autodiff::{Tape, Var};
use crate::conditioner::{Conditioner, DifferenceConditioner, HighwayConditioner, IdentityConditioner};
use crate::error::{Error, Result};
use crate::nn::{Nonlin, ParamVars, Parameterized};
use crate::rng::Prng;
use crate::slvm::GaussianParams;

pub struct LatentFlow {
    mode: &'static str,
    conditioner: Box<dyn Conditioner>,
}

impl LatentFlow {
    pub fn identity(latent_dim: usize) -> Self {
        LatentFlow {
            mode: "identity",
            conditioner: Box::new(IdentityConditioner::new(1, latent_dim)),
        }
    }

    /// Hard-coded shift of `z_{t-1}` with unit scale.
    pub fn latent_skip(latent_dim: usize) -> Self {
        LatentFlow {
            mode: "latent_skip",
            conditioner: Box::new(DifferenceConditioner::new(1, latent_dim)),
        }
    }

    pub fn learned(
        name: impl Into<String>,
        latent_dim: usize,
        window: usize,
        hidden_units: usize,
        hidden_layers: usize,
        rng: &mut Prng,
    ) -> Self {
        LatentFlow {
            mode: "learned",
            conditioner: Box::new(HighwayConditioner::new(
                name,
                window,
                latent_dim,
                hidden_units,
                hidden_layers,
                Nonlin::Tanh,
                rng,
            )),
        }
    }

    pub fn from_mode(
        mode: &str,
        name: impl Into<String>,
        latent_dim: usize,
        window: usize,
        hidden_units: usize,
        hidden_layers: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        match mode {
            "identity" => Ok(LatentFlow::identity(latent_dim)),
            "latent_skip" => Ok(LatentFlow::latent_skip(latent_dim)),
            "learned" => Ok(LatentFlow::learned(
                name,
                latent_dim,
                window,
                hidden_units,
                hidden_layers,
                rng,
            )),
            other => Err(Error::contract(format!(
                "unknown latent flow mode `{other}`; known: identity, latent_skip, learned"
            ))),
        }
    }

    pub fn mode(&self) -> &'static str {
        self.mode
    }

    pub fn window(&self) -> usize {
        self.conditioner.window()
    }

    pub fn latent_dim(&self) -> usize {
        self.conditioner.dim()
    }

    /// `(alpha, log beta)` for a flattened latent context `[N, K*Z]`.
    pub fn shift_scale(&self, z_context: &DenseArray) -> (DenseArray, DenseArray) {
        self.conditioner.forward_plain(z_context)
    }

    /// Pushes the base prior through the flow: `N(alpha + beta*mu, beta^2*var)`.
    pub fn effective_prior(&self, z_context: &DenseArray, base: &GaussianParams) -> GaussianParams {
        let (alpha, log_beta) = self.shift_scale(z_context);
        let mean = alpha
            .zip(&log_beta.zip(&base.mean, |lb, m| lb.exp() * m), |a, bm| a + bm);
        let log_var = log_beta.zip(&base.log_var, |lb, lv| 2.0 * lb + lv);
        GaussianParams { mean, log_var }
    }

    /// Tape version of [`Self::effective_prior`] for training graphs.
    pub fn effective_prior_tape(
        &self,
        tape: &mut Tape,
        z_context: Var,
        base_mean: Var,
        base_log_var: Var,
        pv: &ParamVars,
    ) -> (Var, Var) {
        let (alpha, log_beta) = self.conditioner.forward_tape(tape, z_context, pv);
        let beta = tape.exp(log_beta);
        let bm = tape.mul(beta, base_mean);
        let mean = tape.add(alpha, bm);
        let two_lb = tape.scale(log_beta, 2.0);
        let log_var = tape.add(two_lb, base_log_var);
        (mean, log_var)
    }
}

impl Parameterized for LatentFlow {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseArray)) {
        self.conditioner.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        self.conditioner.visit_params_mut(f);
    }
}

/// `log p(z_t | context)` under the flow-transformed base prior, one value
/// per row: `u = (z_t - alpha)/beta`, `log p = log p_base(u) - sum log beta`.
pub fn latent_prior_log_prob(
    z_t: &DenseArray,
    z_context: &DenseArray,
    base: &GaussianParams,
    lf: &LatentFlow,
) -> Result<Vec<f64>> {
    let z = lf.latent_dim();
    if z_t.cols() != z || z_context.cols() != lf.window() * z {
        return Err(Error::contract(format!(
            "latent dims inconsistent: z_t {:?}, context {:?}, Z={z}, K={}",
            z_t.shape(),
            z_context.shape(),
            lf.window()
        )));
    }
    let (alpha, log_beta) = lf.shift_scale(z_context);
    let n = z_t.rows();
    let mut out = vec![0.0; n];
    for r in 0..n {
        for c in 0..z {
            let lb = log_beta.at(r, c);
            let u = (z_t.at(r, c) - alpha.at(r, c)) / lb.exp();
            let lv = base.log_var.at(r, c);
            let diff = u - base.mean.at(r, c);
            out[r] += -0.5 * (crate::flow::LN_2PI + lv + diff * diff / lv.exp()) - lb;
        }
    }
    Ok(out)
}

/// Draw `z_t` rows: `u ~ base`, `z_t = alpha + beta * u`.
pub fn latent_prior_sample(
    z_context: &DenseArray,
    base: &GaussianParams,
    lf: &LatentFlow,
    rng: &mut Prng,
) -> Result<DenseArray> {
    let z = lf.latent_dim();
    if z_context.cols() != lf.window() * z {
        return Err(Error::contract("latent context width mismatch"));
    }
    let (alpha, log_beta) = lf.shift_scale(z_context);
    let n = z_context.rows();
    let mut out = DenseArray::zeros(vec![n, z]);
    for r in 0..n {
        for c in 0..z {
            let u = base.mean.at(r, c) + (0.5 * base.log_var.at(r, c)).exp() * rng.normal();
            out.set(r, c, alpha.at(r, c) + log_beta.at(r, c).exp() * u);
        }
    }
    out.check_finite("latent sample")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(n: usize, z: usize, seed: u64) -> GaussianParams {
        let mut rng = Prng::seed_from(seed);
        GaussianParams {
            mean: rng.normal_array(vec![n, z]),
            log_var: rng.normal_array(vec![n, z]).map(|v| 0.5 * v),
        }
    }

    #[test]
    fn identity_mode_is_base_log_prob() {
        let mut rng = Prng::seed_from(1);
        let lf = LatentFlow::identity(3);
        let b = base(5, 3, 2);
        let z_t = rng.normal_array(vec![5, 3]);
        let ctx = rng.normal_array(vec![5, 3]);
        let lp = latent_prior_log_prob(&z_t, &ctx, &b, &lf).unwrap();
        for r in 0..5 {
            let mut expect = 0.0;
            for c in 0..3 {
                let lv = b.log_var.at(r, c);
                let diff = z_t.at(r, c) - b.mean.at(r, c);
                expect += -0.5 * (crate::flow::LN_2PI + lv + diff * diff / lv.exp());
            }
            assert!((lp[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn latent_skip_is_shifted_gaussian() {
        let mut rng = Prng::seed_from(3);
        let lf = LatentFlow::latent_skip(2);
        let b = base(4, 2, 4);
        let z_prev = rng.normal_array(vec![4, 2]);
        let z_t = rng.normal_array(vec![4, 2]);
        let lp = latent_prior_log_prob(&z_t, &z_prev, &b, &lf).unwrap();
        for r in 0..4 {
            let mut expect = 0.0;
            for c in 0..2 {
                let lv = b.log_var.at(r, c);
                let diff = z_t.at(r, c) - (z_prev.at(r, c) + b.mean.at(r, c));
                expect += -0.5 * (crate::flow::LN_2PI + lv + diff * diff / lv.exp());
            }
            assert!((lp[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_log_prob_roundtrip() {
        let mut rng = Prng::seed_from(5);
        let mut lf = LatentFlow::learned("lf", 2, 3, 8, 2, &mut rng);
        let mut params = crate::nn::collect_params(&lf);
        for (_, v) in params.iter_mut() {
            *v = rng.normal_array(v.shape().to_vec()).map(|x| 0.3 * x);
        }
        crate::nn::set_params(&mut lf, &params).unwrap();
        let b = base(6, 2, 7);
        let ctx = rng.normal_array(vec![6, 6]);
        let z_t = latent_prior_sample(&ctx, &b, &lf, &mut rng).unwrap();
        let lp = latent_prior_log_prob(&z_t, &ctx, &b, &lf).unwrap();
        // direct base log-prob of the pre-image, minus sum log beta
        let (alpha, log_beta) = lf.shift_scale(&ctx);
        for r in 0..6 {
            let mut expect = 0.0;
            for c in 0..2 {
                let lb = log_beta.at(r, c);
                let u = (z_t.at(r, c) - alpha.at(r, c)) / lb.exp();
                let lv = b.log_var.at(r, c);
                let diff = u - b.mean.at(r, c);
                expect += -0.5 * (crate::flow::LN_2PI + lv + diff * diff / lv.exp()) - lb;
            }
            assert!((lp[r] - expect).abs() < 1e-12);
            assert!(lp[r].is_finite());
        }
    }

    #[test]
    fn effective_prior_matches_log_prob() {
        // pushing the base through the flow analytically must agree with the
        // change-of-variables density at arbitrary points
        let mut rng = Prng::seed_from(9);
        let mut lf = LatentFlow::learned("lf", 2, 1, 8, 2, &mut rng);
        let mut params = crate::nn::collect_params(&lf);
        for (_, v) in params.iter_mut() {
            *v = rng.normal_array(v.shape().to_vec()).map(|x| 0.3 * x);
        }
        crate::nn::set_params(&mut lf, &params).unwrap();
        let b = base(4, 2, 10);
        let ctx = rng.normal_array(vec![4, 2]);
        let z_t = rng.normal_array(vec![4, 2]);
        let lp = latent_prior_log_prob(&z_t, &ctx, &b, &lf).unwrap();
        let eff = lf.effective_prior(&ctx, &b);
        for r in 0..4 {
            let mut expect = 0.0;
            for c in 0..2 {
                let lv = eff.log_var.at(r, c);
                let diff = z_t.at(r, c) - eff.mean.at(r, c);
                expect += -0.5 * (crate::flow::LN_2PI + lv + diff * diff / lv.exp());
            }
            assert!((lp[r] - expect).abs() < 1e-10, "{} vs {expect}", lp[r]);
        }
    }

    #[test]
    fn unknown_mode_rejected() {
        let mut rng = Prng::seed_from(0);
        assert!(LatentFlow::from_mode("nope", "lf", 2, 1, 4, 1, &mut rng).is_err());
    }
}
