//! Conditioner strategies: map the previous `K` inputs to per-step affine
//! parameters. Every variant sits behind the [`Conditioner`] trait and is
//! registered by name, so transforms are selected at runtime from config.

use crate::array::DenseArray;
use crate::autodiff::{Tape, Var};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::nn::{
    inject_constants, HighwayMlp, LinearTwoHead, Nonlin, ParamVars, Parameterized, TwoHeadNet,
};
use crate::rng::Prng;

/// Log-scale clamp; keeps `sigma` within `[e^-7, e^7]`.
pub const LOG_SCALE_CLAMP: f64 = 7.0;

/// Per-step affine parameters, `[N, D]` each.
#[derive(Debug, Clone)]
pub struct AffineStepParams {
    pub shift: DenseArray,
    pub scale: DenseArray,
}

/// Flattened window of the `K` previous observations, oldest first.
/// Steps before the sequence start are zero-filled and flagged invalid.
#[derive(Debug, Clone)]
pub struct ContextWindow {
    /// `[N, K*D]`
    pub values: DenseArray,
    /// one flag per window slot (shared across the batch)
    pub valid: Vec<bool>,
}

/// Context for (1-based) step `t`: observations at steps `t-K .. t-1`.
pub fn assemble_context(batch: &SequenceBatch, t: usize, k: usize) -> Result<ContextWindow> {
    let (n, steps, d) = (batch.num_sequences(), batch.num_steps(), batch.dim());
    if t < 1 || t > steps {
        return Err(Error::contract(format!("step {t} out of range 1..={steps}")));
    }
    let mut values = DenseArray::zeros(vec![n, k * d]);
    let mut valid = vec![false; k];
    for slot in 0..k {
        // slot 0 is the oldest step, t-K
        let src = t as i64 - k as i64 + slot as i64; // 1-based source step
        if src >= 1 {
            valid[slot] = true;
            for seq in 0..n {
                for dd in 0..d {
                    values.set(seq, slot * d + dd, batch.get(seq, src as usize - 1, dd));
                }
            }
        }
    }
    Ok(ContextWindow { values, valid })
}

/// A conditioner strategy: produces per-step shift and clamped log-scale
/// from a flattened context window.
pub trait Conditioner: Parameterized {
    fn kind(&self) -> &'static str;
    fn window(&self) -> usize;
    fn dim(&self) -> usize;

    /// `ctx` is `[N, K*D]`; returns `(mu, log_sigma)`, both `[N, D]`, with
    /// the log-scale already clamped.
    fn forward_tape(&self, tape: &mut Tape, ctx: Var, pv: &ParamVars) -> (Var, Var);

    fn forward_plain(&self, ctx: &DenseArray) -> (DenseArray, DenseArray) {
        let mut tape = Tape::new();
        let pv = inject_constants(&mut tape, self.as_parameterized());
        let cv = tape.constant(ctx.clone());
        let (mu, ls) = self.forward_tape(&mut tape, cv, &pv);
        (tape.value(mu).clone(), tape.value(ls).clone())
    }

    fn as_parameterized(&self) -> &dyn Parameterized;
}

/// Shift and scale as per-step affine parameters with `sigma = exp(log_sigma)`.
pub fn conditioner_forward(c: &dyn Conditioner, ctx: &ContextWindow) -> Result<AffineStepParams> {
    if ctx.values.cols() != c.window() * c.dim() {
        return Err(Error::contract(format!(
            "context width {} does not match K*D = {}",
            ctx.values.cols(),
            c.window() * c.dim()
        )));
    }
    let (shift, log_sigma) = c.forward_plain(&ctx.values);
    shift.check_finite("conditioner shift")?;
    Ok(AffineStepParams {
        shift,
        scale: log_sigma.map(f64::exp),
    })
}

/// Highway-MLP conditioner (the learned mode).
pub struct HighwayConditioner {
    net: HighwayMlp,
    window: usize,
    dim: usize,
}

impl HighwayConditioner {
    pub fn new(
        name: impl Into<String>,
        window: usize,
        dim: usize,
        hidden_units: usize,
        hidden_layers: usize,
        nonlin: Nonlin,
        rng: &mut Prng,
    ) -> Self {
        let name = name.into();
        HighwayConditioner {
            net: HighwayMlp::new(name, window * dim, dim, hidden_units, hidden_layers, nonlin, rng),
            window,
            dim,
        }
    }
}

impl Parameterized for HighwayConditioner {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseArray)) {
        self.net.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        self.net.visit_params_mut(f);
    }
}

impl Conditioner for HighwayConditioner {
    fn kind(&self) -> &'static str {
        "learned"
    }
    fn window(&self) -> usize {
        self.window
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn forward_tape(&self, tape: &mut Tape, ctx: Var, pv: &ParamVars) -> (Var, Var) {
        let (mu, ls) = self.net.forward_tape(tape, ctx, pv);
        let ls = tape.clamp(ls, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
        (mu, ls)
    }
    fn as_parameterized(&self) -> &dyn Parameterized {
        self
    }
}

/// Linear-capacity conditioner: both heads directly on the window.
pub struct LinearConditioner {
    net: LinearTwoHead,
    window: usize,
    dim: usize,
}

impl LinearConditioner {
    pub fn new(name: impl Into<String>, window: usize, dim: usize) -> Self {
        LinearConditioner {
            net: LinearTwoHead::new(name, window * dim, dim),
            window,
            dim,
        }
    }

    pub fn net_mut(&mut self) -> &mut LinearTwoHead {
        &mut self.net
    }
}

impl Parameterized for LinearConditioner {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseArray)) {
        self.net.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        self.net.visit_params_mut(f);
    }
}

impl Conditioner for LinearConditioner {
    fn kind(&self) -> &'static str {
        "linear"
    }
    fn window(&self) -> usize {
        self.window
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn forward_tape(&self, tape: &mut Tape, ctx: Var, pv: &ParamVars) -> (Var, Var) {
        let (mu, ls) = self.net.forward_tape(tape, ctx, pv);
        let ls = tape.clamp(ls, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
        (mu, ls)
    }
    fn as_parameterized(&self) -> &dyn Parameterized {
        self
    }
}

/// Hard-coded difference transform: shift = previous input, scale = 1.
/// Doubles as the `latent_skip` parameterization on latent windows.
pub struct DifferenceConditioner {
    window: usize,
    dim: usize,
}

impl DifferenceConditioner {
    pub fn new(window: usize, dim: usize) -> Self {
        assert!(window >= 1);
        DifferenceConditioner { window, dim }
    }
}

impl Parameterized for DifferenceConditioner {
    fn visit_params(&self, _f: &mut dyn FnMut(&str, &DenseArray)) {}
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&str, &mut DenseArray)) {}
}

impl Conditioner for DifferenceConditioner {
    fn kind(&self) -> &'static str {
        "difference"
    }
    fn window(&self) -> usize {
        self.window
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn forward_tape(&self, tape: &mut Tape, ctx: Var, _pv: &ParamVars) -> (Var, Var) {
        let w = self.window * self.dim;
        let mu = tape.slice_cols(ctx, w - self.dim, w);
        let rows = tape.value(ctx).rows();
        let zero = tape.constant(DenseArray::zeros(vec![rows, self.dim]));
        (mu, zero)
    }
    fn as_parameterized(&self) -> &dyn Parameterized {
        self
    }
}

/// Identity transform: shift 0, scale 1.
pub struct IdentityConditioner {
    window: usize,
    dim: usize,
}

impl IdentityConditioner {
    pub fn new(window: usize, dim: usize) -> Self {
        IdentityConditioner { window, dim }
    }
}

impl Parameterized for IdentityConditioner {
    fn visit_params(&self, _f: &mut dyn FnMut(&str, &DenseArray)) {}
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&str, &mut DenseArray)) {}
}

impl Conditioner for IdentityConditioner {
    fn kind(&self) -> &'static str {
        "identity"
    }
    fn window(&self) -> usize {
        self.window
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn forward_tape(&self, tape: &mut Tape, ctx: Var, _pv: &ParamVars) -> (Var, Var) {
        let rows = tape.value(ctx).rows();
        let zero = tape.constant(DenseArray::zeros(vec![rows, self.dim]));
        (zero, zero)
    }
    fn as_parameterized(&self) -> &dyn Parameterized {
        self
    }
}

/// Fixed linear-AR whitening: shift = rho * previous input, constant scale.
/// The closed-form optimum (Cholesky whitening) for a stationary AR(1).
pub struct LinearArConditioner {
    rho: f64,
    noise_std: f64,
    dim: usize,
}

impl LinearArConditioner {
    pub fn new(rho: f64, noise_std: f64, dim: usize) -> Result<Self> {
        if rho.abs() >= 1.0 {
            return Err(Error::contract(format!("|rho| must be < 1, got {rho}")));
        }
        if noise_std <= 0.0 {
            return Err(Error::contract("noise_std must be positive"));
        }
        Ok(LinearArConditioner { rho, noise_std, dim })
    }
}

impl Parameterized for LinearArConditioner {
    fn visit_params(&self, _f: &mut dyn FnMut(&str, &DenseArray)) {}
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&str, &mut DenseArray)) {}
}

impl Conditioner for LinearArConditioner {
    fn kind(&self) -> &'static str {
        "linear-ar"
    }
    fn window(&self) -> usize {
        1
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn forward_tape(&self, tape: &mut Tape, ctx: Var, _pv: &ParamVars) -> (Var, Var) {
        let prev = tape.slice_cols(ctx, 0, self.dim);
        let mu = tape.scale(prev, self.rho);
        let rows = tape.value(ctx).rows();
        let ls = tape.constant(DenseArray::filled(
            vec![rows, self.dim],
            self.noise_std.ln(),
        ));
        (mu, ls)
    }
    fn as_parameterized(&self) -> &dyn Parameterized {
        self
    }
}

/// Everything a registry builder may need to construct a conditioner.
#[derive(Debug, Clone)]
pub struct ConditionerSpec {
    pub name: String,
    pub window: usize,
    pub dim: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub nonlin: Nonlin,
    pub rho: f64,
    pub noise_std: f64,
}

type Builder = fn(&ConditionerSpec, &mut Prng) -> Result<Box<dyn Conditioner>>;

/// Registry of conditioner strategies by kind name.
pub const CONDITIONER_REGISTRY: &[(&str, Builder)] = &[
    ("learned", |s, rng| {
        Ok(Box::new(HighwayConditioner::new(
            s.name.clone(),
            s.window,
            s.dim,
            s.hidden_units,
            s.hidden_layers,
            s.nonlin,
            rng,
        )))
    }),
    ("linear", |s, _| {
        Ok(Box::new(LinearConditioner::new(
            s.name.clone(),
            s.window,
            s.dim,
        )))
    }),
    ("difference", |s, _| {
        Ok(Box::new(DifferenceConditioner::new(s.window, s.dim)))
    }),
    ("identity", |s, _| {
        Ok(Box::new(IdentityConditioner::new(s.window, s.dim)))
    }),
    ("linear-ar", |s, _| {
        Ok(Box::new(LinearArConditioner::new(s.rho, s.noise_std, s.dim)?))
    }),
];

pub fn build_conditioner(kind: &str, spec: &ConditionerSpec, rng: &mut Prng) -> Result<Box<dyn Conditioner>> {
    for (name, builder) in CONDITIONER_REGISTRY {
        if *name == kind {
            return builder(spec, rng);
        }
    }
    Err(Error::contract(format!(
        "unknown conditioner kind `{kind}`; known: {}",
        CONDITIONER_REGISTRY
            .iter()
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join(", ")
    )))
}
