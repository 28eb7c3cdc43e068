//! Affine autoregressive flows over sequences.
//!
//! The inverse (normalizing) direction maps an observed sequence `x` to a
//! decorrelated one `y` step by step: `y_t = (x_t - mu(x_{<t})) / sigma(x_{<t})`.
//! The Jacobian is block lower triangular, so the log-determinant is just the
//! sum of per-step log-scales. Transforms stack; each stage reads the output
//! of the previous one.

use crate::array::DenseArray;
use crate::autodiff::{Tape, Var};
use crate::conditioner::{assemble_context, conditioner_forward, Conditioner};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::nn::{ParamVars, Parameterized};
use crate::rng::Prng;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Stack of affine autoregressive transforms applied innermost-first:
/// the normalizing pass runs `transforms[0]`, then `transforms[1]`, ...
pub struct FlowStack {
    transforms: Vec<Box<dyn Conditioner>>,
    dim: usize,
}

/// Result of a normalizing pass through a [`FlowStack`].
pub struct TransformResult {
    /// `stages[0]` is the input; `stages[m]` the output of transform `m-1`.
    pub stages: Vec<SequenceBatch>,
    /// Per-step log-scales summed over all transforms, `[N, T, D]` flattened
    /// as a `SequenceBatch`-shaped array; this is the negated per-entry
    /// contribution to the inverse-pass log-determinant.
    pub log_sigma: SequenceBatch,
}

impl TransformResult {
    pub fn output(&self) -> &SequenceBatch {
        self.stages.last().expect("at least the input stage")
    }

    /// `log |det J|` of the generative direction (`sum log sigma`) restricted
    /// to steps `>= eval_start` (1-based), one value per sequence. The
    /// normalizing pass contributes the negative of this to the density.
    pub fn log_det_fwd(&self, eval_start: usize) -> Vec<f64> {
        let (n, t, d) = (
            self.log_sigma.num_sequences(),
            self.log_sigma.num_steps(),
            self.log_sigma.dim(),
        );
        let mut out = vec![0.0; n];
        for seq in 0..n {
            for step in (eval_start - 1)..t {
                for dd in 0..d {
                    out[seq] += self.log_sigma.get(seq, step, dd);
                }
            }
        }
        out
    }
}

impl FlowStack {
    pub fn new(transforms: Vec<Box<dyn Conditioner>>, dim: usize) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::contract("flow stack needs at least one transform"));
        }
        for c in &transforms {
            if c.dim() != dim {
                return Err(Error::contract(format!(
                    "transform dim {} does not match flow dim {dim}",
                    c.dim()
                )));
            }
        }
        Ok(FlowStack { transforms, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.transforms.len()
    }

    pub fn transforms(&self) -> &[Box<dyn Conditioner>] {
        &self.transforms
    }

    /// First (1-based) step at which every transform in the stack has a
    /// fully populated context window.
    pub fn default_eval_start(&self) -> usize {
        self.transforms.iter().map(|c| c.window()).sum::<usize>() + 1
    }

    /// One normalizing pass: `x -> y^1 -> ... -> y^M` with per-step
    /// log-scales accumulated across stages.
    pub fn inverse_transform(&self, x: &SequenceBatch) -> Result<TransformResult> {
        if x.dim() != self.dim {
            return Err(Error::contract(format!(
                "batch dim {} does not match flow dim {}",
                x.dim(),
                self.dim
            )));
        }
        let (n, t, d) = (x.num_sequences(), x.num_steps(), x.dim());
        let mut stages = vec![x.clone()];
        let mut log_sigma = SequenceBatch::zeros(n, t, d);
        for c in &self.transforms {
            let prev = stages.last().unwrap();
            let mut next = prev.clone();
            for step in 1..=t {
                let ctx = assemble_context(prev, step, c.window())?;
                let p = conditioner_forward(c.as_ref(), &ctx)?;
                for seq in 0..n {
                    for dd in 0..d {
                        let v = prev.get(seq, step - 1, dd);
                        let s = p.scale.at(seq, dd);
                        next.set(seq, step - 1, dd, (v - p.shift.at(seq, dd)) / s);
                        let acc = log_sigma.get(seq, step - 1, dd) + s.ln();
                        log_sigma.set(seq, step - 1, dd, acc);
                    }
                }
            }
            next.check_finite()?;
            stages.push(next);
        }
        Ok(TransformResult { stages, log_sigma })
    }

    /// Generative pass: map base-space `y` back to data space, sequentially.
    pub fn forward_transform(&self, y: &SequenceBatch) -> Result<SequenceBatch> {
        let (n, t, d) = (y.num_sequences(), y.num_steps(), y.dim());
        if d != self.dim {
            return Err(Error::contract("batch dim does not match flow dim"));
        }
        let mut cur = y.clone();
        // reverse of the normalizing order
        for c in self.transforms.iter().rev() {
            let mut out = SequenceBatch::zeros(n, t, d);
            out.seq_ids = cur.seq_ids.clone();
            out.dim_names = cur.dim_names.clone();
            for step in 1..=t {
                let ctx = assemble_context(&out, step, c.window())?;
                let p = conditioner_forward(c.as_ref(), &ctx)?;
                for seq in 0..n {
                    for dd in 0..d {
                        let v = p.shift.at(seq, dd) + p.scale.at(seq, dd) * cur.get(seq, step - 1, dd);
                        out.set(seq, step - 1, dd, v);
                    }
                }
            }
            out.check_finite()?;
            cur = out;
        }
        Ok(cur)
    }
}

/// Per-sequence log-density of `x` under the flow with a standard-normal
/// base, counting only steps `>= eval_start` (1-based).
pub fn flow_log_prob(
    stack: &FlowStack,
    x: &SequenceBatch,
    eval_start: usize,
) -> Result<(Vec<f64>, TransformResult)> {
    let t = x.num_steps();
    if eval_start < 1 || eval_start > t {
        return Err(Error::contract(format!(
            "eval_start {eval_start} out of range 1..={t}"
        )));
    }
    let res = stack.inverse_transform(x)?;
    let y = res.output();
    let mut lp: Vec<f64> = res.log_det_fwd(eval_start).iter().map(|v| -v).collect();
    for seq in 0..x.num_sequences() {
        for step in (eval_start - 1)..t {
            for dd in 0..x.dim() {
                let v = y.get(seq, step, dd);
                lp[seq] += -0.5 * (LN_2PI + v * v);
            }
        }
    }
    Ok((lp, res))
}

/// Average negative log-likelihood per evaluated step (nats).
pub fn flow_nll_per_step(stack: &FlowStack, x: &SequenceBatch, eval_start: usize) -> Result<f64> {
    let (lp, _) = flow_log_prob(stack, x, eval_start)?;
    let steps = (x.num_steps() - eval_start + 1) as f64;
    let total: f64 = lp.iter().sum();
    Ok(-total / (x.num_sequences() as f64 * steps))
}

/// The exact whitening transform for a stationary AR(1): shift `rho * x_{t-1}`,
/// constant scale `noise_std` (Cholesky whitening of the process covariance).
pub fn closed_form_linear_flow(rho: f64, noise_std: f64, dim: usize) -> Result<FlowStack> {
    FlowStack::new(
        vec![Box::new(crate::conditioner::LinearArConditioner::new(
            rho, noise_std, dim,
        )?)],
        dim,
    )
}

/// Draw `n` sequences of length `t` by sampling the base distribution and
/// running the generative pass.
pub fn flow_sample(stack: &FlowStack, n: usize, t: usize, rng: &mut Prng) -> Result<SequenceBatch> {
    let d = stack.dim();
    let mut y = SequenceBatch::zeros(n, t, d);
    let noise = rng.normal_array(vec![n, t * d]);
    for seq in 0..n {
        for step in 0..t {
            for dd in 0..d {
                y.set(seq, step, dd, noise.at(seq, step * d + dd));
            }
        }
    }
    stack.forward_transform(&y)
}

/// Builds the differentiable NLL objective for a batch on `tape`.
///
/// Mirrors the plain path exactly (zero-filled invalid context slots); the
/// returned scalar is the mean over sequences of the per-step NLL averaged
/// over steps `>= eval_start`.
pub fn flow_nll_tape(
    stack: &FlowStack,
    tape: &mut Tape,
    pv: &ParamVars,
    x: &SequenceBatch,
    eval_start: usize,
) -> Result<Var> {
    let (t, d) = (x.num_steps(), x.dim());
    if eval_start < 1 || eval_start > t {
        return Err(Error::contract(format!(
            "eval_start {eval_start} out of range 1..={t}"
        )));
    }
    let (ys, lss) = stack_tape_steps(stack, tape, pv, x)?;
    // per-step (0.5 y^2 + log sigma); the base density applies to the final
    // stage only, the log-scales accumulate over all stages
    let mut total: Option<Var> = None;
    for step in (eval_start - 1)..t {
        let y = ys[step];
        let y2 = tape.mul(y, y);
        let half_y2 = tape.scale(y2, 0.5);
        let term = tape.add(half_y2, lss[step]);
        let rs = tape.row_sum(term);
        total = Some(match total {
            Some(acc) => tape.add(acc, rs),
            None => rs,
        });
    }
    let total = total.expect("eval range is non-empty");
    let steps = (t - eval_start + 1) as f64;
    let m = tape.mean(total);
    let scaled = tape.scale(m, 1.0 / steps);
    // constant part of the Gaussian base density
    Ok(tape.add_scalar(scaled, 0.5 * LN_2PI * d as f64))
}

/// Differentiable normalizing pass, one `[N, D]` var per step.
///
/// Returns the final-stage outputs `y^M_t` and the per-step log-scales
/// accumulated across stages (the per-step log-determinant contribution).
/// Mirrors the plain path exactly, zero-filling invalid context slots.
pub fn stack_tape_steps(
    stack: &FlowStack,
    tape: &mut Tape,
    pv: &ParamVars,
    x: &SequenceBatch,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let (n, t, d) = (x.num_sequences(), x.num_steps(), x.dim());
    if d != stack.dim {
        return Err(Error::contract("batch dim does not match flow dim"));
    }
    let mut cur: Vec<Var> = (0..t).map(|s| tape.constant(x.step_matrix(s))).collect();
    let mut lss: Vec<Option<Var>> = vec![None; t];
    for c in &stack.transforms {
        let k = c.window();
        let zero = tape.constant(DenseArray::zeros(vec![n, d]));
        let mut next = Vec::with_capacity(t);
        for step in 1..=t {
            let parts: Vec<Var> = (0..k)
                .map(|slot| {
                    let src = step as i64 - k as i64 + slot as i64;
                    if src >= 1 {
                        cur[src as usize - 1]
                    } else {
                        zero
                    }
                })
                .collect();
            let ctx = tape.concat_cols(&parts);
            let (mu, ls) = c.forward_tape(tape, ctx, pv);
            let xs = cur[step - 1];
            let diff = tape.sub(xs, mu);
            let neg_ls = tape.scale(ls, -1.0);
            let inv_sigma = tape.exp(neg_ls);
            let y = tape.mul(diff, inv_sigma);
            lss[step - 1] = Some(match lss[step - 1] {
                Some(prev) => tape.add(prev, ls),
                None => ls,
            });
            next.push(y);
        }
        cur = next;
    }
    let lss = lss
        .into_iter()
        .map(|v| v.expect("at least one transform"))
        .collect();
    Ok((cur, lss))
}

impl Parameterized for FlowStack {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseArray)) {
        for c in &self.transforms {
            c.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        for c in &mut self.transforms {
            c.visit_params_mut(f);
        }
    }
}
