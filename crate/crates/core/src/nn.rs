//! Fully-connected networks with two output heads (shift/log-scale or
//! mean/log-variance), plus the parameter bookkeeping shared by every
//! trainable component.

use indexmap::IndexMap;

use crate::array::DenseArray;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Prng;

/// Anything that owns named parameter arrays.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseArray));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseArray));
}

pub fn collect_params(p: &dyn Parameterized) -> IndexMap<String, DenseArray> {
    let mut out = IndexMap::new();
    p.visit_params(&mut |name, arr| {
        out.insert(name.to_string(), arr.clone());
    });
    out
}

pub fn set_params(p: &mut dyn Parameterized, values: &IndexMap<String, DenseArray>) -> Result<()> {
    let mut missing = Vec::new();
    p.visit_params_mut(&mut |name, arr| match values.get(name) {
        Some(v) if v.shape() == arr.shape() => *arr = v.clone(),
        Some(v) => missing.push(format!(
            "`{name}`: shape {:?} vs expected {:?}",
            v.shape(),
            arr.shape()
        )),
        None => missing.push(format!("`{name}`: missing")),
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::format(format!(
            "parameter mismatch: {}",
            missing.join("; ")
        )))
    }
}

/// Tape handles for every parameter of a model, keyed by full name.
pub struct ParamVars(pub IndexMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not on tape"))
    }
}

/// Put every parameter on the tape as a differentiable leaf.
pub fn inject_leaves(tape: &mut Tape, p: &dyn Parameterized) -> ParamVars {
    let mut map = IndexMap::new();
    p.visit_params(&mut |name, arr| {
        map.insert(name.to_string(), tape.leaf(arr.clone()));
    });
    ParamVars(map)
}

/// Put every parameter on the tape as a constant (evaluation-only path).
pub fn inject_constants(tape: &mut Tape, p: &dyn Parameterized) -> ParamVars {
    let mut map = IndexMap::new();
    p.visit_params(&mut |name, arr| {
        map.insert(name.to_string(), tape.constant(arr.clone()));
    });
    ParamVars(map)
}

/// As [`inject_leaves`], from a pre-collected name→array map (used when one
/// tape hosts several components, e.g. model plus flow).
pub fn inject_leaves_map(tape: &mut Tape, params: &IndexMap<String, DenseArray>) -> ParamVars {
    let mut map = IndexMap::new();
    for (name, arr) in params {
        map.insert(name.clone(), tape.leaf(arr.clone()));
    }
    ParamVars(map)
}

/// As [`inject_constants`], from a pre-collected name→array map.
pub fn inject_constants_map(tape: &mut Tape, params: &IndexMap<String, DenseArray>) -> ParamVars {
    let mut map = IndexMap::new();
    for (name, arr) in params {
        map.insert(name.clone(), tape.constant(arr.clone()));
    }
    ParamVars(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlin {
    Elu,
    Tanh,
    Relu,
}

impl Nonlin {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Nonlin::Elu => tape.elu(x),
            Nonlin::Tanh => tape.tanh(x),
            Nonlin::Relu => tape.clamp(x, 0.0, f64::INFINITY),
        }
    }
}

/// A network producing two same-shaped output heads from a flat input.
pub trait TwoHeadNet: Parameterized {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward_tape(&self, tape: &mut Tape, x: Var, pv: &ParamVars) -> (Var, Var);

    /// Plain-value forward, routed through a throwaway tape so there is a
    /// single arithmetic path.
    fn forward_plain(&self, x: &DenseArray) -> (DenseArray, DenseArray) {
        let mut tape = Tape::new();
        let pv = inject_constants(&mut tape, self.as_parameterized());
        let xv = tape.constant(x.clone());
        let (a, b) = self.forward_tape(&mut tape, xv, &pv);
        (tape.value(a).clone(), tape.value(b).clone())
    }

    fn as_parameterized(&self) -> &dyn Parameterized;
}

/// Input projection, `hidden_layers` highway blocks, two linear heads.
/// Both heads are zero-initialized so the net starts as the zero function.
#[derive(Debug, Clone)]
pub struct HighwayMlp {
    name: String,
    input_dim: usize,
    output_dim: usize,
    hidden_layers: usize,
    nonlin: Nonlin,
    params: IndexMap<String, DenseArray>,
}

impl HighwayMlp {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        output_dim: usize,
        hidden_units: usize,
        hidden_layers: usize,
        nonlin: Nonlin,
        rng: &mut Prng,
    ) -> Self {
        assert!(input_dim > 0 && output_dim > 0 && hidden_units > 0 && hidden_layers > 0);
        let mut params = IndexMap::new();
        let scaled = |rng: &mut Prng, rows: usize, cols: usize| {
            let s = 1.0 / (rows as f64).sqrt();
            rng.normal_array(vec![rows, cols]).map(|v| v * s)
        };
        params.insert("in.w".into(), scaled(rng, input_dim, hidden_units));
        params.insert("in.b".into(), DenseArray::zeros(vec![hidden_units]));
        for l in 0..hidden_layers {
            params.insert(format!("h{l}.t.w"), scaled(rng, hidden_units, hidden_units));
            params.insert(format!("h{l}.t.b"), DenseArray::zeros(vec![hidden_units]));
            params.insert(format!("h{l}.g.w"), scaled(rng, hidden_units, hidden_units));
            // gate bias starts negative so early layers mostly carry
            params.insert(
                format!("h{l}.g.b"),
                DenseArray::filled(vec![hidden_units], -1.0),
            );
        }
        params.insert("mu.w".into(), DenseArray::zeros(vec![hidden_units, output_dim]));
        params.insert("mu.b".into(), DenseArray::zeros(vec![output_dim]));
        params.insert("ls.w".into(), DenseArray::zeros(vec![hidden_units, output_dim]));
        params.insert("ls.b".into(), DenseArray::zeros(vec![output_dim]));
        HighwayMlp {
            name: name.into(),
            input_dim,
            output_dim,
            hidden_layers,
            nonlin,
            params,
        }
    }

    fn full(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }
}

impl Parameterized for HighwayMlp {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseArray)) {
        for (k, v) in &self.params {
            f(&self.full(k), v);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        let name = self.name.clone();
        for (k, v) in self.params.iter_mut() {
            f(&format!("{name}.{k}"), v);
        }
    }
}

impl TwoHeadNet for HighwayMlp {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn forward_tape(&self, tape: &mut Tape, x: Var, pv: &ParamVars) -> (Var, Var) {
        assert_eq!(
            tape.value(x).cols(),
            self.input_dim,
            "conditioner input width mismatch"
        );
        let w_in = pv.get(&self.full("in.w"));
        let b_in = pv.get(&self.full("in.b"));
        let mut h = tape.affine(x, w_in, b_in);
        h = self.nonlin.apply(tape, h);
        for l in 0..self.hidden_layers {
            let wt = pv.get(&self.full(&format!("h{l}.t.w")));
            let bt = pv.get(&self.full(&format!("h{l}.t.b")));
            let wg = pv.get(&self.full(&format!("h{l}.g.w")));
            let bg = pv.get(&self.full(&format!("h{l}.g.b")));
            let tr = tape.affine(h, wt, bt);
            let tr = self.nonlin.apply(tape, tr);
            let gate = tape.affine(h, wg, bg);
            let gate = tape.sigmoid(gate);
            let gated = tape.mul(gate, tr);
            let anti = tape.scale(gate, -1.0);
            let anti = tape.add_scalar(anti, 1.0);
            let carry = tape.mul(anti, h);
            h = tape.add(gated, carry);
        }
        let mu = {
            let w = pv.get(&self.full("mu.w"));
            let b = pv.get(&self.full("mu.b"));
            tape.affine(h, w, b)
        };
        let ls = {
            let w = pv.get(&self.full("ls.w"));
            let b = pv.get(&self.full("ls.b"));
            tape.affine(h, w, b)
        };
        (mu, ls)
    }

    fn as_parameterized(&self) -> &dyn Parameterized {
        self
    }
}

/// Two linear heads directly on the input, all weights zero-initialized.
/// Used for linear-capacity conditioners and linear-Gaussian test models.
#[derive(Debug, Clone)]
pub struct LinearTwoHead {
    name: String,
    input_dim: usize,
    output_dim: usize,
    params: IndexMap<String, DenseArray>,
}

impl LinearTwoHead {
    pub fn new(name: impl Into<String>, input_dim: usize, output_dim: usize) -> Self {
        let mut params = IndexMap::new();
        params.insert("mu.w".into(), DenseArray::zeros(vec![input_dim, output_dim]));
        params.insert("mu.b".into(), DenseArray::zeros(vec![output_dim]));
        params.insert("ls.w".into(), DenseArray::zeros(vec![input_dim, output_dim]));
        params.insert("ls.b".into(), DenseArray::zeros(vec![output_dim]));
        LinearTwoHead {
            name: name.into(),
            input_dim,
            output_dim,
            params,
        }
    }

    pub fn set(&mut self, key: &str, value: DenseArray) {
        let slot = self.params.get_mut(key).expect("unknown linear param");
        assert_eq!(slot.shape(), value.shape());
        *slot = value;
    }

    fn full(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }
}

impl Parameterized for LinearTwoHead {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseArray)) {
        for (k, v) in &self.params {
            f(&self.full(k), v);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        let name = self.name.clone();
        for (k, v) in self.params.iter_mut() {
            f(&format!("{name}.{k}"), v);
        }
    }
}

impl TwoHeadNet for LinearTwoHead {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn forward_tape(&self, tape: &mut Tape, x: Var, pv: &ParamVars) -> (Var, Var) {
        let mu = {
            let w = pv.get(&self.full("mu.w"));
            let b = pv.get(&self.full("mu.b"));
            tape.affine(x, w, b)
        };
        let ls = {
            let w = pv.get(&self.full("ls.w"));
            let b = pv.get(&self.full("ls.b"));
            tape.affine(x, w, b)
        };
        (mu, ls)
    }

    fn as_parameterized(&self) -> &dyn Parameterized {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_gradient, max_rel_error};

    #[test]
    fn zero_init_heads_output_zero() {
        let mut rng = Prng::seed_from(1);
        let net = HighwayMlp::new("n", 3, 2, 8, 2, Nonlin::Elu, &mut rng);
        let x = rng.normal_array(vec![4, 3]);
        let (mu, ls) = net.forward_plain(&x);
        assert!(mu.data().iter().all(|&v| v == 0.0));
        assert!(ls.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = Prng::seed_from(2);
        let net = HighwayMlp::new("n", 3, 2, 8, 2, Nonlin::Tanh, &mut rng);
        let x = rng.normal_array(vec![4, 3]);
        assert_eq!(net.forward_plain(&x), net.forward_plain(&x));
    }

    #[test]
    fn param_gradients_pass_fd_check() {
        let mut rng = Prng::seed_from(3);
        let mut net = HighwayMlp::new("n", 2, 2, 4, 2, Nonlin::Elu, &mut rng);
        // give the heads nonzero values so gradients flow everywhere
        let head_w = rng.normal_array(vec![4, 2]).map(|v| v * 0.3);
        let head_ls = rng.normal_array(vec![4, 2]).map(|v| v * 0.3);
        let mut p = collect_params(&net);
        p.insert("n.mu.w".into(), head_w);
        p.insert("n.ls.w".into(), head_ls);
        set_params(&mut net, &p).unwrap();
        let x = rng.normal_array(vec![3, 2]).map(|v| v * 2.0);

        let loss_of = |net: &HighwayMlp| {
            let mut tape = Tape::new();
            let pv = inject_leaves(&mut tape, net);
            let xv = tape.constant(x.clone());
            let (mu, ls) = net.forward_tape(&mut tape, xv, &pv);
            let s = tape.mul(ls, ls);
            let tot = tape.add(mu, s);
            let l = tape.sum(tot);
            (tape, pv, l)
        };

        let (mut tape, pv, l) = loss_of(&net);
        tape.backward(l).unwrap();
        let names: Vec<String> = pv.0.keys().cloned().collect();
        let analytic: Vec<DenseArray> = names.iter().map(|n| tape.grad(pv.get(n))).collect();

        let base = collect_params(&net);
        let flat: Vec<DenseArray> = names.iter().map(|n| base[n].clone()).collect();
        let fd = finite_difference_gradient(
            |p| {
                let mut trial = net.clone();
                let mut map = base.clone();
                for (n, arr) in names.iter().zip(p) {
                    map.insert(n.clone(), arr.clone());
                }
                set_params(&mut trial, &map).unwrap();
                let (t, _, lv) = loss_of(&trial);
                Ok(t.value(lv).item())
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&analytic, &fd) < 1e-4);
    }
}
