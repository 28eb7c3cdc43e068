//! Minimal reverse-mode automatic differentiation over [`DenseArray`] values.
//!
//! A [`Tape`] owns a flat list of nodes in topological (insertion) order.
//! Each op records its parents and a closure producing parent gradients from
//! the output gradient. [`Tape::backward`] walks the tape once in reverse,
//! accumulating gradients, then releases intermediate gradient buffers and
//! keeps only the gradients of `requires_grad` leaves.

use crate::array::{rel_error, DenseArray};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&DenseArray) -> Vec<DenseArray>>;

struct Node {
    value: DenseArray,
    op: &'static str,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    requires_grad: bool,
    is_leaf: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Gradients of requires-grad leaves, populated by `backward`.
    leaf_grads: Vec<Option<DenseArray>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: DenseArray,
        op: &'static str,
        parents: Vec<usize>,
        backward: Option<BackFn>,
    ) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
            is_leaf: false,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node {
            value,
            op: "leaf",
            parents: vec![],
            backward: None,
            requires_grad: true,
            is_leaf: true,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input (data, noise).
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node {
            value,
            op: "const",
            parents: vec![],
            backward: None,
            requires_grad: false,
            is_leaf: true,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss wrt a leaf. Zero array if the
    /// leaf did not participate in the loss.
    pub fn grad(&self, v: Var) -> DenseArray {
        match &self.leaf_grads[v.0] {
            Some(g) => g.clone(),
            None => DenseArray::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::contract(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add").expect("add shape");
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        self.push(
            value,
            "add",
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub").expect("sub shape");
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x - y);
        self.push(
            value,
            "sub",
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.map(|v| -v)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul").expect("mul shape");
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = av.zip(&bv, |x, y| x * y);
        self.push(
            value,
            "mul",
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g.zip(&bv, |gi, y| gi * y), g.zip(&av, |gi, x| gi * x)]
            })),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div").expect("div shape");
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = av.zip(&bv, |x, y| x / y);
        self.push(
            value,
            "div",
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let da = g.zip(&bv, |gi, y| gi / y);
                let mut db = g.zip(&av, |gi, x| gi * x);
                db = db.zip(&bv, |v, y| -v / (y * y));
                vec![da, db]
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = av.matmul(&bv);
        self.push(
            value,
            "matmul",
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g.matmul(&bv.transpose()), av.transpose().matmul(g)]
            })),
        )
    }

    fn unary(
        &mut self,
        a: Var,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let av = self.nodes[a.0].value.clone();
        let value = av.map(f);
        self.push(
            value,
            op,
            vec![a.0],
            Some(Box::new(move |g| vec![g.zip(&av, |gi, x| gi * df(x))])),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, "exp", f64::exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, "log", f64::ln, |x| 1.0 / x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, "tanh", f64::tanh, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        fn sig(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }
        self.unary(a, "sigmoid", sig, |x| {
            let s = sig(x);
            s * (1.0 - s)
        })
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            "elu",
            |x| if x > 0.0 { x } else { x.exp() - 1.0 },
            |x| if x > 0.0 { 1.0 } else { x.exp() },
        )
    }

    /// Hard clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            a,
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "scale", move |x| c * x, move |_| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "add_scalar", move |x| x + c, |_| 1.0)
    }

    /// Sum of all entries, producing a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].value.shape().to_vec();
        let value = DenseArray::scalar(self.nodes[a.0].value.data().iter().sum());
        self.push(
            value,
            "sum",
            vec![a.0],
            Some(Box::new(move |g| {
                vec![DenseArray::filled(shape.clone(), g.item())]
            })),
        )
    }

    /// Mean of all entries, producing a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise sum of a 2D array: [N, M] -> [N, 1].
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = v.data()[r * cols..(r + 1) * cols].iter().sum();
        }
        let value = DenseArray::new(vec![rows, 1], out).unwrap();
        self.push(
            value,
            "row_sum",
            vec![a.0],
            Some(Box::new(move |g| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gi = g.data()[r];
                    for c in 0..cols {
                        d[r * cols + c] = gi;
                    }
                }
                vec![DenseArray::new(vec![rows, cols], d).unwrap()]
            })),
        )
    }

    /// Columns `[start, end)` of a 2D array.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let (rows, cols) = (v.rows(), v.cols());
        assert!(start <= end && end <= cols, "slice_cols out of range");
        let w = end - start;
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w]
                .copy_from_slice(&v.data()[r * cols + start..r * cols + end]);
        }
        let value = DenseArray::new(vec![rows, w], out).unwrap();
        self.push(
            value,
            "slice",
            vec![a.0],
            Some(Box::new(move |g| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![DenseArray::new(vec![rows, cols], d).unwrap()]
            })),
        )
    }

    /// Horizontal concatenation of 2D arrays with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(self.nodes[p.0].value.rows(), rows, "concat row mismatch");
                self.nodes[p.0].value.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = DenseArray::new(vec![rows, total], out).unwrap();
        let widths2 = widths.clone();
        self.push(
            value,
            "concat",
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths2.len());
                let mut off = 0;
                for &w in &widths2 {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    grads.push(DenseArray::new(vec![rows, w], d).unwrap());
                    off += w;
                }
                grads
            })),
        )
    }

    /// Broadcast a row vector `[M]` or `[1, M]` to `[rows, M]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let m = v.len();
        let orig_shape = v.shape().to_vec();
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(v.data());
        }
        let value = DenseArray::new(vec![rows, m], out).unwrap();
        self.push(
            value,
            "broadcast",
            vec![a.0],
            Some(Box::new(move |g| {
                let mut d = vec![0.0; m];
                for r in 0..rows {
                    for c in 0..m {
                        d[c] += g.data()[r * m + c];
                    }
                }
                vec![DenseArray::new(orig_shape.clone(), d).unwrap()]
            })),
        )
    }

    /// Linear layer convenience: `x·w + b` with the bias broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        let rows = self.value(xw).rows();
        let bb = self.broadcast_rows(b, rows);
        self.add(xw, bb)
    }

    /// Reverse pass from a scalar loss. Populates leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].value.all_finite() {
            return Err(Error::numeric("loss is not finite".to_string()));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseArray::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.is_leaf {
                if node.requires_grad {
                    if !g.all_finite() {
                        return Err(Error::numeric(format!(
                            "NaN gradient at leaf node {i}"
                        )));
                    }
                    self.leaf_grads[i] = Some(g);
                }
                continue;
            }
            let Some(back) = &node.backward else { continue };
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.clone().into_iter().zip(parent_grads) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if !pg.all_finite() {
                    return Err(Error::numeric(format!(
                        "NaN gradient flowing into node {p} from {} node {i}",
                        self.nodes[i].op
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }
}

/// Central finite differences: `(f(x+h) - f(x-h)) / 2h` per coordinate.
///
/// Serves as the independent oracle for `backward`; it never touches the
/// tape machinery.
pub fn finite_difference_gradient<F>(
    mut f: F,
    params: &[DenseArray],
    h: f64,
) -> Result<Vec<DenseArray>>
where
    F: FnMut(&[DenseArray]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite differences require h > 0"));
    }
    let mut work: Vec<DenseArray> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = DenseArray::zeros(params[pi].shape().to_vec());
        for i in 0..params[pi].len() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let fp = f(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let fm = f(&work)?;
            work[pi].data_mut()[i] = orig;
            let d = (fp - fm) / (2.0 * h);
            if !d.is_finite() {
                return Err(Error::numeric(format!(
                    "finite difference produced non-finite value at param {pi} index {i}"
                )));
            }
            g.data_mut()[i] = d;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Max relative error between two gradient sets.
pub fn max_rel_error(a: &[DenseArray], b: &[DenseArray]) -> f64 {
    let mut worst: f64 = 0.0;
    for (ga, gb) in a.iter().zip(b) {
        for (&x, &y) in ga.data().iter().zip(gb.data()) {
            worst = worst.max(rel_error(x, y));
        }
    }
    worst
}
