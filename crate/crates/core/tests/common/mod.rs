//! Shared oracles for the integration suites: a brute-force finite-difference
//! Jacobian of the normalizing transform and a scalar Kalman-filter
//! log-likelihood for the linear-Gaussian state space model.

use nalgebra::DMatrix;
use seqflow::data::SequenceBatch;
use seqflow::flow::{FlowStack, LN_2PI};
use seqflow::rng::Prng;
use seqflow::slvm::ScalarSsm;

/// Full `(T*D) x (T*D)` Jacobian `dy/dx` of the stacked normalizing
/// transform on a single sequence, by central finite differences.
/// Row/column index is `t * D + d` (time-major).
pub fn fd_jacobian(stack: &FlowStack, x: &SequenceBatch, h: f64) -> DMatrix<f64> {
    assert_eq!(x.num_sequences(), 1);
    let (t, d) = (x.num_steps(), x.dim());
    let m = t * d;
    let mut jac = DMatrix::zeros(m, m);
    for col in 0..m {
        let (ts, ds) = (col / d, col % d);
        let mut plus = x.clone();
        plus.set(0, ts, ds, x.get(0, ts, ds) + h);
        let mut minus = x.clone();
        minus.set(0, ts, ds, x.get(0, ts, ds) - h);
        let yp = stack.inverse_transform(&plus).unwrap();
        let ym = stack.inverse_transform(&minus).unwrap();
        for row in 0..m {
            let (tr, dr) = (row / d, row % d);
            let v = (yp.output().get(0, tr, dr) - ym.output().get(0, tr, dr)) / (2.0 * h);
            jac[(row, col)] = v;
        }
    }
    jac
}

/// Exact log-likelihood `log p(y_1..y_T)` of a scalar linear-Gaussian state
/// space model with `z_0 = 0`, via the Kalman filter prediction-error
/// decomposition.
pub fn kalman_log_likelihood(ssm: &ScalarSsm, y: &[f64]) -> f64 {
    let (mut m, mut p) = (0.0f64, 0.0f64); // filtered moments of z_{t-1}
    let mut ll = 0.0;
    for &yt in y {
        let m_pred = ssm.a * m;
        let p_pred = ssm.a * ssm.a * p + ssm.q;
        let s = ssm.c * ssm.c * p_pred + ssm.r; // innovation variance
        let innov = yt - ssm.c * m_pred;
        ll += -0.5 * (LN_2PI + s.ln() + innov * innov / s);
        let gain = p_pred * ssm.c / s;
        m = m_pred + gain * innov;
        p = (1.0 - gain * ssm.c) * p_pred;
    }
    ll
}

/// Simulate sequences from a [`ScalarSsm`], returning a `[N, T, 1]` batch.
pub fn simulate_ssm(ssm: &ScalarSsm, n: usize, t: usize, rng: &mut Prng) -> SequenceBatch {
    let mut y = SequenceBatch::zeros(n, t, 1);
    for seq in 0..n {
        let mut z = 0.0;
        for step in 0..t {
            z = ssm.a * z + ssm.q.sqrt() * rng.normal();
            y.set(seq, step, 0, ssm.c * z + ssm.r.sqrt() * rng.normal());
        }
    }
    y
}

/// Mean and standard error of a sample.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
