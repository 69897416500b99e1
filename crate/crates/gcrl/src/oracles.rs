//! Independent numerical oracles used by the test suites.
//!
//! Everything here deliberately avoids the code paths it checks: gradients
//! come from central finite differences, densities from brute-force sums or
//! grid quadrature, Jacobians from numerical differentiation. Kept in the
//! library (rather than per-test copies) so unit, integration, and
//! acceptance tests share one implementation.

use crate::numgrad::params::ParamStore;

/// Central finite differences of `f` w.r.t. every scalar of every parameter,
/// one Vec per slot in slot order. `f` must rebuild its value from the
/// store's current values on each call.
pub fn finite_diff_grads(
    store: &mut ParamStore,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for slot in store.slots().collect::<Vec<_>>() {
        let n = store.entry(slot).len();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = store.entry(slot).values[i];
            store.entry_mut(slot).values[i] = orig + h;
            let fp = f(store);
            store.entry_mut(slot).values[i] = orig - h;
            let fm = f(store);
            store.entry_mut(slot).values[i] = orig;
            g[i] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Relative error with a floor so near-zero pairs compare on absolute terms.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Numerical Jacobian of `f: R^d → R^d` by central differences.
pub fn numeric_jacobian(dim: usize, h: f64, mut f: impl FnMut(&[f64]) -> Vec<f64>, at: &[f64]) -> Vec<Vec<f64>> {
    let mut jac = vec![vec![0.0; dim]; dim];
    for j in 0..dim {
        let mut xp = at.to_vec();
        let mut xm = at.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        for i in 0..dim {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// |det| of a small dense matrix by Gaussian elimination with partial pivoting.
pub fn abs_det(mat: &[Vec<f64>]) -> f64 {
    let n = mat.len();
    let mut a: Vec<Vec<f64>> = mat.to_vec();
    let mut det: f64 = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
        }
        det *= a[col][col];
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
        }
    }
    det.abs()
}

/// Direct-summation mixture density: log Σ_k w_k · exp(log p_k(x)), computed
/// the naive way (no log-sum-exp) as the brute-force reference.
pub fn naive_mixture_log_prob(log_probs: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = log_probs
        .iter()
        .zip(weights)
        .map(|(&lp, &w)| w * lp.exp())
        .sum();
    total.ln()
}

/// Uniform-grid quadrature of exp(log_density) over [lo, hi]^2.
pub fn grid_integral_2d(
    lo: f64,
    hi: f64,
    steps: usize,
    mut log_density: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let cell = (hi - lo) / steps as f64;
    let mut total = 0.0;
    for i in 0..steps {
        let x = lo + (i as f64 + 0.5) * cell;
        for j in 0..steps {
            let y = lo + (j as f64 + 0.5) * cell;
            total += log_density(&[x, y]).exp();
        }
    }
    total * cell * cell
}

/// Uniform-grid quadrature over [lo, hi] in one dimension.
pub fn grid_integral_1d(lo: f64, hi: f64, steps: usize, mut log_density: impl FnMut(f64) -> f64) -> f64 {
    let cell = (hi - lo) / steps as f64;
    (0..steps)
        .map(|i| log_density(lo + (i as f64 + 0.5) * cell).exp())
        .sum::<f64>()
        * cell
}
