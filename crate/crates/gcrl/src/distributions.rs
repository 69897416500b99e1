//! Diagonal Gaussians and Gaussian mixtures: log-densities, reparametrized
//! sampling, and mixture composition p(s) = Σ_e p(s|e) p(e).
//!
//! Two code paths cover the same math: plain f64 functions for evaluation
//! and oracle checks, and graph ops (suffix `_g`) for anything that needs
//! gradients. KL terms are always estimated by Monte Carlo (log q − log p at
//! posterior samples); the flow-transformed priors have no closed form, and
//! one code path serves both prior families.

use crate::error::{GcrlError, Result};
use crate::flows::FlowStack;
use crate::numgrad::graph::{GraphBuild, TensorId};
use crate::numgrad::params::ParamStore;
use crate::numgrad::rng::{standard_normal_vec, RunRng};
use rand::Rng;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const LN_2PI: f64 = 1.8378770664093453;

/// Mean + log-variance vector; the parametric form of every posterior and
/// decoder output. Log-variances are clamped to [−10, 10] at construction to
/// keep variances away from collapse/explosion.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(GcrlError::Shape(format!(
                "gaussian mu dim {} vs log_var dim {}",
                mu.len(),
                log_var.len()
            )));
        }
        if mu.iter().chain(log_var.iter()).any(|v| !v.is_finite()) {
            return Err(GcrlError::NonFinite {
                term: "gaussian parameters".into(),
            });
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mu, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }
}

/// Σ_i [−½ ln 2π − ½ log_var_i − (x_i − mu_i)² / (2 exp(log_var_i))].
pub fn gaussian_log_prob(x: &[f64], g: &DiagGaussian) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(GcrlError::Shape(format!(
            "log_prob point dim {} vs gaussian dim {}",
            x.len(),
            g.dim()
        )));
    }
    let mut lp = 0.0;
    for i in 0..x.len() {
        let d = x[i] - g.mu[i];
        lp += -0.5 * LN_2PI - 0.5 * g.log_var[i] - d * d / (2.0 * g.log_var[i].exp());
    }
    Ok(lp)
}

/// mu + exp(log_var/2) ⊙ eps.
pub fn reparam_sample(g: &DiagGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != g.dim() {
        return Err(GcrlError::Shape(format!(
            "reparam eps dim {} vs gaussian dim {}",
            eps.len(),
            g.dim()
        )));
    }
    Ok((0..g.dim())
        .map(|i| g.mu[i] + (0.5 * g.log_var[i]).exp() * eps[i])
        .collect())
}

/// Standard-normal log-density of a point.
pub fn standard_normal_log_prob(x: &[f64]) -> f64 {
    x.iter().map(|&v| -0.5 * LN_2PI - 0.5 * v * v).sum()
}

// ── mixtures ────────────────────────────────────────────────────────────

/// One mixture component: a diagonal Gaussian or a flow-transformed base.
#[derive(Debug, Clone)]
pub enum MixtureComponent {
    Gaussian(DiagGaussian),
    Flow(FlowStack),
}

impl MixtureComponent {
    pub fn log_prob(&self, x: &[f64], store: &ParamStore) -> Result<f64> {
        match self {
            MixtureComponent::Gaussian(g) => gaussian_log_prob(x, g),
            MixtureComponent::Flow(f) => f.log_prob_vals(x, store),
        }
    }

    pub fn sample(&self, rng: &mut RunRng, store: &ParamStore) -> Result<Vec<f64>> {
        match self {
            MixtureComponent::Gaussian(g) => {
                let eps = standard_normal_vec(rng, g.dim());
                reparam_sample(g, &eps)
            }
            MixtureComponent::Flow(f) => {
                let u = standard_normal_vec(rng, f.dim());
                Ok(f.forward_vals(&u, store)?.0)
            }
        }
    }
}

/// Mixture weights p(e) plus K component densities p(s|e).
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    weights: Vec<f64>,
    components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn new(weights: Vec<f64>, components: Vec<MixtureComponent>) -> Result<Self> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(GcrlError::Shape(format!(
                "{} weights vs {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(GcrlError::Config(
                "mixture weights must be nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(GcrlError::Config("all-zero mixture weights".into()));
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(GcrlError::Config(format!(
                "mixture weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(Self {
            weights,
            components,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }
}

/// log Σ_k w_k exp(log p_k(x)) via log-sum-exp.
pub fn mixture_log_prob(x: &[f64], m: &MixtureSpec, store: &ParamStore) -> Result<f64> {
    let mut terms = Vec::with_capacity(m.k());
    for (w, comp) in m.weights.iter().zip(&m.components) {
        if *w == 0.0 {
            continue; // ln 0 would poison the LSE
        }
        terms.push(w.ln() + comp.log_prob(x, store)?);
    }
    let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln())
}

/// Draw a component index from the weights, then a point from the component.
pub fn mixture_sample(
    m: &MixtureSpec,
    rng: &mut RunRng,
    store: &ParamStore,
) -> Result<(Vec<f64>, usize)> {
    let idx = sample_index(&m.weights, rng);
    let x = m.components[idx].sample(rng, store)?;
    Ok((x, idx))
}

/// Categorical draw from explicit (normalized) weights.
pub fn sample_index(weights: &[f64], rng: &mut RunRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

// ── graph-mode counterparts ─────────────────────────────────────────────

/// Row-wise Gaussian log-density: x, mu, log_var all (n×d) → (n×1).
pub fn gaussian_log_prob_g(
    b: &mut GraphBuild,
    x: TensorId,
    mu: TensorId,
    log_var: TensorId,
) -> TensorId {
    let d = b.g.shape(x).1;
    let diff = b.g.sub(x, mu);
    let sq = b.g.mul(diff, diff);
    let neg_lv = b.g.mul_const(log_var, -1.0);
    let inv_var = b.g.exp(neg_lv);
    let maha = b.g.mul(sq, inv_var);
    let maha = b.g.row_sum(maha);
    let lv_sum = b.g.row_sum(log_var);
    let quad = b.g.add(maha, lv_sum);
    let quad = b.g.mul_const(quad, -0.5);
    b.g.add_const(quad, -0.5 * LN_2PI * d as f64)
}

/// Row-wise unit-variance Gaussian log-density (log_var ≡ 0), skipping the
/// exp() work of the general path: (n×d) → (n×1).
pub fn unit_gaussian_log_prob_g(b: &mut GraphBuild, x: TensorId, mu: TensorId) -> TensorId {
    let d = b.g.shape(x).1;
    let ssq = b.g.sq_err_row_sum(x, mu);
    let half = b.g.mul_const(ssq, -0.5);
    b.g.add_const(half, -0.5 * LN_2PI * d as f64)
}

/// Row-wise standard-normal log-density: (n×d) → (n×1).
pub fn standard_normal_log_prob_g(b: &mut GraphBuild, x: TensorId) -> TensorId {
    let d = b.g.shape(x).1;
    let sq = b.g.mul(x, x);
    let s = b.g.row_sum(sq);
    let s = b.g.mul_const(s, -0.5);
    b.g.add_const(s, -0.5 * LN_2PI * d as f64)
}

/// Row-wise reparametrized sample: mu + exp(log_var/2) ⊙ eps.
pub fn reparam_sample_g(
    b: &mut GraphBuild,
    mu: TensorId,
    log_var: TensorId,
    eps: TensorId,
) -> TensorId {
    let half_lv = b.g.mul_const(log_var, 0.5);
    let std = b.g.exp(half_lv);
    let scaled = b.g.mul(std, eps);
    b.g.add(mu, scaled)
}

/// Mixture log-density over rows from per-component row densities (each n×1)
/// and log-weights (1×K).
pub fn mixture_log_prob_g(
    b: &mut GraphBuild,
    comp_log_probs: &[TensorId],
    log_weights: TensorId,
) -> TensorId {
    let mat = b.g.concat_cols(comp_log_probs); // n×K
    let shifted = b.g.add_row(mat, log_weights);
    b.g.logsumexp_row(shifted)
}

/// Softmax log-weights from a (1×K) logit tensor.
pub fn log_softmax_g(b: &mut GraphBuild, logits: TensorId) -> TensorId {
    let (r, k) = b.g.shape(logits);
    assert_eq!(r, 1, "log_softmax_g expects a 1×K row");
    let lse = b.g.logsumexp_row(logits); // 1×1
    let ones = b.g.constant(1, k, vec![1.0; k]);
    let lse_k = b.g.matmul(lse, ones); // broadcast to 1×K
    b.g.sub(logits, lse_k)
}

/// Per-agent log-mean-exp over `samples` consecutive rows: (n·S×1) → (n×1).
pub fn log_mean_exp_rows_g(b: &mut GraphBuild, lp: TensorId, samples: usize) -> TensorId {
    let (rows, cols) = b.g.shape(lp);
    assert_eq!(cols, 1, "log_mean_exp_rows_g expects a column");
    assert_eq!(rows % samples, 0, "row count not divisible by sample count");
    let folded = b.g.reshape(lp, rows / samples, samples);
    let lse = b.g.logsumexp_row(folded);
    b.g.add_const(lse, -(samples as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::rng::seed_rng;
    use crate::oracles;
    use approx::assert_abs_diff_eq;

    #[test]
    fn standard_normal_at_origin() {
        let g = DiagGaussian::standard(1);
        let lp = gaussian_log_prob(&[0.0], &g).unwrap();
        assert_abs_diff_eq!(lp, -0.9189385, epsilon = 1e-7);
        let g2 = DiagGaussian::standard(2);
        let lp2 = gaussian_log_prob(&[0.0, 0.0], &g2).unwrap();
        assert_abs_diff_eq!(lp2, 2.0 * lp, epsilon = 1e-12);
    }

    #[test]
    fn density_is_maximal_at_the_mean() {
        let g = DiagGaussian::new(vec![1.3, -0.4], vec![0.7, -0.2]).unwrap();
        let at_mu = gaussian_log_prob(&[1.3, -0.4], &g).unwrap();
        for probe in [[1.31, -0.4], [1.3, -0.41], [1.2, -0.3]] {
            assert!(gaussian_log_prob(&probe, &g).unwrap() < at_mu);
        }
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let g = DiagGaussian::standard(2);
        assert!(gaussian_log_prob(&[0.0], &g).is_err());
        assert!(reparam_sample(&g, &[0.0]).is_err());
    }

    #[test]
    fn log_var_clamped_at_construction() {
        let g = DiagGaussian::new(vec![0.0], vec![37.0]).unwrap();
        assert_eq!(g.log_var(), &[LOG_VAR_MAX]);
    }

    #[test]
    fn reparam_trivial_cases() {
        let g = DiagGaussian::new(vec![2.0, -1.0], vec![0.3, -0.7]).unwrap();
        assert_eq!(reparam_sample(&g, &[0.0, 0.0]).unwrap(), vec![2.0, -1.0]);
        let unit = DiagGaussian::new(vec![2.0, -1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(
            reparam_sample(&unit, &[0.5, 0.25]).unwrap(),
            vec![2.5, -0.75]
        );
    }

    #[test]
    fn reparam_monte_carlo_mean() {
        let g = DiagGaussian::new(vec![0.8, -0.3, 1.1], vec![0.4, -0.6, 0.0]).unwrap();
        let mut rng = seed_rng(11);
        let n = 100_000;
        let mut mean = vec![0.0; 3];
        for _ in 0..n {
            let eps = standard_normal_vec(&mut rng, 3);
            let s = reparam_sample(&g, &eps).unwrap();
            for (m, v) in mean.iter_mut().zip(&s) {
                *m += v / n as f64;
            }
        }
        for i in 0..3 {
            let sigma = (g.log_var()[i] / 2.0_f64).exp();
            let tol = 3.0 * sigma / (n as f64).sqrt();
            assert!(
                (mean[i] - g.mu()[i]).abs() < tol,
                "dim {i}: {} vs {}",
                mean[i],
                g.mu()[i]
            );
        }
    }

    fn gaussian_mixture(weights: Vec<f64>, comps: Vec<DiagGaussian>) -> MixtureSpec {
        MixtureSpec::new(
            weights,
            comps.into_iter().map(MixtureComponent::Gaussian).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_component_mixture_degenerates() {
        let store = ParamStore::new();
        let g = DiagGaussian::new(vec![0.5], vec![0.2]).unwrap();
        let m = gaussian_mixture(vec![1.0], vec![g.clone()]);
        let x = [0.9];
        assert_abs_diff_eq!(
            mixture_log_prob(&x, &m, &store).unwrap(),
            gaussian_log_prob(&x, &g).unwrap(),
            epsilon = 1e-14
        );
        let mut rng = seed_rng(3);
        for _ in 0..100 {
            assert_eq!(mixture_sample(&m, &mut rng, &store).unwrap().1, 0);
        }
    }

    #[test]
    fn identical_components_collapse() {
        let store = ParamStore::new();
        let g = DiagGaussian::new(vec![0.1, -0.2], vec![0.0, 0.3]).unwrap();
        let m = gaussian_mixture(vec![0.5, 0.5], vec![g.clone(), g.clone()]);
        let x = [0.4, 0.1];
        assert_abs_diff_eq!(
            mixture_log_prob(&x, &m, &store).unwrap(),
            gaussian_log_prob(&x, &g).unwrap(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn mixture_matches_brute_force() {
        let store = ParamStore::new();
        let mut rng = seed_rng(17);
        let k = 5;
        let dim = 3;
        let comps: Vec<DiagGaussian> = (0..k)
            .map(|_| {
                DiagGaussian::new(
                    crate::numgrad::rng::normal_vec(&mut rng, dim, 1.5),
                    crate::numgrad::rng::normal_vec(&mut rng, dim, 0.5),
                )
                .unwrap()
            })
            .collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.1).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let m = gaussian_mixture(weights.clone(), comps.clone());

        for _ in 0..1000 {
            let x = crate::numgrad::rng::normal_vec(&mut rng, dim, 2.0);
            let lse = mixture_log_prob(&x, &m, &store).unwrap();
            let lps: Vec<f64> = comps
                .iter()
                .map(|c| gaussian_log_prob(&x, c).unwrap())
                .collect();
            let naive = oracles::naive_mixture_log_prob(&lps, &weights);
            assert_abs_diff_eq!(lse, naive, epsilon = 1e-12);
        }
    }

    #[test]
    fn lse_dominates_every_weighted_component() {
        let store = ParamStore::new();
        let mut rng = seed_rng(41);
        let comps: Vec<DiagGaussian> = (0..4)
            .map(|_| {
                DiagGaussian::new(
                    crate::numgrad::rng::normal_vec(&mut rng, 2, 1.0),
                    crate::numgrad::rng::normal_vec(&mut rng, 2, 0.3),
                )
                .unwrap()
            })
            .collect();
        let weights = vec![0.4, 0.3, 0.2, 0.1];
        let m = gaussian_mixture(weights.clone(), comps.clone());
        for _ in 0..200 {
            let x = crate::numgrad::rng::normal_vec(&mut rng, 2, 1.5);
            let lse = mixture_log_prob(&x, &m, &store).unwrap();
            for (k, c) in comps.iter().enumerate() {
                let lower = gaussian_log_prob(&x, c).unwrap() + weights[k].ln();
                assert!(lse >= lower - 1e-12, "component {k} exceeds mixture");
            }
        }
    }

    #[test]
    fn zero_weight_component_never_drawn() {
        let store = ParamStore::new();
        let m = gaussian_mixture(
            vec![1.0, 0.0],
            vec![DiagGaussian::standard(1), DiagGaussian::standard(1)],
        );
        let mut rng = seed_rng(5);
        for _ in 0..10_000 {
            assert_eq!(mixture_sample(&m, &mut rng, &store).unwrap().1, 0);
        }
    }

    #[test]
    fn component_frequencies_match_weights() {
        let store = ParamStore::new();
        let weights = vec![0.5, 0.2, 0.15, 0.1, 0.05];
        let comps = vec![DiagGaussian::standard(1); 5];
        let m = gaussian_mixture(weights.clone(), comps);
        let mut rng = seed_rng(23);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[mixture_sample(&m, &mut rng, &store).unwrap().1] += 1;
        }
        let tol = 4.0 / (n as f64).sqrt();
        for (k, &w) in weights.iter().enumerate() {
            let freq = counts[k] as f64 / n as f64;
            assert!((freq - w).abs() < tol, "component {k}: {freq} vs {w}");
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        let comps = vec![
            MixtureComponent::Gaussian(DiagGaussian::standard(1)),
            MixtureComponent::Gaussian(DiagGaussian::standard(1)),
        ];
        let two = |c: &Vec<MixtureComponent>| -> Vec<MixtureComponent> { c.clone() };
        assert!(MixtureSpec::new(vec![0.0, 0.0], two(&comps)).is_err());
        assert!(MixtureSpec::new(vec![0.7, 0.7], two(&comps)).is_err());
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        // 6σ box quadrature within 2% for d ≤ 2.
        let g1 = DiagGaussian::new(vec![0.3], vec![0.5]).unwrap();
        let s1 = (0.5f64 / 2.0).exp();
        let i1 = oracles::grid_integral_1d(0.3 - 6.0 * s1, 0.3 + 6.0 * s1, 2000, |x| {
            gaussian_log_prob(&[x], &g1).unwrap()
        });
        assert!((i1 - 1.0).abs() < 0.02, "1-d integral {i1}");

        let g2 = DiagGaussian::new(vec![0.0, -0.5], vec![0.2, -0.3]).unwrap();
        let smax = (0.2f64 / 2.0).exp();
        let i2 = oracles::grid_integral_2d(-6.0 * smax - 0.5, 6.0 * smax + 0.5, 400, |p| {
            gaussian_log_prob(p, &g2).unwrap()
        });
        assert!((i2 - 1.0).abs() < 0.02, "2-d integral {i2}");
    }

    #[test]
    fn graph_mode_matches_value_mode() {
        let mut rng = seed_rng(31);
        let store = ParamStore::new();
        let mut b = GraphBuild::new(&store);
        let d = 4;
        let n = 7;
        let xv = crate::numgrad::rng::normal_vec(&mut rng, n * d, 1.0);
        let muv = crate::numgrad::rng::normal_vec(&mut rng, n * d, 0.8);
        let lvv = crate::numgrad::rng::normal_vec(&mut rng, n * d, 0.4);
        let x = b.g.constant(n, d, xv.clone());
        let mu = b.g.constant(n, d, muv.clone());
        let lv = b.g.constant(n, d, lvv.clone());
        let lp = gaussian_log_prob_g(&mut b, x, mu, lv);
        for i in 0..n {
            let g = DiagGaussian::new(
                muv[i * d..(i + 1) * d].to_vec(),
                lvv[i * d..(i + 1) * d].to_vec(),
            )
            .unwrap();
            let want = gaussian_log_prob(&xv[i * d..(i + 1) * d], &g).unwrap();
            assert_abs_diff_eq!(b.g.vals(lp)[i], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_mean_exp_shift_property() {
        let store = ParamStore::new();
        let mut b = GraphBuild::new(&store);
        let lp = b.g.constant(6, 1, vec![-1.0, -2.0, -0.5, -3.0, -1.5, -2.5]);
        let lme = log_mean_exp_rows_g(&mut b, lp, 3);
        let c = 0.37;
        let shifted = b.g.add_const(lp, c);
        let lme2 = log_mean_exp_rows_g(&mut b, shifted, 3);
        for i in 0..2 {
            assert_abs_diff_eq!(b.g.vals(lme2)[i], b.g.vals(lme)[i] + c, epsilon = 1e-12);
        }
    }
}
