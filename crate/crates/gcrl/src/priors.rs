//! Latent-prior strategies behind a common trait, selected by name at
//! runtime (`prior=flow` | `prior=gaussian` in the config).
//!
//! `flow` is the default coupling-stack prior; `gaussian` replaces each flow
//! with a learnable mean/log-variance pair, which is the "no coupling
//! layers" ablation. [`MixturePrior`] composes K of either kind with
//! softmax-normalized weights to realize p(s) = Σ_e p(s|e) p(e).

use crate::distributions::{
    gaussian_log_prob, gaussian_log_prob_g, log_softmax_g, mixture_log_prob_g, sample_index,
    DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::error::{GcrlError, Result};
use crate::flows::FlowStack;
use crate::numgrad::graph::{GraphBuild, TensorId};
use crate::numgrad::params::{Branch, ParamStore, SlotId};
use crate::numgrad::rng::{normal_vec, standard_normal_vec, RunRng};

/// A trainable density over a latent space.
pub trait LatentPrior: Send + Sync {
    fn dim(&self) -> usize;

    /// Registry name of the strategy that built this prior.
    fn kind(&self) -> &'static str;

    /// Row densities with gradients: (n×d) → (n×1).
    fn log_prob_g(&self, b: &mut GraphBuild, x: TensorId) -> TensorId;

    fn log_prob_vals(&self, x: &[f64], store: &ParamStore) -> Result<f64>;

    fn sample_vals(&self, rng: &mut RunRng, store: &ParamStore) -> Result<Vec<f64>>;

    fn slots(&self) -> Vec<SlotId>;
}

/// Coupling-stack prior over a standard-normal base.
pub struct FlowPrior {
    stack: FlowStack,
}

impl LatentPrior for FlowPrior {
    fn dim(&self) -> usize {
        self.stack.dim()
    }

    fn kind(&self) -> &'static str {
        "flow"
    }

    fn log_prob_g(&self, b: &mut GraphBuild, x: TensorId) -> TensorId {
        self.stack.log_prob_g(b, x)
    }

    fn log_prob_vals(&self, x: &[f64], store: &ParamStore) -> Result<f64> {
        self.stack.log_prob_vals(x, store)
    }

    fn sample_vals(&self, rng: &mut RunRng, store: &ParamStore) -> Result<Vec<f64>> {
        let u = standard_normal_vec(rng, self.stack.dim());
        Ok(self.stack.forward_vals(&u, store)?.0)
    }

    fn slots(&self) -> Vec<SlotId> {
        self.stack.slots()
    }
}

/// Learnable diagonal Gaussian ("no coupling layers" ablation).
pub struct GaussianPrior {
    dim: usize,
    mu: SlotId,
    log_var: SlotId,
}

impl GaussianPrior {
    fn as_gaussian(&self, store: &ParamStore) -> Result<DiagGaussian> {
        DiagGaussian::new(
            store.values(self.mu).to_vec(),
            store.values(self.log_var).to_vec(),
        )
    }
}

impl LatentPrior for GaussianPrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> &'static str {
        "gaussian"
    }

    fn log_prob_g(&self, b: &mut GraphBuild, x: TensorId) -> TensorId {
        let n = b.g.shape(x).0;
        let mu = b.param(self.mu);
        let lv = b.param(self.log_var);
        let lv = b.g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        let ones = b.g.constant(n, 1, vec![1.0; n]);
        let mu_n = b.g.matmul(ones, mu);
        let lv_n = b.g.matmul(ones, lv);
        gaussian_log_prob_g(b, x, mu_n, lv_n)
    }

    fn log_prob_vals(&self, x: &[f64], store: &ParamStore) -> Result<f64> {
        gaussian_log_prob(x, &self.as_gaussian(store)?)
    }

    fn sample_vals(&self, rng: &mut RunRng, store: &ParamStore) -> Result<Vec<f64>> {
        let eps = standard_normal_vec(rng, self.dim);
        crate::distributions::reparam_sample(&self.as_gaussian(store)?, &eps)
    }

    fn slots(&self) -> Vec<SlotId> {
        vec![self.mu, self.log_var]
    }
}

/// Structural knobs shared by all prior strategies.
#[derive(Debug, Clone, Copy)]
pub struct PriorConfig {
    pub dim: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
}

type Builder =
    fn(&PriorConfig, &mut ParamStore, &str, &mut RunRng, Branch) -> Result<Box<dyn LatentPrior>>;

pub struct PriorSpec {
    pub name: &'static str,
    builder: Builder,
}

fn build_flow(
    cfg: &PriorConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut RunRng,
    branch: Branch,
) -> Result<Box<dyn LatentPrior>> {
    let stack = FlowStack::new(
        store,
        prefix,
        cfg.dim,
        cfg.flow_layers,
        cfg.flow_hidden,
        rng,
        branch,
    )?;
    Ok(Box::new(FlowPrior { stack }))
}

fn build_gaussian(
    cfg: &PriorConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut RunRng,
    branch: Branch,
) -> Result<Box<dyn LatentPrior>> {
    // Small random means keep sibling mixture components from starting (and
    // therefore staying) identical.
    let mu = store.add(
        format!("{prefix}.mu"),
        1,
        cfg.dim,
        normal_vec(rng, cfg.dim, 0.1),
        branch,
    );
    let log_var = store.add(
        format!("{prefix}.log_var"),
        1,
        cfg.dim,
        vec![0.0; cfg.dim],
        branch,
    );
    Ok(Box::new(GaussianPrior {
        dim: cfg.dim,
        mu,
        log_var,
    }))
}

const REGISTRY: &[PriorSpec] = &[
    PriorSpec {
        name: "flow",
        builder: build_flow,
    },
    PriorSpec {
        name: "gaussian",
        builder: build_gaussian,
    },
];

pub fn registry() -> &'static [PriorSpec] {
    REGISTRY
}

pub fn available() -> Vec<&'static str> {
    REGISTRY.iter().map(|s| s.name).collect()
}

/// Builds the named prior strategy; unknown names list the registry.
pub fn build_prior(
    kind: &str,
    cfg: &PriorConfig,
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut RunRng,
    branch: Branch,
) -> Result<Box<dyn LatentPrior>> {
    let spec = REGISTRY
        .iter()
        .find(|s| s.name == kind)
        .ok_or_else(|| {
            GcrlError::Config(format!(
                "unknown prior `{kind}`; available: {}",
                available().join(", ")
            ))
        })?;
    (spec.builder)(cfg, store, prefix, rng, branch)
}

/// K priors of one strategy plus softmax-normalized mixture weights p(e).
pub struct MixturePrior {
    dim: usize,
    components: Vec<Box<dyn LatentPrior>>,
    logits: SlotId,
}

impl MixturePrior {
    pub fn new(
        kind: &str,
        k: usize,
        cfg: &PriorConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut RunRng,
        branch: Branch,
    ) -> Result<Self> {
        if k == 0 {
            return Err(GcrlError::Config("mixture needs at least one component".into()));
        }
        let components = (0..k)
            .map(|i| build_prior(kind, cfg, store, &format!("{prefix}.comp{i}"), rng, branch))
            .collect::<Result<Vec<_>>>()?;
        // zero logits = uniform p(e)
        let logits = store.add(format!("{prefix}.weights"), 1, k, vec![0.0; k], branch);
        Ok(Self {
            dim: cfg.dim,
            components,
            logits,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn logits_slot(&self) -> SlotId {
        self.logits
    }

    pub fn components(&self) -> &[Box<dyn LatentPrior>] {
        &self.components
    }

    /// Normalized mixture weights from the current logits.
    pub fn weights(&self, store: &ParamStore) -> Vec<f64> {
        let logits = store.values(self.logits);
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Row densities with gradients: (n×d) → (n×1).
    pub fn log_prob_g(&self, b: &mut GraphBuild, x: TensorId) -> TensorId {
        let comp_lps: Vec<TensorId> = self
            .components
            .iter()
            .map(|c| c.log_prob_g(b, x))
            .collect();
        let logits = b.param(self.logits);
        let log_w = log_softmax_g(b, logits);
        mixture_log_prob_g(b, &comp_lps, log_w)
    }

    pub fn log_prob_vals(&self, x: &[f64], store: &ParamStore) -> Result<f64> {
        let weights = self.weights(store);
        let mut terms = Vec::with_capacity(self.k());
        for (w, comp) in weights.iter().zip(&self.components) {
            if *w > 0.0 {
                terms.push(w.ln() + comp.log_prob_vals(x, store)?);
            }
        }
        let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln())
    }

    /// Ancestral draw: e ~ p(e), then s ~ p(s|e).
    pub fn sample_vals(
        &self,
        rng: &mut RunRng,
        store: &ParamStore,
    ) -> Result<(Vec<f64>, usize)> {
        let weights = self.weights(store);
        let idx = sample_index(&weights, rng);
        Ok((self.components[idx].sample_vals(rng, store)?, idx))
    }

    /// All slots including the weight logits.
    pub fn slots(&self) -> Vec<SlotId> {
        let mut out: Vec<SlotId> = self
            .components
            .iter()
            .flat_map(|c| c.slots())
            .collect();
        out.push(self.logits);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::rng::seed_rng;
    use approx::assert_abs_diff_eq;

    fn cfg(dim: usize) -> PriorConfig {
        PriorConfig {
            dim,
            flow_layers: 3,
            flow_hidden: 8,
        }
    }

    #[test]
    fn registry_lists_both_strategies() {
        assert_eq!(available(), vec!["flow", "gaussian"]);
    }

    #[test]
    fn unknown_prior_is_a_config_error() {
        let mut store = ParamStore::new();
        let mut rng = seed_rng(1);
        let err = build_prior(
            "spline",
            &cfg(2),
            &mut store,
            "p",
            &mut rng,
            Branch::Adaptable,
        );
        assert!(matches!(err, Err(GcrlError::Config(_))));
    }

    #[test]
    fn both_strategies_report_their_kind() {
        let mut store = ParamStore::new();
        let mut rng = seed_rng(2);
        for name in available() {
            let p = build_prior(
                name,
                &cfg(2),
                &mut store,
                &format!("p.{name}"),
                &mut rng,
                Branch::Adaptable,
            )
            .unwrap();
            assert_eq!(p.kind(), name);
            assert_eq!(p.dim(), 2);
        }
    }

    #[test]
    fn gaussian_prior_graph_matches_value_mode() {
        let mut store = ParamStore::new();
        let mut rng = seed_rng(3);
        let p = build_prior(
            "gaussian",
            &cfg(3),
            &mut store,
            "p",
            &mut rng,
            Branch::Adaptable,
        )
        .unwrap();
        let pts = crate::numgrad::rng::normal_vec(&mut rng, 12, 1.0);
        let mut b = GraphBuild::new(&store);
        let x = b.g.constant(4, 3, pts.clone());
        let lp = p.log_prob_g(&mut b, x);
        for i in 0..4 {
            let want = p.log_prob_vals(&pts[i * 3..(i + 1) * 3], &store).unwrap();
            assert_abs_diff_eq!(b.g.vals(lp)[i], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn mixture_prior_uniform_weights_at_init() {
        let mut store = ParamStore::new();
        let mut rng = seed_rng(4);
        let m = MixturePrior::new(
            "flow",
            5,
            &cfg(2),
            &mut store,
            "prior_s",
            &mut rng,
            Branch::Adaptable,
        )
        .unwrap();
        let w = m.weights(&store);
        for wi in &w {
            assert_abs_diff_eq!(*wi, 0.2, epsilon = 1e-15);
        }
        let sum: f64 = w.iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mixture_graph_matches_value_mode() {
        let mut store = ParamStore::new();
        let mut rng = seed_rng(5);
        let m = MixturePrior::new(
            "gaussian",
            4,
            &cfg(2),
            &mut store,
            "prior_s",
            &mut rng,
            Branch::Adaptable,
        )
        .unwrap();
        // uneven weights
        store.entry_mut(m.logits_slot()).values = vec![0.3, -0.4, 1.0, 0.0];
        let pts = crate::numgrad::rng::normal_vec(&mut rng, 10, 1.2);
        let mut b = GraphBuild::new(&store);
        let x = b.g.constant(5, 2, pts.clone());
        let lp = m.log_prob_g(&mut b, x);
        for i in 0..5 {
            let want = m.log_prob_vals(&pts[i * 2..(i + 1) * 2], &store).unwrap();
            assert_abs_diff_eq!(b.g.vals(lp)[i], want, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_flow_mixture_is_standard_normal() {
        let mut store = ParamStore::new();
        let mut rng = seed_rng(6);
        let m = MixturePrior::new(
            "flow",
            5,
            &cfg(2),
            &mut store,
            "prior_s",
            &mut rng,
            Branch::Adaptable,
        )
        .unwrap();
        let x = [0.4, -1.1];
        assert_abs_diff_eq!(
            m.log_prob_vals(&x, &store).unwrap(),
            crate::distributions::standard_normal_log_prob(&x),
            epsilon = 1e-12
        );
    }
}
