//! Affine coupling-layer stacks: trainable bijections over a standard-normal
//! base, used as the rich priors p(z) and p(s|e_i).
//!
//! Each layer splits dimensions by a binary mask; the masked half passes
//! through unchanged and conditions two 2-layer perceptrons producing scale
//! and shift for the other half. Scale outputs are tanh-bounded to ±2 so the
//! log-determinant stays tame, and the final linear layers start at zero so
//! a fresh stack is exactly the identity (training starts from the simple
//! prior). Consecutive layers use complementary masks.
//!
//! Forward/inverse/log-prob exist in value mode (plain f64, for sampling and
//! oracle checks) and graph mode (for gradients); parity between the two is
//! covered by tests.

use crate::distributions::{standard_normal_log_prob, standard_normal_log_prob_g};
use crate::error::{GcrlError, Result};
use crate::numgrad::graph::{GraphBuild, TensorId};
use crate::numgrad::params::{Branch, ParamStore, SlotId};
use crate::numgrad::rng::{normal_vec, RunRng};

/// Scale outputs are 2·tanh(raw), so |log-scale| ≤ 2 per layer.
pub const SCALE_BOUND: f64 = 2.0;

/// Hidden activation of the coupling nets. Leaky so the nets stay cheap and
/// well-conditioned; the scale output keeps its tanh bound separately.
const HIDDEN_SLOPE: f64 = 0.2;

/// Two-layer perceptron with leaky-ReLU hidden activation.
#[derive(Debug, Clone)]
struct CouplingNet {
    w1: SlotId,
    b1: SlotId,
    w2: SlotId,
    b2: SlotId,
}

impl CouplingNet {
    fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut RunRng,
        branch: Branch,
    ) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let w1 = store.add(
            format!("{name}.w1"),
            dim,
            hidden,
            normal_vec(rng, dim * hidden, std),
            branch,
        );
        let b1 = store.add(format!("{name}.b1"), 1, hidden, vec![0.0; hidden], branch);
        // zero output layer → identity flow at init
        let w2 = store.add(
            format!("{name}.w2"),
            hidden,
            dim,
            vec![0.0; hidden * dim],
            branch,
        );
        let b2 = store.add(format!("{name}.b2"), 1, dim, vec![0.0; dim], branch);
        Self { w1, b1, w2, b2 }
    }

    fn apply_vals(&self, x: &[f64], store: &ParamStore, hidden: usize, dim: usize) -> Vec<f64> {
        let w1 = store.values(self.w1);
        let b1 = store.values(self.b1);
        let w2 = store.values(self.w2);
        let b2 = store.values(self.b2);
        let mut h = vec![0.0; hidden];
        for j in 0..hidden {
            let mut acc = b1[j];
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * w1[i * hidden + j];
            }
            h[j] = if acc > 0.0 { acc } else { HIDDEN_SLOPE * acc };
        }
        let mut out = vec![0.0; dim];
        for j in 0..dim {
            let mut acc = b2[j];
            for (i, &hi) in h.iter().enumerate() {
                acc += hi * w2[i * dim + j];
            }
            out[j] = acc;
        }
        out
    }

    fn apply_g(&self, b: &mut GraphBuild, x: TensorId) -> TensorId {
        let w1 = b.param(self.w1);
        let b1 = b.param(self.b1);
        let w2 = b.param(self.w2);
        let b2 = b.param(self.b2);
        let h = b.g.affine(x, w1, b1);
        let h = b.g.leaky_relu(h, HIDDEN_SLOPE);
        b.g.affine(h, w2, b2)
    }

    fn slots(&self) -> [SlotId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// One affine coupling layer: mask, scale net, shift net.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    mask: Vec<f64>, // 1.0 = pass-through/conditioning dims
    scale: CouplingNet,
    shift: CouplingNet,
    hidden: usize,
}

impl CouplingLayer {
    fn split(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mask).map(|(v, m)| v * m).collect()
    }

    /// Scale (tanh-bounded) and shift for the transformed dims.
    fn nets_vals(&self, x_masked: &[f64], store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        let dim = self.mask.len();
        let raw_s = self.scale.apply_vals(x_masked, store, self.hidden, dim);
        let s = raw_s.iter().map(|v| SCALE_BOUND * v.tanh()).collect();
        let t = self.shift.apply_vals(x_masked, store, self.hidden, dim);
        (s, t)
    }

    fn forward_vals(&self, x: &[f64], store: &ParamStore) -> (Vec<f64>, f64) {
        let xm = self.split(x);
        let (s, t) = self.nets_vals(&xm, store);
        let mut out = vec![0.0; x.len()];
        let mut log_det = 0.0;
        for i in 0..x.len() {
            if self.mask[i] == 1.0 {
                out[i] = x[i];
            } else {
                out[i] = x[i] * s[i].exp() + t[i];
                log_det += s[i];
            }
        }
        (out, log_det)
    }

    fn inverse_vals(&self, y: &[f64], store: &ParamStore) -> (Vec<f64>, f64) {
        let ym = self.split(y); // masked dims are untouched by forward
        let (s, t) = self.nets_vals(&ym, store);
        let mut out = vec![0.0; y.len()];
        let mut log_det = 0.0;
        for i in 0..y.len() {
            if self.mask[i] == 1.0 {
                out[i] = y[i];
            } else {
                out[i] = (y[i] - t[i]) * (-s[i]).exp();
                log_det -= s[i];
            }
        }
        (out, log_det)
    }

    fn nets_g(&self, b: &mut GraphBuild, xm: TensorId) -> (TensorId, TensorId) {
        let raw_s = self.scale.apply_g(b, xm);
        let bounded = b.g.tanh(raw_s);
        let s = b.g.mul_const(bounded, SCALE_BOUND);
        let t = self.shift.apply_g(b, xm);
        (s, t)
    }

    fn forward_g(&self, b: &mut GraphBuild, x: TensorId) -> (TensorId, TensorId) {
        let dim = self.mask.len();
        let mask = b.g.constant(1, dim, self.mask.clone());
        let inv_mask: Vec<f64> = self.mask.iter().map(|m| 1.0 - m).collect();
        let inv_mask = b.g.constant(1, dim, inv_mask);
        let xm = b.g.mul_row(x, mask);
        let (s, t) = self.nets_g(b, xm);
        let s = b.g.mul_row(s, inv_mask); // zero on pass-through dims
        let es = b.g.exp(s);
        let scaled = b.g.mul(x, es);
        let shifted = b.g.add(scaled, t);
        let trans = b.g.mul_row(shifted, inv_mask);
        let y = b.g.add(xm, trans);
        let log_det = b.g.row_sum(s);
        (y, log_det)
    }

    fn inverse_g(&self, b: &mut GraphBuild, y: TensorId) -> (TensorId, TensorId) {
        let dim = self.mask.len();
        let mask = b.g.constant(1, dim, self.mask.clone());
        let inv_mask: Vec<f64> = self.mask.iter().map(|m| 1.0 - m).collect();
        let inv_mask = b.g.constant(1, dim, inv_mask);
        let ym = b.g.mul_row(y, mask);
        let (s, t) = self.nets_g(b, ym);
        let s = b.g.mul_row(s, inv_mask);
        let shifted = b.g.sub(y, t);
        let neg_s = b.g.mul_const(s, -1.0);
        let es = b.g.exp(neg_s);
        let scaled = b.g.mul(shifted, es);
        let trans = b.g.mul_row(scaled, inv_mask);
        let x = b.g.add(ym, trans);
        let neg = b.g.row_sum(s);
        let log_det = b.g.mul_const(neg, -1.0);
        (x, log_det)
    }
}

/// Ordered coupling layers with alternating masks over a standard-normal base.
#[derive(Debug, Clone)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<CouplingLayer>,
}

impl FlowStack {
    /// Builds an identity-initialized stack; parameters are registered under
    /// `prefix` in the store. `dim` must be ≥ 2 so every mask has both a
    /// conditioning and a transformed part.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        n_layers: usize,
        hidden: usize,
        rng: &mut RunRng,
        branch: Branch,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(GcrlError::Config(format!(
                "coupling flows need dim ≥ 2, got {dim}"
            )));
        }
        if n_layers == 0 || hidden == 0 {
            return Err(GcrlError::Config(
                "flow needs at least one layer and a nonzero hidden width".into(),
            ));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let mask: Vec<f64> = (0..dim)
                    .map(|i| if (i + l) % 2 == 0 { 1.0 } else { 0.0 })
                    .collect();
                debug_assert!(mask.iter().any(|&m| m == 1.0) && mask.iter().any(|&m| m == 0.0));
                let scale = CouplingNet::new(
                    store,
                    &format!("{prefix}.layer{l}.scale"),
                    dim,
                    hidden,
                    rng,
                    branch,
                );
                let shift = CouplingNet::new(
                    store,
                    &format!("{prefix}.layer{l}.shift"),
                    dim,
                    hidden,
                    rng,
                    branch,
                );
                CouplingLayer {
                    mask,
                    scale,
                    shift,
                    hidden,
                }
            })
            .collect();
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn slots(&self) -> Vec<SlotId> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.scale
                    .slots()
                    .into_iter()
                    .chain(l.shift.slots())
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(GcrlError::Shape(format!(
                "flow dim {} vs point dim {}",
                self.dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Base → data direction; returns (x, log|det ∂x/∂u|).
    pub fn forward_vals(&self, u: &[f64], store: &ParamStore) -> Result<(Vec<f64>, f64)> {
        self.check_dim(u)?;
        let mut x = u.to_vec();
        let mut log_det = 0.0;
        for layer in &self.layers {
            let (next, ld) = layer.forward_vals(&x, store);
            x = next;
            log_det += ld;
        }
        if x.iter().any(|v| !v.is_finite()) || !log_det.is_finite() {
            return Err(GcrlError::NonFinite {
                term: "flow forward".into(),
            });
        }
        Ok((x, log_det))
    }

    /// Data → base direction; log_det is the negative of forward's at the
    /// same point.
    pub fn inverse_vals(&self, x: &[f64], store: &ParamStore) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let mut u = x.to_vec();
        let mut log_det = 0.0;
        for layer in self.layers.iter().rev() {
            let (next, ld) = layer.inverse_vals(&u, store);
            u = next;
            log_det += ld;
        }
        if u.iter().any(|v| !v.is_finite()) || !log_det.is_finite() {
            return Err(GcrlError::NonFinite {
                term: "flow inverse".into(),
            });
        }
        Ok((u, log_det))
    }

    /// Change-of-variables density: log N(inverse(x)) + inverse log-det.
    pub fn log_prob_vals(&self, x: &[f64], store: &ParamStore) -> Result<f64> {
        let (u, log_det) = self.inverse_vals(x, store)?;
        Ok(standard_normal_log_prob(&u) + log_det)
    }

    /// Graph-mode forward over row-batched points (n×d).
    pub fn forward_g(&self, b: &mut GraphBuild, u: TensorId) -> (TensorId, TensorId) {
        assert_eq!(b.g.shape(u).1, self.dim, "flow dim mismatch");
        let mut x = u;
        let mut log_det: Option<TensorId> = None;
        for layer in &self.layers {
            let (next, ld) = layer.forward_g(b, x);
            x = next;
            log_det = Some(match log_det {
                None => ld,
                Some(acc) => b.g.add(acc, ld),
            });
        }
        (x, log_det.expect("at least one layer"))
    }

    /// Graph-mode inverse over row-batched points (n×d).
    pub fn inverse_g(&self, b: &mut GraphBuild, x: TensorId) -> (TensorId, TensorId) {
        assert_eq!(b.g.shape(x).1, self.dim, "flow dim mismatch");
        let mut u = x;
        let mut log_det: Option<TensorId> = None;
        for layer in self.layers.iter().rev() {
            let (next, ld) = layer.inverse_g(b, u);
            u = next;
            log_det = Some(match log_det {
                None => ld,
                Some(acc) => b.g.add(acc, ld),
            });
        }
        (u, log_det.expect("at least one layer"))
    }

    /// Graph-mode row densities: (n×d) → (n×1).
    pub fn log_prob_g(&self, b: &mut GraphBuild, x: TensorId) -> TensorId {
        let (u, log_det) = self.inverse_g(b, x);
        let base = standard_normal_log_prob_g(b, u);
        b.g.add(base, log_det)
    }
}
