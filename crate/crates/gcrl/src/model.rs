//! The GCRL network: recurrent sequence encoder over per-step inputs, mean
//! social pooling, posterior heads q(s|x) and q(z|x), trajectory decoder
//! p(y|x,s,z), reconstructor p(x|s,z), a flow prior over z, and a
//! mixture-of-flows prior over s.
//!
//! Parameters are partitioned exactly and disjointly: the z-branch is
//! {head_z, prior_z}; everything else (encoder, pooling-free GRU, head_s,
//! prior_s, decoder, reconstructor) forms the adaptable set that domain
//! adaptation may fine-tune. The decoder and reconstructor use leaky-ReLU
//! activations only, so the latents-to-means map is piecewise affine.

use std::collections::BTreeSet;
use std::rc::Rc;

use crate::dataio::Scene;
use crate::distributions::{
    gaussian_log_prob_g, reparam_sample_g, DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::error::{GcrlError, Result};
use crate::numgrad::graph::{GraphBuild, TensorId};
use crate::numgrad::params::{Branch, ParamStore, SlotId};
use crate::numgrad::rng::{normal_vec, standard_normal_vec, RunRng};
use crate::priors::{build_prior, LatentPrior, MixturePrior, PriorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordMode {
    /// Encoder consumes per-step displacements, reconstruction targets are
    /// positions relative to the start; translation invariant.
    Relative,
    /// Encoder consumes raw positions (canonical-frame synthetic data).
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Both,
    /// Decoder/reconstructor see only s; z input is zeroed.
    SOnly,
    /// Decoder/reconstructor see only z; s input is zeroed.
    ZOnly,
}

impl LatentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LatentMode::Both => "both",
            LatentMode::SOnly => "s-only",
            LatentMode::ZOnly => "z-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(LatentMode::Both),
            "s-only" | "s_only" => Ok(LatentMode::SOnly),
            "z-only" | "z_only" => Ok(LatentMode::ZOnly),
            other => Err(GcrlError::Config(format!("unknown latent mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d_s: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub n_cluster: usize,
    pub enc_in: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub dec_hidden: usize,
    pub rec_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub prior_kind: String,
    pub latent_mode: LatentMode,
    pub coord_mode: CoordMode,
    pub learn_output_var: bool,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// Synthetic-benchmark defaults: d_s = d_z = 2, K = 5, H = 32.
    pub fn synthetic() -> Self {
        Self {
            d_s: 2,
            d_z: 2,
            hidden: 32,
            n_cluster: 5,
            enc_in: 2,
            obs_len: crate::dataio::OBS_LEN,
            pred_len: crate::dataio::PRED_LEN,
            dec_hidden: 32,
            rec_hidden: 32,
            flow_layers: 4,
            flow_hidden: 16,
            prior_kind: "flow".into(),
            latent_mode: LatentMode::Both,
            coord_mode: CoordMode::Absolute,
            learn_output_var: false,
            leaky_slope: 0.2,
        }
    }

    /// Real-benchmark defaults: d_s = d_z = 8, K = 5, H = 64, relative input.
    pub fn ethucy() -> Self {
        Self {
            d_s: 8,
            d_z: 8,
            hidden: 64,
            enc_in: 2,
            coord_mode: CoordMode::Relative,
            ..Self::synthetic()
        }
    }
}

// ── building blocks ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: SlotId,
    b: SlotId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut RunRng,
        branch: Branch,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            fan_in,
            fan_out,
            normal_vec(rng, fan_in * fan_out, std),
            branch,
        );
        let b = store.add(format!("{name}.b"), 1, fan_out, vec![0.0; fan_out], branch);
        Self { w, b }
    }

    fn zeroed(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        branch: Branch,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            fan_in,
            fan_out,
            vec![0.0; fan_in * fan_out],
            branch,
        );
        let b = store.add(format!("{name}.b"), 1, fan_out, vec![0.0; fan_out], branch);
        Self { w, b }
    }

    fn apply_g(&self, b: &mut GraphBuild, x: TensorId) -> TensorId {
        let w = b.param(self.w);
        let bias = b.param(self.b);
        b.g.affine(x, w, bias)
    }
}

/// Gated recurrent cell over per-step inputs.
#[derive(Debug, Clone, Copy)]
struct Gru {
    update: Linear,
    reset: Linear,
    cand: Linear,
}

impl Gru {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut RunRng,
        branch: Branch,
    ) -> Self {
        let std = 1.0 / ((in_dim + hidden) as f64).sqrt();
        Self {
            update: Linear::new(store, &format!("{name}.update"), in_dim + hidden, hidden, std, rng, branch),
            reset: Linear::new(store, &format!("{name}.reset"), in_dim + hidden, hidden, std, rng, branch),
            cand: Linear::new(store, &format!("{name}.cand"), in_dim + hidden, hidden, std, rng, branch),
        }
    }

    fn step_g(&self, b: &mut GraphBuild, h: TensorId, x: TensorId) -> TensorId {
        let xh = b.g.concat_cols(&[x, h]);
        let zr = self.update.apply_g(b, xh);
        let z = b.g.sigmoid(zr);
        let rr = self.reset.apply_g(b, xh);
        let r = b.g.sigmoid(rr);
        let rh = b.g.mul(r, h);
        let xrh = b.g.concat_cols(&[x, rh]);
        let nr = self.cand.apply_g(b, xrh);
        let n = b.g.tanh(nr);
        let neg_z = b.g.mul_const(z, -1.0);
        let one_minus_z = b.g.add_const(neg_z, 1.0);
        let a = b.g.mul(one_minus_z, n);
        let keep = b.g.mul(z, h);
        b.g.add(a, keep)
    }

    fn slots(&self) -> Vec<SlotId> {
        vec![
            self.update.w, self.update.b,
            self.reset.w, self.reset.b,
            self.cand.w, self.cand.b,
        ]
    }
}

/// Trajectory decoder with a factored first layer: the encoder context
/// passes through once per agent and is repeated after projection, so the
/// per-sample cost scales with the latent width instead of the full input.
#[derive(Debug, Clone, Copy)]
struct Decoder {
    w_ctx: SlotId,
    w_s: SlotId,
    w_z: SlotId,
    b1: SlotId,
    l2: Linear,
}

impl Decoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        ctx_dim: usize,
        d_s: usize,
        d_z: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut RunRng,
        branch: Branch,
    ) -> Self {
        let std = 1.0 / ((ctx_dim + d_s + d_z) as f64).sqrt();
        let w_ctx = store.add(
            format!("{name}.l1.w_ctx"),
            ctx_dim,
            hidden,
            normal_vec(rng, ctx_dim * hidden, std),
            branch,
        );
        let w_s = store.add(
            format!("{name}.l1.w_s"),
            d_s,
            hidden,
            normal_vec(rng, d_s * hidden, std),
            branch,
        );
        let w_z = store.add(
            format!("{name}.l1.w_z"),
            d_z,
            hidden,
            normal_vec(rng, d_z * hidden, std),
            branch,
        );
        let b1 = store.add(format!("{name}.l1.b"), 1, hidden, vec![0.0; hidden], branch);
        let l2 = Linear::zeroed(store, &format!("{name}.l2"), hidden, fan_out, branch);
        Self {
            w_ctx,
            w_s,
            w_z,
            b1,
            l2,
        }
    }

    fn apply_g(
        &self,
        b: &mut GraphBuild,
        ctx: TensorId,
        s: TensorId,
        z: TensorId,
        n_samples: usize,
        slope: f64,
    ) -> TensorId {
        let w_ctx = b.param(self.w_ctx);
        let w_s = b.param(self.w_s);
        let w_z = b.param(self.w_z);
        let b1 = b.param(self.b1);
        let ctx_proj = b.g.affine(ctx, w_ctx, b1);
        let ctx_rep = b.g.repeat_rows(ctx_proj, n_samples);
        let hs = b.g.matmul(s, w_s);
        let hz = b.g.matmul(z, w_z);
        let pre = b.g.add(ctx_rep, hs);
        let pre = b.g.add(pre, hz);
        let h = b.g.leaky_relu(pre, slope);
        self.l2.apply_g(b, h)
    }

    fn slots(&self) -> Vec<SlotId> {
        vec![self.w_ctx, self.w_s, self.w_z, self.b1, self.l2.w, self.l2.b]
    }
}

/// Two-layer leaky-ReLU perceptron with a zero-initialized output layer.
#[derive(Debug, Clone, Copy)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut RunRng,
        branch: Branch,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), fan_in, hidden, std, rng, branch),
            l2: Linear::zeroed(store, &format!("{name}.l2"), hidden, fan_out, branch),
        }
    }

    fn apply_g(&self, b: &mut GraphBuild, x: TensorId, slope: f64) -> TensorId {
        let h = self.l1.apply_g(b, x);
        let h = b.g.leaky_relu(h, slope);
        self.l2.apply_g(b, h)
    }

    fn slots(&self) -> Vec<SlotId> {
        vec![self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}

// ── batched scene data ──────────────────────────────────────────────────

/// Row-major per-agent arrays for one batch of scenes.
#[derive(Debug, Clone)]
pub struct BatchData {
    pub n_agents: usize,
    pub scene_of: Rc<Vec<usize>>,
    pub env_of: Vec<usize>,
    /// One (n × enc_in) matrix per observed step.
    pub enc_inputs: Vec<Vec<f64>>,
    /// n × (2·obs_len): reconstruction target in the configured frame.
    pub recon_target: Vec<f64>,
    /// n × (2·pred_len): ground-truth future displacements (when present).
    pub future_disp: Option<Vec<f64>>,
    /// n × (2·pred_len): ground-truth future absolute positions.
    pub future_abs: Option<Vec<f64>>,
    pub last_obs: Vec<[f64; 2]>,
}

/// Flattens scenes into row-major batch arrays in the model's frame.
pub fn prepare_batch(scenes: &[Scene], cfg: &ModelConfig) -> Result<BatchData> {
    if scenes.is_empty() {
        return Err(GcrlError::Config("empty scene batch".into()));
    }
    let t_need = cfg.obs_len;
    let t_full = cfg.obs_len + cfg.pred_len;
    let n: usize = scenes.iter().map(|s| s.n_agents()).sum();
    let with_noise = cfg.enc_in == 3;

    let mut scene_of = Vec::with_capacity(n);
    let mut env_of = Vec::with_capacity(scenes.len());
    let mut enc_inputs = vec![vec![0.0; n * cfg.enc_in]; cfg.obs_len];
    let mut recon_target = vec![0.0; n * 2 * cfg.obs_len];
    let mut future_disp = vec![0.0; n * 2 * cfg.pred_len];
    let mut future_abs = vec![0.0; n * 2 * cfg.pred_len];
    let mut last_obs = Vec::with_capacity(n);
    let mut have_future = true;

    let mut row = 0;
    for (si, scene) in scenes.iter().enumerate() {
        env_of.push(scene.env_id);
        for agent in &scene.agents {
            let t_len = agent.pos.len();
            if t_len < t_need {
                return Err(GcrlError::Shape(format!(
                    "scene {si}: agent track of {t_len} steps, need ≥ {t_need} observed"
                )));
            }
            if t_len < t_full {
                have_future = false;
            }
            if with_noise && agent.sigma.is_none() {
                return Err(GcrlError::Config(
                    "model expects a noise channel but the scene has none".into(),
                ));
            }
            for t in 0..cfg.obs_len {
                let base = row * cfg.enc_in;
                let (vx, vy) = match cfg.coord_mode {
                    CoordMode::Relative => {
                        if t == 0 {
                            (0.0, 0.0)
                        } else {
                            (
                                agent.pos[t][0] - agent.pos[t - 1][0],
                                agent.pos[t][1] - agent.pos[t - 1][1],
                            )
                        }
                    }
                    CoordMode::Absolute => (agent.pos[t][0], agent.pos[t][1]),
                };
                enc_inputs[t][base] = vx;
                enc_inputs[t][base + 1] = vy;
                if with_noise {
                    enc_inputs[t][base + 2] = agent.sigma.as_ref().unwrap()[t];
                }
                let (rx, ry) = match cfg.coord_mode {
                    CoordMode::Relative => (
                        agent.pos[t][0] - agent.pos[0][0],
                        agent.pos[t][1] - agent.pos[0][1],
                    ),
                    CoordMode::Absolute => (agent.pos[t][0], agent.pos[t][1]),
                };
                recon_target[row * 2 * cfg.obs_len + 2 * t] = rx;
                recon_target[row * 2 * cfg.obs_len + 2 * t + 1] = ry;
            }
            last_obs.push(agent.pos[cfg.obs_len - 1]);
            if t_len >= t_full {
                for k in 0..cfg.pred_len {
                    let t = cfg.obs_len + k;
                    future_disp[row * 2 * cfg.pred_len + 2 * k] =
                        agent.pos[t][0] - agent.pos[t - 1][0];
                    future_disp[row * 2 * cfg.pred_len + 2 * k + 1] =
                        agent.pos[t][1] - agent.pos[t - 1][1];
                    future_abs[row * 2 * cfg.pred_len + 2 * k] = agent.pos[t][0];
                    future_abs[row * 2 * cfg.pred_len + 2 * k + 1] = agent.pos[t][1];
                }
            }
            scene_of.push(si);
            row += 1;
        }
    }

    Ok(BatchData {
        n_agents: n,
        scene_of: Rc::new(scene_of),
        env_of,
        enc_inputs,
        recon_target,
        future_disp: have_future.then_some(future_disp),
        future_abs: have_future.then_some(future_abs),
        last_obs,
    })
}

// ── the model ───────────────────────────────────────────────────────────

/// Per-agent posterior tensors (graph mode), each (n × d).
pub struct PosteriorsG {
    pub mu_s: TensorId,
    pub lv_s: TensorId,
    pub mu_z: TensorId,
    pub lv_z: TensorId,
}

/// Latent samples plus their posterior log-densities, row-batched over
/// agents × samples.
pub struct LatentsG {
    pub n_samples: usize,
    /// s and z as drawn from the posteriors (for the KL terms).
    pub s: TensorId,
    pub z: TensorId,
    /// What the decoder/reconstructor actually consume (latent-mode masking
    /// and adaptation-time detach applied).
    pub s_dec: TensorId,
    pub z_dec: TensorId,
    pub log_qs: TensorId,
    pub log_qz: TensorId,
}

/// Decoder/reconstructor output as a row-batched diagonal Gaussian.
pub struct GaussianHeadG {
    pub mean: TensorId,
    pub log_var: TensorId,
}

/// How ancestral prediction draws the variant features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SSampleMode {
    /// s ~ q(s|x) (default).
    Posterior,
    /// s ~ p(s): the interventional/backdoor form; this is what lets a
    /// weights-only adapted mixture influence predictions.
    Prior,
}

impl SSampleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "posterior" => Ok(SSampleMode::Posterior),
            "prior" => Ok(SSampleMode::Prior),
            other => Err(GcrlError::Config(format!("unknown s-from mode `{other}`"))),
        }
    }
}

/// One agent's sampled future trajectories in absolute coordinates.
#[derive(Debug, Clone)]
pub struct AgentPrediction {
    pub scene: usize,
    pub trajs: Vec<Vec<[f64; 2]>>,
}

pub struct GcrlModel {
    pub store: ParamStore,
    pub cfg: ModelConfig,
    gru: Gru,
    head_s: Linear,
    head_z: Linear,
    decoder: Decoder,
    reconstructor: Mlp,
    pub prior_z: Box<dyn LatentPrior>,
    pub prior_s: MixturePrior,
}

impl GcrlModel {
    pub fn new(cfg: ModelConfig, rng: &mut RunRng) -> Result<Self> {
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let gru = Gru::new(&mut store, "enc.gru", cfg.enc_in, h, rng, Branch::Adaptable);
        let head_std = 1.0 / ((2 * h) as f64).sqrt();
        let head_s = Linear::new(
            &mut store, "head_s", 2 * h, 2 * cfg.d_s, head_std, rng, Branch::Adaptable,
        );
        let head_z = Linear::new(
            &mut store, "head_z", 2 * h, 2 * cfg.d_z, head_std, rng, Branch::ZBranch,
        );
        // wide posteriors at init: training then anneals them toward the
        // priors, giving the regularization terms their decaying transient
        for (head, d) in [(head_s, cfg.d_s), (head_z, cfg.d_z)] {
            let bias = store.entry_mut(head.b);
            for i in d..2 * d {
                bias.values[i] = 6.0;
            }
        }
        let decoder = Decoder::new(
            &mut store, "decoder", 2 * h, cfg.d_s, cfg.d_z, cfg.dec_hidden,
            4 * cfg.pred_len, rng, Branch::Adaptable,
        );
        let reconstructor = Mlp::new(
            &mut store, "reconstructor", cfg.d_s + cfg.d_z, cfg.rec_hidden, 4 * cfg.obs_len,
            rng, Branch::Adaptable,
        );
        let prior_cfg_z = PriorConfig {
            dim: cfg.d_z,
            flow_layers: cfg.flow_layers,
            flow_hidden: cfg.flow_hidden,
        };
        let prior_z = build_prior(
            &cfg.prior_kind, &prior_cfg_z, &mut store, "prior_z", rng, Branch::ZBranch,
        )?;
        let prior_cfg_s = PriorConfig {
            dim: cfg.d_s,
            ..prior_cfg_z
        };
        let prior_s = MixturePrior::new(
            &cfg.prior_kind, cfg.n_cluster, &prior_cfg_s, &mut store, "prior_s", rng,
            Branch::Adaptable,
        )?;
        let model = Self {
            store,
            cfg,
            gru,
            head_s,
            head_z,
            decoder,
            reconstructor,
            prior_z,
            prior_s,
        };
        model.verify_partition()?;
        Ok(model)
    }

    /// Slots of the frozen-under-adaptation z-branch: {head_z, prior_z}.
    pub fn z_branch_slots(&self) -> Vec<SlotId> {
        let mut v = vec![self.head_z.w, self.head_z.b];
        v.extend(self.prior_z.slots());
        v
    }

    /// Slots of the adaptable set: {encoder, head_s, prior_s, decoder,
    /// reconstructor}.
    pub fn adaptable_slots(&self) -> Vec<SlotId> {
        let mut v = self.gru.slots();
        v.extend([self.head_s.w, self.head_s.b]);
        v.extend(self.prior_s.slots());
        v.extend(self.decoder.slots());
        v.extend(self.reconstructor.slots());
        v
    }

    /// The K mixture-weight logits (the gmm-weights-only adaptation scope).
    pub fn gmm_weight_slot(&self) -> SlotId {
        self.prior_s.logits_slot()
    }

    /// Checks that the declared partition covers every parameter exactly once
    /// and matches the branch tags in the store.
    pub fn verify_partition(&self) -> Result<()> {
        let zb: BTreeSet<SlotId> = self.z_branch_slots().into_iter().collect();
        let ad: BTreeSet<SlotId> = self.adaptable_slots().into_iter().collect();
        if let Some(dup) = zb.intersection(&ad).next() {
            return Err(GcrlError::Partition(format!(
                "slot `{}` in both branches",
                self.store.entry(*dup).name
            )));
        }
        for slot in self.store.slots() {
            let e = self.store.entry(slot);
            let declared = if zb.contains(&slot) {
                Branch::ZBranch
            } else if ad.contains(&slot) {
                Branch::Adaptable
            } else {
                return Err(GcrlError::Partition(format!(
                    "slot `{}` not covered by the partition",
                    e.name
                )));
            };
            if declared != e.branch {
                return Err(GcrlError::Partition(format!(
                    "slot `{}` tagged {:?} but partitioned {:?}",
                    e.name, e.branch, declared
                )));
            }
        }
        Ok(())
    }

    // ── graph-mode forward pieces ───────────────────────────────────────

    /// Encodes observed steps into per-agent [own hidden ∥ co-agent mean]
    /// context rows (n × 2H).
    pub fn encode_g(&self, b: &mut GraphBuild, batch: &BatchData) -> TensorId {
        let n = batch.n_agents;
        let mut h = b.g.zeros(n, self.cfg.hidden);
        for t in 0..self.cfg.obs_len {
            let x = b.g.constant(n, self.cfg.enc_in, batch.enc_inputs[t].clone());
            h = self.gru.step_g(b, h, x);
        }
        let pooled = b.g.group_co_mean(h, batch.scene_of.clone());
        b.g.concat_cols(&[h, pooled])
    }

    /// Posterior heads over encoded context (log-variances clamped).
    pub fn posteriors_g(&self, b: &mut GraphBuild, hc: TensorId) -> PosteriorsG {
        let raw_s = self.head_s.apply_g(b, hc);
        let mu_s = b.g.slice_cols(raw_s, 0, self.cfg.d_s);
        let lv_s_raw = b.g.slice_cols(raw_s, self.cfg.d_s, self.cfg.d_s);
        let lv_s = b.g.clamp(lv_s_raw, LOG_VAR_MIN, LOG_VAR_MAX);
        let raw_z = self.head_z.apply_g(b, hc);
        let mu_z = b.g.slice_cols(raw_z, 0, self.cfg.d_z);
        let lv_z_raw = b.g.slice_cols(raw_z, self.cfg.d_z, self.cfg.d_z);
        let lv_z = b.g.clamp(lv_z_raw, LOG_VAR_MIN, LOG_VAR_MAX);
        PosteriorsG {
            mu_s,
            lv_s,
            mu_z,
            lv_z,
        }
    }

    /// Draws `n_samples` reparametrized latent pairs per agent and evaluates
    /// their posterior log-densities. `detach_z` severs the z-branch (used by
    /// the adaptation loss so z gradients are structurally zero).
    pub fn sample_latents_g(
        &self,
        b: &mut GraphBuild,
        post: &PosteriorsG,
        n_samples: usize,
        rng: &mut RunRng,
        detach_z: bool,
    ) -> LatentsG {
        let n = b.g.shape(post.mu_s).0;
        let rows = n * n_samples;

        let mu_s = b.g.repeat_rows(post.mu_s, n_samples);
        let lv_s = b.g.repeat_rows(post.lv_s, n_samples);
        let eps_s = b.g.constant(rows, self.cfg.d_s, standard_normal_vec(rng, rows * self.cfg.d_s));
        let s = reparam_sample_g(b, mu_s, lv_s, eps_s);
        let log_qs = gaussian_log_prob_g(b, s, mu_s, lv_s);

        let mu_z = b.g.repeat_rows(post.mu_z, n_samples);
        let lv_z = b.g.repeat_rows(post.lv_z, n_samples);
        let eps_z = b.g.constant(rows, self.cfg.d_z, standard_normal_vec(rng, rows * self.cfg.d_z));
        let z_raw = reparam_sample_g(b, mu_z, lv_z, eps_z);
        let (z, log_qz) = if detach_z {
            let zd = b.g.detach(z_raw);
            let mu_zd = b.g.detach(mu_z);
            let lv_zd = b.g.detach(lv_z);
            (zd, gaussian_log_prob_g(b, zd, mu_zd, lv_zd))
        } else {
            (z_raw, gaussian_log_prob_g(b, z_raw, mu_z, lv_z))
        };

        let s_dec = match self.cfg.latent_mode {
            LatentMode::ZOnly => b.g.zeros(rows, self.cfg.d_s),
            _ => s,
        };
        let z_dec = match self.cfg.latent_mode {
            LatentMode::SOnly => b.g.zeros(rows, self.cfg.d_z),
            _ => z,
        };

        LatentsG {
            n_samples,
            s,
            z,
            s_dec,
            z_dec,
            log_qs,
            log_qz,
        }
    }

    /// Decoder p(y|x,s,z): Gaussian over flattened future displacements.
    pub fn decode_g(
        &self,
        b: &mut GraphBuild,
        hc: TensorId,
        lat: &LatentsG,
    ) -> GaussianHeadG {
        let out = self.decoder.apply_g(
            b,
            hc,
            lat.s_dec,
            lat.z_dec,
            lat.n_samples,
            self.cfg.leaky_slope,
        );
        self.split_head(b, out, 2 * self.cfg.pred_len)
    }

    /// Reconstructor p(x|s,z): Gaussian over the observed-window target,
    /// conditioned on the latents only.
    pub fn reconstruct_g(&self, b: &mut GraphBuild, lat: &LatentsG) -> GaussianHeadG {
        let input = b.g.concat_cols(&[lat.s_dec, lat.z_dec]);
        let out = self.reconstructor.apply_g(b, input, self.cfg.leaky_slope);
        self.split_head(b, out, 2 * self.cfg.obs_len)
    }

    fn split_head(&self, b: &mut GraphBuild, out: TensorId, half: usize) -> GaussianHeadG {
        let mean = b.g.slice_cols(out, 0, half);
        let log_var = if self.cfg.learn_output_var {
            let raw = b.g.slice_cols(out, half, half);
            b.g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)
        } else {
            let rows = b.g.shape(out).0;
            b.g.zeros(rows, half)
        };
        GaussianHeadG { mean, log_var }
    }

    /// log p(target | head) per row: (n·S × 1).
    pub fn head_log_prob_g(
        &self,
        b: &mut GraphBuild,
        head: &GaussianHeadG,
        target_rep: TensorId,
    ) -> TensorId {
        if self.cfg.learn_output_var {
            gaussian_log_prob_g(b, target_rep, head.mean, head.log_var)
        } else {
            crate::distributions::unit_gaussian_log_prob_g(b, target_rep, head.mean)
        }
    }

    /// Prior log-densities of the sampled latents: (log p(s), log p(z)).
    pub fn prior_log_probs_g(
        &self,
        b: &mut GraphBuild,
        lat: &LatentsG,
        detach_z: bool,
    ) -> (TensorId, TensorId) {
        let log_ps = self.prior_s.log_prob_g(b, lat.s);
        let log_pz = if detach_z {
            // adaptation: p(z) params must stay untouched; z itself is
            // already detached, evaluate through frozen values only
            let lp = self.prior_z.log_prob_g(b, lat.z);
            b.g.detach(lp)
        } else {
            self.prior_z.log_prob_g(b, lat.z)
        };
        (log_ps, log_pz)
    }

    // ── value-level operations ──────────────────────────────────────────

    /// Per-agent posteriors (q_s, q_z) for a batch of scenes.
    pub fn infer_posteriors(&self, scenes: &[Scene]) -> Result<Vec<(DiagGaussian, DiagGaussian)>> {
        let batch = prepare_batch(scenes, &self.cfg)?;
        let mut b = GraphBuild::new(&self.store);
        let hc = self.encode_g(&mut b, &batch);
        let post = self.posteriors_g(&mut b, hc);
        let n = batch.n_agents;
        let d_s = self.cfg.d_s;
        let d_z = self.cfg.d_z;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let qs = DiagGaussian::new(
                b.g.vals(post.mu_s)[i * d_s..(i + 1) * d_s].to_vec(),
                b.g.vals(post.lv_s)[i * d_s..(i + 1) * d_s].to_vec(),
            )?;
            let qz = DiagGaussian::new(
                b.g.vals(post.mu_z)[i * d_z..(i + 1) * d_z].to_vec(),
                b.g.vals(post.lv_z)[i * d_z..(i + 1) * d_z].to_vec(),
            )?;
            out.push((qs, qz));
        }
        Ok(out)
    }

    fn decode_rows_to_trajs(
        &self,
        means: &[f64],
        batch: &BatchData,
        n_samples: usize,
    ) -> Vec<AgentPrediction> {
        let p2 = 2 * self.cfg.pred_len;
        (0..batch.n_agents)
            .map(|i| {
                let trajs = (0..n_samples)
                    .map(|k| {
                        let row = &means[(i * n_samples + k) * p2..(i * n_samples + k + 1) * p2];
                        let mut pos = batch.last_obs[i];
                        (0..self.cfg.pred_len)
                            .map(|t| {
                                pos = [pos[0] + row[2 * t], pos[1] + row[2 * t + 1]];
                                pos
                            })
                            .collect()
                    })
                    .collect();
                AgentPrediction {
                    scene: batch.scene_of[i],
                    trajs,
                }
            })
            .collect()
    }

    /// Draws N futures per agent: s, z from the posteriors (or s from the
    /// mixture prior), decoder mean read out, absolute positions recovered by
    /// cumulative summation from the last observed position.
    pub fn ancestral_predict(
        &self,
        scenes: &[Scene],
        n_samples: usize,
        rng: &mut RunRng,
        s_mode: SSampleMode,
    ) -> Result<Vec<AgentPrediction>> {
        if n_samples == 0 {
            return Err(GcrlError::Config("need at least one sample".into()));
        }
        let batch = prepare_batch(scenes, &self.cfg)?;
        let mut b = GraphBuild::new(&self.store);
        let hc = self.encode_g(&mut b, &batch);
        let post = self.posteriors_g(&mut b, hc);
        let mut lat = self.sample_latents_g(&mut b, &post, n_samples, rng, false);
        if s_mode == SSampleMode::Prior {
            let rows = batch.n_agents * n_samples;
            let mut vals = Vec::with_capacity(rows * self.cfg.d_s);
            for _ in 0..rows {
                let (draw, _) = self.prior_s.sample_vals(rng, &self.store)?;
                vals.extend(draw);
            }
            let s_prior = b.g.constant(rows, self.cfg.d_s, vals);
            lat.s_dec = match self.cfg.latent_mode {
                LatentMode::ZOnly => lat.s_dec,
                _ => s_prior,
            };
        }
        let dec = self.decode_g(&mut b, hc, &lat);
        Ok(self.decode_rows_to_trajs(b.g.vals(dec.mean), &batch, n_samples))
    }

    /// Deterministic prediction from the posterior means (zero noise).
    pub fn predict_from_means(&self, scenes: &[Scene]) -> Result<Vec<AgentPrediction>> {
        let batch = prepare_batch(scenes, &self.cfg)?;
        let mut b = GraphBuild::new(&self.store);
        let hc = self.encode_g(&mut b, &batch);
        let post = self.posteriors_g(&mut b, hc);
        let zero_s = b.g.mul_const(post.lv_s, 0.0);
        let zero_z = b.g.mul_const(post.lv_z, 0.0);
        let lat = LatentsG {
            n_samples: 1,
            s: post.mu_s,
            z: post.mu_z,
            s_dec: match self.cfg.latent_mode {
                LatentMode::ZOnly => zero_s,
                _ => post.mu_s,
            },
            z_dec: match self.cfg.latent_mode {
                LatentMode::SOnly => zero_z,
                _ => post.mu_z,
            },
            log_qs: zero_s,
            log_qz: zero_z,
        };
        let dec = self.decode_g(&mut b, hc, &lat);
        Ok(self.decode_rows_to_trajs(b.g.vals(dec.mean), &batch, 1))
    }

    /// Monte-Carlo log q(y|x) per agent: log-mean-exp over `n_samples` of
    /// log p(y|x,s_i,z_i) at the ground-truth future.
    pub fn log_q_y_given_x(
        &self,
        scenes: &[Scene],
        n_samples: usize,
        rng: &mut RunRng,
    ) -> Result<Vec<f64>> {
        let batch = prepare_batch(scenes, &self.cfg)?;
        let future = batch.future_disp.clone().ok_or_else(|| {
            GcrlError::Shape("log q(y|x) needs ground-truth futures".into())
        })?;
        let mut b = GraphBuild::new(&self.store);
        let hc = self.encode_g(&mut b, &batch);
        let post = self.posteriors_g(&mut b, hc);
        let lat = self.sample_latents_g(&mut b, &post, n_samples, rng, false);
        let dec = self.decode_g(&mut b, hc, &lat);
        let y = b.g.constant(batch.n_agents, 2 * self.cfg.pred_len, future);
        let y_rep = b.g.repeat_rows(y, n_samples);
        let lp = self.head_log_prob_g(&mut b, &dec, y_rep);
        let lme = crate::distributions::log_mean_exp_rows_g(&mut b, lp, n_samples);
        Ok(b.g.vals(lme).to_vec())
    }
}
