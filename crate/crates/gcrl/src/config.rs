//! Flat key=value run configuration.
//!
//! Every hyperparameter is a named key with its benchmark default; a config
//! file and then CLI `--set key=value` overrides are applied on top. The
//! resolved config serializes canonically, so a run can be reproduced
//! bit-exactly from its snapshot, and the same text is embedded in
//! checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{GcrlError, Result};
use crate::model::{CoordMode, LatentMode, ModelConfig};
use crate::numgrad::schedule::LrSchedule;
use crate::objective::{LossConfig, LossMode};
use crate::simdata::SimConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // dataset
    pub dataset: String,
    pub coord_mode: String,
    pub obs_len: usize,
    pub pred_len: usize,
    pub dt: f64,
    pub max_agents: usize,
    // model
    pub d_s: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub n_cluster: usize,
    pub dec_hidden: usize,
    pub rec_hidden: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub prior: String,
    pub latent_mode: String,
    pub learn_output_var: bool,
    pub leaky_slope: f64,
    // objective
    pub loss_mode: String,
    pub n_samples_qy: usize,
    pub n_samples_sz: usize,
    pub variety_n: usize,
    pub use_reconstruction: bool,
    // optimization
    pub lr: f64,
    pub peak_lr: f64,
    pub scheduler: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub sub_batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub val_best_of: usize,
    // evaluation
    pub best_of: usize,
    pub s_from: String,
    // synthetic generator
    pub sim_agents: usize,
    pub sim_radius: f64,
    pub sim_speed: f64,
    pub sim_jitter_deg: f64,
    pub count_train: usize,
    pub count_val: usize,
    pub count_test: usize,
    // environments
    pub train_msd: Vec<f64>,
    pub test_msd: Vec<f64>,
    // noise channel
    pub noise_train_alphas: Vec<f64>,
    pub noise_test_alphas: Vec<f64>,
    pub noise_window: usize,
    // adaptation
    pub adapt_epochs: usize,
    pub adapt_batches: usize,
    pub adapt_scope: String,
}

impl Default for RunConfig {
    /// Synthetic-benchmark defaults (Appendix hyperparameters).
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            coord_mode: "absolute".into(),
            obs_len: 8,
            pred_len: 12,
            dt: 0.4,
            max_agents: 32,
            d_s: 2,
            d_z: 2,
            hidden: 32,
            n_cluster: 5,
            dec_hidden: 32,
            rec_hidden: 32,
            flow_layers: 4,
            flow_hidden: 16,
            prior: "flow".into(),
            latent_mode: "both".into(),
            learn_output_var: false,
            leaky_slope: 0.2,
            loss_mode: "variety".into(),
            n_samples_qy: 1,
            n_samples_sz: 10,
            variety_n: 20,
            use_reconstruction: true,
            lr: 5e-3,
            peak_lr: 5e-3,
            scheduler: "constant".into(),
            epochs: 250,
            batch_size: 64,
            sub_batch: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            val_best_of: 3,
            best_of: 100,
            s_from: "posterior".into(),
            sim_agents: 5,
            sim_radius: 4.0,
            sim_speed: 1.0,
            sim_jitter_deg: 10.0,
            count_train: 10_000,
            count_val: 3_000,
            count_test: 5_000,
            train_msd: vec![0.1, 0.3, 0.5],
            test_msd: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            noise_train_alphas: vec![],
            noise_test_alphas: vec![8.0, 16.0, 32.0, 64.0],
            noise_window: 8,
            adapt_epochs: 100,
            adapt_batches: 6,
            adapt_scope: "gmm-weights-only".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| GcrlError::Config(format!("bad value `{value}` for key `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_num::<f64>(key, v.trim()))
        .collect()
}

fn fmt_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Base defaults for a dataset family.
    pub fn for_dataset(dataset: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match dataset {
            "synthetic" => {}
            "ethucy" => {
                cfg.dataset = "ethucy".into();
                cfg.coord_mode = "relative".into();
                cfg.d_s = 8;
                cfg.d_z = 8;
                cfg.hidden = 64;
                cfg.loss_mode = "full".into();
                cfg.n_samples_qy = 10;
                cfg.epochs = 300;
                cfg.scheduler = "one-cycle".into();
                cfg.lr = 2e-4; // peak/25
                cfg.peak_lr = 5e-3;
            }
            other => {
                return Err(GcrlError::Config(format!("unknown dataset `{other}`")));
            }
        }
        Ok(cfg)
    }

    /// Named run profiles; `desk` shrinks the data and epochs for CPU-scale
    /// experiments.
    pub fn apply_profile(&mut self, profile: &str) -> Result<()> {
        match profile {
            "paper" => Ok(()),
            "desk" => {
                self.count_train = 1000;
                self.count_val = 200;
                self.count_test = 500;
                self.epochs = 60;
                Ok(())
            }
            other => Err(GcrlError::Config(format!("unknown profile `{other}`"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                // re-baseline then keep going; explicit keys still win later
                let fresh = Self::for_dataset(value)?;
                *self = fresh;
            }
            "coord_mode" => self.coord_mode = value.into(),
            "obs_len" => self.obs_len = parse_num(key, value)?,
            "pred_len" => self.pred_len = parse_num(key, value)?,
            "dt" => self.dt = parse_num(key, value)?,
            "max_agents" => self.max_agents = parse_num(key, value)?,
            "d_s" => self.d_s = parse_num(key, value)?,
            "d_z" => self.d_z = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "n_cluster" => self.n_cluster = parse_num(key, value)?,
            "dec_hidden" => self.dec_hidden = parse_num(key, value)?,
            "rec_hidden" => self.rec_hidden = parse_num(key, value)?,
            "flow_layers" => self.flow_layers = parse_num(key, value)?,
            "flow_hidden" => self.flow_hidden = parse_num(key, value)?,
            "prior" => self.prior = value.into(),
            "latent_mode" => self.latent_mode = value.into(),
            "learn_output_var" => self.learn_output_var = parse_num(key, value)?,
            "leaky_slope" => self.leaky_slope = parse_num(key, value)?,
            "loss_mode" => self.loss_mode = value.into(),
            "n_samples_qy" => self.n_samples_qy = parse_num(key, value)?,
            "n_samples_sz" => self.n_samples_sz = parse_num(key, value)?,
            "variety_n" => self.variety_n = parse_num(key, value)?,
            "use_reconstruction" => self.use_reconstruction = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "peak_lr" => self.peak_lr = parse_num(key, value)?,
            "scheduler" => self.scheduler = value.into(),
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "sub_batch" => self.sub_batch = parse_num(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "val_best_of" => self.val_best_of = parse_num(key, value)?,
            "best_of" => self.best_of = parse_num(key, value)?,
            "s_from" => self.s_from = value.into(),
            "sim_agents" => self.sim_agents = parse_num(key, value)?,
            "sim_radius" => self.sim_radius = parse_num(key, value)?,
            "sim_speed" => self.sim_speed = parse_num(key, value)?,
            "sim_jitter_deg" => self.sim_jitter_deg = parse_num(key, value)?,
            "count_train" => self.count_train = parse_num(key, value)?,
            "count_val" => self.count_val = parse_num(key, value)?,
            "count_test" => self.count_test = parse_num(key, value)?,
            "train_msd" => self.train_msd = parse_list(key, value)?,
            "test_msd" => self.test_msd = parse_list(key, value)?,
            "noise_train_alphas" => self.noise_train_alphas = parse_list(key, value)?,
            "noise_test_alphas" => self.noise_test_alphas = parse_list(key, value)?,
            "noise_window" => self.noise_window = parse_num(key, value)?,
            "adapt_epochs" => self.adapt_epochs = parse_num(key, value)?,
            "adapt_batches" => self.adapt_batches = parse_num(key, value)?,
            "adapt_scope" => self.adapt_scope = value.into(),
            other => {
                return Err(GcrlError::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GcrlError::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                GcrlError::Config(format!("config line {}: expected key=value", idx + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// `key=value` overrides of the form accepted by `--set`.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                GcrlError::Config(format!("override `{pair}`: expected key=value"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical serialization; parsing this back reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k}={v}").expect("string write");
        put("dataset", self.dataset.clone());
        put("coord_mode", self.coord_mode.clone());
        put("obs_len", self.obs_len.to_string());
        put("pred_len", self.pred_len.to_string());
        put("dt", self.dt.to_string());
        put("max_agents", self.max_agents.to_string());
        put("d_s", self.d_s.to_string());
        put("d_z", self.d_z.to_string());
        put("hidden", self.hidden.to_string());
        put("n_cluster", self.n_cluster.to_string());
        put("dec_hidden", self.dec_hidden.to_string());
        put("rec_hidden", self.rec_hidden.to_string());
        put("flow_layers", self.flow_layers.to_string());
        put("flow_hidden", self.flow_hidden.to_string());
        put("prior", self.prior.clone());
        put("latent_mode", self.latent_mode.clone());
        put("learn_output_var", self.learn_output_var.to_string());
        put("leaky_slope", self.leaky_slope.to_string());
        put("loss_mode", self.loss_mode.clone());
        put("n_samples_qy", self.n_samples_qy.to_string());
        put("n_samples_sz", self.n_samples_sz.to_string());
        put("variety_n", self.variety_n.to_string());
        put("use_reconstruction", self.use_reconstruction.to_string());
        put("lr", self.lr.to_string());
        put("peak_lr", self.peak_lr.to_string());
        put("scheduler", self.scheduler.clone());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("sub_batch", self.sub_batch.to_string());
        put("adam_beta1", self.adam_beta1.to_string());
        put("adam_beta2", self.adam_beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("seed", self.seed.to_string());
        put("val_best_of", self.val_best_of.to_string());
        put("best_of", self.best_of.to_string());
        put("s_from", self.s_from.clone());
        put("sim_agents", self.sim_agents.to_string());
        put("sim_radius", self.sim_radius.to_string());
        put("sim_speed", self.sim_speed.to_string());
        put("sim_jitter_deg", self.sim_jitter_deg.to_string());
        put("count_train", self.count_train.to_string());
        put("count_val", self.count_val.to_string());
        put("count_test", self.count_test.to_string());
        put("train_msd", fmt_list(&self.train_msd));
        put("test_msd", fmt_list(&self.test_msd));
        put("noise_train_alphas", fmt_list(&self.noise_train_alphas));
        put("noise_test_alphas", fmt_list(&self.noise_test_alphas));
        put("noise_window", self.noise_window.to_string());
        put("adapt_epochs", self.adapt_epochs.to_string());
        put("adapt_batches", self.adapt_batches.to_string());
        put("adapt_scope", self.adapt_scope.clone());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_len == 0 || self.pred_len == 0 {
            return Err(GcrlError::Config("obs/pred lengths must be positive".into()));
        }
        if self.lr <= 0.0 || self.peak_lr <= 0.0 {
            return Err(GcrlError::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.sub_batch == 0 {
            return Err(GcrlError::Config("batch sizes must be positive".into()));
        }
        if self.train_msd.is_empty() {
            return Err(GcrlError::Config("train_msd must name ≥ 1 domain".into()));
        }
        self.loss_config()?.validate()?;
        self.model_config()?;
        Ok(())
    }

    // ── derived views ───────────────────────────────────────────────────

    pub fn model_config(&self) -> Result<ModelConfig> {
        let coord_mode = match self.coord_mode.as_str() {
            "relative" => CoordMode::Relative,
            "absolute" => CoordMode::Absolute,
            other => {
                return Err(GcrlError::Config(format!("unknown coord mode `{other}`")));
            }
        };
        Ok(ModelConfig {
            d_s: self.d_s,
            d_z: self.d_z,
            hidden: self.hidden,
            n_cluster: self.n_cluster,
            enc_in: if self.noise_train_alphas.is_empty() { 2 } else { 3 },
            obs_len: self.obs_len,
            pred_len: self.pred_len,
            dec_hidden: self.dec_hidden,
            rec_hidden: self.rec_hidden,
            flow_layers: self.flow_layers,
            flow_hidden: self.flow_hidden,
            prior_kind: self.prior.clone(),
            latent_mode: LatentMode::parse(&self.latent_mode)?,
            coord_mode,
            learn_output_var: self.learn_output_var,
            leaky_slope: self.leaky_slope,
        })
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            mode: LossMode::parse(&self.loss_mode)?,
            n_samples_qy: self.n_samples_qy,
            n_samples_sz: self.n_samples_sz,
            variety_n: self.variety_n,
            use_reconstruction: self.use_reconstruction,
        })
    }

    pub fn sim_config(&self, msd: f64) -> SimConfig {
        SimConfig {
            msd,
            n_agents: self.sim_agents,
            radius: self.sim_radius,
            speed: self.sim_speed,
            dt: self.dt,
            jitter_deg: self.sim_jitter_deg,
            count_train: self.count_train,
            count_val: self.count_val,
            count_test: self.count_test,
        }
    }

    pub fn schedule(&self, total_steps: u64) -> Result<LrSchedule> {
        match self.scheduler.as_str() {
            "constant" => Ok(LrSchedule::constant(self.lr)),
            "one-cycle" => Ok(LrSchedule::one_cycle(self.lr, self.peak_lr, total_steps.max(1))),
            other => Err(GcrlError::Config(format!("unknown scheduler `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let mut parsed = RunConfig::default();
        parsed.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.to_text(), parsed.to_text());
    }

    #[test]
    fn ethucy_base_flips_the_right_keys() {
        let cfg = RunConfig::for_dataset("ethucy").unwrap();
        assert_eq!(cfg.d_s, 8);
        assert_eq!(cfg.hidden, 64);
        assert_eq!(cfg.loss_mode, "full");
        assert_eq!(cfg.n_samples_qy, 10);
        assert_eq!(cfg.scheduler, "one-cycle");
        assert_eq!(cfg.coord_mode, "relative");
        let mut roundtrip = RunConfig::default();
        roundtrip.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, roundtrip);
    }

    #[test]
    fn overrides_and_profiles() {
        let mut cfg = RunConfig::default();
        cfg.apply_profile("desk").unwrap();
        assert_eq!(cfg.count_train, 1000);
        assert_eq!(cfg.epochs, 60);
        cfg.apply_overrides(&["lr=0.001".into(), "train_msd=0.1,0.3".into()])
            .unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.train_msd, vec![0.1, 0.3]);
        assert!(cfg.apply_overrides(&["nonsense=1".into()]).is_err());
        assert!(cfg.apply_profile("gpu").is_err());
    }

    #[test]
    fn synthetic_paper_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr, 5e-3);
        assert_eq!(cfg.d_s, 2);
        assert_eq!(cfg.n_cluster, 5);
        assert_eq!(cfg.n_samples_qy, 1);
        assert_eq!(cfg.n_samples_sz, 10);
        assert_eq!(cfg.variety_n, 20);
        assert_eq!(cfg.best_of, 100);
        assert_eq!(cfg.epochs, 250);
        assert_eq!(
            (cfg.count_train, cfg.count_val, cfg.count_test),
            (10_000, 3_000, 5_000)
        );
        cfg.validate().unwrap();
    }

    #[test]
    fn noise_channel_widens_encoder_input() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.model_config().unwrap().enc_in, 2);
        cfg.set("noise_train_alphas", "1,2,4,8").unwrap();
        assert_eq!(cfg.model_config().unwrap().enc_in, 3);
    }
}
