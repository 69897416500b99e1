//! Experiment drivers behind the CLI subcommands: dataset generation,
//! training, domain adaptation, and evaluation.
//!
//! Every run owns an output directory, writes a resolved-config snapshot
//! first, and derives all randomness from the run seed, so reruns from the
//! snapshot reproduce outputs bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataio::{load_scenes, Scene};
use crate::error::{GcrlError, Result};
use crate::eval::{best_of_n, collect_latents, mcc, MccMode};
use crate::model::{GcrlModel, SSampleMode};
use crate::numgrad::adam::AdamState;
use crate::numgrad::params::SlotId;
use crate::numgrad::rng::{derive_seed, derived_rng, tags};
use crate::objective::{loss_graph, ElboBreakdown, LossConfig, LossMode};
use crate::simdata::{add_noise_channel, domain_dir, generate_domain, NoiseConfig};

// ── dataset generation ──────────────────────────────────────────────────

/// Writes the configured domains (default: the standard eight) under `out`.
pub fn run_generate(cfg: &RunConfig, msds: &[f64], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    write_snapshot(cfg, out)?;
    for &msd in msds {
        let sim = cfg.sim_config(msd);
        generate_domain(
            &sim,
            derive_seed(cfg.seed, tags::INIT, (msd * 10.0).round() as u64),
            &domain_dir(out, msd),
        )?;
    }
    Ok(())
}

fn write_snapshot(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join("config.resolved");
    fs::write(&path, cfg.to_text())?;
    Ok(path)
}

// ── data loading ────────────────────────────────────────────────────────

fn split_path(data_root: &Path, msd: f64, split: &str) -> PathBuf {
    domain_dir(data_root, msd).join(format!("{split}.tsv"))
}

/// Loads one msd domain split, assigning `env_id` and optionally the noise
/// channel.
pub fn load_domain(
    data_root: &Path,
    msd: f64,
    split: &str,
    env_id: usize,
    cfg: &RunConfig,
    alpha: Option<f64>,
) -> Result<Vec<Scene>> {
    let path = split_path(data_root, msd, split);
    let mut scenes = load_scenes(&path, env_id, cfg.obs_len + cfg.pred_len, cfg.max_agents)?;
    if let Some(alpha) = alpha {
        let nc = NoiseConfig {
            alpha,
            window: cfg.noise_window,
        };
        for s in &mut scenes {
            add_noise_channel(s, &nc)?;
        }
    }
    Ok(scenes)
}

/// Training and validation scenes with environment ids.
///
/// Without a noise channel the environments are the `train_msd` domains.
/// With `noise_train_alphas` set, the noise intensities become the
/// environment axis: the first training domain's scenes are partitioned
/// round-robin and each slice carries one α.
fn load_training_scenes(cfg: &RunConfig, data_root: &Path) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if cfg.noise_train_alphas.is_empty() {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (env_id, &msd) in cfg.train_msd.iter().enumerate() {
            train.extend(load_domain(data_root, msd, "train", env_id, cfg, None)?);
            val.extend(load_domain(data_root, msd, "val", env_id, cfg, None)?);
        }
        Ok((train, val))
    } else {
        let msd = cfg.train_msd[0];
        let alphas = &cfg.noise_train_alphas;
        let assign = |scenes: Vec<Scene>| -> Result<Vec<Scene>> {
            scenes
                .into_iter()
                .enumerate()
                .map(|(i, mut s)| {
                    let k = i % alphas.len();
                    s.env_id = k;
                    let nc = NoiseConfig {
                        alpha: alphas[k],
                        window: cfg.noise_window,
                    };
                    add_noise_channel(&mut s, &nc)?;
                    Ok(s)
                })
                .collect()
        };
        let train = assign(load_domain(data_root, msd, "train", 0, cfg, None)?)?;
        let val = assign(load_domain(data_root, msd, "val", 0, cfg, None)?)?;
        Ok((train, val))
    }
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub breakdown: ElboBreakdown,
    pub lr: f64,
    pub val_ade: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub history: Vec<EpochStats>,
    pub best_val_ade: f64,
}

/// Accumulates the agent-weighted mean of per-sub-batch breakdowns.
#[derive(Default)]
struct BreakdownAccum {
    pred: f64,
    recon: f64,
    kl_s: f64,
    kl_z: f64,
    total: f64,
    agents: f64,
}

impl BreakdownAccum {
    fn add(&mut self, bd: &ElboBreakdown, n_agents: usize) {
        let w = n_agents as f64;
        self.pred += bd.pred * w;
        self.recon += bd.recon * w;
        self.kl_s += bd.kl_s * w;
        self.kl_z += bd.kl_z * w;
        self.total += bd.total * w;
        self.agents += w;
    }

    fn mean(&self) -> ElboBreakdown {
        ElboBreakdown {
            pred: self.pred / self.agents,
            recon: self.recon / self.agents,
            kl_s: self.kl_s / self.agents,
            kl_z: self.kl_z / self.agents,
            total: self.total / self.agents,
        }
    }
}

/// One optimizer step over a batch: sub-batches accumulate gradients with
/// exact per-agent weighting, then Adam applies the update to the slots
/// selected by `update`.
fn train_batch(
    model: &mut GcrlModel,
    batch: &[Scene],
    loss_cfg: &LossConfig,
    sub_batch: usize,
    adam: &mut AdamState,
    lr: f64,
    rng_seed: u64,
    update: &dyn Fn(SlotId) -> bool,
    accum: &mut BreakdownAccum,
) -> Result<()> {
    let n_total: usize = batch.iter().map(|s| s.n_agents()).sum();
    model.store.zero_grads();
    for (k, chunk) in batch.chunks(sub_batch).enumerate() {
        let mut rng = derived_rng(rng_seed, tags::LOSS, k as u64);
        let mut lg = loss_graph(model, chunk, loss_cfg, &mut rng)?;
        let scaled = lg.g.mul_const(lg.loss_sum, 1.0 / n_total as f64);
        lg.g.backward(scaled, &mut model.store)?;
        accum.add(&lg.breakdown, lg.n_agents);
    }
    adam.step(&mut model.store, lr, update)?;
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,pred,recon,kl_s,kl_z,total,lr\n");
    for h in history {
        writeln!(
            text,
            "{},{},{},{},{},{},{}",
            h.epoch, h.breakdown.pred, h.breakdown.recon, h.breakdown.kl_s, h.breakdown.kl_z,
            h.breakdown.total, h.lr
        )
        .expect("string write");
    }
    fs::write(path, text)?;
    Ok(())
}

/// Trains from scratch; keeps the checkpoint with the best validation ADE.
pub fn run_train(cfg: &RunConfig, data_root: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    write_snapshot(cfg, out_dir)?;

    let (mut train, val) = load_training_scenes(cfg, data_root)?;
    if train.is_empty() || val.is_empty() {
        return Err(GcrlError::MissingInput(
            "empty training or validation split".into(),
        ));
    }

    let mut model = GcrlModel::new(cfg.model_config()?, &mut derived_rng(cfg.seed, tags::INIT, 0))?;
    let loss_cfg = cfg.loss_config()?;
    let mut adam = AdamState::with_hyperparams(
        &model.store,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;
    let schedule = cfg.schedule(total_steps)?;

    // p(e) stays the assumed uniform prior during training; it only moves
    // under explicit adaptation scopes.
    let frozen_logits = model.gmm_weight_slot();
    let update = move |slot: SlotId| slot != frozen_logits;

    let ckpt_path = out_dir.join("best.ckpt");
    let mut best_val = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, tags::EPOCH, epoch as u64));
        let mut accum = BreakdownAccum::default();
        let mut last_lr = 0.0;
        for batch_idx in 0..batches_per_epoch {
            let lo = batch_idx * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(train.len());
            let batch: Vec<Scene> = order[lo..hi].iter().map(|&i| train[i].clone()).collect();
            let lr = schedule.lr_at(step)?;
            last_lr = lr;
            train_batch(
                &mut model,
                &batch,
                &loss_cfg,
                cfg.sub_batch,
                &mut adam,
                lr,
                derive_seed(cfg.seed, tags::LOSS, step),
                &update,
                &mut accum,
            )?;
            step += 1;
        }

        let val_ade = best_of_n(
            &model,
            &val,
            cfg.val_best_of,
            derive_seed(cfg.seed, tags::EVAL, epoch as u64),
            SSampleMode::Posterior,
        )?
        .0;
        if val_ade < best_val {
            best_val = val_ade;
            checkpoint::save(&model, cfg, &ckpt_path)?;
        }
        history.push(EpochStats {
            epoch,
            breakdown: accum.mean(),
            lr: last_lr,
            val_ade,
        });
    }
    // tiny runs can end before any improvement triggers a save
    if !ckpt_path.exists() {
        checkpoint::save(&model, cfg, &ckpt_path)?;
    }
    train.clear();

    let loss_csv = out_dir.join("loss.csv");
    write_loss_csv(&loss_csv, &history)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        loss_csv,
        history,
        best_val_ade: best_val,
    })
}

// ── adaptation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptScope {
    /// Fine-tune {q(s|x), p(s), decoder, reconstructor, encoder}.
    AdaptableSet,
    /// Fine-tune only the K mixture-weight logits.
    GmmWeightsOnly,
}

impl AdaptScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptable-set" => Ok(AdaptScope::AdaptableSet),
            "gmm-weights-only" => Ok(AdaptScope::GmmWeightsOnly),
            other => Err(GcrlError::Config(format!("unknown adapt scope `{other}`"))),
        }
    }
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub checkpoint: PathBuf,
    /// Number of scalar parameters that changed.
    pub changed_scalars: usize,
}

fn z_branch_bits(model: &GcrlModel) -> Vec<u64> {
    let mut out = Vec::new();
    for slot in model.z_branch_slots() {
        for v in model.store.values(slot) {
            out.push(v.to_bits());
        }
    }
    out
}

/// Low-shot fine-tuning on `adapt_batches × batch_size` scenes from the
/// target domain, under the adaptation loss (no z-regularizer). The z-branch
/// is verified bit-identical before the adapted checkpoint is written.
pub fn run_adapt(
    ckpt: &Path,
    data_root: &Path,
    target_msd: f64,
    scope: AdaptScope,
    batches: usize,
    out_dir: &Path,
    overrides: &[String],
) -> Result<AdaptOutcome> {
    fs::create_dir_all(out_dir)?;
    let (mut model, mut cfg) = checkpoint::load(ckpt)?;
    cfg.apply_overrides(overrides)?;
    write_snapshot(&cfg, out_dir)?;
    let out_path = out_dir.join("adapted.ckpt");

    if batches == 0 {
        fs::copy(ckpt, &out_path)?;
        return Ok(AdaptOutcome {
            checkpoint: out_path,
            changed_scalars: 0,
        });
    }

    let alpha = (!cfg.noise_train_alphas.is_empty())
        .then(|| cfg.noise_train_alphas[cfg.noise_train_alphas.len() - 1]);
    let pool = load_domain(data_root, target_msd, "train", 0, &cfg, alpha)?;
    let need = batches * cfg.batch_size;
    if pool.len() < need {
        return Err(GcrlError::MissingInput(format!(
            "target domain has {} scenes, adaptation needs {need}",
            pool.len()
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut derived_rng(cfg.seed, tags::EPOCH, 0));
    let adapt_set: Vec<Scene> = order[..need].iter().map(|&i| pool[i].clone()).collect();

    let before = z_branch_bits(&model);
    let snapshot: Vec<Vec<f64>> = model
        .store
        .slots()
        .map(|s| model.store.values(s).to_vec())
        .collect();

    let loss_cfg = LossConfig {
        mode: LossMode::Adaptation,
        ..cfg.loss_config()?
    };
    let allowed: std::collections::BTreeSet<SlotId> = match scope {
        AdaptScope::AdaptableSet => model.adaptable_slots().into_iter().collect(),
        AdaptScope::GmmWeightsOnly => [model.gmm_weight_slot()].into_iter().collect(),
    };
    let update = |slot: SlotId| allowed.contains(&slot);
    let mut adam = AdamState::with_hyperparams(
        &model.store,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );

    for epoch in 1..=cfg.adapt_epochs {
        for (bi, batch) in adapt_set.chunks(cfg.batch_size).enumerate() {
            let mut accum = BreakdownAccum::default();
            train_batch(
                &mut model,
                batch,
                &loss_cfg,
                cfg.sub_batch,
                &mut adam,
                cfg.lr,
                derive_seed(cfg.seed, tags::LOSS, (epoch * 10_000 + bi) as u64),
                &update,
                &mut accum,
            )?;
        }
    }

    if z_branch_bits(&model) != before {
        return Err(GcrlError::Partition(
            "z-branch parameters changed during adaptation".into(),
        ));
    }
    let mut changed = 0usize;
    for (slot, old) in model.store.slots().zip(&snapshot) {
        changed += model
            .store
            .values(slot)
            .iter()
            .zip(old)
            .filter(|(a, b)| a != b)
            .count();
    }
    checkpoint::save(&model, &cfg, &out_path)?;
    Ok(AdaptOutcome {
        checkpoint: out_path,
        changed_scalars: changed,
    })
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub env: String,
    pub alpha: Option<f64>,
    pub msd: Option<f64>,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data_root: PathBuf,
    pub msd: Vec<f64>,
    pub best_of: usize,
    pub alphas: Vec<f64>,
    pub mcc_with: Option<PathBuf>,
    pub mcc_mode: String,
    pub s_from: String,
    pub out_dir: PathBuf,
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut text = String::from("metric,value,env,alpha,msd,N,seed\n");
    for r in rows {
        writeln!(
            text,
            "{},{},{},{},{},{},{}",
            r.metric,
            r.value,
            r.env,
            r.alpha.map_or(String::new(), |a| a.to_string()),
            r.msd.map_or(String::new(), |m| m.to_string()),
            r.n,
            r.seed
        )
        .expect("string write");
    }
    text
}

/// Best-of-N ADE/FDE per domain (optionally swept over noise intensities),
/// plus cross-checkpoint MCC when a second checkpoint is given.
pub fn run_eval(args: &EvalArgs) -> Result<Vec<MetricRow>> {
    fs::create_dir_all(&args.out_dir)?;
    let (model, mut cfg) = checkpoint::load(&args.checkpoint)?;
    cfg.s_from = args.s_from.clone();
    write_snapshot(&cfg, &args.out_dir)?;
    let s_mode = SSampleMode::parse(&args.s_from)?;
    let mut rows = Vec::new();

    let msds = if args.msd.is_empty() {
        cfg.test_msd.clone()
    } else {
        args.msd.clone()
    };

    for &msd in &msds {
        let env = format!("msd_{msd:.1}");
        let alphas: Vec<Option<f64>> = if args.alphas.is_empty() {
            if cfg.noise_train_alphas.is_empty() {
                vec![None]
            } else {
                // model consumes a noise channel; default to the test sweep
                cfg.noise_test_alphas.iter().map(|&a| Some(a)).collect()
            }
        } else {
            args.alphas.iter().map(|&a| Some(a)).collect()
        };
        for alpha in alphas {
            let scenes = load_domain(&args.data_root, msd, "test", 0, &cfg, alpha)?;
            if scenes.is_empty() {
                return Err(GcrlError::MissingInput(format!(
                    "no test scenes for msd {msd}"
                )));
            }
            let (ade, fde) = best_of_n(
                &model,
                &scenes,
                args.best_of,
                derive_seed(cfg.seed, tags::EVAL, (msd * 1000.0) as u64),
                s_mode,
            )?;
            for (metric, value) in [("ade", ade), ("fde", fde)] {
                rows.push(MetricRow {
                    metric: metric.into(),
                    value,
                    env: env.clone(),
                    alpha,
                    msd: Some(msd),
                    n: args.best_of,
                    seed: cfg.seed,
                });
            }
        }
    }

    if let Some(other) = &args.mcc_with {
        let (model_b, cfg_b) = checkpoint::load(other)?;
        let mode = MccMode::parse(&args.mcc_mode)?;
        let mut scenes = Vec::new();
        for (env_id, &msd) in cfg.train_msd.iter().enumerate() {
            scenes.extend(load_domain(&args.data_root, msd, "test", env_id, &cfg, None)?);
        }
        let (s_a, z_a) = collect_latents(&model, &scenes)?;
        let (s_b, z_b) = collect_latents(&model_b, &scenes)?;
        let mcc_s = mcc(&s_a, &s_b, mode)?;
        let mcc_z = mcc(&z_a, &z_b, mode)?;
        let _ = cfg_b;
        for (metric, value) in [
            (format!("mcc_{}_s", args.mcc_mode), mcc_s),
            (format!("mcc_{}_z", args.mcc_mode), mcc_z),
        ] {
            rows.push(MetricRow {
                metric,
                value,
                env: "train-domains".into(),
                alpha: None,
                msd: None,
                n: 0,
                seed: cfg.seed,
            });
        }
    }

    fs::write(args.out_dir.join("metrics.csv"), metrics_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_cfg(tmp: &str) -> (RunConfig, PathBuf, PathBuf) {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "hidden=8".into(),
            "dec_hidden=16".into(),
            "rec_hidden=16".into(),
            "flow_layers=2".into(),
            "flow_hidden=4".into(),
            "n_cluster=2".into(),
            "count_train=24".into(),
            "count_val=8".into(),
            "count_test=8".into(),
            "epochs=2".into(),
            "batch_size=8".into(),
            "sub_batch=4".into(),
            "n_samples_sz=2".into(),
            "variety_n=3".into(),
            "val_best_of=2".into(),
            "train_msd=0.3".into(),
            "sim_agents=2".into(),
        ])
        .unwrap();
        let base = std::env::temp_dir().join(format!("gcrl_runner_{tmp}"));
        let _ = fs::remove_dir_all(&base);
        let data = base.join("data");
        let out = base.join("out");
        (cfg, data, out)
    }

    #[test]
    fn generate_train_eval_round_trip() {
        let (cfg, data, out) = desk_cfg("rt");
        run_generate(&cfg, &[0.3], &data).unwrap();
        let outcome = run_train(&cfg, &data, &out).unwrap();
        assert!(outcome.checkpoint.exists());
        assert!(outcome.loss_csv.exists());
        assert_eq!(outcome.history.len(), 2);
        let csv = fs::read_to_string(&outcome.loss_csv).unwrap();
        assert!(csv.starts_with("epoch,pred,recon,kl_s,kl_z,total,lr"));
        assert_eq!(csv.lines().count(), 3);

        let rows = run_eval(&EvalArgs {
            checkpoint: outcome.checkpoint.clone(),
            data_root: data.clone(),
            msd: vec![0.3],
            best_of: 3,
            alphas: vec![],
            mcc_with: None,
            mcc_mode: "weak".into(),
            s_from: "posterior".into(),
            out_dir: out.join("eval"),
        })
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.value.is_finite()));
        assert!(out.join("eval").join("metrics.csv").exists());
    }

    #[test]
    fn training_is_reproducible_from_the_snapshot() {
        let (cfg, data, out) = desk_cfg("repro");
        run_generate(&cfg, &[0.3], &data).unwrap();
        let a = run_train(&cfg, &data, &out.join("a")).unwrap();

        // rerun from the snapshot text, not the in-memory struct
        let mut cfg2 = RunConfig::default();
        cfg2.apply_file(&out.join("a").join("config.resolved")).unwrap();
        let b = run_train(&cfg2, &data, &out.join("b")).unwrap();
        assert_eq!(
            fs::read(&a.checkpoint).unwrap(),
            fs::read(&b.checkpoint).unwrap(),
            "checkpoints differ across identical runs"
        );
        assert_eq!(
            fs::read_to_string(&a.loss_csv).unwrap(),
            fs::read_to_string(&b.loss_csv).unwrap()
        );
    }

    #[test]
    fn zero_batch_adaptation_copies_the_checkpoint() {
        let (cfg, data, out) = desk_cfg("adapt0");
        run_generate(&cfg, &[0.3, 0.8], &data).unwrap();
        let outcome = run_train(&cfg, &data, &out).unwrap();
        let adapted = run_adapt(
            &outcome.checkpoint,
            &data,
            0.8,
            AdaptScope::GmmWeightsOnly,
            0,
            &out.join("adapt"),
            &[],
        )
        .unwrap();
        assert_eq!(
            fs::read(&outcome.checkpoint).unwrap(),
            fs::read(&adapted.checkpoint).unwrap()
        );
        assert_eq!(adapted.changed_scalars, 0);
    }

    #[test]
    fn weights_only_adaptation_touches_exactly_k_scalars() {
        let (mut cfg, data, out) = desk_cfg("adaptk");
        cfg.apply_overrides(&["adapt_epochs=2".into(), "count_train=16".into()])
            .unwrap();
        run_generate(&cfg, &[0.3, 0.8], &data).unwrap();
        let outcome = run_train(&cfg, &data, &out).unwrap();
        let (before, _) = checkpoint::load(&outcome.checkpoint).unwrap();
        let adapted = run_adapt(
            &outcome.checkpoint,
            &data,
            0.8,
            AdaptScope::GmmWeightsOnly,
            2,
            &out.join("adapt"),
            &["adapt_epochs=2".into()],
        )
        .unwrap();
        assert_eq!(adapted.changed_scalars, cfg.n_cluster);

        let (after, _) = checkpoint::load(&adapted.checkpoint).unwrap();
        // z-branch bit-identical pre/post
        for slot in before.z_branch_slots() {
            assert_eq!(
                before.store.values(slot),
                after.store.values(slot),
                "z-branch slot moved"
            );
        }
        // and the only moved tensor is the mixture weights
        let logits = before.gmm_weight_slot();
        assert_ne!(before.store.values(logits), after.store.values(logits));
    }

    #[test]
    fn adaptable_set_scope_keeps_z_branch_frozen() {
        let (mut cfg, data, out) = desk_cfg("adaptall");
        cfg.apply_overrides(&["adapt_epochs=1".into(), "count_train=16".into()])
            .unwrap();
        run_generate(&cfg, &[0.3, 0.8], &data).unwrap();
        let outcome = run_train(&cfg, &data, &out).unwrap();
        let (before, _) = checkpoint::load(&outcome.checkpoint).unwrap();
        let adapted = run_adapt(
            &outcome.checkpoint,
            &data,
            0.8,
            AdaptScope::AdaptableSet,
            2,
            &out.join("adapt"),
            &["adapt_epochs=1".into()],
        )
        .unwrap();
        let (after, _) = checkpoint::load(&adapted.checkpoint).unwrap();
        for slot in before.z_branch_slots() {
            assert_eq!(before.store.values(slot), after.store.values(slot));
        }
        assert!(adapted.changed_scalars > cfg.n_cluster);
    }
}
