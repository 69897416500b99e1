//! Synthetic circle-crossing scenario generator and the velocity-derived
//! observation-noise channel.
//!
//! Agents start (with angular jitter) on a circle and walk to the antipodal
//! point; goal-directed steering plus short-range pairwise repulsion shapes
//! the paths, and a hard projection guarantees no pair ever gets closer than
//! the domain's minimum separation distance (MSD) — the MSD is the single
//! mechanism that varies across domains. Each scene is a 20-step window
//! centred on the crossing.
//!
//! The noise channel is a deterministic function of the clean trajectory:
//! σ_t = α·(γ_t + 1) with γ_t the squared velocity change across a δt-step
//! window, so it is a controlled spurious correlate of the future motion,
//! not injected randomness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataio::{AgentTrack, Scene, SCENE_LEN};
use crate::error::{GcrlError, Result};
use crate::numgrad::rng::{derive_seed, derived_rng, tags};
use rand::Rng;

/// The eight benchmark domains.
pub const DOMAIN_MSDS: [f64; 8] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
/// Noise intensities used for training environments.
pub const TRAIN_ALPHAS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
/// Noise intensities used for the test sweep.
pub const TEST_ALPHAS: [f64; 4] = [8.0, 16.0, 32.0, 64.0];

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub msd: f64,
    pub n_agents: usize,
    pub radius: f64,
    pub speed: f64,
    pub dt: f64,
    pub jitter_deg: f64,
    pub count_train: usize,
    pub count_val: usize,
    pub count_test: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            msd: 0.1,
            n_agents: 5,
            radius: 4.0,
            speed: 1.0,
            dt: 0.4,
            jitter_deg: 10.0,
            count_train: 10_000,
            count_val: 3_000,
            count_test: 5_000,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.msd <= 0.0 {
            return Err(GcrlError::Config("msd must be positive".into()));
        }
        if self.n_agents == 0 {
            return Err(GcrlError::Config("need at least one agent".into()));
        }
        if self.radius <= self.msd * self.n_agents as f64 / std::f64::consts::PI {
            return Err(GcrlError::Config(format!(
                "infeasible config: radius {} cannot place {} agents ≥ {} m apart",
                self.radius, self.n_agents, self.msd
            )));
        }
        if self.speed <= 0.0 || self.dt <= 0.0 {
            return Err(GcrlError::Config("speed and dt must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NoiseConfig {
    pub alpha: f64,
    /// Velocity-difference window δt in steps.
    pub window: usize,
}

impl NoiseConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(GcrlError::Config("noise alpha must be positive".into()));
        }
        Ok(Self { alpha, window: 8 })
    }
}

fn min_pair_dist(pos: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let dx = pos[i][0] - pos[j][0];
            let dy = pos[i][1] - pos[j][1];
            best = best.min((dx * dx + dy * dy).sqrt());
        }
    }
    best
}

/// Simulates one scene; deterministic in (cfg, seed).
pub fn simulate_scene(cfg: &SimConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = derived_rng(seed, tags::SCENE, 0);
    let m = cfg.n_agents;
    let jitter = cfg.jitter_deg.to_radians();

    let mut pos: Vec<[f64; 2]> = Vec::with_capacity(m);
    let mut goals: Vec<[f64; 2]> = Vec::with_capacity(m);
    for i in 0..m {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / m as f64
            + rng.gen_range(-jitter..=jitter);
        let p = [cfg.radius * theta.cos(), cfg.radius * theta.sin()];
        pos.push(p);
        goals.push([-p[0], -p[1]]);
    }
    if m > 1 && min_pair_dist(&pos) < cfg.msd {
        return Err(GcrlError::Config(format!(
            "infeasible config: initial placement violates msd {}",
            cfg.msd
        )));
    }

    let crossing_steps = (2.0 * cfg.radius / (cfg.speed * cfg.dt)).ceil() as usize;
    let sim_steps = crossing_steps + SCENE_LEN + 4;
    let mut history: Vec<Vec<[f64; 2]>> = vec![Vec::with_capacity(sim_steps + 1); m];
    let mut last_dir: Vec<[f64; 2]> = (0..m)
        .map(|i| {
            let dx = goals[i][0] - pos[i][0];
            let dy = goals[i][1] - pos[i][1];
            let n = (dx * dx + dy * dy).sqrt();
            [dx / n, dy / n]
        })
        .collect();
    let mut passed = vec![false; m];

    for step in 0..=sim_steps {
        for (i, h) in history.iter_mut().enumerate() {
            h.push(pos[i]);
        }
        if step == sim_steps {
            break;
        }

        let mut vel: Vec<[f64; 2]> = Vec::with_capacity(m);
        for i in 0..m {
            let dx = goals[i][0] - pos[i][0];
            let dy = goals[i][1] - pos[i][1];
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < 0.3 {
                passed[i] = true; // sail through rather than stop or turn back
            }
            let dir = if passed[i] {
                last_dir[i]
            } else {
                let d = [dx / dist, dy / dist];
                last_dir[i] = d;
                d
            };
            vel.push([cfg.speed * dir[0], cfg.speed * dir[1]]);
        }

        // Short-range repulsion inside 2·msd, with a deterministic tangential
        // bias so head-on pairs sidestep instead of deadlocking.
        let range = 2.0 * cfg.msd;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let dx = pos[i][0] - pos[j][0];
                let dy = pos[i][1] - pos[j][1];
                let d = (dx * dx + dy * dy).sqrt().max(1e-9);
                if d < range {
                    let push = cfg.speed * (range - d) / range;
                    let ux = dx / d;
                    let uy = dy / d;
                    vel[i][0] += push * (ux - 0.4 * uy);
                    vel[i][1] += push * (uy + 0.4 * ux);
                }
            }
        }

        // Hard msd projection: geometric backoff of the whole step.
        let mut alpha = 1.0;
        let proposed = |a: f64, pos: &Vec<[f64; 2]>, vel: &Vec<[f64; 2]>| -> Vec<[f64; 2]> {
            pos.iter()
                .zip(vel)
                .map(|(p, v)| [p[0] + a * v[0] * cfg.dt, p[1] + a * v[1] * cfg.dt])
                .collect()
        };
        let mut next = proposed(alpha, &pos, &vel);
        if m > 1 {
            let mut tries = 0;
            while min_pair_dist(&next) < cfg.msd - 1e-12 && tries < 60 {
                alpha *= 0.7;
                next = proposed(alpha, &pos, &vel);
                tries += 1;
            }
            if min_pair_dist(&next) < cfg.msd - 1e-12 {
                next = pos.clone(); // freeze; bias resolves it next step
            }
        }
        pos = next;
    }

    // Window centred on the crossing: closest mean approach to the origin.
    let t_center = (0..=sim_steps)
        .min_by(|&a, &b| {
            let da: f64 = history.iter().map(|h| h[a][0].hypot(h[a][1])).sum();
            let db: f64 = history.iter().map(|h| h[b][0].hypot(h[b][1])).sum();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    let start = t_center
        .saturating_sub(crate::dataio::OBS_LEN)
        .min(sim_steps + 1 - SCENE_LEN);

    let agents = (0..m)
        .map(|i| AgentTrack {
            ped_id: i as i64,
            pos: history[i][start..start + SCENE_LEN].to_vec(),
            sigma: None,
        })
        .collect();
    Ok(Scene { env_id: 0, agents })
}

/// Appends the σ channel of the noise model to every agent.
///
/// ẋ_t = x_{t+1} − x_t, γ_t = ‖ẋ_{t+δt} − ẋ_t‖², σ_t = α(γ_t + 1); steps with
/// t + δt out of range reuse the last computable γ.
pub fn add_noise_channel(scene: &mut Scene, nc: &NoiseConfig) -> Result<()> {
    for agent in &mut scene.agents {
        let t_len = agent.pos.len();
        if t_len < nc.window + 2 {
            return Err(GcrlError::Config(format!(
                "trajectory of {t_len} steps too short for noise window {}",
                nc.window
            )));
        }
        let vel: Vec<[f64; 2]> = (0..t_len - 1)
            .map(|t| {
                [
                    agent.pos[t + 1][0] - agent.pos[t][0],
                    agent.pos[t + 1][1] - agent.pos[t][1],
                ]
            })
            .collect();
        let max_t = vel.len() - nc.window; // last t with ẋ_{t+δt} defined
        let mut gamma = vec![0.0; t_len];
        for t in 0..t_len {
            let tt = t.min(max_t - 1);
            let dvx = vel[tt + nc.window][0] - vel[tt][0];
            let dvy = vel[tt + nc.window][1] - vel[tt][1];
            gamma[t] = dvx * dvx + dvy * dvy;
        }
        agent.sigma = Some(gamma.iter().map(|g| nc.alpha * (g + 1.0)).collect());
    }
    Ok(())
}

// ── dataset generation ──────────────────────────────────────────────────

fn scene_to_rows(scene: &Scene, scene_idx: usize, out: &mut String) {
    let frame0 = (scene_idx * SCENE_LEN) as i64;
    let ped0 = (scene_idx * 64) as i64;
    for (t, _) in scene.agents[0].pos.iter().enumerate() {
        for agent in &scene.agents {
            writeln!(
                out,
                "{}\t{}\t{:.9}\t{:.9}",
                frame0 + t as i64,
                ped0 + agent.ped_id,
                agent.pos[t][0],
                agent.pos[t][1]
            )
            .expect("string write");
        }
    }
}

/// Generates one domain's train/val/test TSVs; byte-identical per (cfg, seed).
pub fn generate_domain(cfg: &SimConfig, seed: u64, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let splits = [
        ("train", cfg.count_train, 0usize),
        ("val", cfg.count_val, cfg.count_train),
        ("test", cfg.count_test, cfg.count_train + cfg.count_val),
    ];
    for (name, count, offset) in splits {
        let mut text = String::new();
        writeln!(text, "# synthetic circle-crossing trajectories").expect("string write");
        writeln!(
            text,
            "# msd={} n_agents={} radius={} speed={} dt={} jitter_deg={} seed={seed} split={name} scenes={count}",
            cfg.msd, cfg.n_agents, cfg.radius, cfg.speed, cfg.dt, cfg.jitter_deg
        )
        .expect("string write");
        for i in 0..count {
            let scene_seed = derive_seed(seed, tags::SCENE, (offset + i) as u64);
            let scene = simulate_scene(cfg, scene_seed)?;
            scene_to_rows(&scene, i, &mut text);
        }
        fs::write(out_dir.join(format!("{name}.tsv")), text)?;
    }
    Ok(())
}

/// Standard recipe: all eight MSD domains under `root/msd_*`.
pub fn generate_all_domains(base: &SimConfig, seed: u64, root: &Path) -> Result<()> {
    for msd in DOMAIN_MSDS {
        let cfg = SimConfig {
            msd,
            ..base.clone()
        };
        generate_domain(&cfg, derive_seed(seed, tags::INIT, (msd * 10.0) as u64), &domain_dir(root, msd))?;
    }
    Ok(())
}

pub fn domain_dir(root: &Path, msd: f64) -> std::path::PathBuf {
    root.join(format!("msd_{msd:.1}"))
}
