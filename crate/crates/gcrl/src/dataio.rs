//! Trajectory TSV ingestion, sliding-window scene extraction, coordinate
//! transforms, and leave-one-out environment splits.
//!
//! File format (synthetic and ETH-UCY-style alike):
//! `frame_id \t ped_id \t x \t y [\t sigma]`, whitespace-tolerant, `#` lines
//! are metadata headers. A pedestrian joins a scene only if present for all
//! T_obs + T_pred consecutive frames of the window; windows slide with
//! stride 1 over the environment's frame sequence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{GcrlError, Result};

pub const OBS_LEN: usize = 8;
pub const PRED_LEN: usize = 12;
pub const SCENE_LEN: usize = OBS_LEN + PRED_LEN;
pub const FRAME_PERIOD: f64 = 0.4;
pub const MAX_AGENTS: usize = 32;

/// One pedestrian's time-sorted raw observations.
#[derive(Debug, Clone)]
pub struct Track {
    pub ped_id: i64,
    pub frames: Vec<i64>,
    pub pos: Vec<[f64; 2]>,
    pub sigma: Option<Vec<f64>>,
}

/// One agent inside a fixed-length scene window.
#[derive(Debug, Clone)]
pub struct AgentTrack {
    pub ped_id: i64,
    pub pos: Vec<[f64; 2]>,
    /// Observation-noise channel, when materialized.
    pub sigma: Option<Vec<f64>>,
}

/// A set of co-present agent trajectories over T_obs + T_pred steps.
#[derive(Debug, Clone)]
pub struct Scene {
    pub env_id: usize,
    pub agents: Vec<AgentTrack>,
}

impl Scene {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn len_t(&self) -> usize {
        self.agents.first().map_or(0, |a| a.pos.len())
    }
}

/// Parses a trajectory TSV into per-pedestrian time-sorted tracks.
///
/// Rows may arrive in any order; duplicate frames for one pedestrian are an
/// error (non-monotone track), malformed rows report their line number.
pub fn load_trajectories(path: &Path) -> Result<Vec<Track>> {
    let text = fs::read_to_string(path)
        .map_err(|e| GcrlError::MissingInput(format!("{}: {e}", path.display())))?;
    let fname = path.display().to_string();

    let mut rows: Vec<(i64, i64, f64, f64, Option<f64>)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(GcrlError::Data {
                file: fname.clone(),
                line: line_no,
                msg: format!("expected ≥4 columns, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| GcrlError::Data {
                file: fname.clone(),
                line: line_no,
                msg: format!("bad {what} `{s}`"),
            })
        };
        let frame = parse(fields[0], "frame_id")?;
        let ped = parse(fields[1], "ped_id")?;
        let x = parse(fields[2], "x")?;
        let y = parse(fields[3], "y")?;
        if !x.is_finite() || !y.is_finite() {
            return Err(GcrlError::Data {
                file: fname.clone(),
                line: line_no,
                msg: "non-finite coordinate".into(),
            });
        }
        let sigma = if fields.len() >= 5 {
            Some(parse(fields[4], "sigma")?)
        } else {
            None
        };
        rows.push((frame.round() as i64, ped.round() as i64, x, y, sigma));
    }

    let mut by_ped: BTreeMap<i64, Vec<(i64, f64, f64, Option<f64>)>> = BTreeMap::new();
    for (frame, ped, x, y, sigma) in rows {
        by_ped.entry(ped).or_default().push((frame, x, y, sigma));
    }

    let mut tracks = Vec::with_capacity(by_ped.len());
    for (ped_id, mut obs) in by_ped {
        obs.sort_by_key(|o| o.0);
        for w in obs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(GcrlError::Data {
                    file: fname.clone(),
                    line: 0,
                    msg: format!("pedestrian {ped_id} has duplicate frame {}", w[0].0),
                });
            }
        }
        let has_sigma = obs.iter().all(|o| o.3.is_some());
        tracks.push(Track {
            ped_id,
            frames: obs.iter().map(|o| o.0).collect(),
            pos: obs.iter().map(|o| [o.1, o.2]).collect(),
            sigma: has_sigma.then(|| obs.iter().map(|o| o.3.unwrap()).collect()),
        });
    }
    Ok(tracks)
}

/// Slides a stride-1 window of `window` frames over the environment's frame
/// sequence; every maximal co-present span appears exactly once. Scenes are
/// capped at `cap` agents, overflow splits into further scenes.
pub fn window_scenes(tracks: &[Track], window: usize, cap: usize) -> Vec<Scene> {
    assert!(window >= 2 && cap >= 1);
    let mut frames: Vec<i64> = tracks.iter().flat_map(|t| t.frames.iter().copied()).collect();
    frames.sort_unstable();
    frames.dedup();
    if frames.len() < window {
        return Vec::new();
    }
    let frame_index: BTreeMap<i64, usize> = frames
        .iter()
        .enumerate()
        .map(|(i, &f)| (f, i))
        .collect();
    let n_windows = frames.len() - window + 1;

    // For each track, maximal runs of consecutive frame indices; a run
    // covering indices [a, b] joins windows starting in [a, b − window + 1].
    let mut starts: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_windows]; // window → (track, offset)
    for (ti, t) in tracks.iter().enumerate() {
        let idxs: Vec<usize> = t.frames.iter().map(|f| frame_index[f]).collect();
        let mut run_start = 0;
        for k in 0..idxs.len() {
            let run_ends = k + 1 == idxs.len() || idxs[k + 1] != idxs[k] + 1;
            if run_ends {
                let a = idxs[run_start];
                let b = idxs[k];
                if b + 1 - a >= window {
                    for w in a..=(b + 1 - window) {
                        starts[w].push((ti, run_start + (w - a)));
                    }
                }
                run_start = k + 1;
            }
        }
    }

    let mut scenes = Vec::new();
    for (w, members) in starts.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        for chunk in members.chunks(cap) {
            let agents: Vec<AgentTrack> = chunk
                .iter()
                .map(|&(ti, off)| {
                    let t = &tracks[ti];
                    AgentTrack {
                        ped_id: t.ped_id,
                        pos: t.pos[off..off + window].to_vec(),
                        sigma: t.sigma.as_ref().map(|s| s[off..off + window].to_vec()),
                    }
                })
                .collect();
            let _ = w;
            scenes.push(Scene { env_id: 0, agents });
        }
    }
    scenes
}

/// Per-agent (origin, per-step displacement) representation. The first
/// displacement is zero; step t holds pos_t − pos_{t−1}.
pub fn to_relative(scene: &Scene) -> (Vec<[f64; 2]>, Vec<Vec<[f64; 2]>>) {
    let mut origins = Vec::with_capacity(scene.n_agents());
    let mut disp = Vec::with_capacity(scene.n_agents());
    for a in &scene.agents {
        origins.push(a.pos[0]);
        let mut d = Vec::with_capacity(a.pos.len());
        d.push([0.0, 0.0]);
        for t in 1..a.pos.len() {
            d.push([
                a.pos[t][0] - a.pos[t - 1][0],
                a.pos[t][1] - a.pos[t - 1][1],
            ]);
        }
        disp.push(d);
    }
    (origins, disp)
}

/// Exact inverse of [`to_relative`].
pub fn to_absolute(disp: &[Vec<[f64; 2]>], origins: &[[f64; 2]]) -> Vec<Vec<[f64; 2]>> {
    disp.iter()
        .zip(origins)
        .map(|(d, o)| {
            let mut pos = Vec::with_capacity(d.len());
            let mut cur = *o;
            for (t, step) in d.iter().enumerate() {
                if t > 0 {
                    cur = [cur[0] + step[0], cur[1] + step[1]];
                }
                pos.push(cur);
            }
            pos
        })
        .collect()
}

// ── manifests and environment splits ────────────────────────────────────

/// Plain-text key=value manifest mapping environment names to TSV files.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub envs: BTreeMap<String, PathBuf>,
    pub obs_len: usize,
    pub pred_len: usize,
}

impl DatasetManifest {
    pub fn parse(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| GcrlError::MissingInput(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut envs = BTreeMap::new();
        let mut obs_len = OBS_LEN;
        let mut pred_len = PRED_LEN;
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| GcrlError::Data {
                file: path.display().to_string(),
                line: idx + 1,
                msg: "expected key=value".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "obs_len" => {
                    obs_len = value.parse().map_err(|_| GcrlError::Data {
                        file: path.display().to_string(),
                        line: idx + 1,
                        msg: format!("bad obs_len `{value}`"),
                    })?
                }
                "pred_len" => {
                    pred_len = value.parse().map_err(|_| GcrlError::Data {
                        file: path.display().to_string(),
                        line: idx + 1,
                        msg: format!("bad pred_len `{value}`"),
                    })?
                }
                _ => {
                    if let Some(env) = key.strip_prefix("env.") {
                        envs.insert(env.to_string(), base.join(value));
                    }
                }
            }
        }
        if obs_len == 0 || pred_len == 0 {
            return Err(GcrlError::Config("obs/pred lengths must be positive".into()));
        }
        Ok(Self {
            envs,
            obs_len,
            pred_len,
        })
    }
}

/// Train environments (alphabetical, env_ids 0..K−2) plus the held-out one.
#[derive(Debug, Clone)]
pub struct LeaveOneOut {
    pub train: Vec<(String, PathBuf)>,
    pub test: (String, PathBuf),
}

pub fn leave_one_out(manifest: &DatasetManifest, test_env: &str) -> Result<LeaveOneOut> {
    let test_path = manifest
        .envs
        .get(test_env)
        .ok_or_else(|| GcrlError::Config(format!("unknown env `{test_env}` in manifest")))?
        .clone();
    // BTreeMap iteration is already alphabetical, which fixes the env_ids.
    let train: Vec<(String, PathBuf)> = manifest
        .envs
        .iter()
        .filter(|(name, _)| name.as_str() != test_env)
        .map(|(name, path)| (name.clone(), path.clone()))
        .collect();
    if train.is_empty() {
        return Err(GcrlError::Config(
            "leave-one-out needs at least two environments".into(),
        ));
    }
    Ok(LeaveOneOut {
        train,
        test: (test_env.to_string(), test_path),
    })
}

/// Loads one file and windows it into scenes with the given env id.
pub fn load_scenes(path: &Path, env_id: usize, window: usize, cap: usize) -> Result<Vec<Scene>> {
    let tracks = load_trajectories(path)?;
    let mut scenes = window_scenes(&tracks, window, cap);
    for s in &mut scenes {
        s.env_id = env_id;
    }
    Ok(scenes)
}
