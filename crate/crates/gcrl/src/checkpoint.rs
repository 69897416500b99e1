//! Versioned binary model checkpoints.
//!
//! Layout: magic, format version, the resolved run-config text, then every
//! named parameter tensor with its partition branch. Loading rebuilds the
//! model from the embedded config and fills parameters by name, so a
//! checkpoint is self-contained and the partition manifest travels with the
//! weights. Writes are deterministic: identical models produce identical
//! bytes.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{GcrlError, Result};
use crate::model::GcrlModel;
use crate::numgrad::params::Branch;
use crate::numgrad::rng::{derived_rng, tags};

const MAGIC: &[u8; 8] = b"GCRLCKP1";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GcrlError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

/// Serializes a model and its resolved config.
pub fn to_bytes(model: &GcrlModel, cfg: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_bytes(&mut out, cfg.to_text().as_bytes());
    put_u64(&mut out, model.store.len() as u64);
    for slot in model.store.slots() {
        let e = model.store.entry(slot);
        put_bytes(&mut out, e.name.as_bytes());
        out.push(match e.branch {
            Branch::ZBranch => 0,
            Branch::Adaptable => 1,
        });
        put_u64(&mut out, e.rows as u64);
        put_u64(&mut out, e.cols as u64);
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(model: &GcrlModel, cfg: &RunConfig, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, to_bytes(model, cfg))?;
    Ok(())
}

/// Rebuilds the model from a checkpoint. Every parameter in the fresh model
/// must be present with matching shape and branch; extras are an error.
pub fn load(path: &Path) -> Result<(GcrlModel, RunConfig)> {
    let buf = fs::read(path)
        .map_err(|e| GcrlError::MissingInput(format!("{}: {e}", path.display())))?;
    from_bytes(&buf)
}

pub fn from_bytes(buf: &[u8]) -> Result<(GcrlModel, RunConfig)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(GcrlError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(GcrlError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_text = std::str::from_utf8(r.bytes()?)
        .map_err(|_| GcrlError::Checkpoint("config block is not utf-8".into()))?
        .to_string();
    let mut cfg = RunConfig::default();
    cfg.apply_text(&cfg_text)?;

    // Structure is deterministic in the config; values come from the file.
    let mut model = GcrlModel::new(
        cfg.model_config()?,
        &mut derived_rng(cfg.seed, tags::INIT, 0),
    )?;

    let n_params = r.u64()? as usize;
    if n_params != model.store.len() {
        return Err(GcrlError::Checkpoint(format!(
            "checkpoint has {n_params} tensors, model defines {}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; model.store.len()];
    for _ in 0..n_params {
        let name = std::str::from_utf8(r.bytes()?)
            .map_err(|_| GcrlError::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let branch = match r.take(1)?[0] {
            0 => Branch::ZBranch,
            1 => Branch::Adaptable,
            other => {
                return Err(GcrlError::Checkpoint(format!("bad branch tag {other}")));
            }
        };
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let slot = model
            .store
            .find(&name)
            .ok_or_else(|| GcrlError::Checkpoint(format!("unknown tensor `{name}`")))?;
        let e = model.store.entry_mut(slot);
        if (e.rows, e.cols) != (rows, cols) {
            return Err(GcrlError::Checkpoint(format!(
                "tensor `{name}`: shape {rows}x{cols} vs model {}x{}",
                e.rows, e.cols
            )));
        }
        if e.branch != branch {
            return Err(GcrlError::Partition(format!(
                "tensor `{name}`: checkpoint branch {:?} vs model {:?}",
                branch, e.branch
            )));
        }
        e.values = values;
        seen[slot.0] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(GcrlError::Checkpoint(format!(
            "tensor `{}` missing from checkpoint",
            model.store.entry(crate::numgrad::params::SlotId(missing)).name
        )));
    }
    model.verify_partition()?;
    Ok((model, cfg))
}
