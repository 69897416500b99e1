//! Named trainable parameters with gradient buffers.
//!
//! Parameters live outside any computation graph so they persist across
//! training steps; graphs reference them by [`SlotId`] and `backward`
//! accumulates into the `grad` buffers here. Every parameter is assigned to
//! exactly one partition branch at creation, which is what the adaptation
//! machinery and the checkpoint manifest key off.

use crate::error::{GcrlError, Result};

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId(pub usize);

/// Which side of the parameter partition a tensor belongs to.
///
/// The z-branch holds the invariant-feature machinery that is frozen during
/// adaptation; everything else is adaptable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    ZBranch,
    Adaptable,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::ZBranch => "z-branch",
            Branch::Adaptable => "adaptable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "z-branch" => Ok(Branch::ZBranch),
            "adaptable" => Ok(Branch::Adaptable),
            other => Err(GcrlError::Partition(format!("unknown branch `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    pub branch: Branch,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat registry of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique; they key the checkpoint.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        branch: Branch,
    ) -> SlotId {
        let name = name.into();
        assert_eq!(values.len(), rows * cols, "param `{name}` size mismatch");
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate param name `{name}`"
        );
        let grad = vec![0.0; values.len()];
        self.entries.push(ParamEntry {
            name,
            rows,
            cols,
            values,
            grad,
            branch,
        });
        SlotId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, slot: SlotId) -> &ParamEntry {
        &self.entries[slot.0]
    }

    pub fn entry_mut(&mut self, slot: SlotId) -> &mut ParamEntry {
        &mut self.entries[slot.0]
    }

    pub fn values(&self, slot: SlotId) -> &[f64] {
        &self.entries[slot.0].values
    }

    pub fn grad(&self, slot: SlotId) -> &[f64] {
        &self.entries[slot.0].grad
    }

    pub fn slots(&self) -> impl Iterator<Item = SlotId> {
        (0..self.entries.len()).map(SlotId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<SlotId> {
        self.entries.iter().position(|e| e.name == name).map(SlotId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut store = ParamStore::new();
        let a = store.add("w", 2, 3, vec![0.0; 6], Branch::Adaptable);
        let b = store.add("b", 1, 3, vec![1.0; 3], Branch::ZBranch);
        assert_eq!(store.find("w"), Some(a));
        assert_eq!(store.find("b"), Some(b));
        assert_eq!(store.entry(a).branch, Branch::Adaptable);
        assert_eq!(store.scalar_count(), 9);
    }

    #[test]
    #[should_panic(expected = "duplicate param name")]
    fn duplicate_name_panics() {
        let mut store = ParamStore::new();
        store.add("w", 1, 1, vec![0.0], Branch::Adaptable);
        store.add("w", 1, 1, vec![0.0], Branch::Adaptable);
    }

    #[test]
    fn zero_grads_clears() {
        let mut store = ParamStore::new();
        let a = store.add("w", 1, 2, vec![0.0; 2], Branch::Adaptable);
        store.entry_mut(a).grad.copy_from_slice(&[3.0, 4.0]);
        store.zero_grads();
        assert_eq!(store.grad(a), &[0.0, 0.0]);
    }
}
