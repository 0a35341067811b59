use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// The set of blocks skipped during the forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerMask {
    removed: BTreeSet<usize>,
}

impl LayerMask {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(removed: impl IntoIterator<Item = usize>) -> Self {
        Self { removed: removed.into_iter().collect() }
    }

    /// Builds a mask and checks every index against `n_layers`.
    pub fn checked(removed: impl IntoIterator<Item = usize>, n_layers: usize) -> Result<Self, ModelError> {
        let mask = Self::new(removed);
        mask.validate(n_layers)?;
        Ok(mask)
    }

    pub fn all(n_layers: usize) -> Self {
        Self::new(0..n_layers)
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), ModelError> {
        match self.removed.iter().find(|&&l| l >= n_layers) {
            Some(l) => Err(ModelError::Mask(format!("layer {l} outside 0..{n_layers}"))),
            None => Ok(()),
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.removed.contains(&layer)
    }

    pub fn with(&self, layer: usize) -> Self {
        let mut m = self.clone();
        m.removed.insert(layer);
        m
    }

    pub fn insert(&mut self, layer: usize) -> bool {
        self.removed.insert(layer)
    }

    pub fn len(&self) -> usize {
        self.removed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.removed.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.removed.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    /// Layers still active in an `n_layers` model.
    pub fn kept(&self, n_layers: usize) -> Vec<usize> {
        (0..n_layers).filter(|l| !self.contains(*l)).collect()
    }
}
