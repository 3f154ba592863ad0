//! Structural removal of filters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;

/// Keep (`true`) / remove (`false`) decision for every filter of one conv
/// unit, with the log-probability of the draw under the policy that made it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    /// Index into [`ModelGraph::conv_units`].
    pub layer_index: usize,
    pub bits: Vec<bool>,
    pub log_prob: f64,
}

impl ActionVector {
    pub fn new(layer_index: usize, bits: Vec<bool>) -> Self {
        Self { layer_index, bits, log_prob: 0.0 }
    }

    pub fn keep_all(layer_index: usize, filters: usize) -> Self {
        Self::new(layer_index, vec![true; filters])
    }

    /// Keeps exactly `indices`.
    pub fn keep_only(layer_index: usize, filters: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; filters];
        for &i in indices {
            bits[i] = true;
        }
        Self::new(layer_index, bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
    }

    /// 1.0 for kept filters, 0.0 for removed ones.
    pub fn mask(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Number of kept filters.
pub fn kept_count(action: &ActionVector) -> usize {
    action.bits.iter().filter(|b| **b).count()
}

/// Builds a new model in which the addressed conv keeps exactly the filters
/// whose bit is set (order preserved), with its bias and every consumer of
/// its output sliced to match. `model` is left untouched.
pub fn apply_action(model: &ModelGraph, action: &ActionVector) -> Result<ModelGraph> {
    let unit = model.conv_unit(action.layer_index)?;
    let spec = model.conv_spec(unit);
    if !spec.prunable {
        return Err(Error::NotPrunable(action.layer_index));
    }
    if action.len() != spec.out_channels {
        return Err(Error::InvalidAction(format!(
            "action has {} bits but conv unit {} has {} filters",
            action.len(),
            action.layer_index,
            spec.out_channels
        )));
    }
    let kept = action.kept_indices();
    if kept.is_empty() {
        return Err(Error::InvalidAction("an action must keep at least one filter".into()));
    }
    if kept.len() == spec.out_channels {
        return Ok(model.clone());
    }
    let map: Vec<Option<usize>> = kept.into_iter().map(Some).collect();
    model.rewire_unit(unit, &map, &map)
}
