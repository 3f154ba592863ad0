//! Accuracy/efficiency reward for one pruning decision.

use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::surgery::{apply_action, kept_count, ActionVector};
use crate::train::{accuracy, fit, FitConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    ClassificationAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Allowed accuracy drop `b`, in percentage points.
    pub bound: f64,
    /// Reference accuracy `p*`, in percent.
    pub baseline_accuracy: f64,
    /// Fine-tuning applied to each surgered rollout model.
    pub finetune: FitConfig,
    pub metric: Metric,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            bound: 2.0,
            baseline_accuracy: 100.0,
            finetune: FitConfig { epochs: 1, max_samples: Some(256), ..FitConfig::default() },
            metric: Metric::ClassificationAccuracy,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bound <= 0.0 || !self.bound.is_finite() {
            return Err(Error::Config(format!("drop bound must be positive, got {}", self.bound)));
        }
        if !(0.0..=100.0).contains(&self.baseline_accuracy) {
            return Err(Error::Config(format!("baseline accuracy {} is outside [0, 100]", self.baseline_accuracy)));
        }
        Ok(())
    }
}

/// `(b − (p* − p̂)) / b`.
pub fn accuracy_term(p_hat: f64, cfg: &RewardConfig) -> f64 {
    (cfg.bound - (cfg.baseline_accuracy - p_hat)) / cfg.bound
}

/// `ln(N / C)`.
pub fn efficiency_term(filters: usize, kept: usize) -> Result<f64> {
    if kept == 0 {
        return Err(Error::InvalidAction("cannot score an action that keeps no filter".into()));
    }
    if kept > filters {
        return Err(Error::InvalidArgument(format!("kept {kept} of only {filters} filters")));
    }
    Ok((filters as f64 / kept as f64).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub p_hat: f64,
    pub psi: f64,
    pub phi: f64,
    pub reward: f64,
    pub kept: usize,
    pub filters: usize,
}

impl RewardBreakdown {
    pub fn compute(p_hat: f64, cfg: &RewardConfig, filters: usize, kept: usize) -> Result<Self> {
        let psi = accuracy_term(p_hat, cfg);
        let phi = efficiency_term(filters, kept)?;
        Ok(Self { p_hat, psi, phi, reward: psi * phi, kept, filters })
    }
}

/// Surgery, fine-tuning on `train`, and scoring on `val`. `base` is not
/// modified.
pub fn evaluate_rollout(
    base: &ModelGraph,
    action: &ActionVector,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    cfg: &RewardConfig,
    seed: u64,
) -> Result<RewardBreakdown> {
    let mut model = apply_action(base, action)?;
    if cfg.finetune.epochs > 0 {
        fit(&mut model, train, &cfg.finetune, seed)?;
    }
    let p_hat = accuracy(&model, val)?;
    RewardBreakdown::compute(p_hat, cfg, action.len(), kept_count(action))
}

/// Anything that can score a sampled action. `seed` drives any randomness
/// inside the evaluation.
pub trait RolloutEvaluator: Sync {
    fn evaluate(&self, action: &ActionVector, seed: u64) -> Result<f64>;
}

impl<F> RolloutEvaluator for F
where
    F: Fn(&ActionVector, u64) -> Result<f64> + Sync,
{
    fn evaluate(&self, action: &ActionVector, seed: u64) -> Result<f64> {
        self(action, seed)
    }
}

/// The standard evaluator: [`evaluate_rollout`] against fixed data.
pub struct FinetuneEvaluator<'a> {
    pub base: &'a ModelGraph,
    pub train: &'a LabeledImageSet,
    pub val: &'a LabeledImageSet,
    pub cfg: &'a RewardConfig,
}

impl RolloutEvaluator for FinetuneEvaluator<'_> {
    fn evaluate(&self, action: &ActionVector, seed: u64) -> Result<f64> {
        let r = evaluate_rollout(self.base, action, self.train, self.val, self.cfg, seed)?;
        if !r.reward.is_finite() {
            return Err(Error::Numeric(format!("rollout reward is {}", r.reward)));
        }
        Ok(r.reward)
    }
}
