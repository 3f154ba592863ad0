//! Policy-gradient training of one pruning agent.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, PruningAgent};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::optim::AdamConfig;
use crate::reward::{FinetuneEvaluator, RewardConfig, RolloutEvaluator};
use crate::rng;
use crate::surgery::{kept_count, ActionVector};
use crate::tensor::Tensor;

/// Standardizes to zero mean and unit population standard deviation. Equal
/// rewards map to all zeros.
pub fn normalize_rewards(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!("normalizing needs at least 2 rewards, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub action: ActionVector,
    pub reward: f64,
    pub normalized_reward: f64,
}

/// Early stop once the moving average of the epoch reward settles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceRule {
    pub window: usize,
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self { window: 50, tolerance: 1e-3, patience: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Rollouts per epoch (`M`).
    pub rollouts: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// `None` always runs `max_epochs`.
    pub convergence: Option<ConvergenceRule>,
    /// Concurrent rollout evaluations; 0 picks the core count capped at
    /// `rollouts`.
    pub workers: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self { rollouts: 5, lr: 0.01, max_epochs: 300, convergence: Some(ConvergenceRule::default()), workers: 0 }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts < 2 {
            return Err(Error::Config(format!("need at least 2 rollouts per epoch, got {}", self.rollouts)));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("agent learning rate must be positive, got {}", self.lr)));
        }
        if let Some(c) = &self.convergence {
            if c.window == 0 || c.patience == 0 {
                return Err(Error::Config("convergence window and patience must be at least 1".into()));
            }
        }
        Ok(())
    }

    fn effective_workers(&self) -> usize {
        let w = if self.workers == 0 { rayon::current_num_threads() } else { self.workers };
        w.clamp(1, self.rollouts.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_kept: f64,
    pub min_prob: f64,
    pub mean_prob: f64,
    pub max_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Converged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub layer_index: usize,
    pub entries: Vec<EpochEntry>,
    pub stop: StopReason,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trailing mean of `mean_reward` over up to `window` epochs ending at
    /// each epoch.
    pub fn reward_moving_average(&self, window: usize) -> Vec<f64> {
        moving_average(&self.entries.iter().map(|e| e.mean_reward).collect::<Vec<_>>(), window)
    }

    pub fn kept_moving_average(&self, window: usize) -> Vec<f64> {
        moving_average(&self.entries.iter().map(|e| e.mean_kept).collect::<Vec<_>>(), window)
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_csv_to(std::fs::File::create(path)?)
    }
}

fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// The rollouts of one epoch and the agent's probabilities when they were
/// drawn.
#[derive(Clone, Debug)]
pub struct EpochRollouts {
    pub probs: Vec<f64>,
    pub records: Vec<RolloutRecord>,
}

impl EpochRollouts {
    pub fn actions(&self) -> Vec<ActionVector> {
        self.records.iter().map(|r| r.action.clone()).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.normalized_reward).collect()
    }
}

/// Samples and scores the rollouts of epoch `epoch` without touching the
/// agent.
pub fn run_epoch_rollouts(
    agent: &PruningAgent,
    input: &Tensor,
    evaluator: &dyn RolloutEvaluator,
    cfg: &TrainerConfig,
    seed: u64,
    epoch: usize,
) -> Result<EpochRollouts> {
    let probs = agent.probabilities(input)?;
    let mut sample_rng = rng::stream(seed, &[epoch as u64, 0]);
    let actions = agent.sample_actions(input, cfg.rollouts, &mut sample_rng)?;
    let eval =
        |(i, a): (usize, &ActionVector)| evaluator.evaluate(a, rng::derive_seed(seed, &[epoch as u64, 1, i as u64]));
    let workers = cfg.effective_workers();
    let rewards: Vec<f64> = if workers <= 1 {
        actions.iter().enumerate().map(eval).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start rollout workers: {e}")))?;
        pool.install(|| actions.par_iter().enumerate().map(eval).collect::<Result<_>>())?
    };
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Numeric(format!("rollout reward is {r} at epoch {epoch}")));
    }
    let normalized = normalize_rewards(&rewards)?;
    let records = actions
        .into_iter()
        .zip(rewards)
        .zip(normalized)
        .map(|((action, reward), normalized_reward)| RolloutRecord { action, reward, normalized_reward })
        .collect();
    Ok(EpochRollouts { probs, records })
}

/// The epoch's policy-gradient estimate `Σ R̂ᵢ ∇ log π(Aᵢ)`, flattened in
/// agent parameter order.
pub fn epoch_gradient(
    agent: &PruningAgent,
    input: &Tensor,
    evaluator: &dyn RolloutEvaluator,
    cfg: &TrainerConfig,
    seed: u64,
    epoch: usize,
) -> Result<(Vec<f64>, EpochRollouts)> {
    let rollouts = run_epoch_rollouts(agent, input, evaluator, cfg, seed, epoch)?;
    let grad = agent.weighted_log_prob_grad(input, &rollouts.actions(), &rollouts.weights())?;
    Ok((grad, rollouts))
}

/// Trains `agent` in place: per epoch, sample `M` actions, score them,
/// standardize the rewards and take one Adam ascent step.
pub fn train_agent(
    agent: &mut PruningAgent,
    input: &Tensor,
    evaluator: &dyn RolloutEvaluator,
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut entries = Vec::new();
    let mut rewards = Vec::new();
    let mut stable = 0;
    let mut prev_avg: Option<f64> = None;
    let mut stop = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        let rollouts = run_epoch_rollouts(agent, input, evaluator, cfg, seed, epoch)?;
        agent.policy_step(input, &rollouts.actions(), &rollouts.weights(), &adam)?;
        if !agent.params().iter().all(|p| p.value.is_finite()) {
            return Err(Error::Numeric(format!("agent parameters diverged at epoch {epoch}")));
        }

        let m = rollouts.records.len() as f64;
        let mean_reward = rollouts.records.iter().map(|r| r.reward).sum::<f64>() / m;
        let mean_kept = rollouts.records.iter().map(|r| kept_count(&r.action) as f64).sum::<f64>() / m;
        let p = &rollouts.probs;
        entries.push(EpochEntry {
            epoch,
            mean_reward,
            mean_kept,
            min_prob: p.iter().cloned().fold(f64::INFINITY, f64::min),
            mean_prob: p.iter().sum::<f64>() / p.len() as f64,
            max_prob: p.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        });
        rewards.push(mean_reward);

        if let Some(rule) = &cfg.convergence {
            if rewards.len() >= rule.window {
                let avg = rewards[rewards.len() - rule.window..].iter().sum::<f64>() / rule.window as f64;
                if let Some(prev) = prev_avg {
                    if (avg - prev).abs() < rule.tolerance {
                        stable += 1;
                    } else {
                        stable = 0;
                    }
                }
                prev_avg = Some(avg);
                if stable >= rule.patience {
                    stop = StopReason::Converged;
                    break;
                }
            }
        }
    }
    Ok(TrainLog { layer_index: agent.layer_index, entries, stop })
}

/// Builds an agent for conv unit `layer` of `f` and trains it against
/// fine-tuned rollouts of `f`.
pub fn train_agent_one_layer(
    f: &ModelGraph,
    layer: usize,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    reward: &RewardConfig,
    trainer: &TrainerConfig,
    agent_cfg: &AgentConfig,
    seed: u64,
) -> Result<(PruningAgent, TrainLog)> {
    let unit = f.conv_unit(layer)?;
    if !f.conv_spec(unit).prunable {
        return Err(Error::NotPrunable(layer));
    }
    reward.validate()?;
    trainer.validate()?;
    let mut agent = PruningAgent::for_layer(f, layer, agent_cfg, rng::derive_seed(seed, &[0]))?;
    let input = agent.input_from_model(f)?;
    let evaluator = FinetuneEvaluator { base: f, train, val, cfg: reward };
    let log = train_agent(&mut agent, &input, &evaluator, trainer, rng::derive_seed(seed, &[1]))?;
    Ok((agent, log))
}
