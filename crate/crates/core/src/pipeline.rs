//! Whole-network pruning, layer by layer from the input upwards, plus the
//! magnitude and random baselines.

use std::fmt;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::reinforce::{train_agent_one_layer, TrainLog, TrainerConfig};
use crate::report::{median_inference_ms, PruneReport, TimingReport};
use crate::reward::RewardConfig;
use crate::rng;
use crate::surgery::{apply_action, ActionVector};
use crate::tensor::Tensor;
use crate::train::{accuracy, fit, FitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    Learned,
    L1,
    Random,
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMethod::Learned => "learned",
            PruneMethod::L1 => "l1",
            PruneMethod::Random => "random",
        })
    }
}

impl std::str::FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(PruneMethod::Learned),
            "l1" => Ok(PruneMethod::L1),
            "random" => Ok(PruneMethod::Random),
            other => Err(Error::Config(format!("unknown method {other:?} (learned, l1, random)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub warmup: usize,
    pub runs: usize,
    pub batch: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { warmup: 5, runs: 50, batch: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneRunConfig {
    /// Allowed validation accuracy drop, in percentage points.
    pub bound: f64,
    /// Conv unit indices to prune, in order. `None` means every prunable
    /// unit, ascending.
    pub layers: Option<Vec<usize>>,
    pub trainer: TrainerConfig,
    pub agent: AgentConfig,
    pub rollout_finetune: FitConfig,
    pub post_finetune: FitConfig,
    /// Keep the reward's reference accuracy at the unpruned network's value
    /// instead of re-measuring it after every layer.
    pub fixed_pstar: bool,
    pub seed: u64,
    /// Wall-clock inference measurement; off unless requested.
    pub timing: Option<TimingConfig>,
}

impl Default for PruneRunConfig {
    fn default() -> Self {
        Self {
            bound: 2.0,
            layers: None,
            trainer: TrainerConfig::default(),
            agent: AgentConfig::default(),
            rollout_finetune: RewardConfig::default().finetune,
            post_finetune: FitConfig { epochs: 2, ..FitConfig::default() },
            fixed_pstar: false,
            seed: 0,
            timing: None,
        }
    }
}

impl PruneRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bound <= 0.0 || !self.bound.is_finite() {
            return Err(Error::Config(format!("drop bound must be positive, got {}", self.bound)));
        }
        self.trainer.validate()?;
        if let Some(layers) = &self.layers {
            let mut seen = layers.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != layers.len() {
                return Err(Error::Config("layer list contains duplicates".into()));
            }
        }
        Ok(())
    }

    /// The units this run prunes, checked against `model`.
    pub fn resolve_layers(&self, model: &ModelGraph) -> Result<Vec<usize>> {
        let prunable = model.prunable_units();
        match &self.layers {
            None => Ok(prunable),
            Some(list) => {
                let units = model.conv_units().len();
                for &l in list {
                    if l >= units {
                        return Err(Error::Config(format!("layer {l} does not exist (model has {units} conv units)")));
                    }
                    if !prunable.contains(&l) {
                        return Err(Error::NotPrunable(l));
                    }
                }
                Ok(list.clone())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub model: ModelGraph,
    pub report: PruneReport,
    /// One log per layer the agent was trained on.
    pub logs: Vec<TrainLog>,
}

fn post_finetune(model: &mut ModelGraph, train: &LabeledImageSet, cfg: &PruneRunConfig, layer: usize) -> Result<()> {
    if cfg.post_finetune.epochs > 0 {
        fit(model, train, &cfg.post_finetune, rng::derive_seed(cfg.seed, &[2, layer as u64]))?;
    }
    Ok(())
}

fn finish(
    method: PruneMethod,
    f: &ModelGraph,
    model: ModelGraph,
    layers: &[usize],
    val: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &PruneRunConfig,
    logs: Vec<TrainLog>,
) -> Result<PruneOutcome> {
    let bound = (method == PruneMethod::Learned).then_some(cfg.bound);
    let mut report = PruneReport::from_models(method, cfg.seed, bound, f, &model, layers, val, test)?;
    if let Some(t) = &cfg.timing {
        let n = t.batch.min(val.len()).max(1);
        let idx: Vec<usize> = (0..n).collect();
        let (images, _): (Tensor, _) = val.batch(&idx)?;
        report.timing = Some(TimingReport {
            warmup: t.warmup,
            runs: t.runs,
            batch: n,
            before_ms: median_inference_ms(f, &images, t.warmup, t.runs)?,
            after_ms: median_inference_ms(&model, &images, t.warmup, t.runs)?,
        });
    }
    Ok(PruneOutcome { model, report, logs })
}

/// Learned pruning: per layer, train an agent against the current network,
/// apply its decision, fine-tune, and refresh the reference accuracy.
pub fn prune_network(
    f: &ModelGraph,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &PruneRunConfig,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    let layers = cfg.resolve_layers(f)?;
    let mut cur = f.clone();
    let mut p_star = accuracy(f, val)?;
    let mut logs = Vec::new();
    for &l in &layers {
        let action = if cfg.trainer.max_epochs == 0 {
            let n = cur.conv_spec(cur.conv_unit(l)?).out_channels;
            ActionVector::keep_all(l, n)
        } else {
            let reward = RewardConfig {
                bound: cfg.bound,
                baseline_accuracy: p_star,
                finetune: cfg.rollout_finetune.clone(),
                ..RewardConfig::default()
            };
            let seed = rng::derive_seed(cfg.seed, &[1, l as u64]);
            let (agent, log) = train_agent_one_layer(&cur, l, train, val, &reward, &cfg.trainer, &cfg.agent, seed)?;
            logs.push(log);
            agent.final_action(&agent.input_from_model(&cur)?)?
        };
        if action.bits.iter().all(|b| *b) {
            continue;
        }
        cur = apply_action(&cur, &action)?;
        post_finetune(&mut cur, train, cfg, l)?;
        if !cfg.fixed_pstar {
            p_star = accuracy(&cur, val)?;
        }
    }
    finish(PruneMethod::Learned, f, cur, &layers, val, test, cfg, logs)
}

/// Indices of the `keep` filters with the largest L1 norms, ascending.
/// Equal norms favour the lower index.
pub fn l1_keep_indices(weight: &Tensor, keep: usize) -> Result<Vec<usize>> {
    let n = *weight.shape().first().unwrap_or(&0);
    if keep == 0 || keep > n {
        return Err(Error::InvalidArgument(format!("cannot keep {keep} of {n} filters")));
    }
    let per = weight.numel() / n;
    let norms: Vec<f64> = weight.data().chunks(per).map(|f| f.iter().map(|v| v.abs()).sum()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

fn prune_with_counts(
    method: PruneMethod,
    f: &ModelGraph,
    keep_counts: &[(usize, usize)],
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &PruneRunConfig,
) -> Result<PruneOutcome> {
    let mut cur = f.clone();
    let prunable = f.prunable_units();
    let mut layers = Vec::with_capacity(keep_counts.len());
    for &(l, keep) in keep_counts {
        if !prunable.contains(&l) {
            return Err(Error::NotPrunable(l));
        }
        let unit = cur.conv_unit(l)?;
        let n = cur.conv_spec(unit).out_channels;
        if keep == 0 || keep > n {
            return Err(Error::InvalidArgument(format!("layer {l}: cannot keep {keep} of {n} filters")));
        }
        layers.push(l);
        if keep == n {
            continue;
        }
        let kept = match method {
            PruneMethod::L1 => l1_keep_indices(cur.unit_weight(unit), keep)?,
            PruneMethod::Random => {
                let mut r = rng::stream(cfg.seed, &[3, l as u64]);
                let mut v = sample(&mut r, n, keep).into_vec();
                v.sort_unstable();
                v
            }
            PruneMethod::Learned => unreachable!("learned pruning does not take keep counts"),
        };
        cur = apply_action(&cur, &ActionVector::keep_only(l, n, &kept))?;
        post_finetune(&mut cur, train, cfg, l)?;
    }
    finish(method, f, cur, &layers, val, test, cfg, Vec::new())
}

/// Keeps the largest-L1 filters at the given `(layer, count)` sizes, with
/// the same fine-tuning as the learned pipeline.
pub fn prune_l1_baseline(
    f: &ModelGraph,
    keep_counts: &[(usize, usize)],
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &PruneRunConfig,
) -> Result<PruneOutcome> {
    prune_with_counts(PruneMethod::L1, f, keep_counts, train, val, test, cfg)
}

/// Keeps uniformly random filter sets of the given sizes; `cfg.seed` fixes
/// the sets.
pub fn prune_random_baseline(
    f: &ModelGraph,
    keep_counts: &[(usize, usize)],
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    cfg: &PruneRunConfig,
) -> Result<PruneOutcome> {
    prune_with_counts(PruneMethod::Random, f, keep_counts, train, val, test, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::model::{build_toy_cnn, ToyCnnConfig};

    fn setup() -> (ModelGraph, LabeledImageSet) {
        let data = generate_synthetic(2, 4, [1, 8, 8], 0).unwrap();
        let m = build_toy_cnn(&ToyCnnConfig {
            widths: vec![4, 6],
            num_classes: 2,
            input_shape: [1, 8, 8],
            seed: 1,
            ..ToyCnnConfig::default()
        })
        .unwrap();
        (m, data)
    }

    #[test]
    fn l1_ranking_and_ties() {
        let w = Tensor::new(vec![3, 1], vec![3.0, -1.0, 2.0]).unwrap();
        assert_eq!(l1_keep_indices(&w, 2).unwrap(), vec![0, 2]);
        let tied = Tensor::new(vec![4, 1], vec![1.0, 2.0, -2.0, 2.0]).unwrap();
        assert_eq!(l1_keep_indices(&tied, 2).unwrap(), vec![1, 2]);
        assert!(l1_keep_indices(&w, 0).is_err());
    }

    #[test]
    fn full_keep_counts_are_identity() {
        let (m, d) = setup();
        let cfg = PruneRunConfig::default();
        for out in [
            prune_l1_baseline(&m, &[(0, 4), (1, 6)], &d, &d, None, &cfg).unwrap(),
            prune_random_baseline(&m, &[(0, 4), (1, 6)], &d, &d, None, &cfg).unwrap(),
        ] {
            assert_eq!(out.model.params().flat_values(), m.params().flat_values());
            assert_eq!(out.report.prune_ratio, 0.0);
        }
    }

    #[test]
    fn keep_count_zero_is_rejected() {
        let (m, d) = setup();
        assert!(prune_l1_baseline(&m, &[(0, 0)], &d, &d, None, &PruneRunConfig::default()).is_err());
    }

    #[test]
    fn random_baseline_is_reproducible() {
        let (m, d) = setup();
        let cfg = PruneRunConfig {
            post_finetune: FitConfig { epochs: 0, ..FitConfig::default() },
            ..PruneRunConfig::default()
        };
        let a = prune_random_baseline(&m, &[(0, 2), (1, 3)], &d, &d, None, &cfg).unwrap();
        let b = prune_random_baseline(&m, &[(0, 2), (1, 3)], &d, &d, None, &cfg).unwrap();
        assert_eq!(a.model.params().flat_values(), b.model.params().flat_values());
        assert_eq!(a.report.keep_counts(), vec![(0, 2), (1, 3)]);
    }

    #[test]
    fn zero_epoch_agent_keeps_everything() {
        let (m, d) = setup();
        let mut cfg = PruneRunConfig { layers: Some(vec![1]), ..PruneRunConfig::default() };
        cfg.trainer.max_epochs = 0;
        let out = prune_network(&m, &d, &d, None, &cfg).unwrap();
        assert_eq!(out.report.prune_ratio, 0.0);
        assert_eq!(out.report.val_drop, 0.0);
    }

    #[test]
    fn no_prunable_layers_is_a_no_op() {
        let (m, d) = setup();
        let mut frozen = m.clone();
        for u in frozen.conv_units() {
            frozen.conv_spec_mut(u).prunable = false;
        }
        let out = prune_network(&frozen, &d, &d, None, &PruneRunConfig::default()).unwrap();
        assert_eq!(out.model.params().flat_values(), m.params().flat_values());
        assert_eq!(out.report.prune_ratio, 0.0);
        assert!(out.report.layers.is_empty());
    }

    #[test]
    fn invalid_layer_and_bound() {
        let (m, d) = setup();
        let cfg = PruneRunConfig { layers: Some(vec![7]), ..PruneRunConfig::default() };
        assert!(matches!(prune_network(&m, &d, &d, None, &cfg), Err(Error::Config(_))));
        let cfg = PruneRunConfig { bound: 0.0, ..PruneRunConfig::default() };
        assert!(matches!(prune_network(&m, &d, &d, None, &cfg), Err(Error::Config(_))));
    }
}
