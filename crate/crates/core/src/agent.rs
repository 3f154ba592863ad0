//! Per-layer pruning policy: filter matrix in, one keep probability per
//! filter out.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph};
use crate::error::{Error, Result};
use crate::model::{ConvSpec, LayerSpec, ModelGraph, ModelMeta};
use crate::optim::{adam_step, AdamConfig, ParamStore};
use crate::surgery::ActionVector;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentArch {
    ConvAgent,
    FcAgent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Row lengths above this use the convolutional agent.
    pub conv_threshold: usize,
    pub conv_widths: Vec<usize>,
    pub conv_kernel: usize,
    pub hidden: usize,
    /// Probabilities are kept inside `[clamp, 1 - clamp]`.
    pub clamp: f64,
    /// Redraws allowed for an all-remove sample before the most likely
    /// filter is forced on.
    pub max_resample: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            conv_threshold: 16,
            conv_widths: vec![8, 16, 32, 32],
            conv_kernel: 7,
            hidden: 64,
            clamp: 1e-6,
            max_resample: 100,
        }
    }
}

/// Architecture chosen for a row length `m`.
pub fn arch_for(row_len: usize, cfg: &AgentConfig) -> AgentArch {
    if row_len > cfg.conv_threshold {
        AgentArch::ConvAgent
    } else {
        AgentArch::FcAgent
    }
}

#[derive(Clone, Debug)]
pub struct PruningAgent {
    pub layer_index: usize,
    filters: usize,
    row_len: usize,
    arch: AgentArch,
    net: ModelGraph,
    cfg: AgentConfig,
}

impl PruningAgent {
    /// Agent for a layer with `filters` filters of shape `channels`×`h`×`w`.
    pub fn build(
        layer_index: usize,
        filters: usize,
        channels: usize,
        h: usize,
        w: usize,
        cfg: &AgentConfig,
        seed: u64,
    ) -> Result<Self> {
        if filters == 0 || channels == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument("agent dimensions must be at least 1".into()));
        }
        if !(cfg.clamp > 0.0 && cfg.clamp < 0.5) {
            return Err(Error::Config(format!("agent clamp {} must lie in (0, 0.5)", cfg.clamp)));
        }
        let row_len = channels * h * w;
        let arch = arch_for(row_len, cfg);
        let mut layers = Vec::new();
        let (mut c, mut rows, mut cols) = (1, filters, row_len);
        if arch == AgentArch::ConvAgent {
            for &width in &cfg.conv_widths {
                layers.push(LayerSpec::Conv(ConvSpec::same(c, width, cfg.conv_kernel, false)));
                layers.push(LayerSpec::Relu);
                let (kh, kw) = (rows.min(2), cols.min(2));
                layers.push(LayerSpec::Pool { kh, kw });
                rows /= kh;
                cols /= kw;
                c = width;
            }
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Fc { in_dim: c * rows * cols, out_dim: cfg.hidden });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Fc { in_dim: cfg.hidden, out_dim: filters });

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (idx, layer) in layers.iter().enumerate() {
            for (name, shape) in crate::model::expected_params(idx, layer) {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                };
                params.insert(name, value);
            }
        }
        let net = ModelGraph::new(
            ModelMeta { name: format!("agent-{layer_index}"), version: 1, seed },
            [1, filters, row_len],
            filters,
            layers,
            params,
        )?;
        Ok(Self { layer_index, filters, row_len, arch, net, cfg: cfg.clone() })
    }

    /// Agent sized for conv unit `unit_index` of `model`.
    pub fn for_layer(model: &ModelGraph, unit_index: usize, cfg: &AgentConfig, seed: u64) -> Result<Self> {
        let unit = model.conv_unit(unit_index)?;
        let s = model.conv_spec(unit);
        Self::build(unit_index, s.out_channels, s.in_channels, s.kernel_h, s.kernel_w, cfg, seed)
    }

    pub fn arch(&self) -> AgentArch {
        self.arch
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.net.params_mut()
    }

    /// Rearranges a `[N, m, h, w]` weight into the agent's `[1, 1, N, M]`
    /// input, scaled so the largest magnitude is 1.
    pub fn input_from_weight(&self, weight: &Tensor) -> Result<Tensor> {
        if weight.numel() != self.filters * self.row_len || weight.shape().first() != Some(&self.filters) {
            return Err(Error::Shape(format!(
                "agent expects {} filters of {} values, got weight {:?}",
                self.filters,
                self.row_len,
                weight.shape()
            )));
        }
        agent_input(weight)
    }

    /// Agent input built from the current weights of the agent's layer.
    pub fn input_from_model(&self, model: &ModelGraph) -> Result<Tensor> {
        let unit = model.conv_unit(self.layer_index)?;
        self.input_from_weight(model.unit_weight(unit))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != [1, 1, self.filters, self.row_len] {
            return Err(Error::Shape(format!(
                "agent input must be [1, 1, {}, {}], got {:?}",
                self.filters,
                self.row_len,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Clamped keep probability per filter.
    pub fn probabilities(&self, input: &Tensor) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let logits = self.net.logits(input)?;
        let c = self.cfg.clamp;
        Ok(logits.data().iter().map(|&z| autodiff::sigmoid(z).clamp(c, 1.0 - c)).collect())
    }

    /// `count` independent draws; see [`sample_from_probs`].
    pub fn sample_actions(&self, input: &Tensor, count: usize, rng: &mut impl Rng) -> Result<Vec<ActionVector>> {
        let probs = self.probabilities(input)?;
        Ok((0..count).map(|_| sample_from_probs(self.layer_index, &probs, self.cfg.max_resample, rng)).collect())
    }

    /// Log-probability of `action` under the current policy.
    pub fn log_prob(&self, input: &Tensor, action: &ActionVector) -> Result<f64> {
        let probs = self.probabilities(input)?;
        check_action(action, self.filters)?;
        Ok(autodiff::bernoulli_log_prob(&probs, &action.bits, self.cfg.clamp))
    }

    /// Gradient of `Σ weights[i] · log π(actions[i])` with respect to every
    /// agent parameter, flattened in parameter order.
    pub fn weighted_log_prob_grad(
        &self,
        input: &Tensor,
        actions: &[ActionVector],
        weights: &[f64],
    ) -> Result<Vec<f64>> {
        let mut store = self.net.params().clone();
        store.zero_grad();
        self.record_objective(input, actions, weights, 1.0)?.accumulate_into(&mut store)?;
        Ok(store.flat_grads())
    }

    /// Gradient of `log π(action)`, flattened in parameter order.
    pub fn log_prob_grad(&self, input: &Tensor, action: &ActionVector) -> Result<Vec<f64>> {
        self.weighted_log_prob_grad(input, std::slice::from_ref(action), &[1.0])
    }

    /// One Adam ascent step on `Σ weights[i] · log π(actions[i])`.
    pub fn policy_step(
        &mut self,
        input: &Tensor,
        actions: &[ActionVector],
        weights: &[f64],
        adam: &AdamConfig,
    ) -> Result<()> {
        // Adam minimizes, so it is handed the negated objective.
        let grads = self.record_objective(input, actions, weights, -1.0)?;
        let store = self.net.params_mut();
        store.zero_grad();
        grads.accumulate_into(store)?;
        adam_step(store, adam, true)
    }

    fn record_objective(
        &self,
        input: &Tensor,
        actions: &[ActionVector],
        weights: &[f64],
        sign: f64,
    ) -> Result<autodiff::Gradients> {
        self.check_input(input)?;
        if actions.len() != weights.len() || actions.is_empty() {
            return Err(Error::InvalidArgument(format!("{} actions but {} weights", actions.len(), weights.len())));
        }
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let z = self.net.forward(&mut g, x)?;
        let p = g.sigmoid(z);
        let mut total = None;
        for (a, &w) in actions.iter().zip(weights) {
            check_action(a, self.filters)?;
            let lp = g.bernoulli_log_prob(p, &a.bits, self.cfg.clamp)?;
            let term = g.scale(lp, sign * w);
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        g.backward(total.expect("at least one action"))
    }

    /// Deterministic decision after training: keep every filter with
    /// probability at least one half, or the single most likely filter
    /// when none qualifies.
    pub fn final_action(&self, input: &Tensor) -> Result<ActionVector> {
        let probs = self.probabilities(input)?;
        let mut bits: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
        if !bits.iter().any(|b| *b) {
            bits[argmax(&probs)] = true;
        }
        let log_prob = autodiff::bernoulli_log_prob(&probs, &bits, self.cfg.clamp);
        Ok(ActionVector { layer_index: self.layer_index, bits, log_prob })
    }
}

fn check_action(action: &ActionVector, filters: usize) -> Result<()> {
    if action.len() != filters {
        return Err(Error::InvalidAction(format!("action has {} bits, agent has {filters} filters", action.len())));
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Reshapes `[N, ...]` to `[1, 1, N, M]` and divides by the largest
/// magnitude (an all-zero weight stays zero).
pub fn agent_input(weight: &Tensor) -> Result<Tensor> {
    let n = *weight.shape().first().ok_or_else(|| Error::Shape("agent input needs a filter axis".into()))?;
    if n == 0 {
        return Err(Error::Shape("agent input has no filters".into()));
    }
    let m = weight.numel() / n;
    let scale = weight.max_abs();
    let data = if scale > 0.0 { weight.data().iter().map(|v| v / scale).collect() } else { weight.data().to_vec() };
    Tensor::new(vec![1, 1, n, m], data)
}

/// Draws keep bits from independent Bernoulli(`probs`). An all-remove draw
/// is redrawn up to `max_resample` times; if every redraw is empty the most
/// likely filter is kept. `log_prob` is the Bernoulli log-likelihood of the
/// returned bits.
pub fn sample_from_probs(layer_index: usize, probs: &[f64], max_resample: usize, rng: &mut impl Rng) -> ActionVector {
    let mut bits = vec![false; probs.len()];
    for _ in 0..=max_resample {
        for (b, &p) in bits.iter_mut().zip(probs) {
            *b = rng.random::<f64>() < p;
        }
        if bits.iter().any(|b| *b) {
            break;
        }
    }
    if !bits.iter().any(|b| *b) && !probs.is_empty() {
        bits[argmax(probs)] = true;
    }
    let log_prob = autodiff::bernoulli_log_prob(probs, &bits, 0.0);
    ActionVector { layer_index, bits, log_prob }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input_for(agent: &PruningAgent, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&[agent.filters(), agent.row_len()], 1.0, &mut rng);
        agent.input_from_weight(&w).unwrap()
    }

    #[test]
    fn threshold_rule_examples() {
        let cfg = AgentConfig::default();
        let a = PruningAgent::build(0, 64, 3, 3, 3, &cfg, 0).unwrap();
        assert_eq!(a.arch(), AgentArch::ConvAgent);
        assert_eq!(a.probabilities(&input_for(&a, 1)).unwrap().len(), 64);
        let b = PruningAgent::build(0, 8, 1, 3, 3, &cfg, 0).unwrap();
        assert_eq!(b.arch(), AgentArch::FcAgent);
    }

    #[test]
    fn threshold_rule_exhaustive_small_dims() {
        let cfg = AgentConfig::default();
        for m in 1..=4 {
            for h in 1..=3 {
                for w in 1..=3 {
                    let expect = if m * h * w > 16 { AgentArch::ConvAgent } else { AgentArch::FcAgent };
                    assert_eq!(arch_for(m * h * w, &cfg), expect);
                }
            }
        }
        let a = PruningAgent::build(0, 1, 17, 1, 1, &cfg, 0).unwrap();
        assert_eq!(a.arch(), AgentArch::ConvAgent);
        assert!(a.probabilities(&input_for(&a, 0)).unwrap()[0] > 0.0);
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let a = PruningAgent::build(2, 12, 4, 3, 3, &AgentConfig::default(), 7).unwrap();
        for p in a.probabilities(&input_for(&a, 3)).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn degenerate_probabilities_keep_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_from_probs(0, &[1.0; 5], 100, &mut rng);
        assert!(a.bits.iter().all(|b| *b));
        assert_eq!(a.log_prob, 0.0);
    }

    #[test]
    fn half_probabilities_log_prob() {
        let lp = autodiff::bernoulli_log_prob(&[0.5, 0.5], &[true, false], 1e-6);
        assert!((lp - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_draws_fall_back_to_most_likely_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = sample_from_probs(0, &[1e-9, 3e-9, 2e-9], 3, &mut rng);
        assert_eq!(a.bits, vec![false, true, false]);
    }

    #[test]
    fn empirical_keep_frequency() {
        let probs = [0.1, 0.5, 0.8, 0.97];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let a = sample_from_probs(0, &probs, 100, &mut rng);
            for (c, b) in counts.iter_mut().zip(&a.bits) {
                *c += *b as usize;
            }
        }
        // All-remove draws have probability below 1e-3 here, too rare to
        // move the frequencies beyond the band.
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() < 3.0 * sigma + 1e-3, "{freq} vs {p}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = PruningAgent::build(0, 6, 2, 1, 1, &AgentConfig::default(), 5).unwrap();
        let x = input_for(&a, 2);
        let s1 = a.sample_actions(&x, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let s2 = a.sample_actions(&x, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn batched_gradient_is_sum_of_single_gradients() {
        let a = PruningAgent::build(0, 5, 2, 2, 1, &AgentConfig::default(), 1).unwrap();
        let x = input_for(&a, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actions = a.sample_actions(&x, 3, &mut rng).unwrap();
        let total = a.weighted_log_prob_grad(&x, &actions, &[1.0, 1.0, 1.0]).unwrap();
        let mut sum = vec![0.0; total.len()];
        for act in &actions {
            for (s, g) in sum.iter_mut().zip(a.log_prob_grad(&x, act).unwrap()) {
                *s += g;
            }
        }
        for (t, s) in total.iter().zip(&sum) {
            assert!((t - s).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_probabilities_give_tiny_gradient() {
        let mut a = PruningAgent::build(0, 3, 1, 2, 1, &AgentConfig::default(), 1).unwrap();
        let bias = a.params().id_of("3.bias").unwrap();
        a.params_mut().value_mut(bias).data_mut().copy_from_slice(&[30.0, -30.0, 30.0]);
        let x = input_for(&a, 1);
        let action = ActionVector::new(0, vec![true, false, true]);
        let g = a.log_prob_grad(&x, &action).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn policy_step_raises_log_prob() {
        let mut a = PruningAgent::build(0, 4, 3, 1, 1, &AgentConfig::default(), 2).unwrap();
        let x = input_for(&a, 0);
        let action = ActionVector::new(0, vec![true, false, false, true]);
        let before = a.log_prob(&x, &action).unwrap();
        a.policy_step(&x, std::slice::from_ref(&action), &[1.0], &AdamConfig { lr: 0.01, ..AdamConfig::default() })
            .unwrap();
        assert!(a.log_prob(&x, &action).unwrap() > before);
    }

    #[test]
    fn final_action_thresholds_at_half() {
        let mut a = PruningAgent::build(0, 3, 1, 1, 1, &AgentConfig::default(), 2).unwrap();
        let w = a.params().id_of("1.weight").unwrap();
        let b = a.params().id_of("3.bias").unwrap();
        a.params_mut().value_mut(w).data_mut().fill(0.0);
        a.params_mut().value_mut(b).data_mut().copy_from_slice(&[1.0, -1.0, 0.0]);
        let x = input_for(&a, 0);
        assert_eq!(a.final_action(&x).unwrap().bits, vec![true, false, true]);
        a.params_mut().value_mut(b).data_mut().copy_from_slice(&[-3.0, -1.0, -2.0]);
        assert_eq!(a.final_action(&x).unwrap().bits, vec![false, true, false]);
    }
}
