//! Policy-gradient oracles.

use prunekit::agent::{AgentConfig, PruningAgent};
use prunekit::data::{generate_synthetic, holdout_split, LabeledImageSet};
use prunekit::model::{build_toy_cnn, widen_conv, ModelGraph, ToyCnnConfig};
use prunekit::reinforce::{epoch_gradient, train_agent, TrainLog, TrainerConfig};
use prunekit::reward::{FinetuneEvaluator, RewardConfig};
use prunekit::surgery::{apply_action, kept_count, ActionVector};
use prunekit::tensor::Tensor;
use prunekit::train::{accuracy, fit, FitConfig};
use prunekit::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standardization written out independently of the library.
fn standardize(r: &[f64]) -> Vec<f64> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let sd = (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        vec![0.0; r.len()]
    } else {
        r.iter().map(|x| (x - mean) / sd).collect()
    }
}

pub struct Unbiasedness {
    /// (label, exact, sampled mean, standard error)
    pub rows: Vec<(String, f64, f64, f64)>,
}

impl Unbiasedness {
    pub fn worst_z(&self) -> f64 {
        self.rows.iter().map(|(_, e, m, se)| (m - e).abs() / se).fold(0.0, f64::max)
    }
}

/// Three-filter layer with reward `R(A) = C(A)`. The exact expected epoch
/// gradient sums over every `M`-tuple of non-empty actions under the
/// sampler's law; the estimate averages `epochs` independent epochs.
pub fn unbiasedness(epochs: usize, seed: u64) -> Unbiasedness {
    let agent = PruningAgent::build(0, 3, 1, 1, 1, &AgentConfig::default(), seed).unwrap();
    let x = agent.input_from_weight(&Tensor::new(vec![3, 1, 1, 1], vec![0.7, -0.2, 1.0]).unwrap()).unwrap();
    let p = agent.probabilities(&x).unwrap();
    let cfg = TrainerConfig { rollouts: 5, workers: 1, ..TrainerConfig::default() };
    let m = cfg.rollouts;

    let actions: Vec<ActionVector> =
        (1u8..8).map(|code| ActionVector::new(0, (0..3).map(|i| code >> i & 1 == 1).collect())).collect();
    let empty = (1.0 - p[0]) * (1.0 - p[1]) * (1.0 - p[2]);
    let q: Vec<f64> = actions
        .iter()
        .map(|a| a.bits.iter().zip(&p).map(|(&b, &pi)| if b { pi } else { 1.0 - pi }).product::<f64>() / (1.0 - empty))
        .collect();
    let grads: Vec<Vec<f64>> = actions.iter().map(|a| agent.log_prob_grad(&x, a).unwrap()).collect();
    let dim = grads[0].len();

    let mut exact = vec![0.0; dim];
    let mut idx = vec![0usize; m];
    loop {
        let weight: f64 = idx.iter().map(|&i| q[i]).product();
        let rewards: Vec<f64> = idx.iter().map(|&i| kept_count(&actions[i]) as f64).collect();
        for (r_hat, &i) in standardize(&rewards).iter().zip(&idx) {
            for (e, g) in exact.iter_mut().zip(&grads[i]) {
                *e += weight * r_hat * g;
            }
        }
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < actions.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == m {
                break;
            }
        }
        if k == m {
            break;
        }
    }

    // Final-layer bias coordinates: the last three values.
    let mut proj = Tensor::randn(&[dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 77)).into_data();
    let norm = proj.iter().map(|v| v * v).sum::<f64>().sqrt();
    proj.iter_mut().for_each(|v| *v /= norm);
    let reward = |a: &ActionVector, _: u64| -> Result<f64> { Ok(kept_count(a) as f64) };
    let mut samples: Vec<[f64; 4]> = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let (g, _) = epoch_gradient(&agent, &x, &reward, &cfg, seed, e).unwrap();
        samples.push([g[dim - 3], g[dim - 2], g[dim - 1], g.iter().zip(&proj).map(|(a, b)| a * b).sum()]);
    }
    let exact_vals =
        [exact[dim - 3], exact[dim - 2], exact[dim - 1], exact.iter().zip(&proj).map(|(a, b)| a * b).sum()];
    let labels = ["bias[0]", "bias[1]", "bias[2]", "random projection"];
    let n = epochs as f64;
    let rows = (0..4)
        .map(|k| {
            let mean = samples.iter().map(|s| s[k]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (labels[k].to_string(), exact_vals[k], mean, (var / n).sqrt())
        })
        .collect();
    Unbiasedness { rows }
}

/// A small trained network whose first conv has one working filter and
/// seven all-zero filters, with the data it was trained on.
pub struct PlantedLayer {
    pub model: ModelGraph,
    pub train: LabeledImageSet,
    pub val: LabeledImageSet,
    pub p_star: f64,
}

pub fn planted_layer() -> PlantedLayer {
    let data = generate_synthetic(4, 40, [1, 8, 8], 21).unwrap();
    let (train, val) = holdout_split(&data, 0.25, 3).unwrap();
    let mut m = build_toy_cnn(&ToyCnnConfig {
        name: "planted".into(),
        widths: vec![2, 6],
        num_classes: 4,
        input_shape: [1, 8, 8],
        seed: 8,
        ..ToyCnnConfig::default()
    })
    .unwrap();
    let single = ActionVector::new(0, vec![true, false]);
    m = apply_action(&m, &single).unwrap();
    fit(&mut m, &train, &FitConfig { epochs: 15, batch_size: 16, lr: 5e-3, ..FitConfig::default() }, 4).unwrap();
    let model = widen_conv(&m, 0, &[None; 7]).unwrap();
    let p_star = accuracy(&model, &val).unwrap();
    PlantedLayer { model, train, val, p_star }
}

/// Trains a fresh agent on the planted layer for `epochs` epochs with no
/// rollout fine-tuning.
pub fn planted_run(planted: &PlantedLayer, epochs: usize, seed: u64) -> (PruningAgent, Tensor, TrainLog) {
    let reward_cfg = RewardConfig {
        bound: 2.0,
        baseline_accuracy: planted.p_star,
        finetune: FitConfig { epochs: 0, ..FitConfig::default() },
        ..RewardConfig::default()
    };
    let trainer = TrainerConfig { max_epochs: epochs, convergence: None, workers: 1, ..TrainerConfig::default() };
    let mut agent = PruningAgent::for_layer(&planted.model, 0, &AgentConfig::default(), seed).unwrap();
    let x = agent.input_from_model(&planted.model).unwrap();
    let eval = FinetuneEvaluator { base: &planted.model, train: &planted.train, val: &planted.val, cfg: &reward_cfg };
    let log = train_agent(&mut agent, &x, &eval, &trainer, seed).unwrap();
    (agent, x, log)
}

/// (reward MA at epoch 50, at the last epoch, kept MA at 50, at the last).
pub fn trend(log: &TrainLog) -> (f64, f64, f64, f64) {
    let r = log.reward_moving_average(50);
    let k = log.kept_moving_average(50);
    (r[49], *r.last().unwrap(), k[49], *k.last().unwrap())
}
