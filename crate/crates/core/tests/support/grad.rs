//! Finite-difference gradient cases over random shapes.

use prunekit::agent::{AgentConfig, PruningAgent};
use prunekit::autodiff::{Graph, Var};
use prunekit::model::{build_toy_cnn, ModelGraph, ToyCnnConfig};
use prunekit::optim::ParamStore;
use prunekit::surgery::ActionVector;
use prunekit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradient_error, relative_error, FD_STEP};

pub type Case = (&'static str, fn(u64) -> f64);

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Pushes entries away from zero so ReLU kinks sit far from the probe step.
fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.1 } else { 0.1 };
        }
    }
    t
}

/// `sum(op(params) * R)` for a fixed random `R`, so every output entry
/// carries a distinct weight.
fn projected(store: ParamStore, out_shape_probe: &dyn Fn(&mut Graph, &ParamStore) -> Var, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let y = out_shape_probe(&mut g, &store);
    let shape = g.value(y).shape().to_vec();
    let r = randn(&shape, rng);
    let build = move |g: &mut Graph, s: &ParamStore| {
        let y = out_shape_probe(g, s);
        let r = g.input(r.clone());
        let m = g.mul(y, r).unwrap();
        g.sum(m)
    };
    gradient_error(&store, &build, None)
}

fn conv2d(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, k) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
    let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
    conv_case(n, c, h, w, k, kh, kw, stride, pad, &mut rng)
}

/// Kernels wider than the input, as in the agent's 7×7 stages.
fn conv2d_wide_kernel(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=9));
    conv_case(1, rng.random_range(1..=2), h, w, 2, 7, 7, 1, 3, &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn conv_case(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut rng = rng.clone();
    let mut s = ParamStore::new();
    let x = s.insert("x", randn(&[n, c, h, w], &mut rng));
    let wt = s.insert("w", randn(&[k, c, kh, kw], &mut rng));
    let b = s.insert("b", randn(&[k], &mut rng));
    projected(
        s,
        &move |g, s| {
            let (x, wt, b) = (g.param(s, x), g.param(s, wt), g.param(s, b));
            g.conv2d(x, wt, b, stride, pad).unwrap()
        },
        &mut rng,
    )
}

fn max_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
    // Sizes need not be multiples of the window; the remainder is dropped.
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        kh * rng.random_range(1..=3) + rng.random_range(0..kh),
        kw * rng.random_range(1..=3) + rng.random_range(0..kw),
    ];
    let mut s = ParamStore::new();
    let x = s.insert("x", randn(&shape, &mut rng));
    projected(
        s,
        &move |g, s| {
            let x = g.param(s, x);
            g.max_pool(x, kh, kw).unwrap()
        },
        &mut rng,
    )
}

fn linear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, i, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
    let mut s = ParamStore::new();
    let x = s.insert("x", randn(&[n, i], &mut rng));
    let w = s.insert("w", randn(&[o, i], &mut rng));
    let b = s.insert("b", randn(&[o], &mut rng));
    projected(
        s,
        &move |g, s| {
            let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
            g.linear(x, w, b).unwrap()
        },
        &mut rng,
    )
}

fn relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let x = s.insert("x", away_from_zero(randn(&[rng.random_range(1..=3), rng.random_range(1..=7)], &mut rng)));
    projected(
        s,
        &move |g, s| {
            let x = g.param(s, x);
            g.relu(x)
        },
        &mut rng,
    )
}

fn sigmoid(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let x = s.insert("x", randn(&[rng.random_range(1..=9)], &mut rng));
    projected(
        s,
        &move |g, s| {
            let x = g.param(s, x);
            g.sigmoid(x)
        },
        &mut rng,
    )
}

fn add_mul_scale(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4)];
    let mut s = ParamStore::new();
    let a = s.insert("a", randn(&shape, &mut rng));
    let b = s.insert("b", randn(&shape, &mut rng));
    let k: f64 = rng.random_range(-2.0..2.0);
    projected(
        s,
        &move |g, s| {
            let (a, b) = (g.param(s, a), g.param(s, b));
            let p = g.mul(a, b).unwrap();
            let q = g.add(p, a).unwrap();
            g.scale(q, k)
        },
        &mut rng,
    )
}

fn reshape_flatten(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4));
    let mut s = ParamStore::new();
    let x = s.insert("x", randn(&[n, c, h, 2], &mut rng));
    projected(
        s,
        &move |g, s| {
            let x = g.param(s, x);
            let y = g.reshape(x, &[n, c * h, 2]).unwrap();
            g.flatten(y).unwrap()
        },
        &mut rng,
    )
}

fn channel_ops(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) =
        (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3));
    let scale: Vec<f64> = (0..c).map(|_| rng.random_range(-1.5..1.5)).collect();
    let out_c = rng.random_range(1..=5);
    let map: Vec<Option<usize>> =
        (0..out_c).map(|_| if rng.random_bool(0.8) { Some(rng.random_range(0..c)) } else { None }).collect();
    let mut s = ParamStore::new();
    let x = s.insert("x", randn(&[n, c, h, w], &mut rng));
    projected(
        s,
        &move |g, s| {
            let x = g.param(s, x);
            let y = g.channel_scale(x, scale.clone()).unwrap();
            g.channel_gather(y, map.clone()).unwrap()
        },
        &mut rng,
    )
}

fn softmax_ce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (rng.random_range(1..=5), rng.random_range(2..=6));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut s = ParamStore::new();
    let z = s.insert("z", Tensor::randn(&[n, k], 2.0, &mut rng));
    gradient_error(
        &s,
        &move |g: &mut Graph, s: &ParamStore| {
            let z = g.param(s, z);
            g.softmax_cross_entropy(z, &labels).unwrap()
        },
        None,
    )
}

fn bernoulli(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8);
    let actions: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let mut s = ParamStore::new();
    let z = s.insert("z", Tensor::randn(&[n], 2.0, &mut rng));
    gradient_error(
        &s,
        &move |g: &mut Graph, s: &ParamStore| {
            let z = g.param(s, z);
            let p = g.sigmoid(z);
            g.bernoulli_log_prob(p, &actions, 1e-6).unwrap()
        },
        None,
    )
}

fn model_loss(model: ModelGraph, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let [c, h, w] = model.input_shape();
    let images = Tensor::randn(&[2, c, h, w], 1.0, &mut rng);
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..model.num_classes())).collect();
    let store = model.params().clone();
    gradient_error(
        &store,
        &move |g: &mut Graph, s: &ParamStore| {
            let mut m = model.clone();
            *m.params_mut() = s.clone();
            m.loss(g, &images, &labels).unwrap()
        },
        None,
    )
}

fn toy_plain(seed: u64) -> f64 {
    let m = build_toy_cnn(&ToyCnnConfig {
        widths: vec![2, 3],
        num_classes: 3,
        input_shape: [1, 5, 5],
        seed,
        ..ToyCnnConfig::default()
    })
    .unwrap();
    model_loss(m, seed)
}

fn toy_residual(seed: u64) -> f64 {
    let m = build_toy_cnn(&ToyCnnConfig {
        widths: vec![3, 2],
        num_classes: 2,
        input_shape: [1, 4, 4],
        residual: true,
        coupled: true,
        seed,
        ..ToyCnnConfig::default()
    })
    .unwrap();
    model_loss(m, seed)
}

fn agent_error(mut agent: PruningAgent, seed: u64, sample: Option<usize>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Zero biases behind a dead channel put ReLU exactly on its kink.
    for id in agent.params().ids().collect::<Vec<_>>() {
        if agent.params().param(id).name.ends_with(".bias") {
            for v in agent.params_mut().value_mut(id).data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    let w = Tensor::randn(&[agent.filters(), agent.row_len()], 1.0, &mut rng);
    let x = agent.input_from_weight(&w).unwrap();
    let bits: Vec<bool> = (0..agent.filters()).map(|_| rng.random_bool(0.5)).collect();
    let action = ActionVector::new(agent.layer_index, bits);
    let analytic = agent.log_prob_grad(&x, &action).unwrap();
    let mut index = Vec::new();
    for id in agent.params().ids() {
        for k in 0..agent.params().value(id).numel() {
            index.push((id, k));
        }
    }
    let coords: Vec<usize> = match sample {
        Some(k) if k < index.len() => (0..k).map(|_| rng.random_range(0..index.len())).collect(),
        _ => (0..index.len()).collect(),
    };
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&c| {
            let (id, k) = index[c];
            let mut a = agent.clone();
            a.params_mut().value_mut(id).data_mut()[k] += FD_STEP;
            let up = a.log_prob(&x, &action).unwrap();
            a.params_mut().value_mut(id).data_mut()[k] -= 2.0 * FD_STEP;
            let down = a.log_prob(&x, &action).unwrap();
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    let sub: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    relative_error(&sub, &numeric)
}

fn fc_agent(seed: u64) -> f64 {
    let cfg = AgentConfig { hidden: 6, ..AgentConfig::default() };
    agent_error(PruningAgent::build(0, 4, 2, 3, 1, &cfg, seed).unwrap(), seed, None)
}

fn small_conv_agent(seed: u64) -> f64 {
    let cfg = AgentConfig { conv_widths: vec![2, 2, 2, 2], hidden: 4, ..AgentConfig::default() };
    agent_error(PruningAgent::build(0, 3, 2, 3, 3, &cfg, seed).unwrap(), seed, None)
}

fn default_conv_agent(seed: u64) -> f64 {
    agent_error(PruningAgent::build(0, 4, 2, 3, 3, &AgentConfig::default(), seed).unwrap(), seed, Some(60))
}

pub const CASES: &[Case] = &[
    ("conv2d", conv2d),
    ("conv2d_wide_kernel", conv2d_wide_kernel),
    ("max_pool", max_pool),
    ("linear", linear),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("add_mul_scale_sum", add_mul_scale),
    ("reshape_flatten", reshape_flatten),
    ("channel_scale_gather", channel_ops),
    ("softmax_cross_entropy", softmax_ce),
    ("bernoulli_log_prob", bernoulli),
    ("toy_cnn_plain", toy_plain),
    ("toy_cnn_residual", toy_residual),
    ("fc_agent", fc_agent),
    ("conv_agent_small", small_conv_agent),
    ("conv_agent_default", default_conv_agent),
];

/// Worst relative error of `case` over `seeds` seeds.
pub fn worst_error(case: &Case, seeds: u64) -> f64 {
    (0..seeds).map(|s| (case.1)(s)).fold(0.0, f64::max)
}
