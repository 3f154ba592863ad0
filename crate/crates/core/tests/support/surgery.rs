//! Random (network, action) pairs and the zero-masking oracle.

use prunekit::model::{build_toy_cnn, ModelGraph, ToyCnnConfig};
use prunekit::surgery::{apply_action, ActionVector};
use prunekit::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random plain or residual toy network with non-zero biases.
pub fn random_net(rng: &mut ChaCha8Rng) -> ModelGraph {
    let residual = rng.random_bool(0.4);
    let depth = rng.random_range(2..=4);
    let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let size = rng.random_range(3..=9);
    let cfg = ToyCnnConfig {
        name: "random".into(),
        widths,
        num_classes: rng.random_range(2..=5),
        input_shape: [rng.random_range(1..=3), size, size],
        residual,
        coupled: residual && rng.random_bool(0.5),
        seed: rng.random(),
    };
    let mut m = build_toy_cnn(&cfg).unwrap();
    for id in m.params().ids().collect::<Vec<_>>() {
        if m.params().param(id).name.ends_with(".bias") {
            for v in m.params_mut().value_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    m
}

/// A random action on a random prunable unit, keeping at least one filter.
pub fn random_action(model: &ModelGraph, rng: &mut ChaCha8Rng) -> ActionVector {
    let units = model.prunable_units();
    let unit = units[rng.random_range(0..units.len())];
    let n = model.conv_spec(model.conv_units()[unit]).out_channels;
    let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    if !bits.iter().any(|b| *b) {
        bits[rng.random_range(0..n)] = true;
    }
    ActionVector::new(unit, bits)
}

/// max |surgered(x) − masked(x)| on a random batch.
pub fn equivalence_gap(model: &ModelGraph, action: &ActionVector, rng: &mut ChaCha8Rng) -> f64 {
    let pruned = apply_action(model, action).unwrap();
    let [c, h, w] = model.input_shape();
    let x = Tensor::randn(&[3, c, h, w], 1.0, rng);
    let masked = model.logits_masked(&x, &[(action.layer_index, action.mask())]).unwrap();
    pruned.logits(&x).unwrap().max_abs_diff(&masked).unwrap()
}

/// Runs one seeded case, returning the gap and whether it crossed a
/// conv→fc boundary or sat inside a residual block.
pub fn case(seed: u64) -> (f64, bool, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_net(&mut rng);
    let action = random_action(&model, &mut rng);
    let gap = equivalence_gap(&model, &action, &mut rng);
    let last_prunable = *model.prunable_units().last().unwrap() == model.conv_units().len() - 1;
    let fc_boundary = action.layer_index == model.conv_units().len() - 1 && last_prunable;
    let residual = model.layers().iter().any(|l| matches!(l, prunekit::model::LayerSpec::Residual(_)));
    (gap, fc_boundary, residual)
}
