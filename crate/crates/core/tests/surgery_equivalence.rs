mod support;

use proptest::prelude::*;
use prunekit::model::count_flops;
use prunekit::surgery::{apply_action, ActionVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::surgery::{case, equivalence_gap, random_action, random_net};

#[test]
fn fifty_seeded_cases_cover_fc_and_residual() {
    let (mut fc, mut res) = (0, 0);
    for seed in 0..50 {
        let (gap, at_fc, in_res) = case(seed);
        assert!(gap < 1e-9, "seed {seed}: gap {gap}");
        fc += at_fc as usize;
        res += in_res as usize;
    }
    assert!(fc >= 5 && res >= 5, "fc cases {fc}, residual cases {res}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn surgery_equals_zero_masking(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_net(&mut rng);
        let action = random_action(&model, &mut rng);
        prop_assert!(equivalence_gap(&model, &action, &mut rng) < 1e-9);
    }

    #[test]
    fn removing_any_filter_shrinks_flops_and_params(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_net(&mut rng);
        let action = random_action(&model, &mut rng);
        prop_assume!(action.bits.iter().any(|b| !*b));
        let pruned = apply_action(&model, &action).unwrap();
        let before = count_flops(&model, model.input_shape()).unwrap();
        let after = count_flops(&pruned, pruned.input_shape()).unwrap();
        prop_assert!(after.total_flops < before.total_flops);
        prop_assert!(pruned.num_params() < model.num_params());
        prop_assert_eq!(pruned.num_params(), support::closed_form_params(&pruned));
        prop_assert_eq!(after.total_flops, support::closed_form_flops(&pruned));
    }

    #[test]
    fn keep_all_after_surgery_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_net(&mut rng);
        let action = random_action(&model, &mut rng);
        let pruned = apply_action(&model, &action).unwrap();
        let n = pruned.conv_spec(pruned.conv_units()[action.layer_index]).out_channels;
        let again = apply_action(&pruned, &ActionVector::keep_all(action.layer_index, n)).unwrap();
        prop_assert_eq!(again.layers(), pruned.layers());
        prop_assert_eq!(again.params().flat_values(), pruned.params().flat_values());
        prop_assert!(support::output_is_logits(&pruned));
    }

    #[test]
    fn source_model_is_untouched(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_net(&mut rng);
        let snapshot = model.clone();
        let action = random_action(&model, &mut rng);
        apply_action(&model, &action).unwrap();
        prop_assert_eq!(model.layers(), snapshot.layers());
        prop_assert_eq!(model.params().flat_values(), snapshot.params().flat_values());
    }
}
