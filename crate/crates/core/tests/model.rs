use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scai::autodiff::{Graph, ParamStore};
use scai::pa::Halting;
use scai::tensor::Tensor;
use scai::{ExitRunner, ScaiConfig, ScaiModel};

fn curve(width: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..width).map(|_| rng.random::<f64>()).collect()
}

fn small(pa: bool) -> ScaiModel {
    ScaiModel::build(ScaiConfig {
        input_width: 64,
        pa_enabled: pa,
        seed: 5,
        ..ScaiConfig::default().with_depth(4, 2, 4)
    })
    .unwrap()
}

#[test]
fn default_geometry() {
    let config = ScaiConfig::default();
    assert_eq!(config.widths(), vec![400, 200, 100, 50]);
    let model = ScaiModel::build(config.clone()).unwrap();
    for (l, (w, c)) in [(400, 16), (200, 32), (100, 64), (50, 128)].into_iter().enumerate() {
        assert_eq!(model.feature_shape(l + 1), [c, w]);
    }
    assert_eq!(model.feature_shape(0), [1, 400]);
    assert_eq!(model.params().num_scalars() as u128, config.parameter_count());
    let costs = model.static_cost_table();
    assert_eq!(costs.per_exit, vec![1_363_440, 4_339_920, 10_184_080, 21_763_600]);
}

#[test]
fn static_costs_from_first_principles() {
    // Recount exit 1 of the default model by hand.
    let (c, w, s, k) = (16u64, 400u64, 4u64, 12u64);
    let transfer = c * 3 * w;
    let shortcut = c * w;
    let units = s * c * c * 3 * w;
    let halting = (s - 1) * (3 * c * w + c * w + c);
    let accumulate = s * c * w;
    let head = c * w + k * c;
    let model = ScaiModel::build(ScaiConfig::default()).unwrap();
    assert_eq!(
        model.static_cost_table().exit_cost(1),
        transfer + shortcut + units + halting + accumulate + head
    );
}

#[test]
fn single_channel_conv_costs_1200() {
    // Block 1 of a one-channel model: its transfer conv alone is 1·1·3·400.
    let model = ScaiModel::build(ScaiConfig {
        channels: vec![1],
        units: vec![1],
        blocks: 1,
        pa_enabled: false,
        ..ScaiConfig::default()
    })
    .unwrap();
    let transfer_and_shortcut = 1200 + 400;
    let unit = 1200;
    let head = 400 + 12;
    assert_eq!(model.static_cost_table().exit_cost(1), transfer_and_shortcut + unit + head);
}

#[test]
fn one_block_model_works() {
    let model = ScaiModel::build(ScaiConfig {
        input_width: 32,
        ..ScaiConfig::default().with_depth(1, 3, 4)
    })
    .unwrap();
    let out = model.forward_all_exits(&curve(32, 1)).unwrap();
    assert_eq!(out.len(), 1);
    assert!((out[0].probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(model.forward_to_exit(&curve(32, 1), 2).is_err());
    assert!(model.forward_to_exit(&curve(32, 1), 0).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ScaiConfig::default();
    for bad in [
        ScaiConfig { blocks: 0, ..base.clone() },
        ScaiConfig { units: vec![4, 4, 0, 4], ..base.clone() },
        ScaiConfig { channels: vec![16, 32], ..base.clone() },
        ScaiConfig { epsilon: 0.0, ..base.clone() },
        ScaiConfig { epsilon: 1.0, ..base.clone() },
        ScaiConfig { input_width: 6, ..base.clone() },
        ScaiConfig { num_classes: 0, ..base.clone() },
    ] {
        assert!(ScaiModel::build(bad).is_err());
    }
}

#[test]
fn wrong_input_width_is_an_error() {
    let model = small(true);
    assert!(model.forward_to_exit(&curve(63, 0), 1).is_err());
}

#[test]
fn build_is_deterministic_per_seed() {
    let a = small(true);
    let b = small(true);
    assert_eq!(a.params(), b.params());
    let c = ScaiModel::build(ScaiConfig {
        seed: 6,
        ..a.config().clone()
    })
    .unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn untrained_model_is_near_uniform() {
    let model = ScaiModel::build(ScaiConfig::default()).unwrap();
    let out = model.forward_all_exits(&curve(400, 2)).unwrap();
    for o in out {
        // Residual activations grow with depth, so later heads drift further.
        assert!(o.confidence >= 1.0 / 12.0 && o.confidence < 0.25, "{}", o.confidence);
    }
}

#[test]
fn zero_and_one_hot_heads() {
    let mut model = small(false);
    let c = model.block_channels(1);
    let id = model.params().id("exit1.weight").unwrap();
    *model.params_mut().get_mut(id) = Tensor::zeros(vec![12, c]).with_grad();
    let out = model.forward_to_exit(&curve(64, 3), 1).unwrap();
    for p in &out.probs {
        assert!((p - 1.0 / 12.0).abs() < 1e-15);
    }
    let b = model.params().id("exit1.bias").unwrap();
    let mut bias = vec![0.0; 12];
    bias[3] = 10.0;
    *model.params_mut().get_mut(b) = Tensor::from_vec(bias).with_grad();
    let out = model.forward_to_exit(&curve(64, 3), 1).unwrap();
    assert_eq!(out.prediction, 3);
    assert!(out.confidence > 0.999);
}

#[test]
fn prefix_property() {
    for pa in [false, true] {
        let model = small(pa);
        let x = curve(64, 4);
        let all = model.forward_all_exits(&x).unwrap();
        for l in 1..=4 {
            let alone = model.forward_to_exit(&x, l).unwrap();
            assert_eq!(alone.probs, all[l - 1].probs);
            assert_eq!(alone.flops_used, all[l - 1].flops_used);
        }
        let mut runner = ExitRunner::new(&model, &x).unwrap();
        for expected in &all {
            assert_eq!(&runner.advance().unwrap(), expected);
        }
        assert!(runner.is_finished());
    }
}

#[test]
fn resuming_from_features_matches() {
    let model = small(true);
    let x = curve(64, 5);
    let all = model.forward_all_exits(&x).unwrap();
    let mut runner = ExitRunner::new(&model, &x).unwrap();
    runner.advance().unwrap();
    runner.advance().unwrap();
    let spent = runner.flops();
    let mut resumed = ExitRunner::from_features(&model, 2, runner.features()).unwrap();
    assert_eq!(resumed.next_exit(), 3);
    let third = resumed.advance().unwrap();
    assert_eq!(third.probs, all[2].probs);
    assert_eq!(spent + third.flops_used, all[2].flops_used);
    assert!(ExitRunner::from_features(&model, 2, Tensor::zeros(vec![3, 3])).is_err());
    assert!(ExitRunner::from_features(&model, 4, Tensor::zeros(vec![1, 64])).is_err());
}

#[test]
fn realized_cost_never_exceeds_static() {
    let model = ScaiModel::build(ScaiConfig {
        input_width: 64,
        halt_bias_init: 1.0,
        ..ScaiConfig::default().with_depth(3, 4, 4)
    })
    .unwrap();
    let costs = model.static_cost_table();
    for seed in 0..10 {
        let out = model.forward_all_exits(&curve(64, seed)).unwrap();
        for o in &out {
            assert!(o.flops_used <= costs.exit_cost(o.exit_index));
        }
        let full = model.forward_all_exits_with(&curve(64, seed), Halting::ForceFull).unwrap();
        for o in &full {
            assert_eq!(o.flops_used, costs.exit_cost(o.exit_index));
        }
    }
}

#[test]
fn cost_table_csv() {
    let model = small(false);
    let csv = model.static_cost_table().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "exit_index,static_flops");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn graph_forward_matches_runner() {
    let model = small(true);
    let x = curve(64, 6);
    let mut g = Graph::new(model.params());
    let input = g.constant(model.input_tensor(&x).unwrap());
    let pass = model.forward_graph(&mut g, input, 4, Some(model.config().halting())).unwrap();
    let all = model.forward_all_exits(&x).unwrap();
    for (p, o) in pass.probs.iter().zip(&all) {
        assert_eq!(g.value(*p), o.probs.as_slice());
    }
    assert_eq!(pass.ponders.len(), 4);
    let empty = ParamStore::new();
    assert!(ScaiModel::from_parts(model.config().clone(), empty).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_are_distributions(seed in 0u64..1000, bias in -3.0f64..3.0) {
        let model = ScaiModel::build(ScaiConfig {
            input_width: 32,
            halt_bias_init: bias,
            seed,
            ..ScaiConfig::default().with_depth(3, 3, 2)
        }).unwrap();
        let costs = model.static_cost_table();
        let out = model.forward_all_exits(&curve(32, seed)).unwrap();
        let mut last = 0;
        for o in &out {
            prop_assert_eq!(o.probs.len(), 12);
            prop_assert!((o.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(o.flops_used > last);
            prop_assert!(o.flops_used <= costs.exit_cost(o.exit_index));
            last = o.flops_used;
        }
        for l in 1..costs.len() {
            prop_assert!(costs.per_exit[l - 1] < costs.per_exit[l]);
        }
    }
}
