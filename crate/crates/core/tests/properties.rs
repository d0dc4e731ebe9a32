use proptest::prelude::*;
use tembed_core::blocks::{Block, BlockConfig, Pipeline};
use tembed_core::diagnostics::time_sensitivity;
use tembed_core::norm::{normalize, NormKind, NormSpec};
use tembed_core::rng::{normal_tensor, seeded};
use tembed_core::tensor::conv2d;
use tembed_core::{ActivationKind, Padding, Shape, Tensor};

fn padding() -> impl Strategy<Value = Padding> {
    prop_oneof![Just(Padding::Valid), Just(Padding::SameZero)]
}

fn activation() -> impl Strategy<Value = ActivationKind> {
    prop::sample::select(ActivationKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_its_input(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5]), pad in padding(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = seeded(seed);
        let x = normal_tensor(&mut rng, Shape::new(2, 3, 6, 6));
        let y = normal_tensor(&mut rng, Shape::new(2, 3, 6, 6));
        let w = normal_tensor(&mut rng, Shape::new(4, 3, k, k));
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &w, None, pad).unwrap();
        let rhs = conv2d(&x, &w, None, pad).unwrap().scale(a).add(&conv2d(&y, &w, None, pad).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-11);
    }

    #[test]
    fn per_channel_norms_ignore_channel_offsets_and_positive_scale(seed in any::<u64>(), scale in 0.1f64..10.0, groups_is_c in any::<bool>()) {
        let mut rng = seeded(seed);
        let x = normal_tensor(&mut rng, Shape::new(3, 4, 3, 3));
        let offset = normal_tensor(&mut rng, Shape::new(1, 4, 1, 1)).scale(10.0);
        let kinds = if groups_is_c { vec![NormKind::Group { groups: 4 }] } else { vec![NormKind::Instance, NormKind::Batch] };
        for kind in kinds {
            let spec = NormSpec::with_eps(kind, 0.0);
            let base = normalize(&x, spec).unwrap();
            let moved = normalize(&x.scale(scale).add(&offset).unwrap(), spec).unwrap();
            prop_assert!(base.max_abs_diff(&moved) < 1e-10, "{kind:?}");
        }
    }

    #[test]
    fn shared_units_ignore_a_common_offset(seed in any::<u64>(), c in -5.0f64..5.0, groups in prop::sample::select(vec![1usize, 2])) {
        let x = normal_tensor(&mut seeded(seed), Shape::new(2, 4, 3, 3));
        for kind in [NormKind::Layer, NormKind::Group { groups }] {
            let spec = NormSpec::new(kind);
            let d = normalize(&x, spec).unwrap().max_abs_diff(&normalize(&x.add(&Tensor::scalar(c)).unwrap(), spec).unwrap());
            prop_assert!(d < 1e-10, "{kind:?}");
        }
    }

    #[test]
    fn valid_per_channel_blocks_are_time_blind(
        seed in any::<u64>(),
        pipeline in prop::sample::select(vec![Pipeline::NodeConcatConv, Pipeline::NodeAdditive, Pipeline::DdpmStyle]),
        norm in prop::sample::select(vec![NormKind::Instance, NormKind::Batch]),
        act in activation(),
    ) {
        let cfg = BlockConfig { channels: 4, height: 5, width: 5, norm, padding: Padding::Valid, activation: act, seed, ..BlockConfig::new(pipeline) };
        let block = Block::from_config(&cfg).unwrap();
        let s = time_sensitivity(&block, 2, 5, &mut seeded(seed ^ 1)).unwrap();
        prop_assert!(s.max < 1e-10, "{}", s.max);
    }

    #[test]
    fn block_output_is_deterministic_in_the_seed(seed in any::<u64>(), t in 0.0f64..1.0) {
        let cfg = BlockConfig { channels: 4, height: 4, width: 4, seed, ..BlockConfig::new(Pipeline::DdpmStyle) };
        let x = normal_tensor(&mut seeded(seed), cfg.input_shape(2));
        let a = Block::from_config(&cfg).unwrap().forward(&x, &[t, t]).unwrap();
        let b = Block::from_config(&cfg).unwrap().forward(&x, &[t, t]).unwrap();
        prop_assert_eq!(a, b);
    }
}
