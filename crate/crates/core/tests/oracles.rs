use rand::Rng;
use tembed_core::embed::{
    concat_conv, decompose_concat_conv, decomposed_forward, kaiming_uniform, sinusoidal, BiasInit, ConcatConvParams,
    SinusoidalSpec,
};
use tembed_core::norm::{normalize, NormKind, NormSpec};
use tembed_core::rng::{normal_tensor, seeded};
use tembed_core::tasks::{gen_field_dataset, teacher_matrix, time_blind_floor, TaskConfig, TaskKind, TeacherField};
use tembed_core::{Padding, Shape, Tape, Tensor};

#[test]
fn concat_conv_decomposes_over_200_instances() {
    let mut rng = seeded(20240);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let cin = rng.random_range(1..5);
        let cout = rng.random_range(1..5);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let side = k + rng.random_range(0..5);
        let n = rng.random_range(1..3);
        let params = ConcatConvParams {
            kernel: kaiming_uniform(&mut rng, Shape::new(cout, cin + 1, k, k)),
            bias: Some(BiasInit::Default.draw(&mut rng, cout, (cin + 1) * k * k)),
            padding: Padding::Valid,
        };
        let x = normal_tensor(&mut rng, Shape::new(n, cin, side, side));
        let t = rng.random_range(-2.0..2.0);
        let a = concat_conv(&x, t, &params).unwrap();
        let b = decomposed_forward(&x, t, &decompose_concat_conv(&params), Padding::Valid).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    assert!(worst < 1e-12, "worst deviation {worst:e}");
}

#[test]
fn hand_computed_concat_conv() {
    // One 2x2 input channel, 1x1 kernel [2 | 3]: y = 2 x + 3 t + 0.5.
    let params = ConcatConvParams {
        kernel: Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![2.0, 3.0]).unwrap(),
        bias: Some(Tensor::scalar(0.5)),
        padding: Padding::Valid,
    };
    let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -1.0, 0.0, 4.0]).unwrap();
    let y = concat_conv(&x, 0.5, &params).unwrap();
    assert_eq!(y.data(), &[4.0, 0.0, 2.0, 10.0]);
    assert_eq!(decompose_concat_conv(&params).offset, vec![3.0]);
}

fn offset_gradient(kind: NormKind, x: &Tensor, offset: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let ov = tape.leaf(offset.clone());
    let shifted = tape.add(xv, ov).unwrap();
    let y = tape.normalize(shifted, NormSpec::new(kind), None, None).unwrap();
    let r = tape.constant(normal_tensor(&mut seeded(77), x.shape()));
    let p = tape.mul(y, r).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss).unwrap().wrt(ov)
}

#[test]
fn per_channel_units_cancel_offsets_and_their_gradient() {
    let mut rng = seeded(5);
    for trial in 0..20 {
        let x = normal_tensor(&mut rng, Shape::new(3, 6, 4, 4));
        let offset = normal_tensor(&mut rng, Shape::new(1, 6, 1, 1)).scale(5.0);
        for kind in [NormKind::Batch, NormKind::Instance, NormKind::Group { groups: 6 }] {
            let spec = NormSpec::new(kind);
            let d = normalize(&x.add(&offset).unwrap(), spec)
                .unwrap()
                .max_abs_diff(&normalize(&x, spec).unwrap());
            assert!(d < 1e-12, "{kind:?} trial {trial}: output moved by {d:e}");
            let g = offset_gradient(kind, &x, &offset).max_abs();
            assert!(g < 1e-12, "{kind:?} trial {trial}: offset gradient {g:e}");
        }
    }
}

#[test]
fn shared_units_have_counterexamples() {
    let x = normal_tensor(&mut seeded(6), Shape::new(2, 6, 4, 4));
    let offset = Tensor::from_vec(Shape::new(1, 6, 1, 1), vec![2.0, -1.0, 0.5, 3.0, -2.5, 1.0]).unwrap();
    for kind in [
        NormKind::Layer,
        NormKind::Group { groups: 3 },
        NormKind::Group { groups: 2 },
        NormKind::Group { groups: 1 },
    ] {
        let spec = NormSpec::new(kind);
        let d = normalize(&x.add(&offset).unwrap(), spec)
            .unwrap()
            .max_abs_diff(&normalize(&x, spec).unwrap());
        assert!(d > 1e-3, "{kind:?}: only {d:e}");
        assert!(offset_gradient(kind, &x, &offset).max_abs() > 1e-6, "{kind:?}");
    }
}

#[test]
fn instance_norm_of_three_values() {
    // Population statistics of [1, 2, 3]: mean 2, variance 2/3.
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
    let y = normalize(&x, NormSpec::with_eps(NormKind::Instance, 0.0)).unwrap();
    let s = (1.5f64).sqrt();
    for (a, b) in y.data().iter().zip([-s, 0.0, s]) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn sinusoidal_features_at_known_times() {
    let spec = SinusoidalSpec { dim: 4, base: 10_000.0 };
    let f = sinusoidal(1.0, &spec);
    // Frequencies 1 and 10000^(-1/2) = 0.01.
    let want = [1f64.sin(), 0.01f64.sin(), 1f64.cos(), 0.01f64.cos()];
    for (a, b) in f.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(sinusoidal(0.0, &spec), vec![0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn sine_gate_floor_is_half_the_target_energy() {
    let task = TaskConfig::new(TaskKind::SineGate);
    let teacher = TeacherField::from_config(&task, 8).unwrap();
    let data = gen_field_dataset(&teacher, 64, Shape::new(1, 8, 2, 2), &mut seeded(3)).unwrap();
    let nodes = 64;
    let floor = time_blind_floor(&teacher, &data, nodes).unwrap();
    // Midpoint quadrature of sin^2 over a full period is exactly 1/2.
    let ah = teacher.eval(&data.h, &vec![0.25; data.h.shape().n]).unwrap();
    let energy = ah.data().iter().map(|v| v * v).sum::<f64>() / ah.len() as f64;
    assert!(
        (floor - 0.5 * energy).abs() < 1e-12 * energy,
        "{floor} vs {}",
        0.5 * energy
    );
}

#[test]
fn frozen_teacher_matrix() {
    let a = teacher_matrix(3, 1234);
    for (x, y) in a.iter().zip(FROZEN_TEACHER_3X3) {
        assert!((x - y).abs() < 1e-12, "{a:?}");
    }
}

const FROZEN_TEACHER_3X3: [f64; 9] = [
    -0.13540766691381,
    0.8108478434410902,
    0.21033171905629217,
    -0.31891789259139236,
    -0.4309739412280034,
    -0.279926545655496,
    0.07165564547861915,
    -0.3889533816646139,
    0.8283053361033755,
];
