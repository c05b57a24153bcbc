use super::*;
use crate::feedback::Scale;
use crate::harness::gradcheck::{compare, finite_differences, naive_gradients, probe_batch, Engine, GradientSource};

fn single_unit(rule: RuleKind) -> Network {
    let spec = NetworkSpec {
        input_shape: vec![1],
        classes: 2,
        layers: vec![LayerSpec::Dense {
            units: 2,
            bias: false,
            relu: false,
            rule: None,
        }],
    };
    let mut net = Network::build(&spec, &LayerAssignment::uniform(rule), 0).unwrap();
    net.set_weight(0, Tensor::from_rows(&[&[1.0, -0.5]]).unwrap()).unwrap();
    net
}

fn input_error(net: &mut Network) -> f64 {
    net.forward(&Tensor::from_rows(&[&[1.0]]).unwrap()).unwrap();
    let g = net
        .backward_to_input(&Tensor::from_rows(&[&[1.0, 1.5]]).unwrap())
        .unwrap();
    assert_eq!(g.shape(), &[1, 1]);
    g.data()[0]
}

#[test]
fn micro_example_forward() {
    let mut net = single_unit(RuleKind::Symmetric);
    let y = net.forward(&Tensor::from_rows(&[&[1.0]]).unwrap()).unwrap();
    assert_eq!(y.data(), &[1.0, -0.5]);
}

#[test]
fn micro_example_backward_by_rule() {
    let mut bp = single_unit(RuleKind::Symmetric);
    assert_eq!(input_error(&mut bp), 0.25);

    let mut ss = single_unit(RuleKind::SignSymmetric);
    let unit = FeedbackRule {
        kind: RuleKind::SignSymmetric,
        seed: 0,
        scale: Scale::Fixed(1.0),
    };
    ss.set_feedback(0, Feedback::new(&unit, &[1, 2], 1.0).unwrap()).unwrap();
    assert_eq!(input_error(&mut ss), -0.5);

    let mut fa = single_unit(RuleKind::FixedRandom);
    let b = Tensor::from_rows(&[&[0.3, -0.2]]).unwrap();
    fa.set_feedback(0, Feedback::with_random(RuleKind::FixedRandom, 1.0, b).unwrap())
        .unwrap();
    assert!(input_error(&mut fa).abs() < 1e-16);
}

#[test]
fn zero_weights_give_zero_logits() {
    let spec = NetworkSpec::mlp(4, &[3], 2);
    let mut net = Network::build(&spec, &LayerAssignment::uniform(RuleKind::Symmetric), 1).unwrap();
    net.set_weight(0, Tensor::zeros(&[4, 3])).unwrap();
    net.set_weight(1, Tensor::zeros(&[3, 2])).unwrap();
    let x = Tensor::from_fn(&[5, 4], |i| i as f64 - 7.0).unwrap();
    assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_layer() {
    let spec = NetworkSpec {
        input_shape: vec![3],
        classes: 3,
        layers: vec![LayerSpec::Dense {
            units: 3,
            bias: false,
            relu: false,
            rule: None,
        }],
    };
    let mut net = Network::build(&spec, &LayerAssignment::uniform(RuleKind::Symmetric), 2).unwrap();
    net.set_weight(0, Tensor::eye(3)).unwrap();
    let x = Tensor::from_rows(&[&[1.0, -2.0, 3.5], &[0.0, 4.0, -1.0]]).unwrap();
    assert_eq!(net.forward(&x).unwrap(), x);
}

#[test]
fn residual_with_zero_inner_weights_is_relu() {
    let spec = NetworkSpec {
        input_shape: vec![4],
        classes: 4,
        layers: vec![LayerSpec::Residual { hidden: 3, rule: None }],
    };
    let mut net = Network::build(&spec, &LayerAssignment::uniform(RuleKind::SignSymmetric), 3).unwrap();
    net.set_weight(0, Tensor::zeros(&[4, 3])).unwrap();
    net.set_weight(1, Tensor::zeros(&[3, 4])).unwrap();
    let x = Tensor::from_rows(&[&[1.0, -2.0, 0.0, 3.0], &[-1.0, 2.0, 5.0, -0.5]]).unwrap();
    assert_eq!(net.forward(&x).unwrap(), x.relu());
}

#[test]
fn residual_rule_override_applies_to_both_inner_layers() {
    let spec = NetworkSpec {
        input_shape: vec![4],
        classes: 3,
        layers: vec![
            LayerSpec::Residual {
                hidden: 3,
                rule: Some(RuleKind::FixedRandom),
            },
            LayerSpec::dense(3),
        ],
    };
    let net = Network::build(&spec, &LayerAssignment::uniform(RuleKind::SignSymmetric), 3).unwrap();
    let rules: Vec<RuleKind> = net.weight_layers().iter().map(|w| w.rule()).collect();
    assert_eq!(rules, [RuleKind::FixedRandom, RuleKind::FixedRandom, RuleKind::SignSymmetric]);
}

#[test]
fn symmetric_matches_finite_differences() {
    let spec = NetworkSpec {
        input_shape: vec![1, 4, 4],
        classes: 3,
        layers: vec![
            LayerSpec::Conv {
                channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: true,
                relu: true,
                rule: None,
            },
            LayerSpec::dense_relu(5),
            LayerSpec::dense(3),
        ],
    };
    let net = Network::build(&spec, &LayerAssignment::uniform(RuleKind::Symmetric), 8).unwrap();
    let (x, labels) = probe_batch(&net, 8).unwrap();
    let fd = finite_differences(&net, &x, &labels, 1e-5).unwrap();
    let got = Engine.gradients(&net, &x, &labels).unwrap();
    let check = compare("fd", &got, &fd, 1e-4, 1e-8).unwrap();
    assert!(check.passed(), "{check:?}");
}

#[test]
fn every_rule_matches_loop_reference() {
    let spec = NetworkSpec {
        input_shape: vec![6],
        classes: 3,
        layers: vec![
            LayerSpec::dense(5),
            LayerSpec::BatchNorm { relu: true },
            LayerSpec::Residual { hidden: 4, rule: None },
            LayerSpec::dense(3),
        ],
    };
    for kind in RuleKind::ALL {
        let net = Network::build(&spec, &LayerAssignment::uniform(kind), 21).unwrap();
        let (x, labels) = probe_batch(&net, 21).unwrap();
        let reference = naive_gradients(&net, &x, &labels).unwrap();
        let got = Engine.gradients(&net, &x, &labels).unwrap();
        let check = compare(kind.name(), &got, &reference, 0.0, 1e-10).unwrap();
        assert!(check.passed(), "{check:?}");
    }
}

#[test]
fn weight_gradient_ignores_the_rule_for_a_fixed_delta() {
    let spec = NetworkSpec::mlp(5, &[], 4);
    let x = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).sin()).unwrap();
    let grad = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.91).cos()).unwrap();
    let mut reference: Option<(Tensor, Tensor)> = None;
    for kind in RuleKind::ALL {
        let mut net = Network::build(&spec, &LayerAssignment::uniform(kind), 4).unwrap();
        net.forward(&x).unwrap();
        net.backward_to_input(&grad).unwrap();
        let w = &net.weight_layers()[0];
        let got = (w.grad_weight().clone(), w.grad_bias().unwrap().clone());
        match &reference {
            None => reference = Some(got),
            Some(r) => assert_eq!(&got, r, "{kind}"),
        }
    }
}

#[test]
fn sign_symmetric_feedback_ignores_positive_rescaling() {
    let spec = NetworkSpec::mlp(6, &[5], 3);
    let mut net = Network::build(&spec, &LayerAssignment::uniform(RuleKind::SignSymmetric), 6).unwrap();
    let before = net.weight_layers()[0].feedback_matrix().unwrap();
    let scaled = net.weight_layers()[0].weight().scale(7.5).unwrap();
    net.set_weight(0, scaled).unwrap();
    assert_eq!(net.weight_layers()[0].feedback_matrix().unwrap(), before);
}

#[test]
fn rule_choice_does_not_change_initial_weights() {
    let spec = NetworkSpec::mlp(6, &[5, 4], 3);
    let weights = |a: LayerAssignment| -> Vec<Tensor> {
        let net = Network::build(&spec, &a, 77).unwrap();
        net.weight_layers().iter().map(|w| w.weight().clone()).collect()
    };
    let bp = weights(LayerAssignment::uniform(RuleKind::Symmetric));
    for kind in RuleKind::ALL {
        assert_eq!(weights(LayerAssignment::uniform(kind)), bp);
        assert_eq!(weights(LayerAssignment::with_last_layer(kind, RuleKind::Symmetric)), bp);
    }
}

#[test]
fn initialization_scale_follows_layer_width() {
    let spec = NetworkSpec::mlp(400, &[100], 10);
    let net = Network::build(&spec, &LayerAssignment::uniform(RuleKind::Symmetric), 5).unwrap();
    let w = net.weight_layers()[0];
    assert_eq!(w.lambda(), 0.1);
    let std = (w.weight().data().iter().map(|v| v * v).sum::<f64>() / w.weight().len() as f64).sqrt();
    assert!((std - 0.1).abs() < 0.002, "{std}");
    assert!(w.bias().unwrap().data().iter().all(|&b| b == 0.0));
}

#[test]
fn backward_before_forward_is_a_state_error() {
    let mut net = Network::build(&NetworkSpec::mlp(3, &[2], 2), &LayerAssignment::uniform(RuleKind::Symmetric), 0).unwrap();
    assert!(matches!(net.backward(&Tensor::zeros(&[1, 2])), Err(Error::State(_))));
    net.forward(&Tensor::zeros(&[1, 3])).unwrap();
    net.backward(&Tensor::zeros(&[1, 2])).unwrap();
    assert!(matches!(net.backward(&Tensor::zeros(&[1, 2])), Err(Error::State(_))));
}

#[test]
fn shape_errors_name_the_layer() {
    let mut net = Network::build(&NetworkSpec::mlp(3, &[2], 2), &LayerAssignment::uniform(RuleKind::Symmetric), 0).unwrap();
    match net.forward(&Tensor::zeros(&[1, 4])) {
        Err(Error::Layer { index: 0, source }) => assert!(matches!(*source, Error::Dimension { .. })),
        other => panic!("expected a layer error, got {other:?}"),
    }
    let spec = NetworkSpec {
        input_shape: vec![5],
        classes: 2,
        layers: vec![LayerSpec::dense(4), LayerSpec::conv(2, 3, 1, 0)],
    };
    match Network::build(&spec, &LayerAssignment::uniform(RuleKind::Symmetric), 0) {
        Err(Error::Layer { index: 1, .. }) => {}
        other => panic!("expected a layer error, got {other:?}"),
    }
    let bad_output = NetworkSpec {
        input_shape: vec![5],
        classes: 3,
        layers: vec![LayerSpec::dense(4)],
    };
    assert!(matches!(
        Network::build(&bad_output, &LayerAssignment::uniform(RuleKind::Symmetric), 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn forward_is_deterministic() {
    let spec = NetworkSpec::mlp(7, &[9], 3);
    let mut a = Network::build(&spec, &LayerAssignment::uniform(RuleKind::FixedRandom), 12).unwrap();
    let mut b = a.clone();
    let x = Tensor::from_fn(&[4, 7], |i| (i as f64).sqrt()).unwrap();
    assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
}
