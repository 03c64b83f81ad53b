use shelfpick_neural::gradcheck::{check_all, numeric_grad, relative_error};
use shelfpick_neural::graph::Graph;
use shelfpick_neural::model::{Model, ModelSpec};
use shelfpick_neural::ops::{self, softmax_xent};
use shelfpick_neural::Tensor;

#[test]
fn every_op_matches_finite_differences() {
    for seed in [1, 2] {
        for (name, err) in check_all(seed) {
            assert!(err < 1e-3, "{name}: relative error {err:e}");
        }
    }
}

#[test]
fn identity_kernel_copies_input() {
    let x = Tensor::from_vec(&[1, 3, 4], (0..12).map(|v| v as f32).collect()).unwrap();
    let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let b = Tensor::zeros(&[1]);
    assert_eq!(ops::conv2d_forward(&x, &w, &b, 1, 0).unwrap().0, x);
}

#[test]
fn ones_kernel_sums_the_neighbourhood() {
    let x = Tensor::from_vec(&[1, 3, 3], vec![1.0f32; 9]).unwrap();
    let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let (y, _) = ops::conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
    assert_eq!(y.data[4], 9.0);
    assert_eq!(y.data[0], 4.0);
}

#[test]
fn conv_shape_errors() {
    let x = Tensor::<f32>::zeros(&[2, 4, 4]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    assert!(ops::conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 1).is_err());
    let w = Tensor::zeros(&[1, 2, 3, 3]);
    assert!(ops::conv2d_forward(&x, &w, &Tensor::zeros(&[2]), 1, 1).is_err());
    assert!(ops::maxpool2_forward(&Tensor::<f32>::zeros(&[1, 3, 4])).is_err());
}

#[test]
fn stride_two_transposed_conv_doubles_extent() {
    for (h, w) in [(1, 1), (4, 4), (3, 5)] {
        let x = Tensor::<f32>::zeros(&[2, h, w]);
        let y = ops::deconv2d_forward(&x, &Tensor::zeros(&[2, 3, 4, 4]), &Tensor::zeros(&[3]), 2, 1).unwrap();
        assert_eq!(y.shape, vec![3, 2 * h, 2 * w]);
    }
}

#[test]
fn relu_zeroes_negatives_and_their_gradient() {
    let x = Tensor::from_vec(&[1, 1, 3], vec![-2.0f32, 0.5, -0.1]).unwrap();
    let y = ops::relu_forward(&x);
    assert_eq!(y.data, vec![0.0, 0.5, 0.0]);
    let g = ops::relu_backward(&Tensor::from_vec(&[1, 1, 3], vec![1.0; 3]).unwrap(), &y);
    assert_eq!(g.data, vec![0.0, 1.0, 0.0]);
}

#[test]
fn concat_stacks_in_order() {
    let a = Tensor::from_vec(&[1, 1, 2], vec![1.0f32, 2.0]).unwrap();
    let b = Tensor::from_vec(&[2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = ops::concat_channels(&[&a, &b]).unwrap();
    assert_eq!(c.shape, vec![3, 1, 2]);
    assert_eq!(c.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert!(ops::concat_channels(&[&a, &Tensor::zeros(&[1, 2, 2])]).is_err());
}

#[test]
fn uniform_logits_cost_ln4() {
    let z = Tensor::<f64>::zeros(&[4, 2, 3]);
    let (loss, _) = softmax_xent(&z, &[0, 1, 2, 3, 2, 1], &[1.0; 4]).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let labels = [2u8, 0, 3];
    let mut z = Tensor::<f64>::zeros(&[4, 1, 3]);
    for (i, &l) in labels.iter().enumerate() {
        z.data[l as usize * 3 + i] = 200.0;
    }
    let (loss, g) = softmax_xent(&z, &labels, &[1.0, 1.0, 5.0, 1.0]).unwrap();
    assert!(loss < 1e-12 && g.all_finite());
    assert!(softmax_xent(&z, &[0, 4, 1], &[1.0; 4]).is_err());
}

#[test]
fn whole_network_gradient_matches_finite_differences() {
    let spec = ModelSpec {
        resolution: 16,
        depth_widths: vec![2, 3, 3, 4],
        mask_widths: vec![2, 2, 2, 3, 3],
        decoder_widths: vec![3, 3, 2, 2],
        skip_taps: vec![true, false, true, true],
    };
    let mut model = Model::<f64>::new(spec, 11).unwrap();
    // Nonzero biases and irrational-ish inputs keep pre-activations off the
    // ReLU kink and max-pool windows free of ties.
    for (k, p) in model.params.iter_mut().enumerate() {
        if p.shape.len() == 1 {
            p.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * ((k * 7 + i) as f64).sin());
        }
    }
    let input = |k: usize| {
        Tensor::from_vec(&[1, 16, 16], (0..256).map(|i| ((i * k) as f64 * 0.618).fract()).collect()).unwrap()
    };
    let labels: Vec<u8> = (0..256).map(|i| (i % 4) as u8).collect();
    let weights = [1.0, 2.0, 3.0, 0.5];
    let loss_of = |params: &[Tensor<f64>]| {
        let m = Model::from_params(model.spec.clone(), params.to_vec()).unwrap();
        let z = m.forward(input(1), input(3), input(7)).unwrap();
        softmax_xent(&z, &labels, &weights).unwrap().0
    };
    let mut graph = Graph::new(&model.params);
    let out = model.forward_graph(&mut graph, input(1), input(3), input(7)).unwrap();
    let (_, dz) = softmax_xent(graph.value(out), &labels, &weights).unwrap();
    let grads = graph.backward(out, dz).unwrap();
    // A small step keeps ReLU kinks from being crossed.
    for (pi, g) in grads.iter().enumerate() {
        let probe: Vec<usize> = (0..g.len()).step_by(g.len().div_ceil(4)).collect();
        let numeric: Vec<f64> = probe
            .iter()
            .map(|&j| {
                numeric_grad(&[model.params[pi].data[j]], 1e-5, |v| {
                    let mut p = model.params.clone();
                    p[pi].data[j] = v[0];
                    loss_of(&p)
                })[0]
            })
            .collect();
        let analytic: Vec<f64> = probe.iter().map(|&j| g.data[j]).collect();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "parameter {pi}: {err:e}");
    }
}
