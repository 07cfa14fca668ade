mod common;

use common::*;
use dcp::kernels::BN_EPS;
use dcp::loss::{
    discrimination_loss, joint_loss, reconstruction_loss, BaselineCache, HeadNorm, LossHead,
};
use dcp::network::{build_architecture, Mode};
use dcp::rng;
use dcp::Tensor;

#[test]
fn head_features_by_hand() {
    let net = build_architecture("toy-cnn", 3, 0).unwrap();
    let attach = net.find("conv1.relu").unwrap();
    let mut head = LossHead::build(&net, attach, 3, 0).unwrap();
    let act = random_tensor([2, 8, 3, 3], &mut rng::stream(0, "act"));
    head.calibrate(&act).unwrap();
    head.bn.gamma = (0..8).map(|j| 0.5 + 0.1 * j as f64).collect();
    head.bn.beta = (0..8).map(|j| 0.2 - 0.05 * j as f64).collect();
    let f = head.features(&act, HeadNorm::Running).unwrap();
    for i in 0..2 {
        for j in 0..8 {
            let bn = &head.bn;
            let s = (bn.running_var[j] + BN_EPS).sqrt();
            let mut acc = 0.0;
            for y in 0..3 {
                for x in 0..3 {
                    let z =
                        bn.gamma[j] * (act.at(i, j, y, x) - bn.running_mean[j]) / s + bn.beta[j];
                    acc += z.max(0.0);
                }
            }
            assert!((f.at(i, j, 0, 0) - acc / 9.0).abs() < 1e-12);
        }
    }
    // calibrated statistics make batch and running normalization agree
    let fb = head.features(&act, HeadNorm::Batch).unwrap();
    assert!(f.max_abs_diff(&fb).unwrap() < 1e-12);
}

#[test]
fn separable_data_gives_small_discrimination_loss() {
    let net = build_architecture("toy-cnn", 2, 0).unwrap();
    let attach = net.find("conv1.relu").unwrap();
    let mut head = LossHead::build(&net, attach, 2, 0).unwrap();
    // class 0 lights channel 0, class 1 lights channel 1
    let mut act = Tensor::zeros([4, 8, 2, 2]);
    let labels = [0, 1, 0, 1];
    for (i, &y) in labels.iter().enumerate() {
        for p in 0..4 {
            let off = act.offset(i, y, p / 2, p % 2);
            act.data_mut()[off] = 1.0;
        }
    }
    head.calibrate(&act).unwrap();
    let mut theta = Tensor::zeros([8, 2, 1, 1]);
    theta.data_mut()[0] = 20.0; // channel 0 → class 0
    theta.data_mut()[3] = 20.0; // channel 1 → class 1
    head.theta = theta;
    let l = discrimination_loss(&head, &act, &labels, HeadNorm::Running).unwrap();
    assert!(l < 0.01, "{l}");
}

#[test]
fn discrimination_loss_ignores_sample_order() {
    let net = build_architecture("toy-cnn", 3, 0).unwrap();
    let attach = net.find("conv2.relu").unwrap();
    let head = LossHead::build(&net, attach, 3, 4).unwrap();
    let act = random_tensor([5, 16, 4, 4], &mut rng::stream(4, "act")).map(f64::abs);
    let labels = [0, 1, 2, 1, 0];
    let perm = [3, 0, 4, 2, 1];
    let shuffled = act.select_samples(&perm).unwrap();
    let shuffled_labels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let a = discrimination_loss(&head, &act, &labels, HeadNorm::Batch).unwrap();
    let b = discrimination_loss(&head, &shuffled, &shuffled_labels, HeadNorm::Batch).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn reconstruction_is_zero_at_baseline_and_half_mean_square_otherwise() {
    let net = build_architecture("toy-cnn", 3, 0).unwrap();
    let layer = net.find("conv2").unwrap();
    let x = random_tensor([3, 3, 8, 8], &mut rng::stream(0, "x"));
    let cache = BaselineCache::capture(&net, &x, &[layer]).unwrap();
    let base = net.forward(&x, Some(layer), Mode::Eval).unwrap();
    assert_eq!(reconstruction_loss(&base, &cache, layer).unwrap(), 0.0);
    let shifted = base.map(|v| v + 2.0);
    assert!((reconstruction_loss(&shifted, &cache, layer).unwrap() - 2.0).abs() < 1e-12);
    assert!(reconstruction_loss(&base, &cache, layer + 1).is_err());
}

#[test]
fn joint_loss_is_monotone_in_lambda() {
    let mut prev = joint_loss(0.3, 0.7, 0.0).unwrap();
    assert_eq!(prev, 0.3);
    for lambda in [0.1, 0.5, 1.0, 4.0] {
        let l = joint_loss(0.3, 0.7, lambda).unwrap();
        assert!(l > prev);
        prev = l;
    }
    assert!(joint_loss(0.3, 0.7, -1.0).is_err());
}

#[test]
fn fresh_heads_are_not_degenerate() {
    let net = build_architecture("resnet-8", 4, 0).unwrap();
    let head = LossHead::build(&net, net.find("stage1.block1.relu2").unwrap(), 4, 0).unwrap();
    assert!(!head.is_degenerate());
    let mut flat = head.clone();
    flat.theta = Tensor::full(flat.theta.shape(), 0.5);
    assert!(flat.is_degenerate());
}
