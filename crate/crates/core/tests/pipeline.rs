mod common;

use dcp::data::{make_synthetic_split, Dataset, Split, SyntheticKind};
use dcp::network::{build_architecture, build_architecture_for, count_params, LayerKind};
use dcp::pipeline::{
    evaluate, finetune_stage, plan_stages, run_dcp, select_random, FinetuneConfig, PruneConfig,
    Strategy,
};
use dcp::rng;
use dcp::selector::channel_budget;
use dcp::Tensor;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn blobs(seed: u64, n: usize, split: Split) -> Dataset {
    make_synthetic_split(SyntheticKind::GaussianBlobs, n, 3, [3, 8, 8], seed, split).unwrap()
}

fn quick(strategy: Strategy, keep: f64) -> PruneConfig {
    PruneConfig {
        strategy,
        keep_ratio: keep,
        subset_size: 64,
        selection_lr: 0.05,
        inner_steps: 5,
        heads: Some(1),
        stage_finetune: FinetuneConfig {
            epochs: 1,
            lr: 0.01,
            ..FinetuneConfig::default()
        },
        final_finetune: FinetuneConfig {
            epochs: 1,
            lr: 0.01,
            ..FinetuneConfig::default()
        },
        ..PruneConfig::default()
    }
}

#[test]
fn stages_partition_the_prunable_layers() {
    let net = build_architecture("resnet-56", 10, 0).unwrap();
    let prunable = net.prunable_layers();
    for heads in 1..=4 {
        let plan = plan_stages(&net, heads).unwrap();
        let flat: Vec<usize> = plan.stages.concat();
        assert_eq!(flat, prunable);
        let sizes: Vec<usize> = plan.stages[..heads].iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(plan.heads.windows(2).all(|w| w[0] < w[1]));
        assert!(plan.stages[heads].is_empty());
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = blobs(0, 64, Split::Train);
    let mut net = build_architecture("toy-cnn", 3, 0).unwrap();
    let before = net.clone();
    let config = FinetuneConfig {
        epochs: 1,
        lr: 0.0,
        ..FinetuneConfig::default()
    };
    finetune_stage(&mut net, None, &data, &config, 0).unwrap();
    for (a, b) in net.nodes().iter().zip(before.nodes()) {
        match (&a.kind, &b.kind) {
            (LayerKind::Conv(x), LayerKind::Conv(y)) => assert_eq!(x.weight, y.weight),
            (LayerKind::FullyConnected { theta: x }, LayerKind::FullyConnected { theta: y }) => {
                assert_eq!(x, y)
            }
            (LayerKind::BatchNorm(x), LayerKind::BatchNorm(y)) => {
                assert_eq!(x.gamma, y.gamma);
                assert_ne!(x.running_mean, y.running_mean);
            }
            _ => {}
        }
    }
}

#[test]
fn training_reduces_loss_and_error() {
    let train = blobs(1, 300, Split::Train);
    let test = blobs(1, 150, Split::Test);
    let mut net = build_architecture("toy-cnn", 3, 1).unwrap();
    net.normalization = train.normalization.clone();
    let untrained = evaluate(&net, &test).unwrap().top1;
    let config = FinetuneConfig {
        epochs: 10,
        seed: 1,
        ..FinetuneConfig::default()
    };
    let stats = finetune_stage(&mut net, None, &train, &config, 0).unwrap();
    assert!(stats.last_epoch_final_loss < stats.first_epoch_final_loss);
    assert!((stats.final_lr - 0.05 * 0.998f64.powi(stats.iterations as i32)).abs() < 1e-12);
    let trained = evaluate(&net, &test).unwrap().top1;
    assert!(trained < untrained.min(0.2), "{trained} vs {untrained}");
}

#[test]
fn tied_logits_count_as_errors() {
    let data = blobs(2, 30, Split::Test);
    let mut net = build_architecture("toy-cnn", 3, 2).unwrap();
    let fc = net.final_node();
    if let LayerKind::FullyConnected { theta } = &mut net.node_mut(fc).kind {
        *theta = Tensor::zeros(theta.shape());
    }
    let e = evaluate(&net, &data).unwrap();
    assert_eq!(e.top1, 1.0);
    assert!(e.top5.is_none());
}

#[test]
fn keep_all_changes_nothing_structurally() {
    let train = blobs(3, 120, Split::Train);
    let net = build_architecture("toy-cnn", 3, 3).unwrap();
    let (pruned, report) = run_dcp(&net, &train, None, &quick(Strategy::Dcp, 1.0)).unwrap();
    assert!(report.layers.iter().all(|l| l.kept == l.channels));
    assert_eq!(count_params(&pruned), count_params(&net));
    assert_eq!(report.param_reduction(), 1.0);
}

#[test]
fn every_strategy_meets_the_budget() {
    let train = blobs(4, 120, Split::Train);
    let test = blobs(4, 60, Split::Test);
    let net = build_architecture("toy-cnn", 3, 4).unwrap();
    for strategy in [
        Strategy::Dcp,
        Strategy::Random,
        Strategy::WeightSum,
        Strategy::DcpLambda0,
        Strategy::DcpLsOnly,
    ] {
        let (pruned, report) = run_dcp(&net, &train, Some(&test), &quick(strategy, 0.5)).unwrap();
        for l in &report.layers {
            assert_eq!(
                l.kept,
                channel_budget(l.channels, 0.5).unwrap(),
                "{strategy:?} {}",
                l.name
            );
            assert_eq!(pruned.conv(l.layer).unwrap().kept_channels(), l.selected);
        }
        assert!(report.param_reduction() > 1.5, "{strategy:?}");
        assert!(report.flop_reduction() > 1.5, "{strategy:?}");
        assert!(report.error_after.is_some());
        let compact = pruned.compact().unwrap();
        assert_eq!(count_params(&compact), report.after.params);
    }
}

#[test]
fn tolerance_mode_rejects_fixed_subset_strategies() {
    let train = blobs(5, 60, Split::Train);
    let net = build_architecture("toy-cnn", 3, 5).unwrap();
    let config = PruneConfig {
        stop_mode: dcp::selector::StopMode::Tolerance,
        ..quick(Strategy::Random, 0.5)
    };
    assert!(run_dcp(&net, &train, None, &config).is_err());
}

#[test]
fn class_count_mismatch_is_a_data_error() {
    let train = blobs(6, 60, Split::Train);
    let net = build_architecture_for("toy-cnn", 4, [3, 8, 8], 6).unwrap();
    let err = run_dcp(&net, &train, None, &quick(Strategy::Dcp, 0.5)).unwrap_err();
    assert_eq!(err.class(), dcp::ErrorClass::Data);
}

#[test]
fn random_selection_is_uniform() {
    let (c, kappa, trials) = (10, 3, 10_000);
    let mut counts = vec![0usize; c];
    let mut r = rng::stream(0, "uniformity");
    for _ in 0..trials {
        for k in select_random(c, kappa, &mut r).unwrap() {
            counts[k] += 1;
        }
    }
    let expected = (trials * kappa) as f64 / c as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new((c - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}, counts {counts:?}");
}
