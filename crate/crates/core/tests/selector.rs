mod common;

use common::*;
use dcp::loss::{BaselineCache, HeadNorm};
use dcp::rng;
use dcp::selector::{
    channel_budget, select_channels, should_stop, Objective, SelectionConfig, SelectionProblem,
    SelectionState, StopMode, StopRule,
};
use dcp::Tensor;
use proptest::prelude::*;

fn problem<'a>(inst: &'a OrthogonalInstance, config: &SelectionConfig) -> SelectionProblem<'a> {
    SelectionProblem::new(
        &inst.net,
        0,
        &inst.images,
        &inst.labels,
        &inst.cache,
        Objective::Head(&inst.head, HeadNorm::Running),
        config,
    )
    .unwrap()
}

#[test]
fn reconstruction_only_fit_recovers_the_generating_weight() {
    // orthogonal inputs make the least-squares optimum the generating weight
    for seed in 0..5 {
        let inst = orthogonal_instance(seed, 5);
        let config = SelectionConfig {
            lambda: 0.0,
            gamma: 1.0,
            inner_steps: 300,
            batch_size: 0,
            ..SelectionConfig::default()
        };
        let p = problem(&inst, &config);
        let mut w = Tensor::zeros(p.weight_shape());
        let loss = p
            .optimize_active(
                &mut w,
                &[0, 1, 2, 3, 4],
                &config,
                &mut rng::stream(seed, "t"),
            )
            .unwrap();
        assert!(loss < 1e-8, "{loss}");
        // reconstruct the generating weight from the baseline by least squares
        let base = inst.cache.get(0).unwrap();
        for j in 0..3 {
            for k in 0..5 {
                let target: f64 = (0..24)
                    .map(|i| base.at(i, j, 0, 0) * inst.images.at(i, k, 0, 0))
                    .sum::<f64>()
                    / 24.0;
                assert!((w.at(j, k, 0, 0) - target).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn zero_learning_rate_leaves_the_weight() {
    let inst = orthogonal_instance(1, 4);
    let config = SelectionConfig {
        gamma: 0.0,
        ..SelectionConfig::default()
    };
    let p = problem(&inst, &config);
    let start = random_tensor(p.weight_shape(), &mut rng::stream(1, "w"));
    let mut w = start.clone();
    p.optimize_active(&mut w, &[0, 2], &config, &mut rng::stream(1, "t"))
        .unwrap();
    assert_eq!(w, start);
}

#[test]
fn only_active_slices_move() {
    let inst = orthogonal_instance(2, 6);
    let config = SelectionConfig {
        gamma: 0.1,
        ..SelectionConfig::default()
    };
    let p = problem(&inst, &config);
    let mut w = Tensor::zeros(p.weight_shape());
    p.optimize_active(&mut w, &[1, 4], &config, &mut rng::stream(2, "t"))
        .unwrap();
    for j in 0..3 {
        for k in [0, 2, 3, 5] {
            assert_eq!(w.at(j, k, 0, 0), 0.0);
        }
    }
}

#[test]
fn selected_count_equals_nonzero_slices() {
    for seed in 0..5 {
        let inst = convex_instance(seed, 6, 4, 3, 12, 3);
        let config = SelectionConfig {
            gamma: 0.05,
            seed,
            ..SelectionConfig::default()
        };
        let p = SelectionProblem::new(
            &inst.net,
            0,
            &inst.images,
            &inst.labels,
            &inst.cache,
            Objective::Head(&inst.head, HeadNorm::Running),
            &config,
        )
        .unwrap();
        let out = select_channels(&p, None, &StopRule::budget(3), &config).unwrap();
        assert_eq!(out.state.selected.len(), 3);
        assert_eq!(out.l20, 3);
        assert_eq!(out.state.t, 3);
        assert_eq!(out.state.grad_norms.len(), 6);
    }
}

#[test]
fn identical_channels_tie_to_the_smaller_index() {
    let mut inst = orthogonal_instance(3, 4);
    // channel 2 becomes a copy of channel 3, and the baseline reads only those
    for i in 0..24 {
        let v = inst.images.at(i, 3, 0, 0);
        let off = inst.images.offset(i, 2, 0, 0);
        inst.images.data_mut()[off] = v;
    }
    let mut w = Tensor::zeros([3, 4, 1, 1]);
    for j in 0..3 {
        let off = w.offset(j, 3, 0, 0);
        w.data_mut()[off] = 1.0 + j as f64;
    }
    let mut cache = BaselineCache::default();
    cache.insert(0, conv_oracle(&inst.images, &w, 1, 0));
    inst.cache = cache;
    let config = SelectionConfig::default();
    let p = problem(&inst, &config);
    let (k, norms) = p.rank_channels(&Tensor::zeros([3, 4, 1, 1]), &[]).unwrap();
    assert_eq!(norms[2], norms[3]);
    assert_eq!(k, 2);
    let (k, _) = p.rank_channels(&Tensor::zeros([3, 4, 1, 1]), &[2]).unwrap();
    assert_eq!(k, 3);
}

#[test]
fn selection_is_deterministic() {
    let inst = convex_instance(7, 5, 3, 3, 16, 2);
    let config = SelectionConfig {
        gamma: 0.05,
        batch_size: 4,
        seed: 7,
        ..SelectionConfig::default()
    };
    let p = SelectionProblem::new(
        &inst.net,
        0,
        &inst.images,
        &inst.labels,
        &inst.cache,
        Objective::Head(&inst.head, HeadNorm::Running),
        &config,
    )
    .unwrap();
    let a = select_channels(&p, Some(&inst.true_weight), &StopRule::budget(3), &config).unwrap();
    let b = select_channels(&p, Some(&inst.true_weight), &StopRule::budget(3), &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn warm_start_from_reference_helps_reconstruction() {
    let inst = convex_instance(8, 4, 3, 3, 16, 2);
    let config = SelectionConfig {
        lambda: 0.0,
        gamma: 0.0,
        ..SelectionConfig::default()
    };
    let p = SelectionProblem::new(
        &inst.net,
        0,
        &inst.images,
        &inst.labels,
        &inst.cache,
        Objective::Head(&inst.head, HeadNorm::Running),
        &config,
    )
    .unwrap();
    let out = select_channels(&p, Some(&inst.true_weight), &StopRule::budget(4), &config).unwrap();
    // every slice is copied from the generating weight, so nothing is left to reconstruct
    assert!(*out.state.loss_history.last().unwrap() < 1e-20);
    assert_eq!(out.weight, inst.true_weight);
}

#[test]
fn stop_rules() {
    let state = |h: &[f64]| SelectionState {
        selected: (0..h.len() - 1).collect(),
        t: h.len() - 1,
        loss_history: h.to_vec(),
        grad_norms: Vec::new(),
    };
    let s = state(&[10.0, 6.0, 5.95]);
    assert!(should_stop(&s, &StopRule::tolerance(0.01)).unwrap());
    assert!(!should_stop(&s, &StopRule::tolerance(0.004)).unwrap());
    assert!(should_stop(&s, &StopRule::budget(2)).unwrap());
    assert!(!should_stop(&s, &StopRule::budget(3)).unwrap());
    let both = StopRule {
        mode: StopMode::WhicheverFirst,
        kappa: 2,
        epsilon: 1e-6,
    };
    assert!(should_stop(&s, &both).unwrap());
    assert!(should_stop(&state(&[0.0, 0.0]), &StopRule::tolerance(0.1)).is_err());
}

proptest! {
    #[test]
    fn budget_is_ceiling_and_bounded(c in 1usize..2048, ratio in 0.001f64..=1.0) {
        let k = channel_budget(c, ratio).unwrap();
        prop_assert!(k >= 1 && k <= c);
        prop_assert!(k as f64 >= ratio * c as f64 - 1e-6);
        prop_assert!((k as f64) < ratio * c as f64 + 1.0 || k == 1);
    }

    #[test]
    fn budget_rejects_bad_ratios(c in 1usize..100, ratio in prop_oneof![-1.0f64..=0.0, 1.0001f64..5.0]) {
        prop_assert!(channel_budget(c, ratio).is_err());
    }
}
