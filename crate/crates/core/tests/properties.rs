//! Property-based checks of the library invariants.

use metademod::active::{
    active_loop, invert_channel_equalizer, score, select_next_param, AcquisitionMode, PolarGrid,
    SelectConfig,
};
use metademod::config::{Experiment, Profile};
use metademod::experiments::{active_config, test_frames, ExperimentConfig};
use metademod::metrics::{bin_index, calibration_report};
use metademod::models::{kl_gaussians, softmax, VariationalParams};
use proptest::prelude::*;
use serde_json::json;

fn posterior() -> impl Strategy<Value = VariationalParams> {
    (
        prop::array::uniform2(-1.5f64..1.5),
        prop::array::uniform2(-2.5f64..0.5),
    )
        .prop_map(|(nu, rho)| VariationalParams::new(nu.to_vec(), rho.to_vec()))
}

fn gaussian(dim: usize) -> impl Strategy<Value = VariationalParams> {
    (
        prop::collection::vec(-3.0f64..3.0, dim),
        prop::collection::vec(-3.0f64..2.0, dim),
    )
        .prop_map(|(nu, rho)| VariationalParams::new(nu, rho))
}

fn coarse_select() -> SelectConfig {
    SelectConfig {
        grid: PolarGrid {
            n_radius: 16,
            n_angle: 32,
        },
        ..SelectConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(pair in (1usize..6).prop_flat_map(|d| (gaussian(d), gaussian(d)))) {
        let (q, p) = pair;
        prop_assert!(kl_gaussians(&q, &p) >= -1e-12);
        prop_assert!(kl_gaussians(&q, &q).abs() <= 1e-12);
    }

    #[test]
    fn ece_is_bounded_and_counts_add_up(
        data in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200),
        m in 1usize..20,
    ) {
        let (conf, ok): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
        let r = calibration_report(&conf, &ok, m).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.ece));
        prop_assert_eq!(r.bin_counts.iter().sum::<usize>(), conf.len());
        for b in 0..m {
            if r.bin_counts[b] > 0 {
                let (lo, hi) = r.bin_bounds(b);
                prop_assert!(r.bin_conf[b] >= lo - 1e-12 && r.bin_conf[b] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn ece_ignores_sample_order(
        data in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..100),
        rot in 0usize..100,
    ) {
        let (conf, ok): (Vec<f64>, Vec<bool>) = data.iter().copied().unzip();
        let k = rot % conf.len();
        let mut c2 = conf.clone();
        let mut o2 = ok.clone();
        c2.rotate_left(k);
        o2.rotate_left(k);
        c2.reverse();
        o2.reverse();
        let a = calibration_report(&conf, &ok, 10).unwrap();
        let b = calibration_report(&c2, &o2, 10).unwrap();
        prop_assert_eq!(&a.bin_counts, &b.bin_counts);
        prop_assert!((a.ece - b.ece).abs() <= 1e-12);
    }

    #[test]
    fn bin_index_places_confidence_in_its_interval(conf in 0.0f64..=1.0, m in 1usize..50) {
        let b = bin_index(conf, m);
        prop_assert!(b < m);
        let lo = b as f64 / m as f64;
        let hi = (b + 1) as f64 / m as f64;
        prop_assert!(conf <= hi);
        prop_assert!(conf > lo || b == 0);
    }

    #[test]
    fn softmax_lies_on_the_simplex(logits in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn score_is_invariant_to_posterior_order(
        posts in prop::collection::vec(posterior(), 1..6),
        phi in prop::array::uniform2(-1.0f64..1.0),
    ) {
        let mut reversed = posts.clone();
        reversed.reverse();
        let a = score(&phi, &posts).unwrap();
        let b = score(&phi, &reversed).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn selected_parameter_stays_in_unit_disk(posts in prop::collection::vec(posterior(), 1..4)) {
        let (phi, s) = select_next_param(&posts, &coarse_select()).unwrap();
        prop_assert!(phi[0].hypot(phi[1]) <= 1.0 + 1e-12);
        prop_assert!((score(&phi, &posts).unwrap() - s).abs() <= 1e-9 * s.abs().max(1.0));
    }

    #[test]
    fn inversion_satisfies_the_constraint(phi in prop::array::uniform2(-3.0f64..3.0)) {
        prop_assume!(phi[0].hypot(phi[1]) > 1e-6);
        let c = invert_channel_equalizer(&phi).unwrap().c;
        prop_assert!((phi[0] * c[0] + phi[1] * c[1] - 1.0).abs() <= 1e-12);
        prop_assert!((c[0] * phi[1] - c[1] * phi[0]).abs() <= 1e-12 * c[0].hypot(c[1]));
    }
}

#[test]
fn inversion_rejects_zero_parameter() {
    assert!(invert_channel_equalizer(&[0.0, 0.0]).is_err());
    assert!(invert_channel_equalizer(&[1e-12, 0.0]).is_err());
}

fn tiny_active(
    budget: usize,
    mode: AcquisitionMode,
) -> (metademod::config::Config, metademod::active::ActiveConfig) {
    let ec = ExperimentConfig::new(
        Experiment::EqActiveVsPassive,
        Profile::Desk,
        11,
        Some(json!({"budget": budget, "test_frames": 3, "n_star_te": 20, "I_meta": 3, "R": 4, "R_te": 4})),
    )
    .unwrap();
    let acfg = active_config(&ec.config, mode, 5);
    (ec.config, acfg)
}

#[test]
fn acquisition_history_has_one_round_per_acquired_frame() {
    for mode in [AcquisitionMode::Active, AcquisitionMode::Passive] {
        let (cfg, acfg) = tiny_active(6, mode);
        let frames = test_frames(&cfg, 3);
        let (_, h) = active_loop(&cfg.model(), &frames, &acfg).unwrap();
        assert_eq!(h.rounds.len(), acfg.budget - acfg.t_init);
        assert_eq!(h.mse_curve.len(), acfg.budget - acfg.t_init + 1);
        for (k, r) in h.rounds.iter().enumerate() {
            assert_eq!(r.t, acfg.t_init + k);
            assert!(r.mse.is_finite());
            match (mode, r.phi_next) {
                (AcquisitionMode::Active, Some(phi)) => {
                    assert!(phi[0].hypot(phi[1]) <= 1.0 + 1e-12);
                    assert!((phi[0] * r.c_next[0] + phi[1] * r.c_next[1] - 1.0).abs() <= 1e-12);
                }
                (AcquisitionMode::Passive, None) => assert!(r.score.is_none()),
                other => panic!("unexpected round {other:?}"),
            }
        }
    }
}

#[test]
fn budget_equal_to_initial_frames_acquires_nothing() {
    let (cfg, mut acfg) = tiny_active(3, AcquisitionMode::Active);
    acfg.budget = acfg.t_init;
    let frames = test_frames(&cfg, 3);
    let (_, h) = active_loop(&cfg.model(), &frames, &acfg).unwrap();
    assert!(h.rounds.is_empty());
    assert_eq!(h.mse_curve.len(), 1);
}

#[test]
fn active_loop_rejects_budget_below_initial_frames() {
    let (cfg, mut acfg) = tiny_active(3, AcquisitionMode::Passive);
    acfg.budget = acfg.t_init - 1;
    assert!(active_loop(&cfg.model(), &test_frames(&cfg, 3), &acfg).is_err());
}
