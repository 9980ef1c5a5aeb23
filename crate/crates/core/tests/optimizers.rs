use dpsde::optimizers::{private_gradient, step_dpadam, step_dpsgd, step_dpsignsgd};
use dpsde::privacy::{clip, privatize};
use dpsde::rng::from_seed;
use dpsde::{
    run_optimizer, AdamParams, CalibrationMode, LogisticDataset, LrSchedule, Method, NoiseSpec, Objective,
    OptimizerConfig, OptimizerState, PrivacyParams,
};
use proptest::prelude::*;

fn privacy(sigma: f64, b: usize, c: f64) -> PrivacyParams {
    PrivacyParams::from_sigma(sigma, 1e-5, 1000, b, 100, c, CalibrationMode::Analytic).unwrap()
}

fn config(method: Method, eta: f64, sigma_dp: f64, sigma_gamma: f64, c: f64) -> OptimizerConfig {
    OptimizerConfig::new(
        method,
        eta,
        privacy(sigma_dp, 1, c),
        NoiseSpec::gaussian(sigma_gamma, 1).unwrap(),
    )
    .unwrap()
}

#[test]
fn two_example_batch_clips_then_averages() {
    let sum: Vec<f64> = [clip(&[3.0, 4.0], 1.0).unwrap(), clip(&[0.0, 0.0], 1.0).unwrap()]
        .iter()
        .fold(vec![0.0; 2], |acc, v| acc.iter().zip(v).map(|(a, b)| a + b).collect());
    let g = privatize(&sum, 2, 1.0, 0.0, &mut from_seed(0)).unwrap();
    assert!((g[0] - 0.3).abs() < 1e-15 && (g[1] - 0.4).abs() < 1e-15);
}

#[test]
fn private_gradient_on_data_matches_hand_computation() {
    // At x = 0 each logistic example contributes (½ − y)·a.
    let data = LogisticDataset::new(vec![6.0, 8.0, 0.0, 0.0], vec![0.0, 1.0], 2).unwrap();
    let obj = Objective::logistic(data);
    let p = PrivacyParams::from_sigma(0.0, 1e-5, 2, 2, 10, 1.0, CalibrationMode::Analytic).unwrap();
    let noise = NoiseSpec::gaussian(0.0, 2).unwrap();
    let g = private_gradient(&obj, &[0.0, 0.0], &[0, 1], &p, &noise, &mut from_seed(0)).unwrap();
    assert!((g[0] - 0.3).abs() < 1e-15 && (g[1] - 0.4).abs() < 1e-15);
    assert!(private_gradient(&obj, &[0.0, 0.0], &[], &p, &noise, &mut from_seed(0)).is_err());
    assert!(private_gradient(&obj, &[0.0, 0.0], &[5], &p, &noise, &mut from_seed(0)).is_err());
}

#[test]
fn full_clip_in_one_direction_gives_c_times_direction() {
    let data = LogisticDataset::new(vec![6.0, 8.0, 12.0, 16.0], vec![0.0, 0.0], 2).unwrap();
    let obj = Objective::logistic(data);
    let p = PrivacyParams::from_sigma(0.0, 1e-5, 2, 2, 10, 2.0, CalibrationMode::Analytic).unwrap();
    let noise = NoiseSpec::gaussian(0.0, 2).unwrap();
    let g = private_gradient(&obj, &[0.0, 0.0], &[0, 1], &p, &noise, &mut from_seed(0)).unwrap();
    assert!((g[0] - 1.2).abs() < 1e-14 && (g[1] - 1.6).abs() < 1e-14);
}

#[test]
fn sgd_step_examples() {
    let mut s = OptimizerState::new(vec![1.0, 1.0]);
    step_dpsgd(&mut s, &[2.0, 0.0], 0.5);
    assert_eq!(s.x, vec![0.0, 1.0]);
    assert_eq!(s.k, 1);
    step_dpsgd(&mut s, &[0.0, 0.0], 0.5);
    step_dpsgd(&mut s, &[3.0, 3.0], 0.0);
    assert_eq!(s.x, vec![0.0, 1.0]);
}

#[test]
fn sign_step_example() {
    let mut s = OptimizerState::new(vec![0.0; 3]);
    step_dpsignsgd(&mut s, &[0.5, -2.0, 0.0], 0.1);
    assert_eq!(s.x, vec![-0.1, 0.1, 0.0]);
}

#[test]
fn adam_first_step_is_normalized() {
    let mut s = OptimizerState::new(vec![0.0; 3]);
    let g = [0.5, -2.0, 1e-3];
    step_dpadam(&mut s, &g, 0.1, &AdamParams::default());
    for (x, gi) in s.x.iter().zip(&g) {
        let want = -0.1 * gi / (gi.abs() + 1e-8);
        assert!((x - want).abs() < 1e-12);
        assert!(x.abs() <= 0.1);
    }
}

#[test]
fn adam_with_zero_betas_is_sign_like() {
    let adam = AdamParams {
        beta1: 0.0,
        beta2: 0.0,
        eps_hat: 1e-8,
    };
    let mut s = OptimizerState::new(vec![0.0; 2]);
    for g in [[1.0, -3.0], [-0.2, 0.7], [4.0, 4.0]] {
        let before = s.x.clone();
        step_dpadam(&mut s, &g, 0.05, &adam);
        for i in 0..2 {
            let want = -0.05 * g[i] / (g[i].abs() + 1e-8);
            assert!((s.x[i] - before[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_zero_gradient_never_moves() {
    let mut s = OptimizerState::new(vec![1.0, -1.0]);
    for _ in 0..10 {
        step_dpadam(&mut s, &[0.0, 0.0], 0.1, &AdamParams::default());
    }
    assert_eq!(s.x, vec![1.0, -1.0]);
}

#[test]
fn noiseless_sgd_is_gradient_descent() {
    let obj = Objective::quadratic(vec![1.0, 3.0]).unwrap();
    let cfg = config(Method::DpSgd, 0.1, 0.0, 0.0, 1e6);
    let rec = run_optimizer(&obj, &cfg, &[1.0, 1.0], 30, 0, 1).unwrap();
    assert_eq!(rec.len(), 31);
    for (k, f) in rec.steps.iter().zip(&rec.loss) {
        let a = 0.9f64.powi(*k as i32);
        let b = 0.7f64.powi(*k as i32);
        let want = 0.5 * a * a + 1.5 * b * b;
        assert!((f - want).abs() < 1e-14, "step {k}");
    }
    assert_eq!(rec.clip_fraction, 0.0);
    assert!(!rec.diverged);
}

#[test]
fn noiseless_sgd_above_stability_threshold_diverges() {
    let obj = Objective::quadratic(vec![1.0]).unwrap();
    let cfg = config(Method::DpSgd, 2.5, 0.0, 0.0, 1e300);
    let rec = run_optimizer(&obj, &cfg, &[1.0], 1000, 0, 1).unwrap();
    assert!(rec.diverged);
    assert!(rec.len() < 1001);
}

#[test]
fn same_seed_gives_identical_records() {
    let obj = Objective::quadratic(vec![1.0; 8]).unwrap();
    for method in [Method::DpSgd, Method::DpSignSgd, Method::DpAdam] {
        let cfg = config(method, 0.01, 1.0, 0.5, 1.0);
        let a = run_optimizer(&obj, &cfg, &[1.0; 8], 200, 42, 10).unwrap();
        let b = run_optimizer(&obj, &cfg, &[1.0; 8], 200, 42, 10).unwrap();
        let c = run_optimizer(&obj, &cfg, &[1.0; 8], 200, 43, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.loss, c.loss);
    }
}

#[test]
fn records_respect_the_stride_and_last_step() {
    let obj = Objective::quadratic(vec![1.0]).unwrap();
    let cfg = config(Method::DpSgd, 0.01, 0.0, 0.0, 1.0);
    let rec = run_optimizer(&obj, &cfg, &[1.0], 25, 0, 10).unwrap();
    assert_eq!(rec.steps, vec![0, 10, 20, 25]);
    assert!(run_optimizer(&obj, &cfg, &[1.0], 0, 0, 1).is_err());
    assert!(run_optimizer(&obj, &cfg, &[1.0], 5, 0, 0).is_err());
    assert!(run_optimizer(&obj, &cfg, &[1.0, 2.0], 5, 0, 1).is_err());
}

#[test]
fn tight_clipping_reports_the_clip_fraction() {
    let obj = Objective::quadratic(vec![1.0]).unwrap();
    let cfg = config(Method::DpSgd, 1e-6, 0.0, 0.0, 0.01);
    let rec = run_optimizer(&obj, &cfg, &[1.0], 10, 0, 1).unwrap();
    assert_eq!(rec.clip_fraction, 1.0);
}

#[test]
fn decaying_schedule_shrinks() {
    assert_eq!(LrSchedule::Constant.at(0.1, 100), 0.1);
    let a = LrSchedule::Decaying.at(0.1, 0);
    let b = LrSchedule::Decaying.at(0.1, 100);
    assert_eq!(a, 0.1);
    assert!((b - 0.1 * 11f64.powf(-0.6)).abs() < 1e-15);
}

#[test]
fn method_names_parse() {
    for m in [Method::DpSgd, Method::DpSignSgd, Method::DpAdam] {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert!("rmsprop".parse::<Method>().is_err());
}

proptest! {
    #[test]
    fn sign_step_moves_at_most_eta(
        g in prop::collection::vec(-10f64..10.0, 1..10),
        eta in 0.0f64..1.0,
        scale in 0.01f64..100.0,
    ) {
        let d = g.len();
        let mut a = OptimizerState::new(vec![0.0; d]);
        let mut b = OptimizerState::new(vec![0.0; d]);
        step_dpsignsgd(&mut a, &g, eta);
        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
        step_dpsignsgd(&mut b, &scaled, eta);
        prop_assert!(a.x.iter().all(|v| v.abs() <= eta));
        prop_assert_eq!(a.x, b.x);
    }

    #[test]
    fn adam_first_step_bounded(g in prop::collection::vec(-10f64..10.0, 1..10), eta in 0.0f64..1.0) {
        let mut s = OptimizerState::new(vec![0.0; g.len()]);
        step_dpadam(&mut s, &g, eta, &AdamParams::default());
        prop_assert!(s.x.iter().all(|v| v.abs() <= eta * (1.0 + 1e-12)));
    }

    #[test]
    fn noiseless_gd_contracts_each_mode(lambda in 0.1f64..5.0, eta in 0.001f64..0.3, k in 1u64..40) {
        let obj = Objective::quadratic(vec![lambda]).unwrap();
        let cfg = config(Method::DpSgd, eta, 0.0, 0.0, 1e9);
        let rec = run_optimizer(&obj, &cfg, &[1.0], k, 0, k).unwrap();
        let x = (1.0 - eta * lambda).powi(k as i32);
        let want = 0.5 * lambda * x * x;
        let got = *rec.loss.last().unwrap();
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want));
    }
}
