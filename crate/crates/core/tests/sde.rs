use dpsde::optimizers::RecordOptions;
use dpsde::rng::{from_seed, stream};
use dpsde::sde::{CovForm, Phase1Options};
use dpsde::stats::moments;
use dpsde::{euler_maruyama, CalibrationMode, Method, NoiseSpec, Nu, Objective, PrivacyParams, SdeLabel, SdeModel};
use proptest::prelude::*;

fn privacy(sigma_dp: f64, b: usize, c: f64) -> PrivacyParams {
    PrivacyParams::from_sigma(sigma_dp, 1e-5, 10_000, b, 100, c, CalibrationMode::Analytic).unwrap()
}

fn gauss(sigma_gamma: f64, b: usize) -> NoiseSpec {
    NoiseSpec::gaussian(sigma_gamma, b).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn sgd_phase2_diffusion_scalar() {
    let obj = Objective::quadratic(vec![1.0; 3]).unwrap();
    let m = SdeModel::sgd_phase2(&obj, &gauss(0.1, 1), &privacy(0.1, 1, 5.0), 0.01).unwrap();
    let mut rng = from_seed(0);
    let cov = m.covariance(&[1.0, 0.0, 0.0], &mut rng).unwrap();
    match cov {
        CovForm::Scalar(s) => assert!((s - 0.26).abs() < 1e-15),
        other => panic!("unexpected {other:?}"),
    }
    let kick = m.apply_diffusion_sqrt(&[0.0; 3], &[1.0, 1.0, 1.0], &mut rng).unwrap();
    for k in kick {
        assert!((k - 0.5099019513592785).abs() < 1e-15);
    }
    assert_eq!(m.label, SdeLabel::SgdP2);
}

#[test]
fn sgd_phase2_drift_is_gradient_flow() {
    let obj = Objective::quadratic(vec![2.0, 1.0]).unwrap();
    let m = SdeModel::sgd_phase2(&obj, &gauss(0.0, 1), &privacy(0.0, 1, 5.0), 0.01).unwrap();
    assert_eq!(m.drift(&[1.0, 1.0]).unwrap(), vec![-2.0, -1.0]);
    assert_eq!(m.drift(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    assert_eq!(m.diffusion_trace(&[1.0, 1.0], &mut from_seed(0)).unwrap(), 0.0);
}

#[test]
fn sgd_phase1_drift_factor() {
    let obj = Objective::quadratic(vec![1.0; 100]).unwrap();
    let m = SdeModel::sgd_phase1(&obj, &gauss(1.0, 1), &privacy(0.1, 1, 5.0), 0.01).unwrap();
    assert!((m.drift_scale().unwrap() - 0.5).abs() < 1e-15);
    let x: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
    for (b, xi) in m.drift(&x).unwrap().iter().zip(&x) {
        assert!((b + 0.5 * xi).abs() < 1e-15);
    }
}

#[test]
fn sgd_phase1_at_minimum_is_dp_noise_only() {
    let obj = Objective::quadratic(vec![1.0; 4]).unwrap();
    let (c, s, b) = (2.0, 0.7, 2usize);
    let m = SdeModel::sgd_phase1(&obj, &gauss(1.0, b), &privacy(s, b, c), 0.01).unwrap();
    assert_eq!(m.drift(&[0.0; 4]).unwrap(), vec![0.0; 4]);
    let floor = c * c * s * s / (b * b) as f64;
    let diag = m.diffusion_diag(&[0.0; 4], &mut from_seed(1)).unwrap();
    assert!(diag.iter().all(|v| *v >= floor));
}

#[test]
fn sgd_phase1_trace_is_bounded() {
    let d = 20;
    let obj = Objective::quadratic((1..=d).map(|i| i as f64).collect()).unwrap();
    let (c, s, b) = (1.5, 0.4, 4usize);
    let bound = c * c / b as f64 + d as f64 * c * c * s * s / (b * b) as f64;
    let m = SdeModel::sgd_phase1(&obj, &gauss(0.8, b), &privacy(s, b, c), 0.01).unwrap();
    let mut rng = from_seed(2);
    for r in 0..50 {
        let x: Vec<f64> = (0..d).map(|i| ((r * 7 + i * 3) % 11) as f64 * 0.2 - 1.0).collect();
        let tr = m.diffusion_trace(&x, &mut rng).unwrap();
        assert!(tr.is_finite() && tr >= 0.0);
        assert!(tr <= bound * (1.0 + 1e-12), "trace {tr} > {bound}");
    }
}

#[test]
fn sgd_phase1_rejects_zero_batch_noise() {
    let obj = Objective::quadratic(vec![1.0]).unwrap();
    assert!(SdeModel::sgd_phase1(&obj, &gauss(0.0, 1), &privacy(1.0, 1, 1.0), 0.01).is_err());
    let opts = Phase1Options {
        samples: 0,
        diag_only: false,
    };
    assert!(SdeModel::sgd_phase1_with(&obj, &gauss(1.0, 1), &privacy(1.0, 1, 1.0), 0.01, opts).is_err());
}

#[test]
fn sign_phase2_at_minimum() {
    let obj = Objective::quadratic(vec![1.0; 3]).unwrap();
    let m = SdeModel::sign_phase2(&obj, &gauss(0.3, 1), &privacy(0.1, 1, 1.0), 0.01, true).unwrap();
    assert_eq!(m.drift(&[0.0; 3]).unwrap(), vec![0.0; 3]);
    assert_eq!(m.diffusion_diag(&[0.0; 3], &mut from_seed(0)).unwrap(), vec![1.0; 3]);
}

#[test]
fn sign_phase2_saturates() {
    let obj = Objective::quadratic(vec![1.0; 2]).unwrap();
    let m = SdeModel::sign_phase2(&obj, &gauss(0.01, 1), &privacy(0.0, 1, 1.0), 0.01, true).unwrap();
    let b = m.drift(&[5.0, -5.0]).unwrap();
    assert!((b[0] + 1.0).abs() < 1e-12 && (b[1] - 1.0).abs() < 1e-12);
    let diag = m.diffusion_diag(&[5.0, -5.0], &mut from_seed(0)).unwrap();
    assert!(diag.iter().all(|v| *v < 1e-12));
}

#[test]
fn sign_phase2_erf_drift_value() {
    // s = 0.5, g = 0.3: erf(0.3/(√2·0.5)).
    let obj = Objective::quadratic(vec![1.0]).unwrap();
    let m = SdeModel::sign_phase2(&obj, &gauss(0.5, 1), &privacy(0.0, 1, 1.0), 0.01, true).unwrap();
    let b = m.drift(&[0.3]).unwrap();
    assert!((b[0] + 0.45149376449985285).abs() < 1e-12);
}

#[test]
fn sign_phase2_linear_and_exact_agree_near_zero() {
    let obj = Objective::quadratic(vec![1.0]).unwrap();
    let noise = gauss(0.5, 1);
    let p = privacy(0.0, 1, 1.0);
    let exact = SdeModel::sign_phase2(&obj, &noise, &p, 0.01, true).unwrap();
    let lin = SdeModel::sign_phase2(&obj, &noise, &p, 0.01, false).unwrap();
    let s = 0.5f64;
    for i in 1..=100 {
        let arg = 0.1 * i as f64 / 100.0;
        let g = arg * std::f64::consts::SQRT_2 * s;
        let a = exact.drift(&[g]).unwrap()[0];
        let b = lin.drift(&[g]).unwrap()[0];
        assert!((a - b).abs() <= 0.01 * a.abs(), "arg {arg}");
    }
}

#[test]
fn sign_phase1_drift_scale() {
    let obj = Objective::quadratic(vec![1.0; 2]).unwrap();
    let m = SdeModel::sign_phase1(&obj, &gauss(1.0, 1), &privacy(1.0, 1, 1.0), 0.01).unwrap();
    let want = (1.0 / std::f64::consts::PI).sqrt();
    assert!((m.drift_scale().unwrap() - want).abs() < 1e-15);
    assert_eq!(m.diffusion_diag(&[0.0; 2], &mut from_seed(0)).unwrap(), vec![1.0; 2]);
}

#[test]
fn sign_phase1_drift_doubles_with_epsilon() {
    let obj = Objective::quadratic(vec![1.0; 4]).unwrap();
    let mk = |eps: f64| {
        let p = PrivacyParams::from_epsilon(eps, 1e-5, 1000, 4, 500, 1.0, CalibrationMode::Analytic).unwrap();
        SdeModel::sign_phase1(&obj, &gauss(1.0, 4), &p, 0.01).unwrap()
    };
    let a = mk(0.5).drift(&[0.01, -0.02, 0.0, 0.005]).unwrap();
    let b = mk(1.0).drift(&[0.01, -0.02, 0.0, 0.005]).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
    }
}

#[test]
fn mixed_endpoints_match_the_pure_models() {
    let obj = Objective::quadratic(vec![1.0, 2.0, 3.0]).unwrap();
    let noise = gauss(0.8, 2);
    let p = privacy(0.5, 2, 1.0);
    let x = [0.3, -0.1, 0.2];
    let sgd1 = SdeModel::sgd_phase1(&obj, &noise, &p, 0.01).unwrap();
    let sgd2 = SdeModel::sgd_phase2(&obj, &noise, &p, 0.01).unwrap();
    let sign1 = SdeModel::sign_phase1(&obj, &noise, &p, 0.01).unwrap();
    let sign2 = SdeModel::sign_phase2(&obj, &noise, &p, 0.01, false).unwrap();
    let mix = |q: f64, m: Method| SdeModel::mixed(&obj, &noise, &p, 0.01, q, m).unwrap();
    assert_eq!(mix(0.0, Method::DpSgd).drift(&x).unwrap(), sgd2.drift(&x).unwrap());
    assert_eq!(mix(1.0, Method::DpSgd).drift(&x).unwrap(), sgd1.drift(&x).unwrap());
    assert_eq!(mix(0.0, Method::DpSignSgd).drift(&x).unwrap(), sign2.drift(&x).unwrap());
    assert_eq!(mix(1.0, Method::DpSignSgd).drift(&x).unwrap(), sign1.drift(&x).unwrap());
    let mut r = from_seed(0);
    assert_eq!(
        mix(0.0, Method::DpSgd).diffusion_diag(&x, &mut r).unwrap(),
        sgd2.diffusion_diag(&x, &mut r).unwrap()
    );
    assert!(SdeModel::mixed(&obj, &noise, &p, 0.01, 1.5, Method::DpSgd).is_err());
    assert!(SdeModel::mixed(&obj, &noise, &p, 0.01, 0.5, Method::DpAdam).is_err());
}

#[test]
fn zero_diffusion_euler_is_explicit_euler() {
    let obj = Objective::quadratic(vec![1.0, 4.0]).unwrap();
    let m = SdeModel::sgd_phase2(&obj, &gauss(0.0, 1), &privacy(0.0, 1, 1.0), 0.01).unwrap();
    let opts = RecordOptions {
        record_every: 1,
        snapshots: true,
    };
    let dt = 0.05;
    let rec = euler_maruyama(&m, &[1.0, -1.0], dt, 40, opts, &mut from_seed(0)).unwrap();
    for (j, x) in rec.snapshots.iter().enumerate() {
        let a = (1.0 - dt).powi(j as i32);
        let b = -(1.0 - 4.0 * dt).powi(j as i32);
        assert!((x[0] - a).abs() < 1e-14 && (x[1] - b).abs() < 1e-14);
    }
}

#[test]
fn euler_rejects_degenerate_step() {
    let obj = Objective::quadratic(vec![1.0]).unwrap();
    let m = SdeModel::sgd_phase2(&obj, &gauss(0.0, 1), &privacy(0.0, 1, 1.0), 0.01).unwrap();
    let opts = RecordOptions::every(1);
    assert!(euler_maruyama(&m, &[1.0], 0.0, 10, opts, &mut from_seed(0)).is_err());
    assert!(euler_maruyama(&m, &[1.0], -0.1, 10, opts, &mut from_seed(0)).is_err());
    assert!(euler_maruyama(&m, &[1.0, 2.0], 0.1, 10, opts, &mut from_seed(0)).is_err());
}

#[test]
fn sgd_phase2_reproduces_the_ou_moments() {
    // dX = −λX dt + √η s dW: mean x₀e^{−λt}, variance ηs²(1−e^{−2λt})/(2λ).
    let (lambda, eta, s2, x0) = (1.0, 0.05, 1.0, 0.5);
    let obj = Objective::quadratic(vec![lambda]).unwrap();
    let m = SdeModel::sgd_phase2(&obj, &gauss(1.0, 1), &privacy(0.0, 1, 1.0), eta).unwrap();
    let (dt, steps, reps) = (0.005, 400u64, 10_000u64);
    let opts = RecordOptions {
        record_every: 100,
        snapshots: true,
    };
    let paths: Vec<Vec<f64>> = (0..reps)
        .map(|r| {
            let rec = euler_maruyama(&m, &[x0], dt, steps, opts, &mut stream(17, 0, r)).unwrap();
            rec.snapshots.iter().map(|x| x[0]).collect()
        })
        .collect();
    for j in 1..=4 {
        let t = j as f64 * 100.0 * dt;
        let col: Vec<f64> = paths.iter().map(|p| p[j]).collect();
        let mo = moments(&col);
        let mean = x0 * (-lambda * t).exp();
        let var = eta * s2 * (1.0 - (-2.0 * lambda * t).exp()) / (2.0 * lambda);
        assert!((mo.mean - mean).abs() <= 3.0 * mo.se, "t {t}: mean {} vs {mean}", mo.mean);
        assert!((mo.var - var).abs() <= 0.05 * var, "t {t}: var {} vs {var}", mo.var);
    }
}

#[test]
fn rank_one_clamp_counter_starts_at_zero() {
    let obj = Objective::quadratic(vec![1.0; 3]).unwrap();
    let m = SdeModel::sgd_phase1(&obj, &gauss(1.0, 1), &privacy(0.1, 1, 1.0), 0.01).unwrap();
    assert_eq!(m.clamp_count(), 0);
}

proptest! {
    #[test]
    fn sign_trace_is_at_most_d(
        x in prop::collection::vec(-3.0f64..3.0, 1..12),
        sg in 0.05f64..3.0,
        sdp in 0.05f64..3.0,
        nu in prop_oneof![Just(f64::INFINITY), 1.0f64..20.0],
    ) {
        let d = x.len();
        let obj = Objective::quadratic(vec![1.0; d]).unwrap();
        let noise = NoiseSpec::new(sg, Nu::new(nu).unwrap(), 1).unwrap();
        let p = privacy(sdp, 1, 1.0);
        let mut r = from_seed(0);
        for m in [
            SdeModel::sign_phase1(&obj, &noise, &p, 0.01).unwrap(),
            SdeModel::sign_phase2(&obj, &noise, &p, 0.01, true).unwrap(),
            SdeModel::sign_phase2(&obj, &noise, &p, 0.01, false).unwrap(),
            SdeModel::mixed(&obj, &noise, &p, 0.01, 0.4, Method::DpSignSgd).unwrap(),
        ] {
            let tr = m.diffusion_trace(&x, &mut r).unwrap();
            prop_assert!(tr.is_finite() && tr >= 0.0 && tr <= d as f64 + 1e-12);
        }
    }

    #[test]
    fn sgd_mixed_drift_descends(
        x in prop::collection::vec(-3.0f64..3.0, 1..12),
        sg in 0.05f64..3.0,
        c in 0.1f64..5.0,
        p in 0.0f64..=1.0,
    ) {
        let d = x.len();
        let obj = Objective::quadratic(vec![1.5; d]).unwrap();
        let noise = gauss(sg, 1);
        let k1 = (sg * (d as f64).sqrt() / c).max(1.0);
        let m = SdeModel::mixed(&obj, &noise, &privacy(0.5, 1, c), 0.01, p, Method::DpSgd).unwrap();
        let g = obj.gradient(&x).unwrap();
        let b = m.drift(&x).unwrap();
        prop_assert!(dot(&g, &b) <= -dot(&g, &g) / k1 * (1.0 - 1e-12) + 1e-300);
    }
}
