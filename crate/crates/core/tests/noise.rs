use dpsde::noise::{normalized_gradient_mean, sample_batch_noise, sample_per_example_noise};
use dpsde::rng::from_seed;
use dpsde::stats::moments;
use dpsde::{k_of_nu, NoiseSpec, Nu};
use proptest::prelude::*;

#[test]
fn k_frozen_values() {
    let cases = [
        (0.5, 0.6759782400672846),
        (1.0, 0.7978845608028655),
        (2.0, 0.8862269254527579),
        (3.0, 0.9213177319235614),
        (10.0, 0.9753500771452291),
    ];
    for (nu, want) in cases {
        let k = k_of_nu(Nu::Finite(nu)).unwrap();
        assert!((k - want).abs() < 1e-12, "nu {nu}: {k}");
    }
    assert_eq!(k_of_nu(Nu::Infinite).unwrap(), 1.0);
}

#[test]
fn k_approaches_one_for_large_nu() {
    let k = k_of_nu(Nu::Finite(1e6)).unwrap();
    assert!((1.0 - k).abs() < 1e-6);
}

#[test]
fn nu_rejects_nonpositive() {
    assert!(Nu::new(0.0).is_err());
    assert!(Nu::new(-1.0).is_err());
    assert!(Nu::new(f64::NAN).is_err());
    assert_eq!(Nu::new(f64::INFINITY).unwrap(), Nu::Infinite);
}

#[test]
fn nu_parses_inf_from_json() {
    let nu: Nu = serde_json::from_str("\"inf\"").unwrap();
    assert_eq!(nu, Nu::Infinite);
    let nu: Nu = serde_json::from_str("3").unwrap();
    assert_eq!(nu, Nu::Finite(3.0));
}

#[test]
fn gaussian_per_example_noise_has_unit_scale() {
    let spec = NoiseSpec::gaussian(0.5, 1).unwrap();
    let mut rng = from_seed(3);
    let xs = sample_per_example_noise(&spec, 100_000, &mut rng);
    let m = moments(&xs);
    assert!(m.mean.abs() < 0.01);
    assert!((m.var - 0.25).abs() < 0.25 * 0.02);
}

#[test]
fn student_t_per_example_noise_variance() {
    // Var t_ν = ν/(ν−2).
    let spec = NoiseSpec::new(1.0, Nu::Finite(6.0), 1).unwrap();
    let mut rng = from_seed(4);
    let mut xs = Vec::new();
    for _ in 0..100_000 {
        xs.push(sample_per_example_noise(&spec, 1, &mut rng)[0]);
    }
    let m = moments(&xs);
    assert!((m.var - 1.5).abs() < 1.5 * 0.05, "var {}", m.var);
}

#[test]
fn batch_noise_variance_shrinks_with_batch() {
    let spec = NoiseSpec::gaussian(2.0, 16).unwrap();
    let mut rng = from_seed(5);
    let xs = sample_batch_noise(&spec, 100_000, &mut rng);
    let m = moments(&xs);
    assert!((m.var - 0.25).abs() < 0.25 * 0.02);
}

#[test]
fn zero_noise_is_exact_zero() {
    let spec = NoiseSpec::gaussian(0.0, 1).unwrap();
    let mut rng = from_seed(6);
    assert!(sample_per_example_noise(&spec, 5, &mut rng).iter().all(|v| *v == 0.0));
    assert!(normalized_gradient_mean(&[1.0], &spec).is_err());
}

#[test]
fn normalized_gradient_mean_matches_monte_carlo_for_small_gradients() {
    let d = 50;
    let spec = NoiseSpec::new(1.0, Nu::Finite(3.0), 1).unwrap();
    let g: Vec<f64> = (0..d).map(|i| if i == 0 { 0.2 } else { 0.0 }).collect();
    let want = normalized_gradient_mean(&g, &spec).unwrap()[0];
    let mut rng = from_seed(8);
    let reps = 40_000;
    let mut acc = 0.0;
    for _ in 0..reps {
        let z = sample_per_example_noise(&spec, d, &mut rng);
        let x: Vec<f64> = g.iter().zip(&z).map(|(a, b)| a + b).collect();
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        acc += x[0] / n;
    }
    let mc = acc / reps as f64;
    assert!((mc - want).abs() < 0.15 * want, "mc {mc} theory {want}");
}

#[test]
fn noise_spec_rejects_bad_input() {
    assert!(NoiseSpec::gaussian(-1.0, 1).is_err());
    assert!(NoiseSpec::gaussian(1.0, 0).is_err());
}

proptest! {
    #[test]
    fn k_is_increasing_and_below_one(nu in 0.1f64..500.0) {
        let a = k_of_nu(Nu::Finite(nu)).unwrap();
        let b = k_of_nu(Nu::Finite(nu * 1.1)).unwrap();
        prop_assert!(a > 0.0 && a < 1.0);
        prop_assert!(b >= a);
    }

    #[test]
    fn normalized_mean_is_linear(g in prop::collection::vec(-5f64..5.0, 1..10), s in 0.1f64..3.0) {
        let spec = NoiseSpec::gaussian(s, 1).unwrap();
        let m = normalized_gradient_mean(&g, &spec).unwrap();
        let f = 1.0 / (s * (g.len() as f64).sqrt());
        for (a, b) in g.iter().zip(&m) {
            prop_assert!((b - a * f).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
