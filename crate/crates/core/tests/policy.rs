//! Gaussian policy density checks by numerical integration.

use dyna_loco::nn::Activation;
use dyna_loco::policy::{normal_entropy, normal_log_density, Actor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Composite Simpson rule over `[lo, hi]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n).map(|i| f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(lo) + f(hi) + inner) * h / 3.0
}

#[test]
fn density_integrates_to_one_and_matches_entropy() {
    for &(mean, log_std) in &[(0.0, 0.0), (0.7, -1.5), (-2.0, 0.8), (0.1, -4.0)] {
        let sigma = f64::exp(log_std);
        let (lo, hi) = (mean - 12.0 * sigma, mean + 12.0 * sigma);
        let p = |x: f64| normal_log_density(x, mean, log_std).exp();
        let mass = simpson(p, lo, hi, 4000);
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        let h = simpson(|x| -p(x) * normal_log_density(x, mean, log_std), lo, hi, 4000);
        assert!((h - normal_entropy(log_std)).abs() < 1e-6, "entropy {h} vs {}", normal_entropy(log_std));
        let m1 = simpson(|x| x * p(x), lo, hi, 4000);
        assert!((m1 - mean).abs() < 1e-6);
    }
}

#[test]
fn actor_log_prob_factorizes_over_action_dimensions() {
    let actor = Actor::<f64>::new(vec![8, 8], Activation::Elu, -0.7, 3).unwrap();
    let obs = Array2::from_shape_fn((5, 20), |(i, j)| ((i * 20 + j) as f64 * 0.37).sin());
    let sample = actor.act(obs.view(), &mut ChaCha8Rng::seed_from_u64(1), false).unwrap();
    let mean = actor.mean_actions(obs.view()).unwrap();
    for b in 0..5 {
        let expect: f64 = (0..4).map(|j| normal_log_density(sample.raw[[b, j]], mean[[b, j]], actor.log_std[j])).sum();
        assert!((sample.log_prob[b] - expect).abs() < 1e-12);
    }
    let entropy: f64 = actor.log_std.iter().map(|&l| normal_entropy(l)).sum();
    assert!((actor.entropy() - entropy).abs() < 1e-12);
}
