//! Estimator sanity on correlated Gaussian pairs, where the true MI has the
//! closed form `-0.5 ln(1 - rho^2)`.

use infobottle::mi::{
    club_upper_bound, fit_critic, infonce_in_batch_estimate, CriticFitConfig,
};
use infobottle::rng;

fn gaussian_pairs(rho: f64, n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut r = rng::stream(seed, "gaussian-pairs");
    (0..n)
        .map(|_| {
            let x = rng::normal(&mut r);
            let t = rho * x + (1.0 - rho * rho).sqrt() * rng::normal(&mut r);
            (vec![x], vec![t])
        })
        .collect()
}

fn true_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

#[test]
fn club_with_unit_variance_conditional_upper_bounds_mi() {
    // q(t|x) = N(rho * x, 1). In expectation the estimate is rho^2, which
    // sits above the true MI for every rho in [0, 1).
    for (i, rho) in [0.0, 0.5, 0.9].into_iter().enumerate() {
        let pairs = gaussian_pairs(rho, 10_000, 100 + i as u64);
        let cond = |x: &[f64], t: &[f64]| {
            let d = t[0] - rho * x[0];
            -0.5 * std::f64::consts::TAU.ln() - 0.5 * d * d
        };
        let est = club_upper_bound(&pairs, cond).unwrap();
        assert!(
            est.value >= true_mi(rho) - 0.05,
            "rho {rho}: club {} below true {}",
            est.value,
            true_mi(rho)
        );
        if rho == 0.0 {
            // Independence: both terms estimate the same quantity.
            assert!(est.value.abs() < 0.05, "rho 0 club {}", est.value);
        }
    }
}

#[test]
fn trained_infonce_brackets_true_mi_at_high_correlation() {
    let rho = 0.9;
    let train = gaussian_pairs(rho, 10_000, 41);
    let eval = gaussian_pairs(rho, 10_000, 42);
    let cfg = CriticFitConfig {
        hidden: 64,
        steps: 500,
        batch: 64,
        lr: 5e-3,
    };
    let critic = fit_critic(&train, &cfg, 7).unwrap();
    let est = infonce_in_batch_estimate(&eval, &critic, 64).unwrap();
    let mi = est.mi_nats();
    assert!(
        mi <= true_mi(rho) + 0.05,
        "estimate {mi} exceeds true {} + 0.05",
        true_mi(rho)
    );
    assert!(mi >= 0.5, "estimate {mi} below 0.5");
}

#[test]
fn critic_fitting_is_deterministic() {
    let pairs = gaussian_pairs(0.5, 512, 9);
    let cfg = CriticFitConfig {
        hidden: 16,
        steps: 20,
        batch: 64,
        lr: 5e-3,
    };
    let a = fit_critic(&pairs, &cfg, 3).unwrap();
    let b = fit_critic(&pairs, &cfg, 3).unwrap();
    assert_eq!(a.w1.data, b.w1.data);
    assert_eq!(a.w2.data, b.w2.data);
}
