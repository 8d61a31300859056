use infobottle::mi::{fit_critic, infonce_in_batch_estimate, CriticFitConfig};
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

fn main() {
    for rho in [0.0, 0.5, 0.9] {
        let train = gaussian_pairs(rho, 10_000, 41);
        let eval = gaussian_pairs(rho, 10_000, 42);
        let cfg = CriticFitConfig { hidden: 64, steps: 400, batch: 128, lr: 5e-3 };
        let t0 = std::time::Instant::now();
        let critic = fit_critic(&train, &cfg, 7).unwrap();
        let est = infonce_in_batch_estimate(&eval, &critic, 128).unwrap();
        println!("rho={rho}: mi_nats={:.4} true={:.4} fit+eval={:?}", est.mi_nats(), -0.5*(1.0-rho*rho_f(rho)).ln(), t0.elapsed());
    }
}
fn rho_f(r: f64) -> f64 { r }
