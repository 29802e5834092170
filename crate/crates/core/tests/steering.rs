use menugame_core::core_types::{derive_rng, Histogram, SimplexVector};
use menugame_core::geometry_sets::eird_ball_radius;
use menugame_core::navigation::{move_to_menu, uniform_pad_menu, SteeringTarget};
use menugame_core::preference_models::{sample_choice, BupModel};

const GAMMA: f64 = 0.02;

fn dispersed(n: usize) -> BupModel {
    // Item scores between 0.4 and 1.0 that pull in different directions.
    let coeffs = (0..n)
        .map(|i| match i % 3 {
            0 => vec![0.4, 0.6],
            1 => vec![1.0, -0.6],
            _ => vec![0.7],
        })
        .collect();
    BupModel::new(0.4, coeffs).unwrap()
}

#[test]
fn uniform_pad_keeps_counts_level() {
    let n = 5;
    let m = dispersed(n);
    let mut rng = derive_rng(31, 0);
    let mut h = Histogram::new(n);
    let rounds = 100_000u64;
    for _ in 0..rounds {
        let menu = uniform_pad_menu(&h, 2, &mut rng).unwrap();
        let v = h.normalize().unwrap_or_else(|_| SimplexVector::uniform(n));
        h.record(sample_choice(&m, &v, &menu, &mut rng)).unwrap();
    }
    let spread = h.counts().iter().max().unwrap() - h.counts().iter().min().unwrap();
    assert!((spread as f64) <= GAMMA * rounds as f64 + 2.0 * n as f64, "spread {spread}");
}

#[test]
fn move_to_reaches_a_target_on_the_ball_boundary() {
    let (n, k) = (5, 2);
    let m = dispersed(n);
    let rad = eird_ball_radius(n, k);
    let mut x = vec![1.0 / n as f64 - rad / (n - 1) as f64; n];
    x[2] = 1.0 / n as f64 + rad;
    let x = SimplexVector::new(x).unwrap();
    let window = 200_000u64;
    let mut rng = derive_rng(32, 0);
    let mut h = Histogram::new(n);
    let target = SteeringTarget::from_distribution(&x, window, &h);
    assert!(target.within_ball(k));
    for _ in 0..window {
        let menu = move_to_menu(&h, &target, k, &mut rng).unwrap();
        let v = h.normalize().unwrap_or_else(|_| SimplexVector::uniform(n));
        h.record(sample_choice(&m, &v, &menu, &mut rng)).unwrap();
    }
    for i in 0..n {
        let gap = (h.count(i) as f64 - target.counts[i] as f64).abs();
        assert!(gap <= GAMMA * window as f64 + 2.0 * n as f64, "item {i}: gap {gap}");
    }
}
