//! Bandit linear optimization over a shrinking decision set (one-point
//! gradient estimates on a sphere), and its full-information counterpart.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_types::norm;
use crate::geometry_sets::{DecisionSet, GeometryError, ProjectionReport};

#[derive(Debug, Error)]
pub enum FkmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("loss {0} is outside [0, 1]")]
    LossRange(f64),
    #[error("no action has been proposed this round")]
    NoAction,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FkmConfig {
    pub horizon: usize,
    /// Chart dimension (`n - 1`).
    pub dim: usize,
    pub eta: f64,
    /// Exploration radius.
    pub delta: f64,
    /// Budget for externally applied action perturbations.
    pub epsilon: f64,
    /// Radius of a ball around the origin inside every decision set.
    pub r: f64,
    pub diameter: f64,
    pub lipschitz: f64,
    pub seed: u64,
}

impl FkmConfig {
    pub fn validate(&self) -> Result<(), FkmError> {
        if self.dim == 0 {
            return Err(FkmError::Config("dimension must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(FkmError::Config(format!("step {} must be positive", self.eta)));
        }
        if !(self.delta > 0.0 && self.delta < self.r) {
            return Err(FkmError::Config(format!("exploration radius {} must lie in (0, r = {})", self.delta, self.r)));
        }
        if self.epsilon < 0.0 || self.r <= self.delta + self.epsilon {
            return Err(FkmError::Config(format!(
                "r = {} must exceed delta + epsilon = {}",
                self.r,
                self.delta + self.epsilon
            )));
        }
        Ok(())
    }

    /// `r / (r - δ - ε)`: scaling a point by this keeps room for exploration and perturbation.
    pub fn shrink_factor(&self) -> f64 {
        self.r / (self.r - self.delta - self.epsilon)
    }
}

/// Step size and exploration radius for horizon `t`: `η = D / (dim T^{3/4})`,
/// `δ = min(T^{-1/4}, 0.9 r T^{-1/4})`.
pub fn default_schedule(t: usize, diameter: f64, chart_dim: usize, r: f64) -> Result<(f64, f64), FkmError> {
    if t < 16 {
        return Err(FkmError::Config(format!("horizon {t} is below 16")));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(FkmError::Config(format!("interior radius {r} leaves no room for exploration")));
    }
    let tq = (t as f64).powf(0.25);
    let eta = diameter / (chart_dim as f64 * tq * tq * tq);
    let delta = f64::min(1.0 / tq, 0.9 * r / tq);
    Ok((eta, delta))
}

/// A direction drawn uniformly from the unit sphere in `dim` dimensions.
pub fn sample_unit_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let l = norm(&g);
        if l > 1e-300 {
            return g.into_iter().map(|x| x / l).collect();
        }
    }
}

/// One-point gradient estimate `(dim / δ) φ u`.
pub fn gradient_estimate(dim: usize, delta: f64, phi: f64, u: &[f64]) -> Vec<f64> {
    let s = dim as f64 / delta * phi;
    u.iter().map(|x| s * x).collect()
}

pub struct FkmState {
    pub config: FkmConfig,
    pub t: usize,
    /// Current center.
    pub x: Vec<f64>,
    /// Last exploration direction.
    pub u: Vec<f64>,
    /// Last proposed action, cleared by `observe_loss`.
    pub y: Option<Vec<f64>>,
    set: DecisionSet,
    pub last_projection: Option<ProjectionReport>,
}

impl FkmState {
    /// Start at the origin with the decision set shrunk by the config's factor.
    pub fn new(config: FkmConfig, mut set: DecisionSet) -> Result<Self, FkmError> {
        config.validate()?;
        if set.dim() != config.dim {
            return Err(FkmError::Config(format!("decision set has dimension {}, config {}", set.dim(), config.dim)));
        }
        set.set_shrink(config.shrink_factor());
        let dim = config.dim;
        let mut u = vec![0.0; dim];
        u[0] = 1.0;
        Ok(FkmState { config, t: 0, x: vec![0.0; dim], u, y: None, set, last_projection: None })
    }

    pub fn decision_set(&self) -> &DecisionSet {
        &self.set
    }

    /// Intersect further sets before the next `observe_loss`.
    pub fn decision_set_mut(&mut self) -> &mut DecisionSet {
        &mut self.set
    }

    /// `x_t + δ u_t` with a fresh direction.
    pub fn propose_action<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.u = sample_unit_sphere(self.config.dim, rng);
        let y: Vec<f64> = self.x.iter().zip(&self.u).map(|(x, u)| x + self.config.delta * u).collect();
        self.y = Some(y.clone());
        y
    }

    /// Gradient step on the observed loss, then projection onto the shrunk decision set.
    pub fn observe_loss(&mut self, phi: f64) -> Result<&ProjectionReport, FkmError> {
        if !(0.0..=1.0).contains(&phi) {
            return Err(FkmError::LossRange(phi));
        }
        if self.y.take().is_none() {
            return Err(FkmError::NoAction);
        }
        let g = gradient_estimate(self.config.dim, self.config.delta, phi, &self.u);
        let step: Vec<f64> = self.x.iter().zip(&g).map(|(x, g)| x - self.config.eta * g).collect();
        let report = self.set.project(&step)?;
        self.x = report.point.clone();
        self.t += 1;
        Ok(self.last_projection.insert(report))
    }

    /// Replace the decision set (it must be a subset of the current one).
    pub fn replace_set(&mut self, mut next: DecisionSet) {
        next.set_shrink(self.config.shrink_factor());
        self.set = next;
    }
}

/// One full-information step: `Π_{next}(x - η ∇)`, no exploration, no shrinking.
pub fn contracting_ogd_step(x: &[f64], gradient: &[f64], next_set: &DecisionSet, eta: f64) -> Result<Vec<f64>, FkmError> {
    let y: Vec<f64> = x.iter().zip(gradient).map(|(a, g)| a - eta * g).collect();
    Ok(next_set.project(&y)?.point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_types::{derive_rng, dot};
    use crate::geometry_sets::{Ball, BoxSet};
    use std::sync::Arc;

    #[test]
    fn schedule_examples() {
        let (eta, delta) = default_schedule(10_000, 2.0, 4, 10.0).unwrap();
        assert!((eta - 5e-4).abs() < 1e-15);
        assert!((delta - 0.1).abs() < 1e-15);
        let (_, delta) = default_schedule(10_000, 2.0, 4, 0.05).unwrap();
        assert!((delta - 4.5e-3).abs() < 1e-15);
        assert!(default_schedule(8, 2.0, 4, 1.0).is_err());
        assert!(default_schedule(100, 2.0, 4, 0.0).is_err());
    }

    #[test]
    fn gradient_example() {
        let g = gradient_estimate(3, 0.1, 0.5, &[1.0, 0.0, 0.0]);
        assert!((g[0] - 15.0).abs() < 1e-12);
    }

    fn ball_state(dim: usize, delta: f64) -> FkmState {
        let mut set = DecisionSet::new(dim);
        set.pin(Arc::new(Ball { center: vec![0.0; dim], radius: 1.0 }));
        let cfg = FkmConfig {
            horizon: 100,
            dim,
            eta: 0.01,
            delta,
            epsilon: 0.0,
            r: 1.0,
            diameter: 2.0,
            lipschitz: 1.0,
            seed: 0,
        };
        FkmState::new(cfg, set).unwrap()
    }

    #[test]
    fn proposal_lies_on_the_exploration_sphere() {
        let mut s = ball_state(4, 0.1);
        let mut rng = derive_rng(1, 0);
        let y = s.propose_action(&mut rng);
        assert!((norm(&y) - 0.1).abs() < 1e-15);
        assert!((norm(&s.u) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_keeps_center() {
        let mut s = ball_state(3, 0.1);
        let mut rng = derive_rng(2, 0);
        s.x = vec![0.2, -0.1, 0.05];
        s.propose_action(&mut rng);
        s.observe_loss(0.0).unwrap();
        assert_eq!(s.x, vec![0.2, -0.1, 0.05]);
        assert!(s.observe_loss(0.0).is_err());
    }

    #[test]
    fn sphere_samples_are_isotropic() {
        let dim = 4;
        let mut rng = derive_rng(3, 0);
        let draws = 100_000;
        let mut mean = vec![0.0; dim];
        let mut cov = vec![vec![0.0; dim]; dim];
        for _ in 0..draws {
            let u = sample_unit_sphere(dim, &mut rng);
            for i in 0..dim {
                mean[i] += u[i];
                for j in 0..dim {
                    cov[i][j] += u[i] * u[j];
                }
            }
        }
        let sd = (1.0 / dim as f64 / draws as f64).sqrt();
        for i in 0..dim {
            assert!((mean[i] / draws as f64).abs() <= 4.0 * sd);
            for j in 0..dim {
                let want = if i == j { 1.0 / dim as f64 } else { 0.0 };
                assert!((cov[i][j] / draws as f64 - want).abs() < 0.01);
            }
        }
    }

    #[test]
    fn one_point_estimator_is_unbiased() {
        let dim = 3;
        let delta = 0.2;
        let w = [0.3, -0.2, 0.1];
        let x = [0.1, 0.0, -0.1];
        let f = |p: &[f64]| 0.5 + dot(&w, p);
        let mut rng = derive_rng(4, 0);
        let draws = 1_000_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..draws {
            let u = sample_unit_sphere(dim, &mut rng);
            let y: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + delta * b).collect();
            let g = gradient_estimate(dim, delta, f(&y), &u);
            for i in 0..dim {
                sum[i] += g[i];
                sq[i] += g[i] * g[i];
            }
        }
        for i in 0..dim {
            let m = sum[i] / draws as f64;
            let var = sq[i] / draws as f64 - m * m;
            assert!((m - w[i]).abs() <= 4.0 * (var / draws as f64).sqrt(), "coord {i}: {m} vs {}", w[i]);
        }
    }

    #[test]
    fn same_seed_same_iterates() {
        let run = || {
            let mut s = ball_state(3, 0.1);
            let mut rng = derive_rng(5, 0);
            let mut xs = Vec::new();
            for t in 0..200 {
                let y = s.propose_action(&mut rng);
                s.observe_loss((0.5 + 0.3 * y[0] + 0.01 * (t % 7) as f64).clamp(0.0, 1.0)).unwrap();
                xs.push(s.x.clone());
            }
            xs
        };
        assert_eq!(run(), run());
    }

    fn interval(lo: f64, hi: f64) -> DecisionSet {
        let mut d = DecisionSet::new(1);
        d.pin(Arc::new(BoxSet { lo: vec![lo], hi: vec![hi] }));
        d
    }

    #[test]
    fn ogd_descends_to_the_interval_end() {
        let set = interval(-1.0, 1.0);
        let mut x = vec![1.0];
        let mut prev = x[0];
        for _ in 0..40 {
            x = contracting_ogd_step(&x, &[1.0], &set, 0.1).unwrap();
            assert!(x[0] <= prev);
            prev = x[0];
        }
        assert!((x[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ogd_stays_feasible_on_contracting_intervals() {
        let t_max = 1000;
        let mut x = vec![0.9];
        let mut rng = derive_rng(6, 0);
        for t in 1..=t_max {
            let set = interval(-1.0, 1.0 - t as f64 / t_max as f64);
            let g = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            x = contracting_ogd_step(&x, &[g], &set, 0.05).unwrap();
            assert!(x[0] >= -1.0 - 1e-12 && x[0] <= 1.0 - t as f64 / t_max as f64 + 1e-12);
        }
    }
}
