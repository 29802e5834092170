//! Menu distributions that induce a target item distribution.

use serde::Serialize;
use thiserror::Error;

use crate::core_types::{dist, CoreError, MenuCatalog, MenuDistribution, SimplexVector};
use crate::geometry_sets::{ird_vertices, IrdPolytope};
use crate::preference_models::{menu_probs, PreferenceModel};

#[derive(Debug, Error)]
pub enum MenuSolverError {
    #[error("catalog is for n = {catalog}, model has n = {model}")]
    CatalogMismatch { catalog: usize, model: usize },
    #[error("menu distribution has {got} weights, catalog has {want} menus")]
    LengthMismatch { got: usize, want: usize },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Residual below which a target counts as exactly induced.
pub const EXACT_RESIDUAL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct InductionSolution {
    pub z: MenuDistribution,
    /// `Σ_j z_j p_{K_j}` under the model the solver was given.
    pub induced: SimplexVector,
    /// `‖induced - target‖`.
    pub residual: f64,
    /// Menus with weight above 1e-12.
    pub support: usize,
    pub iterations: usize,
    pub capped: bool,
}

impl InductionSolution {
    pub fn exact(&self) -> bool {
        self.residual <= EXACT_RESIDUAL
    }
}

/// Find `z` with `Σ_j z_j p̂_{K_j,v} = target`, or the nearest inducible point when none exists.
pub fn solve_play_dist<M: PreferenceModel + ?Sized>(
    hypothesis: &M,
    v: &SimplexVector,
    target: &[f64],
    catalog: &MenuCatalog,
) -> Result<InductionSolution, MenuSolverError> {
    if catalog.n() != hypothesis.n() || target.len() != hypothesis.n() {
        return Err(MenuSolverError::CatalogMismatch { catalog: catalog.n(), model: hypothesis.n() });
    }
    Ok(solve_on_polytope(&ird_vertices(hypothesis, v, catalog), target))
}

/// Same as [`solve_play_dist`] with the polytope already built.
pub fn solve_on_polytope(ird: &IrdPolytope, target: &[f64]) -> InductionSolution {
    let h = ird.hull().nearest(target);
    let z = MenuDistribution::from_numeric(&h.weights).expect("hull weights are convex");
    let induced_raw = ird.hull().combine(z.weights());
    let residual = dist(&induced_raw, target);
    let induced = SimplexVector::from_numeric(&induced_raw).expect("mixture of simplex points");
    InductionSolution {
        support: z.support_size(1e-12),
        z,
        induced,
        residual,
        iterations: h.iterations,
        capped: h.capped,
    }
}

/// The item distribution the agent actually follows when menus are drawn from `z`.
pub fn induced_distribution<M: PreferenceModel + ?Sized>(
    m: &M,
    v: &SimplexVector,
    z: &MenuDistribution,
    catalog: &MenuCatalog,
) -> Result<SimplexVector, MenuSolverError> {
    let mut acc = vec![0.0; m.n()];
    induced_into(m, v, z, catalog, &mut acc)?;
    Ok(SimplexVector::from_numeric(&acc)?)
}

fn induced_into<M: PreferenceModel + ?Sized>(
    m: &M,
    v: &SimplexVector,
    z: &MenuDistribution,
    catalog: &MenuCatalog,
    acc: &mut [f64],
) -> Result<(), MenuSolverError> {
    if z.len() != catalog.len() {
        return Err(MenuSolverError::LengthMismatch { got: z.len(), want: catalog.len() });
    }
    if catalog.n() != m.n() {
        return Err(MenuSolverError::CatalogMismatch { catalog: catalog.n(), model: m.n() });
    }
    let scores = m.evaluate(v).scores;
    let mut buf = vec![0.0; m.n()];
    acc.iter_mut().for_each(|a| *a = 0.0);
    for (j, &w) in z.weights().iter().enumerate() {
        if w > 0.0 {
            menu_probs(&scores, catalog.menu(j), &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += w * b;
            }
        }
    }
    Ok(())
}

/// `‖induced(truth) - induced(hypothesis)‖` for the same menu distribution.
pub fn perturbation_bound_check<H: PreferenceModel + ?Sized, T: PreferenceModel + ?Sized>(
    hypothesis: &H,
    truth: &T,
    v: &SimplexVector,
    z: &MenuDistribution,
    catalog: &MenuCatalog,
) -> Result<f64, MenuSolverError> {
    let mut a = vec![0.0; truth.n()];
    let mut b = vec![0.0; hypothesis.n()];
    induced_into(truth, v, z, catalog, &mut a)?;
    induced_into(hypothesis, v, z, catalog, &mut b)?;
    Ok(dist(&a, &b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_types::{derive_rng, enumerate_menus, random_simplex, Menu};
    use crate::preference_models::{sample_choice, BupModel, TabularOracleModel};
    use rand::Rng;

    fn model5() -> BupModel {
        BupModel::new(0.3, vec![vec![0.5, 0.4], vec![0.9, -0.5], vec![0.35], vec![0.6, 0.3], vec![0.8, -0.2]]).unwrap()
    }

    #[test]
    fn vertex_target_gives_point_mass() {
        let cat = enumerate_menus(5, 2).unwrap();
        let m = model5();
        let v = SimplexVector::new(vec![0.1, 0.3, 0.2, 0.2, 0.2]).unwrap();
        let ird = ird_vertices(&m, &v, &cat);
        for j in [0, 4, 9] {
            let s = solve_play_dist(&m, &v, ird.vertices[j].coords(), &cat).unwrap();
            assert!(s.residual < 1e-15);
            assert!((s.z.weights()[j] - 1.0).abs() < 1e-12, "{:?}", s.z.weights());
        }
    }

    #[test]
    fn uniform_target_with_uniform_scores() {
        let cat = enumerate_menus(6, 3).unwrap();
        let flat = BupModel::new(0.5, vec![vec![0.7]; 6]).unwrap();
        let v = SimplexVector::uniform(6);
        let s = solve_play_dist(&flat, &v, v.coords(), &cat).unwrap();
        assert!(s.residual <= 1e-10);
        assert!(s.support <= cat.len());
    }

    #[test]
    fn recovers_random_mixtures() {
        let cat = enumerate_menus(5, 2).unwrap();
        let m = model5();
        let mut rng = derive_rng(5, 0);
        for _ in 0..50 {
            let v = random_simplex(5, &mut rng);
            let ird = ird_vertices(&m, &v, &cat);
            let w = random_simplex(3, &mut rng);
            let mut target = vec![0.0; 5];
            for (c, &j) in w.coords().iter().zip(&[rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(0..10)]) {
                for (t, p) in target.iter_mut().zip(ird.vertices[j].coords()) {
                    *t += c * p;
                }
            }
            let s = solve_play_dist(&m, &v, &target, &cat).unwrap();
            assert!(s.residual <= 1e-8, "{}", s.residual);
            assert!(s.support <= 5 + 1);
            let again = induced_distribution(&m, &v, &s.z, &cat).unwrap();
            assert!((dist(again.coords(), s.induced.coords())) < 1e-12);
            // Residual stored equals recomputation.
            assert!((dist(again.coords(), &target) - s.residual).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_target_returns_nearest_point() {
        let cat = enumerate_menus(4, 2).unwrap();
        let m = BupModel::new(0.5, vec![vec![0.5, 0.5], vec![0.9], vec![0.6], vec![0.7, -0.2]]).unwrap();
        let v = SimplexVector::uniform(4);
        let target = [1.0, 0.0, 0.0, 0.0];
        let s = solve_play_dist(&m, &v, &target, &cat).unwrap();
        let ird = ird_vertices(&m, &v, &cat);
        assert!(s.residual <= ird.distance(&target) + 1e-9);
        assert!(!s.exact());
    }

    #[test]
    fn disjoint_menus_mix_to_uniform() {
        let cat = enumerate_menus(4, 2).unwrap();
        let flat = BupModel::new(0.5, vec![vec![0.5]; 4]).unwrap();
        let mut w = vec![0.0; 6];
        w[cat.index_of(&Menu::new(vec![0, 1], 4).unwrap()).unwrap()] = 0.5;
        w[cat.index_of(&Menu::new(vec![2, 3], 4).unwrap()).unwrap()] = 0.5;
        let z = MenuDistribution::new(w).unwrap();
        let p = induced_distribution(&flat, &SimplexVector::uniform(4), &z, &cat).unwrap();
        assert_eq!(p.coords(), &[0.25; 4]);
    }

    #[test]
    fn induced_is_affine_in_z() {
        let cat = enumerate_menus(5, 3).unwrap();
        let m = model5();
        let mut rng = derive_rng(6, 0);
        for _ in 0..20 {
            let v = random_simplex(5, &mut rng);
            let a = random_simplex(cat.len(), &mut rng);
            let b = random_simplex(cat.len(), &mut rng);
            let t: f64 = rng.gen();
            let mix: Vec<f64> = a.coords().iter().zip(b.coords()).map(|(x, y)| t * x + (1.0 - t) * y).collect();
            let za = MenuDistribution::new(a.coords().to_vec()).unwrap();
            let zb = MenuDistribution::new(b.coords().to_vec()).unwrap();
            let zm = MenuDistribution::new(mix).unwrap();
            let pa = induced_distribution(&m, &v, &za, &cat).unwrap();
            let pb = induced_distribution(&m, &v, &zb, &cat).unwrap();
            let pm = induced_distribution(&m, &v, &zm, &cat).unwrap();
            for i in 0..5 {
                assert!((pm.get(i) - (t * pa.get(i) + (1.0 - t) * pb.get(i))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_rounds_match_induced_distribution() {
        let cat = enumerate_menus(4, 2).unwrap();
        let m = BupModel::new(0.5, vec![vec![0.5, 0.5], vec![0.9], vec![0.6], vec![0.7, -0.2]]).unwrap();
        let v = SimplexVector::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let z = MenuDistribution::new(vec![0.1, 0.2, 0.3, 0.15, 0.15, 0.1]).unwrap();
        let p = induced_distribution(&m, &v, &z, &cat).unwrap();
        let mut rng = derive_rng(7, 0);
        let trials = 1_000_000;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            let j = z.sample(&mut rng);
            counts[sample_choice(&m, &v, cat.menu(j), &mut rng)] += 1;
        }
        for i in 0..4 {
            let f = counts[i] as f64 / trials as f64;
            let sd = (p.get(i) * (1.0 - p.get(i)) / trials as f64).sqrt();
            assert!((f - p.get(i)).abs() <= 4.0 * sd);
        }
    }

    #[test]
    fn perturbation_closed_form() {
        let cat = enumerate_menus(3, 2).unwrap();
        let beta = 0.05;
        let truth = TabularOracleModel::new(3, 0.5, |_| vec![0.6, 0.8, 0.7]);
        let hyp = TabularOracleModel::new(3, 0.5, move |_| vec![0.6 + beta, 0.8, 0.7]);
        let v = SimplexVector::uniform(3);
        let z = MenuDistribution::point_mass(3, 0); // menu {0, 1}
        let got = perturbation_bound_check(&hyp, &truth, &v, &z, &cat).unwrap();
        let (a, b) = (0.6 / 1.4, (0.6 + beta) / (1.4 + beta));
        let want = ((a - b).powi(2) * 2.0).sqrt();
        assert!((got - want).abs() < 1e-14);
        assert_eq!(perturbation_bound_check(&truth, &truth, &v, &z, &cat).unwrap(), 0.0);
    }

    #[test]
    fn small_score_errors_give_small_induced_errors() {
        let (n, k, lambda, eps) = (5, 2, 0.3, 0.1);
        let cat = enumerate_menus(n, k).unwrap();
        let truth = model5();
        let beta = eps * lambda * k as f64 / n as f64;
        let mut rng = derive_rng(8, 0);
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let mut dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|d| *d *= beta / norm);
            let t2 = truth.clone();
            let hyp = TabularOracleModel::new(n, lambda, move |v| {
                let mut s = vec![0.0; n];
                t2.scores_into(v, &mut s);
                s.iter().zip(&dir).map(|(a, b)| a + b).collect()
            });
            let v = random_simplex(n, &mut rng);
            let z = MenuDistribution::new(random_simplex(cat.len(), &mut derive_rng(9, trial)).into_vec()).unwrap();
            worst = worst.max(perturbation_bound_check(&hyp, &truth, &v, &z, &cat).unwrap());
        }
        assert!(worst <= eps, "{worst}");
    }
}
