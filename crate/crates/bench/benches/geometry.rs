use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use menugame_core::core_types::{derive_rng, enumerate_menus, random_simplex, SimplexVector};
use menugame_core::geometry_sets::{
    ird_vertices, nearest_point_in_hull, project_onto_simplex, to_chart, DecisionSet, EntropySet, HullSet,
};
use menugame_core::menu_solver::solve_play_dist;
use menugame_core::preference_models::random_bup;
use rand::Rng;

fn hull_nearest(c: &mut Criterion) {
    let mut g = c.benchmark_group("wolfe_nearest");
    for n in [4usize, 6, 8] {
        let mut rng = derive_rng(1, 0);
        let m = random_bup(n, 2, 4.0 / n as f64, &mut rng).unwrap();
        let catalog = enumerate_menus(n, 2).unwrap();
        let verts: Vec<Vec<f64>> =
            ird_vertices(&m, &SimplexVector::uniform(n), &catalog).vertices.iter().map(|v| v.coords().to_vec()).collect();
        let targets: Vec<Vec<f64>> = (0..64).map(|_| random_simplex(n, &mut rng).into_vec()).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            let mut i = 0;
            b.iter(|| {
                i = (i + 1) % targets.len();
                black_box(nearest_point_in_hull(&verts, &targets[i]).unwrap())
            })
        });
    }
    g.finish();
}

fn entropy_projection(c: &mut Criterion) {
    let n = 6;
    let set = EntropySet::new(n, 0.9 * (n as f64).ln()).unwrap();
    let mut rng = derive_rng(2, 0);
    let points: Vec<Vec<f64>> = (0..64).map(|_| (0..n - 1).map(|_| rng.gen_range(-0.3..0.3)).collect()).collect();
    c.bench_function("entropy_project_chart", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % points.len();
            black_box(set.project_chart(&points[i]).unwrap())
        })
    });
    c.bench_function("simplex_projection", |b| {
        let mut i = 0;
        b.iter(|| {
            i = (i + 1) % points.len();
            black_box(project_onto_simplex(&points[i]))
        })
    });
}

fn dykstra(c: &mut Criterion) {
    let n = 5;
    let mut rng = derive_rng(3, 0);
    let m = random_bup(n, 1, 0.8, &mut rng).unwrap();
    let catalog = enumerate_menus(n, 2).unwrap();
    let mut g = c.benchmark_group("dykstra_decision_set");
    for sets in [1usize, 8, 32] {
        let mut ds = DecisionSet::from_entropy(EntropySet::new(n, 0.8 * (n as f64).ln()).unwrap());
        for _ in 0..sets {
            let v = random_simplex(n, &mut rng);
            let mixed: Vec<f64> = v.coords().iter().map(|x| 0.5 * x + 0.1).collect();
            let p = ird_vertices(&m, &SimplexVector::new(mixed).unwrap(), &catalog);
            ds.add(Arc::new(HullSet::chart_ird(&p)));
        }
        // Doubling the chart offset pushes most targets outside the intersection.
        let targets: Vec<Vec<f64>> = (0..32)
            .map(|_| to_chart(random_simplex(n, &mut rng).coords()).into_iter().map(|x| 2.0 * x).collect())
            .collect();
        g.bench_with_input(BenchmarkId::from_parameter(sets), &sets, |b, _| {
            let mut i = 0;
            b.iter(|| {
                i = (i + 1) % targets.len();
                black_box(ds.project(&targets[i]).unwrap())
            })
        });
    }
    g.finish();
}

fn play_dist(c: &mut Criterion) {
    let n = 6;
    let mut rng = derive_rng(4, 0);
    let m = random_bup(n, 1, 0.7, &mut rng).unwrap();
    let catalog = enumerate_menus(n, 2).unwrap();
    let v = random_simplex(n, &mut rng);
    let target = SimplexVector::uniform(n).into_vec();
    c.bench_function("solve_play_dist_n6_k2", |b| b.iter(|| black_box(solve_play_dist(&m, &v, &target, &catalog).unwrap())));
}

criterion_group!(benches, hull_nearest, entropy_projection, dykstra, play_dist);
criterion_main!(benches);
