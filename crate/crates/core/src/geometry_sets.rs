//! Convex sets over item distributions and Euclidean projection onto them.
//!
//! Two coordinate systems appear here. Ambient coordinates are the `n` simplex
//! coordinates. The chart drops the last coordinate and moves the uniform
//! vector to the origin: `x_l = v_l - 1/n` for `l < n - 1`, and
//! `v_{n-1} = 1/n - Σ x_l`. The optimizer works in the chart, so decision sets
//! are chart sets and distances there use the chart's own Euclidean norm.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::core_types::{
    binomial, dist, dot, entropy_of, norm, random_simplex, CoreError, MenuCatalog, SimplexVector,
};
use crate::preference_models::{menu_probs, PreferenceModel};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("{what} did not converge (residual {residual:e})")]
    NonConvergence { what: &'static str, residual: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Map an ambient simplex point to the chart.
pub fn to_chart(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let u = 1.0 / n as f64;
    v[..n - 1].iter().map(|x| x - u).collect()
}

/// Map a chart point back to ambient coordinates (may leave the simplex).
pub fn from_chart(x: &[f64]) -> Vec<f64> {
    let n = x.len() + 1;
    let u = 1.0 / n as f64;
    let mut v: Vec<f64> = x.iter().map(|c| u + c).collect();
    v.push(u - x.iter().sum::<f64>());
    v
}

/// Result of a nearest-point computation in a convex hull.
#[derive(Debug, Clone, Serialize)]
pub struct HullProjection {
    pub point: Vec<f64>,
    /// Convex weights over the hull's vertices; `point = Σ w_j p_j`.
    pub weights: Vec<f64>,
    pub distance: f64,
    /// `‖Σ w_j p_j - point‖`, recomputed.
    pub residual: f64,
    pub iterations: usize,
    /// True when the iteration cap stopped the solver.
    pub capped: bool,
}

pub const WOLFE_MAX_ITER: usize = 2000;

/// Vertices stored row-major, with Wolfe's minimum-norm-point algorithm.
#[derive(Debug, Clone)]
pub struct PointHull {
    dim: usize,
    data: Vec<f64>,
}

impl PointHull {
    pub fn new(vertices: &[Vec<f64>]) -> Result<Self, GeometryError> {
        let dim = vertices.first().map(|v| v.len()).ok_or_else(|| GeometryError::Invalid("empty hull".into()))?;
        if vertices.iter().any(|v| v.len() != dim) {
            return Err(GeometryError::Invalid("vertices of different dimension".into()));
        }
        Ok(PointHull { dim, data: vertices.iter().flatten().copied().collect() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vertex(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    /// Convex combination of the vertices.
    pub fn combine(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (j, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for (o, p) in out.iter_mut().zip(self.vertex(j)) {
                    *o += w * p;
                }
            }
        }
        out
    }

    /// Nearest point of the hull to `target`, with witness weights.
    pub fn nearest(&self, target: &[f64]) -> HullProjection {
        let (dim, m) = (self.dim, self.len());
        let q: Vec<f64> = self
            .data
            .chunks_exact(dim)
            .flat_map(|p| p.iter().zip(target).map(|(a, b)| a - b))
            .collect();
        let qv = |j: usize| &q[j * dim..(j + 1) * dim];
        let mut max_sq: f64 = 0.0;
        let mut j0 = 0;
        let mut best = f64::INFINITY;
        for j in 0..m {
            let s = dot(qv(j), qv(j));
            max_sq = max_sq.max(s);
            if s < best {
                best = s;
                j0 = j;
            }
        }
        let scale = max_sq.max(1e-300);
        let mut corral = vec![j0];
        let mut lam = vec![1.0];
        let mut x = qv(j0).to_vec();
        let mut iterations = 0;
        let mut capped = true;
        let mut alpha = Vec::with_capacity(dim + 2);
        while iterations < WOLFE_MAX_ITER {
            iterations += 1;
            let xx = dot(&x, &x);
            if xx <= 1e-30 * scale {
                capped = false;
                break;
            }
            let mut jmin = 0;
            let mut pmin = f64::INFINITY;
            for j in 0..m {
                let p = dot(&x, qv(j));
                if p < pmin {
                    pmin = p;
                    jmin = j;
                }
            }
            if xx - pmin <= 1e-14 * scale || corral.contains(&jmin) {
                capped = false;
                break;
            }
            corral.push(jmin);
            lam.push(0.0);
            let mut stalled = false;
            loop {
                if !affine_min_norm(&q, dim, &corral, &mut alpha) {
                    // Affinely dependent corral: undo the last insertion and stop.
                    corral.pop();
                    lam.pop();
                    stalled = true;
                    break;
                }
                if alpha.iter().all(|&a| a > 1e-14) {
                    lam.copy_from_slice(&alpha);
                    break;
                }
                let mut theta = 1.0;
                for (l, a) in lam.iter().zip(&alpha) {
                    if *a <= 1e-14 {
                        let d = l - a;
                        if d > 0.0 {
                            theta = f64::min(theta, l / d);
                        }
                    }
                }
                for (l, a) in lam.iter_mut().zip(&alpha) {
                    *l += theta * (a - *l);
                }
                // Drop the vertex that hit zero (at least one does).
                let mut keep_c = Vec::with_capacity(corral.len());
                let mut keep_l = Vec::with_capacity(corral.len());
                let imin = argmin(&lam);
                for (i, (&c, &l)) in corral.iter().zip(&lam).enumerate() {
                    if i != imin && l > 1e-14 {
                        keep_c.push(c);
                        keep_l.push(l);
                    }
                }
                corral = keep_c;
                lam = keep_l;
                let s: f64 = lam.iter().sum();
                lam.iter_mut().for_each(|l| *l /= s);
                if corral.len() == 1 {
                    lam[0] = 1.0;
                    break;
                }
            }
            x.iter_mut().for_each(|v| *v = 0.0);
            for (&c, &l) in corral.iter().zip(&lam) {
                for (xi, qi) in x.iter_mut().zip(qv(c)) {
                    *xi += l * qi;
                }
            }
            if stalled {
                capped = false;
                break;
            }
        }
        let mut weights = vec![0.0; m];
        for (&c, &l) in corral.iter().zip(&lam) {
            weights[c] = l;
        }
        let point = self.combine(&weights);
        let residual = dist(&self.combine(&weights), &point);
        let distance = dist(&point, target);
        HullProjection { point, weights, distance, residual, iterations, capped }
    }
}

/// Minimum-norm point of the affine hull of the corral; writes barycentric weights.
fn affine_min_norm(q: &[f64], dim: usize, corral: &[usize], alpha: &mut Vec<f64>) -> bool {
    let s = corral.len();
    let w = s + 1;
    // Bordered system [G 1; 1ᵀ 0][α; μ] = [0; 1].
    let mut a = vec![0.0; w * w];
    let mut b = vec![0.0; w];
    for i in 0..s {
        let qi = &q[corral[i] * dim..(corral[i] + 1) * dim];
        for j in i..s {
            let qj = &q[corral[j] * dim..(corral[j] + 1) * dim];
            let g = dot(qi, qj);
            a[i * w + j] = g;
            a[j * w + i] = g;
        }
        a[i * w + s] = 1.0;
        a[s * w + i] = 1.0;
    }
    b[s] = 1.0;
    if !solve_dense(&mut a, &mut b, w) {
        return false;
    }
    alpha.clear();
    alpha.extend_from_slice(&b[..s]);
    alpha.iter().all(|v| v.is_finite())
}

/// Gaussian elimination with partial pivoting; solution left in `b`.
pub(crate) fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col].abs() <= 1e-13 * scale {
            return false;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f != 0.0 {
                for c in col..n {
                    a[r * n + c] -= f * a[col * n + c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in col + 1..n {
            s -= a[col * n + c] * b[c];
        }
        b[col] = s / a[col * n + col];
    }
    true
}

fn argmin(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] < x[best] {
            best = i;
        }
    }
    best
}

/// Largest number of vertex subsets examined when listing facets.
pub const FACET_ENUM_LIMIT: u128 = 20_000;

/// Halfspace description `a·x <= b` of a full-dimensional polytope, used as a
/// fast membership certificate.
#[derive(Debug, Clone)]
pub struct Facets {
    normals: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

impl Facets {
    /// Facets of `conv(vertices)` by checking every hyperplane through `dim`
    /// vertices. `None` when the hull is not full-dimensional or the subset
    /// count exceeds [`FACET_ENUM_LIMIT`].
    pub fn of(vertices: &[Vec<f64>]) -> Option<Facets> {
        let m = vertices.len();
        let d = vertices.first()?.len();
        if d == 0 || m < d + 1 || binomial(m, d) > FACET_ENUM_LIMIT {
            return None;
        }
        let scale = vertices.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
        let tol = 1e-11 * scale;
        let mut out = Facets { normals: Vec::new(), offsets: Vec::new() };
        let mut idx: Vec<usize> = (0..d).collect();
        loop {
            let p0 = &vertices[idx[0]];
            let mut rows: Vec<Vec<f64>> =
                idx[1..].iter().map(|&j| vertices[j].iter().zip(p0).map(|(a, b)| a - b).collect()).collect();
            if let Some(a) = null_vector(&mut rows, d) {
                let b = dot(&a, p0);
                let (mut above, mut below) = (false, false);
                for v in vertices {
                    let s = dot(&a, v) - b;
                    above |= s > tol;
                    below |= s < -tol;
                }
                if !above && !below {
                    // Every vertex on one hyperplane: the hull is flat.
                    return None;
                }
                if !(above && below) {
                    let (a, b) = if above { (a.iter().map(|x| -x).collect(), -b) } else { (a, b) };
                    out.push_unique(a, b);
                }
            }
            // Next combination in lexicographic order.
            let mut i = d;
            while i > 0 && idx[i - 1] == m - d + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..d {
                idx[j] = idx[j - 1] + 1;
            }
        }
        if out.normals.is_empty() {
            None
        } else {
            Some(out)
        }
    }

    fn push_unique(&mut self, a: Vec<f64>, b: f64) {
        let dup = self.normals.iter().zip(&self.offsets).any(|(n, &o)| (o - b).abs() < 1e-12 && dist(n, &a) < 1e-9);
        if !dup {
            self.normals.push(a);
            self.offsets.push(b);
        }
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    /// `max_f (a_f·x - b_f)`; nonpositive exactly when `x` is in the polytope.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.normals.iter().zip(&self.offsets).map(|(a, b)| dot(a, x) - b).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Unit vector orthogonal to the `d - 1` rows, or `None` if they are dependent.
fn null_vector(rows: &mut [Vec<f64>], d: usize) -> Option<Vec<f64>> {
    let m = rows.len();
    let scale = rows.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    if scale == 0.0 {
        return None;
    }
    let mut pivots = Vec::with_capacity(m);
    let mut r = 0;
    for c in 0..d {
        if r == m {
            break;
        }
        let p = (r..m).max_by(|&a, &b| rows[a][c].abs().partial_cmp(&rows[b][c].abs()).unwrap()).unwrap();
        if rows[p][c].abs() <= 1e-10 * scale {
            continue;
        }
        rows.swap(r, p);
        let piv = rows[r][c];
        rows[r].iter_mut().for_each(|x| *x /= piv);
        for i in 0..m {
            if i != r {
                let f = rows[i][c];
                if f != 0.0 {
                    for j in 0..d {
                        rows[i][j] -= f * rows[r][j];
                    }
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    if r < m {
        return None;
    }
    let free = (0..d).find(|c| !pivots.contains(c))?;
    let mut x = vec![0.0; d];
    x[free] = 1.0;
    for (i, &pc) in pivots.iter().enumerate() {
        x[pc] = -rows[i][free];
    }
    let l = norm(&x);
    Some(x.into_iter().map(|v| v / l).collect())
}

/// Nearest point of `conv(vertices)` to `target`.
pub fn nearest_point_in_hull(vertices: &[Vec<f64>], target: &[f64]) -> Result<HullProjection, GeometryError> {
    let hull = PointHull::new(vertices)?;
    if hull.dim() != target.len() {
        return Err(GeometryError::Invalid("target dimension differs from hull".into()));
    }
    Ok(hull.nearest(target))
}

/// The set of item distributions that showing menus can induce at one memory
/// vector: the hull of the per-menu choice distributions.
#[derive(Debug, Clone)]
pub struct IrdPolytope {
    pub memory: SimplexVector,
    /// One vertex per catalog menu, in catalog order.
    pub vertices: Vec<SimplexVector>,
    hull: PointHull,
}

impl IrdPolytope {
    pub fn hull(&self) -> &PointHull {
        &self.hull
    }

    pub fn n(&self) -> usize {
        self.memory.n()
    }

    /// Ambient distance from `x` to the polytope.
    pub fn distance(&self, x: &[f64]) -> f64 {
        self.hull.nearest(x).distance
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.distance(x) <= tol
    }

    /// Vertices mapped to the chart.
    pub fn chart_vertices(&self) -> Vec<Vec<f64>> {
        self.vertices.iter().map(|v| to_chart(v.coords())).collect()
    }
}

/// Per-menu choice distributions at memory `v`.
pub fn ird_vertices<M: PreferenceModel + ?Sized>(m: &M, v: &SimplexVector, catalog: &MenuCatalog) -> IrdPolytope {
    let n = m.n();
    let scores = m.evaluate(v).scores;
    let mut buf = vec![0.0; n];
    let vertices: Vec<SimplexVector> = catalog
        .menus()
        .iter()
        .map(|k| {
            menu_probs(&scores, k, &mut buf);
            SimplexVector::from_numeric(&buf).expect("menu choice distribution")
        })
        .collect();
    let rows: Vec<Vec<f64>> = vertices.iter().map(|p| p.coords().to_vec()).collect();
    let hull = PointHull::new(&rows).expect("catalog is nonempty");
    IrdPolytope { memory: v.clone(), vertices, hull }
}

/// Nearest point of an IRD polytope to `target` (ambient coordinates).
pub fn project_onto_hull(target: &[f64], hull: &IrdPolytope) -> Result<HullProjection, GeometryError> {
    if target.len() != hull.n() {
        return Err(GeometryError::Invalid("target dimension differs from hull".into()));
    }
    Ok(hull.hull.nearest(target))
}

/// Euclidean projection onto the simplex (sort-based).
pub fn project_onto_simplex(y: &[f64]) -> Vec<f64> {
    let mut u = y.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0)).collect()
}

/// Projection onto the simplex in chart coordinates and the chart metric.
fn project_simplex_chart(y: &[f64]) -> Vec<f64> {
    let n = y.len() + 1;
    let u = 1.0 / n as f64;
    // x_l = max(y_l - τ, -u), with τ ≥ 0 chosen so that Σ x ≤ u.
    let sum_at = |tau: f64| y.iter().map(|v| (v - tau).max(-u)).sum::<f64>();
    if sum_at(0.0) <= u {
        return y.iter().map(|v| v.max(-u)).collect();
    }
    let mut lo = 0.0;
    let mut hi = y.iter().fold(0.0f64, |m, v| m.max(v + u)) + 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum_at(mid) > u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-17 {
            break;
        }
    }
    y.iter().map(|v| (v - hi).max(-u)).collect()
}

/// Positive root `v` of `v + μ ln v = b`.
fn solve_v_log(b: f64, mu: f64) -> f64 {
    // In t = ln v the function e^t + μ t - b is convex and increasing; Newton
    // started right of the root descends monotonically onto it. The root lies
    // below b/μ, and below ln b whenever b > 0.
    let mut t = if b > 0.0 { (b / mu).min(b.ln()) } else { b / mu };
    for _ in 0..200 {
        let et = t.exp();
        let g = et + mu * t - b;
        let step = g / (et + mu);
        t -= step;
        if step.abs() <= 1e-15 * (1.0 + t.abs()) {
            break;
        }
    }
    t.exp()
}

/// Item distributions with entropy at least `c` (nats).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropySet {
    pub n: usize,
    pub c: f64,
}

/// Tolerance of the entropy-set KKT solve.
pub const ENTROPY_TOL: f64 = 1e-8;

impl EntropySet {
    pub fn new(n: usize, c: f64) -> Result<Self, GeometryError> {
        if n < 2 {
            return Err(GeometryError::Invalid("n must be at least 2".into()));
        }
        if !(c.is_finite() && c <= (n as f64).ln() + 1e-12) {
            return Err(GeometryError::Invalid(format!("threshold {c} exceeds ln n")));
        }
        Ok(EntropySet { n, c })
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        crate::core_types::in_simplex(v, tol) && entropy_of(v) >= self.c - tol
    }

    /// Closest point (ambient metric) with entropy at least `c`.
    pub fn project_ambient(&self, target: &[f64]) -> Result<SimplexVector, GeometryError> {
        if target.len() != self.n {
            return Err(GeometryError::Invalid("target dimension differs from n".into()));
        }
        let p = project_onto_simplex(target);
        if entropy_of(&p) >= self.c {
            return Ok(SimplexVector::from_numeric(&p)?);
        }
        let v = self.active_solve(|mu| ambient_point(target, mu))?;
        Ok(SimplexVector::from_numeric(&v)?)
    }

    /// Closest point in chart coordinates and the chart metric.
    pub fn project_chart(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        if y.len() + 1 != self.n {
            return Err(GeometryError::Invalid("chart point dimension differs from n - 1".into()));
        }
        let p = project_simplex_chart(y);
        if entropy_of(&from_chart(&p)) >= self.c {
            return Ok(p);
        }
        let mut warm = 0.0;
        let v = self.active_solve(|mu| chart_point(y, mu, &mut warm))?;
        Ok(to_chart(&v))
    }

    /// Root of `H(v(μ)) = c` in `ln μ`, by regula falsi (Illinois variant)
    /// kept inside a bracket. `H(v(μ))` increases with μ.
    fn active_solve(&self, mut point_at: impl FnMut(f64) -> Vec<f64>) -> Result<Vec<f64>, GeometryError> {
        let (mut lo, mut hi) = (-40.0f64, 20.0f64);
        let mut v_hi = point_at(hi.exp());
        let mut g_hi = entropy_of(&v_hi) - self.c;
        if g_hi < -ENTROPY_TOL {
            return Err(GeometryError::NonConvergence { what: "entropy projection", residual: -g_hi });
        }
        let mut g_lo = entropy_of(&point_at(lo.exp())) - self.c;
        if g_lo >= -1e-12 {
            // The constraint is inactive to working precision.
            return Ok(point_at(lo.exp()));
        }
        let mut side = 0i8;
        let mut repeats = 0;
        for _ in 0..200 {
            if g_hi <= 1e-12 || hi - lo < 1e-13 {
                break;
            }
            let mut x = hi - g_hi * (hi - lo) / (g_hi - g_lo);
            // Bisect when one end keeps moving, so flat stretches cannot stall the bracket.
            if repeats >= 3 || !(x > lo && x < hi) {
                repeats = 0;
                x = 0.5 * (lo + hi);
            }
            let v = point_at(x.exp());
            let g = entropy_of(&v) - self.c;
            if g >= 0.0 {
                hi = x;
                g_hi = g;
                v_hi = v;
                if side == 1 {
                    g_lo *= 0.5;
                    repeats += 1;
                } else {
                    repeats = 0;
                }
                side = 1;
            } else {
                lo = x;
                g_lo = g;
                if side == -1 {
                    g_hi *= 0.5;
                    repeats += 1;
                } else {
                    repeats = 0;
                }
                side = -1;
            }
        }
        let h = entropy_of(&v_hi);
        if (h - self.c).abs() > ENTROPY_TOL {
            return Err(GeometryError::NonConvergence { what: "entropy projection", residual: (h - self.c).abs() });
        }
        Ok(v_hi)
    }
}

/// KKT point of the ambient problem for multiplier `mu`: `v + μ ln v = y + κ`, Σv = 1.
fn ambient_point(y: &[f64], mu: f64) -> Vec<f64> {
    let n = y.len() as f64;
    let ymax = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let base = 1.0 / n - mu * n.ln();
    let (mut lo, mut hi) = (base - ymax, base - ymin);
    let sum_at = |k: f64| -> (f64, f64) {
        let mut s = 0.0;
        let mut ds = 0.0;
        for &yl in y {
            let v = solve_v_log(yl + k, mu);
            s += v;
            ds += v / (v + mu);
        }
        (s, ds)
    };
    let mut k = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (s, ds) = sum_at(k);
        let f = s - 1.0;
        if f.abs() <= 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = k;
        } else {
            lo = k;
        }
        let newton = k - f / ds;
        k = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-16 * (1.0 + k.abs()) {
            break;
        }
    }
    let v: Vec<f64> = y.iter().map(|&yl| solve_v_log(yl + k, mu)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// KKT point of the chart problem for multiplier `mu`:
/// `v_l + μ ln v_l = 1/n + y_l + κ` for `l < n-1`, `v_{n-1} = e^{κ/μ}`, Σv = 1.
///
/// Solved in the shift `κ = μ ln v_{n-1}` rather than in `ln v_{n-1}`, which
/// runs off to -∞ as μ → 0 when the last coordinate is clipped.
fn chart_point(y: &[f64], mu: f64, warm: &mut f64) -> Vec<f64> {
    let n = y.len() + 1;
    let u = 1.0 / n as f64;
    let eval = |kappa: f64| -> (f64, f64, Vec<f64>) {
        let w = (kappa / mu).exp();
        let mut f = w - 1.0;
        let mut df = w / mu;
        let mut v = Vec::with_capacity(n);
        for &yl in y {
            let vl = solve_v_log(u + yl + kappa, mu);
            f += vl;
            df += vl / (vl + mu);
            v.push(vl);
        }
        v.push(w);
        (f, df, v)
    };
    // f(0) > 0; at lo every coordinate is below 1/n, so f(lo) < 0.
    let top = y.iter().fold(0.0f64, |m, &v| m.max(u + v));
    let (mut lo, mut hi) = (mu * u.ln() - top, 0.0f64);
    let mut kappa = warm.clamp(lo, hi);
    let mut out = Vec::new();
    for _ in 0..300 {
        let (f, df, v) = eval(kappa);
        out = v;
        if f.abs() <= 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = kappa;
        } else {
            lo = kappa;
        }
        let newton = kappa - f / df;
        kappa = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        // κ/μ sets the last coordinate, so only float resolution is fine enough.
        if hi - lo <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()) {
            out = eval(kappa).2;
            break;
        }
    }
    *warm = kappa;
    let total: f64 = out.iter().sum();
    out.into_iter().map(|x| x / total).collect()
}

/// Closest point of `{v ∈ Δ(n) : H(v) ≥ c}` to `target` (ambient metric).
pub fn project_onto_entropy_set(target: &SimplexVector, set: &EntropySet) -> Result<SimplexVector, GeometryError> {
    if entropy_of(target.coords()) >= set.c {
        return Ok(target.clone());
    }
    set.project_ambient(target.coords())
}

/// A closed convex set with a Euclidean projection.
pub trait ConvexSet: Send + Sync {
    fn dim(&self) -> usize;

    fn project(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError>;

    fn distance(&self, y: &[f64]) -> Result<f64, GeometryError> {
        Ok(dist(&self.project(y)?, y))
    }

    fn label(&self) -> String;
}

/// A polytope given by vertices, in whatever coordinates the vertices use.
#[derive(Debug, Clone)]
pub struct HullSet {
    pub hull: PointHull,
    pub label: String,
    /// Fast inside test when the hull is small and full-dimensional.
    pub facets: Option<Facets>,
}

impl HullSet {
    pub fn new(vertices: &[Vec<f64>], label: impl Into<String>) -> Result<Self, GeometryError> {
        Ok(HullSet { hull: PointHull::new(vertices)?, label: label.into(), facets: Facets::of(vertices) })
    }

    /// The chart image of an IRD polytope.
    pub fn chart_ird(p: &IrdPolytope) -> Self {
        let verts = p.chart_vertices();
        HullSet { hull: PointHull::new(&verts).expect("nonempty"), label: "ird".into(), facets: Facets::of(&verts) }
    }
}

impl ConvexSet for HullSet {
    fn dim(&self) -> usize {
        self.hull.dim()
    }
    fn project(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        Ok(self.hull.nearest(y).point)
    }
    fn distance(&self, y: &[f64]) -> Result<f64, GeometryError> {
        if self.facets.as_ref().is_some_and(|f| f.max_violation(y) <= 0.0) {
            return Ok(0.0);
        }
        Ok(self.hull.nearest(y).distance)
    }
    fn label(&self) -> String {
        self.label.clone()
    }
}

/// The entropy superlevel set seen through the chart.
#[derive(Debug, Clone, Copy)]
pub struct ChartEntropySet(pub EntropySet);

impl ConvexSet for ChartEntropySet {
    fn dim(&self) -> usize {
        self.0.n - 1
    }
    fn project(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        self.0.project_chart(y)
    }
    fn distance(&self, y: &[f64]) -> Result<f64, GeometryError> {
        let v = from_chart(y);
        if v.iter().all(|&c| c >= 0.0) && entropy_of(&v) >= self.0.c {
            return Ok(0.0);
        }
        Ok(dist(&self.0.project_chart(y)?, y))
    }
    fn label(&self) -> String {
        format!("entropy>={:.6}", self.0.c)
    }
}

/// Closed Euclidean ball.
#[derive(Debug, Clone)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl ConvexSet for Ball {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn project(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        let d = dist(y, &self.center);
        if d <= self.radius {
            return Ok(y.to_vec());
        }
        let s = self.radius / d;
        Ok(self.center.iter().zip(y).map(|(c, v)| c + s * (v - c)).collect())
    }
    fn label(&self) -> String {
        format!("ball(r={})", self.radius)
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ConvexSet for BoxSet {
    fn dim(&self) -> usize {
        self.lo.len()
    }
    fn project(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        Ok(y.iter().zip(self.lo.iter().zip(&self.hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect())
    }
    fn label(&self) -> String {
        "box".into()
    }
}

/// `{x : ⟨a, x⟩ ≤ b}`.
#[derive(Debug, Clone)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub b: f64,
}

impl ConvexSet for Halfspace {
    fn dim(&self) -> usize {
        self.a.len()
    }
    fn project(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        let viol = dot(&self.a, y) - self.b;
        if viol <= 0.0 {
            return Ok(y.to_vec());
        }
        let s = viol / dot(&self.a, &self.a);
        Ok(y.iter().zip(&self.a).map(|(v, a)| v - s * a).collect())
    }
    fn label(&self) -> String {
        "halfspace".into()
    }
}

pub type SetRef = Arc<dyn ConvexSet>;

/// Tolerance on per-set violation and on the last sweep's movement.
pub const DYKSTRA_TOL: f64 = 1e-7;
pub const DYKSTRA_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionReport {
    pub point: Vec<f64>,
    pub distance_moved: f64,
    /// Dykstra sweeps (1 when the target was already feasible).
    pub iterations: usize,
    /// Distance from the result to each base set (pinned first, then retained), after shrinking.
    pub residuals: Vec<f64>,
    /// Number of sets that took part in the final Dykstra run.
    pub active_sets: usize,
    pub capped: bool,
}

impl ProjectionReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }
}

/// A base set scaled down by the shrink factor: `x ∈ A_σ ⇔ σ x ∈ A`.
struct Shrunk<'a> {
    set: &'a dyn ConvexSet,
    sigma: f64,
}

impl Shrunk<'_> {
    fn project(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        let sy: Vec<f64> = y.iter().map(|v| v * self.sigma).collect();
        Ok(self.set.project(&sy)?.into_iter().map(|v| v / self.sigma).collect())
    }

    fn distance(&self, y: &[f64]) -> Result<f64, GeometryError> {
        let sy: Vec<f64> = y.iter().map(|v| v * self.sigma).collect();
        Ok(self.set.distance(&sy)? / self.sigma)
    }
}

/// Dykstra's alternating projections over `sets`, starting at `y`.
fn dykstra(sets: &[Shrunk<'_>], y: &[f64], tol: f64, max_sweeps: usize) -> Result<(Vec<f64>, usize, bool), GeometryError> {
    if sets.len() == 1 {
        return Ok((sets[0].project(y)?, 1, false));
    }
    let d = y.len();
    let mut z = y.to_vec();
    let mut incr = vec![vec![0.0; d]; sets.len()];
    for sweep in 1..=max_sweeps {
        let start = z.clone();
        for (s, p) in sets.iter().zip(incr.iter_mut()) {
            let t: Vec<f64> = z.iter().zip(p.iter()).map(|(a, b)| a + b).collect();
            let nz = s.project(&t)?;
            for ((pi, ti), zi) in p.iter_mut().zip(&t).zip(&nz) {
                *pi = ti - zi;
            }
            z = nz;
        }
        if dist(&start, &z) <= tol {
            let mut worst: f64 = 0.0;
            for s in sets {
                worst = worst.max(s.distance(&z)?);
            }
            if worst <= tol {
                return Ok((z, sweep, false));
            }
        }
    }
    Ok((z, max_sweeps, true))
}

/// Running intersection of convex sets, optionally shrunk toward the origin.
///
/// Sets are either pinned (kept forever) or retained in a rolling window of at
/// most `cap` sets; older retained sets are evicted and counted.
pub struct DecisionSet {
    dim: usize,
    pinned: Vec<SetRef>,
    retained: VecDeque<SetRef>,
    cap: Option<usize>,
    evicted: usize,
    shrink: f64,
}

impl DecisionSet {
    pub fn new(dim: usize) -> Self {
        DecisionSet { dim, pinned: Vec::new(), retained: VecDeque::new(), cap: None, evicted: 0, shrink: 1.0 }
    }

    /// Chart decision set starting from the entropy constraint alone.
    pub fn from_entropy(set: EntropySet) -> Self {
        let mut d = DecisionSet::new(set.n - 1);
        d.pin(Arc::new(ChartEntropySet(set)));
        d
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = Some(cap.max(1));
        self
    }

    pub fn pin(&mut self, set: SetRef) {
        assert_eq!(set.dim(), self.dim, "set dimension mismatch");
        self.pinned.push(set);
    }

    /// Intersect with another set (may evict the oldest retained set).
    pub fn add(&mut self, set: SetRef) {
        assert_eq!(set.dim(), self.dim, "set dimension mismatch");
        self.retained.push_back(set);
        if let Some(cap) = self.cap {
            while self.retained.len() > cap {
                self.retained.pop_front();
                self.evicted += 1;
            }
        }
    }

    /// Shrink factor for the robust variant: `σ = r / (r - δ - ε)`.
    pub fn set_shrink(&mut self, sigma: f64) {
        assert!(sigma >= 1.0 && sigma.is_finite(), "shrink factor must be >= 1");
        self.shrink = sigma;
    }

    pub fn shrink(&self) -> f64 {
        self.shrink
    }

    pub fn evicted(&self) -> usize {
        self.evicted
    }

    pub fn len(&self) -> usize {
        self.pinned.len() + self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sets(&self) -> impl Iterator<Item = &SetRef> {
        self.pinned.iter().chain(self.retained.iter())
    }

    /// Membership in the shrunk intersection.
    pub fn contains(&self, x: &[f64], tol: f64) -> Result<bool, GeometryError> {
        self.contains_scaled(x, self.shrink, tol)
    }

    /// Membership in the intersection without shrinking.
    pub fn contains_unshrunk(&self, x: &[f64], tol: f64) -> Result<bool, GeometryError> {
        self.contains_scaled(x, 1.0, tol)
    }

    fn contains_scaled(&self, x: &[f64], sigma: f64, tol: f64) -> Result<bool, GeometryError> {
        let sx: Vec<f64> = x.iter().map(|v| v * sigma).collect();
        for s in self.sets() {
            if s.distance(&sx)? > tol * sigma {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Projection onto the shrunk intersection with default tolerances.
    pub fn project(&self, y: &[f64]) -> Result<ProjectionReport, GeometryError> {
        self.project_with(y, DYKSTRA_TOL, DYKSTRA_MAX_SWEEPS)
    }

    /// Lazy Dykstra: only sets violated by the target (or by an intermediate
    /// answer) join the alternating projections. The result is the projection
    /// onto the intersection of the active sets, which equals the projection
    /// onto the full intersection once it satisfies every other set.
    pub fn project_with(&self, y: &[f64], tol: f64, max_sweeps: usize) -> Result<ProjectionReport, GeometryError> {
        if y.len() != self.dim {
            return Err(GeometryError::Invalid("point dimension differs from decision set".into()));
        }
        let all: Vec<Shrunk<'_>> = self.sets().map(|s| Shrunk { set: s.as_ref(), sigma: self.shrink }).collect();
        let mut residuals = Vec::with_capacity(all.len());
        for s in &all {
            residuals.push(s.distance(y)?);
        }
        let mut active: Vec<usize> = (0..all.len()).filter(|&i| residuals[i] > tol).collect();
        if active.is_empty() {
            return Ok(ProjectionReport {
                point: y.to_vec(),
                distance_moved: 0.0,
                iterations: 1,
                residuals,
                active_sets: 0,
                capped: false,
            });
        }
        let mut total_sweeps = 0;
        loop {
            let subset: Vec<Shrunk<'_>> =
                active.iter().map(|&i| Shrunk { set: all[i].set, sigma: all[i].sigma }).collect();
            let (z, sweeps, capped) = dykstra(&subset, y, tol, max_sweeps)?;
            total_sweeps += sweeps;
            let mut newly = Vec::new();
            for (i, s) in all.iter().enumerate() {
                residuals[i] = s.distance(&z)?;
                if residuals[i] > tol && !active.contains(&i) {
                    newly.push(i);
                }
            }
            if newly.is_empty() || capped {
                return Ok(ProjectionReport {
                    distance_moved: dist(&z, y),
                    point: z,
                    iterations: total_sweeps,
                    residuals,
                    active_sets: active.len(),
                    capped,
                });
            }
            active.extend(newly);
        }
    }
}

/// Free function form of [`DecisionSet::project`].
pub fn project_onto_decision_set(target: &[f64], set: &DecisionSet) -> Result<ProjectionReport, GeometryError> {
    set.project(target)
}

/// Radius of the l∞ ball around uniform that every dispersed-enough model can
/// induce from any memory: `(k - 1) / (n (n - 1))`, zero for `k < 2`.
pub fn eird_ball_radius(n: usize, k: usize) -> f64 {
    if k < 2 || n < 2 {
        return 0.0;
    }
    (k - 1) as f64 / (n * (n - 1)) as f64
}

/// Default probe memories: `random` uniform simplex points, then every vertex, then uniform.
pub fn default_probes<R: Rng + ?Sized>(n: usize, random: usize, rng: &mut R) -> Vec<SimplexVector> {
    let mut probes: Vec<SimplexVector> = (0..random).map(|_| random_simplex(n, rng)).collect();
    probes.extend((0..n).map(|i| SimplexVector::vertex(n, i)));
    probes.push(SimplexVector::uniform(n));
    probes
}

pub const DEFAULT_RANDOM_PROBES: usize = 200;
pub const EIRD_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Serialize)]
pub struct EirdReport {
    /// True when `x` lies within `EIRD_TOL` of every probe's IRD polytope.
    pub member: bool,
    pub max_distance: f64,
    pub worst_probe: usize,
}

/// Probe-based test of membership in the intersection of all IRD polytopes.
///
/// A negative answer is certain; a positive one only covers the probes.
pub fn eird_membership_estimate<M: PreferenceModel + ?Sized>(
    m: &M,
    x: &[f64],
    probes: &[SimplexVector],
    catalog: &MenuCatalog,
) -> EirdReport {
    let mut max_distance: f64 = 0.0;
    let mut worst_probe = 0;
    for (i, v) in probes.iter().enumerate() {
        let d = ird_vertices(m, v, catalog).distance(x);
        if d > max_distance {
            max_distance = d;
            worst_probe = i;
        }
    }
    EirdReport { member: max_distance <= EIRD_TOL, max_distance, worst_probe }
}

/// Precomputed IRD polytopes for a fixed probe set, for repeated membership tests.
pub struct EirdProbeSet {
    pub probes: Vec<SimplexVector>,
    polytopes: Vec<IrdPolytope>,
    /// Chart facets per probe, when available.
    facets: Vec<Option<Facets>>,
}

impl EirdProbeSet {
    pub fn new<M: PreferenceModel + ?Sized>(m: &M, probes: Vec<SimplexVector>, catalog: &MenuCatalog) -> Self {
        let polytopes: Vec<IrdPolytope> = probes.iter().map(|v| ird_vertices(m, v, catalog)).collect();
        let facets = polytopes.iter().map(|p| Facets::of(&p.chart_vertices())).collect();
        EirdProbeSet { probes, polytopes, facets }
    }

    pub fn check(&self, x: &[f64]) -> EirdReport {
        let cx = to_chart(x);
        let mut max_distance: f64 = 0.0;
        let mut worst_probe = 0;
        for (i, (p, f)) in self.polytopes.iter().zip(&self.facets).enumerate() {
            if f.as_ref().is_some_and(|f| f.max_violation(&cx) <= 0.0) {
                continue;
            }
            let d = p.distance(x);
            if d > max_distance {
                max_distance = d;
                worst_probe = i;
            }
        }
        EirdReport { member: max_distance <= EIRD_TOL, max_distance, worst_probe }
    }

    /// Stop at the first probe farther than `tol`.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        let cx = to_chart(x);
        self.polytopes.iter().zip(&self.facets).all(|(p, f)| {
            f.as_ref().is_some_and(|f| f.max_violation(&cx) <= 0.0) || p.distance(x) <= tol
        })
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// Summary of the high-entropy containment experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ContainmentReport {
    pub samples: usize,
    pub max_distance: f64,
    pub within_bound: bool,
    pub bound: f64,
}

/// Draw `samples` distributions with entropy at least `ln n - gap` and measure
/// their largest probe distance to the IRD polytopes of `m`.
pub fn high_entropy_containment<M: PreferenceModel + ?Sized, R: Rng + ?Sized>(
    m: &M,
    catalog: &MenuCatalog,
    probes: Vec<SimplexVector>,
    samples: usize,
    gap: f64,
    bound: f64,
    rng: &mut R,
) -> ContainmentReport {
    let n = m.n();
    let probe_set = EirdProbeSet::new(m, probes, catalog);
    let floor = (n as f64).ln() - gap;
    let mut max_distance: f64 = 0.0;
    let mut drawn = 0;
    while drawn < samples {
        // Mix uniform with a flat Dirichlet draw; the mixing weight sweeps the
        // whole entropy band instead of clustering at the uniform point.
        let s: f64 = rng.gen();
        let d = random_simplex(n, rng);
        let x: Vec<f64> = d.coords().iter().map(|p| (1.0 - s) / n as f64 + s * p).collect();
        if entropy_of(&x) < floor {
            continue;
        }
        drawn += 1;
        max_distance = max_distance.max(probe_set.check(&x).max_distance);
    }
    ContainmentReport { samples, max_distance, within_bound: max_distance <= bound, bound }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_types::{derive_rng, enumerate_menus, simplex_grid};
    use crate::preference_models::{BupModel, TabularOracleModel};

    #[test]
    fn segment_projection_picks_nearest_endpoint() {
        let p = nearest_point_in_hull(&[vec![0.3, 0.7], vec![0.8, 0.2]], &[1.0, 0.0]).unwrap();
        assert!(dist(&p.point, &[0.8, 0.2]) < 1e-12);
        assert!(p.residual <= 1e-9);
        assert!(!p.capped);
    }

    #[test]
    fn inside_target_is_returned() {
        let verts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let p = nearest_point_in_hull(&verts, &[0.2, 0.3]).unwrap();
        assert!(p.distance < 1e-12);
        assert!(dist(&p.point, &[0.2, 0.3]) < 1e-12);
    }

    /// Exhaustive oracle: best feasible affine minimizer over every vertex subset.
    fn face_enumeration_oracle(verts: &[Vec<f64>], target: &[f64]) -> f64 {
        let m = verts.len();
        let dim = target.len();
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << m) {
            let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if idx.len() > dim + 1 {
                continue;
            }
            let q: Vec<f64> = idx.iter().flat_map(|&i| verts[i].iter().zip(target).map(|(a, b)| a - b)).collect();
            let local: Vec<usize> = (0..idx.len()).collect();
            let mut alpha = Vec::new();
            if !affine_min_norm(&q, dim, &local, &mut alpha) || alpha.iter().any(|&a| a < -1e-12) {
                continue;
            }
            let mut x = vec![0.0; dim];
            for (j, a) in alpha.iter().enumerate() {
                for d in 0..dim {
                    x[d] += a * q[j * dim + d];
                }
            }
            best = best.min(dot(&x, &x).sqrt());
        }
        best
    }

    #[test]
    fn hull_projection_matches_face_enumeration() {
        let mut rng = derive_rng(21, 0);
        let cat = enumerate_menus(5, 2).unwrap();
        let m = BupModel::new(0.4, vec![vec![0.5, 0.4], vec![0.9, -0.3], vec![0.6], vec![0.45, 0.5], vec![0.7]]).unwrap();
        for _ in 0..30 {
            let v = random_simplex(5, &mut rng);
            let ird = ird_vertices(&m, &v, &cat);
            let target: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.2..0.6)).collect();
            let p = project_onto_hull(&target, &ird).unwrap();
            let rows: Vec<Vec<f64>> = ird.vertices.iter().map(|x| x.coords().to_vec()).collect();
            let oracle = face_enumeration_oracle(&rows, &target);
            assert!((p.distance - oracle).abs() < 1e-9, "{} vs {}", p.distance, oracle);
            assert!(p.residual <= 1e-9);
            let w: f64 = p.weights.iter().sum();
            assert!((w - 1.0).abs() < 1e-12 && p.weights.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn ird_of_uniform_scores() {
        let cat = enumerate_menus(4, 2).unwrap();
        let flat = BupModel::new(0.5, vec![vec![0.5]; 4]).unwrap();
        let ird = ird_vertices(&flat, &SimplexVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap(), &cat);
        assert_eq!(ird.vertices.len(), 6);
        for (menu, p) in cat.menus().iter().zip(&ird.vertices) {
            for i in 0..4 {
                let want = if menu.contains(i) { 0.5 } else { 0.0 };
                assert_eq!(p.get(i), want);
            }
        }
    }

    #[test]
    fn entropy_projection_trivial_cases() {
        let set = EntropySet::new(4, 1.2).unwrap();
        let u = SimplexVector::uniform(4);
        assert_eq!(project_onto_entropy_set(&u, &set).unwrap(), u);
        let t = SimplexVector::new(vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let zero = EntropySet::new(4, 0.0).unwrap();
        assert_eq!(project_onto_entropy_set(&t, &zero).unwrap(), t);
        assert!(EntropySet::new(4, 2.0).is_err());
    }

    #[test]
    fn entropy_projection_matches_mesh() {
        let c = 0.9 * 3f64.ln();
        let set = EntropySet::new(3, c).unwrap();
        let target = SimplexVector::new(vec![0.9, 0.05, 0.05]).unwrap();
        let p = project_onto_entropy_set(&target, &set).unwrap();
        assert!((entropy_of(p.coords()) - c).abs() < 1e-6);
        // Brute-force oracle over a 1e-3 mesh.
        let mut best = (f64::INFINITY, vec![]);
        for g in simplex_grid(3, 1000) {
            if entropy_of(&g) >= c {
                let d = dist(&g, target.coords());
                if d < best.0 {
                    best = (d, g);
                }
            }
        }
        assert!(dist(p.coords(), &best.1) <= 2e-3, "{:?} vs {:?}", p.coords(), best.1);
    }

    #[test]
    fn chart_entropy_projection_is_optimal_in_chart_metric() {
        let c = 0.85 * 3f64.ln();
        let set = ChartEntropySet(EntropySet::new(3, c).unwrap());
        let y = to_chart(&[0.66, 0.2, 0.14]);
        let p = set.project(&y).unwrap();
        assert!((entropy_of(&from_chart(&p)) - c).abs() < 1e-6);
        // The 1e-3 mesh argmin drifts along the flat boundary, so compare with
        // every mesh point whose objective is within 1e-4 of the mesh best.
        let feasible: Vec<(f64, Vec<f64>)> = simplex_grid(3, 1000)
            .into_iter()
            .filter(|g| entropy_of(g) >= c)
            .map(|g| {
                let x = to_chart(&g);
                (dist(&x, &y), x)
            })
            .collect();
        let best = feasible.iter().map(|f| f.0).fold(f64::INFINITY, f64::min);
        assert!(dist(&p, &y) <= best + 1e-9);
        let near = feasible.iter().filter(|f| f.0 <= best + 1e-4).map(|f| dist(&f.1, &p)).fold(f64::INFINITY, f64::min);
        assert!(near <= 2e-3, "{near}");
        assert!(set.distance(&p).unwrap() < 1e-9);
    }

    #[test]
    fn projections_are_idempotent() {
        let mut rng = derive_rng(8, 0);
        let set = EntropySet::new(4, 0.8 * 4f64.ln()).unwrap();
        let cat = enumerate_menus(4, 2).unwrap();
        let m = BupModel::new(0.7, vec![vec![0.8, 0.2], vec![0.9], vec![1.0, -0.3], vec![0.75]]).unwrap();
        for _ in 0..50 {
            let t = random_simplex(4, &mut rng);
            let p = project_onto_entropy_set(&t, &set).unwrap();
            let pp = project_onto_entropy_set(&p, &set).unwrap();
            assert!(dist(p.coords(), pp.coords()) < 1e-9);
            let ird = ird_vertices(&m, &random_simplex(4, &mut rng), &cat);
            let h = project_onto_hull(t.coords(), &ird).unwrap();
            let hh = project_onto_hull(&h.point, &ird).unwrap();
            assert!(dist(&h.point, &hh.point) < 1e-9);
        }
    }

    #[test]
    fn dykstra_single_set_and_feasible_target() {
        let ball = Arc::new(Ball { center: vec![0.0, 0.0], radius: 1.0 });
        let mut d = DecisionSet::new(2);
        d.pin(ball.clone());
        let r = d.project(&[0.2, 0.1]).unwrap();
        assert_eq!(r.point, vec![0.2, 0.1]);
        assert_eq!(r.iterations, 1);
        let r = d.project(&[3.0, 4.0]).unwrap();
        assert!(dist(&r.point, &ball.project(&[3.0, 4.0]).unwrap()) < 1e-15);
    }

    #[test]
    fn dykstra_matches_mesh_on_two_ird_hulls() {
        let cat = enumerate_menus(3, 2).unwrap();
        let m = BupModel::new(0.5, vec![vec![0.5, 0.5], vec![1.0, -0.5], vec![0.6, 0.2]]).unwrap();
        let a = ird_vertices(&m, &SimplexVector::new(vec![0.8, 0.1, 0.1]).unwrap(), &cat);
        let b = ird_vertices(&m, &SimplexVector::new(vec![0.1, 0.1, 0.8]).unwrap(), &cat);
        let mut d = DecisionSet::new(2);
        d.add(Arc::new(HullSet::chart_ird(&a)));
        d.add(Arc::new(HullSet::chart_ird(&b)));
        let y = vec![0.45, 0.2];
        let r = d.project(&y).unwrap();
        assert!(r.max_residual() <= DYKSTRA_TOL);
        let (ha, hb) = (HullSet::chart_ird(&a), HullSet::chart_ird(&b));
        let mut best = (f64::INFINITY, vec![]);
        for g in simplex_grid(3, 1000) {
            let x = to_chart(&g);
            let dd = dist(&x, &y);
            if dd < best.0 && ha.distance(&x).unwrap() < 1e-12 && hb.distance(&x).unwrap() < 1e-12 {
                best = (dd, x);
            }
        }
        assert!(dist(&r.point, &best.1) <= 2e-3, "{:?} vs {:?}", r.point, best.1);
    }

    #[test]
    fn adding_sets_never_readmits_points() {
        let mut rng = derive_rng(13, 0);
        let cat = enumerate_menus(4, 2).unwrap();
        let m = BupModel::new(0.7, vec![vec![0.8, 0.2], vec![0.9], vec![1.0, -0.3], vec![0.75]]).unwrap();
        let mut d = DecisionSet::from_entropy(EntropySet::new(4, 0.9 * 4f64.ln()).unwrap());
        let pts: Vec<Vec<f64>> = (0..200).map(|_| to_chart(random_simplex(4, &mut rng).coords())).collect();
        let mut outside: Vec<bool> = pts.iter().map(|p| !d.contains(p, 1e-9).unwrap()).collect();
        for _ in 0..5 {
            d.add(Arc::new(HullSet::chart_ird(&ird_vertices(&m, &random_simplex(4, &mut rng), &cat))));
            for (p, was_out) in pts.iter().zip(outside.iter_mut()) {
                let now_out = !d.contains(p, 1e-9).unwrap();
                assert!(!*was_out || now_out);
                *was_out = now_out;
            }
        }
    }

    #[test]
    fn shrink_membership_is_scaling() {
        let mut rng = derive_rng(17, 0);
        let mut d = DecisionSet::new(2);
        d.pin(Arc::new(Ball { center: vec![0.05, 0.0], radius: 0.3 }));
        d.set_shrink(1.25);
        let base = Ball { center: vec![0.05, 0.0], radius: 0.3 };
        for _ in 0..1000 {
            let x = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let sx: Vec<f64> = x.iter().map(|v| v * 1.25).collect();
            let inside = base.distance(&sx).unwrap() <= 1e-12;
            assert_eq!(d.contains(&x, 1e-12).unwrap(), inside);
        }
    }

    #[test]
    fn ball_radius_examples() {
        assert!((eird_ball_radius(4, 2) - 1.0 / 12.0).abs() < 1e-15);
        assert!((eird_ball_radius(10, 2) - 1.0 / 90.0).abs() < 1e-15);
        assert_eq!(eird_ball_radius(5, 1), 0.0);
    }

    fn dispersed_bup(n: usize, lambda: f64, seed: u64) -> BupModel {
        let mut rng = derive_rng(seed, 0);
        let coeffs = (0..n)
            .map(|_| {
                let a = rng.gen_range(lambda..1.0);
                let b = rng.gen_range(lambda..1.0);
                vec![a, b - a]
            })
            .collect();
        BupModel::new(lambda, coeffs).unwrap()
    }

    #[test]
    fn uniform_is_everywhere_realizable() {
        let (n, k) = (6, 2);
        let m = dispersed_bup(n, (k * k) as f64 / n as f64, 3);
        let cat = enumerate_menus(n, k).unwrap();
        let mut rng = derive_rng(4, 0);
        let probes = default_probes(n, DEFAULT_RANDOM_PROBES, &mut rng);
        let r = eird_membership_estimate(&m, SimplexVector::uniform(n).coords(), &probes, &cat);
        assert!(r.member, "max distance {}", r.max_distance);
        // Corners of the l∞ ball: k/n on one item, the remainder spread evenly.
        let rad = eird_ball_radius(n, k);
        for i in 0..n {
            let mut x = vec![1.0 / n as f64 - rad / (n - 1) as f64; n];
            x[i] = 1.0 / n as f64 + rad;
            assert!(eird_membership_estimate(&m, &x, &probes, &cat).member);
        }
        let e1 = SimplexVector::vertex(n, 0);
        assert!(!eird_membership_estimate(&m, e1.coords(), &probes, &cat).member);
    }

    #[test]
    fn uniform_over_subset_is_realizable() {
        // n = 16, k = 2, C = 2 → λ = Ck²/n = 0.5; uniform over any 8 items is inside.
        let (n, k) = (16, 2);
        let m = dispersed_bup(n, 0.5, 9);
        let cat = enumerate_menus(n, k).unwrap();
        let mut rng = derive_rng(10, 0);
        let probes = default_probes(n, 40, &mut rng);
        let mut x = vec![0.0; n];
        for i in (0..n).step_by(2) {
            x[i] = 1.0 / 8.0;
        }
        let r = eird_membership_estimate(&m, &x, &probes, &cat);
        assert!(r.member, "max distance {}", r.max_distance);
    }

    #[test]
    fn high_entropy_containment_at_admissible_lambda() {
        let (n, k) = (16, 2);
        let m = dispersed_bup(n, 0.5, 12);
        let cat = enumerate_menus(n, k).unwrap();
        let mut rng = derive_rng(14, 0);
        let probes = default_probes(n, 20, &mut rng);
        let r = high_entropy_containment(&m, &cat, probes, 50, 0.05, 0.5, &mut rng);
        assert!(r.within_bound);
    }

    #[test]
    fn tabular_models_work_through_the_trait() {
        let cat = enumerate_menus(3, 2).unwrap();
        let t = TabularOracleModel::new(3, 0.5, |v| vec![0.5 + 0.5 * v[0], 0.8, 0.9]);
        let ird = ird_vertices(&t, &SimplexVector::uniform(3), &cat);
        assert_eq!(ird.vertices.len(), 3);
    }

    #[test]
    fn facets_of_a_square() {
        let sq = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.5, 0.5]];
        let f = Facets::of(&sq).unwrap();
        assert_eq!(f.len(), 4);
        assert!(f.max_violation(&[0.5, 0.2]) < 0.0);
        assert!((f.max_violation(&[1.5, 0.5]) - 0.5).abs() < 1e-12);
        assert!(Facets::of(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]).is_none());
    }

    #[test]
    fn facet_membership_agrees_with_projection() {
        let mut rng = derive_rng(77, 0);
        let cat = enumerate_menus(5, 2).unwrap();
        let m = BupModel::new(0.4, vec![vec![0.4, 0.6], vec![1.0, -0.6], vec![0.7], vec![0.5, 0.3], vec![0.9, -0.4]]).unwrap();
        for _ in 0..20 {
            let v = random_simplex(5, &mut rng);
            let set = HullSet::chart_ird(&ird_vertices(&m, &v, &cat));
            let f = set.facets.as_ref().unwrap();
            for _ in 0..50 {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.15..0.15)).collect();
                let d = set.hull.nearest(&x).distance;
                let viol = f.max_violation(&x);
                if viol <= -1e-9 {
                    assert!(d <= 1e-9, "facets say inside, distance {d}");
                }
                if viol >= 1e-9 {
                    assert!(d > 0.0);
                }
            }
        }
    }
}
