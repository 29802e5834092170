//! Fit a preference model from normalized score queries taken in a small ball
//! around the uniform memory vector.
//!
//! Every fitter sees only normalized scores, so hypotheses are determined up to
//! one global scale; they are rescaled so their largest score is about 1.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::core_types::{binomial, derive_rng, dist, random_simplex, CoreError, SimplexVector};
use crate::geometry_sets::{from_chart, solve_dense};
use crate::poly::{monomials_up_to, subsets_up_to, MultiPoly};
use crate::preference_models::{
    AnyModel, BmlpModel, BnmpModel, BupModel, Family, HypothesisProvenance, ModelError, ModelFile, PreferenceModel,
    SfrModel,
};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("query radius {alpha} is too small: interpolation nodes would be closer than 1e-10")]
    AlphaTooSmall { alpha: f64 },
    #[error("query radius {alpha} pushes query points off the simplex (limit {limit})")]
    AlphaTooLarge { alpha: f64, limit: f64 },
    #[error("{0}")]
    Unsupported(String),
    #[error("expected {expected} answers of length {n}, got {got}")]
    AnswerShape { expected: usize, n: usize, got: String },
    #[error("data matrix is singular")]
    Singular,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Smallest allowed spacing between interpolation nodes.
const NODE_SEPARATION: f64 = 1e-10;
/// Fitted scores below this are floored when the hypothesis is evaluated.
pub const SCORE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PlanOptions {
    /// Bound on |frequency| for sparse Fourier models.
    pub freq_bound: f64,
    /// Declared minimum gap between frequencies of one item.
    pub separation: f64,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { freq_bound: 16.0, separation: 1.0 }
    }
}

/// Family-specific layout of the query points.
#[derive(Debug, Clone, Serialize)]
pub enum PlanLayout {
    /// Point 0 is uniform; point `1 + z·shifts + (j-1)` moves residue class `z`
    /// up by `plus[z]·j/Z` and class `z+1` down by `minus[z]·j/Z`.
    Bup { z: f64, shifts: usize, plus: [f64; 3], minus: [f64; 3] },
    /// Point 0 is uniform; each monomial then gets `2j+1` points along its diagonal.
    Bmlp { z: f64, monomials: Vec<Vec<usize>>, steps: Vec<Vec<i32>> },
    /// Lattice points `spacing · γ` in the chart, one per monomial exponent.
    Bnmp { spacing: f64, lattice: Vec<Vec<u32>> },
    /// Point 0 is uniform; item `i` then gets `samples` points
    /// `U + x e_i - x e_{(i+1) mod n}` with `x` evenly spaced on `[-z, z]`.
    Sfr { z: f64, samples: usize, separation: f64, freq_bound: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryPlan {
    pub family: Family,
    pub n: usize,
    /// Polynomial degree, or the sparsity for Fourier models.
    pub degree: usize,
    pub alpha: f64,
    pub points: Vec<SimplexVector>,
    pub layout: PlanLayout,
}

impl QueryPlan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest l2 distance from a query point to the uniform vector.
    pub fn max_distance(&self) -> f64 {
        let u = SimplexVector::uniform(self.n);
        self.points.iter().map(|p| dist(p.coords(), u.coords())).fold(0.0, f64::max)
    }

    /// Stable 64-bit FNV-1a digest of the plan's family, sizes and points.
    pub fn digest(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.family.to_string().as_bytes());
        eat(&(self.n as u64).to_le_bytes());
        eat(&(self.degree as u64).to_le_bytes());
        eat(&self.alpha.to_bits().to_le_bytes());
        for p in &self.points {
            for c in p.coords() {
                eat(&c.to_bits().to_le_bytes());
            }
        }
        format!("{h:016x}")
    }
}

/// Number of queries a plan uses.
pub fn expected_query_count(family: Family, n: usize, degree: usize, opts: &PlanOptions, alpha: f64) -> usize {
    match family {
        Family::Bup => 1 + 3 * degree.div_ceil(2),
        Family::Bmlp => 1 + (1..=degree).map(|j| (2 * j + 1) * binomial(n - 1, j) as usize).sum::<usize>(),
        Family::Bnmp => binomial(n - 1 + degree, degree) as usize,
        Family::Sfr => 1 + n * sfr_samples(degree, alpha / 2f64.sqrt(), opts.freq_bound),
        Family::Tabular => 0,
    }
}

fn sfr_samples(terms: usize, z: f64, freq_bound: f64) -> usize {
    // Enough for the pencil, and a step below a quarter of the shortest period.
    (4 * terms + 4).max(32).max((8.0 * freq_bound * z).ceil() as usize + 1)
}

/// The deterministic query set for a family.
pub fn plan_queries(family: Family, n: usize, degree: usize, alpha: f64) -> Result<QueryPlan, LearnError> {
    plan_queries_with(family, n, degree, alpha, &PlanOptions::default())
}

pub fn plan_queries_with(
    family: Family,
    n: usize,
    degree: usize,
    alpha: f64,
    opts: &PlanOptions,
) -> Result<QueryPlan, LearnError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(LearnError::AlphaTooSmall { alpha });
    }
    if n < 3 {
        return Err(LearnError::Unsupported("learning needs n >= 3 (some items must be held at 1/n)".into()));
    }
    let u = 1.0 / n as f64;
    let mut points = vec![SimplexVector::uniform(n)];
    let layout = match family {
        Family::Bup => {
            if degree == 0 {
                return Err(LearnError::Unsupported("degree must be at least 1".into()));
            }
            let shifts = degree.div_ceil(2);
            let sizes: Vec<usize> = (0..3).map(|c| (0..n).filter(|i| i % 3 == c).count()).collect();
            let mut plus = [1.0; 3];
            let mut minus = [1.0; 3];
            let mut widest: f64 = 0.0;
            for zc in 0..3 {
                let (p, m) = (sizes[zc] as f64, sizes[(zc + 1) % 3] as f64);
                plus[zc] = f64::min(1.0, m / p);
                minus[zc] = f64::min(1.0, p / m);
                widest = widest.max((p * plus[zc] * plus[zc] + m * minus[zc] * minus[zc]).sqrt());
            }
            let d_eff = (2 * shifts) as f64;
            let z = f64::max((n as f64 * d_eff / 6.0).sqrt() / alpha, shifts as f64 * widest / alpha);
            if 1.0 / z < NODE_SEPARATION {
                return Err(LearnError::AlphaTooSmall { alpha });
            }
            if shifts as f64 / z > u {
                return Err(LearnError::AlphaTooLarge { alpha, limit: alpha * u * z / shifts as f64 });
            }
            for zc in 0..3 {
                for j in 1..=shifts {
                    let mut v = vec![u; n];
                    for (i, x) in v.iter_mut().enumerate() {
                        if i % 3 == zc {
                            *x += plus[zc] * j as f64 / z;
                        } else if i % 3 == (zc + 1) % 3 {
                            *x -= minus[zc] * j as f64 / z;
                        }
                    }
                    points.push(SimplexVector::from_numeric(&v)?);
                }
            }
            PlanLayout::Bup { z, shifts, plus, minus }
        }
        Family::Bmlp => {
            if degree == 0 || degree > n - 1 {
                return Err(LearnError::Unsupported(format!("degree must be in 1..={}", n - 1)));
            }
            let z = alpha / (2.0 * degree as f64 * (degree as f64 + 1.0));
            if z < NODE_SEPARATION {
                return Err(LearnError::AlphaTooSmall { alpha });
            }
            if alpha / 2.0 > u {
                return Err(LearnError::AlphaTooLarge { alpha, limit: 2.0 * u });
            }
            let monomials: Vec<Vec<usize>> = subsets_up_to(n - 1, degree).into_iter().skip(1).collect();
            let mut steps = Vec::with_capacity(monomials.len());
            for m in &monomials {
                let j = m.len() as i32;
                let hs: Vec<i32> = (1..=2 * j + 1).map(|r| if r % 2 == 1 { r / 2 + 1 } else { -(r / 2) }).collect();
                for &h in &hs {
                    let mut x = vec![0.0; n - 1];
                    for &l in m {
                        x[l] = h as f64 * z;
                    }
                    points.push(SimplexVector::from_numeric(&from_chart(&x))?);
                }
                steps.push(hs);
            }
            PlanLayout::Bmlp { z, monomials, steps }
        }
        Family::Bnmp => {
            if degree == 0 {
                return Err(LearnError::Unsupported("degree must be at least 1".into()));
            }
            let spacing = alpha / (degree as f64 * 2f64.sqrt());
            if spacing < NODE_SEPARATION {
                return Err(LearnError::AlphaTooSmall { alpha });
            }
            if spacing * degree as f64 > u {
                return Err(LearnError::AlphaTooLarge { alpha, limit: 2f64.sqrt() * u });
            }
            let lattice = monomials_up_to(n - 1, degree as u32);
            points.clear();
            for g in &lattice {
                let x: Vec<f64> = g.iter().map(|&e| spacing * e as f64).collect();
                points.push(SimplexVector::from_numeric(&from_chart(&x))?);
            }
            PlanLayout::Bnmp { spacing, lattice }
        }
        Family::Sfr => {
            if degree == 0 {
                return Err(LearnError::Unsupported("sparsity must be at least 1".into()));
            }
            let z = alpha / 2f64.sqrt();
            if z > u {
                return Err(LearnError::AlphaTooLarge { alpha, limit: 2f64.sqrt() * u });
            }
            let samples = sfr_samples(degree, z, opts.freq_bound);
            let step = 2.0 * z / (samples - 1) as f64;
            if step < NODE_SEPARATION {
                return Err(LearnError::AlphaTooSmall { alpha });
            }
            for i in 0..n {
                let j = (i + 1) % n;
                for k in 0..samples {
                    let x = -z + k as f64 * step;
                    let mut v = vec![u; n];
                    v[i] += x;
                    v[j] -= x;
                    points.push(SimplexVector::from_numeric(&v)?);
                }
            }
            PlanLayout::Sfr { z, samples, separation: opts.separation, freq_bound: opts.freq_bound }
        }
        Family::Tabular => return Err(LearnError::Unsupported("tabular models are not learnable".into())),
    };
    Ok(QueryPlan { family, n, degree, alpha, points, layout })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitOptions {
    /// Declared bound on per-coordinate query noise.
    pub beta: f64,
    /// Declared dispersion of the truth (enters the error bounds).
    pub lambda: f64,
    /// Multiplier on the family's error bound.
    pub safety: f64,
    /// Constant in the case-separation threshold `c·sqrt(beta)` of the multilinear fit.
    pub threshold_constant: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { beta: 0.0, lambda: 0.5, safety: 2.0, threshold_constant: 10.0 }
    }
}

/// How one multilinear coefficient was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BranchKind {
    /// Query answers varied: numerator and denominator coefficients solved jointly.
    Regular,
    /// Answers constant and the offset term vanished: the monomial's
    /// coefficients are proportional to the current answers and cannot be
    /// separated along this line; both are set to zero.
    Proportional,
    /// Answers constant with a nonzero offset: the denominator coefficient is zero.
    ZeroDenominator,
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchRecord {
    pub monomial: Vec<usize>,
    pub kind: BranchKind,
    /// Largest spread of any item's answers along the line.
    pub spread: f64,
    /// True when the spread sits within a factor 2 of the threshold.
    pub near_boundary: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub family: Family,
    /// Reported accuracy: safety · bound(beta) + node residual.
    pub epsilon_hat: f64,
    /// The family's noise-to-error factor.
    pub f_ll: f64,
    /// Largest l2 gap between the hypothesis' normalized scores and the answers, over the plan points.
    pub node_residual: f64,
    pub beta: f64,
    pub flags: Vec<String>,
    pub branches: Vec<BranchRecord>,
    pub cond_x: Option<f64>,
    pub cond_y: Option<f64>,
}

/// A fitted model with its accuracy report.
#[derive(Debug, Clone, Serialize)]
pub struct Hypothesis {
    pub model: AnyModel,
    pub report: FitReport,
    pub plan_digest: String,
}

impl Hypothesis {
    pub fn to_model_file(&self) -> ModelFile {
        let mut f = ModelFile::new(self.model.clone());
        f.hypothesis = Some(HypothesisProvenance {
            fit_family: self.report.family,
            epsilon_hat: self.report.epsilon_hat,
            plan_digest: self.plan_digest.clone(),
        });
        f
    }
}

impl PreferenceModel for Hypothesis {
    fn n(&self) -> usize {
        self.model.n()
    }
    fn lambda(&self) -> f64 {
        self.model.lambda()
    }
    fn family(&self) -> Family {
        self.model.family()
    }
    fn scores_into(&self, v: &[f64], out: &mut [f64]) {
        self.model.scores_into(v, out);
        out.iter_mut().for_each(|s| *s = s.max(SCORE_FLOOR));
    }
}

/// Exact normalized scores at every plan point.
pub fn exact_answers<M: PreferenceModel + ?Sized>(m: &M, plan: &QueryPlan) -> Vec<Vec<f64>> {
    plan.points.iter().map(|p| m.evaluate(p).normalized()).collect()
}

/// Exact answers plus independent uniform noise in `[-beta, beta]` per coordinate.
pub fn noisy_answers<M: PreferenceModel + ?Sized, R: Rng + ?Sized>(
    m: &M,
    plan: &QueryPlan,
    beta: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let mut a = exact_answers(m, plan);
    if beta > 0.0 {
        for row in &mut a {
            for x in row.iter_mut() {
                *x += rng.gen_range(-beta..=beta);
            }
        }
    }
    a
}

/// Largest l2 distance between normalized score vectors over `grid`.
pub fn hypothesis_error<H: PreferenceModel + ?Sized, T: PreferenceModel + ?Sized>(
    hyp: &H,
    truth: &T,
    grid: &[SimplexVector],
) -> f64 {
    grid.iter()
        .map(|v| dist(&hyp.evaluate(v).normalized(), &truth.evaluate(v).normalized()))
        .fold(0.0, f64::max)
}

/// Factor converting the declared noise level into an accuracy bound.
///
/// Linear in beta for every family except the multilinear one, where the
/// bound scales with sqrt(beta).
pub fn f_ll(family: Family, n: usize, degree: usize, alpha: f64, lambda: f64, cond_x: Option<f64>) -> f64 {
    let (nf, d) = (n as f64, degree as f64);
    match family {
        Family::Bup => (3.0 * nf * d).powf(d / 2.0 + 2.0) / (alpha.powf(d) * lambda * lambda),
        Family::Bmlp => {
            let s: f64 = (1..=degree).map(|j| binomial(n - 1, j) as f64 * d.powi(2 * j as i32) / alpha.powi(j as i32)).sum();
            nf * nf * s / (10.0 * lambda * lambda)
        }
        Family::Bnmp => nf * cond_x.unwrap_or(1.0 / alpha.powf(d)) / lambda,
        Family::Sfr => d * nf.sqrt() / (lambda * alpha),
        Family::Tabular => f64::INFINITY,
    }
}

fn check_answers(plan: &QueryPlan, answers: &[Vec<f64>]) -> Result<(), LearnError> {
    if answers.len() != plan.len() || answers.iter().any(|a| a.len() != plan.n || a.iter().any(|x| !x.is_finite())) {
        return Err(LearnError::AnswerShape {
            expected: plan.len(),
            n: plan.n,
            got: format!("{} rows", answers.len()),
        });
    }
    Ok(())
}

/// Dispatch on the plan's family.
pub fn fit(plan: &QueryPlan, answers: &[Vec<f64>], opts: &FitOptions) -> Result<Hypothesis, LearnError> {
    match plan.family {
        Family::Bup => fit_bup(plan, answers, opts),
        Family::Bmlp => fit_bmlp(plan, answers, opts),
        Family::Bnmp => fit_bnmp(plan, answers, opts),
        Family::Sfr => fit_sfr(plan, answers, opts),
        Family::Tabular => Err(LearnError::Unsupported("tabular models are not learnable".into())),
    }
}

/// Ratio of held-item answer mass at a query to the same items at uniform.
fn held_ratio(answer: &[f64], uniform: &[f64], held: impl Fn(usize) -> bool) -> f64 {
    let (mut a, mut b) = (0.0, 0.0);
    for i in 0..answer.len() {
        if held(i) {
            a += answer[i];
            b += uniform[i];
        }
    }
    a / b
}

/// Interpolating polynomial through `(nodes, values)`, in ascending powers of `x - center`
/// scaled by `scale` for conditioning, returned in powers of `x`.
fn interpolate(nodes: &[f64], values: &[f64], center: f64, scale: f64) -> Result<Vec<f64>, LearnError> {
    let m = nodes.len();
    let mut a = vec![0.0; m * m];
    let mut b = values.to_vec();
    for (r, &x) in nodes.iter().enumerate() {
        let t = (x - center) * scale;
        let mut p = 1.0;
        for c in 0..m {
            a[r * m + c] = p;
            p *= t;
        }
    }
    if !solve_dense(&mut a, &mut b, m) {
        return Err(LearnError::Singular);
    }
    // Σ b_k (scale (x - center))^k, expanded in powers of x.
    let terms = b.iter().enumerate().map(|(k, c)| (vec![k as u32], c * scale.powi(k as i32)));
    let p = MultiPoly::from_terms(1, terms).shift(&[center]);
    Ok((0..m).map(|k| p.coef(&[k as u32])).collect())
}

fn scale_to_unit(max: f64, min: f64, flags: &mut Vec<String>) -> (f64, f64) {
    if min <= 0.0 {
        flags.push(format!("hypothesis has nonpositive scores (min {min:.3e}); floored at {SCORE_FLOOR:e}"));
    }
    let s = 1.0 / max;
    (s, (min * s).max(SCORE_FLOOR))
}

fn finish(
    model: AnyModel,
    plan: &QueryPlan,
    answers: &[Vec<f64>],
    opts: &FitOptions,
    mut report: FitReport,
) -> Hypothesis {
    let mut h = Hypothesis { model, report: report.clone(), plan_digest: plan.digest() };
    let mut worst: f64 = 0.0;
    for (p, a) in plan.points.iter().zip(answers) {
        let s: f64 = a.iter().sum();
        let an: Vec<f64> = a.iter().map(|x| x / s).collect();
        worst = worst.max(dist(&h.evaluate(p).normalized(), &an));
    }
    report.node_residual = worst;
    let noise_term = if plan.family == Family::Bmlp { opts.beta.sqrt() } else { opts.beta };
    report.epsilon_hat = opts.safety * report.f_ll * noise_term + worst;
    h.report = report;
    h
}

fn empty_report(plan: &QueryPlan, opts: &FitOptions, cond_x: Option<f64>) -> FitReport {
    FitReport {
        family: plan.family,
        epsilon_hat: 0.0,
        f_ll: f_ll(plan.family, plan.n, plan.degree, plan.alpha, opts.lambda, cond_x),
        node_residual: 0.0,
        beta: opts.beta,
        flags: Vec::new(),
        branches: Vec::new(),
        cond_x,
        cond_y: None,
    }
}

/// Univariate polynomial scores: interpolate each item through its shifted queries.
pub fn fit_bup(plan: &QueryPlan, answers: &[Vec<f64>], opts: &FitOptions) -> Result<Hypothesis, LearnError> {
    check_answers(plan, answers)?;
    let PlanLayout::Bup { z, shifts, plus, minus } = &plan.layout else {
        return Err(LearnError::Unsupported("plan is not a univariate-polynomial plan".into()));
    };
    let (n, d) = (plan.n, plan.degree);
    let u = 1.0 / n as f64;
    let uni = &answers[0];
    let mut nodes: Vec<Vec<f64>> = (0..n).map(|_| vec![u]).collect();
    let mut values: Vec<Vec<f64>> = (0..n).map(|i| vec![uni[i]]).collect();
    // Per item: nodes ordered uniform, +1, -1, +2, -2, ...
    let mut up: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    let mut down: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n];
    for zc in 0..3 {
        for j in 1..=*shifts {
            let a = &answers[1 + zc * shifts + (j - 1)];
            let r = held_ratio(a, uni, |i| i % 3 != zc && i % 3 != (zc + 1) % 3);
            for i in 0..n {
                if i % 3 == zc {
                    up[i].push((u + plus[zc] * j as f64 / z, a[i] / r));
                } else if i % 3 == (zc + 1) % 3 {
                    down[i].push((u - minus[zc] * j as f64 / z, a[i] / r));
                }
            }
        }
    }
    for i in 0..n {
        for j in 0..*shifts {
            for (x, y) in [up[i][j], down[i][j]] {
                nodes[i].push(x);
                values[i].push(y);
            }
        }
        nodes[i].truncate(d + 1);
        values[i].truncate(d + 1);
    }
    let mut coeffs = Vec::with_capacity(n);
    for i in 0..n {
        coeffs.push(interpolate(&nodes[i], &values[i], u, *z)?);
    }
    let mut report = empty_report(plan, opts, None);
    let (mut mx, mut mn) = (f64::MIN, f64::MAX);
    for c in &coeffs {
        for s in 0..=1000 {
            let x = s as f64 / 1000.0;
            let y = c.iter().rev().fold(0.0, |acc, k| acc * x + k);
            mx = mx.max(y);
            mn = mn.min(y);
        }
    }
    let (s, lam) = scale_to_unit(mx, mn, &mut report.flags);
    let coeffs = coeffs.into_iter().map(|c| c.into_iter().map(|x| x * s).collect()).collect();
    let model = AnyModel::Bup(BupModel::unchecked(lam, coeffs)?);
    Ok(finish(model, plan, answers, opts, report))
}

/// Multilinear scores: recover coefficients monomial by monomial, in increasing degree.
pub fn fit_bmlp(plan: &QueryPlan, answers: &[Vec<f64>], opts: &FitOptions) -> Result<Hypothesis, LearnError> {
    check_answers(plan, answers)?;
    let PlanLayout::Bmlp { z, monomials, steps } = &plan.layout else {
        return Err(LearnError::Unsupported("plan is not a multilinear plan".into()));
    };
    let n = plan.n;
    let threshold = f64::max(opts.threshold_constant * opts.beta.sqrt(), 1e-9);
    // Coefficients in the chart basis, keyed by monomial; index 0 is the constant.
    let mut keys: Vec<Vec<usize>> = vec![Vec::new()];
    let mut a_coef: Vec<Vec<f64>> = vec![answers[0].clone()];
    let mut b_coef: Vec<f64> = vec![1.0];
    let mut report = empty_report(plan, opts, None);
    let mut row = 1;
    for (m, hs) in monomials.iter().zip(steps) {
        let j = m.len() as i32;
        let subs: Vec<usize> = (0..keys.len()).filter(|&k| keys[k].iter().all(|l| m.contains(l))).collect();
        let mut q = vec![Vec::with_capacity(hs.len()); n];
        let mut c = vec![Vec::with_capacity(hs.len()); n];
        for &h in hs {
            let zz = h as f64 * z;
            let ans = &answers[row];
            row += 1;
            let fb: f64 = subs.iter().map(|&k| b_coef[k] * zz.powi(keys[k].len() as i32)).sum();
            for i in 0..n {
                let fa: f64 = subs.iter().map(|&k| a_coef[k][i] * zz.powi(keys[k].len() as i32)).sum();
                q[i].push(ans[i]);
                c[i].push((ans[i] * fb - fa) / zz.powi(j));
            }
        }
        let spread = q
            .iter()
            .map(|qi| qi.iter().cloned().fold(f64::MIN, f64::max) - qi.iter().cloned().fold(f64::MAX, f64::min))
            .fold(0.0, f64::max);
        let (b, a, kind) = if spread >= threshold {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..n {
                let (mq, mc) = (mean(&q[i]), mean(&c[i]));
                for (qh, ch) in q[i].iter().zip(&c[i]) {
                    num += (qh - mq) * (ch - mc);
                    den += (qh - mq) * (qh - mq);
                }
            }
            let b = -num / den;
            let a: Vec<f64> = (0..n).map(|i| mean(&q[i]) * b + mean(&c[i])).collect();
            (b, a, BranchKind::Regular)
        } else {
            let a: Vec<f64> = c.iter().map(|ci| mean(ci)).collect();
            let cmax = c.iter().flatten().fold(0.0f64, |x, y| x.max(y.abs()));
            let kind = if cmax <= threshold { BranchKind::Proportional } else { BranchKind::ZeroDenominator };
            (0.0, a, kind)
        };
        let near_boundary = spread >= threshold / 2.0 && spread <= threshold * 2.0;
        if near_boundary {
            report.flags.push(format!("monomial {m:?}: case split is ill-conditioned (spread {spread:.3e})"));
        }
        report.branches.push(BranchRecord { monomial: m.clone(), kind, spread, near_boundary });
        keys.push(m.clone());
        a_coef.push(a);
        b_coef.push(b);
    }
    let u = 1.0 / n as f64;
    let offsets = vec![u; n - 1];
    let polys: Vec<MultiPoly> = (0..n)
        .map(|i| {
            let terms = keys.iter().zip(&a_coef).map(|(k, a)| {
                let mut e = vec![0u32; n - 1];
                for &l in k {
                    e[l] = 1;
                }
                (e, a[i])
            });
            MultiPoly::from_terms(n - 1, terms).shift(&offsets)
        })
        .collect();
    let (mx, mn) = poly_range(&polys, n);
    let (s, lam) = scale_to_unit(mx, mn, &mut report.flags);
    let polys = polys.into_iter().map(|p| p.scale(s)).collect();
    let model = AnyModel::Bmlp(BmlpModel::unchecked(lam, polys)?);
    Ok(finish(model, plan, answers, opts, report))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Score range of first-`n-1`-coordinate polynomials over vertices, uniform and random points.
fn poly_range(polys: &[MultiPoly], n: usize) -> (f64, f64) {
    let mut rng = derive_rng(0x5eed, 0);
    let mut probes: Vec<Vec<f64>> = (0..n).map(|i| SimplexVector::vertex(n, i).into_vec()).collect();
    probes.push(SimplexVector::uniform(n).into_vec());
    probes.extend((0..500).map(|_| random_simplex(n, &mut rng).into_vec()));
    let (mut mx, mut mn) = (f64::MIN, f64::MAX);
    for p in &probes {
        for poly in polys {
            let y = poly.eval(p);
            mx = mx.max(y);
            mn = mn.min(y);
        }
    }
    (mx, mn)
}

fn two_norm_cond(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let mx = sv.iter().cloned().fold(0.0, f64::max);
    let mn = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    mx / mn
}

/// Design matrix of monomials `exps` at chart points `spacing · γ`.
fn lattice_matrix(lattice: &[Vec<u32>], exps: &[Vec<u32>], spacing: f64) -> DMatrix<f64> {
    DMatrix::from_fn(lattice.len(), exps.len(), |r, c| {
        lattice[r].iter().zip(&exps[c]).map(|(&g, &e)| (spacing * g as f64).powi(e as i32)).product()
    })
}

/// Normalized general polynomials: one linear solve per item on the lattice.
pub fn fit_bnmp(plan: &QueryPlan, answers: &[Vec<f64>], opts: &FitOptions) -> Result<Hypothesis, LearnError> {
    check_answers(plan, answers)?;
    let PlanLayout::Bnmp { spacing, lattice } = &plan.layout else {
        return Err(LearnError::Unsupported("plan is not a normalized-polynomial plan".into()));
    };
    let n = plan.n;
    let exps = monomials_up_to(n - 1, plan.degree as u32);
    let x = lattice_matrix(lattice, &exps, *spacing);
    // Reference lattice with l1 norm at most 1/2.
    let y = lattice_matrix(lattice, &exps, 1.0 / (2.0 * plan.degree as f64));
    let cond_x = two_norm_cond(&x);
    let cond_y = two_norm_cond(&y);
    let lu = x.clone().lu();
    let mut report = empty_report(plan, opts, Some(cond_x));
    report.cond_y = Some(cond_y);
    let offsets = vec![1.0 / n as f64; n - 1];
    let mut polys = Vec::with_capacity(n);
    for i in 0..n {
        let q = DVector::from_iterator(plan.len(), answers.iter().map(|a| a[i]));
        let a = lu.solve(&q).ok_or(LearnError::Singular)?;
        let resid = (&x * &a - &q).amax();
        if resid > 1e-9 * cond_x.max(1.0) {
            report.flags.push(format!("item {i}: linear-system residual {resid:.3e}"));
        }
        let terms = exps.iter().zip(a.iter()).map(|(e, c)| (e.clone(), *c));
        polys.push(MultiPoly::from_terms(n - 1, terms).shift(&offsets));
    }
    let (_, mn) = poly_range(&polys, n);
    let (_, lam) = scale_to_unit(1.0, mn, &mut report.flags);
    let model = AnyModel::Bnmp(BnmpModel::unchecked(lam, 1.0, polys)?);
    Ok(finish(model, plan, answers, opts, report))
}

/// Real sparse-Fourier fit of evenly spaced samples `ys` at `start + k·step`.
#[derive(Debug, Clone, Serialize)]
pub struct FrequencyFit {
    /// `(freq ≥ 0, cos amplitude, sin amplitude)`; the constant term has freq 0.
    pub components: Vec<(f64, f64, f64)>,
    /// Largest absolute misfit at the samples.
    pub residual: f64,
    /// Model order picked from the Hankel singular values.
    pub order: usize,
}

/// Matrix-pencil frequency estimation followed by a real least-squares refit.
///
/// `max_terms` caps the number of complex exponentials; `noise` is the
/// declared per-sample noise level, used to pick the model order;
/// `separation` merges frequency estimates closer than half of it.
pub fn recover_frequencies(
    start: f64,
    step: f64,
    ys: &[f64],
    max_terms: usize,
    noise: f64,
    separation: f64,
) -> Result<FrequencyFit, LearnError> {
    let n = ys.len();
    if n < 4 || max_terms == 0 {
        return Err(LearnError::Unsupported("too few samples for frequency recovery".into()));
    }
    let l = n / 2;
    let h = DMatrix::from_fn(n - l, l + 1, |r, c| ys[r + c]);
    let svd = h.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let mut order_idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    order_idx.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let smax = svd.singular_values[order_idx[0]];
    let thr = f64::max(1e-10 * smax, 10.0 * noise * (((n - l) * (l + 1)) as f64).sqrt());
    let order = order_idx.iter().take_while(|&&k| svd.singular_values[k] > thr).count().clamp(1, max_terms.min(l));
    let v = DMatrix::from_fn(l + 1, order, |r, c| v_t[(order_idx[c], r)]);
    let v1 = v.rows(0, l).into_owned();
    let v2 = v.rows(1, l).into_owned();
    let pencil = v1.pseudo_inverse(1e-14).map_err(|_| LearnError::Singular)? * v2;
    let poles = pencil.complex_eigenvalues();
    let nyquist = 0.5 / step;
    let mut freqs: Vec<f64> = poles.iter().map(|z| (z.arg() / (2.0 * PI * step)).abs()).filter(|f| *f < nyquist).collect();
    freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Conjugate pairs give ±f; merge estimates of the same frequency and drop the constant.
    let merge = f64::max(separation / 2.0, 1e-9);
    let dc_tol = f64::min(merge, 0.25 / (n as f64 * step));
    let mut merged: Vec<Vec<f64>> = Vec::new();
    for f in freqs {
        if f < dc_tol {
            continue;
        }
        match merged.last_mut() {
            Some(g) if f - g[0] < merge => g.push(f),
            _ => merged.push(vec![f]),
        }
    }
    let positive: Vec<f64> = merged.iter().map(|g| mean(g)).collect();
    // Real least squares on [1, cos, sin, ...] at absolute coordinates.
    let cols = 1 + 2 * positive.len();
    let design = DMatrix::from_fn(n, cols, |r, c| {
        let x = start + r as f64 * step;
        if c == 0 {
            1.0
        } else {
            let f = positive[(c - 1) / 2];
            if c % 2 == 1 {
                (2.0 * PI * f * x).cos()
            } else {
                (2.0 * PI * f * x).sin()
            }
        }
    });
    let target = DVector::from_column_slice(ys);
    let sol = design.clone().svd(true, true).solve(&target, 1e-13).map_err(|_| LearnError::Singular)?;
    let residual = (&design * &sol - &target).amax();
    let mut components = vec![(0.0, sol[0], 0.0)];
    for (p, f) in positive.iter().enumerate() {
        components.push((*f, sol[1 + 2 * p], sol[2 + 2 * p]));
    }
    Ok(FrequencyFit { components, residual, order })
}

/// Sparse Fourier scores: per item, rescale its samples and recover frequencies.
pub fn fit_sfr(plan: &QueryPlan, answers: &[Vec<f64>], opts: &FitOptions) -> Result<Hypothesis, LearnError> {
    check_answers(plan, answers)?;
    let PlanLayout::Sfr { z, samples, separation, freq_bound } = &plan.layout else {
        return Err(LearnError::Unsupported("plan is not a sparse-Fourier plan".into()));
    };
    let n = plan.n;
    let u = 1.0 / n as f64;
    let step = 2.0 * z / (*samples - 1) as f64;
    let uni = &answers[0];
    let mut report = empty_report(plan, opts, None);
    let mut fits = Vec::with_capacity(n);
    for i in 0..n {
        let j = (i + 1) % n;
        let ys: Vec<f64> = (0..*samples)
            .map(|k| {
                let a = &answers[1 + i * samples + k];
                a[i] / held_ratio(a, uni, |h| h != i && h != j)
            })
            .collect();
        let fit = recover_frequencies(u - z, step, &ys, plan.degree, opts.beta, *separation)?;
        if fit.residual > f64::max(1e-6, 10.0 * opts.beta * n as f64) {
            report.flags.push(format!("item {i}: frequency recovery residual {:.3e}", fit.residual));
        }
        fits.push(fit);
    }
    let (mut mx, mut mn) = (f64::MIN, f64::MAX);
    for f in &fits {
        for s in 0..=1000 {
            let x = s as f64 / 1000.0;
            let y: f64 = f
                .components
                .iter()
                .map(|&(fr, a, b)| a * (2.0 * PI * fr * x).cos() + b * (2.0 * PI * fr * x).sin())
                .sum();
            mx = mx.max(y);
            mn = mn.min(y);
        }
    }
    let (s, lam) = scale_to_unit(mx, mn, &mut report.flags);
    let items = fits
        .iter()
        .map(|f| {
            let scaled: Vec<(f64, f64, f64)> = f.components.iter().map(|&(fr, a, b)| (fr, a * s, b * s)).collect();
            SfrModel::real_terms(&scaled)
        })
        .collect();
    let model = AnyModel::Sfr(SfrModel::unchecked(lam, *separation, *freq_bound, items)?);
    Ok(finish(model, plan, answers, opts, report))
}
