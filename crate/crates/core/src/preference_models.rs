//! Agent-side preference models and the item-choice simulator.
//!
//! A model maps the agent's memory vector to one score per item. When shown a
//! menu the agent picks an item with probability proportional to its score
//! among the menu's items.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_types::{
    derive_rng, in_simplex, random_simplex, sample_index, CoreError, Histogram, Menu, SimplexVector,
};
use crate::poly::MultiPoly;

/// Slack accepted when checking that scores stay inside `[λ, 1]`.
pub const RANGE_TOL: f64 = 1e-9;

/// Grid step used when scanning univariate score functions over `[0, 1]`.
pub const GRID_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{family} item {item}: score {value} at {at:?} is outside [{lambda}, 1]")]
    OutOfRange { family: Family, item: usize, value: f64, lambda: f64, at: Vec<f64> },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bup,
    Bmlp,
    Bnmp,
    Sfr,
    Tabular,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Bup => "bup",
            Family::Bmlp => "bmlp",
            Family::Bnmp => "bnmp",
            Family::Sfr => "sfr",
            Family::Tabular => "tabular",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Family {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bup" => Ok(Family::Bup),
            "bmlp" => Ok(Family::Bmlp),
            "bnmp" => Ok(Family::Bnmp),
            "sfr" => Ok(Family::Sfr),
            "tabular" => Ok(Family::Tabular),
            other => Err(ModelError::Invalid(format!("unknown family '{other}'"))),
        }
    }
}

/// One score per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn min(&self) -> f64 {
        self.scores.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Scores divided by their sum.
    pub fn normalized(&self) -> Vec<f64> {
        let s: f64 = self.scores.iter().sum();
        self.scores.iter().map(|x| x / s).collect()
    }
}

pub trait PreferenceModel: Send + Sync {
    fn n(&self) -> usize;

    /// Declared dispersion level.
    fn lambda(&self) -> f64;

    fn family(&self) -> Family;

    /// Write the scores at simplex point `v` into `out`. `v` is trusted to be on the simplex.
    fn scores_into(&self, v: &[f64], out: &mut [f64]);

    fn evaluate(&self, v: &SimplexVector) -> ScoreVector {
        let mut scores = vec![0.0; self.n()];
        self.scores_into(v.coords(), &mut scores);
        ScoreVector { scores }
    }

    /// Like [`evaluate`](Self::evaluate) but accepts any vector; points off the
    /// simplex get the all-ones score vector.
    fn evaluate_point(&self, v: &[f64]) -> ScoreVector {
        if v.len() != self.n() || !in_simplex(v, 1e-9) {
            return ScoreVector { scores: vec![1.0; self.n()] };
        }
        let mut scores = vec![0.0; self.n()];
        self.scores_into(v, &mut scores);
        ScoreVector { scores }
    }

    /// Scores for a history; an empty history has no memory vector and gets all ones.
    fn evaluate_history(&self, h: &Histogram) -> ScoreVector {
        match h.normalize() {
            Ok(v) => self.evaluate(&v),
            Err(_) => ScoreVector { scores: vec![1.0; self.n()] },
        }
    }
}

impl<T: PreferenceModel + ?Sized> PreferenceModel for Arc<T> {
    fn n(&self) -> usize {
        (**self).n()
    }
    fn lambda(&self) -> f64 {
        (**self).lambda()
    }
    fn family(&self) -> Family {
        (**self).family()
    }
    fn scores_into(&self, v: &[f64], out: &mut [f64]) {
        (**self).scores_into(v, out)
    }
}

impl<T: PreferenceModel + ?Sized> PreferenceModel for Box<T> {
    fn n(&self) -> usize {
        (**self).n()
    }
    fn lambda(&self) -> f64 {
        (**self).lambda()
    }
    fn family(&self) -> Family {
        (**self).family()
    }
    fn scores_into(&self, v: &[f64], out: &mut [f64]) {
        (**self).scores_into(v, out)
    }
}

fn check_lambda(lambda: f64) -> Result<(), ModelError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(ModelError::Invalid(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    Ok(())
}

fn check_value(family: Family, item: usize, value: f64, lambda: f64, at: &[f64]) -> Result<(), ModelError> {
    if !value.is_finite() || value < lambda - RANGE_TOL || value > 1.0 + RANGE_TOL {
        return Err(ModelError::OutOfRange { family, item, value, lambda, at: at.to_vec() });
    }
    Ok(())
}

/// Probe points for range checks on multivariate families: vertices, the
/// uniform vector and seeded random simplex points.
fn probe_points(n: usize, samples: usize) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = (0..n).map(|i| SimplexVector::vertex(n, i).into_vec()).collect();
    pts.push(SimplexVector::uniform(n).into_vec());
    let mut rng = derive_rng(0x5eed_0f_1a, 0);
    pts.extend((0..samples).map(|_| random_simplex(n, &mut rng).into_vec()));
    pts
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Each item's score is a univariate polynomial of its own memory coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BupModel {
    pub n: usize,
    pub lambda: f64,
    /// Ascending-power coefficients per item.
    pub coeffs: Vec<Vec<f64>>,
}

impl BupModel {
    pub fn new(lambda: f64, coeffs: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let m = Self::unchecked(lambda, coeffs)?;
        m.validate()?;
        Ok(m)
    }

    /// Build without the range scan (used for fitted hypotheses).
    pub fn unchecked(lambda: f64, coeffs: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if coeffs.len() < 2 {
            return Err(ModelError::Invalid("need at least 2 items".into()));
        }
        if coeffs.iter().any(|c| c.is_empty() || c.iter().any(|x| !x.is_finite())) {
            return Err(ModelError::Invalid("every item needs finite coefficients".into()));
        }
        Ok(BupModel { n: coeffs.len(), lambda, coeffs })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_lambda(self.lambda)?;
        let steps = (1.0 / GRID_STEP).round() as usize;
        for (i, c) in self.coeffs.iter().enumerate() {
            for s in 0..=steps {
                let x = s as f64 * GRID_STEP;
                check_value(Family::Bup, i, horner(c, x), self.lambda, &[x])?;
            }
        }
        Ok(())
    }

    pub fn degree(&self) -> usize {
        self.coeffs.iter().map(|c| c.len() - 1).max().unwrap_or(0)
    }

    /// Score function of item `i` at memory value `x`.
    pub fn item_score(&self, i: usize, x: f64) -> f64 {
        horner(&self.coeffs[i], x)
    }
}

impl PreferenceModel for BupModel {
    fn n(&self) -> usize {
        self.n
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn family(&self) -> Family {
        Family::Bup
    }
    fn scores_into(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = horner(&self.coeffs[i], v[i]);
        }
    }
}

/// Scores are multilinear polynomials in the first `n - 1` memory coordinates
/// (the last one is implied by the unit sum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmlpModel {
    pub n: usize,
    pub lambda: f64,
    pub polys: Vec<MultiPoly>,
}

impl BmlpModel {
    pub fn new(lambda: f64, polys: Vec<MultiPoly>) -> Result<Self, ModelError> {
        let m = Self::unchecked(lambda, polys)?;
        m.validate()?;
        Ok(m)
    }

    pub fn unchecked(lambda: f64, polys: Vec<MultiPoly>) -> Result<Self, ModelError> {
        let n = polys.len();
        if n < 2 {
            return Err(ModelError::Invalid("need at least 2 items".into()));
        }
        if polys.iter().any(|p| p.nvars != n - 1) {
            return Err(ModelError::Invalid(format!("polynomials must use n - 1 = {} variables", n - 1)));
        }
        if polys.iter().any(|p| !p.is_multilinear()) {
            return Err(ModelError::Invalid("every monomial must be multilinear".into()));
        }
        Ok(BmlpModel { n, lambda, polys })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_lambda(self.lambda)?;
        let mut out = vec![0.0; self.n];
        for p in probe_points(self.n, 2000) {
            self.scores_into(&p, &mut out);
            for (i, &s) in out.iter().enumerate() {
                check_value(Family::Bmlp, i, s, self.lambda, &p)?;
            }
        }
        Ok(())
    }

    pub fn degree(&self) -> u32 {
        self.polys.iter().map(|p| p.degree()).max().unwrap_or(0)
    }
}

impl PreferenceModel for BmlpModel {
    fn n(&self) -> usize {
        self.n
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn family(&self) -> Family {
        Family::Bmlp
    }
    fn scores_into(&self, v: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.polys) {
            *o = p.eval(v);
        }
    }
}

/// General polynomial scores in the first `n - 1` coordinates whose sum is a
/// constant `c_norm` everywhere on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnmpModel {
    pub n: usize,
    pub lambda: f64,
    pub c_norm: f64,
    pub polys: Vec<MultiPoly>,
}

impl BnmpModel {
    pub fn new(lambda: f64, c_norm: f64, polys: Vec<MultiPoly>) -> Result<Self, ModelError> {
        let m = Self::unchecked(lambda, c_norm, polys)?;
        m.validate()?;
        Ok(m)
    }

    pub fn unchecked(lambda: f64, c_norm: f64, polys: Vec<MultiPoly>) -> Result<Self, ModelError> {
        let n = polys.len();
        if n < 2 {
            return Err(ModelError::Invalid("need at least 2 items".into()));
        }
        if polys.iter().any(|p| p.nvars != n - 1) {
            return Err(ModelError::Invalid(format!("polynomials must use n - 1 = {} variables", n - 1)));
        }
        Ok(BnmpModel { n, lambda, c_norm, polys })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_lambda(self.lambda)?;
        let mut out = vec![0.0; self.n];
        for p in probe_points(self.n, 2000) {
            self.scores_into(&p, &mut out);
            for (i, &s) in out.iter().enumerate() {
                check_value(Family::Bnmp, i, s, self.lambda, &p)?;
            }
            let sum: f64 = out.iter().sum();
            if (sum - self.c_norm).abs() > 1e-9 {
                return Err(ModelError::Invalid(format!(
                    "scores sum to {sum} at {p:?}, declared constant {}",
                    self.c_norm
                )));
            }
        }
        Ok(())
    }

    /// Complete a model from the first `n - 1` items: the last item gets `c_norm - Σ others`.
    pub fn completed(lambda: f64, c_norm: f64, mut first: Vec<MultiPoly>) -> Result<Self, ModelError> {
        let nvars = first.first().map(|p| p.nvars).unwrap_or(0);
        let mut last = MultiPoly::constant(nvars, c_norm);
        for p in &first {
            last = last.add(&p.scale(-1.0));
        }
        first.push(last);
        Self::new(lambda, c_norm, first)
    }
}

impl PreferenceModel for BnmpModel {
    fn n(&self) -> usize {
        self.n
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn family(&self) -> Family {
        Family::Bnmp
    }
    fn scores_into(&self, v: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.polys) {
            *o = p.eval(v);
        }
    }
}

/// One complex exponential `magnitude · exp(2πi · freq · x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SfrTerm {
    pub freq: f64,
    pub re: f64,
    pub im: f64,
}

impl SfrTerm {
    pub fn magnitude(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

/// Each item's score is a sparse sum of complex exponentials in its own memory
/// coordinate. Terms come in conjugate pairs so the sum is real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfrModel {
    pub n: usize,
    pub lambda: f64,
    /// Minimum gap between distinct frequencies of one item.
    pub separation: f64,
    /// Bound on |freq|.
    pub freq_bound: f64,
    /// Lipschitz bound on every item's score function, computed from the terms.
    pub lipschitz: f64,
    pub items: Vec<Vec<SfrTerm>>,
}

impl SfrModel {
    pub fn new(lambda: f64, separation: f64, freq_bound: f64, items: Vec<Vec<SfrTerm>>) -> Result<Self, ModelError> {
        let m = Self::unchecked(lambda, separation, freq_bound, items)?;
        m.validate()?;
        Ok(m)
    }

    pub fn unchecked(
        lambda: f64,
        separation: f64,
        freq_bound: f64,
        items: Vec<Vec<SfrTerm>>,
    ) -> Result<Self, ModelError> {
        if items.len() < 2 {
            return Err(ModelError::Invalid("need at least 2 items".into()));
        }
        let lipschitz = items
            .iter()
            .map(|terms| terms.iter().map(|t| 2.0 * PI * t.freq.abs() * t.magnitude().norm()).sum::<f64>())
            .fold(0.0, f64::max);
        Ok(SfrModel { n: items.len(), lambda, separation, freq_bound, lipschitz, items })
    }

    /// Build real-valued terms from `(freq ≥ 0, cos amplitude, sin amplitude)` triples.
    pub fn real_terms(components: &[(f64, f64, f64)]) -> Vec<SfrTerm> {
        let mut out = Vec::new();
        for &(f, a, b) in components {
            if f == 0.0 {
                out.push(SfrTerm { freq: 0.0, re: a, im: 0.0 });
            } else {
                // a cos(2πfx) + b sin(2πfx) = ξ e^{2πifx} + conj(ξ) e^{-2πifx}, ξ = (a - ib)/2
                out.push(SfrTerm { freq: f, re: a / 2.0, im: -b / 2.0 });
                out.push(SfrTerm { freq: -f, re: a / 2.0, im: b / 2.0 });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_lambda(self.lambda)?;
        for (i, terms) in self.items.iter().enumerate() {
            for t in terms {
                if !(t.freq.is_finite() && t.re.is_finite() && t.im.is_finite()) {
                    return Err(ModelError::Invalid(format!("item {i}: non-finite term")));
                }
                if t.freq.abs() > self.freq_bound + 1e-12 {
                    return Err(ModelError::Invalid(format!(
                        "item {i}: frequency {} exceeds bound {}",
                        t.freq, self.freq_bound
                    )));
                }
                if t.freq == 0.0 && t.im.abs() > 1e-12 {
                    return Err(ModelError::Invalid(format!("item {i}: zero-frequency term must be real")));
                }
                let paired = t.freq == 0.0
                    || terms.iter().any(|s| {
                        (s.freq + t.freq).abs() < 1e-12 && (s.re - t.re).abs() < 1e-12 && (s.im + t.im).abs() < 1e-12
                    });
                if !paired {
                    return Err(ModelError::Invalid(format!(
                        "item {i}: frequency {} has no conjugate partner",
                        t.freq
                    )));
                }
            }
            let mut freqs: Vec<f64> = terms.iter().map(|t| t.freq).collect();
            freqs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in freqs.windows(2) {
                if w[1] - w[0] < self.separation - 1e-12 {
                    return Err(ModelError::Invalid(format!(
                        "item {i}: frequencies {} and {} closer than separation {}",
                        w[0], w[1], self.separation
                    )));
                }
            }
        }
        let steps = (1.0 / GRID_STEP).round() as usize;
        for i in 0..self.n {
            for s in 0..=steps {
                let x = s as f64 * GRID_STEP;
                check_value(Family::Sfr, i, self.item_score(i, x), self.lambda, &[x])?;
            }
        }
        Ok(())
    }

    /// Full complex value; the imaginary part is round-off only.
    pub fn item_value(&self, i: usize, x: f64) -> Complex64 {
        self.items[i]
            .iter()
            .map(|t| t.magnitude() * Complex64::from_polar(1.0, 2.0 * PI * t.freq * x))
            .sum()
    }

    pub fn item_score(&self, i: usize, x: f64) -> f64 {
        self.item_value(i, x).re
    }
}

impl PreferenceModel for SfrModel {
    fn n(&self) -> usize {
        self.n
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn family(&self) -> Family {
        Family::Sfr
    }
    fn scores_into(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.item_score(i, v[i]);
        }
    }
}

type ScoreFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Wraps an arbitrary score function; the ground-truth oracle in tests.
#[derive(Clone)]
pub struct TabularOracleModel {
    n: usize,
    lambda: f64,
    f: Arc<ScoreFn>,
}

impl TabularOracleModel {
    pub fn new(n: usize, lambda: f64, f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        TabularOracleModel { n, lambda, f: Arc::new(f) }
    }
}

impl fmt::Debug for TabularOracleModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TabularOracleModel").field("n", &self.n).field("lambda", &self.lambda).finish()
    }
}

impl PreferenceModel for TabularOracleModel {
    fn n(&self) -> usize {
        self.n
    }
    fn lambda(&self) -> f64 {
        self.lambda
    }
    fn family(&self) -> Family {
        Family::Tabular
    }
    fn scores_into(&self, v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&(self.f)(v));
    }
}

/// Any serializable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum AnyModel {
    Bup(BupModel),
    Bmlp(BmlpModel),
    Bnmp(BnmpModel),
    Sfr(SfrModel),
}

impl AnyModel {
    fn inner(&self) -> &dyn PreferenceModel {
        match self {
            AnyModel::Bup(m) => m,
            AnyModel::Bmlp(m) => m,
            AnyModel::Bnmp(m) => m,
            AnyModel::Sfr(m) => m,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            AnyModel::Bup(m) => m.validate(),
            AnyModel::Bmlp(m) => {
                BmlpModel::unchecked(m.lambda, m.polys.clone())?;
                m.validate()
            }
            AnyModel::Bnmp(m) => {
                BnmpModel::unchecked(m.lambda, m.c_norm, m.polys.clone())?;
                m.validate()
            }
            AnyModel::Sfr(m) => m.validate(),
        }
    }
}

impl PreferenceModel for AnyModel {
    fn n(&self) -> usize {
        self.inner().n()
    }
    fn lambda(&self) -> f64 {
        self.inner().lambda()
    }
    fn family(&self) -> Family {
        self.inner().family()
    }
    fn scores_into(&self, v: &[f64], out: &mut [f64]) {
        self.inner().scores_into(v, out)
    }
}

pub const MODEL_FORMAT: &str = "menugame-model/1";

/// Where a fitted model came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisProvenance {
    pub fit_family: Family,
    pub epsilon_hat: f64,
    pub plan_digest: String,
}

/// On-disk model definition (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub model: AnyModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<HypothesisProvenance>,
}

impl ModelFile {
    pub fn new(model: AnyModel) -> Self {
        ModelFile { format: MODEL_FORMAT.to_string(), model, hypothesis: None }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    /// Parse and validate. Fitted hypotheses skip the range check, since they
    /// carry an unknown overall scale.
    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let f: ModelFile = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if f.format != MODEL_FORMAT {
            return Err(ModelError::Format(format!("unsupported format tag '{}'", f.format)));
        }
        if f.hypothesis.is_none() {
            f.model.validate()?;
        }
        Ok(f)
    }
}

/// Selection probabilities over the menu items (zero elsewhere), from a score vector.
pub fn menu_probs(scores: &[f64], menu: &Menu, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let denom: f64 = menu.items().iter().map(|&i| scores[i]).sum();
    for &i in menu.items() {
        out[i] = scores[i] / denom;
    }
}

/// The agent's choice distribution at memory `v` when shown `menu`.
pub fn selection_distribution<M: PreferenceModel + ?Sized>(m: &M, v: &SimplexVector, menu: &Menu) -> SimplexVector {
    let s = m.evaluate(v);
    let mut out = vec![0.0; m.n()];
    menu_probs(&s.scores, menu, &mut out);
    SimplexVector::from_numeric(&out).expect("scores are positive on a dispersed model")
}

/// Draw the agent's choice.
pub fn sample_choice<M: PreferenceModel + ?Sized, R: Rng + ?Sized>(
    m: &M,
    v: &SimplexVector,
    menu: &Menu,
    rng: &mut R,
) -> usize {
    let s = m.evaluate(v);
    let w: Vec<f64> = menu.items().iter().map(|&i| s.scores[i]).collect();
    menu.items()[sample_index(&w, rng)]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionReport {
    pub passed: bool,
    pub worst_point: Vec<f64>,
    pub worst_item: usize,
    pub worst_score: f64,
    pub points_checked: usize,
}

/// Evaluate on `samples` random points plus every vertex and the uniform vector.
pub fn verify_dispersion<M: PreferenceModel + ?Sized, R: Rng + ?Sized>(
    m: &M,
    lambda: f64,
    samples: usize,
    rng: &mut R,
) -> DispersionReport {
    let n = m.n();
    let mut pts: Vec<Vec<f64>> = (0..n).map(|i| SimplexVector::vertex(n, i).into_vec()).collect();
    pts.push(SimplexVector::uniform(n).into_vec());
    pts.extend((0..samples.max(1)).map(|_| random_simplex(n, rng).into_vec()));
    let mut out = vec![0.0; n];
    let mut report = DispersionReport {
        passed: true,
        worst_point: pts[0].clone(),
        worst_item: 0,
        worst_score: f64::INFINITY,
        points_checked: pts.len(),
    };
    for p in &pts {
        m.scores_into(p, &mut out);
        for (i, &s) in out.iter().enumerate() {
            if s < report.worst_score {
                report.worst_score = s;
                report.worst_item = i;
                report.worst_point = p.clone();
            }
        }
    }
    report.passed = report.worst_score >= lambda - RANGE_TOL;
    report
}

/// Affine score `c0 + Σ_l coeffs[l] v_l` over all `n` coordinates, rewritten in
/// the first `n - 1` coordinates.
fn affine_in_chart_vars(c0: f64, coeffs: &[f64]) -> MultiPoly {
    let n = coeffs.len();
    let last = coeffs[n - 1];
    let reduced: Vec<f64> = coeffs[..n - 1].iter().map(|c| c - last).collect();
    MultiPoly::affine(c0 + last, &reduced)
}

/// A random BUP instance whose scores stay in `[lambda, 1]`: each item gets a
/// constant term plus `degree` small coefficients.
pub fn random_bup<R: Rng + ?Sized>(n: usize, degree: usize, lambda: f64, rng: &mut R) -> Result<BupModel, ModelError> {
    check_lambda(lambda)?;
    let a = (1.0 - lambda) / (4.0 * degree.max(1) as f64);
    let coeffs = (0..n)
        .map(|_| {
            let tail: Vec<f64> = (0..degree).map(|_| rng.gen_range(-a..=a)).collect();
            let spread: f64 = tail.iter().map(|c| c.abs()).sum();
            let c0 = rng.gen_range(lambda + spread..=1.0 - spread);
            std::iter::once(c0).chain(tail).collect()
        })
        .collect();
    BupModel::new(lambda, coeffs)
}

/// A random affine BMLP instance with scores in `[lambda, 1]`.
pub fn random_bmlp<R: Rng + ?Sized>(n: usize, lambda: f64, rng: &mut R) -> Result<BmlpModel, ModelError> {
    check_lambda(lambda)?;
    let a = (1.0 - lambda) / 4.0;
    let polys = (0..n)
        .map(|_| {
            let slopes: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-a..=a)).collect();
            let spread = slopes.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            MultiPoly::affine(rng.gen_range(lambda + spread..=1.0 - spread), &slopes)
        })
        .collect();
    BmlpModel::new(lambda, polys)
}

/// The two closed-form models behind the linear-regret constructions.
///
/// Construction 1 (items 0 and 1 play the roles of the paper's items 1 and 2):
/// item 0's score rises with its own memory share while item 1's falls with
/// it. Construction 2 uses items 0, 1, 2 as `a`, `b`, `c`.
pub fn build_lower_bound_model(which: u8, n: usize, lambda: f64, eps: f64) -> Result<BmlpModel, ModelError> {
    let nf = n as f64;
    match which {
        1 => {
            if n < 2 {
                return Err(ModelError::Invalid("construction 1 needs n >= 2".into()));
            }
            // Item 1 peaks at λ + 0.5 (1 + 1/n) when v_0 = 0, so λ ≤ (n-1)/(2n) keeps it ≤ 1.
            let lam_max = (nf - 1.0) / (2.0 * nf);
            if !(lambda > 0.0 && lambda < 0.5 && lambda <= lam_max + 1e-15) {
                return Err(ModelError::Invalid(format!(
                    "construction 1 needs 0 < lambda <= (n-1)/(2n) = {lam_max} (< 0.5), got {lambda}"
                )));
            }
            let slope = nf / (nf - 1.0) * (0.5 - lambda);
            let mut polys = Vec::with_capacity(n);
            let mut c = vec![0.0; n];
            c[0] = slope;
            polys.push(affine_in_chart_vars(lambda + 0.5 - slope / nf, &c));
            let mut c = vec![0.0; n];
            c[0] = -0.5;
            polys.push(affine_in_chart_vars(lambda + 0.5 * (1.0 + 1.0 / nf), &c));
            for _ in 2..n {
                polys.push(MultiPoly::constant(n - 1, 0.5 + lambda));
            }
            BmlpModel::new(lambda, polys)
        }
        2 => {
            if n < 3 {
                return Err(ModelError::Invalid("construction 2 needs n >= 3".into()));
            }
            if !(lambda > 0.0 && eps > lambda && eps < 1.0) {
                return Err(ModelError::Invalid(format!(
                    "construction 2 needs 0 < lambda < eps < 1, got lambda = {lambda}, eps = {eps}"
                )));
            }
            let g = 1.0 - eps;
            let falls_with_b = {
                let mut c = vec![0.0; n];
                c[1] = -g;
                affine_in_chart_vars(lambda + g, &c)
            };
            let mut polys = vec![falls_with_b.clone()];
            let mut c = vec![0.0; n];
            c[1] = g;
            polys.push(affine_in_chart_vars(lambda, &c));
            let mut c = vec![0.0; n];
            c[2] = g;
            polys.push(affine_in_chart_vars(lambda, &c));
            for _ in 3..n {
                polys.push(falls_with_b.clone());
            }
            BmlpModel::new(lambda, polys)
        }
        other => Err(ModelError::Invalid(format!("unknown construction {other}; expected 1 or 2"))),
    }
}
