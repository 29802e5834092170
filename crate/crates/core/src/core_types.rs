//! Simplex vectors, integer histograms, menus and the menu catalog.
//!
//! Everything downstream passes item distributions around as [`SimplexVector`]
//! and the agent's history as a [`Histogram`]; the float memory vector is always
//! recomputed from integer counts so long runs do not accumulate drift.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the unit-sum invariant of a [`SimplexVector`].
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Default cap on `C(n, k)` for [`enumerate_menus`].
pub const DEFAULT_MENU_CAP: usize = 200_000;

/// The generator used for every stochastic operation.
pub type SimRng = ChaCha8Rng;

/// Build a generator for stream `stream` of a master seed.
///
/// Distinct streams of the same seed are independent, which is how replicas
/// and sub-components get their own randomness without sharing state.
pub fn derive_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),
    #[error("coordinate {index} is not a finite nonnegative number: {value}")]
    BadCoordinate { index: usize, value: f64 },
    #[error("coordinates sum to {0}, expected 1")]
    BadSum(f64),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("item index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("invalid menu: {0}")]
    InvalidMenu(String),
    #[error("menu space too large: C({n},{k}) = {count} exceeds the cap of {cap}")]
    MenuSpaceTooLarge { n: usize, k: usize, count: u128, cap: usize },
    #[error("empty histogram has no memory vector")]
    EmptyHistogram,
    #[error("invalid menu distribution: {0}")]
    InvalidDistribution(String),
}

/// A point of the probability simplex over `n ≥ 2` items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector {
    coords: Vec<f64>,
}

impl SimplexVector {
    /// Validate and wrap `coords`. Negative values above `-SIMPLEX_TOL` are clamped to zero.
    pub fn new(mut coords: Vec<f64>) -> Result<Self, CoreError> {
        if coords.len() < 2 {
            return Err(CoreError::DimensionTooSmall(coords.len()));
        }
        for (index, c) in coords.iter_mut().enumerate() {
            if !c.is_finite() || *c < -SIMPLEX_TOL {
                return Err(CoreError::BadCoordinate { index, value: *c });
            }
            if *c < 0.0 {
                *c = 0.0;
            }
        }
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(CoreError::BadSum(sum));
        }
        Ok(SimplexVector { coords })
    }

    /// Normalize nonnegative weights with a positive sum.
    pub fn from_weights(weights: &[f64]) -> Result<Self, CoreError> {
        if weights.len() < 2 {
            return Err(CoreError::DimensionTooSmall(weights.len()));
        }
        for (index, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(CoreError::BadCoordinate { index, value: w });
            }
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(CoreError::BadSum(sum));
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    /// Clamp small negative round-off to zero and renormalize.
    ///
    /// Intended for outputs of numerical routines that are simplex points up
    /// to floating-point error; large violations are still rejected.
    pub fn from_numeric(coords: &[f64]) -> Result<Self, CoreError> {
        let clamped: Vec<f64> = coords
            .iter()
            .enumerate()
            .map(|(index, &c)| {
                if !c.is_finite() || c < -1e-6 {
                    Err(CoreError::BadCoordinate { index, value: c })
                } else {
                    Ok(c.max(0.0))
                }
            })
            .collect::<Result<_, _>>()?;
        Self::from_weights(&clamped)
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 2, "simplex dimension must be at least 2");
        SimplexVector { coords: vec![1.0 / n as f64; n] }
    }

    /// The point mass on item `i`.
    pub fn vertex(n: usize, i: usize) -> Self {
        assert!(n >= 2 && i < n);
        let mut coords = vec![0.0; n];
        coords[i] = 1.0;
        SimplexVector { coords }
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn get(&self, i: usize) -> f64 {
        self.coords[i]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = CoreError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        SimplexVector::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(v: SimplexVector) -> Self {
        v.coords
    }
}

/// True if `x` lies on the simplex within `tol` (nonnegativity and unit sum).
pub fn in_simplex(x: &[f64], tol: f64) -> bool {
    x.len() >= 2
        && x.iter().all(|c| c.is_finite() && *c >= -tol)
        && (x.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// Selection counts per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn new(n: usize) -> Self {
        Histogram { counts: vec![0; n], total: 0 }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total = counts.iter().sum();
        Histogram { counts, total }
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, i: usize) -> u64 {
        self.counts[i]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Record one selection of `item` in place.
    pub fn record(&mut self, item: usize) -> Result<(), CoreError> {
        let n = self.counts.len();
        let c = self.counts.get_mut(item).ok_or(CoreError::IndexOutOfRange { index: item, n })?;
        *c += 1;
        self.total += 1;
        Ok(())
    }

    /// The memory vector: counts divided by the total.
    pub fn normalize(&self) -> Result<SimplexVector, CoreError> {
        if self.total == 0 {
            return Err(CoreError::EmptyHistogram);
        }
        if self.counts.len() < 2 {
            return Err(CoreError::DimensionTooSmall(self.counts.len()));
        }
        let t = self.total as f64;
        let mut coords: Vec<f64> = self.counts.iter().map(|&c| c as f64 / t).collect();
        // Division rounds each coordinate independently; push the residue onto the
        // largest entry so the unit-sum invariant holds to machine precision.
        let sum: f64 = coords.iter().sum();
        let imax = argmax(&coords);
        coords[imax] += 1.0 - sum;
        SimplexVector::new(coords)
    }
}

/// `h` with one more selection of `chosen`.
pub fn update_memory(h: &Histogram, chosen: usize) -> Result<Histogram, CoreError> {
    let mut next = h.clone();
    next.record(chosen)?;
    Ok(next)
}

/// Natural-log entropy; zero coordinates contribute nothing.
pub fn entropy(v: &SimplexVector) -> f64 {
    entropy_of(v.coords())
}

/// Entropy of a raw coordinate slice (nonpositive entries are skipped).
pub fn entropy_of(x: &[f64]) -> f64 {
    // `0.0 - s` rather than `-s`, so a point mass reports +0.0.
    0.0 - x.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Half the l1 distance.
pub fn tv_distance(a: &SimplexVector, b: &SimplexVector) -> Result<f64, CoreError> {
    if a.n() != b.n() {
        return Err(CoreError::DimensionMismatch { left: a.n(), right: b.n() });
    }
    Ok(0.5 * a.coords.iter().zip(&b.coords).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// A shown set of `k ≥ 2` distinct items, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Menu {
    items: Vec<usize>,
}

impl Menu {
    pub fn new(mut items: Vec<usize>, n: usize) -> Result<Self, CoreError> {
        items.sort_unstable();
        if items.len() < 2 {
            return Err(CoreError::InvalidMenu(format!("needs at least 2 items, got {}", items.len())));
        }
        if items.len() > n {
            return Err(CoreError::InvalidMenu(format!("{} items exceed n = {}", items.len(), n)));
        }
        if items.windows(2).any(|w| w[0] == w[1]) {
            return Err(CoreError::InvalidMenu(format!("duplicate items in {:?}", items)));
        }
        if let Some(&last) = items.last() {
            if last >= n {
                return Err(CoreError::IndexOutOfRange { index: last, n });
            }
        }
        Ok(Menu { items })
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn k(&self) -> usize {
        self.items.len()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.items.binary_search(&item).is_ok()
    }
}

/// Binomial coefficient, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Every `k`-subset of `n` items in lexicographic order, with an inverse index.
#[derive(Debug, Clone)]
pub struct MenuCatalog {
    n: usize,
    k: usize,
    menus: Vec<Menu>,
    index: HashMap<Vec<usize>, usize>,
}

impl MenuCatalog {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.menus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.menus.is_empty()
    }

    pub fn menus(&self) -> &[Menu] {
        &self.menus
    }

    pub fn menu(&self, j: usize) -> &Menu {
        &self.menus[j]
    }

    pub fn index_of(&self, menu: &Menu) -> Option<usize> {
        self.index.get(menu.items()).copied()
    }
}

/// Enumerate all menus with the default cap.
pub fn enumerate_menus(n: usize, k: usize) -> Result<MenuCatalog, CoreError> {
    enumerate_menus_capped(n, k, DEFAULT_MENU_CAP)
}

pub fn enumerate_menus_capped(n: usize, k: usize, cap: usize) -> Result<MenuCatalog, CoreError> {
    if k < 2 || k > n {
        return Err(CoreError::InvalidMenu(format!("need 2 <= k <= n, got n = {n}, k = {k}")));
    }
    let count = binomial(n, k);
    if count > cap as u128 {
        return Err(CoreError::MenuSpaceTooLarge { n, k, count, cap });
    }
    let mut menus = Vec::with_capacity(count as usize);
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        menus.push(Menu { items: cur.clone() });
        // Advance to the next combination in lexicographic order.
        let mut i = k;
        while i > 0 && cur[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        cur[i - 1] += 1;
        for j in i..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
    let index = menus.iter().enumerate().map(|(j, m)| (m.items.clone(), j)).collect();
    Ok(MenuCatalog { n, k, menus, index })
}

/// A probability vector over the menus of a catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MenuDistribution {
    weights: Vec<f64>,
}

impl MenuDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self, CoreError> {
        if weights.is_empty() {
            return Err(CoreError::InvalidDistribution("no weights".into()));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(CoreError::InvalidDistribution(format!("weight {i} is {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(CoreError::InvalidDistribution(format!("weights sum to {sum}")));
        }
        Ok(MenuDistribution { weights })
    }

    /// Clamp tiny negatives and renormalize numerical solver output.
    pub fn from_numeric(weights: &[f64]) -> Result<Self, CoreError> {
        let clamped: Vec<f64> = weights.iter().map(|w| w.max(0.0)).collect();
        let sum: f64 = clamped.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(CoreError::InvalidDistribution(format!("weights sum to {sum}")));
        }
        Self::new(clamped.iter().map(|w| w / sum).collect())
    }

    pub fn point_mass(len: usize, j: usize) -> Self {
        let mut weights = vec![0.0; len];
        weights[j] = 1.0;
        MenuDistribution { weights }
    }

    pub fn uniform(len: usize) -> Self {
        MenuDistribution { weights: vec![1.0 / len as f64; len] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Number of menus with weight above `tol`.
    pub fn support_size(&self, tol: f64) -> usize {
        self.weights.iter().filter(|w| **w > tol).count()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.weights, rng)
    }
}

/// Draw an index with probability proportional to `weights`.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    last
}

/// Uniform random point of the simplex (flat Dirichlet).
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SimplexVector {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    SimplexVector::from_weights(&e).expect("exponential draws are positive")
}

/// All simplex points whose coordinates are multiples of `1/steps`.
pub fn simplex_grid(n: usize, steps: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut cur = vec![0usize; n];
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, steps: usize, out: &mut Vec<Vec<f64>>) {
        let n = cur.len();
        if pos == n - 1 {
            cur[pos] = left;
            out.push(cur.iter().map(|&c| c as f64 / steps as f64).collect());
            return;
        }
        for c in 0..=left {
            cur[pos] = c;
            rec(pos + 1, left - c, cur, steps, out);
        }
    }
    if n >= 1 {
        rec(0, steps, &mut cur, steps, &mut out);
    }
    out
}

pub(crate) fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest, Strategy};

    #[test]
    fn entropy_examples() {
        assert!((entropy(&SimplexVector::uniform(4)) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&SimplexVector::vertex(4, 0)), 0.0);
        let half = SimplexVector::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((entropy(&half) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        let a = SimplexVector::new(vec![0.6, 0.4]).unwrap();
        let b = SimplexVector::new(vec![0.4, 0.6]).unwrap();
        assert!((tv_distance(&a, &b).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(tv_distance(&SimplexVector::vertex(3, 0), &SimplexVector::vertex(3, 1)).unwrap(), 1.0);
        assert!(matches!(
            tv_distance(&a, &SimplexVector::uniform(3)),
            Err(CoreError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn memory_update_examples() {
        let h = update_memory(&Histogram::new(3), 1).unwrap();
        assert_eq!(h.normalize().unwrap().coords(), &[0.0, 1.0, 0.0]);
        let h = update_memory(&Histogram::from_counts(vec![1, 1]), 0).unwrap();
        let v = h.normalize().unwrap();
        assert!((v.get(0) - 2.0 / 3.0).abs() < 1e-15 && (v.get(1) - 1.0 / 3.0).abs() < 1e-15);
        assert!(update_memory(&h, 5).is_err());
    }

    #[test]
    fn memory_matches_convex_update() {
        let mut rng = derive_rng(3, 0);
        let mut h = Histogram::new(4);
        let mut v = vec![0.0; 4];
        for t in 0..5000u64 {
            let i = rng.gen_range(0..4);
            h.record(i).unwrap();
            let tf = t as f64;
            for (j, vj) in v.iter_mut().enumerate() {
                let e = if j == i { 1.0 } else { 0.0 };
                *vj = e / (tf + 1.0) + tf * *vj / (tf + 1.0);
            }
        }
        let hv = h.normalize().unwrap();
        for j in 0..4 {
            assert!((hv.get(j) - v[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn iid_updates_concentrate() {
        // Binomial confidence interval as the oracle.
        let p = 0.3;
        let mut rng = derive_rng(11, 0);
        let mut h = Histogram::new(2);
        for _ in 0..1000 {
            h.record(if rng.gen::<f64>() < p { 0 } else { 1 }).unwrap();
        }
        let v = h.normalize().unwrap();
        assert!((v.get(0) - p).abs() <= 3.0 * (p * (1.0 - p) / 1000.0).sqrt());
    }

    #[test]
    fn catalog_examples() {
        let c = enumerate_menus(4, 2).unwrap();
        assert_eq!(c.len(), 6);
        assert_eq!(c.menu(0).items(), &[0, 1]);
        assert_eq!(c.menu(5).items(), &[2, 3]);
        assert_eq!(enumerate_menus(5, 3).unwrap().len(), 10);
        let big = enumerate_menus(20, 3).unwrap();
        assert_eq!(big.len(), 1140);
        for (j, m) in big.menus().iter().enumerate() {
            assert_eq!(big.index_of(m), Some(j));
        }
        assert!(big.menus().windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(enumerate_menus(60, 10), Err(CoreError::MenuSpaceTooLarge { .. })));
    }

    #[test]
    fn menu_validation() {
        assert!(Menu::new(vec![1], 4).is_err());
        assert!(Menu::new(vec![1, 1], 4).is_err());
        assert!(Menu::new(vec![1, 4], 4).is_err());
        assert_eq!(Menu::new(vec![3, 0], 4).unwrap().items(), &[0, 3]);
    }

    #[test]
    fn simplex_validation() {
        assert!(SimplexVector::new(vec![1.0]).is_err());
        assert!(SimplexVector::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexVector::new(vec![-0.1, 1.1]).is_err());
        let v: SimplexVector = serde_json::from_str("[0.25,0.75]").unwrap();
        assert_eq!(v.get(1), 0.75);
        assert!(serde_json::from_str::<SimplexVector>("[0.25,0.5]").is_err());
    }

    #[test]
    fn grid_counts() {
        assert_eq!(simplex_grid(3, 10).len(), 66);
        assert!(simplex_grid(4, 5).iter().all(|p| in_simplex(p, 1e-12)));
    }

    fn arb_simplex(n: usize) -> impl Strategy<Value = SimplexVector> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("positive mass", |w| {
            SimplexVector::from_weights(&w).ok()
        })
    }

    proptest! {
        #[test]
        fn entropy_at_most_log_n(v in arb_simplex(5)) {
            let h = entropy(&v);
            prop_assert!(h <= 5f64.ln() + 1e-12);
            prop_assert!(h >= 0.0);
        }

        #[test]
        fn tv_is_a_metric(a in arb_simplex(4), b in arb_simplex(4), c in arb_simplex(4)) {
            let ab = tv_distance(&a, &b).unwrap();
            prop_assert!((ab - tv_distance(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!(ab <= tv_distance(&a, &c).unwrap() + tv_distance(&c, &b).unwrap() + 1e-12);
            prop_assert!(tv_distance(&a, &a).unwrap() == 0.0);
        }

        #[test]
        fn histogram_normalizes_exactly(counts in prop::collection::vec(0u64..1000, 2..7)) {
            let h = Histogram::from_counts(counts);
            if h.total() > 0 {
                let v = h.normalize().unwrap();
                prop_assert!((v.coords().iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
            }
        }
    }

    #[test]
    fn uniform_is_the_entropy_maximizer() {
        let mut rng = derive_rng(1, 0);
        for _ in 0..200 {
            let v = random_simplex(6, &mut rng);
            assert!(entropy(&v) < 6f64.ln());
        }
    }
}
