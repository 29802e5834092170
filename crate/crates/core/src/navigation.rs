//! Menu policies that steer the agent's history: padding toward uniform,
//! moving toward a target histogram, and querying normalized scores.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::core_types::{CoreError, Histogram, Menu, SimplexVector};
use crate::geometry_sets::eird_ball_radius;
use crate::preference_models::{menu_probs, sample_choice, PreferenceModel};

#[derive(Debug, Error)]
pub enum NavError {
    #[error("menu size k = {k} is invalid for n = {n}")]
    BadMenuSize { n: usize, k: usize },
    #[error("anchor item was never chosen in covering menu {menu}; retry the query")]
    AnchorUnseen { menu: usize },
    #[error("query needs at least one round per covering menu ({menus}), got {rounds}")]
    TooFewRounds { menus: usize, rounds: usize },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// The `k` items picked by `key` (smallest first), ties broken uniformly at random.
fn pick_k<R: Rng + ?Sized>(n: usize, k: usize, key: impl Fn(usize) -> i64, rng: &mut R) -> Menu {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.sort_by_key(|&i| key(i));
    idx.truncate(k);
    Menu::new(idx, n).expect("k distinct items")
}

/// The `k` least-chosen items so far.
pub fn uniform_pad_menu<R: Rng + ?Sized>(current: &Histogram, k: usize, rng: &mut R) -> Result<Menu, NavError> {
    let n = current.n();
    if k < 2 || k > n {
        return Err(NavError::BadMenuSize { n, k });
    }
    Ok(pick_k(n, k, |i| current.count(i) as i64, rng))
}

/// Target counts for a window of rounds, measured from the history at the window's start.
#[derive(Debug, Clone, Serialize)]
pub struct SteeringTarget {
    /// Target number of selections per item within the window.
    pub counts: Vec<u64>,
    pub window: u64,
    /// History counts when the window opened.
    pub base: Vec<u64>,
}

impl SteeringTarget {
    /// Round `window · x` to integers summing to `window` (largest remainder).
    pub fn from_distribution(x: &SimplexVector, window: u64, start: &Histogram) -> Self {
        let raw: Vec<f64> = x.coords().iter().map(|p| p * window as f64).collect();
        let mut counts: Vec<u64> = raw.iter().map(|r| r.floor() as u64).collect();
        let mut left = window - counts.iter().sum::<u64>().min(window);
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).partial_cmp(&(raw[a] - raw[a].floor())).unwrap().then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        SteeringTarget { counts, window, base: start.counts().to_vec() }
    }

    /// Window counts that bring the whole history to `x` after `window` more
    /// rounds. Items already above their share get zero and the rest is rescaled.
    pub fn toward(x: &SimplexVector, window: u64, current: &Histogram) -> Self {
        let total = (current.total() + window) as f64;
        let need: Vec<f64> = x.coords().iter().zip(current.counts()).map(|(p, &c)| (p * total - c as f64).max(0.0)).collect();
        let y = SimplexVector::from_weights(&need).unwrap_or_else(|_| x.clone());
        Self::from_distribution(&y, window, current)
    }

    /// Remaining selections per item, clamped at zero once met.
    pub fn deficits(&self, current: &Histogram) -> Vec<u64> {
        self.counts
            .iter()
            .zip(current.counts().iter().zip(&self.base))
            .map(|(&v, (&c, &b))| v.saturating_sub(c - b))
            .collect()
    }

    /// Whether `counts / window` lies in the l∞ ball that every dispersed model can reach.
    pub fn within_ball(&self, k: usize) -> bool {
        let n = self.counts.len();
        let rad = eird_ball_radius(n, k);
        // One count of slack for rounding.
        let slack = 1.0 / self.window as f64;
        self.counts.iter().all(|&c| (c as f64 / self.window as f64 - 1.0 / n as f64).abs() <= rad + slack)
    }
}

/// The `k` items with the largest remaining deficit; pads toward uniform once every deficit is met.
pub fn move_to_menu<R: Rng + ?Sized>(
    current: &Histogram,
    target: &SteeringTarget,
    k: usize,
    rng: &mut R,
) -> Result<Menu, NavError> {
    let n = current.n();
    if k < 2 || k > n {
        return Err(NavError::BadMenuSize { n, k });
    }
    let d = target.deficits(current);
    if d.iter().all(|&x| x == 0) {
        return uniform_pad_menu(current, k, rng);
    }
    Ok(pick_k(n, k, |i| -(d[i] as i64), rng))
}

/// Menus that each contain the anchor item (item 0) and together cover every item.
///
/// The last menu is padded with already-covered items when `n - 1` is not a
/// multiple of `k - 1`.
pub fn covering_menus(n: usize, k: usize) -> Result<Vec<Menu>, NavError> {
    if k < 2 || k > n {
        return Err(NavError::BadMenuSize { n, k });
    }
    let others: Vec<usize> = (1..n).collect();
    let mut menus = Vec::new();
    for chunk in others.chunks(k - 1) {
        let mut items = vec![0];
        items.extend_from_slice(chunk);
        let mut pad = 1;
        while items.len() < k {
            if !items.contains(&pad) {
                items.push(pad);
            }
            pad += 1;
        }
        menus.push(Menu::new(items, n)?);
    }
    Ok(menus)
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryResult {
    /// The memory vector the query was meant to measure.
    pub point: SimplexVector,
    /// Normalized score estimates.
    pub estimate: SimplexVector,
    pub rounds: usize,
    /// `t_query / (t_elapsed + t_query)`: how far the memory could move during the query.
    pub drift_bound: f64,
}

/// Round-by-round state of one query, for callers that drive the agent themselves.
#[derive(Debug, Clone)]
pub struct QuerySession {
    n: usize,
    menus: Vec<Menu>,
    /// Rounds assigned to each covering menu.
    quota: Vec<usize>,
    played: Vec<usize>,
    /// Per-menu choice tallies.
    tallies: Vec<Vec<u64>>,
    elapsed_before: u64,
}

impl QuerySession {
    /// `t_query` rounds split over the covering menus (remainder to the first one).
    pub fn new(n: usize, k: usize, t_query: usize, elapsed_before: u64) -> Result<Self, NavError> {
        let menus = covering_menus(n, k)?;
        let m = menus.len();
        if t_query < m {
            return Err(NavError::TooFewRounds { menus: m, rounds: t_query });
        }
        let mut quota = vec![t_query / m; m];
        quota[0] += t_query % m;
        Ok(QuerySession { n, tallies: vec![vec![0; n]; m], played: vec![0; m], menus, quota, elapsed_before })
    }

    pub fn menus(&self) -> &[Menu] {
        &self.menus
    }

    pub fn total_rounds(&self) -> usize {
        self.quota.iter().sum()
    }

    /// The menu to show next, or `None` once every quota is met.
    pub fn next_menu(&self) -> Option<(usize, &Menu)> {
        (0..self.menus.len()).find(|&j| self.played[j] < self.quota[j]).map(|j| (j, &self.menus[j]))
    }

    pub fn record(&mut self, menu: usize, item: usize) {
        self.played[menu] += 1;
        self.tallies[menu][item] += 1;
    }

    pub fn is_done(&self) -> bool {
        self.next_menu().is_none()
    }

    /// Turn the tallies into normalized score estimates.
    pub fn finish(&self, point: SimplexVector) -> Result<QueryResult, NavError> {
        let ratios = relative_scores(self.n, &self.menus, |j, i| self.tallies[j][i] as f64)?;
        let rounds = self.total_rounds();
        Ok(QueryResult {
            point,
            estimate: SimplexVector::from_weights(&ratios)?,
            rounds,
            drift_bound: rounds as f64 / (self.elapsed_before as f64 + rounds as f64),
        })
    }
}

/// Scores relative to the anchor, taking each item from the first menu it appears in.
fn relative_scores(n: usize, menus: &[Menu], freq: impl Fn(usize, usize) -> f64) -> Result<Vec<f64>, NavError> {
    let mut out = vec![f64::NAN; n];
    out[0] = 1.0;
    for (j, menu) in menus.iter().enumerate() {
        let anchor = freq(j, 0);
        if anchor <= 0.0 {
            return Err(NavError::AnchorUnseen { menu: j });
        }
        for &i in menu.items() {
            if out[i].is_nan() {
                out[i] = freq(j, i) / anchor;
            }
        }
    }
    Ok(out)
}

/// Play the covering menus against the agent for `t_query` rounds, updating its history.
pub fn run_query<M: PreferenceModel + ?Sized, R: Rng + ?Sized>(
    m: &M,
    history: &mut Histogram,
    point: &SimplexVector,
    t_query: usize,
    k: usize,
    rng: &mut R,
) -> Result<QueryResult, NavError> {
    let mut session = QuerySession::new(m.n(), k, t_query, history.total())?;
    while let Some((j, menu)) = session.next_menu() {
        let menu = menu.clone();
        let v = history.normalize().unwrap_or_else(|_| SimplexVector::uniform(m.n()));
        let item = sample_choice(m, &v, &menu, rng);
        history.record(item)?;
        session.record(j, item);
    }
    session.finish(point.clone())
}

/// Noise-free query at `point`: exact menu choice probabilities replace sampled tallies.
pub fn run_query_exact<M: PreferenceModel + ?Sized>(m: &M, point: &SimplexVector, k: usize) -> Result<QueryResult, NavError> {
    let n = m.n();
    let menus = covering_menus(n, k)?;
    let scores = m.evaluate(point).scores;
    let probs: Vec<Vec<f64>> = menus
        .iter()
        .map(|menu| {
            let mut p = vec![0.0; n];
            menu_probs(&scores, menu, &mut p);
            p
        })
        .collect();
    let ratios = relative_scores(n, &menus, |j, i| probs[j][i])?;
    Ok(QueryResult { point: point.clone(), estimate: SimplexVector::from_weights(&ratios)?, rounds: 0, drift_bound: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_types::derive_rng;
    use crate::preference_models::{BupModel, TabularOracleModel};

    #[test]
    fn pad_picks_smallest_counts() {
        let h = Histogram::from_counts(vec![5, 3, 3, 9]);
        let mut rng = derive_rng(1, 0);
        assert_eq!(uniform_pad_menu(&h, 2, &mut rng).unwrap().items(), &[1, 2]);
    }

    #[test]
    fn pad_ties_are_uniform() {
        let h = Histogram::new(4);
        let mut rng = derive_rng(2, 0);
        let mut counts = [0u32; 6];
        let cat = crate::core_types::enumerate_menus(4, 2).unwrap();
        let draws = 10_000;
        for _ in 0..draws {
            let m = uniform_pad_menu(&h, 2, &mut rng).unwrap();
            counts[cat.index_of(&m).unwrap()] += 1;
        }
        let e = draws as f64 / 6.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 5 degrees of freedom: the 0.999 quantile is 20.515.
        assert!(chi2 < 20.515, "chi2 {chi2}");
    }

    #[test]
    fn move_to_prefers_largest_deficits() {
        let start = Histogram::new(4);
        let target = SteeringTarget { counts: vec![10, 0, 2, 2], window: 14, base: vec![0; 4] };
        let mut rng = derive_rng(3, 0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let m = move_to_menu(&start, &target, 2, &mut rng).unwrap();
            seen.insert(m.items().to_vec());
        }
        let want: std::collections::HashSet<Vec<usize>> = [vec![0, 2], vec![0, 3]].into_iter().collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn move_to_uniform_matches_pad_on_deficits() {
        let h = Histogram::from_counts(vec![3, 1, 2, 0]);
        let target = SteeringTarget::from_distribution(&SimplexVector::uniform(4), 40, &h);
        let mut a = derive_rng(4, 0);
        let mut b = derive_rng(4, 0);
        let d = target.deficits(&h);
        let m = move_to_menu(&h, &target, 2, &mut a).unwrap();
        let inverted = Histogram::from_counts(d.iter().map(|x| 100 - x).collect());
        assert_eq!(m, uniform_pad_menu(&inverted, 2, &mut b).unwrap());
    }

    #[test]
    fn targets_round_to_the_window() {
        let x = SimplexVector::new(vec![0.3333, 0.3333, 0.3334]).unwrap();
        let t = SteeringTarget::from_distribution(&x, 10, &Histogram::new(3));
        assert_eq!(t.counts.iter().sum::<u64>(), 10);
    }

    #[test]
    fn covering_menu_layouts() {
        let m = covering_menus(5, 3).unwrap();
        assert_eq!(m.iter().map(|x| x.items().to_vec()).collect::<Vec<_>>(), vec![vec![0, 1, 2], vec![0, 3, 4]]);
        let m = covering_menus(6, 3).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[2].items(), &[0, 1, 5]);
    }

    #[test]
    fn exact_query_recovers_normalized_scores() {
        let m = BupModel::new(0.3, vec![vec![0.5, 0.4], vec![0.9, -0.5], vec![0.35], vec![0.6, 0.3], vec![0.8, -0.2]]).unwrap();
        let v = SimplexVector::new(vec![0.1, 0.3, 0.2, 0.2, 0.2]).unwrap();
        for k in 2..=5 {
            let q = run_query_exact(&m, &v, k).unwrap();
            let s = m.evaluate(&v).normalized();
            for i in 0..5 {
                assert!((q.estimate.get(i) - s[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_query_ignores_global_rescaling() {
        let base = BupModel::new(0.3, vec![vec![0.5, 0.4], vec![0.9, -0.5], vec![0.35], vec![0.6, 0.3]]).unwrap();
        let b2 = base.clone();
        let scaled = TabularOracleModel::new(4, 0.1, move |v| {
            let mut s = vec![0.0; 4];
            b2.scores_into(v, &mut s);
            s.iter().map(|x| (0.37 * x).clamp(0.0, 1.0)).collect()
        });
        let v = SimplexVector::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let a = run_query_exact(&base, &v, 2).unwrap();
        let b = run_query_exact(&scaled, &v, 2).unwrap();
        for i in 0..4 {
            assert!((a.estimate.get(i) - b.estimate.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_query_with_uniform_scores() {
        let m = BupModel::new(0.5, vec![vec![0.6]; 5]).unwrap();
        let mut h = Histogram::from_counts(vec![200; 5]);
        let mut rng = derive_rng(5, 0);
        let q = run_query(&m, &mut h, &SimplexVector::uniform(5), 100_000, 2, &mut rng).unwrap();
        assert_eq!(q.rounds, 100_000);
        assert_eq!(h.total(), 101_000);
        for i in 0..5 {
            assert!((q.estimate.get(i) - 0.2).abs() < 0.02);
        }
        assert!((q.drift_bound - 100_000.0 / 101_000.0).abs() < 1e-12);
    }

    #[test]
    fn move_to_avoids_met_items() {
        let mut rng = derive_rng(6, 0);
        let m = BupModel::new(0.5, vec![vec![0.6, 0.3], vec![0.9], vec![0.7], vec![0.55, 0.4]]).unwrap();
        let mut h = Histogram::from_counts(vec![10; 4]);
        let x = SimplexVector::new(vec![0.3, 0.2, 0.25, 0.25]).unwrap();
        let target = SteeringTarget::from_distribution(&x, 2000, &h);
        for _ in 0..2000 {
            let menu = move_to_menu(&h, &target, 2, &mut rng).unwrap();
            let d = target.deficits(&h);
            if d.iter().filter(|&&x| x > 0).count() >= 2 {
                assert!(menu.items().iter().all(|&i| d[i] > 0));
            }
            let v = h.normalize().unwrap();
            h.record(sample_choice(&m, &v, &menu, &mut rng)).unwrap();
        }
    }
}
