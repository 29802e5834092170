//! Reward streams, scenario configuration, the mesh benchmark oracle, and the
//! two linear-regret constructions.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_types::{
    derive_rng, dot, entropy_of, enumerate_menus, simplex_grid, CoreError, Histogram, SimplexVector,
};
use crate::geometry_sets::{default_probes, ird_vertices, EirdProbeSet, DEFAULT_RANDOM_PROBES, EIRD_TOL};
use crate::menu_solver::solve_play_dist;
use crate::orchestrator::{EpisodeOptions, ScheduleConstants};
use crate::preference_models::{
    build_lower_bound_model, menu_probs, sample_choice, AnyModel, Family, ModelError, ModelFile, PreferenceModel,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Config(String),
    #[error("reward {value} for item {item} at round {t} is outside [0, 1]")]
    RewardRange { t: u64, item: usize, value: f64 },
    #[error("mesh with step {step} over {n} items has {points} points (limit {limit})")]
    MeshTooLarge { n: usize, step: f64, points: u128, limit: u128 },
    #[error("oracle needs n <= {max}, got {n}")]
    TooManyItems { n: usize, max: usize },
    #[error("no mesh point satisfies the constraints")]
    Infeasible,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Per-round reward vectors over items, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    Zero,
    Constant {
        values: Vec<f64>,
    },
    /// `first_value` on `first_item` through round `switch_at` (default: half the
    /// horizon), then `second_value` on `second_item`; every other item gets 0.
    TwoPhase {
        first_item: usize,
        first_value: f64,
        second_item: usize,
        second_value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        switch_at: Option<u64>,
    },
    /// Row `t - 1` at round `t`, cycling when the table is shorter than the horizon.
    Table {
        rows: Vec<Vec<f64>>,
    },
    /// Adaptive stub: rewards the item chosen least often so far (ties to the
    /// lowest index). Sees only the public history.
    LeastChosen {
        value: f64,
    },
}

/// A validated reward spec bound to `n` items and a horizon.
#[derive(Debug, Clone)]
pub struct RewardStream {
    pub spec: RewardSpec,
    pub n: usize,
    pub horizon: u64,
}

impl RewardStream {
    pub fn new(spec: RewardSpec, n: usize, horizon: u64) -> Result<Self, ScenarioError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match &spec {
            RewardSpec::Zero => true,
            RewardSpec::Constant { values } => values.len() == n && values.iter().all(|&v| unit(v)),
            RewardSpec::TwoPhase { first_item, first_value, second_item, second_value, .. } => {
                *first_item < n && *second_item < n && unit(*first_value) && unit(*second_value)
            }
            RewardSpec::Table { rows } => {
                !rows.is_empty() && rows.iter().all(|r| r.len() == n && r.iter().all(|&v| unit(v)))
            }
            RewardSpec::LeastChosen { value } => unit(*value),
        };
        if !ok {
            return Err(ScenarioError::Config(format!("reward spec {spec:?} is invalid for n = {n} (values must lie in [0, 1])")));
        }
        Ok(RewardStream { spec, n, horizon })
    }

    /// Reward of every item at round `t` (1-based), given the history before the round.
    pub fn values_into(&self, t: u64, history: &Histogram, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match &self.spec {
            RewardSpec::Zero => {}
            RewardSpec::Constant { values } => out.copy_from_slice(values),
            RewardSpec::TwoPhase { first_item, first_value, second_item, second_value, switch_at } => {
                if t <= switch_at.unwrap_or(self.horizon / 2) {
                    out[*first_item] = *first_value;
                } else {
                    out[*second_item] = *second_value;
                }
            }
            RewardSpec::Table { rows } => out.copy_from_slice(&rows[((t - 1) % rows.len() as u64) as usize]),
            RewardSpec::LeastChosen { value } => {
                let i = (0..self.n).min_by_key(|&i| history.count(i)).unwrap_or(0);
                out[i] = *value;
            }
        }
    }

    pub fn values(&self, t: u64, history: &Histogram) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.values_into(t, history, &mut out);
        out
    }
}

/// One fully specified episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub k: usize,
    pub horizon: u64,
    /// Entropy floor in nats.
    pub c: f64,
    pub seed: u64,
    /// Family the learner fits.
    pub family: Family,
    pub degree: usize,
    /// Declared dispersion of the agent; defaults to `k² / n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Path to a JSON model file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<AnyModel>,
    pub rewards: RewardSpec,
    #[serde(default)]
    pub schedule: ScheduleConstants,
    #[serde(default)]
    pub episode: EpisodeOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.k < 2 || self.k > self.n {
            return Err(ScenarioError::Config(format!("need 2 <= k <= n, got k = {}, n = {}", self.k, self.n)));
        }
        if self.model.is_some() == self.model_file.is_some() {
            return Err(ScenarioError::Config("give exactly one of `model` and `model_file`".into()));
        }
        if !(self.c >= 0.0 && self.c < (self.n as f64).ln()) {
            return Err(ScenarioError::Config(format!("entropy floor {} must lie in [0, ln n)", self.c)));
        }
        RewardStream::new(self.rewards.clone(), self.n, self.horizon)?;
        Ok(())
    }

    pub fn declared_lambda(&self) -> f64 {
        self.lambda.unwrap_or((self.k * self.k) as f64 / self.n as f64)
    }

    /// The agent's true model; `base` resolves a relative `model_file`.
    pub fn load_model(&self, base: Option<&Path>) -> Result<AnyModel, ScenarioError> {
        let m = match (&self.model, &self.model_file) {
            (Some(m), _) => {
                m.validate()?;
                m.clone()
            }
            (None, Some(f)) => {
                let path = base.map(|b| b.join(f)).unwrap_or_else(|| f.into());
                let text = std::fs::read_to_string(&path)
                    .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
                ModelFile::from_text(&text)?.model
            }
            (None, None) => return Err(ScenarioError::Config("no model given".into())),
        };
        if m.n() != self.n {
            return Err(ScenarioError::Config(format!("model has n = {}, config n = {}", m.n(), self.n)));
        }
        Ok(m)
    }
}

/// Largest `n` the mesh oracle accepts.
pub const ORACLE_MAX_N: usize = 6;
/// Largest mesh the oracle enumerates.
pub const MESH_LIMIT: u128 = 2_000_000;

/// Mesh points of the simplex that pass the entropy floor and the probe-based
/// EIRD test, for reuse across many linear objectives.
#[derive(Debug, Clone)]
pub struct FeasibleMesh {
    pub step: f64,
    pub c: f64,
    pub points: Vec<Vec<f64>>,
    /// Entropy margin and largest probe distance of each kept point.
    pub margins: Vec<f64>,
    pub probe_distances: Vec<f64>,
}

impl FeasibleMesh {
    pub fn build<M: PreferenceModel + ?Sized>(
        m: &M,
        k: usize,
        c: f64,
        step: f64,
        probes: Vec<SimplexVector>,
    ) -> Result<Self, ScenarioError> {
        let n = m.n();
        if n > ORACLE_MAX_N {
            return Err(ScenarioError::TooManyItems { n, max: ORACLE_MAX_N });
        }
        let steps = (1.0 / step).round() as usize;
        let count = crate::core_types::binomial(steps + n - 1, n - 1);
        if steps == 0 || count > MESH_LIMIT {
            return Err(ScenarioError::MeshTooLarge { n, step, points: count, limit: MESH_LIMIT });
        }
        let catalog = enumerate_menus(n, k)?;
        let probe_set = EirdProbeSet::new(m, probes, &catalog);
        let mut out = FeasibleMesh { step, c, points: Vec::new(), margins: Vec::new(), probe_distances: Vec::new() };
        for x in simplex_grid(n, steps) {
            let margin = entropy_of(&x) - c;
            if margin < 0.0 || !probe_set.contains(&x, EIRD_TOL) {
                continue;
            }
            out.margins.push(margin);
            out.probe_distances.push(probe_set.check(&x).max_distance);
            out.points.push(x);
        }
        Ok(out)
    }

    /// Index and value of the best point for the linear objective `weights · x`.
    pub fn best(&self, weights: &[f64]) -> Option<(usize, f64)> {
        self.points
            .iter()
            .enumerate()
            .map(|(i, x)| (i, dot(weights, x)))
            .fold(None, |acc, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub point: Vec<f64>,
    pub mesh_step: f64,
    pub objective: f64,
    pub entropy_margin: f64,
    /// Largest distance from the point to a probe's IRD polytope.
    pub max_probe_distance: f64,
    pub feasible_points: usize,
}

/// Best mesh point of `{H ≥ c} ∩ EIRD` (probe estimate) for total per-item rewards `reward_totals`.
pub fn oracle_best_point<M: PreferenceModel + ?Sized>(
    m: &M,
    k: usize,
    c: f64,
    reward_totals: &[f64],
    mesh_step: f64,
    seed: u64,
) -> Result<OracleResult, ScenarioError> {
    let mut rng = derive_rng(seed, 3);
    let mesh = FeasibleMesh::build(m, k, c, mesh_step, default_probes(m.n(), DEFAULT_RANDOM_PROBES, &mut rng))?;
    oracle_on_mesh(&mesh, reward_totals)
}

pub fn oracle_on_mesh(mesh: &FeasibleMesh, reward_totals: &[f64]) -> Result<OracleResult, ScenarioError> {
    let (i, objective) = mesh.best(reward_totals).ok_or(ScenarioError::Infeasible)?;
    Ok(OracleResult {
        point: mesh.points[i].clone(),
        mesh_step: mesh.step,
        objective,
        entropy_margin: mesh.margins[i],
        max_probe_distance: mesh.probe_distances[i],
        feasible_points: mesh.points.len(),
    })
}

/// Fixed policies run against the linear-regret constructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Each round, the menu with the largest expected reward this round.
    GreedyMyopic,
    /// The single menu that is best for the opening rewards, played throughout.
    BestFixedMenuDistribution,
    /// Steer toward the best point of the benchmark set for the rewards seen so far.
    OracleIrdChaser,
}

impl Strategy {
    pub const ALL: [Strategy; 3] =
        [Strategy::GreedyMyopic, Strategy::BestFixedMenuDistribution, Strategy::OracleIrdChaser];
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy-myopic" => Ok(Strategy::GreedyMyopic),
            "best-fixed-menu-distribution" => Ok(Strategy::BestFixedMenuDistribution),
            "oracle-ird-chaser" => Ok(Strategy::OracleIrdChaser),
            _ => Err(format!("unknown strategy '{s}'")),
        }
    }
}

/// Parameters of a linear-regret construction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LowerBoundParams {
    pub which: u8,
    pub n: usize,
    pub lambda: f64,
    /// Gap parameter of construction 2.
    pub eps: f64,
    /// Opening reward.
    pub alpha: f64,
    /// Closing reward (construction 2 also charges `-beta` off the target items).
    pub beta: f64,
}

impl LowerBoundParams {
    pub fn default_for(which: u8) -> Self {
        match which {
            // beta >= 22 alpha makes both cases of the argument linear.
            1 => LowerBoundParams { which, n: 6, lambda: 0.05, eps: 0.1, alpha: 0.04, beta: 0.9 },
            _ => LowerBoundParams { which, n: 4, lambda: 0.05, eps: 0.1, alpha: 0.1, beta: 0.9 },
        }
    }

    /// Round after which the rewards switch.
    pub fn switch_round(&self, horizon: u64) -> u64 {
        if self.which == 1 {
            horizon / 2
        } else {
            2 * horizon / 3
        }
    }

    /// Raw reward vector at round `t` (may be negative for construction 2).
    pub fn raw_rewards(&self, t: u64, horizon: u64) -> Vec<f64> {
        let mut r = vec![0.0; self.n];
        let late = t > self.switch_round(horizon);
        if self.which == 1 {
            if late {
                r[1] = self.beta;
            } else {
                r[0] = self.alpha;
            }
        } else if late {
            r.iter_mut().for_each(|x| *x = -self.beta);
            r[1] = 0.0;
            r[2] = self.beta;
        } else {
            r[0] = self.alpha;
            r[1] = self.alpha;
        }
        r
    }

    /// `(lo, width)` of the affine map onto `[0, 1]`.
    pub fn reward_scale(&self) -> (f64, f64) {
        if self.which == 1 {
            (0.0, 1.0)
        } else {
            (-self.beta, self.alpha.max(self.beta) + self.beta)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LowerBoundResult {
    pub which: u8,
    pub strategy: Strategy,
    pub horizon: u64,
    pub benchmark_label: String,
    /// In the construction's original reward units.
    pub benchmark: f64,
    pub reward: f64,
    pub regret: f64,
    /// `(t, regret so far)` at evenly spaced checkpoints.
    pub curve: Vec<(u64, f64)>,
}

fn expected_reward(scores: &[f64], menu: &crate::core_types::Menu, r: &[f64], buf: &mut [f64]) -> f64 {
    menu_probs(scores, menu, buf);
    dot(buf, r)
}

/// Expected total reward of always showing one menu, following the mean-field memory path.
fn mean_field_menu_value<M: PreferenceModel + ?Sized>(
    m: &M,
    menu: &crate::core_types::Menu,
    horizon: u64,
    rewards: impl Fn(u64) -> Vec<f64>,
) -> f64 {
    let n = m.n();
    let mut counts = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let mut total = 0.0;
    for t in 1..=horizon {
        let v: Vec<f64> =
            if t == 1 { vec![1.0 / n as f64; n] } else { counts.iter().map(|c| c / (t - 1) as f64).collect() };
        let s = m.evaluate_point(&v).scores;
        total += expected_reward(&s, menu, &rewards(t), &mut buf);
        counts.iter_mut().zip(&buf).for_each(|(c, p)| *c += p);
    }
    total
}

/// Simulate a fixed strategy on construction `params.which` and report regret
/// against the construction's benchmark. Rewards are rescaled to `[0, 1]` for
/// the simulation; the reported numbers are in the original units. Per-round
/// reward is the expected reward of the shown menu, which removes choice noise
/// from the accounting but not from the memory path.
pub fn run_lower_bound_scenario<R: Rng + ?Sized>(
    params: &LowerBoundParams,
    horizon: u64,
    strategy: Strategy,
    rng: &mut R,
) -> Result<LowerBoundResult, ScenarioError> {
    let n = params.n;
    let k = 2;
    let model = build_lower_bound_model(params.which, n, params.lambda, params.eps)?;
    let catalog = enumerate_menus(n, k)?;
    let (lo, width) = params.reward_scale();
    let scaled = |t: u64| -> Vec<f64> { params.raw_rewards(t, horizon).iter().map(|r| (r - lo) / width).collect() };
    let uniform = SimplexVector::uniform(n);

    // Benchmark, on the scaled rewards.
    let (benchmark, label) = if params.which == 1 {
        let mut totals = vec![0.0; n];
        let sw = params.switch_round(horizon);
        for (t0, t1) in [(1, sw), (sw + 1, horizon)] {
            if t1 >= t0 {
                let r = scaled(t1);
                totals.iter_mut().zip(&r).for_each(|(a, b)| *a += b * (t1 - t0 + 1) as f64);
            }
        }
        let ird = ird_vertices(&model, &uniform, &catalog);
        let best = ird.vertices.iter().map(|p| dot(p.coords(), &totals)).fold(f64::NEG_INFINITY, f64::max);
        (if horizon == 0 { 0.0 } else { best }, "best item distribution in IRD(uniform)".to_string())
    } else {
        let best = catalog
            .menus()
            .iter()
            .map(|menu| mean_field_menu_value(&model, menu, horizon, &scaled))
            .fold(f64::NEG_INFINITY, f64::max);
        (if horizon == 0 { 0.0 } else { best }, "best single menu (mean-field)".to_string())
    };

    let fixed_menu = if strategy == Strategy::BestFixedMenuDistribution {
        let opening = scaled(1);
        let j = (0..catalog.len())
            .map(|j| (j, mean_field_menu_value(&model, catalog.menu(j), horizon, |_| opening.clone())))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
            .0;
        Some(j)
    } else {
        None
    };
    let ird_uniform = ird_vertices(&model, &uniform, &catalog);

    let mut history = Histogram::new(n);
    let mut buf = vec![0.0; n];
    let mut seen = vec![0.0; n];
    let mut reward = 0.0;
    let every = (horizon / 100).max(1);
    let mut curve = Vec::new();
    for t in 1..=horizon {
        let v = history.normalize().unwrap_or_else(|_| uniform.clone());
        let r = scaled(t);
        seen.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        let scores = model.evaluate(&v).scores;
        let menu_idx = match strategy {
            Strategy::GreedyMyopic => (0..catalog.len())
                .map(|j| (j, expected_reward(&scores, catalog.menu(j), &r, &mut buf)))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                .0,
            Strategy::BestFixedMenuDistribution => fixed_menu.unwrap_or(0),
            Strategy::OracleIrdChaser => {
                let target = ird_uniform
                    .vertices
                    .iter()
                    .max_by(|a, b| dot(a.coords(), &seen).partial_cmp(&dot(b.coords(), &seen)).unwrap())
                    .expect("catalog is nonempty");
                let sol = solve_play_dist(&model, &v, target.coords(), &catalog).expect("catalog matches model");
                sol.z.sample(rng)
            }
        };
        let menu = catalog.menu(menu_idx);
        reward += expected_reward(&scores, menu, &r, &mut buf);
        history.record(sample_choice(&model, &v, menu, rng))?;
        if t % every == 0 || t == horizon {
            curve.push((t, reward));
        }
    }
    // The running benchmark is only defined at the horizon; report reward so far
    // against the benchmark's pro-rata share for the curve.
    let curve = curve
        .into_iter()
        .map(|(t, got)| (t, (benchmark * t as f64 / horizon as f64 - got) * width))
        .collect();
    Ok(LowerBoundResult {
        which: params.which,
        strategy,
        horizon,
        benchmark_label: label,
        benchmark: benchmark * width + lo * horizon as f64,
        reward: reward * width + lo * horizon as f64,
        regret: (benchmark - reward) * width,
        curve,
    })
}
