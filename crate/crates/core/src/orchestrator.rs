//! End-to-end episodes: pad, learn a hypothesis near uniform, then optimize
//! over the entropy set intersected with the hypothesis' IRD polytopes.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_types::{derive_rng, entropy_of, enumerate_menus, CoreError, Histogram, SimplexVector};
use crate::geometry_sets::{
    eird_ball_radius, from_chart, to_chart, DecisionSet, EntropySet, GeometryError, HullSet, ird_vertices,
};
use crate::local_learning::{
    expected_query_count, f_ll, fit, plan_queries, FitOptions, Hypothesis, LearnError, PlanOptions,
};
use crate::menu_solver::{solve_play_dist, MenuSolverError};
use crate::navigation::{covering_menus, move_to_menu, run_query_exact, uniform_pad_menu, NavError, QuerySession, SteeringTarget};
use crate::preference_models::{sample_choice, verify_dispersion, AnyModel, BupModel, Family, ModelError, PreferenceModel};
use crate::rcfkm_opt::{FkmConfig, FkmError, FkmState};
use crate::scenarios::{FeasibleMesh, RewardStream, ScenarioError};

pub const TRACE_SCHEMA: &str = "menugame-trace/1";
pub const REPORT_SCHEMA: &str = "menugame-report/1";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("horizon {horizon} too small: warm-up needs {t0} rounds, which must stay below half the horizon; use a larger horizon or override the phase lengths")]
    HorizonTooSmall { horizon: u64, t0: u64 },
    #[error("required query noise {noise:.3e} is below float precision")]
    BetaTooSmall { noise: f64 },
    #[error("reward {0} is outside [0, 1]")]
    RewardRange(f64),
    #[error("bad schedule: {0}")]
    Schedule(String),
    #[error("true model is not {lambda}-dispersed (score {worst} at item {item})")]
    NotDispersed { lambda: f64, worst: f64, item: usize },
    #[error("declared dispersion {lambda} is below k^2/n = {needed}")]
    DispersionTooLow { lambda: f64, needed: f64 },
    #[error("{phase} phase, round {t}: {source}")]
    Phase { phase: Phase, t: u64, source: Box<dyn std::error::Error + Send + Sync> },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl OrchestratorError {
    fn at<E: std::error::Error + Send + Sync + 'static>(phase: Phase, t: u64) -> impl FnOnce(E) -> Self {
        move |e| OrchestratorError::Phase { phase, t, source: Box::new(e) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pad,
    Move,
    Query,
    Fit,
    Optimize,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Phase::Pad => "pad",
            Phase::Move => "move",
            Phase::Query => "query",
            Phase::Fit => "fit",
            Phase::Optimize => "optimize",
        };
        f.write_str(s)
    }
}

/// Constants behind the phase lengths. `Default` is the desk profile, sized
/// so that horizons of 1e5..1e6 rounds finish learning; [`ScheduleConstants::worst_case`]
/// uses the analysis' constants, which need astronomically long horizons.
///
/// Every `Option` left as `None` is computed from the formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConstants {
    pub safety: f64,
    pub lipschitz: f64,
    /// Noise-to-error factor of the learner; `None` takes the family's bound.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_ll: Option<f64>,
    /// Steering-to-query error factor; `None` takes `8 L sqrt(n) k F_LL / λ`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_q: Option<f64>,
    /// Query noise as a multiple of ε; `None` takes `ε λ k / (n · safety)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_per_epsilon: Option<f64>,
    /// Multiplier on the concentration terms of the pad and move lengths.
    pub concentration: f64,
    /// Multiplier on the query length.
    pub query_scale: f64,
    /// Floor on query rounds per covering menu.
    pub min_query_per_menu: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_pad: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_move: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_query: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    /// Failure probabilities of the three warm-up phases; default `T^{-1/4}`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_pad: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_move: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_query: Option<f64>,
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        ScheduleConstants {
            safety: 2.0,
            lipschitz: 1.0,
            f_ll: Some(1.0),
            f_q: Some(1.0),
            beta_per_epsilon: Some(40.0),
            concentration: 0.1,
            query_scale: 0.03,
            min_query_per_menu: 10,
            t_pad: None,
            t_move: None,
            t_query: None,
            alpha: None,
            epsilon: None,
            delta: None,
            r: None,
            delta_pad: None,
            delta_move: None,
            delta_query: None,
        }
    }
}

impl ScheduleConstants {
    pub fn worst_case() -> Self {
        ScheduleConstants {
            f_ll: None,
            f_q: None,
            beta_per_epsilon: None,
            concentration: 32.0,
            query_scale: 1.0,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhaseSchedule {
    pub n: usize,
    pub k: usize,
    pub horizon: u64,
    pub family: Family,
    pub degree: usize,
    pub c: f64,
    pub lambda: f64,
    pub t_pad: u64,
    pub t_move: u64,
    pub t_query: u64,
    /// Number of learning queries.
    pub queries: u64,
    /// `t_pad + queries · (2 t_move + t_query)`.
    pub t0: u64,
    /// Optimize rounds, `horizon - t0`.
    pub t_star: u64,
    /// Query radius around uniform.
    pub alpha: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub r: f64,
    /// Declared per-coordinate query noise.
    pub beta: f64,
    pub f_ll: f64,
    pub f_q: f64,
    pub r_move: f64,
    pub delta_pad: f64,
    pub delta_move: f64,
    pub delta_query: f64,
    pub safety: f64,
}

impl PhaseSchedule {
    pub fn check(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Schedule(m));
        if self.t0 != self.t_pad + self.queries * (2 * self.t_move + self.t_query) {
            return bad("t0 does not match its phases".into());
        }
        if self.t0 >= self.horizon {
            return bad(format!("t0 = {} is not below the horizon {}", self.t0, self.horizon));
        }
        let alpha_cap = (self.k - 1) as f64 / (2 * self.n * (self.n - 1)) as f64 * self.r_move;
        if self.alpha > alpha_cap * (1.0 + 1e-12) {
            return bad(format!("alpha {} exceeds the move budget {}", self.alpha, alpha_cap));
        }
        if self.delta + self.epsilon >= self.r {
            return bad(format!("delta + epsilon = {} must stay below r = {}", self.delta + self.epsilon, self.r));
        }
        Ok(())
    }
}

/// Phase lengths and optimizer parameters for one episode.
#[allow(clippy::too_many_arguments)]
pub fn compute_schedule(
    n: usize,
    k: usize,
    horizon: u64,
    family: Family,
    degree: usize,
    c: f64,
    lambda: f64,
    consts: &ScheduleConstants,
) -> Result<PhaseSchedule, OrchestratorError> {
    if k < 2 || k > n || n < 3 {
        return Err(OrchestratorError::Schedule(format!("need 3 <= n and 2 <= k <= n, got n = {n}, k = {k}")));
    }
    if horizon < 64 {
        return Err(OrchestratorError::HorizonTooSmall { horizon, t0: 0 });
    }
    let (nf, kf, tf) = (n as f64, k as f64, horizon as f64);
    let r = consts.r.unwrap_or_else(|| eird_ball_radius(n, k));
    let quarter = tf.powf(-0.25);
    let delta_pad = consts.delta_pad.unwrap_or(quarter);
    let delta_move = consts.delta_move.unwrap_or(quarter);
    let delta_query = consts.delta_query.unwrap_or(quarter);
    let menus = covering_menus(n, k).map_err(|e| OrchestratorError::Schedule(e.to_string()))?.len() as u64;
    let move_denom = if 1.0 - 4.0 * kf / nf > 0.0 { 1.0 - 4.0 * kf / nf } else { 1.0 };

    let mut t_star = horizon - 1;
    let mut alpha = consts.alpha.unwrap_or((kf - 1.0) / (2.0 * nf * (nf - 1.0)) / 8.0);
    let mut out = None;
    for _ in 0..4 {
        let ts = (t_star.max(16)) as f64;
        let epsilon = consts.epsilon.unwrap_or(r / ts.powf(0.25));
        let delta = consts.delta.unwrap_or(f64::min(1.0 / ts.powf(0.25), 0.9 * r / ts.powf(0.25)));
        let queries = expected_query_count(family, n, degree, &PlanOptions::default(), alpha) as u64;
        let fll = consts.f_ll.unwrap_or_else(|| f_ll(family, n, degree, alpha, lambda, None));
        let fq = consts.f_q.unwrap_or(8.0 * consts.lipschitz * nf.sqrt() * kf * fll / lambda);
        let beta = match consts.beta_per_epsilon {
            Some(b) => b * epsilon,
            None => epsilon * lambda * kf / nf / consts.safety,
        };
        let q_noise = beta / fll;
        if !(q_noise >= 1e-15) {
            return Err(OrchestratorError::BetaTooSmall { noise: q_noise });
        }
        let sf = queries as f64;
        let t_query = consts.t_query.unwrap_or_else(|| {
            let log = (2.0 * nf * kf * sf / ((kf - 1.0) * delta_query)).ln();
            let raw = consts.query_scale * (2.0 * nf / (kf - 1.0)) / (q_noise * q_noise) * log;
            (raw.ceil() as u64).max(consts.min_query_per_menu * menus)
        });
        let conc = consts.concentration * nf * nf * fq * fq / (beta * beta);
        let t_pad = consts.t_pad.unwrap_or_else(|| {
            let a = 2.0 * fq * t_query as f64 / beta;
            let b = conc * (2.0 / delta_pad).ln();
            (a.max(b).ceil() as u64).max(n as u64)
        });
        let t_move = consts.t_move.unwrap_or_else(|| {
            let a = nf * (nf - 1.0) * t_query as f64 / (kf - 1.0);
            let b = conc * (4.0 * sf / delta_move).ln() / move_denom;
            (a.max(b).ceil() as u64).max(t_pad)
        });
        let t0 = t_pad.saturating_add(queries.saturating_mul(t_move.saturating_mul(2).saturating_add(t_query)));
        if t0.saturating_mul(2) >= horizon {
            return Err(OrchestratorError::HorizonTooSmall { horizon, t0 });
        }
        let r_move = t_move as f64 / t0 as f64;
        alpha = consts.alpha.unwrap_or((kf - 1.0) / (2.0 * nf * (nf - 1.0)) * r_move);
        t_star = horizon - t0;
        out = Some(PhaseSchedule {
            n,
            k,
            horizon,
            family,
            degree,
            c,
            lambda,
            t_pad,
            t_move,
            t_query,
            queries,
            t0,
            t_star,
            alpha,
            epsilon,
            delta,
            r,
            beta,
            f_ll: fll,
            f_q: fq,
            r_move,
            delta_pad,
            delta_move,
            delta_query,
            safety: consts.safety,
        });
    }
    let s = out.expect("loop runs");
    // The query count may depend on alpha; keep t0 consistent with the final plan.
    let queries = expected_query_count(family, n, degree, &PlanOptions::default(), s.alpha) as u64;
    if queries != s.queries {
        return Err(OrchestratorError::Schedule(format!("query count did not settle ({} vs {queries})", s.queries)));
    }
    s.check()?;
    Ok(s)
}

/// `φ = 1 - ρ`.
pub fn reward_to_loss(reward: f64) -> Result<f64, OrchestratorError> {
    if !(0.0..=1.0).contains(&reward) {
        return Err(OrchestratorError::RewardRange(reward));
    }
    Ok(1.0 - reward)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Estimates come from the agent's sampled choices.
    #[default]
    Sampled,
    /// The rounds are still played, but the fit uses exact choice probabilities.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeOptions {
    /// Most recent IRD sets kept in the decision set.
    pub window_cap: usize,
    /// Add a new IRD set only once the memory has moved this far (l∞) since the last one.
    pub ird_refresh: f64,
    pub query_mode: QueryMode,
    /// Mesh step of the benchmark oracle.
    pub mesh_step: f64,
    /// Random probe memories for the benchmark's EIRD test.
    pub probes: usize,
    /// Points on the regret curve.
    pub checkpoints: usize,
    /// Dispersion check sample count.
    pub dispersion_samples: usize,
    /// Chart point whose membership in the decision set is tracked every round.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monotonicity_probe: Option<Vec<f64>>,
    /// Keep the per-round records in memory (needed for traces).
    pub keep_records: bool,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            window_cap: 512,
            ird_refresh: 0.0,
            query_mode: QueryMode::Sampled,
            mesh_step: 0.05,
            probes: 200,
            checkpoints: 100,
            dispersion_samples: 2000,
            monotonicity_probe: None,
            keep_records: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub schema: u32,
    pub t: u64,
    pub phase: Phase,
    pub menu: Vec<usize>,
    pub item: usize,
    pub reward: f64,
    /// Loss passed to the optimizer (optimize rounds only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// FNV-1a of the history counts after the round.
    pub memory_digest: String,
    pub decision_sets: usize,
    /// Entropy of the memory after the round.
    pub entropy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CurvePoint {
    pub t: u64,
    pub reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regret: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisSource {
    Fitted,
    /// The fit's error bound was worse than assuming equal scores.
    ConstantFallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretReport {
    pub schema: String,
    pub horizon: u64,
    pub schedule: PhaseSchedule,
    pub phase_rounds: PhaseRounds,
    pub cumulative_reward: f64,
    pub cumulative_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub benchmark_point: Option<Vec<f64>>,
    /// Benchmark minus cumulative reward.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regret: Option<f64>,
    /// Cumulative loss minus the best mesh point's loss; equals `regret`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_regret: Option<f64>,
    pub benchmark_note: String,
    pub curve: Vec<CurvePoint>,
    pub final_distribution: Vec<f64>,
    pub final_entropy: f64,
    pub entropy_floor: f64,
    /// `final_entropy - entropy_floor`.
    pub entropy_margin: f64,
    pub hypothesis_source: HypothesisSource,
    pub epsilon_hat: f64,
    /// Error bound used for the perturbation budget.
    pub model_error: f64,
    pub fit_flags: Vec<String>,
    /// Share of optimize rounds whose perturbation bound stayed within ε.
    pub perturbation_within_epsilon: f64,
    pub max_play_residual: f64,
    pub ird_sets_added: usize,
    pub ird_sets_evicted: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monotonicity_violations: Option<usize>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct PhaseRounds {
    pub pad: u64,
    #[serde(rename = "move")]
    pub move_: u64,
    pub query: u64,
    pub optimize: u64,
}

impl PhaseRounds {
    pub fn total(&self) -> u64 {
        self.pad + self.move_ + self.query + self.optimize
    }
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub report: RegretReport,
    pub records: Vec<RoundRecord>,
    pub hypothesis: Option<Hypothesis>,
}

/// FNV-1a over the little-endian counts.
pub fn memory_digest(counts: &[u64]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for c in counts {
        for b in c.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}

/// Error bound of the equal-scores model against any model whose scores lie in `[λ, 1]`.
pub fn constant_model_error(n: usize, lambda: f64) -> f64 {
    let nf = n as f64;
    let up = 1.0 / (1.0 + (nf - 1.0) * lambda) - 1.0 / nf;
    let down = 1.0 / nf - lambda / (lambda + nf - 1.0);
    nf.sqrt() * up.max(down)
}

struct Game<'a, M: PreferenceModel + ?Sized> {
    truth: &'a M,
    rewards: &'a RewardStream,
    k: usize,
    history: Histogram,
    t: u64,
    reward_totals: Vec<f64>,
    cumulative_reward: f64,
    cumulative_loss: f64,
    rounds: PhaseRounds,
    records: Vec<RoundRecord>,
    keep: bool,
    rho: Vec<f64>,
    checkpoints: Vec<u64>,
    curve: Vec<(u64, f64, Vec<f64>)>,
}

impl<M: PreferenceModel + ?Sized> Game<'_, M> {
    fn memory(&self) -> SimplexVector {
        self.history.normalize().unwrap_or_else(|_| SimplexVector::uniform(self.truth.n()))
    }

    /// Play one round; returns the chosen item and its reward.
    fn play<R: rand::Rng + ?Sized>(
        &mut self,
        phase: Phase,
        menu: &crate::core_types::Menu,
        decision_sets: usize,
        rng: &mut R,
    ) -> Result<(usize, f64), OrchestratorError> {
        self.t += 1;
        let t = self.t;
        self.rewards.values_into(t, &self.history, &mut self.rho);
        let v = self.memory();
        let item = sample_choice(self.truth, &v, menu, rng);
        let reward = self.rho[item];
        let loss = reward_to_loss(reward).map_err(OrchestratorError::at(phase, t))?;
        self.history.record(item)?;
        for (a, b) in self.reward_totals.iter_mut().zip(&self.rho) {
            *a += b;
        }
        self.cumulative_reward += reward;
        self.cumulative_loss += loss;
        match phase {
            Phase::Pad => self.rounds.pad += 1,
            Phase::Move => self.rounds.move_ += 1,
            Phase::Query => self.rounds.query += 1,
            _ => self.rounds.optimize += 1,
        }
        if self.keep {
            let counts = self.history.counts();
            let total = self.history.total() as f64;
            let v_after: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
            self.records.push(RoundRecord {
                schema: 1,
                t,
                phase,
                menu: menu.items().to_vec(),
                item,
                reward,
                loss: (phase == Phase::Optimize).then_some(loss),
                memory_digest: memory_digest(counts),
                decision_sets,
                entropy: entropy_of(&v_after),
            });
        }
        if self.checkpoints.binary_search(&t).is_ok() {
            self.curve.push((t, self.cumulative_reward, self.reward_totals.clone()));
        }
        Ok((item, reward))
    }

    fn steer<R: rand::Rng + ?Sized>(&mut self, x: &SimplexVector, window: u64, rng: &mut R) -> Result<(), OrchestratorError> {
        let target = SteeringTarget::toward(x, window, &self.history);
        for _ in 0..window {
            let menu = move_to_menu(&self.history, &target, self.k, rng).map_err(OrchestratorError::at(Phase::Move, self.t + 1))?;
            self.play(Phase::Move, &menu, 0, rng)?;
        }
        Ok(())
    }
}

fn checkpoints(horizon: u64, count: usize) -> Vec<u64> {
    let count = (count.max(1) as u64).min(horizon.max(1));
    let mut v: Vec<u64> = (1..=count).map(|j| (horizon * j).div_ceil(count)).collect();
    v.dedup();
    v
}

/// One full episode against `truth`.
///
/// RNG streams derived from `seed`: 0 agent choices, 1 navigation ties,
/// 2 optimizer directions and menu draws, 3 benchmark probes and dispersion samples.
pub fn run_episode<M: PreferenceModel + ?Sized>(
    truth: &M,
    rewards: &RewardStream,
    schedule: &PhaseSchedule,
    options: &EpisodeOptions,
    seed: u64,
) -> Result<Episode, OrchestratorError> {
    schedule.check()?;
    let (n, k) = (schedule.n, schedule.k);
    if truth.n() != n || rewards.n != n {
        return Err(OrchestratorError::Schedule(format!(
            "item counts differ: schedule {n}, model {}, rewards {}",
            truth.n(),
            rewards.n
        )));
    }
    let needed = (k * k) as f64 / n as f64;
    if schedule.lambda < needed - 1e-12 {
        return Err(OrchestratorError::DispersionTooLow { lambda: schedule.lambda, needed });
    }
    let mut agent_rng = derive_rng(seed, 0);
    let mut nav_rng = derive_rng(seed, 1);
    let mut opt_rng = derive_rng(seed, 2);
    let mut probe_rng = derive_rng(seed, 3);
    let disp = verify_dispersion(truth, schedule.lambda, options.dispersion_samples, &mut probe_rng);
    if !disp.passed {
        return Err(OrchestratorError::NotDispersed { lambda: schedule.lambda, worst: disp.worst_score, item: disp.worst_item });
    }
    let catalog = enumerate_menus(n, k)?;
    let horizon = schedule.horizon;
    let mut notes = Vec::new();

    let mesh = if n <= crate::scenarios::ORACLE_MAX_N {
        let probes = crate::geometry_sets::default_probes(n, options.probes, &mut probe_rng);
        match FeasibleMesh::build(truth, k, schedule.c, options.mesh_step, probes) {
            Ok(m) if !m.points.is_empty() => Some(m),
            Ok(_) => {
                notes.push("benchmark unavailable: no mesh point is feasible".into());
                None
            }
            Err(e) => {
                notes.push(format!("benchmark unavailable: {e}"));
                None
            }
        }
    } else {
        notes.push(format!("benchmark unavailable: the mesh oracle handles n <= {}", crate::scenarios::ORACLE_MAX_N));
        None
    };

    let mut game = Game {
        truth,
        rewards,
        k,
        history: Histogram::new(n),
        t: 0,
        reward_totals: vec![0.0; n],
        cumulative_reward: 0.0,
        cumulative_loss: 0.0,
        rounds: PhaseRounds::default(),
        records: Vec::with_capacity(if options.keep_records { horizon as usize } else { 0 }),
        keep: options.keep_records,
        rho: vec![0.0; n],
        checkpoints: checkpoints(horizon, options.checkpoints),
        curve: Vec::new(),
    };

    // Pad.
    for _ in 0..schedule.t_pad {
        let menu = uniform_pad_menu(&game.history, k, &mut nav_rng).map_err(OrchestratorError::at(Phase::Pad, game.t + 1))?;
        game.play(Phase::Pad, &menu, 0, &mut agent_rng)?;
    }

    // Learn.
    let plan = plan_queries(schedule.family, n, schedule.degree, schedule.alpha)
        .map_err(OrchestratorError::at(Phase::Fit, game.t))?;
    if plan.len() as u64 != schedule.queries {
        return Err(OrchestratorError::Schedule(format!("plan has {} queries, schedule {}", plan.len(), schedule.queries)));
    }
    let uniform = SimplexVector::uniform(n);
    let mut answers = Vec::with_capacity(plan.len());
    for point in &plan.points {
        game.steer(point, schedule.t_move, &mut nav_rng)?;
        let at = game.t + 1;
        let mut session = QuerySession::new(n, k, schedule.t_query as usize, game.history.total())
            .map_err(OrchestratorError::at(Phase::Query, at))?;
        while let Some((j, menu)) = session.next_menu() {
            let menu = menu.clone();
            let (item, _) = game.play(Phase::Query, &menu, 0, &mut agent_rng)?;
            session.record(j, item);
        }
        let result = match options.query_mode {
            QueryMode::Sampled => session.finish(point.clone()),
            QueryMode::Exact => run_query_exact(truth, point, k),
        }
        .map_err(OrchestratorError::at(Phase::Query, game.t))?;
        answers.push(result.estimate.into_vec());
        game.steer(&uniform, schedule.t_move, &mut nav_rng)?;
    }
    // Exact answers carry no noise, so the declared level drops to zero.
    let beta = if options.query_mode == QueryMode::Exact { 0.0 } else { schedule.beta };
    let fit_opts = FitOptions { beta, lambda: schedule.lambda, safety: schedule.safety, threshold_constant: 10.0 };
    let fitted = fit(&plan, &answers, &fit_opts);
    let fallback_error = constant_model_error(n, schedule.lambda);
    let (hyp_model, source, epsilon_hat, model_error, flags, hypothesis): (AnyModel, _, _, _, _, _) = match fitted {
        Ok(h) if h.report.epsilon_hat <= fallback_error => {
            (h.model.clone(), HypothesisSource::Fitted, h.report.epsilon_hat, h.report.epsilon_hat, h.report.flags.clone(), Some(h))
        }
        other => {
            let (eh, flags, h) = match other {
                Ok(h) => (h.report.epsilon_hat, h.report.flags.clone(), Some(h)),
                Err(e) => (f64::INFINITY, vec![format!("fit failed: {e}")], None),
            };
            notes.push(format!(
                "fitted error bound {eh:.3e} exceeds the equal-scores bound {fallback_error:.3e}; optimizing with equal scores"
            ));
            let constant = BupModel::new(schedule.lambda.min(1.0), vec![vec![1.0]; n])
                .map_err(|e: ModelError| OrchestratorError::at(Phase::Fit, game.t)(e))?;
            (AnyModel::Bup(constant), HypothesisSource::ConstantFallback, eh, fallback_error, flags, h)
        }
    };
    debug_assert_eq!(game.t, schedule.t0);

    // Optimize.
    let entropy_set = EntropySet::new(n, schedule.c).map_err(OrchestratorError::at(Phase::Optimize, game.t))?;
    let set = DecisionSet::from_entropy(entropy_set).with_cap(options.window_cap);
    let diameter = 2f64.sqrt();
    let (eta, _) = crate::rcfkm_opt::default_schedule(schedule.t_star.max(16) as usize, diameter, n - 1, schedule.r)
        .map_err(OrchestratorError::at(Phase::Optimize, game.t))?;
    let config = FkmConfig {
        horizon: schedule.t_star as usize,
        dim: n - 1,
        eta,
        delta: schedule.delta,
        epsilon: schedule.epsilon,
        r: schedule.r,
        diameter,
        lipschitz: 1.0,
        seed,
    };
    let mut fkm = FkmState::new(config, set).map_err(OrchestratorError::at(Phase::Optimize, game.t))?;
    let mut last_refresh: Option<Vec<f64>> = None;
    let mut last_vertices: Option<Vec<Vec<f64>>> = None;
    let mut within = 0u64;
    let mut max_residual: f64 = 0.0;
    let mut added = 0usize;
    let mut probe_state: Option<bool> = None;
    let mut violations = 0usize;
    while game.t < horizon {
        let t = game.t + 1;
        let v = game.memory();
        let y = fkm.propose_action(&mut opt_rng);
        let target = from_chart(&y);
        let sol = solve_play_dist(&hyp_model, &v, &target, &catalog)
            .map_err(|e: MenuSolverError| OrchestratorError::at(Phase::Optimize, t)(e))?;
        max_residual = max_residual.max(sol.residual);
        if sol.residual + model_error <= schedule.epsilon {
            within += 1;
        }
        let menu = catalog.menu(sol.z.sample(&mut opt_rng)).clone();
        let sets = fkm.decision_set().len();
        let (_, reward) = game.play(Phase::Optimize, &menu, sets, &mut agent_rng)?;
        let v_now = game.memory().into_vec();
        let moved = last_refresh
            .as_ref()
            .map_or(f64::INFINITY, |l| l.iter().zip(&v_now).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        if moved >= options.ird_refresh {
            let p = ird_vertices(&hyp_model, &game.memory(), &catalog);
            let verts: Vec<Vec<f64>> = p.vertices.iter().map(|x| x.coords().to_vec()).collect();
            // An identical polytope adds nothing to the intersection.
            let same = last_vertices.as_ref().is_some_and(|l: &Vec<Vec<f64>>| {
                l.iter().flatten().zip(verts.iter().flatten()).all(|(a, b)| (a - b).abs() <= 1e-12)
            });
            if !same {
                fkm.decision_set_mut().add(Arc::new(HullSet::chart_ird(&p)));
                added += 1;
                last_vertices = Some(verts);
            }
            last_refresh = Some(v_now);
        }
        fkm.observe_loss(reward_to_loss(reward)?)
            .map_err(|e: FkmError| OrchestratorError::at(Phase::Optimize, t)(e))?;
        if let Some(probe) = &options.monotonicity_probe {
            let inside = fkm
                .decision_set()
                .contains(probe, 1e-9)
                .map_err(|e: GeometryError| OrchestratorError::at(Phase::Optimize, t)(e))?;
            if probe_state == Some(false) && inside {
                violations += 1;
            }
            probe_state = Some(inside);
        }
    }

    let final_v = game.memory().into_vec();
    let final_entropy = entropy_of(&final_v);
    let (benchmark, benchmark_point, loss_regret) = match &mesh {
        Some(mesh) => {
            let (i, b) = mesh.best(&game.reward_totals).expect("mesh is nonempty");
            // The same benchmark computed on losses: min over points of Σ_t (1 - ρ_t) · x.
            let neg_losses: Vec<f64> = game.reward_totals.iter().map(|r| -(horizon as f64 - r)).collect();
            let (_, neg_best) = mesh.best(&neg_losses).expect("mesh is nonempty");
            (Some(b), Some(mesh.points[i].clone()), Some(game.cumulative_loss + neg_best))
        }
        None => (None, None, None),
    };
    let curve = game
        .curve
        .iter()
        .map(|(t, got, totals)| {
            let bench = mesh.as_ref().and_then(|m| m.best(totals)).map(|(_, b)| b);
            CurvePoint { t: *t, reward: *got, benchmark: bench, regret: bench.map(|b| b - got) }
        })
        .collect();
    let opt_rounds = game.rounds.optimize.max(1) as f64;
    let report = RegretReport {
        schema: REPORT_SCHEMA.into(),
        horizon,
        schedule: schedule.clone(),
        phase_rounds: game.rounds,
        cumulative_reward: game.cumulative_reward,
        cumulative_loss: game.cumulative_loss,
        benchmark,
        benchmark_point,
        regret: benchmark.map(|b| b - game.cumulative_reward),
        loss_regret,
        benchmark_note: match &mesh {
            Some(m) => format!(
                "best of {} mesh points (step {}) with entropy >= c that pass the probe-based EIRD test",
                m.points.len(),
                m.step
            ),
            None => "benchmark unavailable".into(),
        },
        curve,
        final_distribution: final_v,
        final_entropy,
        entropy_floor: schedule.c,
        entropy_margin: final_entropy - schedule.c,
        hypothesis_source: source,
        epsilon_hat,
        model_error,
        fit_flags: flags,
        perturbation_within_epsilon: within as f64 / opt_rounds,
        max_play_residual: max_residual,
        ird_sets_added: added,
        ird_sets_evicted: fkm.decision_set().evicted(),
        monotonicity_violations: options.monotonicity_probe.as_ref().map(|_| violations),
        notes,
    };
    Ok(Episode { report, records: game.records, hypothesis })
}

/// Convenience: chart coordinates of a distribution, for probe points.
pub fn chart_point(x: &[f64]) -> Vec<f64> {
    to_chart(x)
}

pub fn write_trace<W: Write>(records: &[RoundRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace(text: &str) -> Result<Vec<RoundRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

pub fn write_report<W: Write>(report: &RegretReport, mut out: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut out, report)?;
    out.write_all(b"\n")?;
    out.flush()
}

impl From<LearnError> for OrchestratorError {
    fn from(e: LearnError) -> Self {
        OrchestratorError::Phase { phase: Phase::Fit, t: 0, source: Box::new(e) }
    }
}

impl From<NavError> for OrchestratorError {
    fn from(e: NavError) -> Self {
        OrchestratorError::Schedule(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_types::{tv_distance, SimplexVector};
    use crate::preference_models::TabularOracleModel;
    use crate::scenarios::RewardSpec;

    fn bup_truth() -> BupModel {
        BupModel::new(0.8, vec![vec![0.8, 0.2], vec![1.0, -0.2], vec![0.9], vec![0.85, 0.1], vec![0.95, -0.1]]).unwrap()
    }

    #[test]
    fn query_failure_probability_is_quarter_power() {
        let s = compute_schedule(5, 2, 10_000, Family::Bup, 1, 1.0, 0.8, &ScheduleConstants {
            t_pad: Some(100),
            t_move: Some(100),
            t_query: Some(40),
            ..Default::default()
        })
        .unwrap();
        assert!((s.delta_query - 0.1).abs() < 1e-12);
    }

    #[test]
    fn desk_schedule_at_one_million() {
        let s = compute_schedule(5, 2, 1_000_000, Family::Bup, 1, 0.8 * 5f64.ln(), 0.8, &ScheduleConstants::default())
            .unwrap();
        assert!(s.t0 < 500_000, "{s:?}");
        s.check().unwrap();
        assert_eq!(s.queries, 4);
        assert!((s.r - 0.05).abs() < 1e-15);
    }

    #[test]
    fn worst_case_constants_need_a_huge_horizon() {
        let e = compute_schedule(5, 2, 1_000_000, Family::Bup, 1, 1.0, 0.8, &ScheduleConstants::worst_case()).unwrap_err();
        assert!(matches!(e, OrchestratorError::HorizonTooSmall { .. }), "{e}");
    }

    #[test]
    fn small_horizon_is_rejected() {
        let e = compute_schedule(5, 2, 2_000, Family::Bup, 1, 1.0, 0.8, &ScheduleConstants::default()).unwrap_err();
        assert!(matches!(e, OrchestratorError::HorizonTooSmall { .. }));
    }

    #[test]
    fn loss_is_one_minus_reward() {
        assert_eq!(reward_to_loss(1.0).unwrap(), 0.0);
        assert_eq!(reward_to_loss(0.0).unwrap(), 1.0);
        assert!(reward_to_loss(1.5).is_err());
        assert!(reward_to_loss(f64::NAN).is_err());
    }

    fn small_schedule(horizon: u64) -> PhaseSchedule {
        compute_schedule(5, 2, horizon, Family::Bup, 1, 0.8 * 5f64.ln(), 0.8, &ScheduleConstants {
            t_pad: Some(500),
            t_move: Some(500),
            t_query: Some(200),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn equal_scores_and_zero_rewards_stay_uniform() {
        let truth = TabularOracleModel::new(5, 1.0, |_| vec![1.0; 5]);
        let rewards = RewardStream::new(RewardSpec::Zero, 5, 20_000).unwrap();
        let s = small_schedule(20_000);
        let ep = run_episode(&truth, &rewards, &s, &EpisodeOptions { keep_records: false, ..Default::default() }, 3).unwrap();
        let v = SimplexVector::new(ep.report.final_distribution.clone()).unwrap();
        assert!(tv_distance(&v, &SimplexVector::uniform(5)).unwrap() <= 0.05);
    }

    #[test]
    fn phases_account_for_every_round() {
        let truth = bup_truth();
        let rewards = RewardStream::new(
            RewardSpec::TwoPhase { first_item: 0, first_value: 0.6, second_item: 1, second_value: 1.0, switch_at: None },
            5,
            15_000,
        )
        .unwrap();
        let s = small_schedule(15_000);
        let ep = run_episode(&truth, &rewards, &s, &EpisodeOptions::default(), 11).unwrap();
        let r = &ep.report;
        assert_eq!(r.phase_rounds.total(), 15_000);
        assert_eq!(ep.records.len(), 15_000);
        assert_eq!(r.phase_rounds.pad + r.phase_rounds.move_ + r.phase_rounds.query, s.t0);
        assert!(ep.records.iter().enumerate().all(|(i, rec)| rec.t == i as u64 + 1));
        // Reward and loss accounting agree.
        let (reg, lreg) = (r.regret.unwrap(), r.loss_regret.unwrap());
        assert!((reg - lreg).abs() < 1e-6 * (1.0 + reg.abs()), "{reg} vs {lreg}");
        assert!((r.entropy_margin - (entropy_of(&r.final_distribution) - s.c)).abs() < 1e-12);
    }

    #[test]
    fn replay_is_bit_identical() {
        let truth = bup_truth();
        let rewards = RewardStream::new(RewardSpec::LeastChosen { value: 1.0 }, 5, 12_000).unwrap();
        let s = small_schedule(12_000);
        let run = || {
            let ep = run_episode(&truth, &rewards, &s, &EpisodeOptions::default(), 5).unwrap();
            let mut buf = Vec::new();
            write_trace(&ep.records, &mut buf).unwrap();
            buf
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(read_trace(std::str::from_utf8(&a).unwrap()).unwrap().len(), 12_000);
    }

    #[test]
    fn undispersed_truth_is_rejected() {
        let truth = TabularOracleModel::new(5, 0.5, |_| vec![0.5; 5]);
        let rewards = RewardStream::new(RewardSpec::Zero, 5, 12_000).unwrap();
        let s = small_schedule(12_000);
        assert!(matches!(
            run_episode(&truth, &rewards, &s, &EpisodeOptions::default(), 1),
            Err(OrchestratorError::NotDispersed { .. })
        ));
    }

    #[test]
    fn constant_model_error_is_zero_without_dispersion_gap() {
        assert!(constant_model_error(5, 1.0).abs() < 1e-15);
        assert!(constant_model_error(5, 0.8) > 0.0);
    }
}
