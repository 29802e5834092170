use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use menugame_core::core_types::{derive_rng, dot, enumerate_menus, norm, random_simplex, SimplexVector};
use menugame_core::geometry_sets::{
    default_probes, eird_ball_radius, high_entropy_containment, Ball, DecisionSet, EirdProbeSet, DEFAULT_RANDOM_PROBES,
};
use menugame_core::local_learning::{exact_answers, fit, hypothesis_error, noisy_answers, plan_queries, FitOptions};
use menugame_core::orchestrator::{compute_schedule, read_trace, run_episode, write_report, write_trace};
use menugame_core::preference_models::{random_bmlp, random_bup, AnyModel, Family, ModelFile, PreferenceModel};
use menugame_core::rcfkm_opt::{default_schedule, sample_unit_sphere, FkmConfig, FkmState};
use menugame_core::scenarios::{run_lower_bound_scenario, LowerBoundParams, RewardStream, ScenarioConfig, Strategy};

type CliResult = Result<(), Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "menugame", version, about = "Menu recommendation against history-dependent agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full episode from a scenario config and write its trace and report.
    Simulate(SimulateArgs),
    /// Fit a hypothesis from local queries and report its accuracy.
    Learn(LearnArgs),
    /// Probe-based EIRD membership of a point, or the high-entropy containment radius.
    Eird(EirdArgs),
    /// Regret of the fixed strategies on the linear-regret constructions.
    Lowerbound(LowerboundArgs),
    /// Run the bandit optimizer on a static ball with a linear loss.
    Optimize(OptimizeArgs),
    /// Turn JSONL traces into a CSV of per-round reward and entropy.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`, then `menugame-out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Where a model comes from: a file, or a seeded random instance.
#[derive(Args)]
struct ModelArgs {
    /// JSON model file.
    #[arg(long, conflicts_with = "family")]
    model: Option<PathBuf>,
    /// Random instance of this family (bup or bmlp).
    #[arg(long)]
    family: Option<Family>,
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Degree for BUP instances and for the fit.
    #[arg(long = "d", default_value_t = 1)]
    degree: usize,
    /// Dispersion of a random instance.
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn load(&self) -> Result<AnyModel, Box<dyn std::error::Error>> {
        if let Some(path) = &self.model {
            return Ok(ModelFile::from_text(&read(path)?)?.model);
        }
        let mut rng = derive_rng(self.seed, 10);
        match self.family {
            Some(Family::Bup) => Ok(AnyModel::Bup(random_bup(self.n, self.degree, self.lambda, &mut rng)?)),
            Some(Family::Bmlp) => Ok(AnyModel::Bmlp(random_bmlp(self.n, self.lambda, &mut rng)?)),
            Some(f) => Err(format!("no random generator for family {f}; pass --model").into()),
            None => Err("give --model or --family".into()),
        }
    }
}

#[derive(Args)]
struct LearnArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Noise-free answers.
    #[arg(long)]
    exact: bool,
    /// Query noise level when not exact.
    #[arg(long, default_value_t = 1e-6)]
    beta: f64,
    /// Query radius around uniform.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Random points used to measure the true error.
    #[arg(long, default_value_t = 500)]
    grid: usize,
    /// Write the fitted hypothesis here.
    #[arg(long)]
    write_model: Option<PathBuf>,
}

#[derive(Args)]
struct EirdArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Comma-separated distribution to test; without it, runs the containment sweep.
    #[arg(long, value_delimiter = ',')]
    point: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_RANDOM_PROBES)]
    probes: usize,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    /// Entropy gap below ln n for the containment sweep.
    #[arg(long, default_value_t = 0.05)]
    gap: f64,
    #[arg(long, default_value_t = 0.5)]
    bound: f64,
}

#[derive(Args)]
struct LowerboundArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    which: u8,
    #[arg(long, default_value_t = 40_000)]
    horizon: u64,
    /// One strategy name, or all three when omitted.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, default_value_t = 10_000)]
    horizon: usize,
    /// Size of the injected action perturbation.
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// One or more JSONL traces.
    #[arg(long, required = true, num_args = 1..)]
    trace: Vec<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String, Box<dyn std::error::Error>> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn print_json(v: &serde_json::Value) {
    let text = serde_json::to_string_pretty(v).expect("json values always serialize");
    // A closed stdout (e.g. piped into `head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn simulate(args: &SimulateArgs) -> CliResult {
    let cfg = ScenarioConfig::from_toml(&read(&args.config)?)?;
    let truth = cfg.load_model(args.config.parent())?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let rewards = RewardStream::new(cfg.rewards.clone(), cfg.n, cfg.horizon)?;
    let schedule =
        compute_schedule(cfg.n, cfg.k, cfg.horizon, cfg.family, cfg.degree, cfg.c, cfg.declared_lambda(), &cfg.schedule)?;
    let episode = run_episode(&truth, &rewards, &schedule, &cfg.episode, seed)?;

    let out = args.out.clone().or_else(|| cfg.output_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| "menugame-out".into());
    fs::create_dir_all(&out)?;
    write_trace(&episode.records, BufWriter::new(fs::File::create(out.join("trace.jsonl"))?))?;
    write_report(&episode.report, BufWriter::new(fs::File::create(out.join("report.json"))?))?;
    if let Some(h) = &episode.hypothesis {
        fs::write(out.join("hypothesis.json"), h.to_model_file().to_text())?;
    }
    let r = &episode.report;
    print_json(&json!({
        "scenario": cfg.name,
        "seed": seed,
        "out": out.display().to_string(),
        "t0": schedule.t0,
        "cumulative_reward": r.cumulative_reward,
        "benchmark": r.benchmark,
        "regret": r.regret,
        "final_entropy": r.final_entropy,
        "entropy_floor": r.entropy_floor,
        "hypothesis_source": r.hypothesis_source,
        "epsilon_hat": r.epsilon_hat,
    }));
    Ok(())
}

fn learn(args: &LearnArgs) -> CliResult {
    let truth = args.model.load()?;
    let n = truth.n();
    let degree = match &truth {
        AnyModel::Bup(m) if args.model.model.is_some() => m.degree(),
        AnyModel::Bmlp(m) if args.model.model.is_some() => m.degree() as usize,
        AnyModel::Bmlp(_) => 1,
        _ => args.model.degree,
    };
    let plan = plan_queries(truth.family(), n, degree, args.alpha)?;
    let beta = if args.exact { 0.0 } else { args.beta };
    let mut rng = derive_rng(args.model.seed, 11);
    let answers = if args.exact { exact_answers(&truth, &plan) } else { noisy_answers(&truth, &plan, beta, &mut rng) };
    let opts = FitOptions { beta, lambda: truth.lambda(), ..FitOptions::default() };
    let h = fit(&plan, &answers, &opts)?;
    let grid: Vec<SimplexVector> = (0..args.grid).map(|_| random_simplex(n, &mut rng)).collect();
    let measured = hypothesis_error(&h, &truth, &grid);
    if let Some(path) = &args.write_model {
        fs::write(path, h.to_model_file().to_text())?;
    }
    print_json(&json!({
        "family": truth.family(),
        "n": n,
        "degree": degree,
        "queries": plan.len(),
        "beta": beta,
        "epsilon_hat": h.report.epsilon_hat,
        "measured_error": measured,
        "node_residual": h.report.node_residual,
        "flags": h.report.flags,
    }));
    Ok(())
}

fn eird(args: &EirdArgs) -> CliResult {
    let m = args.model.load()?;
    let n = m.n();
    let catalog = enumerate_menus(n, args.k)?;
    let mut rng = derive_rng(args.model.seed, 12);
    let probes = default_probes(n, args.probes, &mut rng);
    match &args.point {
        Some(p) => {
            let x = SimplexVector::from_numeric(p)?;
            if x.n() != n {
                return Err(format!("point has {} coordinates, model has {n} items", x.n()).into());
            }
            let report = EirdProbeSet::new(&m, probes, &catalog).check(x.coords());
            print_json(&json!({ "point": x.coords(), "report": report }));
        }
        None => {
            let report = high_entropy_containment(&m, &catalog, probes, args.samples, args.gap, args.bound, &mut rng);
            print_json(&json!({ "ball_radius": eird_ball_radius(n, args.k), "containment": report }));
        }
    }
    Ok(())
}

fn lowerbound(args: &LowerboundArgs) -> CliResult {
    let params = LowerBoundParams::default_for(args.which);
    let strategies: Vec<Strategy> = args.strategy.map_or(Strategy::ALL.to_vec(), |s| vec![s]);
    let mut rows = Vec::new();
    for s in strategies {
        let full = run_lower_bound_scenario(&params, args.horizon, s, &mut derive_rng(args.seed, 20))?;
        let half = run_lower_bound_scenario(&params, args.horizon / 2, s, &mut derive_rng(args.seed, 21))?;
        rows.push(json!({
            "strategy": s,
            "benchmark": full.benchmark_label,
            "regret": full.regret,
            "regret_half": half.regret,
            "ratio": full.regret / half.regret,
        }));
    }
    print_json(&json!({ "which": args.which, "horizon": args.horizon, "params": params, "results": rows }));
    Ok(())
}

fn optimize(args: &OptimizeArgs) -> CliResult {
    let (dim, t_max) = (args.dim, args.horizon);
    let r = 1.0;
    let (eta, delta) = default_schedule(t_max, 2.0 * r, dim, r)?;
    let mut rng = derive_rng(args.seed, 30);
    // A random linear loss of norm 0.25, offset to stay in [0, 1] on the ball.
    let w: Vec<f64> = sample_unit_sphere(dim, &mut rng).into_iter().map(|x| 0.25 * x).collect();
    let mut set = DecisionSet::new(dim);
    set.pin(Arc::new(Ball { center: vec![0.0; dim], radius: r }));
    let cfg = FkmConfig { horizon: t_max, dim, eta, delta, epsilon: args.perturb, r, diameter: 2.0 * r, lipschitz: norm(&w), seed: args.seed };
    let mut fkm = FkmState::new(cfg, set)?;
    let mut total = 0.0;
    let mut worst_norm: f64 = 0.0;
    for _ in 0..t_max {
        let y = fkm.propose_action(&mut rng);
        let xi: Vec<f64> = sample_unit_sphere(dim, &mut rng).into_iter().map(|x| args.perturb * x).collect();
        let played: Vec<f64> = y.iter().zip(&xi).map(|(a, b)| a + b).collect();
        worst_norm = worst_norm.max(norm(&played));
        let loss = 0.5 + dot(&w, &played);
        total += loss;
        fkm.observe_loss(loss)?;
    }
    let best = (0.5 - norm(&w)) * t_max as f64;
    print_json(&json!({
        "dim": dim,
        "horizon": t_max,
        "eta": eta,
        "delta": delta,
        "regret": total - best,
        "max_action_norm": worst_norm,
        "feasible": worst_norm <= r + 1e-9,
    }));
    Ok(())
}

fn report(args: &ReportArgs) -> CliResult {
    let mut out: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    writeln!(out, "trace,t,phase,item,reward,cumulative_reward,entropy,decision_sets")?;
    for (i, path) in args.trace.iter().enumerate() {
        let records = read_trace(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cumulative = 0.0;
        for r in &records {
            cumulative += r.reward;
            writeln!(out, "{i},{},{},{},{},{},{},{}", r.t, r.phase, r.item, r.reward, cumulative, r.entropy, r.decision_sets)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Learn(a) => learn(a),
        Command::Eird(a) => eird(a),
        Command::Lowerbound(a) => lowerbound(a),
        Command::Optimize(a) => optimize(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("menugame: {e}");
            ExitCode::FAILURE
        }
    }
}
