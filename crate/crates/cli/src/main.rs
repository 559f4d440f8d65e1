use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use dpnash::experiment::{ExperimentReport, GameSpec};
use dpnash::{
    build_iteration_matrix, calibrate, infer, mix_seed, nash_equilibrium, read_trajectory_csv,
    recover_dispatch, run_experiment, seek, sensitivity, social_optimum, step_size_bound,
    total_cost, variance_bound, AttackObservation, ExperimentConfig, Game, LaplaceSpec,
    PrivacyBudget, SeekConfig,
};

/// `println!` that stays quiet when stdout is closed early (`| head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "dpnash",
    version,
    about = "Exact and differentially private Nash equilibrium seeking for P2P energy trading"
)]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Worker threads for Monte Carlo campaigns.
    #[arg(long, global = true, env = "DPNASH_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Equilibrium bids, dispatch and costs of a game.
    Equilibrium(GameArgs),
    /// One seeking run, exact or with Laplace noise.
    Seek(SeekArgs),
    /// Infer a victim's demand from an observed window.
    Attack(AttackArgs),
    /// Run a Monte Carlo campaign from a config file.
    Experiment(ExperimentArgs),
    /// Step-size bound, spectral radius, sensitivity and calibrated noise.
    Check(CheckArgs),
}

#[derive(Args)]
struct GameArgs {
    /// Experiment config, or a bare {"market_sensitivity", "prosumers"} game.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SeekArgs {
    #[arg(long)]
    config: PathBuf,
    /// Laplace scale; omitted or 0 runs the exact iteration.
    #[arg(long)]
    sigma: Option<f64>,
    /// Root seed; the draw matches run 0 of a campaign with this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Store every n-th state in the trajectory CSV.
    #[arg(long, default_value_t = 1)]
    record_every: usize,
    /// Directory for trajectory.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    /// Stored observation (JSON).
    #[arg(long, conflicts_with_all = ["trajectory", "config"])]
    observation: Option<PathBuf>,
    /// Trajectory CSV written by `seek`.
    #[arg(long, requires_all = ["config", "window"])]
    trajectory: Option<PathBuf>,
    /// Config supplying the public parameters and the others' coefficients.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    victim: usize,
    /// Observed iterations, inclusive, as K1:K2.
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Write the assembled observation to this JSON file.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's output_dir, then out/<kind>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Adjacency radius for the privacy budget.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json_mode = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = error_kind(&err);
            let message = format!("{err:#}");
            if json_mode {
                eprintln!(
                    "{}",
                    json!({ "error": { "kind": kind, "message": message } })
                );
            } else {
                eprintln!("error [{kind}]: {message}");
            }
            ExitCode::from(exit_code(kind))
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<dpnash::Error>())
        .map(dpnash::Error::kind)
        .or_else(|| {
            err.chain()
                .any(|e| e.downcast_ref::<std::io::Error>().is_some())
                .then_some("io")
        })
        .unwrap_or("usage")
}

fn exit_code(kind: &str) -> u8 {
    match kind {
        "config" | "parse" | "usage" => 2,
        "numerical" | "divergence" => 3,
        "io" => 4,
        "audit" => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Equilibrium(args) => equilibrium(&args, cli.json),
        Command::Seek(args) => seek_once(&args, cli.json),
        Command::Attack(args) => attack(&args, cli.json),
        Command::Experiment(args) => experiment(&args, cli.threads, cli.json),
        Command::Check(args) => check(&args, cli.json),
    }
}

fn print_json(value: &Value) -> Result<()> {
    out!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

/// Accepts a full experiment config or a bare game description.
fn load_game(path: &Path) -> Result<Game> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| dpnash::Error::Parse(format!("{}: {e}", path.display())))?;
    let spec: GameSpec = if value.get("game").is_some() {
        ExperimentConfig::from_json(&text)?.game
    } else {
        serde_json::from_value(value)
            .map_err(|e| dpnash::Error::Parse(format!("{}: {e}", path.display())))?
    };
    Ok(spec.build()?)
}

fn equilibrium(args: &GameArgs, json_mode: bool) -> Result<()> {
    let game = load_game(&args.config)?;
    let coeffs = game.coefficients()?;
    let b = nash_equilibrium(&coeffs)?;
    let dispatch = recover_dispatch(&b, &game.prosumers, &game.market)?;
    let cost = total_cost(&dispatch, &game.prosumers);
    let social = social_optimum(&game.prosumers, &game.market)?;
    let social_cost = total_cost(&social, &game.prosumers);
    let beta: Vec<f64> = coeffs.beta().iter().copied().collect();
    if json_mode {
        return print_json(&json!({
            "beta": beta,
            "equilibrium": b,
            "dispatch": dispatch,
            "total_cost": cost,
            "social_optimum": social,
            "social_optimum_cost": social_cost,
        }));
    }
    out!("beta         {}", fmt_vec(&beta));
    out!("b*           {}", fmt_vec(b.as_slice()));
    out!("lambda       {:.6} $/kWh", dispatch.lambda);
    out!("q            {}", fmt_vec(&dispatch.q));
    out!("p            {}", fmt_vec(&dispatch.p));
    out!("total cost   {cost:.6}");
    out!("social opt.  {social_cost:.6} (p = {})", fmt_vec(&social.p));
    Ok(())
}

fn seek_once(args: &SeekArgs, json_mode: bool) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let game = cfg.game()?;
    let coeffs = game.coefficients()?;
    let graph = cfg.graph()?;
    let mut seek_cfg: SeekConfig = cfg.seek;
    if let Some(a) = args.alpha {
        seek_cfg.alpha = a;
    }
    if let Some(t) = args.tau {
        seek_cfg.tau = t;
    }
    seek_cfg.record_every = args.record_every;
    let root = args.seed.unwrap_or(cfg.seed);
    let noise = match args.sigma {
        Some(s) if s != 0.0 => {
            Some(LaplaceSpec::new(s, mix_seed(root, 0, 0))?.realization(game.count()))
        }
        Some(_) | None => None,
    };
    let t = seek(&coeffs, &graph, &seek_cfg, noise.as_ref(), None)?;
    let b = nash_equilibrium(&coeffs)?;
    let last = t.final_state();
    let out_dir = args.out.clone().or(cfg.output_dir.clone());
    let written = match &out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("trajectory.csv");
            let file =
                File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            t.write_csv(std::io::BufWriter::new(file))?;
            Some(path)
        }
        None => None,
    };
    if json_mode {
        return print_json(&json!({
            "converged": t.converged,
            "iterations": t.iterations,
            "last_residual": t.last_residual(),
            "own_bids": last.own_bids(),
            "final_state": last,
            "max_deviation_from_equilibrium": last.max_deviation(b.as_slice()),
            "noise": t.noise,
            "trajectory_csv": written,
        }));
    }
    out!(
        "{} after {} iterations (last residual {:.3e})",
        if t.converged { "converged" } else { "stopped" },
        t.iterations,
        t.last_residual().unwrap_or(f64::NAN)
    );
    if let Some(n) = &t.noise {
        out!("gamma        {}", fmt_vec(&n.gamma));
    }
    out!("own bids     {}", fmt_vec(last.own_bids().as_slice()));
    out!("b*           {}", fmt_vec(b.as_slice()));
    out!("max |y - b*| {:.3e}", last.max_deviation(b.as_slice()));
    if let Some(p) = written {
        out!("wrote {}", p.display());
    }
    Ok(())
}

fn parse_window(text: &str) -> Result<(usize, usize)> {
    let (a, b) = text
        .split_once(':')
        .ok_or_else(|| anyhow!("window must look like K1:K2, got {text:?}"))?;
    let k1 = a.trim().parse().context("window start")?;
    let k2 = b.trim().parse().context("window end")?;
    if k2 < k1 {
        bail!("window end {k2} precedes start {k1}");
    }
    Ok((k1, k2))
}

fn observation_from_trajectory(args: &AttackArgs) -> Result<AttackObservation> {
    let (Some(traj), Some(cfg_path), Some(window)) = (&args.trajectory, &args.config, &args.window)
    else {
        bail!("attack needs --observation, or --trajectory with --config and --window");
    };
    let cfg = load_config(cfg_path)?;
    let game = cfg.game()?;
    let coeffs = game.coefficients()?;
    let (k1, k2) = parse_window(window)?;
    let file = File::open(traj).with_context(|| format!("opening {}", traj.display()))?;
    let states = read_trajectory_csv(BufReader::new(file))?;
    let n = game.count();
    if args.victim >= n {
        return Err(dpnash::Error::NodeOutOfRange {
            index: args.victim,
            count: n,
        }
        .into());
    }
    let observed = (k1..=k2)
        .map(|k| {
            states
                .iter()
                .find(|(kk, _)| *kk == k)
                .map(|(_, s)| s.row(args.victim).to_vec())
                .ok_or_else(|| anyhow!("iteration {k} is not stored in {}", traj.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackObservation {
        victim: args.victim,
        k1,
        k2,
        observed,
        known_beta: (0..n)
            .map(|j| (j != args.victim).then(|| coeffs.beta()[j]))
            .collect(),
        costs: game.costs(),
        market: game.market,
        graph: cfg.graph()?,
        alpha: args.alpha.unwrap_or(cfg.seek.alpha),
    })
}

fn attack(args: &AttackArgs, json_mode: bool) -> Result<()> {
    let obs = match &args.observation {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<AttackObservation>(&text)
                .map_err(|e| dpnash::Error::Parse(format!("{}: {e}", path.display())))?
        }
        None => observation_from_trajectory(args)?,
    };
    if let Some(path) = &args.export {
        std::fs::write(path, serde_json::to_string_pretty(&obs)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let res = infer(&obs)?;
    if json_mode {
        return print_json(&json!({
            "victim": obs.victim,
            "k1": obs.k1,
            "k2": obs.k2,
            "result": res,
        }));
    }
    out!(
        "victim {} window {}..={} ({} iterations)",
        obs.victim,
        obs.k1,
        obs.k2,
        obs.window_len()
    );
    out!("beta_hat     {:.6}", res.beta_hat);
    out!("d_hat        {:.6} kWh", res.d_hat);
    out!("residual     {:.3e}", res.residual);
    out!(
        "determined   {} (rank {} of {} unknowns)",
        res.determined,
        res.rank,
        res.unknowns
    );
    if let Some(w) = &res.warning {
        out!("warning      {w}");
    }
    Ok(())
}

fn experiment(args: &ExperimentArgs, threads: Option<usize>, json_mode: bool) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.runs {
        cfg.runs = r;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    let report = run_experiment(&cfg)?;
    report.audit()?;
    let kind = report.meta().kind;
    let dir = args
        .out
        .clone()
        .or(cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
    let files = report.write(&dir)?;
    if json_mode {
        let mut summary = report.summary();
        summary["files"] = json!(files);
        return print_json(&summary);
    }
    for w in &report.meta().warnings {
        out!("warning: {w}");
    }
    print_cells(&report);
    for f in files {
        out!("wrote {}", f.display());
    }
    Ok(())
}

fn print_cells(report: &ExperimentReport) {
    match report {
        ExperimentReport::Privacy(r) => {
            out!(
                "victim {} true demand {} kWh, attack from iteration {}",
                r.victim,
                r.true_demand,
                r.start
            );
            out!(
                "{:>10} {:>7} {:>14} {:>9} {:>6}",
                "sigma",
                "budget",
                "mse",
                "hit_rate",
                "failed"
            );
            for c in &r.cells {
                out!(
                    "{:>10} {:>7} {:>14.6} {:>8.1}% {:>6}",
                    c.sigma,
                    c.budget,
                    c.mse,
                    100.0 * c.hit_rate,
                    c.failed
                );
            }
        }
        ExperimentReport::Convergence(r) => {
            out!("spectral radius m = {:.6}", r.spectral_radius);
            out!(
                "{:>10} {:>10} {:>12} {:>14} {:>14}",
                "sigma",
                "converged",
                "mean_iter",
                "mean_sq_dev",
                "var_bound"
            );
            for c in &r.cells {
                out!(
                    "{:>10} {:>6}/{:<3} {:>12.2} {:>14.6} {:>14.6}",
                    c.sigma,
                    c.converged,
                    c.runs,
                    c.mean_iterations,
                    c.mean_sq_deviation,
                    c.variance_bound
                );
            }
        }
        ExperimentReport::Fidelity(r) => {
            out!(
                "{:>8} {:>10} {:>14} {:>12} {:>6}",
                "a",
                "sigma",
                "mean_gap",
                "negative",
                "failed"
            );
            for c in &r.cells {
                out!(
                    "{:>8} {:>10} {:>14.6} {:>11.1}% {:>6}",
                    c.a,
                    c.sigma,
                    c.mean_gap,
                    c.negative_gap_pct,
                    c.failed
                );
            }
        }
    }
}

fn check(args: &CheckArgs, json_mode: bool) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let game = cfg.game()?;
    let coeffs = game.coefficients()?;
    let graph = cfg.graph()?;
    let spectrum = graph.spectrum();
    let alpha = args.alpha.unwrap_or(cfg.seek.alpha);
    let a = sensitivity(&game.prosumers, &game.market)?;
    let bound = step_size_bound(&coeffs, &spectrum);
    let m = build_iteration_matrix(&coeffs, &graph, alpha)?.m;

    let budget = match (args.epsilon, args.mu) {
        (Some(e), Some(mu)) => Some(PrivacyBudget::new(e, mu)?),
        (Some(e), None) => Some(PrivacyBudget::new(e, cfg.noise.mu_adj.unwrap_or(1.0))?),
        (None, Some(_)) => bail!("--mu needs --epsilon"),
        (None, None) => None,
    };
    let calibrated = budget.map(|b| calibrate(&b, a)).transpose()?;
    let sigmas: Vec<f64> = match &calibrated {
        Some(spec) => vec![spec.sigma],
        None => cfg.noise_levels().map(|l| l.sigma).unwrap_or_default(),
    };
    let variance: Vec<(f64, Option<f64>)> = sigmas
        .iter()
        .map(|&s| (s, variance_bound(&coeffs, m, alpha, s).ok()))
        .collect();

    if json_mode {
        return print_json(&json!({
            "sensitivity": a,
            "budget": budget,
            "calibrated_sigma": calibrated.map(|c| c.sigma),
            "lambda_max": spectrum.lambda_max(),
            "lambda_min": spectrum.lambda_min(),
            "eigenvalues": spectrum.eigenvalues,
            "step_size_bound": bound.as_ref().ok(),
            "alpha": alpha,
            "alpha_admissible": bound.as_ref().map(|b| alpha <= *b).unwrap_or(false),
            "spectral_radius": m,
            "variance_bound": variance
                .iter()
                .map(|(s, v)| json!({ "sigma": s, "bound": v }))
                .collect::<Vec<_>>(),
        }));
    }
    out!("sensitivity A        {a:.6}");
    if let (Some(b), Some(c)) = (budget, calibrated) {
        out!(
            "calibrated sigma     {:.6} (epsilon {}, mu {})",
            c.sigma,
            b.epsilon,
            b.mu_adj
        );
    }
    out!(
        "graph eigenvalues    lambda_max {:.6}, lambda_min {:.6}",
        spectrum.lambda_max(),
        spectrum.lambda_min()
    );
    match &bound {
        Ok(b) => out!(
            "step-size bound      {b:.6} (alpha {alpha} {})",
            if alpha <= *b {
                "admissible"
            } else {
                "exceeds bound"
            }
        ),
        Err(e) => out!("step-size bound      none: {e}"),
    }
    out!("spectral radius m    {m:.6}");
    for (s, v) in variance {
        match v {
            Some(v) => out!("variance bound       {v:.6} at sigma {s}"),
            None => out!("variance bound       undefined at sigma {s} (m >= 1)"),
        }
    }
    Ok(())
}
