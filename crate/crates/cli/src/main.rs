//! `boots`: generate, solve, train, plan and benchmark piecewise-linear MDPs.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 a checked assertion
//! failed, 3 runtime abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use boots_core::bench::{
    self, planner_return, run_dir, with_jobs, write_atomic, write_run, Experiment,
    ExperimentConfig, GenMethod, MdpSpec,
};
use boots_core::dp::{evaluate_policy_exact, value_iteration_with, DpConfig, PolicySchedule};
use boots_core::fractal::Family;
use boots_core::learner::{dqn_train, fit_dynamics, start_grid, TrainConfig};
use boots_core::nn::MlpNet;
use boots_core::planner::{DynModel, PlanMode, PlannerConfig, TerminalQ, DEFAULT_BUDGET};
use boots_core::rng::{child, Stream};
use boots_core::{Mdp, PiecewisePolicy, QFunction};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(
    name = "boots",
    version,
    about = "Exact PWL MDP solver, BOOTS planner and experiment runner"
)]
struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel workloads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate an MDP file.
    Gen(GenArgs),
    /// Exact value iteration; writes Q, policy and trace.
    Solve(SolveArgs),
    /// Evaluate a policy file exactly and by Monte Carlo.
    Eval(EvalArgs),
    /// Train a DQN and fit a dynamics model from its samples.
    Train(TrainArgs),
    /// Roll out the k-step bootstrapped planner.
    Boots(BootsArgs),
    /// Check the closed-form optimum and the compact-Q planner.
    Verify(VerifyArgs),
    /// Run an experiment from a config file or flags.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Rand,
    Semirand,
    Reference,
    Fractal,
    Lipschitz,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Horizon parameter for the fractal families.
    #[arg(long = "H", alias = "h")]
    h: Option<u32>,
    /// Output file.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// MDP file.
    mdp: PathBuf,
    /// Output directory (default: <root>/solve/<mdp stem>).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Output root for the default directory.
    #[arg(long, env = "BOOTS_OUT", default_value = "runs")]
    root: PathBuf,
    /// Abort once any function exceeds this many pieces.
    #[arg(long, default_value_t = 10_000_000)]
    piece_cap: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// MDP file.
    mdp: PathBuf,
    /// Stationary policy file.
    #[arg(long)]
    policy: PathBuf,
    /// Monte Carlo start states.
    #[arg(long, default_value_t = 10_000)]
    n_starts: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// MDP file.
    #[arg(long)]
    mdp: PathBuf,
    /// Training config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long)]
    episodes: Option<usize>,
    /// Hidden width of the dynamics nets.
    #[arg(long, default_value_t = 32)]
    model_hidden: usize,
    /// Skip dynamics fitting.
    #[arg(long)]
    no_model: bool,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, env = "BOOTS_OUT", default_value = "runs")]
    root: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Exhaustive,
    Shooting,
}

#[derive(Args, Debug)]
struct BootsArgs {
    /// MDP file.
    #[arg(long)]
    mdp: PathBuf,
    /// Terminal Q: a network file or a PWL Q file.
    #[arg(long)]
    q: PathBuf,
    /// Learned dynamics (array of networks); true dynamics when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Mode::Exhaustive)]
    mode: Mode,
    #[arg(long, default_value_t = 64)]
    n_candidates: usize,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: u64,
    /// Evenly spaced start states (matches the training evaluation grid).
    #[arg(long, default_value_t = 256)]
    n_starts: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Fractal,
    Lipschitz,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Config file; replaces the flags below.
    #[arg(long, conflicts_with_all = ["family", "h"])]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FamilyArg::Fractal)]
    family: FamilyArg,
    #[arg(long = "H", alias = "h", default_value_t = 6)]
    h: u32,
    /// Sampled states for the Bellman check.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Also plan with the compact Q for these k (fractal only).
    #[arg(long, value_delimiter = ',')]
    thm34_k: Vec<u32>,
    #[arg(long, default_value_t = 1000)]
    n_starts: usize,
    #[arg(long)]
    tag: Option<String>,
    #[arg(short, long, env = "BOOTS_OUT", default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchKind {
    Histogram,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Shorthand experiment (needs --method and --n).
    #[arg(value_enum, required_unless_present = "config")]
    kind: Option<BenchKind>,
    /// Experiment config file.
    #[arg(long, conflicts_with = "kind")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<HistMethod>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    tag: Option<String>,
    /// Output root.
    #[arg(short, long, env = "BOOTS_OUT", default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HistMethod {
    Rand,
    Semirand,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Assertion(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Assertion(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<boots_core::BenchError> for CliError {
    fn from(e: boots_core::BenchError) -> Self {
        match e {
            boots_core::BenchError::Config { .. } | boots_core::BenchError::Json(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    write_atomic(path, bytes).map_err(runtime)
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "mdp".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_gen(a: &GenArgs, seed: u64) -> Result<(), CliError> {
    let spec = match a.method {
        Method::Rand => MdpSpec::Rand { seed },
        Method::Semirand => MdpSpec::Semirand { seed },
        Method::Reference => MdpSpec::Reference,
        Method::Fractal | Method::Lipschitz => {
            let h =
                a.h.ok_or_else(|| CliError::Usage("--H is required for fractal families".into()))?;
            if matches!(a.method, Method::Fractal) {
                MdpSpec::Fractal { h }
            } else {
                MdpSpec::Lipschitz { h }
            }
        }
    };
    let mdp = spec.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let pieces: Vec<usize> = mdp.dynamics().iter().map(|f| f.piece_count()).collect();
    let in_range = mdp.dynamics().iter().all(|f| f.check_unit_range().is_ok());
    let mut line = format!(
        "label={} actions={} dynamics_pieces={:?} in_range={in_range}",
        mdp.label(),
        mdp.action_count(),
        pieces
    );
    if let Some(g) = mdp.horizon().discount() {
        line.push_str(&format!(" gamma={g}"));
    }
    write_file(&a.out, &to_json(&mdp))?;
    println!("{line}");
    Ok(())
}

#[derive(Serialize)]
struct SolveSummary {
    policy_pieces: usize,
    q_pieces: usize,
    q_pieces_per_action: Vec<usize>,
    eta_opt: f64,
    backups: usize,
}

fn cmd_solve(a: &SolveArgs) -> Result<(), CliError> {
    let mdp: Mdp = read_json(&a.mdp)?;
    let cfg = DpConfig {
        piece_cap: a.piece_cap,
        ..DpConfig::default()
    };
    let sol = value_iteration_with(&mdp, cfg).map_err(runtime)?;
    let summary = SolveSummary {
        policy_pieces: sol.policy.piece_count(),
        q_pieces: sol.q.piece_counts().iter().sum(),
        q_pieces_per_action: sol.q.piece_counts(),
        eta_opt: sol.eta(),
        backups: sol.trace.records.len(),
    };
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| a.root.join("solve").join(stem(&a.mdp)));
    let config = serde_json::json!({
        "command": "solve",
        "mdp": a.mdp.display().to_string(),
        "mdp_sha256": sha256_file(&a.mdp)?,
        "piece_cap": a.piece_cap,
    });
    write_file(&dir.join("config.json"), &to_json(&config))?;
    write_file(&dir.join("q.json"), &to_json(&sol.q))?;
    write_file(&dir.join("policy.json"), &to_json(&sol.policy))?;
    write_file(&dir.join("trace.csv"), sol.trace.to_csv().as_bytes())?;
    write_file(&dir.join("summary.json"), &to_json(&summary))?;
    println!(
        "policy_pieces={} q_pieces={} eta_opt={}",
        summary.policy_pieces, summary.q_pieces, summary.eta_opt
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, seed: u64) -> Result<(), CliError> {
    let mdp: Mdp = read_json(&a.mdp)?;
    let policy: PiecewisePolicy = read_json(&a.policy)?;
    policy
        .check_actions(mdp.action_count())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if a.n_starts == 0 {
        return Err(CliError::Usage("--n-starts must be >= 1".into()));
    }
    let exact = evaluate_policy_exact(&mdp, &PolicySchedule::Stationary(policy.clone()))
        .map_err(runtime)?;
    let mut rng = child(seed, Stream::StartStates, 0);
    let g = mdp.gamma_eff();
    let mut total = 0.0;
    let mut sq = 0.0;
    for _ in 0..a.n_starts {
        let mut s: f64 = rng.gen();
        let mut ret = 0.0;
        let mut disc = 1.0;
        for _ in 0..mdp.horizon().steps() {
            let act = policy.action_at(s);
            ret += disc * mdp.reward_at(s, act);
            disc *= g;
            s = mdp.next_state(s, act);
        }
        total += ret;
        sq += ret * ret;
    }
    let n = a.n_starts as f64;
    let mean = total / n;
    let se = ((sq / n - mean * mean).max(0.0) / n).sqrt();
    println!(
        "eta_exact={} eta_mc={mean} mc_stderr={se} truncation_bound={}",
        exact.eta, exact.truncation_bound
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<(), CliError> {
    let mdp: Mdp = read_json(&a.mdp)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(e) = a.episodes {
        cfg.episodes = e;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.width == 0 || a.model_hidden == 0 {
        return Err(CliError::Usage(
            "--width and --model-hidden must be positive".into(),
        ));
    }
    let res = dqn_train(&mdp, a.width, &cfg).map_err(runtime)?;
    let fitted = if a.no_model {
        None
    } else {
        Some(fit_dynamics(&res.samples, &mdp, a.model_hidden, &cfg).map_err(runtime)?)
    };
    let dir = a.out.clone().unwrap_or_else(|| {
        a.root
            .join("train")
            .join(format!("{}-s{seed}", stem(&a.mdp)))
    });
    let config = serde_json::json!({
        "command": "train",
        "mdp": a.mdp.display().to_string(),
        "mdp_sha256": sha256_file(&a.mdp)?,
        "width": a.width,
        "model_hidden": a.model_hidden,
        "fit_model": !a.no_model,
        "train": cfg,
    });
    write_file(&dir.join("config.json"), &to_json(&config))?;
    write_file(&dir.join("net.json"), &to_json(&res.net))?;
    write_file(
        &dir.join("curve.csv"),
        boots_core::learner::curve_to_csv(&res.curve).as_bytes(),
    )?;
    let mut line = format!(
        "final_return={} updates={}",
        res.final_return(),
        res.updates
    );
    if let Some((model, fit)) = &fitted {
        let nets = model_nets(model);
        write_file(&dir.join("model.json"), &to_json(&nets))?;
        write_file(&dir.join("fit.json"), &to_json(fit))?;
        line.push_str(&format!(" model_rmse={:?}", fit.rmse));
    }
    let summary = serde_json::json!({
        "final_return": res.final_return(),
        "updates": res.updates,
        "samples": res.samples.len(),
    });
    write_file(&dir.join("summary.json"), &to_json(&summary))?;
    println!("{line}");
    Ok(())
}

fn model_nets(model: &DynModel) -> Vec<MlpNet> {
    model.nets().map(<[MlpNet]>::to_vec).unwrap_or_default()
}

fn load_q(path: &Path) -> Result<TerminalQ, CliError> {
    let text = read_text(path)?;
    if let Ok(net) = serde_json::from_str::<MlpNet>(&text) {
        return Ok(TerminalQ::Net(net));
    }
    serde_json::from_str::<QFunction>(&text)
        .map(TerminalQ::Pwl)
        .map_err(|e| {
            CliError::Usage(format!(
                "{}: neither a network nor a Q function: {e}",
                path.display()
            ))
        })
}

fn cmd_boots(a: &BootsArgs, seed: u64) -> Result<(), CliError> {
    let mdp: Mdp = read_json(&a.mdp)?;
    let q = load_q(&a.q)?;
    if q.action_count() != mdp.action_count() {
        return Err(CliError::Usage(format!(
            "Q has {} actions, MDP has {}",
            q.action_count(),
            mdp.action_count()
        )));
    }
    let model = match &a.model {
        Some(p) => {
            let nets: Vec<MlpNet> = read_json(p)?;
            DynModel::learned(nets, &mdp).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => DynModel::exact(&mdp),
    };
    let planner = PlannerConfig {
        mode: match a.mode {
            Mode::Exhaustive => PlanMode::Exhaustive,
            Mode::Shooting => PlanMode::Shooting,
        },
        k: a.k,
        n_candidates: a.n_candidates,
        gamma_eff: None,
        budget: a.budget,
    };
    planner
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if a.n_starts == 0 {
        return Err(CliError::Usage("--n-starts must be >= 1".into()));
    }
    let ret = planner_return(
        &mdp,
        &model,
        &q,
        a.k,
        &planner,
        &start_grid(a.n_starts),
        seed,
    )?;
    println!("k={} return={ret}", a.k);
    Ok(())
}

fn finish_run(
    cfg: &ExperimentConfig,
    root: &Path,
    jobs: Option<usize>,
) -> Result<bench::RunOutput, CliError> {
    cfg.validate()?;
    let dir = run_dir(root, cfg);
    let t0 = Instant::now();
    let out = with_jobs(jobs, || bench::run_experiment(cfg))?;
    write_run(&dir, cfg, &out, t0.elapsed().as_secs_f64())?;
    eprintln!("wrote {}", dir.display());
    Ok(out)
}

fn print_summary(out: &bench::RunOutput) {
    let line: Vec<String> = out
        .record
        .summary
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    println!("{}", line.join(" "));
}

fn check_passed(out: &bench::RunOutput) -> Result<(), CliError> {
    match out.record.passed {
        Some(false) => Err(CliError::Assertion(format!(
            "{} checks failed",
            out.record.kind
        ))),
        _ => Ok(()),
    }
}

fn cmd_verify(a: &VerifyArgs, seed: u64, jobs: Option<usize>) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => {
            let mut cfg = ExperimentConfig::from_json(&read_text(p)?)?;
            if !matches!(
                cfg.experiment,
                Experiment::TheoryVerify { .. } | Experiment::Thm34 { .. }
            ) {
                return Err(CliError::Usage(
                    "verify takes theory_verify or thm34 configs".into(),
                ));
            }
            cfg.seeds = vec![seed];
            cfg.tag = a.tag.clone().or(cfg.tag);
            cfg
        }
        None => {
            let family = match a.family {
                FamilyArg::Fractal => Family::Fractal,
                FamilyArg::Lipschitz => Family::Lipschitz,
            };
            if !a.thm34_k.is_empty() && family != Family::Fractal {
                return Err(CliError::Usage("--thm34-k needs --family fractal".into()));
            }
            ExperimentConfig {
                experiment: Experiment::TheoryVerify {
                    hs: if family == Family::Fractal {
                        vec![a.h]
                    } else {
                        vec![]
                    },
                    lipschitz_hs: if family == Family::Lipschitz {
                        vec![a.h]
                    } else {
                        vec![]
                    },
                    n_samples: a.n,
                    thm34_h: (!a.thm34_k.is_empty()).then_some(a.h),
                    thm34_ks: a.thm34_k.clone(),
                    n_starts: a.n_starts,
                },
                seeds: vec![seed],
                tag: a.tag.clone(),
                out_dir: None,
            }
        }
    };
    let out = finish_run(&cfg, &a.out, jobs)?;
    for r in &out.record.per_seed {
        let ok = r.metrics.get("passed").copied() == Some(1.0);
        println!("{} {}", if ok { "PASS" } else { "FAIL" }, r.label);
    }
    println!("passed={}", out.record.passed == Some(true));
    check_passed(&out)
}

fn cmd_bench(a: &BenchArgs, seed: Option<u64>, jobs: Option<usize>) -> Result<(), CliError> {
    let mut cfg = match (&a.config, a.kind) {
        (Some(p), _) => ExperimentConfig::from_json(&read_text(p)?)?,
        (None, Some(BenchKind::Histogram)) => {
            let (Some(method), Some(n)) = (a.method, a.n) else {
                return Err(CliError::Usage("histogram needs --method and --n".into()));
            };
            ExperimentConfig {
                experiment: Experiment::Histogram {
                    method: match method {
                        HistMethod::Rand => GenMethod::Rand,
                        HistMethod::Semirand => GenMethod::Semirand,
                    },
                    n_mdps: n,
                },
                seeds: vec![0],
                tag: None,
                out_dir: None,
            }
        }
        (None, None) => return Err(CliError::Usage("give a kind or --config".into())),
    };
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if a.tag.is_some() {
        cfg.tag = a.tag.clone();
    }
    let root = match (&cfg.out_dir, std::env::var_os("BOOTS_OUT")) {
        (Some(d), None) if a.out == Path::new("runs") => PathBuf::from(d),
        _ => a.out.clone(),
    };
    let out = finish_run(&cfg, &root, jobs)?;
    print_summary(&out);
    check_passed(&out)
}

fn run(cli: Cli, seed_given: bool) -> Result<(), CliError> {
    let seed = cli.seed;
    match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a, seed),
        Cmd::Solve(a) => cmd_solve(a),
        Cmd::Eval(a) => cmd_eval(a, seed),
        Cmd::Train(a) => with_jobs(cli.jobs, || cmd_train(a, seed)),
        Cmd::Boots(a) => with_jobs(cli.jobs, || cmd_boots(a, seed)),
        Cmd::Verify(a) => cmd_verify(a, seed, cli.jobs),
        Cmd::Bench(a) => cmd_bench(a, seed_given.then_some(seed), cli.jobs),
    }
}

fn main() -> ExitCode {
    let matches = <Cli as clap::CommandFactory>::command().try_get_matches();
    let matches = match matches {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let seed_given = matches.value_source("seed") == Some(clap::parser::ValueSource::CommandLine);
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if cli.jobs == Some(0) {
        eprintln!("error: --jobs must be >= 1");
        return ExitCode::from(1);
    }
    match run(cli, seed_given) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::Assertion(m) | CliError::Runtime(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
