//! Experiment configs, runners and artifact output.
//!
//! A run produces `config.json` (resolved config plus its SHA-256),
//! `results.json` (a [`ResultRecord`], free of wall-clock data so reruns are
//! byte-identical), `timing.json`, and CSV artifacts, all under
//! `<root>/<kind>/<tag>/`.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dp::value_iteration;
use crate::error::{BenchError, DpError};
use crate::fractal::{self, Family};
use crate::learner::{self, dqn_train, fit_dynamics, mean_return, start_grid, TrainConfig};
use crate::mdp::{
    fractal_gamma, gen_rand, gen_semirand, make_fractal_mdp, make_lipschitz_mdp,
    semirand_reference, Mdp,
};
use crate::planner::{
    construct_thm34_q, rollout_return, shooting_policy, shooting_rng, BootsAgent, DynModel,
    PlanMode, PlannerConfig, TerminalQ,
};
use crate::rng::instance_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMethod {
    Rand,
    Semirand,
}

impl GenMethod {
    pub fn generate(self, seed: u64) -> Mdp {
        match self {
            GenMethod::Rand => gen_rand(seed),
            GenMethod::Semirand => gen_semirand(seed),
        }
    }
}

impl std::str::FromStr for GenMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rand" => Ok(GenMethod::Rand),
            "semirand" => Ok(GenMethod::Semirand),
            other => Err(format!(
                "unknown method `{other}` (expected rand or semirand)"
            )),
        }
    }
}

/// Which MDP an experiment runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpSpec {
    Reference,
    Fractal { h: u32 },
    Lipschitz { h: u32 },
    Rand { seed: u64 },
    Semirand { seed: u64 },
    Inline { mdp: Box<Mdp> },
}

impl MdpSpec {
    pub fn build(&self) -> Result<Mdp, BenchError> {
        Ok(match self {
            MdpSpec::Reference => semirand_reference(),
            MdpSpec::Fractal { h } => make_fractal_mdp(*h)?,
            MdpSpec::Lipschitz { h } => make_lipschitz_mdp(*h)?,
            MdpSpec::Rand { seed } => gen_rand(*seed),
            MdpSpec::Semirand { seed } => gen_semirand(*seed),
            MdpSpec::Inline { mdp } => (**mdp).clone(),
        })
    }
}

fn default_width() -> usize {
    64
}

fn default_model_hidden() -> usize {
    32
}

fn default_samples() -> usize {
    10_000
}

fn default_starts() -> usize {
    1000
}

fn default_planner() -> PlannerConfig {
    PlannerConfig::exhaustive(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Exact DP on `n_mdps` generated instances per seed.
    Histogram { method: GenMethod, n_mdps: usize },
    /// DQN per width and seed against the exact optimum.
    Expressivity {
        mdp: MdpSpec,
        widths: Vec<usize>,
        #[serde(default)]
        train: TrainConfig,
    },
    /// DQN, then BOOTS for each `k` with learned and true dynamics.
    BootsSweep {
        mdp: MdpSpec,
        ks: Vec<usize>,
        #[serde(default = "default_width")]
        width: usize,
        #[serde(default = "default_model_hidden")]
        model_hidden: usize,
        #[serde(default)]
        train: TrainConfig,
        /// `k` is ignored here; `ks` drives the sweep.
        #[serde(default = "default_planner")]
        planner: PlannerConfig,
    },
    /// Bellman checks of the closed form plus the compact-Q planning check.
    TheoryVerify {
        hs: Vec<u32>,
        #[serde(default)]
        lipschitz_hs: Vec<u32>,
        #[serde(default = "default_samples")]
        n_samples: usize,
        #[serde(default)]
        thm34_h: Option<u32>,
        #[serde(default)]
        thm34_ks: Vec<u32>,
        #[serde(default = "default_starts")]
        n_starts: usize,
    },
    /// Compact-Q planning check alone.
    Thm34 {
        h: u32,
        ks: Vec<u32>,
        #[serde(default = "default_starts")]
        n_starts: usize,
    },
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Histogram { .. } => "histogram",
            Experiment::Expressivity { .. } => "expressivity",
            Experiment::BootsSweep { .. } => "boots_sweep",
            Experiment::TheoryVerify { .. } => "theory_verify",
            Experiment::Thm34 { .. } => "thm34",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    /// Run directory name; a timestamp when absent.
    #[serde(default)]
    pub tag: Option<String>,
    /// Output root; overridden by the command line.
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn cfg_err(field: &str, reason: impl Into<String>) -> BenchError {
    BenchError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn check_hs(field: &str, hs: &[u32]) -> Result<(), BenchError> {
    if let Some(h) = hs.iter().find(|&&h| !(3..=20).contains(&h)) {
        return Err(cfg_err(field, format!("H = {h} outside 3..=20")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.seeds.is_empty() {
            return Err(cfg_err("seeds", "must list at least one seed"));
        }
        if let Some(tag) = &self.tag {
            if tag.is_empty() || tag.contains(['/', '\\']) || tag.starts_with('.') {
                return Err(cfg_err("tag", "must be a plain directory name"));
            }
        }
        let train_ok = |t: &TrainConfig| {
            t.validate()
                .map_err(|e| cfg_err("experiment.train", e.to_string()))
        };
        match &self.experiment {
            Experiment::Histogram { n_mdps, .. } => {
                if *n_mdps == 0 {
                    return Err(cfg_err("experiment.n_mdps", "must be >= 1"));
                }
            }
            Experiment::Expressivity { mdp, widths, train } => {
                mdp.build()
                    .map_err(|e| cfg_err("experiment.mdp", e.to_string()))?;
                if widths.is_empty() || widths.contains(&0) {
                    return Err(cfg_err(
                        "experiment.widths",
                        "must be non-empty and positive",
                    ));
                }
                train_ok(train)?;
            }
            Experiment::BootsSweep {
                mdp,
                ks,
                width,
                model_hidden,
                train,
                planner,
            } => {
                let m = mdp
                    .build()
                    .map_err(|e| cfg_err("experiment.mdp", e.to_string()))?;
                if ks.is_empty() {
                    return Err(cfg_err("experiment.ks", "must be non-empty"));
                }
                if *width == 0 {
                    return Err(cfg_err("experiment.width", "must be positive"));
                }
                if *model_hidden == 0 {
                    return Err(cfg_err("experiment.model_hidden", "must be positive"));
                }
                train_ok(train)?;
                planner
                    .validate()
                    .map_err(|e| cfg_err("experiment.planner", e.to_string()))?;
                let kmax = *ks.iter().max().expect("non-empty");
                if planner.mode == PlanMode::Exhaustive {
                    let seqs = (m.action_count() as u128).checked_pow(kmax as u32 + 1);
                    if seqs.is_none_or(|n| n > planner.budget as u128) {
                        return Err(cfg_err(
                            "experiment.ks",
                            format!("k = {kmax} exceeds planner budget {}", planner.budget),
                        ));
                    }
                }
            }
            Experiment::TheoryVerify {
                hs,
                lipschitz_hs,
                n_samples,
                thm34_h,
                thm34_ks,
                n_starts,
            } => {
                check_hs("experiment.hs", hs)?;
                check_hs("experiment.lipschitz_hs", lipschitz_hs)?;
                if *n_samples == 0 {
                    return Err(cfg_err("experiment.n_samples", "must be >= 1"));
                }
                if let Some(h) = thm34_h {
                    check_thm34("experiment", *h, thm34_ks, *n_starts)?;
                } else if !thm34_ks.is_empty() {
                    return Err(cfg_err(
                        "experiment.thm34_h",
                        "required when thm34_ks is set",
                    ));
                }
            }
            Experiment::Thm34 { h, ks, n_starts } => check_thm34("experiment", *h, ks, *n_starts)?,
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

fn check_thm34(prefix: &str, h: u32, ks: &[u32], n_starts: usize) -> Result<(), BenchError> {
    check_hs(&format!("{prefix}.h"), &[h])?;
    if ks.is_empty() {
        return Err(cfg_err(&format!("{prefix}.ks"), "must be non-empty"));
    }
    if let Some(k) = ks.iter().find(|&&k| k < 1 || k > h || k > 16) {
        return Err(cfg_err(
            &format!("{prefix}.ks"),
            format!("k = {k} outside 1..=min(H, 16)"),
        ));
    }
    if n_starts == 0 {
        return Err(cfg_err(&format!("{prefix}.n_starts"), "must be >= 1"));
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Metrics of one instance, seed or check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub label: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub kind: String,
    pub config_hash: String,
    pub per_seed: Vec<SeedRecord>,
    pub summary: BTreeMap<String, f64>,
    /// Set by experiments with a pass/fail outcome.
    pub passed: Option<bool>,
}

/// A record plus CSV artifacts `(file name, contents)`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: ResultRecord,
    pub artifacts: Vec<(String, String)>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Inserts `v` unless it is NaN (JSON has no NaN; absent means undefined).
fn put(map: &mut BTreeMap<String, f64>, key: impl Into<String>, v: f64) {
    if !v.is_nan() {
        map.insert(key.into(), v);
    }
}

fn metrics<const N: usize>(pairs: [(&str, f64); N]) -> BTreeMap<String, f64> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Decade bins `[10^i, 10^(i+1))` covering the counts.
pub fn decade_histogram(counts: &[usize]) -> Vec<(usize, usize, usize)> {
    let max = counts.iter().copied().max().unwrap_or(1).max(1);
    let mut bins = Vec::new();
    let mut lo = 1usize;
    while lo <= max {
        let hi = lo.saturating_mul(10);
        bins.push((
            lo,
            hi,
            counts.iter().filter(|&&c| c >= lo && c < hi).count(),
        ));
        lo = hi;
    }
    bins
}

/// Threshold fractions over the instances that finished.
fn histogram_summary(records: &[SeedRecord]) -> BTreeMap<String, f64> {
    let pieces: Vec<f64> = records
        .iter()
        .filter_map(|r| r.metrics.get("policy_pieces").copied())
        .collect();
    let n = pieces.len() as f64;
    let frac = |t: f64| pieces.iter().filter(|&&p| p > t).count() as f64 / n;
    let mut m = metrics([
        ("instances", records.len() as f64),
        ("aborted", records.len() as f64 - n),
    ]);
    if !pieces.is_empty() {
        m.insert("frac_gt_100".into(), frac(100.0));
        m.insert("frac_gt_1000".into(), frac(1000.0));
        m.insert("median_policy_pieces".into(), median(&pieces));
        m.insert(
            "max_policy_pieces".into(),
            pieces.iter().copied().fold(0.0, f64::max),
        );
    }
    m
}

/// Exact DP on `n_mdps` instances generated from each base seed.
pub fn run_histogram(method: GenMethod, n_mdps: usize, base_seeds: &[u64]) -> RunOutput {
    let jobs: Vec<(u64, usize)> = base_seeds
        .iter()
        .flat_map(|&b| (0..n_mdps).map(move |i| (b, i)))
        .collect();
    let records: Vec<SeedRecord> = jobs
        .par_iter()
        .map(|&(base, i)| {
            let seed = instance_seed(base, i as u64);
            let mdp = method.generate(seed);
            let label = format!("{base}/{i}");
            match value_iteration(&mdp) {
                Ok(sol) => SeedRecord {
                    seed,
                    label,
                    metrics: metrics([
                        ("policy_pieces", sol.policy.piece_count() as f64),
                        (
                            "q_pieces",
                            sol.q.piece_counts().iter().sum::<usize>() as f64,
                        ),
                        ("eta", sol.eta()),
                    ]),
                },
                Err(e) => {
                    let cap = matches!(e, DpError::PieceCap { .. });
                    SeedRecord {
                        seed,
                        label,
                        metrics: metrics([
                            ("aborted", 1.0),
                            ("piece_cap", f64::from(u8::from(cap))),
                        ]),
                    }
                }
            }
        })
        .collect();

    let mut per = String::from("label,seed,policy_pieces,q_pieces,eta\n");
    for r in &records {
        let get = |k: &str| r.metrics.get(k).map_or(String::new(), |v| v.to_string());
        per.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label,
            r.seed,
            get("policy_pieces"),
            get("q_pieces"),
            get("eta")
        ));
    }
    let counts: Vec<usize> = records
        .iter()
        .filter_map(|r| r.metrics.get("policy_pieces").map(|&p| p as usize))
        .collect();
    let mut hist = String::from("bin_lo,bin_hi,count\n");
    for (lo, hi, c) in decade_histogram(&counts) {
        hist.push_str(&format!("{lo},{hi},{c}\n"));
    }
    RunOutput {
        record: ResultRecord {
            kind: "histogram".into(),
            config_hash: String::new(),
            summary: histogram_summary(&records),
            per_seed: records,
            passed: None,
        },
        artifacts: vec![
            ("instances.csv".into(), per),
            ("histogram.csv".into(), hist),
        ],
    }
}

fn seeded(train: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..*train }
}

/// DQN per `(width, seed)`, scored against the exact optimal `eta`.
pub fn run_expressivity(
    mdp: &Mdp,
    widths: &[usize],
    seeds: &[u64],
    train: &TrainConfig,
) -> Result<RunOutput, BenchError> {
    let opt = value_iteration(mdp)?.eta();
    let jobs: Vec<(usize, u64)> = widths
        .iter()
        .flat_map(|&w| seeds.iter().map(move |&s| (w, s)))
        .collect();
    let runs: Vec<(SeedRecord, (String, String))> = jobs
        .par_iter()
        .map(|&(width, seed)| {
            let label = format!("width={width}");
            let curve_name = format!("curve_w{width}_s{seed}.csv");
            match dqn_train(mdp, width, &seeded(train, seed)) {
                Ok(res) => {
                    let ret = res.final_return();
                    (
                        SeedRecord {
                            seed,
                            label,
                            metrics: metrics([
                                ("width", width as f64),
                                ("final_return", ret),
                                ("ratio", ret / opt),
                            ]),
                        },
                        (curve_name, learner::curve_to_csv(&res.curve)),
                    )
                }
                Err(e) => (
                    SeedRecord {
                        seed,
                        label,
                        metrics: metrics([("width", width as f64), ("diverged", 1.0)]),
                    },
                    (curve_name, format!("error,{e}\n")),
                ),
            }
        })
        .collect();
    let mut summary = metrics([("eta_opt", opt)]);
    for &w in widths {
        let ratios: Vec<f64> = runs
            .iter()
            .filter(|(r, _)| r.metrics["width"] == w as f64)
            .filter_map(|(r, _)| r.metrics.get("ratio").copied())
            .collect();
        put(&mut summary, format!("median_ratio_w{w}"), median(&ratios));
    }
    let (per_seed, artifacts): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok(RunOutput {
        record: ResultRecord {
            kind: "expressivity".into(),
            config_hash: String::new(),
            per_seed,
            summary,
            passed: None,
        },
        artifacts,
    })
}

/// Mean return of BOOTS from `starts`, exhaustive or by shooting.
pub fn planner_return(
    mdp: &Mdp,
    model: &DynModel,
    q: &TerminalQ,
    k: usize,
    planner: &PlannerConfig,
    starts: &[f64],
    seed: u64,
) -> Result<f64, BenchError> {
    let mut agent = BootsAgent::new(mdp, model, q, k, planner.budget);
    if let Some(g) = planner.gamma_eff {
        agent.gamma_eff = g;
    }
    let mut err = None;
    let mut decision = 0u32;
    let ret = mean_return(mdp, starts, |s, remaining| {
        let r = match planner.mode {
            PlanMode::Exhaustive => agent.act(s, remaining),
            PlanMode::Shooting => {
                let depth = if agent.finite {
                    k.min(remaining - 1)
                } else {
                    k
                };
                let leaf = if agent.finite && k >= remaining {
                    &agent.reward_leaf
                } else {
                    q
                };
                let mut rng = shooting_rng(seed, decision);
                decision = decision.wrapping_add(1);
                shooting_policy(
                    model,
                    leaf,
                    agent.gamma_eff,
                    depth,
                    s,
                    planner.n_candidates,
                    false,
                    &mut rng,
                )
            }
        };
        r.unwrap_or_else(|e| {
            err.get_or_insert(e);
            0
        })
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(ret),
    }
}

/// DQN, a dynamics model fitted on every collected transition, then BOOTS for
/// each `k` with the learned model and with the true dynamics.
#[allow(clippy::too_many_arguments)]
pub fn run_boots_sweep(
    mdp: &Mdp,
    ks: &[usize],
    width: usize,
    model_hidden: usize,
    seeds: &[u64],
    train: &TrainConfig,
    planner: &PlannerConfig,
) -> Result<RunOutput, BenchError> {
    let opt = value_iteration(mdp)?.eta();
    let starts = start_grid(train.eval_starts);
    let exact = DynModel::exact(mdp);
    type SeedRun = (SeedRecord, Vec<(String, String)>, String);
    let runs: Vec<Result<SeedRun, BenchError>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = seeded(train, seed);
            let res = dqn_train(mdp, width, &cfg)?;
            let (model, fit) = fit_dynamics(&res.samples, mdp, model_hidden, &cfg)?;
            let q = TerminalQ::Net(res.net.clone());
            let dqn = res.final_return();
            let mut m = metrics([("dqn_return", dqn), ("dqn_ratio", dqn / opt)]);
            for (a, e) in fit.rmse.iter().enumerate() {
                m.insert(format!("model_rmse_a{a}"), *e);
            }
            let mut rows = String::new();
            for &k in ks {
                let learned = planner_return(mdp, &model, &q, k, planner, &starts, seed)?;
                let oracle = planner_return(mdp, &exact, &q, k, planner, &starts, seed)?;
                m.insert(format!("learned_k{k}"), learned);
                m.insert(format!("learned_ratio_k{k}"), learned / opt);
                m.insert(format!("oracle_k{k}"), oracle);
                m.insert(format!("oracle_ratio_k{k}"), oracle / opt);
                rows.push_str(&format!("{seed},{k},learned,{learned},{}\n", learned / opt));
                rows.push_str(&format!("{seed},{k},oracle,{oracle},{}\n", oracle / opt));
            }
            Ok((
                SeedRecord {
                    seed,
                    label: format!("width={width}"),
                    metrics: m,
                },
                vec![(
                    format!("curve_s{seed}.csv"),
                    learner::curve_to_csv(&res.curve),
                )],
                rows,
            ))
        })
        .collect();
    let mut per_seed = Vec::new();
    let mut artifacts = Vec::new();
    let mut sweep = String::from("seed,k,arm,return,ratio\n");
    for r in runs {
        let (rec, arts, rows) = r?;
        per_seed.push(rec);
        artifacts.extend(arts);
        sweep.push_str(&rows);
    }
    artifacts.push(("sweep.csv".into(), sweep));
    let col = |key: &str| -> Vec<f64> { per_seed.iter().map(|r| r.metrics[key]).collect() };
    let mut summary = metrics([
        ("eta_opt", opt),
        ("median_dqn_ratio", median(&col("dqn_ratio"))),
    ]);
    for &k in ks {
        summary.insert(
            format!("median_learned_ratio_k{k}"),
            median(&col(&format!("learned_ratio_k{k}"))),
        );
        summary.insert(
            format!("median_oracle_ratio_k{k}"),
            median(&col(&format!("oracle_ratio_k{k}"))),
        );
        let wins = per_seed
            .iter()
            .filter(|r| r.metrics[&format!("learned_k{k}")] >= r.metrics["dqn_return"])
            .count();
        summary.insert(format!("learned_ge_dqn_k{k}"), wins as f64);
    }
    Ok(RunOutput {
        record: ResultRecord {
            kind: "boots_sweep".into(),
            config_hash: String::new(),
            per_seed,
            summary,
            passed: None,
        },
        artifacts,
    })
}

/// Outcome of planning with the compact Q on the fractal family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm34Report {
    pub h: u32,
    pub k: u32,
    pub pieces: usize,
    pub expected_pieces: usize,
    /// Mean `T`-step discounted return of BOOTS on the PWL MDP.
    pub boots_return: f64,
    /// Mean `T`-step discounted return of the closed-form optimal policy under
    /// the closed-form dynamics.
    pub optimal_return: f64,
    pub tol: f64,
    /// Steps where BOOTS chose a different action than the closed form.
    pub action_mismatches: usize,
    pub passed: bool,
}

/// Plans `k` steps with [`construct_thm34_q`] and the true dynamics from
/// `n_starts` sampled states and compares against the optimal return.
pub fn thm34_check(h: u32, k: u32, n_starts: usize, seed: u64) -> Result<Thm34Report, BenchError> {
    let mdp = make_fractal_mdp(h)?;
    let qf = construct_thm34_q(h, k)?;
    let pieces = qf.per_action[0].piece_count();
    let expected_pieces = 1usize << (h - k + 1);
    let q = TerminalQ::Pwl(qf);
    let model = DynModel::exact(&mdp);
    let g = fractal_gamma(h);
    let steps = mdp.horizon().steps();
    let budget = 1u64 << 20;
    let starts = fractal::sample_bit_states(seed, n_starts);
    let per_start: Vec<Result<(f64, f64, usize), BenchError>> = starts
        .par_iter()
        .map(|&s0| {
            let mut mismatches = 0;
            let mut err = None;
            let boots = rollout_return(
                &mdp,
                |s, _| {
                    let a = crate::planner::boots_policy(&model, &q, g, k as usize, s, budget)
                        .unwrap_or_else(|e| {
                            err.get_or_insert(e);
                            0
                        });
                    if a != fractal::closed_form_pi_star(h, s) {
                        mismatches += 1;
                    }
                    a
                },
                s0,
                steps,
                g,
            );
            if let Some(e) = err {
                return Err(e.into());
            }
            let mut s = s0;
            let mut opt = 0.0;
            let mut disc = 1.0;
            for _ in 0..steps {
                let (next, r) = fractal::closed_form_step(
                    Family::Fractal,
                    h,
                    s,
                    fractal::closed_form_pi_star(h, s),
                );
                opt += disc * r;
                disc *= g;
                s = next;
            }
            Ok((boots, opt, mismatches))
        })
        .collect();
    let mut boots_sum = 0.0;
    let mut opt_sum = 0.0;
    let mut action_mismatches = 0;
    for r in per_start {
        let (b, o, m) = r?;
        boots_sum += b;
        opt_sum += o;
        action_mismatches += m;
    }
    let boots_return = boots_sum / n_starts as f64;
    let optimal_return = opt_sum / n_starts as f64;
    let tol = 3.0 * g.powi(steps as i32) / (1.0 - g);
    Ok(Thm34Report {
        h,
        k,
        pieces,
        expected_pieces,
        boots_return,
        optimal_return,
        tol,
        action_mismatches,
        passed: pieces == expected_pieces && (boots_return - optimal_return).abs() <= tol,
    })
}

fn thm34_record(rep: &Thm34Report, seed: u64) -> SeedRecord {
    SeedRecord {
        seed,
        label: format!("thm34/H={}/k={}", rep.h, rep.k),
        metrics: metrics([
            ("pieces", rep.pieces as f64),
            ("expected_pieces", rep.expected_pieces as f64),
            ("boots_return", rep.boots_return),
            ("optimal_return", rep.optimal_return),
            ("tol", rep.tol),
            ("action_mismatches", rep.action_mismatches as f64),
            ("passed", f64::from(u8::from(rep.passed))),
        ]),
    }
}

/// Series terms for the Bellman check: `4H`, capped by the bit budget.
pub fn verify_terms(h: u32) -> u32 {
    (4 * h).min(fractal::MAX_BIT - 1 - h)
}

/// Minimum share of sampled states where the closed-form greedy action must
/// equal the closed-form policy.
pub const GREEDY_MATCH_MIN: f64 = 0.999;

pub fn run_theory_verify(
    hs: &[u32],
    lipschitz_hs: &[u32],
    n_samples: usize,
    thm34: Option<(u32, &[u32])>,
    n_starts: usize,
    seed: u64,
) -> Result<RunOutput, BenchError> {
    let tasks: Vec<(Family, u32)> = hs
        .iter()
        .map(|&h| (Family::Fractal, h))
        .chain(lipschitz_hs.iter().map(|&h| (Family::Lipschitz, h)))
        .collect();
    let reports: Vec<fractal::BellmanReport> = tasks
        .par_iter()
        .map(|&(f, h)| fractal::verify_bellman(f, h, n_samples, verify_terms(h), seed))
        .collect::<Result<_, DpError>>()?;
    let mut per_seed = Vec::new();
    let mut all_pass = true;
    let mut csv = String::from("family,h,n_samples,n_terms,violations,max_equality_residual,max_inequality_slack,greedy_match\n");
    for r in &reports {
        let ok = r.passed() && r.greedy_match_fraction() >= GREEDY_MATCH_MIN;
        all_pass &= ok;
        let fam = match r.family {
            Family::Fractal => "fractal",
            Family::Lipschitz => "lipschitz",
        };
        csv.push_str(&format!(
            "{fam},{},{},{},{},{},{},{}\n",
            r.h,
            r.n_samples,
            r.n_terms,
            r.violation_count,
            r.max_equality_residual,
            r.max_inequality_slack,
            r.greedy_match_fraction()
        ));
        per_seed.push(SeedRecord {
            seed,
            label: format!("{fam}/H={}", r.h),
            metrics: metrics([
                ("violations", r.violation_count as f64),
                ("max_equality_residual", r.max_equality_residual),
                ("max_inequality_slack", r.max_inequality_slack),
                ("tol", r.tol),
                ("greedy_match", r.greedy_match_fraction()),
                ("passed", f64::from(u8::from(ok))),
            ]),
        });
    }
    let mut artifacts = vec![("bellman.csv".to_string(), csv)];
    if let Some((h, ks)) = thm34 {
        let out = run_thm34(h, ks, n_starts, seed)?;
        all_pass &= out.record.passed == Some(true);
        per_seed.extend(out.record.per_seed);
        artifacts.extend(out.artifacts);
    }
    let checks = per_seed.len() as f64;
    let passed_n = per_seed
        .iter()
        .filter(|r| r.metrics["passed"] == 1.0)
        .count() as f64;
    Ok(RunOutput {
        record: ResultRecord {
            kind: "theory_verify".into(),
            config_hash: String::new(),
            per_seed,
            summary: metrics([("checks", checks), ("passed_checks", passed_n)]),
            passed: Some(all_pass),
        },
        artifacts,
    })
}

pub fn run_thm34(h: u32, ks: &[u32], n_starts: usize, seed: u64) -> Result<RunOutput, BenchError> {
    let mut per_seed = Vec::new();
    let mut csv = String::from(
        "h,k,pieces,expected_pieces,boots_return,optimal_return,tol,action_mismatches,passed\n",
    );
    let mut all = true;
    for &k in ks {
        let rep = thm34_check(h, k, n_starts, seed)?;
        all &= rep.passed;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            rep.h,
            rep.k,
            rep.pieces,
            rep.expected_pieces,
            rep.boots_return,
            rep.optimal_return,
            rep.tol,
            rep.action_mismatches,
            rep.passed
        ));
        per_seed.push(thm34_record(&rep, seed));
    }
    let n = per_seed.len() as f64;
    let passed_n = per_seed
        .iter()
        .filter(|r| r.metrics["passed"] == 1.0)
        .count() as f64;
    Ok(RunOutput {
        record: ResultRecord {
            kind: "thm34".into(),
            config_hash: String::new(),
            per_seed,
            summary: metrics([("checks", n), ("passed_checks", passed_n)]),
            passed: Some(all),
        },
        artifacts: vec![("thm34.csv".into(), csv)],
    })
}

/// Runs a validated config. Seeds beyond the first are ignored by the
/// verification kinds, which are deterministic given one seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, BenchError> {
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let mut out = match &cfg.experiment {
        Experiment::Histogram { method, n_mdps } => run_histogram(*method, *n_mdps, &cfg.seeds),
        Experiment::Expressivity { mdp, widths, train } => {
            run_expressivity(&mdp.build()?, widths, &cfg.seeds, train)?
        }
        Experiment::BootsSweep {
            mdp,
            ks,
            width,
            model_hidden,
            train,
            planner,
        } => run_boots_sweep(
            &mdp.build()?,
            ks,
            *width,
            *model_hidden,
            &cfg.seeds,
            train,
            planner,
        )?,
        Experiment::TheoryVerify {
            hs,
            lipschitz_hs,
            n_samples,
            thm34_h,
            thm34_ks,
            n_starts,
        } => run_theory_verify(
            hs,
            lipschitz_hs,
            *n_samples,
            thm34_h.map(|h| (h, thm34_ks.as_slice())),
            *n_starts,
            seed,
        )?,
        Experiment::Thm34 { h, ks, n_starts } => run_thm34(*h, ks, *n_starts, seed)?,
    };
    out.record.config_hash = cfg.hash();
    Ok(out)
}

/// Runs `f` on a rayon pool with `jobs` workers (all cores when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> BenchError {
    BenchError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// `<root>/<kind>/<tag>`, with a timestamped tag when none is given.
pub fn run_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let base = root.join(cfg.experiment.kind());
    if let Some(tag) = &cfg.tag {
        return base.join(tag);
    }
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut dir = base.join(format!("run-{secs}"));
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("run-{secs}-{n}"));
        n += 1;
    }
    dir
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    config: &'a ExperimentConfig,
    config_hash: String,
}

/// Writes config.json, results.json, timing.json and the CSV artifacts.
pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    out: &RunOutput,
    wall_clock_s: f64,
) -> Result<(), BenchError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let resolved = ResolvedConfig {
        config: cfg,
        config_hash: cfg.hash(),
    };
    write_atomic(&dir.join("config.json"), &pretty(&resolved)?)?;
    write_atomic(&dir.join("results.json"), &pretty(&out.record)?)?;
    let timing = serde_json::json!({ "wall_clock_s": wall_clock_s });
    write_atomic(&dir.join("timing.json"), &pretty(&timing)?)?;
    for (name, body) in &out.artifacts {
        write_atomic(&dir.join(name), body.as_bytes())?;
    }
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>, BenchError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}
