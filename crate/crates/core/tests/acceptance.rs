//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` fail against their published targets for
//! reasons recorded in the README. They are still computed and reported as
//! FAIL; the process exits nonzero if any other criterion fails or if a known
//! red criterion starts passing. Pass criterion numbers as arguments to run a
//! subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use boots_core::bench::{
    run_boots_sweep, run_experiment, run_histogram, run_theory_verify, run_thm34, write_run,
    ExperimentConfig, GenMethod,
};
use boots_core::learner::TrainConfig;
use boots_core::nn::{MlpNet, Workspace};
use boots_core::oracle::{grid_dp_oracle, grid_error_bound};
use boots_core::planner::PlannerConfig;
use boots_core::pwl::Line;
use boots_core::rng::{child, Stream};
use boots_core::{argmax_select, gen_semirand, semirand_reference, value_iteration, PwlFunction};
use rand::Rng;

const KNOWN_RED: &[u32] = &[1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(limit_s: u64, t: Duration) -> (bool, String) {
    (
        t.as_secs_f64() <= limit_s as f64,
        format!("{:.1}s (limit {limit_s}s)", t.as_secs_f64()),
    )
}

fn c1() -> Outcome {
    let t0 = Instant::now();
    let sol = value_iteration(&semirand_reference()).expect("reference DP");
    let (time_ok, time) = within(120, t0.elapsed());
    let policy = sol.policy.piece_count();
    let q: usize = sol.q.piece_counts().iter().sum();
    Outcome {
        pass: (727..=803).contains(&policy) && (36_000..=44_000).contains(&q) && time_ok,
        detail: format!(
            "policy_pieces={policy} (want 727..=803) q_pieces={q} (want 36000..=44000) {time}"
        ),
    }
}

fn c2() -> Outcome {
    let t0 = Instant::now();
    let rand = run_histogram(GenMethod::Rand, 1000, &[0]).record.summary;
    let semi = run_histogram(GenMethod::Semirand, 1000, &[0])
        .record
        .summary;
    let (time_ok, time) = within(1800, t0.elapsed());
    let fr = rand["frac_gt_100"];
    let fs = semi["frac_gt_1000"];
    let ok_r = (0.046..=0.126).contains(&fr);
    let ok_s = (0.607..=0.767).contains(&fs);
    Outcome {
        pass: ok_r && ok_s && time_ok,
        detail: format!(
            "rand frac>100={fr:.3} ({}) semirand frac>1000={fs:.3} ({}) {time}",
            if ok_r {
                "in band"
            } else {
                "want 0.046..=0.126"
            },
            if ok_s {
                "in band"
            } else {
                "want 0.607..=0.767"
            }
        ),
    }
}

fn c3() -> Outcome {
    let t0 = Instant::now();
    let out = run_theory_verify(&[4, 6, 8, 10], &[4, 6, 8], 10_000, None, 1, 0).expect("verify");
    let (time_ok, time) = within(60, t0.elapsed());
    let rows: Vec<String> = out
        .record
        .per_seed
        .iter()
        .map(|r| {
            format!(
                "{}:v={},match={:.4}",
                r.label, r.metrics["violations"], r.metrics["greedy_match"]
            )
        })
        .collect();
    Outcome {
        pass: out.record.passed == Some(true) && time_ok,
        detail: format!("{} {time}", rows.join(" ")),
    }
}

fn c4() -> Outcome {
    let t0 = Instant::now();
    let out = run_thm34(8, &[1, 3, 5, 8], 1000, 0).expect("thm34");
    let (time_ok, time) = within(120, t0.elapsed());
    let rows: Vec<String> = out
        .record
        .per_seed
        .iter()
        .map(|r| {
            let m = &r.metrics;
            format!(
                "k={}:pieces={}/{},gap={:.2e}<=tol={:.2e}",
                r.label.rsplit('=').next().unwrap_or("?"),
                m["pieces"],
                m["expected_pieces"],
                (m["boots_return"] - m["optimal_return"]).abs(),
                m["tol"]
            )
        })
        .collect();
    Outcome {
        pass: out.record.passed == Some(true) && time_ok,
        detail: format!("{} {time}", rows.join(" ")),
    }
}

/// Random PWL with values in `[lo, hi]`, continuous or not.
fn random_pwl(rng: &mut boots_core::rng::Rng, lo: f64, hi: f64) -> PwlFunction {
    let n = rng.gen_range(1..=12);
    let mut cuts: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(0.001..0.999)).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut bps = vec![0.0];
    bps.extend(cuts);
    bps.push(1.0);
    let continuous = rng.gen_bool(0.5);
    let mut prev: Option<f64> = None;
    let lines: Vec<Line> = bps
        .windows(2)
        .map(|w| {
            let a = match (continuous, prev) {
                (true, Some(p)) => p,
                _ => rng.gen_range(lo..=hi),
            };
            let b = rng.gen_range(lo..=hi);
            prev = Some(b);
            let m = (b - a) / (w[1] - w[0]);
            Line::new(m, a - m * w[0])
        })
        .collect();
    PwlFunction::from_lines(bps, &lines).expect("valid random pwl")
}

/// Linear-scan evaluation, independent of the library's lookup.
fn scan(f: &PwlFunction, s: f64) -> f64 {
    let bps = f.breakpoints();
    let mut i = 0;
    while i + 1 < f.piece_count() && s >= bps[i + 1] {
        i += 1;
    }
    f.slopes()[i] * s + f.intercepts()[i]
}

fn c5() -> Outcome {
    let t0 = Instant::now();
    let mut rng = child(2024, Stream::Sampling, 5);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let f = random_pwl(&mut rng, -3.0, 3.0);
        let g = random_pwl(&mut rng, -3.0, 3.0);
        let inner = random_pwl(&mut rng, 0.0, 1.0);
        let comp = f.compose(&inner).expect("compose");
        let max = f.pointwise_max(&g);
        let aff = f.affine_combine(&g, 0.7, -1.3);
        let (policy, v) = argmax_select(&[f.clone(), g.clone()]).expect("argmax");
        for _ in 0..100_000 {
            let s: f64 = rng.gen();
            let (fs, gs) = (scan(&f, s), scan(&g, s));
            let want_max = fs.max(gs);
            worst[0] =
                worst[0].max((scan(&comp, s) - scan(&f, scan(&inner, s).clamp(0.0, 1.0))).abs());
            worst[1] = worst[1].max((scan(&max, s) - want_max).abs());
            worst[2] = worst[2].max((scan(&aff, s) - (0.7 * fs - 1.3 * gs)).abs());
            let chosen = if policy.action_at(s) == 0 { fs } else { gs };
            worst[3] = worst[3]
                .max((chosen - want_max).abs())
                .max((v.value(s) - want_max).abs());
        }
    }
    let kernel_ok = worst.iter().all(|&w| w <= 1e-9);

    let mut grid_ok = true;
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..20 {
        let mdp = gen_semirand(seed);
        let n = 20_000;
        let sol = value_iteration(&mdp).expect("semirand DP");
        let grid = grid_dp_oracle(&mdp, n);
        let bound = grid_error_bound(&sol, mdp.gamma_eff(), n);
        for h in 1..=grid.steps() {
            let mut gap: f64 = 0.0;
            for a in 0..grid.actions {
                for i in 0..n {
                    gap = gap
                        .max((grid.q(h, a, i) - sol.history[h - 1].value(grid.state(i), a)).abs());
                }
            }
            grid_ok &= gap <= bound[h - 1] + 1e-9;
            if bound[h - 1] > 0.0 {
                worst_ratio = worst_ratio.max(gap / bound[h - 1]);
            }
        }
    }
    let (time_ok, time) = within(300, t0.elapsed());
    Outcome {
        pass: kernel_ok && grid_ok && time_ok,
        detail: format!(
            "max err compose={:.1e} max={:.1e} affine={:.1e} argmax={:.1e}; grid oracle within bound on 20 MDPs: {grid_ok} (worst gap/bound {worst_ratio:.3}) {time}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    }
}

fn c6() -> Outcome {
    let t0 = Instant::now();
    let mdp = semirand_reference();
    let seeds = [0, 1, 2, 3, 4];
    let out = run_boots_sweep(
        &mdp,
        &[3],
        64,
        32,
        &seeds,
        &TrainConfig::default(),
        &PlannerConfig::exhaustive(3),
    )
    .expect("boots sweep");
    let (time_ok, time) = within(3600, t0.elapsed());
    let s = &out.record.summary;
    let dqn = s["median_dqn_ratio"];
    let boots = s["median_learned_ratio_k3"];
    let wins = s["learned_ge_dqn_k3"];
    Outcome {
        pass: dqn <= 0.98 && boots >= 0.95 && wins >= 4.0 && time_ok,
        detail: format!(
            "median DQN/opt={dqn:.3} (<=0.98) median BOOTS(k=3,learned)/opt={boots:.3} (>=0.95) BOOTS>=DQN on {wins}/5 seeds {time}"
        ),
    }
}

fn c7() -> Outcome {
    let t0 = Instant::now();
    let mut rng = child(77, Stream::Init, 1);
    let mut worst_fd: f64 = 0.0;
    for widths in [vec![1, 16, 2], vec![1, 8, 8, 3], vec![1, 32, 5]] {
        for _ in 0..5 {
            let mut net = MlpNet::init(&widths, &mut rng).expect("net");
            let s: f64 = rng.gen();
            let c: Vec<f64> = (0..net.output_count())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let loss = |n: &MlpNet| n.forward(s).iter().zip(&c).map(|(o, w)| o * w).sum::<f64>();
            let mut ws = Workspace::default();
            net.forward_ws(s, &mut ws);
            let mut grad = vec![0.0; net.params().len()];
            net.backward_ws(&c, &mut grad, &mut ws);
            let eps = 1e-6;
            let mut diff2 = 0.0;
            let mut norm2: f64 = 0.0;
            for i in 0..grad.len() {
                let p = net.params()[i];
                net.params_mut()[i] = p + eps;
                let up = loss(&net);
                net.params_mut()[i] = p - eps;
                let down = loss(&net);
                net.params_mut()[i] = p;
                let fd = (up - down) / (2.0 * eps);
                diff2 += (fd - grad[i]).powi(2);
                norm2 = norm2.max(fd * fd).max(grad[i] * grad[i]);
            }
            let rel = diff2.sqrt() / norm2.sqrt().max(1e-12);
            worst_fd = worst_fd.max(rel);
        }
    }

    let mut worst_pwl: f64 = 0.0;
    let mut worst_pieces_ok = true;
    let mut max_ratio: f64 = 0.0;
    for i in 0..1000 {
        let width = 1 + i % 64;
        let net = MlpNet::init(&[1, width, 2], &mut rng).expect("net");
        let pwl = net.to_pwl().expect("shallow");
        if i < 50 {
            for j in 0..2000 {
                let s = (j as f64 + 0.5) / 2000.0;
                let out = net.forward(s);
                for (o, f) in out.iter().zip(&pwl) {
                    worst_pwl = worst_pwl.max((o - f.value(s)).abs());
                }
            }
        }
        let (policy, _) = argmax_select(&pwl).expect("greedy");
        let bound = 2 * (width + 1);
        worst_pieces_ok &= policy.piece_count() <= bound;
        max_ratio = max_ratio.max(policy.piece_count() as f64 / bound as f64);
    }
    let (time_ok, time) = within(120, t0.elapsed());
    Outcome {
        pass: worst_fd <= 1e-4 && worst_pwl <= 1e-9 && worst_pieces_ok && time_ok,
        detail: format!(
            "finite-diff rel err={worst_fd:.1e} (<=1e-4) to_pwl err={worst_pwl:.1e} (<=1e-9) greedy pieces<=2(width+1) on 1000 nets: {worst_pieces_ok} (max ratio {max_ratio:.2}) {time}"
        ),
    }
}

fn c8() -> Outcome {
    let configs = [
        r#"{"experiment":{"kind":"histogram","method":"semirand","n_mdps":60},"seeds":[5,6],"tag":"d"}"#,
        r#"{"experiment":{"kind":"thm34","h":6,"ks":[1,3,6],"n_starts":200},"seeds":[2],"tag":"d"}"#,
        r#"{"experiment":{"kind":"theory_verify","hs":[4],"lipschitz_hs":[4],"n_samples":2000},"seeds":[1],"tag":"d"}"#,
        r#"{"experiment":{"kind":"expressivity","mdp":{"kind":"reference"},"widths":[4,8],
            "train":{"episodes":60,"eval_period":20}},"seeds":[1,2],"tag":"d"}"#,
        r#"{"experiment":{"kind":"boots_sweep","mdp":{"kind":"semirand","seed":3},"ks":[0,2],"width":8,
            "model_hidden":8,"train":{"episodes":40,"eval_period":20,"model_updates":200,"fit_updates":100},
            "planner":{"mode":"shooting","n_candidates":8}},"seeds":[1,2],"tag":"d"}"#,
    ];
    let dir = tempfile::tempdir().expect("tempdir");
    let mut identical = 0;
    let mut mismatched = Vec::new();
    for text in configs {
        let cfg = ExperimentConfig::from_json(text).expect("config");
        let kind = cfg.experiment.kind();
        let mut bodies = Vec::new();
        for (run, jobs) in [(0, None), (1, Some(1))] {
            let out = boots_core::bench::with_jobs(jobs, || run_experiment(&cfg)).expect("run");
            let d = dir.path().join(format!("{kind}-{run}"));
            write_run(&d, &cfg, &out, 0.0).expect("write");
            bodies.push(std::fs::read(d.join("results.json")).expect("read"));
        }
        if bodies[0] == bodies[1] {
            identical += 1;
        } else {
            mismatched.push(kind);
        }
    }
    Outcome {
        pass: mismatched.is_empty(),
        detail: format!(
            "{identical}/{} experiment kinds byte-identical across reruns and thread counts{}",
            configs.len(),
            if mismatched.is_empty() {
                String::new()
            } else {
                format!(", differing: {mismatched:?}")
            }
        ),
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "reference piece counts", c1),
        (2, "histogram fractions", c2),
        (3, "closed-form Bellman suite", c3),
        (4, "compact-Q planning optimality", c4),
        (5, "PWL kernel and grid oracle", c5),
        (6, "BOOTS vs DQN on reference MDP", c6),
        (7, "learner numerics", c7),
        (8, "determinism", c8),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut unexpected = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        });
        let red = KNOWN_RED.contains(&n);
        let tag = match (out.pass, red) {
            (true, false) => "PASS",
            (false, true) => "FAIL (known red)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
            (true, true) => {
                unexpected += 1;
                "PASS (listed as known red; update KNOWN_RED)"
            }
        };
        println!("criterion {n} [{name}]: {tag}: {}", out.detail);
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria did not match their expected outcome");
        std::process::exit(1);
    }
}
