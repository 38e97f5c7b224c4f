use boots_core::dp::value_iteration;
use boots_core::mdp::fractal_gamma;
use boots_core::planner::{
    boots_policy, boots_value, shooting_policy, shooting_rng, DynModel, TerminalQ, DEFAULT_BUDGET,
};
use boots_core::rng::{child, Stream};
use boots_core::{gen_semirand, make_fractal_mdp, semirand_reference, HorizonSpec, Mdp};
use proptest::prelude::*;
use rand::Rng;

fn dominance_gap(mdp: &Mdp, h: usize, k: usize, n: usize) -> f64 {
    let sol = value_iteration(mdp).unwrap();
    let q = TerminalQ::Pwl(sol.history[h - 1].clone());
    let target = &sol.history[h + k - 1];
    let model = DynModel::exact(mdp);
    let mut rng = child(h as u64 * 31 + k as u64, Stream::Sampling, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let s: f64 = rng.gen();
        let a = rng.gen_range(0..mdp.action_count());
        let planned = boots_value(&model, &q, mdp.gamma_eff(), k, s, a, DEFAULT_BUDGET).unwrap();
        worst = worst.max((planned - target.value(s, a)).abs());
    }
    worst
}

#[test]
fn planning_on_exact_q_composes_backups() {
    let reference = semirand_reference();
    for (h, k) in [(1, 1), (2, 3), (4, 5), (6, 4), (1, 9)] {
        let gap = dominance_gap(&reference, h, k, 10_000);
        assert!(gap <= 1e-7, "h={h} k={k} gap={gap}");
    }
    let gap = dominance_gap(&gen_semirand(11), 3, 4, 10_000);
    assert!(gap <= 1e-7, "{gap}");
}

#[test]
fn planning_composes_discounted_backups() {
    let h = 4;
    let mdp = make_fractal_mdp(h)
        .unwrap()
        .with_horizon(HorizonSpec::Discounted {
            gamma: fractal_gamma(h),
            truncation: 12,
        })
        .unwrap();
    for (steps, k) in [(2, 3), (5, 6)] {
        let gap = dominance_gap(&mdp, steps, k, 10_000);
        assert!(gap <= 1e-7, "steps={steps} k={k} gap={gap}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn k0_is_greedy(xs in prop::collection::vec(0.0f64..=1.0, 32), steps in 1usize..=10) {
        let mdp = semirand_reference();
        let sol = value_iteration(&mdp).unwrap();
        let qf = sol.history[steps - 1].clone();
        let q = TerminalQ::Pwl(qf);
        let model = DynModel::exact(&mdp);
        for s in xs {
            let a = boots_policy(&model, &q, 1.0, 0, s, DEFAULT_BUDGET).unwrap();
            prop_assert_eq!(a, q.greedy(s));
        }
    }

    #[test]
    fn exhaustive_shooting_matches_enumeration(seed in 0u64..1000, k in 0usize..4, xs in prop::collection::vec(0.0f64..1.0, 16)) {
        let mdp = gen_semirand(seed);
        let sol = value_iteration(&mdp).unwrap();
        let q = TerminalQ::Pwl(sol.history[2].clone());
        let model = DynModel::exact(&mdp);
        for (i, s) in xs.into_iter().enumerate() {
            let want = boots_policy(&model, &q, 1.0, k, s, DEFAULT_BUDGET).unwrap();
            let mut rng = shooting_rng(seed, i as u32);
            let n = 1usize << (k + 1);
            let got = shooting_policy(&model, &q, 1.0, k, s, n, true, &mut rng).unwrap();
            prop_assert_eq!(got, want);
        }
    }
}
