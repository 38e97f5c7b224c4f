//! k-step bootstrapped planning (BOOTS) over a true or learned model.
//!
//! `B^k[Q](s, a) = max over a_1..a_k of
//! sum_{h<k} g^h r(s_h, a_h) + g^k Q(s_k, a_k)`, with `s_0 = s`, `a_0 = a`.
//! All search code accumulates returns through [`SequenceSum`], so exhaustive
//! enumeration and random shooting produce bit-identical values for the same
//! action sequence.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dp::QFunction;
use crate::error::{LearnError, PlanError};
use crate::mdp::Mdp;
use crate::nn::{MlpNet, Workspace};
use crate::pwl::PwlFunction;
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
enum Transition {
    Exact(Vec<PwlFunction>),
    /// One scalar-output net per action.
    Learned(Vec<MlpNet>),
}

/// Deterministic `(s, a) -> s'` map plus the known reward.
#[derive(Debug, Clone)]
pub struct DynModel {
    transition: Transition,
    reward: Vec<PwlFunction>,
}

impl DynModel {
    pub fn exact(mdp: &Mdp) -> Self {
        Self {
            transition: Transition::Exact(mdp.dynamics().to_vec()),
            reward: mdp.reward().to_vec(),
        }
    }

    /// Learned transitions with the rewards of `mdp`.
    pub fn learned(nets: Vec<MlpNet>, mdp: &Mdp) -> Result<Self, LearnError> {
        if nets.len() != mdp.action_count() {
            return Err(LearnError::Shape(format!(
                "{} dynamics nets for {} actions",
                nets.len(),
                mdp.action_count()
            )));
        }
        if let Some(n) = nets.iter().find(|n| n.output_count() != 1) {
            return Err(LearnError::Shape(format!(
                "dynamics net with {} outputs",
                n.output_count()
            )));
        }
        Ok(Self {
            transition: Transition::Learned(nets),
            reward: mdp.reward().to_vec(),
        })
    }

    pub fn action_count(&self) -> usize {
        self.reward.len()
    }

    pub fn is_learned(&self) -> bool {
        matches!(self.transition, Transition::Learned(_))
    }

    /// The transition networks of a learned model.
    pub fn nets(&self) -> Option<&[MlpNet]> {
        match &self.transition {
            Transition::Learned(n) => Some(n),
            Transition::Exact(_) => None,
        }
    }

    /// Next state, clamped to `[0, 1]`.
    pub fn next(&self, s: f64, a: usize) -> f64 {
        let x = match &self.transition {
            Transition::Exact(f) => f[a].value(s),
            Transition::Learned(nets) => {
                let mut ws = Workspace::default();
                nets[a].forward_ws(s, &mut ws)[0]
            }
        };
        if x.is_nan() {
            0.0
        } else {
            x.clamp(0.0, 1.0)
        }
    }

    pub fn reward(&self, s: f64, a: usize) -> f64 {
        self.reward[a].value(s)
    }
}

/// Leaf values of the planner.
#[derive(Debug, Clone)]
pub enum TerminalQ {
    Pwl(QFunction),
    Net(MlpNet),
    /// `Q(s, a) = r(s, a)`: the exact value with one step to go.
    Reward(Vec<PwlFunction>),
}

impl TerminalQ {
    pub fn action_count(&self) -> usize {
        match self {
            TerminalQ::Pwl(q) => q.action_count(),
            TerminalQ::Net(n) => n.output_count(),
            TerminalQ::Reward(r) => r.len(),
        }
    }

    /// All action values at `s`, written into `out`.
    pub fn values_into(&self, s: f64, out: &mut Vec<f64>) {
        out.clear();
        match self {
            TerminalQ::Pwl(q) => out.extend(q.per_action.iter().map(|f| f.value(s))),
            TerminalQ::Net(n) => {
                let mut ws = Workspace::default();
                out.extend_from_slice(n.forward_ws(s, &mut ws));
            }
            TerminalQ::Reward(r) => out.extend(r.iter().map(|f| f.value(s))),
        }
    }

    pub fn value(&self, s: f64, a: usize) -> f64 {
        let mut v = Vec::new();
        self.values_into(s, &mut v);
        v[a]
    }

    /// Lowest index among maximal values.
    pub fn greedy(&self, s: f64) -> usize {
        let mut v = Vec::new();
        self.values_into(s, &mut v);
        argmax_first(&v)
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Running discounted sum along an action sequence.
#[derive(Debug, Clone, Copy)]
struct SequenceSum {
    total: f64,
    discount: f64,
}

impl SequenceSum {
    const START: SequenceSum = SequenceSum {
        total: 0.0,
        discount: 1.0,
    };

    fn add_reward(self, r: f64, gamma: f64) -> Self {
        SequenceSum {
            total: self.total + self.discount * r,
            discount: self.discount * gamma,
        }
    }

    fn finish(self, q: f64) -> f64 {
        self.total + self.discount * q
    }
}

/// Value of one action sequence `a_0..a_k` (length `k + 1`) from `s`.
pub fn sequence_value(
    model: &DynModel,
    q: &TerminalQ,
    gamma_eff: f64,
    s: f64,
    actions: &[usize],
) -> f64 {
    let (last, prefix) = actions.split_last().expect("non-empty sequence");
    let mut acc = SequenceSum::START;
    let mut state = s;
    for &a in prefix {
        acc = acc.add_reward(model.reward(state, a), gamma_eff);
        state = model.next(state, a);
    }
    acc.finish(q.value(state, *last))
}

/// Search parameters shared by the planners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub mode: PlanMode,
    #[serde(default)]
    pub k: usize,
    /// Sequences sampled per decision in shooting mode.
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    /// Per-step discount inside the plan; `None` follows the MDP horizon.
    #[serde(default)]
    pub gamma_eff: Option<f64>,
    /// Cap on the number of enumerated action sequences per decision.
    #[serde(default = "default_budget")]
    pub budget: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Exhaustive,
    Shooting,
}

fn default_candidates() -> usize {
    64
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

pub const DEFAULT_BUDGET: u64 = 10_000_000;

impl PlannerConfig {
    pub fn exhaustive(k: usize) -> Self {
        Self {
            mode: PlanMode::Exhaustive,
            k,
            n_candidates: default_candidates(),
            gamma_eff: None,
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.n_candidates == 0 {
            return Err(PlanError::Invalid("n_candidates must be >= 1".into()));
        }
        if let Some(g) = self.gamma_eff {
            if !(g > 0.0 && g <= 1.0) {
                return Err(PlanError::Invalid(format!("gamma_eff {g} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

fn check_budget(actions: usize, depth: usize, budget: u64) -> Result<(), PlanError> {
    let sequences = (actions as u128)
        .checked_pow(depth as u32 + 1)
        .unwrap_or(u128::MAX);
    if sequences > budget as u128 {
        return Err(PlanError::Budget { sequences, budget });
    }
    Ok(())
}

fn check_actions(model: &DynModel, q: &TerminalQ) -> Result<(), PlanError> {
    if model.action_count() != q.action_count() {
        return Err(PlanError::Invalid(format!(
            "model has {} actions, terminal Q has {}",
            model.action_count(),
            q.action_count()
        )));
    }
    Ok(())
}

struct Search<'a> {
    model: &'a DynModel,
    q: &'a TerminalQ,
    gamma: f64,
    leaf: Vec<f64>,
}

impl Search<'_> {
    /// Best completion after `acc` was accumulated and `state` reached, with
    /// `depth` more rewards to collect before the leaf.
    fn best(&mut self, state: f64, acc: SequenceSum, depth: usize) -> f64 {
        if depth == 0 {
            self.q.values_into(state, &mut self.leaf);
            return self
                .leaf
                .iter()
                .map(|&v| acc.finish(v))
                .fold(f64::NEG_INFINITY, f64::max);
        }
        let mut best = f64::NEG_INFINITY;
        for a in 0..self.model.action_count() {
            let next = acc.add_reward(self.model.reward(state, a), self.gamma);
            let v = self.best(self.model.next(state, a), next, depth - 1);
            best = best.max(v);
        }
        best
    }

    fn first_action_value(&mut self, s: f64, a: usize, k: usize) -> f64 {
        if k == 0 {
            return self.q.value(s, a);
        }
        let acc = SequenceSum::START.add_reward(self.model.reward(s, a), self.gamma);
        self.best(self.model.next(s, a), acc, k - 1)
    }
}

/// `B^k[q](s, a)` by exhaustive depth-first enumeration.
pub fn boots_value(
    model: &DynModel,
    q: &TerminalQ,
    gamma_eff: f64,
    k: usize,
    s: f64,
    a: usize,
    budget: u64,
) -> Result<f64, PlanError> {
    check_actions(model, q)?;
    check_budget(model.action_count(), k, budget)?;
    let mut search = Search {
        model,
        q,
        gamma: gamma_eff,
        leaf: Vec::new(),
    };
    Ok(search.first_action_value(s, a, k))
}

/// Greedy first action of `B^k[q]`; ties go to the lowest index.
pub fn boots_policy(
    model: &DynModel,
    q: &TerminalQ,
    gamma_eff: f64,
    k: usize,
    s: f64,
    budget: u64,
) -> Result<usize, PlanError> {
    Ok(boots_values(model, q, gamma_eff, k, s, budget)?.0)
}

/// Greedy first action and the value of every first action.
pub fn boots_values(
    model: &DynModel,
    q: &TerminalQ,
    gamma_eff: f64,
    k: usize,
    s: f64,
    budget: u64,
) -> Result<(usize, Vec<f64>), PlanError> {
    check_actions(model, q)?;
    check_budget(model.action_count(), k, budget)?;
    let mut search = Search {
        model,
        q,
        gamma: gamma_eff,
        leaf: Vec::new(),
    };
    let values: Vec<f64> = (0..model.action_count())
        .map(|a| search.first_action_value(s, a, k))
        .collect();
    Ok((argmax_first(&values), values))
}

/// Random shooting: scores `n_candidates` action sequences of length `k + 1`
/// and returns the first action of the best one (ties to the lower first
/// action). With `exhaustive` set, sequences are drawn without replacement, so
/// `n_candidates >= |A|^(k+1)` enumerates them all.
#[allow(clippy::too_many_arguments)]
pub fn shooting_policy(
    model: &DynModel,
    q: &TerminalQ,
    gamma_eff: f64,
    k: usize,
    s: f64,
    n_candidates: usize,
    exhaustive: bool,
    rng: &mut rng::Rng,
) -> Result<usize, PlanError> {
    check_actions(model, q)?;
    if n_candidates == 0 {
        return Err(PlanError::Invalid("n_candidates must be >= 1".into()));
    }
    let na = model.action_count();
    let len = k + 1;
    let mut seq = vec![0usize; len];
    let mut best: Option<(f64, usize)> = None;
    let consider = |seq: &[usize], best: &mut Option<(f64, usize)>| {
        let v = sequence_value(model, q, gamma_eff, s, seq);
        let better = match *best {
            None => true,
            Some((bv, ba)) => v > bv || (v == bv && seq[0] < ba),
        };
        if better {
            *best = Some((v, seq[0]));
        }
    };
    if exhaustive {
        check_budget(na, k, u64::MAX >> 1)?;
        let total = (na as u128).pow(len as u32);
        let total = usize::try_from(total)
            .map_err(|_| PlanError::Invalid("sequence space too large".into()))?;
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(rng);
        for &code in order.iter().take(n_candidates) {
            let mut c = code;
            for slot in seq.iter_mut().rev() {
                *slot = c % na;
                c /= na;
            }
            consider(&seq, &mut best);
        }
    } else {
        for _ in 0..n_candidates {
            for slot in seq.iter_mut() {
                *slot = rng.gen_range(0..na);
            }
            consider(&seq, &mut best);
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Shooting with a per-state stream derived from `seed`.
pub fn shooting_rng(seed: u64, index: u32) -> rng::Rng {
    rng::child(seed, Stream::Shooting, index)
}

/// The compact Q that makes `k`-step planning optimal on the fractal family:
/// `2/(1-g)` on `G = {s : bits H-k+1..H of s are all 1}` and 0 elsewhere, for
/// both actions. Has `2^(H-k+1)` pieces.
pub fn construct_thm34_q(h: u32, k: u32) -> Result<QFunction, PlanError> {
    if k < 1 || k > h || h > 30 {
        return Err(PlanError::Invalid(format!(
            "need 1 <= k <= H <= 30, got H={h}, k={k}"
        )));
    }
    let gamma = crate::mdp::fractal_gamma(h);
    let height = 2.0 / (1.0 - gamma);
    let blocks = 1usize << (h - k);
    let unit = (-(h as f64)).exp2();
    let block = (-((h - k) as f64)).exp2();
    let mut xs = Vec::with_capacity(2 * blocks + 1);
    let mut vals = Vec::with_capacity(2 * blocks);
    for j in 0..blocks {
        let start = j as f64 * block;
        xs.push(start);
        vals.push(0.0);
        xs.push(start + ((1u64 << k) - 1) as f64 * unit);
        vals.push(height);
    }
    xs.push(1.0);
    let f = PwlFunction::step(&xs, &vals).map_err(|e| PlanError::Invalid(e.to_string()))?;
    Ok(QFunction {
        per_action: vec![f.clone(), f],
        steps: 0,
        discount: Some(gamma),
    })
}

/// `sum_{t<T} g^t r(s_t, a_t)` under `act(s, steps_remaining)` on the true MDP.
pub fn rollout_return(
    mdp: &Mdp,
    mut act: impl FnMut(f64, usize) -> usize,
    s0: f64,
    steps: usize,
    gamma_eff: f64,
) -> f64 {
    let mut s = s0;
    let mut acc = SequenceSum::START;
    for t in 0..steps {
        let a = act(s, steps - t);
        acc = acc.add_reward(mdp.reward_at(s, a), gamma_eff);
        s = mdp.next_state(s, a);
    }
    acc.total
}

/// Plan depth and leaf for a decision with `remaining` steps to go: depth
/// `min(k, remaining - 1)`, and the exact one-step leaf `r` once the plan
/// reaches the end of the horizon.
pub fn finite_horizon_plan<'a>(
    k: usize,
    remaining: usize,
    q: &'a TerminalQ,
    reward_leaf: &'a TerminalQ,
) -> (usize, &'a TerminalQ) {
    let depth = k.min(remaining.saturating_sub(1));
    if k >= remaining {
        (depth, reward_leaf)
    } else {
        (depth, q)
    }
}

/// BOOTS acting on `mdp`'s horizon: finite horizons truncate the plan at the
/// end of the episode, discounted ones always plan `k` steps.
pub struct BootsAgent<'a> {
    pub model: &'a DynModel,
    pub q: &'a TerminalQ,
    pub reward_leaf: TerminalQ,
    pub k: usize,
    pub gamma_eff: f64,
    pub finite: bool,
    pub budget: u64,
}

impl<'a> BootsAgent<'a> {
    pub fn new(mdp: &Mdp, model: &'a DynModel, q: &'a TerminalQ, k: usize, budget: u64) -> Self {
        Self {
            model,
            q,
            reward_leaf: TerminalQ::Reward(mdp.reward().to_vec()),
            k,
            gamma_eff: mdp.gamma_eff(),
            finite: mdp.horizon().discount().is_none(),
            budget,
        }
    }

    pub fn act(&self, s: f64, remaining: usize) -> Result<usize, PlanError> {
        let (depth, leaf) = if self.finite {
            finite_horizon_plan(self.k, remaining, self.q, &self.reward_leaf)
        } else {
            (self.k, self.q)
        };
        boots_policy(self.model, leaf, self.gamma_eff, depth, s, self.budget)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fractal::{closed_form_pi_star, sample_bit_states};
    use crate::mdp::{make_fractal_mdp, semirand_reference};

    #[test]
    fn k0_is_q() {
        let m = semirand_reference();
        let model = DynModel::exact(&m);
        let q = TerminalQ::Reward(vec![
            PwlFunction::identity(),
            PwlFunction::linear(-1.0, 1.0),
        ]);
        for s in [0.1, 0.7] {
            for a in 0..2 {
                assert_eq!(
                    boots_value(&model, &q, 1.0, 0, s, a, 100).unwrap(),
                    q.value(s, a)
                );
            }
            assert_eq!(
                boots_policy(&model, &q, 1.0, 0, s, 100).unwrap(),
                q.greedy(s)
            );
        }
    }

    #[test]
    fn k1_is_one_step_unroll() {
        let m = semirand_reference();
        let model = DynModel::exact(&m);
        let q = TerminalQ::Reward(vec![
            PwlFunction::identity(),
            PwlFunction::linear(-1.0, 1.0),
        ]);
        for s in [0.05, 0.5, 0.93] {
            for a in 0..2 {
                let n = m.next_state(s, a);
                let expect = m.reward_at(s, a) + 0.9 * q.value(n, 0).max(q.value(n, 1));
                let got = boots_value(&model, &q, 0.9, 1, s, a, 100).unwrap();
                assert!((got - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn budget_guard() {
        let m = semirand_reference();
        let model = DynModel::exact(&m);
        let q = TerminalQ::Reward(m.reward().to_vec());
        assert!(matches!(
            boots_value(&model, &q, 1.0, 10, 0.3, 0, 1000),
            Err(PlanError::Budget {
                sequences: 2048,
                budget: 1000
            })
        ));
    }

    #[test]
    fn thm34_pieces_and_values() {
        let q = construct_thm34_q(4, 2).unwrap();
        let f = &q.per_action[0];
        assert_eq!(f.piece_count(), 8);
        assert_eq!(
            f.breakpoints(),
            &[
                0.0,
                3.0 / 16.0,
                0.25,
                7.0 / 16.0,
                0.5,
                11.0 / 16.0,
                0.75,
                15.0 / 16.0,
                1.0
            ]
        );
        assert_eq!(f.value(3.5 / 16.0), 8.0);
        assert_eq!(f.value(2.0 / 16.0), 0.0);
        // k = H: every one of bits 1..H set.
        let q = construct_thm34_q(5, 5).unwrap();
        assert_eq!(q.per_action[0].breakpoints(), &[0.0, 31.0 / 32.0, 1.0]);
        for k in 1..=8 {
            assert_eq!(
                construct_thm34_q(8, k).unwrap().per_action[1].piece_count(),
                1 << (9 - k)
            );
        }
        assert!(construct_thm34_q(4, 0).is_err());
        assert!(construct_thm34_q(4, 5).is_err());
    }

    #[test]
    fn thm34_planning_matches_pi_star() {
        let h = 6;
        let m = make_fractal_mdp(h).unwrap();
        let model = DynModel::exact(&m);
        for k in 1..=h {
            let q = TerminalQ::Pwl(construct_thm34_q(h, k).unwrap());
            for s in sample_bit_states(k as u64, 2000) {
                let a = boots_policy(&model, &q, m.gamma_eff(), k as usize, s, 1 << 20).unwrap();
                assert_eq!(a, closed_form_pi_star(h, s), "k={k} s={s}");
            }
        }
    }

    #[test]
    fn exhaustive_shooting_equals_boots() {
        let m = semirand_reference();
        let model = DynModel::exact(&m);
        let q = TerminalQ::Reward(vec![
            PwlFunction::linear(0.3, 0.1),
            PwlFunction::linear(-0.2, 0.4),
        ]);
        let mut r = rng::seeded(4);
        for i in 0..300 {
            let s: f64 = r.gen();
            let k = i % 4;
            let b = boots_policy(&model, &q, 1.0, k, s, 1000).unwrap();
            let mut sr = shooting_rng(9, i as u32);
            let sh = shooting_policy(&model, &q, 1.0, k, s, 1 << (k + 1), true, &mut sr).unwrap();
            assert_eq!(b, sh);
        }
    }

    #[test]
    fn rollout_fixed_point_at_zero() {
        let m = make_fractal_mdp(4).unwrap();
        assert_eq!(rollout_return(&m, |_, _| 0, 0.0, 32, m.gamma_eff()), 0.0);
    }

    #[test]
    fn finite_plan_truncates() {
        let q = TerminalQ::Reward(vec![PwlFunction::constant(0.0)]);
        let r = TerminalQ::Reward(vec![PwlFunction::constant(1.0)]);
        let (d, leaf) = finite_horizon_plan(3, 10, &q, &r);
        assert_eq!(d, 3);
        assert!(std::ptr::eq(leaf, &q));
        let (d, leaf) = finite_horizon_plan(3, 3, &q, &r);
        assert_eq!(d, 2);
        assert!(std::ptr::eq(leaf, &r));
        let (d, leaf) = finite_horizon_plan(0, 1, &q, &r);
        assert_eq!(d, 0);
        assert!(std::ptr::eq(leaf, &q));
    }
}
