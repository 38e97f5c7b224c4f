//! Exact value iteration over piecewise-linear Q-functions.

use serde::{Deserialize, Serialize};

use crate::error::DpError;
use crate::mdp::{HorizonSpec, Mdp};
use crate::policy::PiecewisePolicy;
use crate::pwl::{argmax_select_with, PwlFunction, Tolerances};

/// One PWL function per action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub per_action: Vec<PwlFunction>,
    /// Backups applied since the zero function (steps to go, for finite horizons).
    pub steps: usize,
    pub discount: Option<f64>,
}

impl QFunction {
    pub fn zero(actions: usize, discount: Option<f64>) -> Self {
        Self {
            per_action: vec![PwlFunction::constant(0.0); actions],
            steps: 0,
            discount,
        }
    }

    pub fn action_count(&self) -> usize {
        self.per_action.len()
    }

    #[inline]
    pub fn value(&self, s: f64, a: usize) -> f64 {
        self.per_action[a].value(s)
    }

    pub fn piece_counts(&self) -> Vec<usize> {
        self.per_action
            .iter()
            .map(PwlFunction::piece_count)
            .collect()
    }

    /// Greedy policy and state value.
    pub fn greedy(&self) -> Result<(PiecewisePolicy, PwlFunction), DpError> {
        Ok(argmax_select_with(&self.per_action, Tolerances::CANONICAL)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub pieces: Vec<usize>,
    pub policy_pieces: usize,
    /// `sup |V_n - V_{n-1}|`.
    pub residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DpTrace {
    pub records: Vec<TraceRecord>,
}

impl DpTrace {
    /// CSV with header `iteration,pieces_a0,...,policy_pieces,residual`.
    pub fn to_csv(&self) -> String {
        let actions = self.records.first().map_or(2, |r| r.pieces.len());
        let mut out = String::from("iteration");
        for a in 0..actions {
            out.push_str(&format!(",pieces_a{a}"));
        }
        out.push_str(",policy_pieces,residual\n");
        for r in &self.records {
            out.push_str(&r.iteration.to_string());
            for p in &r.pieces {
                out.push_str(&format!(",{p}"));
            }
            out.push_str(&format!(",{},{:e}\n", r.policy_pieces, r.residual));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DpConfig {
    pub tolerances: Tolerances,
    /// Abort once any component exceeds this many pieces.
    pub piece_cap: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            tolerances: Tolerances::CANONICAL,
            piece_cap: 10_000_000,
        }
    }
}

/// Result of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct DpSolution {
    pub q: QFunction,
    /// Greedy policy for `q` (the first-step policy for finite horizons).
    pub policy: PiecewisePolicy,
    /// `max_a q(., a)`.
    pub value: PwlFunction,
    pub trace: DpTrace,
    /// `history[h - 1]` is the iterate after `h` backups (`h` steps to go).
    pub history: Vec<QFunction>,
    /// Greedy policy of each entry of `history`.
    pub step_policies: Vec<PiecewisePolicy>,
}

impl DpSolution {
    /// Expected value of `value` under the uniform start distribution.
    pub fn eta(&self) -> f64 {
        self.value.integrate()
    }

    /// Time-varying optimal schedule: the policy with `H` steps to go acts first.
    pub fn schedule(&self) -> PolicySchedule {
        PolicySchedule::PerStep(self.step_policies.iter().rev().cloned().collect())
    }

    /// Greedy action with `steps_to_go` steps remaining (clamped to the iterates held).
    pub fn act(&self, steps_to_go: usize, s: f64) -> usize {
        let h = steps_to_go.clamp(1, self.step_policies.len());
        self.step_policies[h - 1].action_at(s)
    }
}

/// `Q'(s, a) = r(s, a) + gamma_eff * max_a' Q(f(s, a), a')`.
pub fn bellman_backup(mdp: &Mdp, q_next: &QFunction) -> Result<QFunction, DpError> {
    let (_, v) = check_and_max(mdp, q_next, Tolerances::CANONICAL)?;
    backup_from_value(mdp, &v, q_next.steps, Tolerances::CANONICAL)
}

fn check_and_max(
    mdp: &Mdp,
    q: &QFunction,
    tol: Tolerances,
) -> Result<(PiecewisePolicy, PwlFunction), DpError> {
    if q.action_count() != mdp.action_count() {
        return Err(DpError::ActionMismatch {
            expected: mdp.action_count(),
            got: q.action_count(),
        });
    }
    Ok(argmax_select_with(&q.per_action, tol)?)
}

fn backup_from_value(
    mdp: &Mdp,
    v: &PwlFunction,
    steps: usize,
    tol: Tolerances,
) -> Result<QFunction, DpError> {
    let gamma = mdp.gamma_eff();
    let per_action = mdp
        .dynamics()
        .iter()
        .zip(mdp.reward())
        .map(|(f, r)| {
            let vf = v.compose(f)?.simplify(tol);
            Ok(r.affine_combine(&vf, 1.0, gamma).simplify(tol))
        })
        .collect::<Result<Vec<_>, DpError>>()?;
    Ok(QFunction {
        per_action,
        steps: steps + 1,
        discount: mdp.horizon().discount(),
    })
}

fn sup_diff(a: &PwlFunction, b: &PwlFunction) -> f64 {
    a.affine_combine(b, 1.0, -1.0).sup_abs()
}

/// Runs `H` (finite) or `T` (discounted) backups from `Q = 0`.
pub fn value_iteration(mdp: &Mdp) -> Result<DpSolution, DpError> {
    value_iteration_with(mdp, DpConfig::default())
}

pub fn value_iteration_with(mdp: &Mdp, cfg: DpConfig) -> Result<DpSolution, DpError> {
    let n = mdp.horizon().steps();
    let mut q = QFunction::zero(mdp.action_count(), mdp.horizon().discount());
    let mut v_prev = PwlFunction::constant(0.0);
    let mut trace = DpTrace::default();
    let mut last = None;
    let mut history = Vec::with_capacity(n);
    let mut step_policies = Vec::with_capacity(n);
    for iteration in 1..=n {
        q = backup_from_value(mdp, &v_prev, q.steps, cfg.tolerances)?;
        if let Some((action, f)) = q
            .per_action
            .iter()
            .enumerate()
            .find(|(_, f)| f.piece_count() > cfg.piece_cap)
        {
            return Err(DpError::PieceCap {
                iteration,
                action,
                pieces: f.piece_count(),
                cap: cfg.piece_cap,
            });
        }
        let (policy, v_new) = check_and_max(mdp, &q, cfg.tolerances)?;
        trace.records.push(TraceRecord {
            iteration,
            pieces: q.piece_counts(),
            policy_pieces: policy.piece_count(),
            residual: sup_diff(&v_new, &v_prev),
        });
        v_prev = v_new.clone();
        history.push(q.clone());
        step_policies.push(policy.clone());
        last = Some((policy, v_new));
    }
    let (policy, value) = last.expect("horizon has at least one step");
    Ok(DpSolution {
        q,
        policy,
        value,
        trace,
        history,
        step_policies,
    })
}

/// Policy input for [`evaluate_policy_exact`].
#[derive(Debug, Clone)]
pub enum PolicySchedule {
    Stationary(PiecewisePolicy),
    /// `steps[0]` acts at the first step.
    PerStep(Vec<PiecewisePolicy>),
}

impl PolicySchedule {
    fn at(&self, step: usize) -> &PiecewisePolicy {
        match self {
            PolicySchedule::Stationary(p) => p,
            PolicySchedule::PerStep(ps) => &ps[step],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyEvaluation {
    /// `E_{s ~ U[0,1]} V^pi(s)` over the horizon (or truncation).
    pub eta: f64,
    /// Bound on the discounted tail beyond the truncation; 0 for finite horizons.
    pub truncation_bound: f64,
}

/// Exact evaluation of a (possibly time-varying) piecewise-constant policy by
/// backward induction over PWL value functions.
pub fn evaluate_policy_exact(
    mdp: &Mdp,
    schedule: &PolicySchedule,
) -> Result<PolicyEvaluation, DpError> {
    let v = policy_value_function(mdp, schedule)?;
    let truncation_bound = match mdp.horizon() {
        HorizonSpec::Finite { .. } => 0.0,
        HorizonSpec::Discounted { gamma, truncation } => {
            gamma.powi(truncation as i32) * mdp.reward_bound() / (1.0 - gamma)
        }
    };
    Ok(PolicyEvaluation {
        eta: v.integrate(),
        truncation_bound,
    })
}

/// `V^pi` at the first step as a PWL function.
pub fn policy_value_function(mdp: &Mdp, schedule: &PolicySchedule) -> Result<PwlFunction, DpError> {
    let n = mdp.horizon().steps();
    if let PolicySchedule::PerStep(ps) = schedule {
        if ps.len() != n {
            return Err(DpError::ScheduleLength {
                expected: n,
                got: ps.len(),
            });
        }
    }
    for step in 0..n {
        schedule.at(step).check_actions(mdp.action_count())?;
    }
    let tol = Tolerances::CANONICAL;
    let gamma = mdp.gamma_eff();
    let mut v = PwlFunction::constant(0.0);
    for step in (0..n).rev() {
        let q: Vec<PwlFunction> = mdp
            .dynamics()
            .iter()
            .zip(mdp.reward())
            .map(|(f, r)| {
                let vf = v.compose(f)?.simplify(tol);
                Ok(r.affine_combine(&vf, 1.0, gamma).simplify(tol))
            })
            .collect::<Result<_, DpError>>()?;
        v = PwlFunction::splice(&q, schedule.at(step)).simplify(tol);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_fractal_mdp, semirand_reference};

    #[test]
    fn zero_terminal_gives_rewards() {
        let m = make_fractal_mdp(4).unwrap();
        let q = bellman_backup(&m, &QFunction::zero(2, Some(0.75))).unwrap();
        assert_eq!(q.steps, 1);
        for a in 0..2 {
            assert_eq!(q.per_action[a], m.reward()[a].canonical());
        }
    }

    #[test]
    fn reference_one_backup_is_identity() {
        let m = semirand_reference();
        let q = bellman_backup(&m, &QFunction::zero(2, None)).unwrap();
        for a in 0..2 {
            assert_eq!(q.per_action[a], PwlFunction::identity());
        }
    }

    #[test]
    fn action_mismatch() {
        let m = semirand_reference();
        assert!(matches!(
            bellman_backup(&m, &QFunction::zero(3, None)),
            Err(DpError::ActionMismatch { .. })
        ));
    }

    #[test]
    fn single_step_horizon() {
        let m = make_fractal_mdp(4)
            .unwrap()
            .with_horizon(HorizonSpec::Finite { steps: 1 })
            .unwrap();
        let sol = value_iteration(&m).unwrap();
        assert_eq!(sol.q.per_action[0], m.reward()[0].canonical());
        // action 0 dominates everywhere (action 1 pays a penalty)
        assert_eq!(sol.policy.actions(), &[0]);
        assert_eq!(sol.trace.records.len(), 1);
        assert!((sol.eta() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn piece_cap_aborts() {
        let m = semirand_reference();
        let cfg = DpConfig {
            piece_cap: 50,
            ..DpConfig::default()
        };
        assert!(matches!(
            value_iteration_with(&m, cfg),
            Err(DpError::PieceCap { cap: 50, .. })
        ));
    }

    #[test]
    fn greedy_evaluation_matches_dp() {
        let m = semirand_reference()
            .with_horizon(HorizonSpec::Finite { steps: 5 })
            .unwrap();
        // stationary greedy policy is not optimal for a time-varying problem, but the
        // per-step greedy schedule is
        let mut policies = Vec::new();
        let mut q = QFunction::zero(2, None);
        for _ in 0..5 {
            q = bellman_backup(&m, &q).unwrap();
            policies.push(q.greedy().unwrap().0);
        }
        policies.reverse();
        let sol = value_iteration(&m).unwrap();
        let ev = evaluate_policy_exact(&m, &PolicySchedule::PerStep(policies)).unwrap();
        assert!(
            (ev.eta - sol.eta()).abs() < 1e-9,
            "{} vs {}",
            ev.eta,
            sol.eta()
        );
        assert_eq!(ev.truncation_bound, 0.0);
    }

    #[test]
    fn schedule_length_checked() {
        let m = semirand_reference();
        let err = evaluate_policy_exact(
            &m,
            &PolicySchedule::PerStep(vec![PiecewisePolicy::constant(0)]),
        );
        assert!(matches!(err, Err(DpError::ScheduleLength { .. })));
        let err = evaluate_policy_exact(
            &m,
            &PolicySchedule::Stationary(PiecewisePolicy::constant(5)),
        );
        assert!(err.is_err());
    }

    #[test]
    fn trace_csv_shape() {
        let m = semirand_reference()
            .with_horizon(HorizonSpec::Finite { steps: 3 })
            .unwrap();
        let sol = value_iteration(&m).unwrap();
        let csv = sol.trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "iteration,pieces_a0,pieces_a1,policy_pieces,residual"
        );
        assert_eq!(lines.len(), 4);
    }
}
