use serde::{Deserialize, Serialize};

use crate::error::PwlError;

/// Deterministic piecewise-constant policy on `[0, 1]`: `actions[i]` is taken on
/// `[breakpoints[i], breakpoints[i+1])`, with `s = 1` using the last interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy", into = "RawPolicy")]
pub struct PiecewisePolicy {
    breakpoints: Vec<f64>,
    actions: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawPolicy {
    breakpoints: Vec<f64>,
    actions: Vec<usize>,
}

impl TryFrom<RawPolicy> for PiecewisePolicy {
    type Error = PwlError;
    fn try_from(raw: RawPolicy) -> Result<Self, PwlError> {
        PiecewisePolicy::new(raw.breakpoints, raw.actions)
    }
}

impl From<PiecewisePolicy> for RawPolicy {
    fn from(p: PiecewisePolicy) -> Self {
        RawPolicy {
            breakpoints: p.breakpoints,
            actions: p.actions,
        }
    }
}

impl PiecewisePolicy {
    pub fn new(breakpoints: Vec<f64>, actions: Vec<usize>) -> Result<Self, PwlError> {
        if breakpoints.len() < 2 {
            return Err(PwlError::TooFewBreakpoints(breakpoints.len()));
        }
        if breakpoints[0] != 0.0 || *breakpoints.last().unwrap() != 1.0 {
            return Err(PwlError::Endpoints {
                first: breakpoints[0],
                last: *breakpoints.last().unwrap(),
            });
        }
        if let Some(i) = breakpoints.windows(2).position(|w| !(w[0] < w[1])) {
            return Err(PwlError::NotAscending { index: i + 1 });
        }
        if actions.len() + 1 != breakpoints.len() {
            return Err(PwlError::ShapeMismatch {
                breakpoints: breakpoints.len(),
                slopes: actions.len(),
                intercepts: actions.len(),
            });
        }
        Ok(Self {
            breakpoints,
            actions,
        })
    }

    pub(crate) fn from_raw(breakpoints: Vec<f64>, actions: Vec<usize>) -> Self {
        debug_assert_eq!(breakpoints.len(), actions.len() + 1);
        Self {
            breakpoints,
            actions,
        }
    }

    pub fn constant(action: usize) -> Self {
        Self::from_raw(vec![0.0, 1.0], vec![action])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn piece_count(&self) -> usize {
        self.actions.len()
    }

    pub fn action_at(&self, s: f64) -> usize {
        let k = self.breakpoints.partition_point(|&x| x <= s);
        self.actions[k.saturating_sub(1).min(self.actions.len() - 1)]
    }

    /// Largest action index used.
    pub fn max_action(&self) -> usize {
        self.actions.iter().copied().max().unwrap_or(0)
    }

    /// Checks every action index against `action_count`.
    pub fn check_actions(&self, action_count: usize) -> Result<(), PwlError> {
        match self.actions.iter().find(|&&a| a >= action_count) {
            Some(&action) => Err(PwlError::BadAction {
                action,
                actions: action_count,
            }),
            None => Ok(()),
        }
    }

    /// Absorbs intervals shorter than `min_len` into their left neighbour, then
    /// merges adjacent intervals that share an action.
    pub fn simplified(&self, min_len: f64) -> Self {
        let n = self.actions.len();
        let mut bps = vec![0.0];
        let mut acts: Vec<usize> = Vec::with_capacity(n);
        for i in 0..n {
            let (l, r) = (self.breakpoints[i], self.breakpoints[i + 1]);
            let a = self.actions[i];
            if r - l < min_len && n > 1 {
                if acts.is_empty() {
                    continue;
                }
                *bps.last_mut().unwrap() = r;
                continue;
            }
            if acts.last() == Some(&a) {
                *bps.last_mut().unwrap() = r;
            } else {
                acts.push(a);
                bps.push(r);
            }
        }
        if acts.is_empty() {
            return Self::constant(self.actions[0]);
        }
        *bps.last_mut().unwrap() = 1.0;
        Self::from_raw(bps, acts)
    }
}
