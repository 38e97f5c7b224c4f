//! Deterministic one-dimensional MDPs with piecewise-linear dynamics and rewards.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{MdpError, PwlError};
use crate::pwl::{Line, PwlFunction};
use crate::rng::{self, Stream};

/// Either a finite undiscounted horizon or a discounted problem truncated after
/// `truncation` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HorizonSpec {
    Finite { steps: usize },
    Discounted { gamma: f64, truncation: usize },
}

impl HorizonSpec {
    pub fn validate(&self) -> Result<(), MdpError> {
        match *self {
            HorizonSpec::Finite { steps: 0 } => Err(MdpError::InvalidHorizon(
                "finite horizon needs steps >= 1".into(),
            )),
            HorizonSpec::Discounted { gamma, .. } if !(gamma > 0.0 && gamma < 1.0) => Err(
                MdpError::InvalidHorizon(format!("discount {gamma} not in (0, 1)")),
            ),
            HorizonSpec::Discounted { truncation: 0, .. } => {
                Err(MdpError::InvalidHorizon("truncation needs T >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of backups / rollout steps: `H` or `T`.
    pub fn steps(&self) -> usize {
        match *self {
            HorizonSpec::Finite { steps } => steps,
            HorizonSpec::Discounted { truncation, .. } => truncation,
        }
    }

    /// Discount applied per step: 1 for finite horizons.
    pub fn gamma_eff(&self) -> f64 {
        match *self {
            HorizonSpec::Finite { .. } => 1.0,
            HorizonSpec::Discounted { gamma, .. } => gamma,
        }
    }

    pub fn discount(&self) -> Option<f64> {
        match *self {
            HorizonSpec::Finite { .. } => None,
            HorizonSpec::Discounted { gamma, .. } => Some(gamma),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMdp", into = "RawMdp")]
pub struct Mdp {
    dynamics: Vec<PwlFunction>,
    reward: Vec<PwlFunction>,
    horizon: HorizonSpec,
    label: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMdp {
    actions: usize,
    dynamics: Vec<PwlFunction>,
    reward: Vec<PwlFunction>,
    horizon: HorizonSpec,
    #[serde(default)]
    label: String,
}

impl TryFrom<RawMdp> for Mdp {
    type Error = MdpError;
    fn try_from(raw: RawMdp) -> Result<Self, MdpError> {
        if raw.dynamics.len() != raw.actions {
            return Err(MdpError::ActionCount {
                what: "dynamics",
                expected: raw.actions,
                got: raw.dynamics.len(),
            });
        }
        Mdp::new(raw.dynamics, raw.reward, raw.horizon, raw.label)
    }
}

impl From<Mdp> for RawMdp {
    fn from(m: Mdp) -> Self {
        RawMdp {
            actions: m.dynamics.len(),
            dynamics: m.dynamics,
            reward: m.reward,
            horizon: m.horizon,
            label: m.label,
        }
    }
}

impl Mdp {
    pub fn new(
        dynamics: Vec<PwlFunction>,
        reward: Vec<PwlFunction>,
        horizon: HorizonSpec,
        label: impl Into<String>,
    ) -> Result<Self, MdpError> {
        if dynamics.is_empty() {
            return Err(MdpError::Pwl(PwlError::NoActions));
        }
        if reward.len() != dynamics.len() {
            return Err(MdpError::ActionCount {
                what: "reward",
                expected: dynamics.len(),
                got: reward.len(),
            });
        }
        for (action, f) in dynamics.iter().enumerate() {
            f.check_unit_range()
                .map_err(|source| MdpError::DynamicsRange { action, source })?;
        }
        horizon.validate()?;
        Ok(Self {
            dynamics,
            reward,
            horizon,
            label: label.into(),
        })
    }

    pub fn action_count(&self) -> usize {
        self.dynamics.len()
    }

    pub fn dynamics(&self) -> &[PwlFunction] {
        &self.dynamics
    }

    pub fn reward(&self) -> &[PwlFunction] {
        &self.reward
    }

    pub fn horizon(&self) -> HorizonSpec {
        self.horizon
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn gamma_eff(&self) -> f64 {
        self.horizon.gamma_eff()
    }

    /// Same MDP with a different horizon.
    pub fn with_horizon(&self, horizon: HorizonSpec) -> Result<Self, MdpError> {
        horizon.validate()?;
        Ok(Self {
            horizon,
            ..self.clone()
        })
    }

    /// One transition. The next state is clamped into `[0, 1]`.
    pub fn step(&self, s: f64, a: usize) -> Result<(f64, f64), MdpError> {
        if a >= self.action_count() {
            return Err(MdpError::BadAction {
                action: a,
                actions: self.action_count(),
            });
        }
        let next = self.dynamics[a].eval(s)?.clamp(0.0, 1.0);
        Ok((next, self.reward[a].eval(s)?))
    }

    /// Unchecked transition for hot loops; `a` must be valid.
    #[inline]
    pub fn next_state(&self, s: f64, a: usize) -> f64 {
        self.dynamics[a].value(s).clamp(0.0, 1.0)
    }

    #[inline]
    pub fn reward_at(&self, s: f64, a: usize) -> f64 {
        self.reward[a].value(s)
    }

    /// Largest `|r|` over all actions.
    pub fn reward_bound(&self) -> f64 {
        self.reward
            .iter()
            .map(PwlFunction::sup_abs)
            .fold(0.0, f64::max)
    }
}

/// Discount of the constructed families: `gamma = 1 - 1/H`.
pub fn fractal_gamma(h: u32) -> f64 {
    1.0 - 1.0 / h as f64
}

/// Shift `kappa = 2^-H` of the constructed families.
pub fn fractal_kappa(h: u32) -> f64 {
    (-(h as f64)).exp2()
}

/// Reward penalty `2 (gamma^(H-1) - gamma^H)` of the shifting actions.
pub fn fractal_penalty(h: u32) -> f64 {
    let g = fractal_gamma(h);
    2.0 * (g.powi(h as i32 - 1) - g.powi(h as i32))
}

fn upper_half_indicator() -> PwlFunction {
    PwlFunction::step(&[0.0, 0.5, 1.0], &[0.0, 1.0]).expect("static breakpoints")
}

/// The two-action family whose optimal policy has `2^(H+1)` pieces:
/// `f(s,0) = 2s mod 1`, `f(s,1) = (2s + 2^-H) mod 1`, reward the indicator of
/// `[1/2, 1)` with a small penalty on action 1. Discount `1 - 1/H`, truncated at `8H`.
pub fn make_fractal_mdp(h: u32) -> Result<Mdp, MdpError> {
    if h < 3 {
        return Err(MdpError::HorizonTooSmall(h));
    }
    let kappa = fractal_kappa(h);
    let gamma = fractal_gamma(h);
    let f0 = PwlFunction::from_lines(
        vec![0.0, 0.5, 1.0],
        &[Line::new(2.0, 0.0), Line::new(2.0, -1.0)],
    )?;
    let f1 = PwlFunction::from_lines(
        vec![0.0, (1.0 - kappa) / 2.0, (2.0 - kappa) / 2.0, 1.0],
        &[
            Line::new(2.0, kappa),
            Line::new(2.0, kappa - 1.0),
            Line::new(2.0, kappa - 2.0),
        ],
    )?;
    let r0 = upper_half_indicator();
    let r1 = r0.scale_shift(1.0, -fractal_penalty(h));
    Mdp::new(
        vec![f0, f1],
        vec![r0, r1],
        HorizonSpec::Discounted {
            gamma,
            truncation: 8 * h as usize,
        },
        format!("fractal(H={h})"),
    )
}

/// `clip(slope * s + offset)` as a continuous PWL with flat saturation pieces.
fn clipped_line(slope: f64, offset: f64) -> Result<PwlFunction, PwlError> {
    debug_assert!(slope > 0.0);
    let s_lo = -offset / slope;
    let s_hi = (1.0 - offset) / slope;
    let mut bps = vec![0.0];
    let mut lines = Vec::new();
    if s_lo > 0.0 && s_lo < 1.0 {
        lines.push(Line::new(0.0, 0.0));
        bps.push(s_lo);
    }
    if s_lo < 1.0 && s_hi > 0.0 {
        lines.push(Line::new(slope, offset));
        if s_hi < 1.0 {
            bps.push(s_hi);
        }
    }
    if s_hi < 1.0 {
        lines.push(Line::new(0.0, 1.0));
    }
    bps.push(1.0);
    bps.dedup();
    PwlFunction::from_lines(bps, &lines)
}

/// Five-action variant with continuous, 2-Lipschitz dynamics obtained by clipping
/// instead of wrapping: `clip(2s)`, `clip(2s-1)`, `clip(2s+k)`, `clip(2s+k-1)`,
/// `clip(2s+k-2)` with `k = 2^-H`.
pub fn make_lipschitz_mdp(h: u32) -> Result<Mdp, MdpError> {
    if h < 3 {
        return Err(MdpError::HorizonTooSmall(h));
    }
    let kappa = fractal_kappa(h);
    let offsets = [0.0, -1.0, kappa, kappa - 1.0, kappa - 2.0];
    let dynamics = offsets
        .iter()
        .map(|&c| clipped_line(2.0, c))
        .collect::<Result<Vec<_>, _>>()?;
    let r = upper_half_indicator();
    let rp = r.scale_shift(1.0, -fractal_penalty(h));
    Mdp::new(
        dynamics,
        vec![r.clone(), r, rp.clone(), rp.clone(), rp],
        HorizonSpec::Discounted {
            gamma: fractal_gamma(h),
            truncation: 8 * h as usize,
        },
        format!("lipschitz(H={h})"),
    )
}

/// Horizon of the random generators.
pub const RANDOM_MDP_HORIZON: usize = 10;
const MIN_KINK_GAP: f64 = 1e-9;
const MAX_REDRAWS: usize = 1000;

/// RAND generator: per action, two uniform interior kinks and four uniform kink
/// values joined by lines (three pieces). Reward `r(s, a) = s`, horizon 10.
///
/// Kink positions for action `a` come from stream `(KinkPositions, a)`, values
/// from `(KinkValues, a)`. Draws with kinks closer than `1e-9` are redrawn.
pub fn gen_rand(seed: u64) -> Mdp {
    let dynamics = (0..2u32)
        .map(|a| {
            let mut pos = rng::child(seed, Stream::KinkPositions, a);
            let mut val = rng::child(seed, Stream::KinkValues, a);
            let mut kinks = None;
            for _ in 0..MAX_REDRAWS {
                let (u1, u2): (f64, f64) = (pos.gen(), pos.gen());
                let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
                if lo >= MIN_KINK_GAP && hi - lo >= MIN_KINK_GAP && 1.0 - hi >= MIN_KINK_GAP {
                    kinks = Some((lo, hi));
                    break;
                }
            }
            let (lo, hi) = kinks.unwrap_or((1.0 / 3.0, 2.0 / 3.0));
            let ys: Vec<f64> = (0..4).map(|_| val.gen::<f64>()).collect();
            PwlFunction::from_knots(&[0.0, lo, hi, 1.0], &ys).expect("ascending kinks")
        })
        .collect();
    random_mdp(dynamics, format!("rand(seed={seed})"))
}

/// SEMI-RAND generator: kinks at `i/3`; the value at kink `i` is
/// `0.65 * [i even] + 0.35 * U(0,1)`, drawn from stream `(KinkValues, a)`.
pub fn gen_semirand(seed: u64) -> Mdp {
    let xs = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let dynamics = (0..2u32)
        .map(|a| {
            let mut val = rng::child(seed, Stream::KinkValues, a);
            let ys: Vec<f64> = (0..4)
                .map(|i| {
                    let even = if i % 2 == 0 { 0.65 } else { 0.0 };
                    even + 0.35 * val.gen::<f64>()
                })
                .collect();
            PwlFunction::from_knots(&xs, &ys).expect("static kinks")
        })
        .collect();
    random_mdp(dynamics, format!("semirand(seed={seed})"))
}

/// The fixed SEMI-RAND instance used for the learning experiments.
pub fn semirand_reference() -> Mdp {
    let xs = [0.0, 0.333, 0.667, 1.0];
    let f0 = PwlFunction::from_knots(&xs, &[0.690, 0.131, 0.907, 0.079]).expect("static");
    let f1 = PwlFunction::from_knots(&xs, &[0.865, 0.134, 0.750, 0.053]).expect("static");
    random_mdp(vec![f0, f1], "semirand_reference".to_string())
}

fn random_mdp(dynamics: Vec<PwlFunction>, label: String) -> Mdp {
    let reward = vec![PwlFunction::identity(); dynamics.len()];
    Mdp::new(
        dynamics,
        reward,
        HorizonSpec::Finite {
            steps: RANDOM_MDP_HORIZON,
        },
        label,
    )
    .expect("generated dynamics stay in [0, 1]")
}
