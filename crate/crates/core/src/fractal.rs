//! Closed-form optimum of the fractal family and Bellman-equation checks.
//!
//! States are read as binary expansions `s = 0.b1 b2 b3 ...`. Both families
//! shift the expansion left, optionally adding `2^-H`, so the optimal value is a
//! series over bits. Everything here works on `f64` bit reads, which are exact
//! up to index 52.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::DpError;
use crate::mdp::{fractal_gamma, fractal_kappa, fractal_penalty};
use crate::rng::{self, Stream};

/// Largest bit index that a double can resolve on `[0, 1)`.
pub const MAX_BIT: u32 = 52;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Two actions, wrap-around dynamics.
    Fractal,
    /// Five actions, clipped dynamics.
    Lipschitz,
}

impl Family {
    pub fn action_count(self) -> usize {
        match self {
            Family::Fractal => 2,
            Family::Lipschitz => 5,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fractal" => Ok(Family::Fractal),
            "lipschitz" => Ok(Family::Lipschitz),
            other => Err(format!(
                "unknown family `{other}` (expected fractal or lipschitz)"
            )),
        }
    }
}

/// `floor(2^h s) mod 2`.
pub fn bit(s: f64, h: u32) -> Result<u8, DpError> {
    if h == 0 || h > MAX_BIT {
        return Err(DpError::BitIndex(h));
    }
    Ok(bit_unchecked(s, h))
}

#[inline]
fn bit_unchecked(s: f64, h: u32) -> u8 {
    ((s * (h as f64).exp2()).floor() as u64 & 1) as u8
}

/// Optimal action of the fractal family: 1 iff bit `H+1` of `s` is 0.
pub fn closed_form_pi_star(h: u32, s: f64) -> usize {
    debug_assert!(h < MAX_BIT);
    usize::from(bit_unchecked(s, h + 1) == 0)
}

/// Optimal action of the clipped five-action family.
///
/// Bit `H+1` equal to 0 selects one of the shifted actions 2, 3, 4 (whichever
/// piece of `2s + 2^-H` the state falls on); otherwise the unshifted action 0
/// or 1, again by piece.
pub fn lipschitz_pi_star(h: u32, s: f64) -> usize {
    let two_s = 2.0 * s;
    if bit_unchecked(s, h + 1) == 0 {
        let x = two_s + fractal_kappa(h);
        if x < 1.0 {
            2
        } else if x < 2.0 {
            3
        } else {
            4
        }
    } else if two_s < 1.0 {
        0
    } else {
        1
    }
}

pub fn pi_star(family: Family, h: u32, s: f64) -> usize {
    match family {
        Family::Fractal => closed_form_pi_star(h, s),
        Family::Lipschitz => lipschitz_pi_star(h, s),
    }
}

fn check_terms(h: u32, n_terms: u32) -> Result<(), DpError> {
    if n_terms < h {
        return Err(DpError::BitIndex(n_terms));
    }
    if h + n_terms > MAX_BIT {
        return Err(DpError::BitIndex(h + n_terms));
    }
    Ok(())
}

/// Optimal value of both families, with the infinite tail cut after `n_terms`
/// terms. Uses bits `1..=H + n_terms`; the cut costs at most
/// [`truncation_error`].
pub fn closed_form_v_star(h: u32, s: f64, n_terms: u32) -> Result<f64, DpError> {
    check_terms(h, n_terms)?;
    Ok(v_star_unchecked(h, s, n_terms))
}

/// Telescoped form of the series:
/// `sum_{i<=H} g^(i-1) b_i + sum_{i>H} (g^(i-1) - 2 (g^(i-2) - g^(i-1)) (1 - b_i))`.
fn v_star_unchecked(h: u32, s: f64, n_terms: u32) -> f64 {
    let g = fractal_gamma(h);
    let mut total = 0.0;
    let mut gp = 1.0; // g^(i-1)
    let mut gprev = 1.0 / g; // g^(i-2)
    for i in 1..=h + n_terms {
        let b = f64::from(bit_unchecked(s, i));
        if i <= h {
            total += gp * b;
        } else {
            total += gp - 2.0 * (gprev - gp) * (1.0 - b);
        }
        gprev = gp;
        gp *= g;
    }
    total
}

/// Bound on `|V*_exact - closed_form_v_star(.., n_terms)|`.
pub fn truncation_error(h: u32, n_terms: u32) -> f64 {
    let g = fractal_gamma(h);
    3.0 * g.powi(n_terms as i32) / (1.0 - g)
}

/// Dynamics of the families in closed form (the reward
/// indicator is `b_1`, so the clipped state 1 earns nothing).
pub fn closed_form_step(family: Family, h: u32, s: f64, a: usize) -> (f64, f64) {
    let kappa = fractal_kappa(h);
    let penalty = fractal_penalty(h);
    let r = f64::from(bit_unchecked(s, 1));
    match family {
        Family::Fractal => {
            let x = 2.0 * s + if a == 1 { kappa } else { 0.0 };
            let next = x - x.floor();
            (next, if a == 1 { r - penalty } else { r })
        }
        Family::Lipschitz => {
            let offset = [0.0, -1.0, kappa, kappa - 1.0, kappa - 2.0][a];
            let next = (2.0 * s + offset).clamp(0.0, 1.0);
            (next, if a >= 2 { r - penalty } else { r })
        }
    }
}

/// `Q*(s, a) = r(s, a) + gamma V*(f(s, a))` from the closed form.
pub fn closed_form_q_star(
    family: Family,
    h: u32,
    s: f64,
    a: usize,
    n_terms: u32,
) -> Result<f64, DpError> {
    check_terms(h, n_terms)?;
    let (next, r) = closed_form_step(family, h, s, a);
    Ok(r + fractal_gamma(h) * v_star_unchecked(h, next, n_terms))
}

/// A state whose bits `41..=52` are neither all 0 nor all 1, so that doubling
/// and adding `2^-H` never lands on a dyadic boundary coarser than `2^-45`.
pub fn sample_bit_state(rng: &mut rng::Rng) -> f64 {
    let k: u64 = rng.gen_range(0..1u64 << 40);
    let m: u64 = rng.gen_range(1u64 << 7..=(1u64 << 12) - (1u64 << 7));
    k as f64 * (-40f64).exp2() + m as f64 * (-52f64).exp2()
}

/// Sampled states for bit-sensitive checks, reproducible from `seed`.
pub fn sample_bit_states(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng::child(seed, Stream::Sampling, 0);
    (0..n).map(|_| sample_bit_state(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub state: f64,
    pub action: usize,
    /// Amount by which the check failed beyond the tolerance.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BellmanReport {
    pub family: Family,
    pub h: u32,
    pub n_samples: usize,
    pub n_terms: u32,
    pub tol: f64,
    /// `max |V*(s) - Q*(s, pi*(s))|`.
    pub max_equality_residual: f64,
    /// `max_{a != pi*(s)} (Q*(s, a) - V*(s))`, negative when every other action is worse.
    pub max_inequality_slack: f64,
    pub violation_count: usize,
    /// First few violations.
    pub violations: Vec<Violation>,
    /// States where the argmax of the closed-form Q equals the closed-form policy.
    pub greedy_matches: usize,
}

impl BellmanReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }

    pub fn greedy_match_fraction(&self) -> f64 {
        if self.n_samples == 0 {
            1.0
        } else {
            self.greedy_matches as f64 / self.n_samples as f64
        }
    }
}

const KEPT_VIOLATIONS: usize = 16;

/// Checks the Bellman optimality equations for the closed-form value at
/// `n_samples` sampled states: equality at the closed-form policy, inequality
/// for every other action, both within `6 g^n / (1 - g) + 1e-9`.
pub fn verify_bellman(
    family: Family,
    h: u32,
    n_samples: usize,
    n_terms: u32,
    seed: u64,
) -> Result<BellmanReport, DpError> {
    check_terms(h, n_terms)?;
    // V*(f(s, a)) reads one more bit of s than V*(s).
    if h + n_terms + 1 > MAX_BIT {
        return Err(DpError::BitIndex(h + n_terms + 1));
    }
    let g = fractal_gamma(h);
    let tol = 2.0 * truncation_error(h, n_terms) + 1e-9;
    let mut report = BellmanReport {
        family,
        h,
        n_samples,
        n_terms,
        tol,
        max_equality_residual: 0.0,
        max_inequality_slack: f64::NEG_INFINITY,
        violation_count: 0,
        violations: Vec::new(),
        greedy_matches: 0,
    };
    let record = |report: &mut BellmanReport, v: Violation| {
        report.violation_count += 1;
        if report.violations.len() < KEPT_VIOLATIONS {
            report.violations.push(v);
        }
    };
    for s in sample_bit_states(seed, n_samples) {
        let v = v_star_unchecked(h, s, n_terms);
        let best = pi_star(family, h, s);
        let mut greedy = 0;
        let mut greedy_q = f64::NEG_INFINITY;
        for a in 0..family.action_count() {
            let (next, r) = closed_form_step(family, h, s, a);
            let q = r + g * v_star_unchecked(h, next, n_terms);
            if q > greedy_q {
                greedy_q = q;
                greedy = a;
            }
            if a == best {
                let res = (v - q).abs();
                report.max_equality_residual = report.max_equality_residual.max(res);
                if res > tol {
                    record(
                        &mut report,
                        Violation {
                            state: s,
                            action: a,
                            excess: res - tol,
                        },
                    );
                }
            } else {
                let slack = q - v;
                report.max_inequality_slack = report.max_inequality_slack.max(slack);
                if slack > tol {
                    record(
                        &mut report,
                        Violation {
                            state: s,
                            action: a,
                            excess: slack - tol,
                        },
                    );
                }
            }
        }
        if greedy == best {
            report.greedy_matches += 1;
        }
    }
    Ok(report)
}
