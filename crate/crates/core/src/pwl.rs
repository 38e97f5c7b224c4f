//! Piecewise-linear functions on the unit interval.
//!
//! A [`PwlFunction`] is stored as ascending breakpoints `x_0 = 0 < x_1 < ... < x_m = 1`
//! and, for every interval `[x_i, x_{i+1})`, a line `a_i * s + b_i` in global
//! coordinates. Pieces are right-open; `s = 1` evaluates through the right limit
//! of the last piece. Jumps are allowed at interior breakpoints, so the same type
//! carries dynamics, indicator rewards, Q-functions and value functions.
//!
//! Every operation here is pure and returns a fresh function. Results of the
//! binary operations are exact up to floating point; callers that care about
//! piece counts should pass the result through [`PwlFunction::simplify`].

use serde::{Deserialize, Serialize};

use crate::error::PwlError;
use crate::policy::PiecewisePolicy;

/// Slack used when checking that an inner function stays inside `[0, 1]`.
pub const RANGE_SLACK: f64 = 1e-12;

/// Two pieces whose slopes differ by less than this never get a crossing breakpoint.
pub const PARALLEL_EPS: f64 = 1e-12;

/// Deduplication tolerances used by [`PwlFunction::simplify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Slope tolerance, relative to `max(1, |a|)`.
    pub slope_tol: f64,
    /// Absolute tolerance on the value gap at a junction.
    pub value_tol: f64,
    /// Pieces shorter than this are absorbed into a neighbour.
    pub min_len: f64,
}

impl Tolerances {
    pub const CANONICAL: Tolerances = Tolerances {
        slope_tol: 1e-9,
        value_tol: 1e-9,
        min_len: 1e-12,
    };

    /// Only exact duplicates merge; nothing is dropped.
    pub const EXACT: Tolerances = Tolerances {
        slope_tol: 0.0,
        value_tol: 0.0,
        min_len: 0.0,
    };
}

impl Default for Tolerances {
    fn default() -> Self {
        Self::CANONICAL
    }
}

/// A single linear piece `slope * s + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub slope: f64,
    pub intercept: f64,
}

impl Line {
    pub const fn new(slope: f64, intercept: f64) -> Self {
        Self { slope, intercept }
    }

    #[inline]
    pub fn at(&self, s: f64) -> f64 {
        self.slope * s + self.intercept
    }
}

/// Possibly discontinuous piecewise-linear function on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPwl", into = "RawPwl")]
pub struct PwlFunction {
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPwl {
    breakpoints: Vec<f64>,
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
}

impl TryFrom<RawPwl> for PwlFunction {
    type Error = PwlError;

    fn try_from(raw: RawPwl) -> Result<Self, Self::Error> {
        PwlFunction::new(raw.breakpoints, raw.slopes, raw.intercepts)
    }
}

impl From<PwlFunction> for RawPwl {
    fn from(f: PwlFunction) -> Self {
        RawPwl {
            breakpoints: f.breakpoints,
            slopes: f.slopes,
            intercepts: f.intercepts,
        }
    }
}

impl PwlFunction {
    /// Builds a function from raw arrays, validating every invariant.
    pub fn new(
        breakpoints: Vec<f64>,
        slopes: Vec<f64>,
        intercepts: Vec<f64>,
    ) -> Result<Self, PwlError> {
        validate_breakpoints(&breakpoints)?;
        let pieces = breakpoints.len() - 1;
        if slopes.len() != pieces || intercepts.len() != pieces {
            return Err(PwlError::ShapeMismatch {
                breakpoints: breakpoints.len(),
                slopes: slopes.len(),
                intercepts: intercepts.len(),
            });
        }
        if let Some(i) = slopes
            .iter()
            .chain(intercepts.iter())
            .position(|v| !v.is_finite())
        {
            return Err(PwlError::NonFinite { index: i % pieces });
        }
        Ok(Self {
            breakpoints,
            slopes,
            intercepts,
        })
    }

    /// Internal constructor for operation outputs that are valid by construction.
    pub(crate) fn from_parts(breakpoints: Vec<f64>, lines: Vec<Line>) -> Self {
        debug_assert_eq!(breakpoints.len(), lines.len() + 1);
        debug_assert!(breakpoints[0] == 0.0 && *breakpoints.last().unwrap() == 1.0);
        debug_assert!(
            breakpoints.windows(2).all(|w| w[0] < w[1]),
            "breakpoints not ascending"
        );
        let (slopes, intercepts) = lines.iter().map(|l| (l.slope, l.intercept)).unzip();
        Self {
            breakpoints,
            slopes,
            intercepts,
        }
    }

    /// Builds a function from breakpoints and one line per interval.
    pub fn from_lines(breakpoints: Vec<f64>, lines: &[Line]) -> Result<Self, PwlError> {
        let (slopes, intercepts) = lines.iter().map(|l| (l.slope, l.intercept)).unzip();
        Self::new(breakpoints, slopes, intercepts)
    }

    pub fn constant(c: f64) -> Self {
        Self::linear(0.0, c)
    }

    pub fn identity() -> Self {
        Self::linear(1.0, 0.0)
    }

    pub fn linear(slope: f64, intercept: f64) -> Self {
        Self::from_parts(vec![0.0, 1.0], vec![Line::new(slope, intercept)])
    }

    /// Continuous interpolant through `(xs[i], ys[i])`; `xs` must start at 0 and end at 1.
    pub fn from_knots(xs: &[f64], ys: &[f64]) -> Result<Self, PwlError> {
        if xs.len() != ys.len() {
            return Err(PwlError::ShapeMismatch {
                breakpoints: xs.len(),
                slopes: ys.len().saturating_sub(1),
                intercepts: ys.len().saturating_sub(1),
            });
        }
        validate_breakpoints(xs)?;
        let lines: Vec<Line> = xs
            .windows(2)
            .zip(ys.windows(2))
            .map(|(x, y)| {
                let slope = (y[1] - y[0]) / (x[1] - x[0]);
                Line::new(slope, y[0] - slope * x[0])
            })
            .collect();
        Self::from_lines(xs.to_vec(), &lines)
    }

    /// Step function taking `values[i]` on `[xs[i], xs[i+1])`.
    pub fn step(xs: &[f64], values: &[f64]) -> Result<Self, PwlError> {
        let lines: Vec<Line> = values.iter().map(|&v| Line::new(0.0, v)).collect();
        Self::from_lines(xs.to_vec(), &lines)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    /// Number of stored pieces. After `simplify` with canonical tolerances this is
    /// the number of maximal linear pieces.
    pub fn piece_count(&self) -> usize {
        self.slopes.len()
    }

    #[inline]
    pub fn line(&self, i: usize) -> Line {
        Line::new(self.slopes[i], self.intercepts[i])
    }

    pub fn lines(&self) -> impl Iterator<Item = Line> + '_ {
        self.slopes
            .iter()
            .zip(&self.intercepts)
            .map(|(&a, &b)| Line::new(a, b))
    }

    /// Index of the piece whose interval `[x_i, x_{i+1})` contains `s`; `s >= 1` maps
    /// to the last piece and `s <= 0` to the first.
    #[inline]
    pub fn piece_index(&self, s: f64) -> usize {
        // first breakpoint strictly greater than s, minus one
        let k = self.breakpoints.partition_point(|&x| x <= s);
        k.saturating_sub(1).min(self.slopes.len() - 1)
    }

    /// Evaluates at `s`, rejecting points outside `[0, 1]`.
    pub fn eval(&self, s: f64) -> Result<f64, PwlError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(PwlError::Domain(s));
        }
        Ok(self.value(s))
    }

    /// Evaluates without a domain check; arguments outside `[0, 1]` extend the end pieces.
    #[inline]
    pub fn value(&self, s: f64) -> f64 {
        self.line(self.piece_index(s)).at(s)
    }

    /// Left and right limits of piece `i` at its interval ends.
    #[inline]
    pub fn piece_end_values(&self, i: usize) -> (f64, f64) {
        let l = self.line(i);
        (l.at(self.breakpoints[i]), l.at(self.breakpoints[i + 1]))
    }

    /// Smallest and largest value reached, including one-sided limits.
    pub fn range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.piece_count() {
            let (a, b) = self.piece_end_values(i);
            lo = lo.min(a.min(b));
            hi = hi.max(a.max(b));
        }
        (lo, hi)
    }

    /// Largest `|slope|` over all pieces.
    pub fn max_abs_slope(&self) -> f64 {
        self.slopes.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// Largest jump `|f(x_i^+) - f(x_i^-)|` over interior breakpoints.
    pub fn max_jump(&self) -> f64 {
        (1..self.piece_count())
            .map(|i| {
                let x = self.breakpoints[i];
                (self.line(i).at(x) - self.line(i - 1).at(x)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Supremum of `|f|` over `[0, 1]`.
    pub fn sup_abs(&self) -> f64 {
        let (lo, hi) = self.range();
        lo.abs().max(hi.abs())
    }

    /// Checks that every piece endpoint and limit lies in `[0, 1]` within [`RANGE_SLACK`].
    pub fn check_unit_range(&self) -> Result<(), PwlError> {
        let (lo, hi) = self.range();
        if lo < -RANGE_SLACK || hi > 1.0 + RANGE_SLACK {
            return Err(PwlError::Range { lo, hi });
        }
        Ok(())
    }

    /// Exact integral over `[0, 1]`.
    pub fn integrate(&self) -> f64 {
        (0..self.piece_count())
            .map(|i| {
                let (l, r) = (self.breakpoints[i], self.breakpoints[i + 1]);
                (r - l) * (self.slopes[i] * 0.5 * (l + r) + self.intercepts[i])
            })
            .sum()
    }

    /// `s -> self(inner(s))`.
    ///
    /// New breakpoints are the breakpoints of `inner` plus the preimages, under each
    /// inner piece, of the breakpoints of `self`. The result is not simplified.
    pub fn compose(&self, inner: &PwlFunction) -> Result<PwlFunction, PwlError> {
        inner.check_unit_range()?;
        let outer_bps = &self.breakpoints;
        let mut bps = Vec::with_capacity(inner.piece_count() * 2 + 1);
        let mut lines = Vec::with_capacity(inner.piece_count() * 2);
        bps.push(0.0);
        let mut cuts: Vec<f64> = Vec::new();

        for i in 0..inner.piece_count() {
            let (xl, xr) = (inner.breakpoints[i], inner.breakpoints[i + 1]);
            let g = inner.line(i);
            cuts.clear();
            if g.slope != 0.0 {
                let (yl, yr) = (g.at(xl), g.at(xr));
                let (lo, hi) = if yl <= yr { (yl, yr) } else { (yr, yl) };
                let first = outer_bps.partition_point(|&t| t <= lo);
                let last = outer_bps.partition_point(|&t| t < hi);
                for &t in &outer_bps[first..last] {
                    let s = xl + (t - yl) / g.slope;
                    if s > xl && s < xr {
                        cuts.push(s);
                    }
                }
                if g.slope < 0.0 {
                    cuts.reverse();
                }
            }
            let mut left = xl;
            for k in 0..=cuts.len() {
                let right = if k < cuts.len() { cuts[k] } else { xr };
                if right <= left {
                    continue;
                }
                let mid = 0.5 * (left + right);
                let y = g.at(mid).clamp(0.0, 1.0);
                let o = self.line(self.piece_index(y));
                lines.push(Line::new(
                    o.slope * g.slope,
                    o.slope * g.intercept + o.intercept,
                ));
                bps.push(right);
                left = right;
            }
        }
        Ok(PwlFunction::from_parts(bps, lines))
    }

    /// Exact pointwise maximum.
    pub fn pointwise_max(&self, other: &PwlFunction) -> PwlFunction {
        let (v, _) = max_with_labels(self, &[0; 0], other, 0, 1);
        v
    }

    /// `alpha * self + beta * other` on the merged breakpoint set.
    pub fn affine_combine(&self, other: &PwlFunction, alpha: f64, beta: f64) -> PwlFunction {
        let mut bps = Vec::with_capacity(self.piece_count() + other.piece_count() + 1);
        let mut lines = Vec::with_capacity(self.piece_count() + other.piece_count());
        bps.push(0.0);
        for_each_common_interval(self, other, |_, r, i, j| {
            let (f, g) = (self.line(i), other.line(j));
            lines.push(Line::new(
                alpha * f.slope + beta * g.slope,
                alpha * f.intercept + beta * g.intercept,
            ));
            bps.push(r);
        });
        PwlFunction::from_parts(bps, lines)
    }

    /// `scale * self + offset`.
    pub fn scale_shift(&self, scale: f64, offset: f64) -> PwlFunction {
        let lines: Vec<Line> = self
            .lines()
            .map(|l| Line::new(scale * l.slope, scale * l.intercept + offset))
            .collect();
        PwlFunction::from_parts(self.breakpoints.clone(), lines)
    }

    /// Removes pieces shorter than `min_len`, then merges runs of consecutive pieces
    /// whose slope and junction value agree with the run's first line.
    pub fn simplify(&self, tol: Tolerances) -> PwlFunction {
        // Pass 1: absorb slivers into the previous piece (or the next one at the left edge).
        let n = self.piece_count();
        let mut bps: Vec<f64> = Vec::with_capacity(n + 1);
        let mut lines: Vec<Line> = Vec::with_capacity(n);
        bps.push(0.0);
        for i in 0..n {
            let len = self.breakpoints[i + 1] - self.breakpoints[i];
            if len < tol.min_len && n > 1 {
                if lines.is_empty() {
                    // leading sliver: the next kept piece will extend left over it
                    continue;
                }
                *bps.last_mut().unwrap() = self.breakpoints[i + 1];
                continue;
            }
            lines.push(self.line(i));
            bps.push(self.breakpoints[i + 1]);
        }
        if lines.is_empty() {
            // every piece is a sliver; keep the longest
            let i = (0..n)
                .max_by(|&a, &b| {
                    let la = self.breakpoints[a + 1] - self.breakpoints[a];
                    let lb = self.breakpoints[b + 1] - self.breakpoints[b];
                    la.total_cmp(&lb)
                })
                .unwrap_or(0);
            return PwlFunction::from_parts(vec![0.0, 1.0], vec![self.line(i)]);
        }
        *bps.last_mut().unwrap() = 1.0;

        // Pass 2: merge against the run line.
        let mut out_bps = Vec::with_capacity(bps.len());
        let mut out_lines: Vec<Line> = Vec::with_capacity(lines.len());
        out_bps.push(0.0);
        for (k, l) in lines.iter().enumerate() {
            if let Some(run) = out_lines.last() {
                let x = bps[k];
                let scale = 1f64.max(run.slope.abs());
                if (run.slope - l.slope).abs() <= tol.slope_tol * scale
                    && (run.at(x) - l.at(x)).abs() <= tol.value_tol
                {
                    *out_bps.last_mut().unwrap() = bps[k + 1];
                    continue;
                }
            }
            out_lines.push(*l);
            out_bps.push(bps[k + 1]);
        }
        PwlFunction::from_parts(out_bps, out_lines)
    }

    /// [`simplify`](Self::simplify) with [`Tolerances::CANONICAL`].
    pub fn canonical(&self) -> PwlFunction {
        self.simplify(Tolerances::CANONICAL)
    }

    /// Returns the function that equals `parts[policy(s)](s)`.
    pub fn splice(parts: &[PwlFunction], policy: &PiecewisePolicy) -> PwlFunction {
        let mut bps = vec![0.0];
        let mut lines = Vec::new();
        let pbps = policy.breakpoints();
        for (k, &a) in policy.actions().iter().enumerate() {
            let (l, r) = (pbps[k], pbps[k + 1]);
            let f = &parts[a];
            let start = f.piece_index(l);
            let mut j = start;
            loop {
                let right = f.breakpoints[j + 1].min(r);
                lines.push(f.line(j));
                bps.push(right);
                if right >= r {
                    break;
                }
                j += 1;
            }
        }
        PwlFunction::from_parts(bps, lines)
    }
}

impl std::fmt::Display for PwlFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for i in 0..self.piece_count() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(
                f,
                "[{}, {}): {}*s + {}",
                self.breakpoints[i],
                self.breakpoints[i + 1],
                self.slopes[i],
                self.intercepts[i]
            )?;
        }
        Ok(())
    }
}

fn validate_breakpoints(bps: &[f64]) -> Result<(), PwlError> {
    if bps.len() < 2 {
        return Err(PwlError::TooFewBreakpoints(bps.len()));
    }
    if bps[0] != 0.0 || *bps.last().unwrap() != 1.0 {
        return Err(PwlError::Endpoints {
            first: bps[0],
            last: *bps.last().unwrap(),
        });
    }
    if let Some(i) = bps.windows(2).position(|w| !(w[0] < w[1])) {
        return Err(PwlError::NotAscending { index: i + 1 });
    }
    Ok(())
}

/// Walks the common refinement of two breakpoint sets, calling
/// `visit(left, right, piece_of_f, piece_of_g)` for each interval in order.
pub(crate) fn for_each_common_interval(
    f: &PwlFunction,
    g: &PwlFunction,
    mut visit: impl FnMut(f64, f64, usize, usize),
) {
    let (fb, gb) = (&f.breakpoints, &g.breakpoints);
    let (mut i, mut j) = (0usize, 0usize);
    let mut left = 0.0;
    while i < f.piece_count() && j < g.piece_count() {
        let (fr, gr) = (fb[i + 1], gb[j + 1]);
        let right = fr.min(gr);
        if right > left {
            visit(left, right, i, j);
            left = right;
        }
        if fr <= right {
            i += 1;
        }
        if gr <= right {
            j += 1;
        }
    }
}

/// Pointwise max of `f` (labelled by `f_labels`, or `f_label_default` when the slice is
/// empty) and `g` (labelled `g_label`). Where `g` is strictly larger the result
/// carries `g_label`; ties keep the label of `f`.
pub(crate) fn max_with_labels(
    f: &PwlFunction,
    f_labels: &[usize],
    g: &PwlFunction,
    f_label_default: usize,
    g_label: usize,
) -> (PwlFunction, Vec<usize>) {
    let cap = f.piece_count() + g.piece_count() + 4;
    let mut bps = Vec::with_capacity(cap);
    let mut lines = Vec::with_capacity(cap);
    let mut labels = Vec::with_capacity(cap);
    bps.push(0.0);
    let label_of = |i: usize| {
        if f_labels.is_empty() {
            f_label_default
        } else {
            f_labels[i]
        }
    };
    let mut push = |right: f64, line: Line, label: usize| {
        bps.push(right);
        lines.push(line);
        labels.push(label);
    };
    for_each_common_interval(f, g, |l, r, i, j| {
        let (lf, lg) = (f.line(i), g.line(j));
        let fl = label_of(i);
        let ds = lf.slope - lg.slope;
        let db = lf.intercept - lg.intercept;
        if ds.abs() < PARALLEL_EPS {
            let mid = 0.5 * (l + r);
            if lg.at(mid) > lf.at(mid) {
                push(r, lg, g_label);
            } else {
                push(r, lf, fl);
            }
            return;
        }
        let c = -db / ds;
        if c > l && c < r {
            // f - g changes sign at c; slope of (f - g) is ds
            if ds > 0.0 {
                push(c, lg, g_label);
                push(r, lf, fl);
            } else {
                push(c, lf, fl);
                push(r, lg, g_label);
            }
        } else {
            let mid = 0.5 * (l + r);
            if lg.at(mid) > lf.at(mid) {
                push(r, lg, g_label);
            } else {
                push(r, lf, fl);
            }
        }
    });
    (PwlFunction::from_parts(bps, lines), labels)
}

/// Greedy selection over per-action functions.
///
/// Returns the argmax policy (ties resolved toward the lowest action index) and
/// the pointwise maximum. The maximum is simplified with `tol`; the policy merges
/// adjacent equal-action intervals and absorbs intervals shorter than `tol.min_len`.
pub fn argmax_select_with(
    q_per_action: &[PwlFunction],
    tol: Tolerances,
) -> Result<(PiecewisePolicy, PwlFunction), PwlError> {
    let first = q_per_action.first().ok_or(PwlError::NoActions)?;
    let mut v = first.clone();
    let mut labels = vec![0usize; v.piece_count()];
    for (a, q) in q_per_action.iter().enumerate().skip(1) {
        let (nv, nl) = max_with_labels(&v, &labels, q, 0, a);
        v = nv;
        labels = nl;
    }
    let policy = PiecewisePolicy::from_raw(v.breakpoints.clone(), labels).simplified(tol.min_len);
    Ok((policy, v.simplify(tol)))
}

/// [`argmax_select_with`] under canonical tolerances.
pub fn argmax_select(
    q_per_action: &[PwlFunction],
) -> Result<(PiecewisePolicy, PwlFunction), PwlError> {
    argmax_select_with(q_per_action, Tolerances::CANONICAL)
}
