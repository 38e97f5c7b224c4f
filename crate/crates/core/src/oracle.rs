//! Brute-force dynamic programming on a uniform state grid.
//!
//! Written without any of the PWL machinery: the MDP's dynamics and rewards are
//! read as raw coefficient arrays and evaluated by a separate scan, so the
//! oracle can cross-check the exact solver.

use crate::mdp::Mdp;

/// Raw copy of a piecewise-linear function with its own evaluator.
struct Table {
    bps: Vec<f64>,
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
}

impl Table {
    fn new(f: &crate::pwl::PwlFunction) -> Self {
        Self {
            bps: f.breakpoints().to_vec(),
            slopes: f.slopes().to_vec(),
            intercepts: f.intercepts().to_vec(),
        }
    }

    fn at(&self, x: f64) -> f64 {
        let last = self.slopes.len() - 1;
        let mut i = 0;
        while i < last && x >= self.bps[i + 1] {
            i += 1;
        }
        self.slopes[i] * x + self.intercepts[i]
    }
}

/// Q tables on the grid `s_i = i / n`, `i = 0..n`.
#[derive(Debug, Clone)]
pub struct GridQ {
    pub grid_n: usize,
    pub actions: usize,
    /// `tables[h - 1][a][i]` is the Q value with `h` steps to go.
    pub tables: Vec<Vec<Vec<f64>>>,
}

impl GridQ {
    pub fn state(&self, i: usize) -> f64 {
        i as f64 / self.grid_n as f64
    }

    /// Index of the grid point nearest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        nearest(self.grid_n, x)
    }

    pub fn steps(&self) -> usize {
        self.tables.len()
    }

    pub fn q(&self, steps_to_go: usize, a: usize, i: usize) -> f64 {
        self.tables[steps_to_go - 1][a][i]
    }

    pub fn v(&self, steps_to_go: usize, i: usize) -> f64 {
        (0..self.actions)
            .map(|a| self.q(steps_to_go, a, i))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean of `V` over the grid: the grid estimate of the uniform-start return.
    pub fn mean_v(&self, steps_to_go: usize) -> f64 {
        (0..self.grid_n)
            .map(|i| self.v(steps_to_go, i))
            .sum::<f64>()
            / self.grid_n as f64
    }
}

fn nearest(n: usize, x: f64) -> usize {
    let i = (x * n as f64).round();
    if i <= 0.0 {
        0
    } else {
        (i as usize).min(n - 1)
    }
}

/// Runs `H` (or `T`) backups on the grid with nearest-neighbour lookup of
/// successor states. `grid_n` must be at least 2.
pub fn grid_dp_oracle(mdp: &Mdp, grid_n: usize) -> GridQ {
    assert!(grid_n >= 2, "grid needs at least two states");
    let actions = mdp.action_count();
    let gamma = mdp.gamma_eff();
    let dynamics: Vec<Table> = mdp.dynamics().iter().map(Table::new).collect();
    let rewards: Vec<Table> = mdp.reward().iter().map(Table::new).collect();
    let states: Vec<f64> = (0..grid_n).map(|i| i as f64 / grid_n as f64).collect();
    let next: Vec<Vec<usize>> = dynamics
        .iter()
        .map(|f| states.iter().map(|&s| nearest(grid_n, f.at(s))).collect())
        .collect();
    let r: Vec<Vec<f64>> = rewards
        .iter()
        .map(|f| states.iter().map(|&s| f.at(s)).collect())
        .collect();

    let mut tables = Vec::with_capacity(mdp.horizon().steps());
    let mut v = vec![0.0; grid_n];
    for _ in 0..mdp.horizon().steps() {
        let q: Vec<Vec<f64>> = (0..actions)
            .map(|a| {
                (0..grid_n)
                    .map(|i| r[a][i] + gamma * v[next[a][i]])
                    .collect()
            })
            .collect();
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = q.iter().map(|qa| qa[i]).fold(f64::NEG_INFINITY, f64::max);
        }
        tables.push(q);
    }
    GridQ {
        grid_n,
        actions,
        tables,
    }
}

/// Worst-case gap between [`grid_dp_oracle`] and exact Q iterates at grid
/// points, per number of backups.
///
/// Nearest-neighbour lookup moves a successor by at most `1 / n` (the top cell
/// clamps), so with `V_h` the exact value after `h` backups,
/// `b_1 = 0` and `b_{h+1} = gamma * (Lip(V_h) / n + J(V_h) + b_h)`, where `J`
/// sums the absolute jumps of `V_h`.
pub fn grid_error_bound(sol: &crate::dp::DpSolution, gamma: f64, grid_n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(sol.history.len());
    let mut b = 0.0;
    for h in 0..sol.history.len() {
        if h > 0 {
            let v = sol.history[h - 1]
                .greedy()
                .map(|(_, v)| v)
                .expect("greedy of a valid Q");
            let jumps: f64 = (1..v.piece_count())
                .map(|i| (v.piece_end_values(i - 1).1 - v.piece_end_values(i).0).abs())
                .sum();
            b = gamma * (v.max_abs_slope() / grid_n as f64 + jumps + b);
        }
        out.push(b);
    }
    out
}
