//! Small fully connected ReLU networks with scalar input.
//!
//! Parameters live in one flat vector so optimizers are plain vector updates.
//! Layer `l` stores its `out x in` weight matrix row-major, then its biases.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::LearnError;
use crate::pwl::{Line, PwlFunction};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNet", into = "RawNet")]
pub struct MlpNet {
    widths: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNet {
    widths: Vec<usize>,
    params: Vec<f64>,
}

impl TryFrom<RawNet> for MlpNet {
    type Error = LearnError;
    fn try_from(raw: RawNet) -> Result<Self, LearnError> {
        MlpNet::from_params(raw.widths, raw.params)
    }
}

impl From<MlpNet> for RawNet {
    fn from(n: MlpNet) -> Self {
        RawNet {
            widths: n.widths,
            params: n.params,
        }
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

/// Scratch activations reused across forward/backward calls.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl MlpNet {
    fn check_widths(widths: &[usize]) -> Result<(), LearnError> {
        if widths.len() < 2 || widths[0] != 1 || widths.contains(&0) {
            return Err(LearnError::Shape(format!(
                "widths {widths:?}: need input width 1 and positive layer widths"
            )));
        }
        Ok(())
    }

    pub fn zeros(widths: &[usize]) -> Result<Self, LearnError> {
        Self::check_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; param_count(widths)],
        })
    }

    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Result<Self, LearnError> {
        let mut net = Self::zeros(widths)?;
        let mut off = 0;
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[off..off + w[1] * (w[0] + 1)] {
                *p = rng.gen_range(-bound..bound);
            }
            off += w[1] * (w[0] + 1);
        }
        Ok(net)
    }

    pub fn from_params(widths: Vec<usize>, params: Vec<f64>) -> Result<Self, LearnError> {
        Self::check_widths(&widths)?;
        if params.len() != param_count(&widths) {
            return Err(LearnError::Shape(format!(
                "widths {widths:?} need {} parameters, got {}",
                param_count(&widths),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(LearnError::NonFinite("network parameters".into()));
        }
        Ok(Self { widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn output_count(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    /// Forward pass into the workspace; returns the output slice.
    pub fn forward_ws<'w>(&self, s: f64, ws: &'w mut Workspace) -> &'w [f64] {
        let layers = self.widths.len() - 1;
        ws.acts.resize_with(layers + 1, Vec::new);
        ws.acts[0].clear();
        ws.acts[0].push(s);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + n_out * n_in];
            let b = &self.params[off + n_out * n_in..off + n_out * (n_in + 1)];
            off += n_out * (n_in + 1);
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            out.clear();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                out.push(if l + 1 < layers { z.max(0.0) } else { z });
            }
        }
        &ws.acts[layers]
    }

    pub fn forward(&self, s: f64) -> Vec<f64> {
        let mut ws = Workspace::default();
        self.forward_ws(s, &mut ws).to_vec()
    }

    /// Adds `d loss / d params` to `grad`, given `dout = d loss / d output` for
    /// the input last passed to [`forward_ws`](Self::forward_ws) with `ws`.
    pub fn backward_ws(&self, dout: &[f64], grad: &mut [f64], ws: &mut Workspace) {
        let layers = self.widths.len() - 1;
        debug_assert_eq!(dout.len(), self.output_count());
        debug_assert_eq!(grad.len(), self.params.len());
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.widths[l + 1] * (self.widths[l] + 1);
        }
        ws.delta.clear();
        ws.delta.extend_from_slice(dout);
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let input = &ws.acts[l];
            for o in 0..n_out {
                let d = ws.delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
                grad[off + n_out * n_in + o] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + n_out * n_in];
                ws.delta_prev.clear();
                ws.delta_prev.resize(n_in, 0.0);
                for o in 0..n_out {
                    let d = ws.delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (dp, wi) in ws.delta_prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *dp += d * wi;
                    }
                }
                for (dp, a) in ws.delta_prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *dp = 0.0;
                    }
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            }
        }
    }

    /// Exact piecewise-linear form of each output of a one-hidden-layer net.
    /// Breakpoints are the unit kinks `-b/w` inside `(0, 1)`, so each output
    /// has at most `width + 1` pieces.
    pub fn to_pwl(&self) -> Result<Vec<PwlFunction>, LearnError> {
        if self.hidden_layers() != 1 {
            return Err(LearnError::NotShallow(self.hidden_layers()));
        }
        let d = self.widths[1];
        let outs = self.output_count();
        let w1 = &self.params[..d];
        let b1 = &self.params[d..2 * d];
        let w2 = &self.params[2 * d..2 * d + outs * d];
        let b2 = &self.params[2 * d + outs * d..];

        let mut kinks: Vec<f64> = (0..d)
            .filter(|&j| w1[j] != 0.0)
            .map(|j| -b1[j] / w1[j])
            .filter(|&x| x > 0.0 && x < 1.0)
            .collect();
        kinks.sort_by(f64::total_cmp);
        kinks.dedup();
        let mut bps = Vec::with_capacity(kinks.len() + 2);
        bps.push(0.0);
        bps.extend(kinks);
        bps.push(1.0);

        let mut lines = vec![Vec::with_capacity(bps.len() - 1); outs];
        for seg in bps.windows(2) {
            let mid = 0.5 * (seg[0] + seg[1]);
            let mut slope = vec![0.0; outs];
            let mut icpt = b2.to_vec();
            for j in 0..d {
                if w1[j] * mid + b1[j] > 0.0 {
                    for o in 0..outs {
                        slope[o] += w2[o * d + j] * w1[j];
                        icpt[o] += w2[o * d + j] * b1[j];
                    }
                }
            }
            for o in 0..outs {
                lines[o].push(Line::new(slope[o], icpt[o]));
            }
        }
        lines
            .iter()
            .map(|ls| PwlFunction::from_lines(bps.clone(), ls).map_err(LearnError::from))
            .collect()
    }
}

/// Update rule and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub const fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum }
    }

    pub const fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(LearnError::Config(format!("optimizer {self:?}")))
        }
    }
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: match config {
                OptimizerConfig::Adam { .. } => vec![0.0; n_params],
                OptimizerConfig::Sgd { .. } => Vec::new(),
            },
            t: 0,
        }
    }

    /// One update `params -= step(grad)`. Rejects non-finite gradients without
    /// touching the parameters.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), LearnError> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(LearnError::Shape(format!(
                "{} gradients for {} parameters",
                grad.len(),
                params.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(LearnError::NonFinite("gradient".into()));
        }
        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((p, m), g) in params.iter_mut().zip(&mut self.m).zip(grad) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, m), v), g) in params
                    .iter_mut()
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                    .zip(grad)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_net(seed: u64, widths: &[usize]) -> MlpNet {
        MlpNet::init(widths, &mut rng::seeded(seed)).unwrap()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let n = MlpNet::zeros(&[1, 5, 3]).unwrap();
        assert_eq!(n.forward(0.4), vec![0.0; 3]);
        let f = n.to_pwl().unwrap();
        assert!(f.iter().all(|f| f.piece_count() == 1));
    }

    #[test]
    fn single_unit_is_relu() {
        // w1 = 1, b1 = 0, w2 = 1, b2 = 0
        let n = MlpNet::from_params(vec![1, 1, 1], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        for s in [0.0, 0.25, 0.9, 1.0] {
            assert_eq!(n.forward(s), vec![s]);
        }
    }

    #[test]
    fn shape_checks() {
        assert!(MlpNet::zeros(&[2, 3, 1]).is_err());
        assert!(MlpNet::zeros(&[1]).is_err());
        assert!(MlpNet::from_params(vec![1, 2, 1], vec![0.0; 6]).is_err());
        assert!(MlpNet::from_params(vec![1, 1, 1], vec![f64::NAN, 0.0, 0.0, 0.0]).is_err());
        assert!(matches!(
            MlpNet::zeros(&[1, 3, 3, 1]).unwrap().to_pwl(),
            Err(LearnError::NotShallow(2))
        ));
    }

    #[test]
    fn to_pwl_matches_forward() {
        for seed in 0..20 {
            let n = random_net(seed, &[1, 32, 2]);
            let f = n.to_pwl().unwrap();
            assert!(f[0].piece_count() <= 33);
            let mut r = rng::seeded(100 + seed);
            for _ in 0..5000 {
                let s: f64 = r.gen();
                let out = n.forward(s);
                for o in 0..2 {
                    assert!((f[o].value(s) - out[o]).abs() <= 1e-9);
                }
            }
        }
    }

    fn loss(n: &MlpNet, s: f64, target: &[f64]) -> f64 {
        n.forward(s)
            .iter()
            .zip(target)
            .map(|(y, t)| 0.5 * (y - t) * (y - t))
            .sum()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut worst: f64 = 0.0;
        for seed in 0..50 {
            let n = random_net(seed, &[1, 8, 6, 2]);
            let mut r = rng::seeded(1000 + seed);
            let s: f64 = r.gen();
            let target = [r.gen::<f64>(), r.gen::<f64>()];
            let mut ws = Workspace::default();
            let out = n.forward_ws(s, &mut ws).to_vec();
            let dout: Vec<f64> = out.iter().zip(&target).map(|(y, t)| y - t).collect();
            let mut grad = vec![0.0; n.params().len()];
            n.backward_ws(&dout, &mut grad, &mut ws);
            let h = 1e-6;
            for i in 0..n.params().len() {
                let mut p = n.clone();
                p.params_mut()[i] += h;
                let up = loss(&p, s, &target);
                p.params_mut()[i] -= 2.0 * h;
                let down = loss(&p, s, &target);
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimizerConfig::sgd(1e-3, 0.9), OptimizerConfig::adam(1e-3)] {
            let mut p = vec![0.5, -1.0];
            let mut opt = Optimizer::new(cfg, 2);
            opt.step(&mut p, &[0.0, 0.0]).unwrap();
            assert_eq!(p, vec![0.5, -1.0]);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![0.5];
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3), 1);
        assert!(opt.step(&mut p, &[f64::INFINITY]).is_err());
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = (x - 3)^2 / 2, gradient x - 3.
        for cfg in [OptimizerConfig::sgd(1e-2, 0.9), OptimizerConfig::adam(1e-2)] {
            let mut x = vec![0.0];
            let mut opt = Optimizer::new(cfg, 1);
            for _ in 0..10_000 {
                let g = [x[0] - 3.0];
                opt.step(&mut x, &g).unwrap();
            }
            assert!((x[0] - 3.0).abs() < 1e-6, "{cfg:?} {}", x[0]);
        }
    }

    #[test]
    fn json_roundtrip() {
        let n = random_net(3, &[1, 4, 2]);
        let text = serde_json::to_string(&n).unwrap();
        let back: MlpNet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, n);
        assert!(serde_json::from_str::<MlpNet>(r#"{"widths":[1,2,1],"params":[1]}"#).is_err());
    }
}
