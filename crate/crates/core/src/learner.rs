//! Toy training loops: DQN with replay, per-action dynamics regression, and
//! supervised fitting of the fractal family's optimal Q.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::LearnError;
use crate::fractal::{self, Family};
use crate::mdp::{make_fractal_mdp, Mdp};
use crate::nn::{MlpNet, Optimizer, OptimizerConfig, Workspace};
use crate::planner::{rollout_return, DynModel};
use crate::pwl::argmax_select;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: f64,
    pub a: usize,
    pub r: f64,
    pub next: f64,
    pub step: usize,
    pub terminal: bool,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            head: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items[self.head..]
            .iter()
            .chain(&self.items[..self.head])
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> &Transition {
        &self.items[rng.gen_range(0..self.items.len())]
    }
}

/// Hyperparameters of the training loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Updates between target-network refreshes.
    pub target_update: usize,
    /// `eps(t) = eps_floor + eps_scale * exp(-t / eps_decay)`, `t` in episodes.
    pub eps_floor: f64,
    pub eps_scale: f64,
    pub eps_decay: f64,
    pub episodes: usize,
    pub eval_period: usize,
    pub eval_starts: usize,
    /// TD discount; `None` uses the MDP's per-step discount.
    pub gamma: Option<f64>,
    pub model_optimizer: OptimizerConfig,
    pub model_updates: usize,
    pub model_batch_size: usize,
    pub holdout: f64,
    /// Weight of the l1 penalty in supervised Q fitting.
    pub l1: f64,
    pub fit_updates: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::sgd(1e-3, 0.9),
            batch_size: 128,
            buffer_capacity: 10_000,
            target_update: 50,
            eps_floor: 0.01,
            eps_scale: 0.89,
            eps_decay: 200.0,
            episodes: 2000,
            eval_period: 100,
            eval_starts: 256,
            gamma: None,
            model_optimizer: OptimizerConfig::adam(1e-3),
            model_updates: 20_000,
            model_batch_size: 512,
            holdout: 0.1,
            l1: 1e-5,
            fit_updates: 5000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        self.optimizer.validate()?;
        self.model_optimizer.validate()?;
        let bad = |what: &str| Err(LearnError::Config(what.to_string()));
        if self.batch_size == 0 || self.model_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be positive");
        }
        if self.target_update == 0 {
            return bad("target_update must be positive");
        }
        if self.eval_period == 0 || self.eval_starts == 0 {
            return bad("eval_period and eval_starts must be positive");
        }
        if !(self.eps_decay > 0.0) || self.eps_floor < 0.0 || self.eps_floor + self.eps_scale > 1.0
        {
            return bad("exploration schedule must stay in [0, 1] with positive decay");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must be in [0, 1)");
        }
        if self.l1 < 0.0 {
            return bad("l1 must be non-negative");
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return bad("gamma must be in (0, 1]");
            }
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: usize) -> f64 {
        self.eps_floor + self.eps_scale * (-(episode as f64) / self.eps_decay).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub eval_return: f64,
    pub epsilon: f64,
    /// Mean TD loss since the previous checkpoint.
    pub loss: f64,
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("episode,eval_return,epsilon,loss\n");
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.episode, p.eval_return, p.epsilon, p.loss
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct DqnResult {
    pub net: MlpNet,
    pub curve: Vec<CurvePoint>,
    /// Replay buffer at the end of training (the last `buffer_capacity` transitions).
    pub buffer: ReplayBuffer,
    /// Every transition collected during training.
    pub samples: ReplayBuffer,
    pub updates: usize,
}

impl DqnResult {
    pub fn final_return(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |p| p.eval_return)
    }
}

/// Midpoints of `n` equal cells of `[0, 1)`.
pub fn start_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// Mean return over `starts` of a stationary state-feedback policy.
pub fn mean_return(mdp: &Mdp, starts: &[f64], mut act: impl FnMut(f64, usize) -> usize) -> f64 {
    let steps = mdp.horizon().steps();
    let g = mdp.gamma_eff();
    starts
        .iter()
        .map(|&s0| rollout_return(mdp, &mut act, s0, steps, g))
        .sum::<f64>()
        / starts.len() as f64
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy action of a Q-network.
pub fn net_greedy(net: &MlpNet, s: f64, ws: &mut Workspace) -> usize {
    argmax(net.forward_ws(s, ws))
}

/// One-step TD Q-learning with replay and a periodically refreshed target net.
pub fn dqn_train(mdp: &Mdp, width: usize, cfg: &TrainConfig) -> Result<DqnResult, LearnError> {
    cfg.validate()?;
    let actions = mdp.action_count();
    let horizon = mdp.horizon().steps();
    let gamma = cfg.gamma.unwrap_or_else(|| mdp.gamma_eff());
    let mut init_rng = rng::child(cfg.seed, Stream::Init, 0);
    let mut net = MlpNet::init(&[1, width, actions], &mut init_rng)?;
    let mut target = net.clone();
    let mut opt = Optimizer::new(cfg.optimizer, net.params().len());
    let mut explore = rng::child(cfg.seed, Stream::Exploration, 0);
    let mut starts = rng::child(cfg.seed, Stream::StartStates, 0);
    let mut batch_rng = rng::child(cfg.seed, Stream::Minibatch, 0);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut samples = ReplayBuffer::new((cfg.episodes * horizon).max(1));
    let eval_starts = start_grid(cfg.eval_starts);

    let mut ws = Workspace::default();
    let mut tws = Workspace::default();
    let mut grad = vec![0.0; net.params().len()];
    let mut dout = vec![0.0; actions];
    let mut updates = 0;
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut curve = Vec::with_capacity(cfg.episodes / cfg.eval_period + 1);

    for episode in 0..cfg.episodes {
        let eps = cfg.epsilon(episode);
        let mut s: f64 = starts.gen();
        for step in 0..horizon {
            let a = if explore.gen::<f64>() < eps {
                explore.gen_range(0..actions)
            } else {
                net_greedy(&net, s, &mut ws)
            };
            let next = mdp.next_state(s, a);
            let r = mdp.reward_at(s, a);
            let t = Transition {
                s,
                a,
                r,
                next,
                step,
                terminal: step + 1 == horizon,
            };
            buffer.push(t);
            samples.push(t);
            s = next;

            if buffer.len() < cfg.batch_size {
                continue;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / cfg.batch_size as f64;
            let mut loss = 0.0;
            for _ in 0..cfg.batch_size {
                let t = *buffer.sample(&mut batch_rng);
                let y = if t.terminal {
                    t.r
                } else {
                    let tq = target.forward_ws(t.next, &mut tws);
                    t.r + gamma * tq.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                let q = net.forward_ws(t.s, &mut ws)[t.a];
                let err = q - y;
                loss += 0.5 * err * err * scale;
                dout.iter_mut().for_each(|d| *d = 0.0);
                dout[t.a] = err * scale;
                net.backward_ws(&dout, &mut grad, &mut ws);
            }
            if !loss.is_finite() {
                return Err(LearnError::Diverged {
                    update: updates,
                    loss,
                });
            }
            opt.step(net.params_mut(), &grad)?;
            updates += 1;
            loss_sum += loss;
            loss_n += 1;
            if updates % cfg.target_update == 0 {
                target = net.clone();
            }
        }
        if (episode + 1) % cfg.eval_period == 0 || episode + 1 == cfg.episodes {
            let eval_return = mean_return(mdp, &eval_starts, |s, _| net_greedy(&net, s, &mut ws));
            curve.push(CurvePoint {
                episode: episode + 1,
                eval_return,
                epsilon: eps,
                loss: if loss_n == 0 {
                    0.0
                } else {
                    loss_sum / loss_n as f64
                },
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
    }
    Ok(DqnResult {
        net,
        curve,
        buffer,
        samples,
        updates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Held-out root-mean-squared error per action (training error when the
    /// split leaves no held-out samples).
    pub rmse: Vec<f64>,
    pub train_sizes: Vec<usize>,
    pub holdout_sizes: Vec<usize>,
}

/// Minibatch regression of `s'` on `s`, one width-`hidden` net per action.
pub fn fit_dynamics_nets(
    buffer: &ReplayBuffer,
    actions: usize,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(Vec<MlpNet>, FitReport), LearnError> {
    cfg.validate()?;
    let mut nets = Vec::with_capacity(actions);
    let mut report = FitReport {
        rmse: Vec::new(),
        train_sizes: Vec::new(),
        holdout_sizes: Vec::new(),
    };
    for a in 0..actions {
        let mut data: Vec<(f64, f64)> = buffer
            .iter()
            .filter(|t| t.a == a)
            .map(|t| (t.s, t.next))
            .collect();
        if data.is_empty() {
            return Err(LearnError::MissingAction(a));
        }
        let mut split = rng::child(cfg.seed, Stream::Split, a as u32);
        data.shuffle(&mut split);
        let n_hold = (data.len() as f64 * cfg.holdout).floor() as usize;
        let n_hold = n_hold.min(data.len() - 1);
        let (hold, train) = data.split_at(n_hold);

        let mut init = rng::child(cfg.seed, Stream::Init, 1 + a as u32);
        let mut net = MlpNet::init(&[1, hidden, 1], &mut init)?;
        let mut opt = Optimizer::new(cfg.model_optimizer, net.params().len());
        let mut batch_rng = rng::child(cfg.seed, Stream::Minibatch, 1 + a as u32);
        let mut ws = Workspace::default();
        let mut grad = vec![0.0; net.params().len()];
        let batch = cfg.model_batch_size.min(train.len());
        let scale = 1.0 / batch as f64;
        for update in 0..cfg.model_updates {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for _ in 0..batch {
                let (x, y) = train[batch_rng.gen_range(0..train.len())];
                let err = net.forward_ws(x, &mut ws)[0] - y;
                loss += 0.5 * err * err * scale;
                net.backward_ws(&[err * scale], &mut grad, &mut ws);
            }
            if !loss.is_finite() {
                return Err(LearnError::Diverged { update, loss });
            }
            opt.step(net.params_mut(), &grad)?;
        }
        let eval_on = if hold.is_empty() { train } else { hold };
        let mse = eval_on
            .iter()
            .map(|&(x, y)| {
                let p = net.forward_ws(x, &mut ws)[0].clamp(0.0, 1.0);
                (p - y) * (p - y)
            })
            .sum::<f64>()
            / eval_on.len() as f64;
        report.rmse.push(mse.sqrt());
        report.train_sizes.push(train.len());
        report.holdout_sizes.push(hold.len());
        nets.push(net);
    }
    Ok((nets, report))
}

/// Learned dynamics model for `mdp` (rewards stay known).
pub fn fit_dynamics(
    buffer: &ReplayBuffer,
    mdp: &Mdp,
    hidden: usize,
    cfg: &TrainConfig,
) -> Result<(DynModel, FitReport), LearnError> {
    let (nets, report) = fit_dynamics_nets(buffer, mdp.action_count(), hidden, cfg)?;
    Ok((DynModel::learned(nets, mdp)?, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFitResult {
    /// Mean discounted return of the fitted net's greedy policy over that of
    /// the closed-form optimal policy, on shared start states.
    pub return_ratio: f64,
    pub policy_pieces: usize,
    pub q_pieces: Vec<usize>,
    pub train_mse: f64,
}

/// Series terms used for oracle labels: as many as the bit budget allows.
pub fn oracle_terms(h: u32) -> u32 {
    (fractal::MAX_BIT - 1 - h).min(4 * h)
}

/// Fits a one-hidden-layer net to the exact optimal Q of the fractal family at
/// `n` uniform states (squared error plus `l1 * |params|_1`), then measures its
/// greedy policy exactly.
pub fn oracle_fit_experiment(
    h: u32,
    n: usize,
    width: usize,
    cfg: &TrainConfig,
    eval_states: usize,
) -> Result<OracleFitResult, LearnError> {
    cfg.validate()?;
    if h > 20 {
        return Err(LearnError::Config(format!("H = {h} above 20")));
    }
    let mdp = make_fractal_mdp(h).map_err(|e| LearnError::Config(e.to_string()))?;
    let terms = oracle_terms(h);
    let states = fractal::sample_bit_states(cfg.seed, n);
    let labels: Vec<[f64; 2]> = states
        .iter()
        .map(|&s| {
            let q = |a| fractal::closed_form_q_star(Family::Fractal, h, s, a, terms);
            Ok([q(0)?, q(1)?])
        })
        .collect::<Result<_, crate::error::DpError>>()?;

    let mut net = if n == 0 {
        MlpNet::zeros(&[1, width, 2])?
    } else {
        MlpNet::init(&[1, width, 2], &mut rng::child(cfg.seed, Stream::Init, 0))?
    };
    let mut train_mse = 0.0;
    if n > 0 {
        let mut opt = Optimizer::new(cfg.model_optimizer, net.params().len());
        let mut ws = Workspace::default();
        let mut grad = vec![0.0; net.params().len()];
        let scale = 1.0 / n as f64;
        for update in 0..cfg.fit_updates {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for (&s, y) in states.iter().zip(&labels) {
                let out = net.forward_ws(s, &mut ws);
                let d = [(out[0] - y[0]) * scale, (out[1] - y[1]) * scale];
                loss += 0.5 * ((out[0] - y[0]).powi(2) + (out[1] - y[1]).powi(2)) * scale;
                net.backward_ws(&d, &mut grad, &mut ws);
            }
            if !loss.is_finite() {
                return Err(LearnError::Diverged { update, loss });
            }
            for (g, p) in grad.iter_mut().zip(net.params()) {
                *g += cfg.l1 * p.signum() * f64::from(u8::from(*p != 0.0));
            }
            opt.step(net.params_mut(), &grad)?;
            train_mse = 2.0 * loss / 2.0;
        }
    }

    let q = net.to_pwl()?;
    let (policy, _) = argmax_select(&q)?;
    let starts = fractal::sample_bit_states(cfg.seed ^ 0x5eed, eval_states);
    let steps = mdp.horizon().steps();
    let g = mdp.gamma_eff();
    let mut fitted = 0.0;
    let mut optimal = 0.0;
    for &s0 in &starts {
        fitted += rollout_return(&mdp, |s, _| policy.action_at(s), s0, steps, g);
        optimal += rollout_return(
            &mdp,
            |s, _| fractal::closed_form_pi_star(h, s),
            s0,
            steps,
            g,
        );
    }
    Ok(OracleFitResult {
        return_ratio: fitted / optimal,
        policy_pieces: policy.piece_count(),
        q_pieces: q.iter().map(|f| f.piece_count()).collect(),
        train_mse,
    })
}
