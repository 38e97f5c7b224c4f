//! Exact piecewise-linear MDP laboratory.
//!
//! The crate builds one-dimensional deterministic MDPs whose dynamics have a
//! handful of linear pieces, solves them exactly with value iteration over
//! piecewise-linear Q-functions, and measures how many pieces the optimal
//! Q-function and policy need. Alongside the exact solver it provides the
//! closed-form optimum of the fractal family, a k-step bootstrapped planner
//! (BOOTS) that acts well with Q-functions far too small to represent the
//! optimum, tiny from-scratch ReLU networks with DQN and model fitting, and an
//! experiment harness that writes JSON/CSV artifacts.
//!
//! Module map:
//!
//! - [`pwl`]: piecewise-linear function algebra (compose, max, affine, simplify).
//! - [`mdp`]: MDP model, constructed families and random generators.
//! - [`dp`], [`oracle`], [`fractal`]: exact DP, brute-force grid oracle and
//!   closed-form checks.
//! - [`planner`]: BOOTS, random shooting, compact Q construction, rollouts.
//! - [`nn`], [`learner`]: networks, optimizers, DQN, dynamics fitting.
//! - [`bench`]: experiment configs, runners and artifact output.
//! - [`decode`]: checked JSON decoders behind the fuzz targets.

pub mod bench;
pub mod decode;
pub mod dp;
pub mod error;
pub mod fractal;
pub mod learner;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod planner;
pub mod policy;
pub mod pwl;
pub mod rng;

pub use dp::{
    bellman_backup, evaluate_policy_exact, value_iteration, value_iteration_with, DpConfig,
    DpSolution, DpTrace, PolicySchedule, QFunction,
};
pub use error::{BenchError, DpError, LearnError, MdpError, PlanError, PwlError};
pub use mdp::{
    gen_rand, gen_semirand, make_fractal_mdp, make_lipschitz_mdp, semirand_reference, HorizonSpec,
    Mdp,
};
pub use policy::PiecewisePolicy;
pub use pwl::{argmax_select, PwlFunction, Tolerances};
