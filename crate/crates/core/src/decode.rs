//! Decoder entry points for untrusted JSON, shared by the fuzz targets and the
//! corpus replay test.
//!
//! [`check`] parses `data` as the given type and, when parsing succeeds,
//! asserts that re-encoding and parsing again gives back an equal value. It
//! panics only on a broken invariant, never on malformed input.

use crate::bench::ExperimentConfig;
use crate::dp::QFunction;
use crate::mdp::Mdp;
use crate::nn::MlpNet;
use crate::policy::PiecewisePolicy;
use crate::pwl::{PwlFunction, Tolerances};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    Pwl,
    Mdp,
    QFunction,
    Policy,
    Net,
    ExperimentConfig,
}

impl Decoder {
    pub const ALL: [Decoder; 6] = [
        Decoder::Pwl,
        Decoder::Mdp,
        Decoder::QFunction,
        Decoder::Policy,
        Decoder::Net,
        Decoder::ExperimentConfig,
    ];

    /// Fuzz target and corpus directory name.
    pub fn name(self) -> &'static str {
        match self {
            Decoder::Pwl => "pwl_json",
            Decoder::Mdp => "mdp_json",
            Decoder::QFunction => "qfunction_json",
            Decoder::Policy => "policy_json",
            Decoder::Net => "net_json",
            Decoder::ExperimentConfig => "experiment_config",
        }
    }
}

fn roundtrip<T>(v: &T) -> T
where
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug,
{
    let text = serde_json::to_string(v).expect("decoded value re-encodes");
    let back: T = serde_json::from_str(&text).expect("re-encoded value decodes");
    assert_eq!(&back, v, "roundtrip changed the value");
    back
}

/// Returns whether `data` decoded.
pub fn check(decoder: Decoder, data: &[u8]) -> bool {
    let Ok(text) = std::str::from_utf8(data) else {
        return false;
    };
    match decoder {
        Decoder::Pwl => {
            let Ok(f) = serde_json::from_str::<PwlFunction>(text) else {
                return false;
            };
            roundtrip(&f);
            for s in [0.0, 0.25, 0.5, 1.0] {
                assert!(f.eval(s).is_ok());
            }
            let g = f.simplify(Tolerances::CANONICAL);
            assert!(g.piece_count() <= f.piece_count());
            assert_eq!(g.breakpoints()[0], 0.0);
            assert_eq!(*g.breakpoints().last().expect("non-empty"), 1.0);
        }
        Decoder::Mdp => {
            let Ok(m) = serde_json::from_str::<Mdp>(text) else {
                return false;
            };
            roundtrip(&m);
            for a in 0..m.action_count() {
                let next = m.next_state(0.5, a);
                assert!(
                    (0.0..=1.0).contains(&next),
                    "next state {next} out of range"
                );
            }
        }
        Decoder::QFunction => {
            let Ok(q) = serde_json::from_str::<QFunction>(text) else {
                return false;
            };
            roundtrip(&q);
            if q.action_count() > 0 {
                let _ = q.greedy();
            }
        }
        Decoder::Policy => {
            let Ok(p) = serde_json::from_str::<PiecewisePolicy>(text) else {
                return false;
            };
            roundtrip(&p);
            assert!(p.action_at(0.5) <= p.max_action());
        }
        Decoder::Net => {
            let Ok(n) = serde_json::from_str::<MlpNet>(text) else {
                return false;
            };
            roundtrip(&n);
            if n.params().len() <= 1 << 16 {
                assert_eq!(n.forward(0.5).len(), n.output_count());
            }
        }
        Decoder::ExperimentConfig => {
            let Ok(c) = ExperimentConfig::from_json(text) else {
                return false;
            };
            let back = roundtrip(&c);
            assert_eq!(back.hash(), c.hash());
        }
    }
    true
}
