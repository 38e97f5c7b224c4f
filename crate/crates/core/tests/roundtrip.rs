use boots_core::bench::{ExperimentConfig, ResultRecord};
use boots_core::learner::{dqn_train, TrainConfig};
use boots_core::nn::MlpNet;
use boots_core::rng::{child, Stream};
use boots_core::{
    gen_rand, make_lipschitz_mdp, semirand_reference, value_iteration, Mdp, QFunction,
};

fn roundtrip<T: serde::Serialize + serde::de::DeserializeOwned>(v: &T) -> T {
    serde_json::from_str(&serde_json::to_string(v).unwrap()).unwrap()
}

#[test]
fn mdp_and_q_roundtrip() {
    for m in [
        semirand_reference(),
        gen_rand(8),
        make_lipschitz_mdp(5).unwrap(),
    ] {
        assert_eq!(roundtrip(&m), m);
    }
    let sol = value_iteration(&semirand_reference()).unwrap();
    assert_eq!(roundtrip::<QFunction>(&sol.q), sol.q);
    assert_eq!(roundtrip(&sol.policy), sol.policy);
}

#[test]
fn net_roundtrip_and_validation() {
    let net = MlpNet::init(&[1, 7, 3], &mut child(2, Stream::Init, 0)).unwrap();
    assert_eq!(roundtrip(&net), net);
    assert!(serde_json::from_str::<MlpNet>(r#"{"widths":[1,2,1],"params":[0.0]}"#).is_err());
    assert!(serde_json::from_str::<MlpNet>(r#"{"widths":[2,1],"params":[0,0,0]}"#).is_err());
}

#[test]
fn mdp_json_rejects_bad_shapes() {
    let bad = [
        r#"{"actions":2,"dynamics":[],"reward":[],"horizon":{"kind":"finite","steps":3},"label":""}"#,
        r#"{"actions":1,"dynamics":[{"breakpoints":[0,1],"slopes":[2],"intercepts":[0]}],
            "reward":[{"breakpoints":[0,1],"slopes":[0],"intercepts":[0]}],
            "horizon":{"kind":"finite","steps":3},"label":""}"#,
        r#"{"actions":1,"dynamics":[{"breakpoints":[0,1],"slopes":[1],"intercepts":[0]}],
            "reward":[{"breakpoints":[0,1],"slopes":[0],"intercepts":[0]}],
            "horizon":{"kind":"discounted","gamma":1.5,"truncation":3},"label":""}"#,
    ];
    for text in bad {
        assert!(serde_json::from_str::<Mdp>(text).is_err(), "{text}");
    }
}

#[test]
fn experiment_config_roundtrip() {
    let text = r#"{"experiment":{"kind":"boots_sweep","mdp":{"kind":"reference"},"ks":[0,1,3],
        "train":{"episodes":300},"planner":{"mode":"shooting","n_candidates":32}},"seeds":[1,2]}"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    assert_eq!(roundtrip(&cfg), cfg);
    assert_eq!(roundtrip(&cfg).hash(), cfg.hash());
}

#[test]
fn dqn_is_deterministic() {
    let mdp = semirand_reference();
    let cfg = TrainConfig {
        episodes: 60,
        eval_period: 20,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = dqn_train(&mdp, 8, &cfg).unwrap();
    let b = dqn_train(&mdp, 8, &cfg).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.curve, b.curve);
    let c = dqn_train(&mdp, 8, &TrainConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(a.net, c.net);
}

#[test]
fn result_record_roundtrip() {
    let out = boots_core::bench::run_histogram(boots_core::bench::GenMethod::Rand, 4, &[1]);
    let back: ResultRecord = roundtrip(&out.record);
    assert_eq!(back, out.record);
}
