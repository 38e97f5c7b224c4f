use boots_core::pwl::Line;
use boots_core::{argmax_select, PiecewisePolicy, PwlFunction, Tolerances};
use proptest::prelude::*;

/// Random PWL with up to `max_pieces` pieces, endpoint values in `[lo, hi]`,
/// possibly discontinuous.
fn arb_pwl(max_pieces: usize, lo: f64, hi: f64) -> impl Strategy<Value = PwlFunction> {
    (1..=max_pieces)
        .prop_flat_map(move |n| {
            (
                prop::collection::vec(1e-3f64..1.0, n),
                prop::collection::vec((lo..=hi, lo..=hi), n),
                any::<bool>(),
            )
        })
        .prop_map(|(widths, ends, continuous)| {
            let total: f64 = widths.iter().sum();
            let mut bps = vec![0.0];
            let mut acc = 0.0;
            for w in &widths[..widths.len() - 1] {
                acc += w / total;
                bps.push(acc);
            }
            bps.push(1.0);
            let mut lines = Vec::new();
            let mut prev_end = None;
            for (i, &(a, b)) in ends.iter().enumerate() {
                let a = if continuous { prev_end.unwrap_or(a) } else { a };
                let (x0, x1) = (bps[i], bps[i + 1]);
                let m = (b - a) / (x1 - x0);
                lines.push(Line::new(m, a - m * x0));
                prev_end = Some(b);
            }
            PwlFunction::from_lines(bps, &lines).unwrap()
        })
}

fn points() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 64)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Local evaluator, independent of the crate's binary search.
fn eval(f: &PwlFunction, s: f64) -> f64 {
    let bps = f.breakpoints();
    let mut i = 0;
    while i + 1 < f.piece_count() && s >= bps[i + 1] {
        i += 1;
    }
    f.slopes()[i] * s + f.intercepts()[i]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn compose_matches_pointwise(f in arb_pwl(8, -3.0, 3.0), g in arb_pwl(8, 0.0, 1.0), xs in points()) {
        let h = f.compose(&g).unwrap();
        for s in xs {
            let y = eval(&g, s).clamp(0.0, 1.0);
            prop_assert!(close(eval(&h, s), eval(&f, y)), "s={s}");
        }
    }

    #[test]
    fn compose_is_associative(
        f in arb_pwl(5, -2.0, 2.0),
        g in arb_pwl(5, 0.0, 1.0),
        h in arb_pwl(5, 0.0, 1.0),
        xs in points(),
    ) {
        let left = f.compose(&g).unwrap().compose(&h).unwrap();
        let right = f.compose(&g.compose(&h).unwrap()).unwrap();
        for s in xs {
            prop_assert!(close(left.value(s), right.value(s)), "s={s}");
        }
    }

    #[test]
    fn max_matches_pointwise_and_commutes(f in arb_pwl(10, -2.0, 2.0), g in arb_pwl(10, -2.0, 2.0), xs in points()) {
        let m = f.pointwise_max(&g);
        let n = g.pointwise_max(&f);
        for s in xs {
            let want = eval(&f, s).max(eval(&g, s));
            prop_assert!(close(eval(&m, s), want));
            prop_assert!(close(eval(&n, s), want));
        }
    }

    #[test]
    fn affine_matches_pointwise(
        f in arb_pwl(10, -2.0, 2.0),
        g in arb_pwl(10, -2.0, 2.0),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
        xs in points(),
    ) {
        let h = f.affine_combine(&g, alpha, beta);
        for s in xs {
            prop_assert!(close(eval(&h, s), alpha * eval(&f, s) + beta * eval(&g, s)));
        }
    }

    #[test]
    fn integrate_is_linear(f in arb_pwl(10, -2.0, 2.0), g in arb_pwl(10, -2.0, 2.0), alpha in -3.0f64..3.0) {
        let lhs = f.affine_combine(&g, alpha, 1.0).integrate();
        let rhs = alpha * f.integrate() + g.integrate();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn integrate_matches_riemann_sum(f in arb_pwl(6, -2.0, 2.0)) {
        let n = 200_000;
        let riemann = (0..n).map(|i| eval(&f, (i as f64 + 0.5) / n as f64)).sum::<f64>() / n as f64;
        // Midpoint rule is exact on linear pieces; only cells straddling a breakpoint err.
        prop_assert!((f.integrate() - riemann).abs() <= 20.0 * 6.0 / n as f64);
    }

    #[test]
    fn simplify_is_idempotent_and_faithful(f in arb_pwl(12, -2.0, 2.0), xs in points()) {
        let tol = Tolerances::CANONICAL;
        let once = f.simplify(tol);
        prop_assert_eq!(once.simplify(tol), once.clone());
        prop_assert!(once.piece_count() <= f.piece_count());
        for s in xs {
            prop_assert!((once.value(s) - f.value(s)).abs() <= 1e-8);
        }
    }

    #[test]
    fn redundant_breakpoints_are_removed(a in -2.0f64..2.0, b in -2.0f64..2.0, cut in 0.01f64..0.99) {
        let f = PwlFunction::from_lines(vec![0.0, cut, 1.0], &[Line::new(a, b), Line::new(a, b)]).unwrap();
        prop_assert_eq!(f.simplify(Tolerances::CANONICAL).piece_count(), 1);
    }

    #[test]
    fn argmax_selects_a_maximiser(qs in prop::collection::vec(arb_pwl(6, -2.0, 2.0), 1..5), xs in points()) {
        let (policy, v) = argmax_select(&qs).unwrap();
        for s in xs {
            let best = qs.iter().map(|q| eval(q, s)).fold(f64::NEG_INFINITY, f64::max);
            let a = policy.action_at(s);
            prop_assert!(close(eval(&qs[a], s), best), "s={s} a={a}");
            prop_assert!(close(v.value(s), best));
        }
    }

    #[test]
    fn pwl_json_roundtrip(f in arb_pwl(12, -5.0, 5.0)) {
        let text = serde_json::to_string(&f).unwrap();
        let back: PwlFunction = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn policy_json_roundtrip(qs in prop::collection::vec(arb_pwl(6, -2.0, 2.0), 1..4)) {
        let (policy, _) = argmax_select(&qs).unwrap();
        let text = serde_json::to_string(&policy).unwrap();
        let back: PiecewisePolicy = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, policy);
    }

    #[test]
    fn eval_rejects_out_of_domain(f in arb_pwl(4, -1.0, 1.0), s in 1.0f64..10.0) {
        prop_assert!(f.eval(-s).is_err());
        prop_assert!(f.eval(1.0 + s).is_err());
        prop_assert!(f.eval(1.0).is_ok());
    }
}

#[test]
fn invalid_json_is_rejected() {
    for bad in [
        r#"{"breakpoints":[0,0.5,0.5,1],"slopes":[1,1,1],"intercepts":[0,0,0]}"#,
        r#"{"breakpoints":[0.1,1],"slopes":[1],"intercepts":[0]}"#,
        r#"{"breakpoints":[0,1],"slopes":[1,2],"intercepts":[0]}"#,
        r#"{"breakpoints":[0,1],"slopes":[],"intercepts":[]}"#,
    ] {
        assert!(serde_json::from_str::<PwlFunction>(bad).is_err(), "{bad}");
    }
}
