use std::collections::BTreeMap;

use super::*;
use crate::coords::{JetCoord, Space};

fn p(s: &str) -> Expr {
    parse_expr(s, &ParseContext::permissive()).unwrap()
}

fn canon_eq(a: &str, b: &str) {
    let (x, y) = (p(a), p(b));
    assert_eq!(equal(&x, &y).unwrap(), Verdict::EqualCanonical, "{a}  vs  {b}: {x}  /  {y}");
}

#[test]
fn parses_coordinates() {
    let e = p("x*u_x");
    let f = Expr::x().mul(&Expr::ux(0, 1));
    assert_eq!(e, f);
    assert_eq!(p("u_{(3)}"), Expr::ux(0, 3));
    assert_eq!(p("u_xxx"), Expr::ux(0, 3));
    assert_eq!(p("d(u, x, 3)"), Expr::ux(0, 3));
}

#[test]
fn unknown_identifier_is_reported() {
    let ctx = ParseContext::new(Space::scalar());
    assert!(matches!(parse_expr("x + q", &ctx), Err(ParseError::UnknownIdentifier { .. })));
    assert!(matches!(parse_expr("x + (", &ctx), Err(ParseError::Syntax { .. })));
}

#[test]
fn decimals_are_exact() {
    assert_eq!(p("0.25").as_rational(), Some(qfrac(1, 4)));
    assert_eq!(p("1e-3").as_rational(), Some(qfrac(1, 1000)));
}

#[test]
fn sums_normalize() {
    canon_eq("u^2 + 2*b*u + b^2", "(u + b)^2");
    canon_eq("(u^2 - 1)/(u - 1)", "u + 1");
    canon_eq("1/(1 - d*u) - 1", "d*u/(1 - d*u)");
    canon_eq("x/(x*y + x)", "1/(y + 1)");
    assert!(p("u - u").is_zero());
    assert!(p("(a + b)*(a - b) - a^2 + b^2").is_zero());
}

#[test]
fn exp_parts_merge() {
    canon_eq("exp(a + b)", "exp(a)*exp(b)");
    canon_eq("exp(-c)*exp(c)", "1");
    canon_eq("log(exp(a*x))", "a*x");
    canon_eq("(exp(a) - 1)^2", "exp(2*a) - 2*exp(a) + 1");
}

#[test]
fn diff_examples() {
    let u = JetCoord::u(0);
    assert_eq!(p("x*u_x").diff(&JetCoord::ux(0, 1)), Expr::x());
    assert_eq!(p("u*u_x").diff(&u), Expr::ux(0, 1));
    let d = p("u/(1 - d*u)").diff(&u);
    assert_eq!(equal(&d, &p("1/(1 - d*u)^2")).unwrap(), Verdict::EqualCanonical);
    canon_eq("sin(u^2)", "sin(u^2)");
    let e = p("sin(u^2)").diff(&u);
    assert_eq!(equal(&e, &p("2*u*cos(u^2)")).unwrap(), Verdict::EqualCanonical);
    let s = p("sqrt(1 + u^2)").diff(&u);
    assert_eq!(equal(&s, &p("u/sqrt(1 + u^2)")).unwrap(), Verdict::EqualCanonical);
    let f = p("f(x - a*u)").diff(&u);
    assert_eq!(equal(&f, &p("-a*f'(x - a*u)")).unwrap(), Verdict::EqualCanonical);
}

#[test]
fn diff_matches_quotient_rule_numerically() {
    // Quotient-rule expansion evaluated independently at rational points.
    let u = JetCoord::u(0);
    let d = p("u/(1 - d*u)").diff(&u);
    for (uv, dv) in [(0.3f64, 0.7f64), (-0.4, 1.1), (0.9, -0.2), (0.12, 0.5)] {
        let at: BTreeMap<_, _> = [(u.clone(), uv), (JetCoord::param("d"), dv)].into_iter().collect();
        let expect = ((1.0 - dv * uv) + dv * uv) / (1.0 - dv * uv).powi(2);
        assert!((d.eval_f64(&at).unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn substitution_examples() {
    let u = JetCoord::u(0);
    canon_eq("u^2 + 2*b*u + b^2", "(u + b)^2");
    let e = p("u^2").subs_one(&u, &p("u + b"));
    assert_eq!(equal(&e, &p("u^2 + 2*b*u + b^2")).unwrap(), Verdict::EqualCanonical);
    let ux = JetCoord::ux(0, 1);
    let e = Expr::ux(0, 1).subs_one(&ux, &p("u_x/(1 - a*u_x)"));
    assert_eq!(e, p("u_x/(1 - a*u_x)"));
    let e = p("x - a").subs_one(&JetCoord::param("a"), &Expr::zero());
    assert_eq!(e, Expr::x());
}

#[test]
fn simultaneous_substitution() {
    let mut m = BTreeMap::new();
    m.insert(JetCoord::param("a"), p("b"));
    m.insert(JetCoord::param("b"), p("a"));
    assert_eq!(p("a - 2*b").subs(&m), p("b - 2*a"));
}

#[test]
fn equality_verdicts() {
    assert!(!equal(&p("u_x"), &p("u")).unwrap().is_equal());
    assert_eq!(equal(&p("sin(u)^2 + cos(u)^2"), &p("1")).unwrap(), Verdict::EqualNumeric);
    assert_eq!(equal(&p("sqrt(u)^2"), &p("u")).unwrap(), Verdict::EqualCanonical);
    assert_eq!(equal(&p("log(u*x)"), &p("log(u) + log(x)")).unwrap(), Verdict::EqualNumeric);
}

#[test]
fn eval_examples() {
    let at: BTreeMap<_, _> = [(JetCoord::x(0), 2.0), (JetCoord::ux(0, 1), 3.0)].into_iter().collect();
    assert_eq!(p("x*u_x").eval_f64(&at).unwrap(), 6.0);
    let at: BTreeMap<_, _> = [(JetCoord::u(0), 1.0), (JetCoord::param("d"), 0.5)].into_iter().collect();
    assert_eq!(p("u/(1 - d*u)").eval_f64(&at).unwrap(), 2.0);
    let at: BTreeMap<_, _> = [(JetCoord::param("a"), 0.0)].into_iter().collect();
    assert_eq!(p("exp(-a)").eval_f64(&at).unwrap(), 1.0);
    assert!(matches!(p("x + u").eval_f64(&at), Err(EvalError::MissingBinding(_))));
    let at: BTreeMap<_, _> = [(JetCoord::u(0), -1.0)].into_iter().collect();
    assert!(matches!(p("log(u)").eval_f64(&at), Err(EvalError::Domain(_))));
}

#[test]
fn eval_generic_f32() {
    let at: BTreeMap<_, _> = [(JetCoord::u(0), 1.0f32), (JetCoord::param("d"), 0.5f32)].into_iter().collect();
    let v: f32 = p("u/(1 - d*u)").eval(&at, &NoFunctions).unwrap();
    assert_eq!(v, 2.0);
}

#[test]
fn compiled_matches_tree() {
    let e = p("exp(-c)*f(x - a)/(1 + d*f(x - a)) - b + sin(u)*u_x^2");
    let slots: Vec<JetCoord> = e.free_coords().into_iter().collect();
    let prog = compile(&e, &slots).unwrap();
    let fns = SmoothRandomFunctions { seed: 3 };
    let vals: Vec<f64> = (0..slots.len()).map(|i| 0.1 + 0.13 * i as f64).collect();
    let at: BTreeMap<_, _> = slots.iter().cloned().zip(vals.iter().copied()).collect();
    let a = prog.eval(&vals, &fns).unwrap();
    let b = e.eval(&at, &fns).unwrap();
    assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
}

#[test]
fn analyze_examples() {
    let a = p("x*u_x").analyze();
    assert_eq!(a.max_order, 1);
    assert_eq!(a.free_coords.len(), 2);
    assert_eq!(p("u*u_xxx").analyze().max_order, 3);
    let c = p("5").analyze();
    assert!(c.free_coords.is_empty());
    assert_eq!(c.max_order, 0);
}

#[test]
fn display_round_trips() {
    let ctx = ParseContext::permissive();
    for s in [
        "u/(1 - d*u)",
        "exp(-c)*f(x - a)/(1 + d*f(x - a)) - b",
        "u - b*exp(a)*v/2 - f(exp(-a)*x - b*u + b^2*exp(a)*v/4 - c)",
        "(1/2)*u_{(5)} + sqrt(u^2 + 1)*x",
        "g'(x)*h[1,2](x, a) - (u + 1)^(1/3)",
        "v_x@0*exp(2*a) - 3/7",
    ] {
        let e = p(s);
        let printed = e.to_string();
        let back = parse_expr(&printed, &ctx).unwrap();
        assert_eq!(back, e, "{s} printed as {printed}");
    }
}

#[test]
fn two_component_names() {
    let sp = Space::new(["x"], ["u", "v"]);
    let ctx = ParseContext::new(sp.clone()).with_params(["b"]);
    let e = parse_expr("u*u_x - v/2 + b*v_xx", &ctx).unwrap();
    assert!(e.depends_on(&JetCoord::ux(1, 2)));
    let back = parse_expr(&e.to_string_in(&sp), &ctx).unwrap();
    assert_eq!(back, e);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn leaf() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("x".to_string()),
            Just("u".to_string()),
            Just("u_x".to_string()),
            Just("u_xx".to_string()),
            Just("a".to_string()),
            (-3i32..4).prop_map(|n| format!("({n})")),
        ]
    }

    fn arb_expr() -> impl Strategy<Value = String> {
        leaf().prop_recursive(3, 16, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} + {b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} * {b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a})/(2 + {b}^2)")),
                inner.clone().prop_map(|a| format!("exp({a})")),
                inner.prop_map(|a| format!("sin({a})")),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partials_commute(s in arb_expr()) {
            let e = p(&s);
            let (c1, c2) = (JetCoord::u(0), JetCoord::ux(0, 1));
            let a = e.diff(&c1).diff(&c2);
            let b = e.diff(&c2).diff(&c1);
            prop_assert_eq!(equal(&a, &b).unwrap(), Verdict::EqualCanonical);
        }

        #[test]
        fn canonical_is_idempotent(s in arb_expr()) {
            let e = p(&s);
            let c = e.canonical();
            prop_assert_eq!(c.canonical(), c.clone());
            prop_assert!(e.sub(&c).is_zero());
        }

        #[test]
        fn eval_agrees_with_canonical(s in arb_expr()) {
            let e = p(&s);
            let c = e.canonical();
            let at: BTreeMap<_, _> = [
                (JetCoord::x(0), 0.31), (JetCoord::u(0), -0.47), (JetCoord::ux(0, 1), 0.83),
                (JetCoord::ux(0, 2), 0.19), (JetCoord::param("a"), 0.66),
            ].into_iter().collect();
            if let (Ok(v1), Ok(v2)) = (e.eval_f64(&at), c.eval_f64(&at)) {
                prop_assert!((v1 - v2).abs() <= 1e-12 * v1.abs().max(1.0));
            }
        }

        #[test]
        fn substitutions_compose(s in arb_expr()) {
            let e = p(&s);
            let a = JetCoord::param("a");
            let u = JetCoord::u(0);
            let first = e.subs_one(&u, &p("x + a")).subs_one(&a, &p("2*x"));
            let composed = e.subs_one(&u, &p("3*x")).subs_one(&a, &p("2*x"));
            prop_assert_eq!(equal(&first, &composed).unwrap(), Verdict::EqualCanonical);
        }
    }
}
