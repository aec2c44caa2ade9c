use ccm_core::expr::{parse, Bindings, Expr, Func, Var};
use ccm_core::model::SystemSpec;
use ccm_core::simulator::integrate;
use proptest::prelude::*;

fn b(e: Expr) -> Box<Expr> {
    Box::new(e)
}

/// `1 + e^2`, bounded away from zero so quotients and negative powers stay tame.
fn positive(e: Expr) -> Expr {
    Expr::Add(b(Expr::Const(1.0)), b(Expr::Pow(b(e), 2)))
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-300i32..300).prop_map(|c| Expr::Const(c as f64 / 100.0)),
        (0usize..2).prop_map(|i| Expr::Var(Var::X(i))),
        Just(Expr::Var(Var::T)),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Add(b(l), b(r))),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Sub(b(l), b(r))),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Mul(b(l), b(r))),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Expr::Div(b(l), b(positive(r)))),
            inner.clone().prop_map(|e| Expr::Neg(b(e))),
            (inner.clone(), 0i32..4).prop_map(|(e, k)| Expr::Pow(b(e), k)),
            (inner.clone(), 1i32..3).prop_map(|(e, k)| Expr::Pow(b(positive(e)), -k)),
            (inner, prop::sample::select(vec![Func::Sin, Func::Cos, Func::Exp, Func::Tanh]))
                .prop_map(|(e, f)| Expr::Call(f, b(e))),
        ]
    })
}

fn central_difference(e: &Expr, x: [f64; 2], t: f64, var: Var) -> Option<f64> {
    let h = 1e-5;
    let at = |dx: f64| {
        let mut x = x;
        let mut t = t;
        match var {
            Var::X(i) => x[i] += dx,
            Var::T => t += dx,
            Var::U(_) => unreachable!(),
        }
        e.eval(&Bindings::new(&x, &[], t)).ok()
    };
    // fourth-order stencil
    Some((8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn symbolic_matches_finite_difference(
        e in arb_expr(),
        x1 in -1.5f64..1.5,
        x2 in -1.5f64..1.5,
        t in 0.0f64..2.0,
        which in 0usize..3,
    ) {
        let var = [Var::X(0), Var::X(1), Var::T][which];
        let x = [x1, x2];
        let value = e.eval(&Bindings::new(&x, &[], t));
        prop_assume!(value.is_ok_and(|v| v.abs() < 1e4));
        let sym = e.differentiate(var).eval(&Bindings::new(&x, &[], t)).unwrap();
        prop_assume!(sym.abs() < 1e4);
        let fd = central_difference(&e, x, t, var).unwrap();
        prop_assert!((sym - fd).abs() <= 1e-6 * (1.0 + sym.abs()), "{e} d/{var}: {sym} vs {fd}");
    }

    #[test]
    fn printed_form_parses_back(e in arb_expr(), x1 in -1.5f64..1.5, x2 in -1.5f64..1.5) {
        let text = e.to_string();
        let back = parse(&text).unwrap();
        prop_assert_eq!(back.to_string(), text.clone());
        let x = [x1, x2];
        let bind = Bindings::new(&x, &[], 0.3);
        if let Ok(v) = e.eval(&bind) {
            let w = back.eval(&bind).unwrap();
            prop_assert!((v - w).abs() <= 1e-12 * (1.0 + v.abs()), "{text}: {v} vs {w}");
        }
    }
}

fn final_error(h: f64) -> f64 {
    let sys = SystemSpec::new(1, 1, vec![parse("-x1").unwrap()], vec![vec![parse("0").unwrap()]]).unwrap();
    let traj = integrate(&sys, |_, _| vec![0.0], &[1.0], 0.0, 1.0, h).unwrap();
    (traj.final_state().unwrap()[0] - (-1.0f64).exp()).abs()
}

#[test]
fn rk4_is_fourth_order() {
    let factor = final_error(0.1) / final_error(0.05);
    assert!((12.0..=20.0).contains(&factor), "{factor}");
}

#[test]
fn open_loop_origin_is_invariant() {
    let sys = SystemSpec::new(1, 1, vec![parse("-x1").unwrap()], vec![vec![parse("x1^2").unwrap()]]).unwrap();
    for amp in [0.5, 3.0, 20.0] {
        let traj = integrate(&sys, move |t, _| vec![amp * (3.0 * t).sin()], &[0.0], 0.0, 10.0, 1e-2).unwrap();
        assert!(traj.states.iter().all(|x| x[0].abs() <= 1e-9));
    }
}
