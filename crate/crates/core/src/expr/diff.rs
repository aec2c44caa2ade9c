use super::{Expr, Func, Var};

pub(super) fn differentiate(e: &Expr, var: Var) -> Expr {
    match e {
        Expr::Const(_) => Expr::Const(0.0),
        Expr::Var(v) => Expr::Const(if *v == var { 1.0 } else { 0.0 }),
        Expr::Neg(a) => Expr::neg(differentiate(a, var)),
        Expr::Add(l, r) => Expr::add(differentiate(l, var), differentiate(r, var)),
        Expr::Sub(l, r) => Expr::sub(differentiate(l, var), differentiate(r, var)),
        Expr::Mul(l, r) => Expr::add(
            Expr::mul(differentiate(l, var), (**r).clone()),
            Expr::mul((**l).clone(), differentiate(r, var)),
        ),
        Expr::Div(l, r) => {
            let dl = differentiate(l, var);
            let dr = differentiate(r, var);
            if dr.is_zero() {
                return Expr::div(dl, (**r).clone());
            }
            Expr::div(
                Expr::sub(
                    Expr::mul(dl, (**r).clone()),
                    Expr::mul((**l).clone(), dr),
                ),
                Expr::pow((**r).clone(), 2),
            )
        }
        Expr::Pow(base, n) => Expr::mul(
            Expr::mul(Expr::Const(*n as f64), Expr::pow((**base).clone(), n - 1)),
            differentiate(base, var),
        ),
        Expr::Call(func, a) => {
            let inner = differentiate(a, var);
            if inner.is_zero() {
                return Expr::Const(0.0);
            }
            let arg = (**a).clone();
            let outer = match func {
                Func::Sin => Expr::call(Func::Cos, arg),
                Func::Cos => Expr::neg(Expr::call(Func::Sin, arg)),
                Func::Exp => Expr::call(Func::Exp, arg),
                Func::Tanh => Expr::sub(Expr::Const(1.0), Expr::pow(Expr::call(Func::Tanh, arg), 2)),
            };
            Expr::mul(outer, inner)
        }
    }
}

/// Entry `(i, j)` is the derivative of `exprs[i]` with respect to `vars[j]`.
pub fn jacobian(exprs: &[Expr], vars: &[Var]) -> Vec<Vec<Expr>> {
    exprs
        .iter()
        .map(|e| vars.iter().map(|v| e.differentiate(*v)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse, Bindings};

    fn d(text: &str, var: Var) -> Expr {
        parse(text).unwrap().differentiate(var)
    }

    #[test]
    fn power_rule() {
        assert_eq!(d("x1^2", Var::X(0)).to_string(), "2*x1");
    }

    #[test]
    fn counterexample_state_derivative() {
        let de = d("-x1 + x1^2*u1", Var::X(0));
        assert_eq!(de.to_string(), "-1 + 2*x1*u1");
        let b = Bindings::new(&[1.0], &[1.0], 0.0);
        assert_eq!(de.eval(&b).unwrap(), 1.0);
    }

    #[test]
    fn independent_variable_gives_zero() {
        assert_eq!(d("x1^2", Var::U(0)), Expr::Const(0.0));
        assert_eq!(d("x1^2", Var::U(0)).to_string(), "0");
    }

    #[test]
    fn jacobians() {
        let x = [Var::X(0), Var::X(1)];
        let j = jacobian(&[parse("-x1").unwrap()], &x[..1]);
        assert_eq!(j, vec![vec![Expr::Const(-1.0)]]);

        let j = jacobian(&[parse("x2").unwrap(), parse("0").unwrap()], &x);
        let consts: Vec<Vec<f64>> = j
            .iter()
            .map(|row| row.iter().map(|e| e.eval(&Bindings::state(&[], 0.0)).unwrap()).collect())
            .collect();
        assert_eq!(consts, vec![vec![0.0, 1.0], vec![0.0, 0.0]]);

        let j = jacobian(&[parse("x1^2").unwrap()], &x[..1]);
        assert_eq!(j[0][0].eval(&Bindings::state(&[3.0], 0.0)).unwrap(), 6.0);
    }

    #[test]
    fn chain_rules_match_finite_differences() {
        let cases = [
            "sin(x1*x2)",
            "cos(x1)^3",
            "exp(-x1^2)",
            "tanh(2*x1 - x2)",
            "x1/(1 + x2^2)",
            "x2^-2",
            "(x1 + t)*sin(t)",
        ];
        let x = [0.3, -0.7];
        let h = 1e-5;
        for text in cases {
            let e = parse(text).unwrap();
            for k in 0..2 {
                let sym = e.differentiate(Var::X(k)).eval(&Bindings::new(&x, &[], 0.4)).unwrap();
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fd = (e.eval(&Bindings::new(&xp, &[], 0.4)).unwrap()
                    - e.eval(&Bindings::new(&xm, &[], 0.4)).unwrap())
                    / (2.0 * h);
                assert!((sym - fd).abs() / (1.0 + sym.abs()) < 1e-8, "{text} d/dx{k}");
            }
        }
    }
}
