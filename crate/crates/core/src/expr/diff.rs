//! Symbolic differentiation by the chain rule.

use super::{bin, neg, BinOp, Builtin, Expr};

/// A symbolic derivative. `piecewise` is set when the rule passed through
/// `abs`, `min` or `max` with an argument depending on the variable; the
/// expression is then valid only away from the kinks (it divides by the
/// kink distance, so evaluating at a kink reports division by zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Derivative {
    pub expr: Expr,
    pub piecewise: bool,
}

/// d`e`/d`var`, where `var` is a variable name.
///
/// Delayed references and the time symbol are independent of `var`.
pub fn differentiate(e: &Expr, var: &str) -> Derivative {
    let mut piecewise = false;
    let expr = d(e, var, &mut piecewise);
    Derivative { expr, piecewise }
}

fn num(v: f64) -> Expr {
    Expr::Num(v)
}

fn add(a: Expr, b: Expr) -> Expr {
    bin(BinOp::Add, a, b)
}

fn sub(a: Expr, b: Expr) -> Expr {
    bin(BinOp::Sub, a, b)
}

fn mul(a: Expr, b: Expr) -> Expr {
    bin(BinOp::Mul, a, b)
}

fn div(a: Expr, b: Expr) -> Expr {
    bin(BinOp::Div, a, b)
}

fn pow(a: Expr, b: Expr) -> Expr {
    bin(BinOp::Pow, a, b)
}

fn call(f: Builtin, a: Expr) -> Expr {
    Expr::Call(f, vec![a])
}

fn d(e: &Expr, var: &str, piecewise: &mut bool) -> Expr {
    if !e.depends_on(var) {
        return num(0.0);
    }
    match e {
        Expr::Num(_) | Expr::Time | Expr::Delayed { .. } => num(0.0),
        Expr::Var(v) => num(if v.name == var { 1.0 } else { 0.0 }),
        Expr::Neg(a) => neg(d(a, var, piecewise)),
        Expr::Bin(op, a, b) => {
            let (a, b) = (a.as_ref(), b.as_ref());
            match op {
                BinOp::Add => add(d(a, var, piecewise), d(b, var, piecewise)),
                BinOp::Sub => sub(d(a, var, piecewise), d(b, var, piecewise)),
                BinOp::Mul => add(
                    mul(d(a, var, piecewise), b.clone()),
                    mul(a.clone(), d(b, var, piecewise)),
                ),
                BinOp::Div => {
                    let da = d(a, var, piecewise);
                    if !b.depends_on(var) {
                        return div(da, b.clone());
                    }
                    let db = d(b, var, piecewise);
                    div(
                        sub(mul(da, b.clone()), mul(a.clone(), db)),
                        pow(b.clone(), num(2.0)),
                    )
                }
                BinOp::Pow => {
                    let da = d(a, var, piecewise);
                    if !b.depends_on(var) {
                        // n * a^(n-1) * a'
                        let n1 = sub(b.clone(), num(1.0));
                        return mul(mul(b.clone(), pow(a.clone(), n1)), da);
                    }
                    // a^b * (b' ln a + b a'/a)
                    let db = d(b, var, piecewise);
                    mul(
                        e.clone(),
                        add(
                            mul(db, call(Builtin::Ln, a.clone())),
                            div(mul(b.clone(), da), a.clone()),
                        ),
                    )
                }
            }
        }
        Expr::Call(f, args) => {
            let a = &args[0];
            match f {
                Builtin::Sin => mul(call(Builtin::Cos, a.clone()), d(a, var, piecewise)),
                Builtin::Cos => neg(mul(call(Builtin::Sin, a.clone()), d(a, var, piecewise))),
                Builtin::Exp => mul(e.clone(), d(a, var, piecewise)),
                Builtin::Ln => div(d(a, var, piecewise), a.clone()),
                Builtin::Arctan => div(
                    d(a, var, piecewise),
                    add(num(1.0), pow(a.clone(), num(2.0))),
                ),
                Builtin::Sqrt => div(d(a, var, piecewise), mul(num(2.0), e.clone())),
                Builtin::Abs => {
                    *piecewise = true;
                    // sign(a) * a'
                    mul(div(a.clone(), e.clone()), d(a, var, piecewise))
                }
                Builtin::Min | Builtin::Max => {
                    *piecewise = true;
                    let b = &args[1];
                    let (da, db) = (d(a, var, piecewise), d(b, var, piecewise));
                    // max(a,b) = (a + b + |a-b|)/2, min(a,b) = (a + b - |a-b|)/2
                    let gap = sub(a.clone(), b.clone());
                    let sign = div(gap.clone(), call(Builtin::Abs, gap));
                    let kink = mul(sign, sub(da.clone(), db.clone()));
                    let kink = if *f == Builtin::Max { kink } else { neg(kink) };
                    div(add(add(da, db), kink), num(2.0))
                }
                Builtin::Step | Builtin::Ramp => {
                    // thresholds depending on a state variable are not
                    // differentiable in any useful sense
                    *piecewise = true;
                    num(0.0)
                }
            }
        }
    }
}
