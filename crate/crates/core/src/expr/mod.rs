//! Arithmetic expressions used for vector fields, couplings, inputs and
//! nonlinear actions.
//!
//! Expressions are parsed from a small infix language (see [`parse_expression`]),
//! resolved against a model's declarations ([`Expr::resolve`]) and then evaluated
//! through an [`Env`]. Resolved variable references carry a slot index so
//! evaluation inside the integrators does not go through name lookups.

mod diff;
mod parser;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

pub use diff::{differentiate, Derivative};
pub use parser::{parse_expression, ParseError};

use thiserror::Error;

/// What a variable name refers to once resolved against a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKind {
    Unresolved,
    State,
    Param,
    Input,
}

/// A named variable reference. `slot` is meaningful only for resolved kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct VarRef {
    pub name: String,
    pub kind: VarKind,
    pub slot: usize,
}

impl VarRef {
    pub fn unresolved(name: impl Into<String>) -> Self {
        VarRef {
            name: name.into(),
            kind: VarKind::Unresolved,
            slot: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Pow => "^",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
            BinOp::Pow => 4,
        }
    }
}

/// Built-in functions. `step` and `ramp` read the time symbol implicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Sin,
    Cos,
    Exp,
    Ln,
    Abs,
    Arctan,
    Sqrt,
    Min,
    Max,
    Step,
    Ramp,
}

impl Builtin {
    pub fn from_name(name: &str) -> Option<Builtin> {
        Some(match name {
            "sin" => Builtin::Sin,
            "cos" => Builtin::Cos,
            "exp" => Builtin::Exp,
            "ln" => Builtin::Ln,
            "abs" => Builtin::Abs,
            "arctan" => Builtin::Arctan,
            "sqrt" => Builtin::Sqrt,
            "min" => Builtin::Min,
            "max" => Builtin::Max,
            "step" => Builtin::Step,
            "ramp" => Builtin::Ramp,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Sin => "sin",
            Builtin::Cos => "cos",
            Builtin::Exp => "exp",
            Builtin::Ln => "ln",
            Builtin::Abs => "abs",
            Builtin::Arctan => "arctan",
            Builtin::Sqrt => "sqrt",
            Builtin::Min => "min",
            Builtin::Max => "max",
            Builtin::Step => "step",
            Builtin::Ramp => "ramp",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Min | Builtin::Max | Builtin::Ramp => 2,
            _ => 1,
        }
    }

    /// Functions without a continuous derivative everywhere.
    pub fn is_nonsmooth(self) -> bool {
        matches!(
            self,
            Builtin::Abs | Builtin::Min | Builtin::Max | Builtin::Step
        )
    }
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(VarRef),
    Time,
    /// `x@tau`: value of state `x` at `t - tau`.
    Delayed { var: VarRef, delay: VarRef },
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound name `{0}`")]
    Unbound(String),
    #[error("division by zero in `{0}`")]
    DivisionByZero(String),
    #[error("`{0}` evaluated outside its domain")]
    Domain(String),
    #[error("delayed value of `{0}` unavailable")]
    NoHistory(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResolveError {
    #[error("undeclared name `{0}`")]
    Undeclared(String),
    #[error("`{0}@{1}`: delayed references need a declared state and delay")]
    BadDelay(String, String),
}

/// Variable bindings seen by [`Expr::evaluate`].
pub trait Env {
    fn var(&self, v: &VarRef) -> Option<f64>;
    fn time(&self) -> f64;
    fn delayed(&self, _var: &VarRef, _delay: &VarRef) -> Option<f64> {
        None
    }
}

/// Name-keyed bindings, used for ad hoc evaluation and in tests.
#[derive(Debug, Clone, Default)]
pub struct MapEnv {
    pub values: HashMap<String, f64>,
    pub t: f64,
}

impl MapEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn at_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }
}

impl Env for MapEnv {
    fn var(&self, v: &VarRef) -> Option<f64> {
        self.values.get(&v.name).copied()
    }

    fn time(&self) -> f64 {
        self.t
    }
}

/// Slot-indexed bindings for resolved expressions.
pub struct SlotEnv<'a> {
    pub states: &'a [f64],
    pub params: &'a [f64],
    pub inputs: &'a [f64],
    pub t: f64,
    /// `(state slot, delay slot) -> x_state(t - tau)`
    pub history: Option<&'a dyn Fn(usize, usize) -> Option<f64>>,
}

impl Env for SlotEnv<'_> {
    fn var(&self, v: &VarRef) -> Option<f64> {
        match v.kind {
            VarKind::State => self.states.get(v.slot).copied(),
            VarKind::Param => self.params.get(v.slot).copied(),
            VarKind::Input => self.inputs.get(v.slot).copied(),
            VarKind::Unresolved => None,
        }
    }

    fn time(&self) -> f64 {
        self.t
    }

    fn delayed(&self, var: &VarRef, delay: &VarRef) -> Option<f64> {
        let history = self.history?;
        history(var.slot, delay.slot)
    }
}

/// Name tables an expression is resolved against.
#[derive(Debug, Clone, Default)]
pub struct Scope {
    pub states: Vec<String>,
    pub params: Vec<String>,
    pub inputs: Vec<String>,
    pub delays: Vec<String>,
}

impl Scope {
    fn find(list: &[String], name: &str) -> Option<usize> {
        list.iter().position(|n| n == name)
    }
}

/// Cubic smoothstep from 0 at `t0` to 1 at `t1` (C¹).
pub fn smoothstep(t: f64, t0: f64, t1: f64) -> f64 {
    if t1 <= t0 {
        return if t >= t0 { 1.0 } else { 0.0 };
    }
    let s = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(VarRef::unresolved(name))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 1.0)
    }

    pub fn evaluate(&self, env: &dyn Env) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(v) => env.var(v).ok_or_else(|| EvalError::Unbound(v.name.clone())),
            Expr::Time => Ok(env.time()),
            Expr::Delayed { var, delay } => env
                .delayed(var, delay)
                .ok_or_else(|| EvalError::NoHistory(format!("{}@{}", var.name, delay.name))),
            Expr::Neg(a) => Ok(-a.evaluate(env)?),
            Expr::Bin(op, a, b) => {
                let x = a.evaluate(env)?;
                let y = b.evaluate(env)?;
                Ok(match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => {
                        if y == 0.0 {
                            return Err(EvalError::DivisionByZero(self.to_string()));
                        }
                        x / y
                    }
                    BinOp::Pow => {
                        let r = x.powf(y);
                        if r.is_nan() && !x.is_nan() && !y.is_nan() {
                            return Err(EvalError::Domain(self.to_string()));
                        }
                        r
                    }
                })
            }
            Expr::Call(f, args) => {
                let a = args[0].evaluate(env)?;
                Ok(match f {
                    Builtin::Sin => a.sin(),
                    Builtin::Cos => a.cos(),
                    Builtin::Exp => a.exp(),
                    Builtin::Ln => {
                        if a <= 0.0 {
                            return Err(EvalError::Domain(self.to_string()));
                        }
                        a.ln()
                    }
                    Builtin::Abs => a.abs(),
                    Builtin::Arctan => a.atan(),
                    Builtin::Sqrt => {
                        if a < 0.0 {
                            return Err(EvalError::Domain(self.to_string()));
                        }
                        a.sqrt()
                    }
                    Builtin::Min => a.min(args[1].evaluate(env)?),
                    Builtin::Max => a.max(args[1].evaluate(env)?),
                    Builtin::Step => {
                        if env.time() >= a {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Builtin::Ramp => smoothstep(env.time(), a, args[1].evaluate(env)?),
                })
            }
        }
    }

    /// Visit every node, parents before children.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Neg(a) => a.walk(f),
            Expr::Bin(_, a, b) => {
                a.walk(f);
                b.walk(f);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.walk(f)),
            _ => {}
        }
    }

    /// Names of all (non-delayed) variables.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| {
            if let Expr::Var(v) = e {
                out.insert(v.name.clone());
            }
        });
        out
    }

    pub fn depends_on(&self, name: &str) -> bool {
        let mut found = false;
        self.walk(&mut |e| match e {
            Expr::Var(v) if v.name == name => found = true,
            Expr::Delayed { var, .. } if var.name == name => found = true,
            _ => {}
        });
        found
    }

    pub fn uses_time(&self) -> bool {
        let mut found = false;
        self.walk(&mut |e| {
            if matches!(e, Expr::Time | Expr::Call(Builtin::Step | Builtin::Ramp, _)) {
                found = true;
            }
        });
        found
    }

    pub fn has_delay(&self) -> bool {
        let mut found = false;
        self.walk(&mut |e| {
            if matches!(e, Expr::Delayed { .. }) {
                found = true;
            }
        });
        found
    }

    /// Rewrite every node bottom-up.
    pub fn map(&self, f: &dyn Fn(Expr) -> Expr) -> Expr {
        let node = match self {
            Expr::Neg(a) => Expr::Neg(Box::new(a.map(f))),
            Expr::Bin(op, a, b) => Expr::Bin(*op, Box::new(a.map(f)), Box::new(b.map(f))),
            Expr::Call(g, args) => Expr::Call(*g, args.iter().map(|a| a.map(f)).collect()),
            other => other.clone(),
        };
        f(node)
    }

    /// Replace variables by name (delayed references have their state renamed
    /// when the replacement is a plain variable).
    pub fn substitute(&self, bindings: &HashMap<String, Expr>) -> Expr {
        self.map(&|e| match e {
            Expr::Var(ref v) => bindings.get(&v.name).cloned().unwrap_or(e),
            Expr::Delayed { ref var, ref delay } => match bindings.get(&var.name) {
                Some(Expr::Var(nv)) => Expr::Delayed {
                    var: VarRef::unresolved(nv.name.clone()),
                    delay: delay.clone(),
                },
                _ => e,
            },
            other => other,
        })
    }

    /// Bind every name to a slot of `scope`. States shadow parameters,
    /// parameters shadow inputs.
    pub fn resolve(&self, scope: &Scope) -> Result<Expr, ResolveError> {
        Ok(match self {
            Expr::Var(v) => Expr::Var(resolve_var(&v.name, scope)?),
            Expr::Delayed { var, delay } => {
                let s = Scope::find(&scope.states, &var.name);
                let d = Scope::find(&scope.delays, &delay.name);
                match (s, d) {
                    (Some(s), Some(d)) => Expr::Delayed {
                        var: VarRef {
                            name: var.name.clone(),
                            kind: VarKind::State,
                            slot: s,
                        },
                        delay: VarRef {
                            name: delay.name.clone(),
                            kind: VarKind::Param,
                            slot: d,
                        },
                    },
                    _ => return Err(ResolveError::BadDelay(var.name.clone(), delay.name.clone())),
                }
            }
            Expr::Neg(a) => Expr::Neg(Box::new(a.resolve(scope)?)),
            Expr::Bin(op, a, b) => {
                Expr::Bin(*op, Box::new(a.resolve(scope)?), Box::new(b.resolve(scope)?))
            }
            Expr::Call(f, args) => Expr::Call(
                *f,
                args.iter()
                    .map(|a| a.resolve(scope))
                    .collect::<Result<_, _>>()?,
            ),
            other => other.clone(),
        })
    }

    /// Constant folding plus the identities `a - a = 0` and `a / a = 1`
    /// on structurally equal operands.
    pub fn simplify(&self) -> Expr {
        self.map(&|e| match e {
            Expr::Neg(a) => neg(*a),
            Expr::Bin(op, a, b) => bin(op, *a, *b),
            Expr::Call(f, args) => {
                if args.iter().all(|a| matches!(a, Expr::Num(_)))
                    && !matches!(f, Builtin::Step | Builtin::Ramp)
                {
                    let call = Expr::Call(f, args.clone());
                    if let Ok(v) = call.evaluate(&MapEnv::new()) {
                        return Expr::Num(v);
                    }
                }
                Expr::Call(f, args)
            }
            other => other,
        })
    }
}

fn resolve_var(name: &str, scope: &Scope) -> Result<VarRef, ResolveError> {
    let (kind, slot) = if let Some(i) = Scope::find(&scope.states, name) {
        (VarKind::State, i)
    } else if let Some(i) = Scope::find(&scope.params, name) {
        (VarKind::Param, i)
    } else if let Some(i) = Scope::find(&scope.inputs, name) {
        (VarKind::Input, i)
    } else {
        return Err(ResolveError::Undeclared(name.to_string()));
    };
    Ok(VarRef {
        name: name.to_string(),
        kind,
        slot,
    })
}

// Folding constructors shared by the differentiator and `simplify`.

pub(crate) fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

pub(crate) fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
    if let (Expr::Num(x), Expr::Num(y)) = (&a, &b) {
        let v = match op {
            BinOp::Add => Some(x + y),
            BinOp::Sub => Some(x - y),
            BinOp::Mul => Some(x * y),
            BinOp::Div if *y != 0.0 => Some(x / y),
            BinOp::Pow if !x.powf(*y).is_nan() => Some(x.powf(*y)),
            _ => None,
        };
        if let Some(v) = v {
            return Expr::Num(v);
        }
    }
    match op {
        BinOp::Add => {
            if a.is_zero() {
                b
            } else if b.is_zero() {
                a
            } else if let Expr::Neg(nb) = b {
                bin(BinOp::Sub, a, *nb)
            } else {
                Expr::Bin(op, Box::new(a), Box::new(b))
            }
        }
        BinOp::Sub => {
            if b.is_zero() {
                a
            } else if a.is_zero() {
                neg(b)
            } else if a == b {
                Expr::Num(0.0)
            } else {
                Expr::Bin(op, Box::new(a), Box::new(b))
            }
        }
        BinOp::Mul => {
            if a.is_zero() || b.is_zero() {
                Expr::Num(0.0)
            } else if a.is_one() {
                b
            } else if b.is_one() {
                a
            } else if matches!(a, Expr::Num(v) if v == -1.0) {
                neg(b)
            } else if matches!(b, Expr::Num(v) if v == -1.0) {
                neg(a)
            } else {
                Expr::Bin(op, Box::new(a), Box::new(b))
            }
        }
        BinOp::Div => {
            if a.is_zero() && !b.is_zero() {
                Expr::Num(0.0)
            } else if b.is_one() {
                a
            } else if a == b && !a.is_zero() {
                Expr::Num(1.0)
            } else {
                Expr::Bin(op, Box::new(a), Box::new(b))
            }
        }
        BinOp::Pow => {
            if b.is_zero() {
                Expr::Num(1.0)
            } else if b.is_one() {
                a
            } else {
                Expr::Bin(op, Box::new(a), Box::new(b))
            }
        }
    }
}

fn fmt_child(f: &mut fmt::Formatter<'_>, e: &Expr, parent_prec: u8, needs_strict: bool) -> fmt::Result {
    let prec = node_precedence(e);
    if prec < parent_prec || (needs_strict && prec == parent_prec) {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

fn node_precedence(e: &Expr) -> u8 {
    match e {
        Expr::Bin(op, _, _) => op.precedence(),
        Expr::Neg(_) => 3,
        Expr::Num(v) if *v < 0.0 => 0,
        _ => 5,
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => {
                if *v < 0.0 {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            Expr::Var(v) => write!(f, "{}", v.name),
            Expr::Time => write!(f, "t"),
            Expr::Delayed { var, delay } => write!(f, "{}@{}", var.name, delay.name),
            Expr::Neg(a) => {
                write!(f, "-")?;
                // `-x^2` reads as `-(x^2)`, so powers need no parentheses here.
                fmt_child(f, a, 3, false)
            }
            Expr::Bin(op, a, b) => {
                let p = op.precedence();
                if *op == BinOp::Pow {
                    // right associative; a negated base must be parenthesized
                    fmt_child(f, a, p, true)?;
                    write!(f, "^")?;
                    fmt_child(f, b, 3, false)
                } else {
                    fmt_child(f, a, p, false)?;
                    write!(f, " {} ", op.symbol())?;
                    fmt_child(f, b, p, true)
                }
            }
            Expr::Call(g, args) => {
                write!(f, "{}(", g.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}
