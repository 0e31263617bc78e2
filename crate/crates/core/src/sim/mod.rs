//! Numerical integration of ODE and delayed models.
//!
//! Two explicit schemes are provided: adaptive Dormand–Prince 5(4) with its
//! standard fourth-order continuous extension, and classical fixed-step RK4
//! with cubic Hermite interpolation between steps. Delayed models are
//! integrated by the method of steps on the RK4 grid, reading past states
//! from the dense output of completed steps.

mod fcd;
mod metrics;
mod output;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{smoothstep, Expr, SlotEnv, VarKind};
use crate::model::{ModelError, SystemModel};

pub use fcd::{fcd_experiment, FcdArm, FcdReport};
pub use metrics::{convergence_rate, equilibrium, h_symmetry_residual, periodicity_check, sync_error, RateFit};
pub use output::{write_csv, write_svg_plot, PlotSeries};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("step size underflow at t = {t} (h = {h:e}); last state {state:?}")]
    StepUnderflow { t: f64, h: f64, state: Vec<f64> },
    #[error("non-finite state at t = {t}; last good state {state:?}")]
    NonFinite { t: f64, state: Vec<f64> },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("initial state has {got} components, model has {want}")]
    Dimension { got: usize, want: usize },
    #[error("trajectory spans [{have0}, {have1}], need [{need0}, {need1}]")]
    HorizonTooShort { need0: f64, need1: f64, have0: f64, have1: f64 },
    #[error("model has delays; use integrate_dde")]
    Delayed,
    #[error("{0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Rk4 { dt: f64 },
    Rk45 { rtol: f64, atol: f64, dt_max: f64 },
}

/// Smooth (C¹) transition of a parameter from `from` to `to` over
/// `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub param: String,
    pub t_start: f64,
    pub t_end: f64,
    pub from: f64,
    pub to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub t0: f64,
    pub t_end: f64,
    #[serde(default)]
    pub ramps: Vec<Ramp>,
}

impl SolverConfig {
    pub fn rk45(t_end: f64, rtol: f64, atol: f64) -> SolverConfig {
        SolverConfig {
            method: Method::Rk45 {
                rtol,
                atol,
                dt_max: 0.1,
            },
            t0: 0.0,
            t_end,
            ramps: Vec::new(),
        }
    }

    pub fn rk4(t_end: f64, dt: f64) -> SolverConfig {
        SolverConfig {
            method: Method::Rk4 { dt },
            t0: 0.0,
            t_end,
            ramps: Vec::new(),
        }
    }

    pub fn with_ramp(mut self, ramp: Ramp) -> SolverConfig {
        self.ramps.push(ramp);
        self
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.t_end > self.t0) {
            return Err(SimError::Config(format!("t_end {} must exceed t0 {}", self.t_end, self.t0)));
        }
        match self.method {
            Method::Rk4 { dt } if !(dt > 0.0) => Err(SimError::Config("dt must be positive".into())),
            Method::Rk45 { rtol, atol, dt_max } if !(rtol > 0.0 && atol > 0.0 && dt_max > 0.0) => {
                Err(SimError::Config("rtol, atol and dt_max must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Polynomial on one accepted step.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    /// Dormand–Prince continuous extension; `coeffs` holds 5 blocks of n.
    Dopri { t0: f64, h: f64, coeffs: Vec<f64> },
    /// Cubic Hermite from endpoint values and slopes; 4 blocks of n.
    Hermite { t0: f64, h: f64, data: Vec<f64> },
}

impl Segment {
    fn span(&self) -> (f64, f64) {
        match self {
            Segment::Dopri { t0, h, .. } | Segment::Hermite { t0, h, .. } => (*t0, *t0 + *h),
        }
    }

    fn component(&self, n: usize, i: usize, t: f64) -> f64 {
        match self {
            Segment::Dopri { t0, h, coeffs } => {
                let s = (t - t0) / h;
                let s1 = 1.0 - s;
                let c = |k: usize| coeffs[k * n + i];
                c(0) + s * (c(1) + s1 * (c(2) + s * (c(3) + s1 * c(4))))
            }
            Segment::Hermite { t0, h, data } => {
                let s = (t - t0) / h;
                let (y0, y1, f0, f1) = (data[i], data[n + i], data[2 * n + i], data[3 * n + i]);
                let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
                let h10 = s * (1.0 - s) * (1.0 - s);
                let h01 = s * s * (3.0 - 2.0 * s);
                let h11 = s * s * (s - 1.0);
                h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1
            }
        }
    }
}

/// Solution on the accepted-step grid with dense output between steps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub names: Vec<String>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub segments: Vec<Segment>,
    pub model_hash: String,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("nonempty trajectory")
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("nonempty trajectory")
    }

    fn segment_index(&self, t: f64) -> Option<usize> {
        if self.segments.is_empty() || t < self.t0() || t > self.t_end() {
            return None;
        }
        let k = self.segments.partition_point(|s| s.span().1 < t);
        Some(k.min(self.segments.len() - 1))
    }

    /// Component `i` at time `t` from dense output.
    pub fn component_at(&self, i: usize, t: f64) -> Option<f64> {
        let k = self.segment_index(t)?;
        Some(self.segments[k].component(self.dim(), i, t))
    }

    /// Full state at time `t` from dense output.
    pub fn at(&self, t: f64) -> Option<Vec<f64>> {
        let k = self.segment_index(t)?;
        let n = self.dim();
        Some((0..n).map(|i| self.segments[k].component(n, i, t)).collect())
    }

    /// Resample on a uniform grid (endpoints included).
    pub fn resample(&self, points: usize) -> Vec<(f64, Vec<f64>)> {
        let (a, b) = (self.t0(), self.t_end());
        (0..points.max(2))
            .map(|k| {
                let t = a + (b - a) * k as f64 / (points.max(2) - 1) as f64;
                (t, self.at(t).expect("inside span"))
            })
            .collect()
    }
}

/// Right-hand side with ramped parameters and signal inputs.
struct Rhs<'a> {
    m: &'a SystemModel,
    params: Vec<f64>,
    base: Vec<f64>,
    ramps: Vec<(usize, Ramp)>,
    inputs: Vec<f64>,
}

impl<'a> Rhs<'a> {
    fn new(m: &'a SystemModel, ramps: &[Ramp]) -> Result<Rhs<'a>, SimError> {
        let ramps = ramps
            .iter()
            .map(|r| {
                m.param_index(&r.param)
                    .map(|k| (k, r.clone()))
                    .ok_or_else(|| SimError::Config(format!("ramp names unknown parameter `{}`", r.param)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let base = m.param_values();
        Ok(Rhs {
            m,
            params: base.clone(),
            base,
            ramps,
            inputs: vec![0.0; m.inputs.len()],
        })
    }

    fn eval(
        &mut self,
        t: f64,
        x: &[f64],
        out: &mut [f64],
        history: Option<&dyn Fn(usize, usize) -> Option<f64>>,
    ) -> Result<(), SimError> {
        self.params.copy_from_slice(&self.base);
        for (k, r) in &self.ramps {
            self.params[*k] = r.from + (r.to - r.from) * smoothstep(t, r.t_start, r.t_end);
        }
        self.m.input_values_into(t, &self.params, &mut self.inputs)?;
        self.m
            .rhs_into(
                &SlotEnv {
                    states: x,
                    params: &self.params,
                    inputs: &self.inputs,
                    t,
                    history,
                },
                out,
            )
            .map_err(|e| SimError::Model(ModelError::Eval(e)))
    }
}

fn check_x0(m: &SystemModel, x0: &[f64]) -> Result<(), SimError> {
    if x0.len() != m.dim() {
        return Err(SimError::Dimension {
            got: x0.len(),
            want: m.dim(),
        });
    }
    Ok(())
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Integrate a non-delayed model.
pub fn integrate(m: &SystemModel, x0: &[f64], cfg: &SolverConfig) -> Result<Trajectory, SimError> {
    if m.is_delayed() {
        return Err(SimError::Delayed);
    }
    check_x0(m, x0)?;
    cfg.validate()?;
    let mut rhs = Rhs::new(m, &cfg.ramps)?;
    match cfg.method {
        Method::Rk4 { dt } => rk4(&mut rhs, x0, cfg, dt, None),
        Method::Rk45 { rtol, atol, dt_max } => dopri5(&mut rhs, x0, cfg, rtol, atol, dt_max),
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

fn dopri5(
    rhs: &mut Rhs<'_>,
    x0: &[f64],
    cfg: &SolverConfig,
    rtol: f64,
    atol: f64,
    dt_max: f64,
) -> Result<Trajectory, SimError> {
    let n = x0.len();
    let mut t = cfg.t0;
    let mut y = x0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut traj = Trajectory {
        names: rhs.m.states.clone(),
        times: vec![t],
        states: vec![y.clone()],
        segments: Vec::new(),
        model_hash: rhs.m.model_hash(),
    };
    rhs.eval(t, &y, &mut k[0], None)?;
    if !all_finite(&k[0]) {
        return Err(SimError::NonFinite { t, state: y });
    }
    let span = cfg.t_end - cfg.t0;
    let mut h = initial_step(rhs, t, &y, &k[0], rtol, atol)?.min(dt_max).min(span);
    let mut last_rejected = false;
    while t < cfg.t_end {
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(SimError::StepUnderflow { t, h, state: y });
        }
        if t + h > cfg.t_end || cfg.t_end - (t + h) < 1e-12 * span {
            h = cfg.t_end - t;
        }
        let stage = |tmp: &mut Vec<f64>, k: &[Vec<f64>], coeffs: &[(usize, f64)]| {
            for i in 0..n {
                tmp[i] = y[i] + h * coeffs.iter().map(|&(j, a)| a * k[j][i]).sum::<f64>();
            }
        };
        stage(&mut tmp, &k, &[(0, A21)]);
        rhs.eval(t + C2 * h, &tmp, &mut k[1], None)?;
        stage(&mut tmp, &k, &[(0, A31), (1, A32)]);
        rhs.eval(t + C3 * h, &tmp, &mut k[2], None)?;
        stage(&mut tmp, &k, &[(0, A41), (1, A42), (2, A43)]);
        rhs.eval(t + C4 * h, &tmp, &mut k[3], None)?;
        stage(&mut tmp, &k, &[(0, A51), (1, A52), (2, A53), (3, A54)]);
        rhs.eval(t + C5 * h, &tmp, &mut k[4], None)?;
        stage(&mut tmp, &k, &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
        rhs.eval(t + h, &tmp, &mut k[5], None)?;
        stage(&mut y1, &k, &[(0, A71), (2, A73), (3, A74), (4, A75), (5, A76)]);
        rhs.eval(t + h, &y1, &mut k[6], None)?;
        if !all_finite(&y1) || !all_finite(&k[6]) {
            return Err(SimError::NonFinite { t, state: y });
        }
        let mut err = 0.0;
        for i in 0..n {
            let e = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            let sc = atol + rtol * y[i].abs().max(y1[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if err <= 1.0 {
            let mut coeffs = vec![0.0; 5 * n];
            for i in 0..n {
                let ydiff = y1[i] - y[i];
                let bspl = h * k[0][i] - ydiff;
                coeffs[i] = y[i];
                coeffs[n + i] = ydiff;
                coeffs[2 * n + i] = bspl;
                coeffs[3 * n + i] = ydiff - h * k[6][i] - bspl;
                coeffs[4 * n + i] = h
                    * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i]);
            }
            traj.segments.push(Segment::Dopri { t0: t, h, coeffs });
            t = if cfg.t_end - (t + h) < 1e-12 * span { cfg.t_end } else { t + h };
            std::mem::swap(&mut y, &mut y1);
            k.swap(0, 6);
            traj.times.push(t);
            traj.states.push(y.clone());
            let grow = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
            h *= if last_rejected { grow.min(1.0) } else { grow };
            last_rejected = false;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            last_rejected = true;
        }
        h = h.min(dt_max);
    }
    Ok(traj)
}

/// Starting step from the usual two-derivative estimate.
fn initial_step(rhs: &mut Rhs<'_>, t: f64, y: &[f64], f0: &[f64], rtol: f64, atol: f64) -> Result<f64, SimError> {
    let n = y.len();
    let sc: Vec<f64> = y.iter().map(|v| atol + rtol * v.abs()).collect();
    let norm = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s) * (a / s)).sum::<f64>() / n.max(1) as f64).sqrt();
    let (d0, d1) = (norm(y), norm(f0));
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let mut f1 = vec![0.0; n];
    rhs.eval(t + h0, &y1, &mut f1, None)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1))
}

/// Classical RK4 on a uniform grid (the last step is shortened to land on
/// `t_end`), optionally reading delayed states through `delays`.
fn rk4(
    rhs: &mut Rhs<'_>,
    x0: &[f64],
    cfg: &SolverConfig,
    dt: f64,
    delays: Option<&DelayContext<'_>>,
) -> Result<Trajectory, SimError> {
    let n = x0.len();
    let steps = ((cfg.t_end - cfg.t0) / dt - 1e-9).ceil().max(1.0) as usize;
    let mut traj = Trajectory {
        names: rhs.m.states.clone(),
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        segments: Vec::with_capacity(steps),
        model_hash: rhs.m.model_hash(),
    };
    let mut y = x0.to_vec();
    let mut t = cfg.t0;
    traj.times.push(t);
    traj.states.push(y.clone());
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    let eval = |rhs: &mut Rhs<'_>, traj: &Trajectory, s: f64, x: &[f64], out: &mut [f64]| -> Result<(), SimError> {
        match delays {
            None => rhs.eval(s, x, out, None),
            Some(ctx) => {
                let lookup = |state: usize, delay: usize| ctx.lookup(traj, state, delay, s);
                rhs.eval(s, x, out, Some(&lookup))
            }
        }
    };

    eval(rhs, &traj, t, &y, &mut k1)?;
    for step in 0..steps {
        let t_next = if step + 1 == steps { cfg.t_end } else { cfg.t0 + (step + 1) as f64 * dt };
        let h = t_next - t;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        eval(rhs, &traj, t + 0.5 * h, &tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        eval(rhs, &traj, t + 0.5 * h, &tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        eval(rhs, &traj, t + h, &tmp, &mut k4)?;
        let y1: Vec<f64> = (0..n)
            .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        if !all_finite(&y1) {
            return Err(SimError::NonFinite { t, state: y });
        }
        // Slope at the new point doubles as the next step's first stage; the
        // segment must exist before evaluating it so delayed lookups at
        // t_next - tau (>= t when tau <= h) are covered.
        let mut data = Vec::with_capacity(4 * n);
        data.extend_from_slice(&y);
        data.extend_from_slice(&y1);
        data.extend_from_slice(&k1);
        data.extend_from_slice(&k4);
        traj.segments.push(Segment::Hermite { t0: t, h, data });
        traj.times.push(t_next);
        traj.states.push(y1.clone());
        let mut f1 = vec![0.0; n];
        eval(rhs, &traj, t_next, &y1, &mut f1)?;
        if !all_finite(&f1) {
            return Err(SimError::NonFinite { t: t_next, state: y1 });
        }
        if let Some(Segment::Hermite { data, .. }) = traj.segments.last_mut() {
            data[3 * n..].copy_from_slice(&f1);
        }
        k1 = f1;
        y = y1;
        t = t_next;
    }
    Ok(traj)
}

/// Past states for delayed references: the initial history before `t0`,
/// dense output afterwards.
struct DelayContext<'a> {
    t0: f64,
    delays: Vec<f64>,
    history: &'a dyn Fn(f64) -> Vec<f64>,
}

impl DelayContext<'_> {
    fn lookup(&self, traj: &Trajectory, state: usize, delay: usize, s: f64) -> Option<f64> {
        let when = s - self.delays[delay];
        if when <= self.t0 {
            return (self.history)(when).get(state).copied();
        }
        traj.component_at(state, when)
    }
}

/// Replace `x@tau` by `x` wherever `tau` is zero.
fn collapse_zero_delays(m: &SystemModel) -> SystemModel {
    let mut out = m.clone();
    let zero: Vec<bool> = m.delays.iter().map(|d| d.1 == 0.0).collect();
    if !zero.contains(&true) {
        return out;
    }
    for f in &mut out.field {
        *f = f.map(&|e| match e {
            Expr::Delayed { ref var, ref delay } if zero[delay.slot] => {
                debug_assert_eq!(var.kind, VarKind::State);
                Expr::Var(var.clone())
            }
            other => other,
        });
    }
    out
}

/// Largest `dt' <= dt` of the form `dt / k` that divides every positive
/// delay (within 1e-9 relative), capped by the smallest positive delay.
pub fn commensurate_step(dt: f64, delays: &[f64]) -> f64 {
    let positive: Vec<f64> = delays.iter().copied().filter(|d| *d > 0.0).collect();
    let Some(min) = positive.iter().copied().reduce(f64::min) else {
        return dt;
    };
    let first = (min / dt - 1e-9).ceil().max(1.0) as usize;
    for k in first..first + 10_000 {
        let cand = min / k as f64;
        let divides = positive.iter().all(|d| {
            let q = d / cand;
            (q - q.round()).abs() <= 1e-9 * q.max(1.0)
        });
        if divides {
            return cand;
        }
    }
    min / first as f64
}

/// Method of steps for delayed models, fixed-step RK4 on a grid that
/// divides every delay. `history(t)` gives the state for `t <= t0`.
pub fn integrate_dde(
    m: &SystemModel,
    history: &dyn Fn(f64) -> Vec<f64>,
    cfg: &SolverConfig,
) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    let Method::Rk4 { dt } = cfg.method else {
        return Err(SimError::Config("delayed models use the fixed-step rk4 method".into()));
    };
    let m = collapse_zero_delays(m);
    let x0 = history(cfg.t0);
    check_x0(&m, &x0)?;
    let delays: Vec<f64> = m.delays.iter().map(|d| d.1).collect();
    let step = commensurate_step(dt, &delays);
    if (step - dt).abs() > 1e-15 * dt {
        log::warn!("step {dt} adjusted to {step} to divide the delays {delays:?}");
    }
    let ctx = DelayContext {
        t0: cfg.t0,
        delays,
        history,
    };
    let mut rhs = Rhs::new(&m, &cfg.ramps)?;
    let mut traj = rk4(&mut rhs, &x0, cfg, step, Some(&ctx))?;
    traj.model_hash = m.model_hash();
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;

    fn model(src: &str) -> SystemModel {
        parse_model(src).unwrap().into_system().unwrap()
    }

    fn decay() -> SystemModel {
        model("states x\ndynamics\n d/dt x = -x\n")
    }

    #[test]
    fn rk45_exponential_decay() {
        let tr = integrate(&decay(), &[1.0], &SolverConfig::rk45(5.0, 1e-10, 1e-12)).unwrap();
        assert_eq!(tr.t_end(), 5.0);
        assert!((tr.final_state()[0] - (-5f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn dense_output_matches_closed_form_between_steps() {
        let m = model("states x y\ndynamics\n d/dt x = y\n d/dt y = -x\n");
        let tol = 1e-7;
        let mut cfg = SolverConfig::rk45(10.0, tol, tol);
        cfg.method = Method::Rk45 {
            rtol: tol,
            atol: tol,
            dt_max: 10.0,
        };
        let tr = integrate(&m, &[0.0, 1.0], &cfg).unwrap();
        assert!(tr.segments.len() > 5);
        let mut worst = 0.0f64;
        for seg in &tr.segments {
            let (a, b) = seg.span();
            for frac in [0.25, 0.5, 0.75] {
                let t = a + frac * (b - a);
                let x = tr.at(t).unwrap();
                worst = worst.max((x[0] - t.sin()).abs()).max((x[1] - t.cos()).abs());
            }
        }
        // global error at the nodes bounds how good the interpolant can be
        let node_err = (tr.final_state()[0] - 10f64.sin()).abs();
        assert!(worst <= 10.0 * tol.max(node_err), "interpolation error {worst}, node error {node_err}");
    }

    #[test]
    fn rk4_fourth_order_convergence() {
        let err = |dt: f64| {
            let tr = integrate(&decay(), &[1.0], &SolverConfig::rk4(2.0, dt)).unwrap();
            (tr.final_state()[0] - (-2f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() <= 0.2 * 16.0, "ratio {ratio}");
    }

    #[test]
    fn rk45_respects_tolerance_against_a_halved_run() {
        let m = model("states x\ndynamics\n d/dt x = -x + sin(t)\n");
        for rtol in [1e-5, 1e-8] {
            let coarse = integrate(&m, &[2.0], &SolverConfig::rk45(20.0, rtol, rtol)).unwrap();
            let fine = integrate(&m, &[2.0], &SolverConfig::rk45(20.0, rtol / 1000.0, rtol / 1000.0)).unwrap();
            let err = (coarse.final_state()[0] - fine.final_state()[0]).abs();
            assert!(err <= 10.0 * rtol, "rtol {rtol}: {err}");
        }
    }

    #[test]
    fn ramps_move_parameters_smoothly() {
        let m = model("params\n b = 0\nstates x\ndynamics\n d/dt x = b\n");
        let cfg = SolverConfig::rk45(10.0, 1e-10, 1e-12).with_ramp(Ramp {
            param: "b".into(),
            t_start: 2.0,
            t_end: 4.0,
            from: 0.0,
            to: 1.0,
        });
        let tr = integrate(&m, &[0.0], &cfg).unwrap();
        // integral of the smoothstep over [2, 4] is 1, then slope 1 for 6 more units
        assert!((tr.final_state()[0] - 7.0).abs() < 1e-8);
    }

    #[test]
    fn blow_up_is_reported_with_last_state() {
        let m = model("states x\ndynamics\n d/dt x = x^2\n");
        match integrate(&m, &[1.0], &SolverConfig::rk4(2.0, 0.1)) {
            Err(SimError::NonFinite { state, .. }) => assert!(state[0].is_finite()),
            other => panic!("{other:?}"),
        }
        assert!(integrate(&m, &[1.0], &SolverConfig::rk45(2.0, 1e-6, 1e-9)).is_err());
    }

    #[test]
    fn delay_equation_self_converges() {
        let m = model("delays\n tau = 1\nstates x\ndynamics\n d/dt x = -x@tau\n");
        let hist = |_t: f64| vec![1.0];
        let a = integrate_dde(&m, &hist, &SolverConfig::rk4(10.0, 0.01)).unwrap();
        let b = integrate_dde(&m, &hist, &SolverConfig::rk4(10.0, 0.005)).unwrap();
        assert!((a.final_state()[0] - b.final_state()[0]).abs() <= 1e-5);
        // on [0, 1] the solution is 1 - t exactly
        assert!((a.at(0.5).unwrap()[0] - 0.5).abs() < 1e-12);
        // on [1, 2] it is 1 - t + (t - 1)^2 / 2
        let t: f64 = 1.7;
        assert!((a.at(t).unwrap()[0] - (1.0 - t + (t - 1.0).powi(2) / 2.0)).abs() < 1e-9);
    }

    #[test]
    fn zero_delay_reduces_to_the_ode() {
        let m = model("delays\n tau = 0\nstates x\ndynamics\n d/dt x = -x@tau + sin(t)\n");
        let plain = model("states x\ndynamics\n d/dt x = -x + sin(t)\n");
        let a = integrate_dde(&m, &|_| vec![1.0], &SolverConfig::rk4(5.0, 0.01)).unwrap();
        let b = integrate(&plain, &[1.0], &SolverConfig::rk4(5.0, 0.01)).unwrap();
        assert!((a.final_state()[0] - b.final_state()[0]).abs() <= 1e-10);
    }

    #[test]
    fn commensurate_steps() {
        assert_eq!(commensurate_step(0.01, &[0.5, 1.0]), 0.01);
        let s = commensurate_step(0.3, &[0.5]);
        assert!((s - 0.25).abs() < 1e-15, "{s}");
        assert_eq!(commensurate_step(0.1, &[]), 0.1);
    }
}
