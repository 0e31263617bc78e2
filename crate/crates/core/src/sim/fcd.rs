//! Paired simulations for fold-change detection: two copies of a model,
//! each forced by its own input and carrying its own scaling action pair.
//! When `ρ_i(u_i) ≡ ρ_j(u_j)` and the initial states agree after `γ`, the
//! components left unchanged by both actions must evolve identically.

use serde::Serialize;

use super::{integrate, SimError, SolverConfig, Trajectory};
use crate::expr::Expr;
use crate::model::SystemModel;
use crate::symmetry::ScalingActionPair;

/// Input agreement required between the two arms.
pub const INPUT_MATCH_TOL: f64 = 1e-10;
const CHECK_POINTS: usize = 4001;

#[derive(Debug, Clone)]
pub struct FcdArm {
    pub pair: ScalingActionPair,
    /// Input signals for this arm, by input name.
    pub inputs: Vec<(String, Expr)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FcdReport {
    pub x0_i: Vec<f64>,
    pub x0_j: Vec<f64>,
    pub shared: Vec<String>,
    /// `max_t |x_i,k(t) − x_j,k(t)|` over shared components `k`.
    pub shared_gap: f64,
    /// `max_t ||γ_i x_i(t) − γ_j x_j(t)||_∞`.
    pub transformed_gap: f64,
    /// `max_t ||ρ_i(u_i(t)) − ρ_j(u_j(t))||_∞`.
    pub input_mismatch: f64,
    #[serde(skip)]
    pub traj_i: Trajectory,
    #[serde(skip)]
    pub traj_j: Trajectory,
}

fn bind(m: &SystemModel, arm: &FcdArm) -> Result<SystemModel, SimError> {
    let mut out = m.clone();
    for (name, e) in &arm.inputs {
        out = out.with_input_expr(name, e.clone())?;
    }
    // Scale constants of the arm's action are model parameters as well.
    for (p, v) in &arm.pair.params {
        if out.param_index(p).is_some() {
            out = out.with_param(p, *v)?;
        }
    }
    Ok(out)
}

/// Solve `γ_j(x) = target` by Newton's method with a finite-difference
/// Jacobian, starting from `start`.
fn match_state(
    pair: &ScalingActionPair,
    target: &[f64],
    start: &[f64],
    u: &[f64],
    t: f64,
) -> Result<Vec<f64>, SimError> {
    let n = start.len();
    let mut x = start.to_vec();
    for _ in 0..50 {
        let gx = pair.apply_state(&x, u, t).map_err(|e| SimError::Precondition(e.to_string()))?;
        let r: Vec<f64> = gx.iter().zip(target).map(|(a, b)| a - b).collect();
        let scale = target.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if r.iter().all(|v| v.abs() <= 1e-14 * scale) {
            return Ok(x);
        }
        let mut jac = nalgebra::DMatrix::zeros(n, n);
        for c in 0..n {
            let h = 1e-7 * x[c].abs().max(1.0);
            let mut xp = x.clone();
            xp[c] += h;
            let gp = pair.apply_state(&xp, u, t).map_err(|e| SimError::Precondition(e.to_string()))?;
            for rr in 0..n {
                jac[(rr, c)] = (gp[rr] - gx[rr]) / h;
            }
        }
        let step = jac
            .lu()
            .solve(&nalgebra::DVector::from_vec(r))
            .ok_or_else(|| SimError::Precondition("state action is not invertible at x0".into()))?;
        for c in 0..n {
            x[c] -= step[c];
        }
    }
    Err(SimError::Precondition("could not match initial states under the actions".into()))
}

/// Run both arms from `x0_i` and its `γ`-matched counterpart. With
/// `enforce_input_match`, mismatched transformed inputs are an error;
/// otherwise the run proceeds (negative controls) and the mismatch is reported.
pub fn fcd_experiment(
    m: &SystemModel,
    arm_i: &FcdArm,
    arm_j: &FcdArm,
    shared: &[&str],
    x0_i: &[f64],
    cfg: &SolverConfig,
    enforce_input_match: bool,
) -> Result<FcdReport, SimError> {
    let mi = bind(m, arm_i)?;
    let mj = bind(m, arm_j)?;
    let shared_idx = shared
        .iter()
        .map(|s| {
            m.state_index(s)
                .ok_or_else(|| SimError::Precondition(format!("`{s}` is not a state")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let grid: Vec<f64> = (0..CHECK_POINTS)
        .map(|k| cfg.t0 + (cfg.t_end - cfg.t0) * k as f64 / (CHECK_POINTS - 1) as f64)
        .collect();
    let ui = |t: f64| mi.input_values(t, &mi.param_values());
    let uj = |t: f64| mj.input_values(t, &mj.param_values());
    let pre = |e: crate::symmetry::SymmetryError| SimError::Precondition(e.to_string());

    let mut input_mismatch = 0.0f64;
    for &t in &grid {
        let a = arm_i.pair.apply_input(x0_i, &ui(t)?, t).map_err(pre)?;
        let b = arm_j.pair.apply_input(x0_i, &uj(t)?, t).map_err(pre)?;
        input_mismatch = a.iter().zip(&b).fold(input_mismatch, |m, (p, q)| m.max((p - q).abs()));
    }
    if enforce_input_match && input_mismatch > INPUT_MATCH_TOL {
        return Err(SimError::Precondition(format!(
            "transformed inputs differ by {input_mismatch:e} (> {INPUT_MATCH_TOL:e})"
        )));
    }

    let target = arm_i.pair.apply_state(x0_i, &ui(cfg.t0)?, cfg.t0).map_err(pre)?;
    let x0_j = match_state(&arm_j.pair, &target, x0_i, &uj(cfg.t0)?, cfg.t0)?;
    for &k in &shared_idx {
        if (x0_i[k] - x0_j[k]).abs() > 1e-12 * x0_i[k].abs().max(1.0) {
            return Err(SimError::Precondition(format!(
                "shared component `{}` is moved by the actions",
                m.states[k]
            )));
        }
    }

    let (ti, tj) = rayon::join(|| integrate(&mi, x0_i, cfg), || integrate(&mj, &x0_j, cfg));
    let (traj_i, traj_j) = (ti?, tj?);

    let mut shared_gap = 0.0f64;
    let mut transformed_gap = 0.0f64;
    let mut times: Vec<f64> = grid.clone();
    times.extend(traj_i.times.iter().copied());
    for t in times {
        let (xi, xj) = (traj_i.at(t).expect("inside span"), traj_j.at(t).expect("inside span"));
        for &k in &shared_idx {
            shared_gap = shared_gap.max((xi[k] - xj[k]).abs());
        }
        let gi = arm_i.pair.apply_state(&xi, &ui(t)?, t).map_err(pre)?;
        let gj = arm_j.pair.apply_state(&xj, &uj(t)?, t).map_err(pre)?;
        transformed_gap = gi.iter().zip(&gj).fold(transformed_gap, |m, (p, q)| m.max((p - q).abs()));
    }
    Ok(FcdReport {
        x0_i: x0_i.to_vec(),
        x0_j,
        shared: shared.iter().map(|s| s.to_string()).collect(),
        shared_gap,
        transformed_gap,
        input_mismatch,
        traj_i,
        traj_j,
    })
}
