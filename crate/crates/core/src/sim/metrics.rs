use serde::{Deserialize, Serialize};

use super::{SimError, Trajectory};
use crate::model::{Partition, SystemModel};
use crate::symmetry::{LinearAction, SpatioTemporalAction};

/// Distances below this are treated as converged to roundoff.
pub const UNDERFLOW: f64 = 1e-14;

/// `e(t) = max over clusters and same-cluster node pairs of ||x_i − x_j||_∞`,
/// on the trajectory's grid.
pub fn sync_error(traj: &Trajectory, m: &SystemModel, p: &Partition) -> Result<Vec<f64>, SimError> {
    if p.len() != m.nodes.len() {
        return Err(SimError::Precondition(format!(
            "partition covers {} nodes, model has {}",
            p.len(),
            m.nodes.len()
        )));
    }
    let clusters = p.clusters();
    Ok(traj
        .states
        .iter()
        .map(|x| {
            let mut e = 0.0f64;
            for members in &clusters {
                let width = m.nodes[members[0]].components.len();
                for k in 0..width {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for &i in members {
                        let v = x[m.nodes[i].components[k]];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    e = e.max(hi - lo);
                }
            }
            e
        })
        .collect())
}

fn require_span(traj: &Trajectory, a: f64, b: f64) -> Result<(), SimError> {
    if a < traj.t0() - 1e-12 || b > traj.t_end() + 1e-12 {
        return Err(SimError::HorizonTooShort {
            need0: a,
            need1: b,
            have0: traj.t0(),
            have1: traj.t_end(),
        });
    }
    Ok(())
}

/// Points used to scan a window: the stored grid inside it plus a uniform
/// sweep, so fast features between steps are not missed.
fn scan_points(traj: &Trajectory, a: f64, b: f64) -> Vec<f64> {
    let mut ts: Vec<f64> = traj.times.iter().copied().filter(|t| *t >= a && *t <= b).collect();
    let sweep = 2000;
    ts.extend((0..=sweep).map(|k| a + (b - a) * k as f64 / sweep as f64));
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

/// `sup ||x(t + T) − x(t)||_∞` for `t` in `[t_end − T − tail, t_end − T]`.
pub fn periodicity_check(traj: &Trajectory, period: f64, tail: f64) -> Result<f64, SimError> {
    let b = traj.t_end() - period;
    let a = b - tail;
    require_span(traj, a, traj.t_end())?;
    let mut worst = 0.0f64;
    for t in scan_points(traj, a, b) {
        let x = traj.at(t).expect("inside span");
        let y = traj.at((t + period).min(traj.t_end())).expect("inside span");
        worst = worst.max(x.iter().zip(&y).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())));
    }
    Ok(worst)
}

/// `r(t) = ||x(t) − γ x(t + T)||_∞` on the stored grid wherever `t + T` is
/// inside the trajectory.
pub fn h_symmetry_residual(traj: &Trajectory, a: &SpatioTemporalAction) -> Result<Vec<(f64, f64)>, SimError> {
    if !(a.shift > 0.0) {
        return Err(SimError::Precondition("time shift must be positive".into()));
    }
    let g: &LinearAction = &a.action;
    if g.dim() != traj.dim() {
        return Err(SimError::Dimension {
            got: g.dim(),
            want: traj.dim(),
        });
    }
    let last = traj.t_end() - a.shift;
    if last <= traj.t0() {
        return Err(SimError::HorizonTooShort {
            need0: traj.t0(),
            need1: traj.t0() + a.shift,
            have0: traj.t0(),
            have1: traj.t_end(),
        });
    }
    Ok(traj
        .times
        .iter()
        .zip(&traj.states)
        .filter(|(t, _)| **t <= last)
        .map(|(t, x)| {
            let later = traj.at(t + a.shift).expect("inside span");
            let gx = g.apply(&later);
            (*t, x.iter().zip(&gx).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Decay rate `λ̂` (positive for converging series).
    pub rate: f64,
    /// Points actually used.
    pub points: usize,
    /// Window end after underflow truncation.
    pub t_last: f64,
    pub truncated: bool,
}

/// Least-squares slope of `ln v(t)` over `[a, b]`, negated. Fitting stops at
/// the first value below 1e-14, where roundoff takes over.
pub fn convergence_rate(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<RateFit, SimError> {
    let mut pts = Vec::new();
    let mut truncated = false;
    for (t, v) in times.iter().zip(values) {
        if *t < window.0 || *t > window.1 {
            continue;
        }
        if !(*v > UNDERFLOW) {
            truncated = true;
            break;
        }
        pts.push((*t, v.ln()));
    }
    if pts.len() < 2 {
        return Err(SimError::Precondition(format!(
            "only {} usable points in [{}, {}] (distance underflow?)",
            pts.len(),
            window.0,
            window.1
        )));
    }
    let n = pts.len() as f64;
    let (mt, ml) = pts.iter().fold((0.0, 0.0), |(a, b), (t, l)| (a + t / n, b + l / n));
    let (num, den) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (t, l)| (a + (t - mt) * (l - ml), b + (t - mt) * (t - mt)));
    if den == 0.0 {
        return Err(SimError::Precondition("degenerate time window".into()));
    }
    Ok(RateFit {
        rate: -num / den,
        points: pts.len(),
        t_last: pts.last().expect("two points").0,
        truncated,
    })
}

/// Equilibrium of the field at time `t` with every delay set to zero, by
/// Newton's method from `guess` (finite-difference Jacobian).
pub fn equilibrium(m: &SystemModel, guess: &[f64], t: f64) -> Result<Vec<f64>, SimError> {
    let mut m0 = m.clone();
    for (_, d) in &mut m0.delays {
        *d = 0.0;
    }
    let m0 = super::collapse_zero_delays(&m0);
    let n = m0.dim();
    let mut x = guess.to_vec();
    for _ in 0..100 {
        let fx = m0.eval_field(&x, t)?;
        let scale = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        if fx.iter().all(|v| v.abs() <= 1e-15 * scale) {
            return Ok(x);
        }
        let mut jac = nalgebra::DMatrix::zeros(n, n);
        for c in 0..n {
            let h = 1e-7 * x[c].abs().max(1.0);
            let mut xp = x.clone();
            xp[c] += h;
            let fp = m0.eval_field(&xp, t)?;
            for r in 0..n {
                jac[(r, c)] = (fp[r] - fx[r]) / h;
            }
        }
        let step = jac
            .lu()
            .solve(&nalgebra::DVector::from_vec(fx))
            .ok_or_else(|| SimError::Precondition("singular Jacobian at the equilibrium guess".into()))?;
        let size = step.amax();
        for c in 0..n {
            x[c] -= step[c];
        }
        if size <= 1e-15 * scale {
            return Ok(x);
        }
    }
    Err(SimError::Precondition("equilibrium iteration did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;
    use crate::sim::{integrate, SolverConfig};

    fn model(src: &str) -> SystemModel {
        parse_model(src).unwrap().into_system().unwrap()
    }

    #[test]
    fn rate_of_two_decaying_solutions() {
        let m = model("states x\ndynamics\n d/dt x = -2*x\n");
        let cfg = SolverConfig::rk45(8.0, 1e-11, 1e-14);
        let a = integrate(&m, &[1.0], &cfg).unwrap();
        let b = integrate(&m, &[3.0], &cfg).unwrap();
        let grid: Vec<f64> = (0..=80).map(|k| k as f64 * 0.1).collect();
        let d: Vec<f64> = grid
            .iter()
            .map(|&t| (a.at(t).unwrap()[0] - b.at(t).unwrap()[0]).abs())
            .collect();
        let fit = convergence_rate(&grid, &d, (0.0, 8.0)).unwrap();
        assert!((fit.rate - 2.0).abs() <= 0.02, "{}", fit.rate);
    }

    #[test]
    fn identical_series_underflow() {
        let t = [0.0, 1.0, 2.0, 3.0];
        let v = [1.0, 0.1, 0.0, 0.0];
        let fit = convergence_rate(&t, &v, (0.0, 3.0)).unwrap();
        assert!(fit.truncated && fit.points == 2);
        assert!(convergence_rate(&t, &[0.0; 4], (0.0, 3.0)).is_err());
    }

    #[test]
    fn periodic_steady_state() {
        let m = model("states x\ndynamics\n d/dt x = -x + sin(t)\n");
        let tr = integrate(&m, &[0.0], &SolverConfig::rk45(20.0 + 4.0 * std::f64::consts::PI, 1e-10, 1e-12)).unwrap();
        let tau = 2.0 * std::f64::consts::PI;
        assert!(periodicity_check(&tr, tau, tau).unwrap() <= 1e-6);
        // particular solution (sin t − cos t)/2
        let t = tr.t_end();
        assert!((tr.final_state()[0] - (t.sin() - t.cos()) / 2.0).abs() < 1e-7);
        // half the period is a negative control
        assert!(periodicity_check(&tr, tau / 2.0, tau).unwrap() > 0.1);
        assert!(periodicity_check(&tr, 100.0, 1.0).is_err());
        let c = model("states x\ndynamics\n d/dt x = 0\n");
        let tr = integrate(&c, &[3.0], &SolverConfig::rk4(10.0, 0.1)).unwrap();
        assert!(periodicity_check(&tr, 1.7, 2.0).unwrap() <= 1e-14);
    }

    #[test]
    fn sync_error_of_identical_nodes() {
        let m = model(
            "template c {\n states x\n d/dt x = -x\n}\nnodes 1..3 : c\ncoupling k(j, i) = j - i\nedge 1 <-> 2, 2 <-> 3 : k\n",
        );
        let tr = integrate(&m, &[1.0, 1.0, 1.0], &SolverConfig::rk4(1.0, 0.1)).unwrap();
        assert!(sync_error(&tr, &m, &Partition::single(3)).unwrap().iter().all(|e| *e <= 1e-12));
        let tr = integrate(&m, &[1.0, -1.0, 2.0], &SolverConfig::rk4(1.0, 0.1)).unwrap();
        let e = sync_error(&tr, &m, &Partition::discrete(3)).unwrap();
        assert!(e.iter().all(|v| *v == 0.0));
        assert_eq!(sync_error(&tr, &m, &Partition::single(3)).unwrap()[0], 3.0);
    }

    #[test]
    fn equilibrium_of_a_delayed_linear_pair() {
        let m = crate::model::parse_model(
            "states x z\ndelays\n T = 0.5\ndynamics\n d/dt x = -x + 1 + (z@T - x)\n d/dt z = -z - 0.5 + 2*(x@T - z)\n",
        )
        .unwrap()
        .into_system()
        .unwrap();
        // -2x + z = -1, 2x - 3z = 0.5  =>  x = 0.625, z = 0.25
        let e = equilibrium(&m, &[0.0, 0.0], 0.0).unwrap();
        assert!((e[0] - 0.625).abs() < 1e-14 && (e[1] - 0.25).abs() < 1e-14, "{e:?}");
    }
}
