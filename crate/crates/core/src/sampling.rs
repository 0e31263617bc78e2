//! Deterministic low-discrepancy sampling of state/input/time boxes.
//!
//! Points come from a Halton sequence with a fixed Cranley-Patterson shift
//! per coordinate; box corners are prepended when the sampled dimension is
//! small. Time is swept over a uniform grid of [`TIME_GRID_POINTS`] values
//! (endpoints included) for time-varying models.

use std::sync::Once;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// 64 interior points plus both endpoints.
pub const TIME_GRID_POINTS: usize = 66;
/// Corners are enumerated only up to this many sampled coordinates.
pub const MAX_CORNER_DIM: usize = 10;

const SHIFT_SEED: u64 = 0x5eed_c0de;

/// Sampling domain. `inputs[k] = None` means the input is evaluated from its
/// own expression at the sampled time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub states: Vec<(f64, f64)>,
    pub inputs: Vec<Option<(f64, f64)>>,
    pub time: (f64, f64),
}

impl SampleBox {
    /// Number of coordinates drawn from the low-discrepancy sequence.
    pub fn sampled_dim(&self) -> usize {
        self.states.len() + self.inputs.iter().filter(|r| r.is_some()).count()
    }

    fn ranges(&self) -> Vec<(f64, f64)> {
        self.states
            .iter()
            .copied()
            .chain(self.inputs.iter().flatten().copied())
            .collect()
    }
}

/// One sampled (x, u, t). Inputs without a box range are `None` and must
/// be filled in by the caller from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub x: Vec<f64>,
    pub inputs: Vec<Option<f64>>,
    pub t: f64,
}

fn primes(count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut c = 2u64;
    while out.len() < count {
        if out.iter().take_while(|&&p| p * p <= c).all(|&p| !c.is_multiple_of(p)) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let b = base as f64;
    while i > 0 {
        f /= b;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Shifted Halton points in the unit cube.
pub fn halton_points(count: usize, dim: usize) -> Vec<Vec<f64>> {
    let bases = primes(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(SHIFT_SEED);
    let shifts: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
    (1..=count as u64)
        .map(|i| {
            bases
                .iter()
                .zip(&shifts)
                .map(|(&b, s)| (radical_inverse(i, b) + s).fract())
                .collect()
        })
        .collect()
}

/// Uniform grid over `[t0, t1]`, or the single time `t0` for autonomous models.
pub fn time_grid(time: (f64, f64), time_varying: bool) -> Vec<f64> {
    if !time_varying || time.1 <= time.0 {
        return vec![time.0];
    }
    let n = TIME_GRID_POINTS - 1;
    (0..=n)
        .map(|k| time.0 + (time.1 - time.0) * k as f64 / n as f64)
        .collect()
}

/// Corner points followed by `count` shifted Halton points. The k-th point
/// gets the time `grid[k % grid.len()]`.
pub fn sample_box(b: &SampleBox, count: usize, time_varying: bool) -> Vec<SamplePoint> {
    let ranges = b.ranges();
    let dim = ranges.len();
    let mut unit: Vec<Vec<f64>> = Vec::new();
    if dim <= MAX_CORNER_DIM {
        for mask in 0..(1u64 << dim) {
            unit.push((0..dim).map(|k| ((mask >> k) & 1) as f64).collect());
        }
    }
    unit.extend(halton_points(count, dim));
    let grid = time_grid(b.time, time_varying);
    unit.into_iter()
        .enumerate()
        .map(|(k, u)| {
            let mut vals = u
                .iter()
                .zip(&ranges)
                .map(|(s, (lo, hi))| lo + s * (hi - lo));
            let x: Vec<f64> = (0..b.states.len()).map(|_| vals.next().unwrap()).collect();
            let inputs = b
                .inputs
                .iter()
                .map(|r| r.map(|_| vals.next().unwrap()))
                .collect();
            SamplePoint {
                x,
                inputs,
                t: grid[k % grid.len()],
            }
        })
        .collect()
}

/// Outcome of a sampled residual check (equivariance, flow invariance, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub samples: usize,
    pub max_residual: f64,
    pub tol: f64,
    pub pass: bool,
    pub witness: Option<SamplePoint>,
}

impl ResidualReport {
    pub fn from_max(samples: &[SamplePoint], max: Option<(f64, usize)>, tol: f64) -> ResidualReport {
        let (max_residual, witness) = match max {
            Some((v, i)) => (v, Some(samples[i].clone())),
            None => (0.0, None),
        };
        ResidualReport {
            samples: samples.len(),
            max_residual,
            tol,
            pass: max_residual <= tol,
            witness,
        }
    }
}

static POOL_INIT: Once = Once::new();

/// Cap the global rayon pool from `SYMCON_THREADS` (first call wins).
pub fn init_thread_pool() {
    POOL_INIT.call_once(|| {
        if let Some(n) = std::env::var("SYMCON_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            // Another pool may already exist (e.g. under a test harness); that is fine.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    });
}

/// Evaluate `f` at every sample in parallel and return the maximum with the
/// index of its first occurrence. The reduction runs in sample order, so the
/// result does not depend on the thread count. NaN values count as +inf.
pub fn max_over<T, E, F>(items: &[T], f: F) -> Result<Option<(f64, usize)>, (usize, E)>
where
    T: Sync,
    E: Send,
    F: Fn(&T) -> Result<f64, E> + Sync,
{
    init_thread_pool();
    let values: Vec<Result<f64, E>> = items.par_iter().map(&f).collect();
    let mut best: Option<(f64, usize)> = None;
    for (i, v) in values.into_iter().enumerate() {
        let v = v.map_err(|e| (i, e))?;
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, i));
        }
    }
    Ok(best)
}
