//! Executes a scenario: certificates first, then simulations and paired
//! (fold-change) runs, checking each against its declared expectation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use symcon_core::certify::{
    self, certify_cascade, certify_condition, certify_contraction, certify_hierarchical, certify_second_order,
    certify_toward_subspace, certify_virtual, estimate_contraction_rate, CertifyConfig, VirtualBinding,
};
use symcon_core::expr::parse_expression;
use symcon_core::measures::{MeasureKind, Norm};
use symcon_core::model::{
    coarsest_balanced_partition, quotient_system, LoadedModel, ModelKind, NetworkSpec, Partition, SystemModel,
};
use symcon_core::sampling::SampleBox;
use symcon_core::sim::{
    convergence_rate, equilibrium, fcd_experiment, h_symmetry_residual, integrate, integrate_dde, periodicity_check,
    sync_error, write_csv, write_svg_plot, FcdArm, Method, PlotSeries, SolverConfig, Trajectory,
};
use symcon_core::symmetry::{
    check_equivariance, fixed_subspace, linear_action_from_decl, synchrony_subspace, ScalingActionPair,
    SpatioTemporalAction,
};

use crate::scenario::{
    CertificateSpec, CheckSpec, Clusters, Expect, FcdSpec, MetricKind, MetricSpec, Ranges, Scenario, SimulationSpec,
    SolverSpec, X0Spec,
};

const EQUIVARIANCE_TOL: f64 = 1e-9;
const GAP_POINTS: usize = 4001;

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scenario: String,
    pub description: String,
    pub model: String,
    pub model_hash: String,
    pub seed: u64,
    pub certificates: Vec<CertificateOutcome>,
    pub simulations: Vec<SimulationOutcome>,
    pub fcd: Vec<FcdOutcome>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateOutcome {
    pub name: String,
    pub kind: String,
    pub status: String,
    pub margin: Option<f64>,
    pub expect: Option<Expect>,
    pub min_margin: Option<f64>,
    pub max_margin: Option<f64>,
    pub met: bool,
    pub detail: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationOutcome {
    pub name: String,
    pub model_hash: String,
    pub runs: usize,
    pub files: Vec<String>,
    pub metrics: Vec<MetricOutcome>,
    pub met: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricOutcome {
    pub name: String,
    pub kind: String,
    /// Worst case over runs (largest for upper-bounded metrics, smallest for rates).
    pub value: f64,
    pub per_run: Vec<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub met: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FcdRun {
    pub draws: BTreeMap<String, f64>,
    pub x0_j: Vec<f64>,
    pub shared_gap: f64,
    pub transformed_gap: f64,
    pub input_mismatch: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FcdOutcome {
    pub name: String,
    pub runs: Vec<FcdRun>,
    pub largest_gap: f64,
    pub smallest_gap: f64,
    pub max_gap: Option<f64>,
    pub min_gap: Option<f64>,
    pub met: bool,
}

/// Where run artifacts go. `None` writes nothing.
#[derive(Debug, Clone, Default)]
pub struct Output {
    pub dir: Option<PathBuf>,
}

pub fn parse_measure(text: &str, weight: Option<&Vec<Vec<f64>>>) -> Result<MeasureKind> {
    let base = Norm::parse(text).ok_or_else(|| anyhow!("unknown measure `{text}` (use 1, 2 or inf)"))?;
    match weight {
        None => Ok(MeasureKind::new(base)),
        Some(rows) => {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                bail!("weight matrix must be square");
            }
            let theta = nalgebra::DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied());
            Ok(MeasureKind::weighted(base, theta)?)
        }
    }
}

pub fn with_params(lm: &LoadedModel, params: &BTreeMap<String, f64>) -> Result<LoadedModel> {
    let mut out = lm.clone();
    for (name, v) in params {
        match &mut out.kind {
            ModelKind::System(m) => *m = m.with_param(name, *v)?,
            ModelKind::Network(n) => {
                let p = n
                    .params
                    .iter_mut()
                    .find(|p| &p.0 == name)
                    .ok_or_else(|| anyhow!("no parameter `{name}`"))?;
                p.1 = *v;
            }
        }
    }
    Ok(out)
}

/// The model's default box with the given ranges replaced. A key matches a
/// state or input exactly, or every `key_<suffix>` (network components).
pub fn box_with(m: &SystemModel, ranges: &Ranges) -> Result<SampleBox> {
    let mut b = m.default_box();
    for (key, [lo, hi]) in ranges {
        if !(lo <= hi) {
            bail!("empty range for `{key}`");
        }
        let matches = |name: &str| name == key || name.strip_prefix(key.as_str()).is_some_and(|r| r.starts_with('_'));
        let mut hit = false;
        for (i, s) in m.states.iter().enumerate() {
            if matches(s) {
                b.states[i] = (*lo, *hi);
                hit = true;
            }
        }
        for (i, u) in m.inputs.iter().enumerate() {
            if matches(&u.name) {
                b.inputs[i] = Some((*lo, *hi));
                hit = true;
            }
        }
        if key == "t" {
            b.time = (*lo, *hi);
            hit = true;
        }
        if !hit {
            bail!("box entry `{key}` names no state or input of {}", m.name);
        }
    }
    Ok(b)
}

pub fn partition_of(ids: &[String], clusters: &Clusters) -> Result<Partition> {
    let mut idx = Vec::with_capacity(clusters.len());
    for c in clusters {
        let mut members = Vec::with_capacity(c.len());
        for id in c {
            members.push(
                ids.iter()
                    .position(|n| n == id)
                    .ok_or_else(|| anyhow!("no node `{id}`"))?,
            );
        }
        idx.push(members);
    }
    Ok(Partition::from_clusters(ids.len(), &idx)?)
}

fn node_ids(m: &SystemModel) -> Vec<String> {
    m.nodes.iter().map(|n| n.id.clone()).collect()
}

fn network<'a>(lm: &'a LoadedModel, what: &str) -> Result<&'a NetworkSpec> {
    lm.network().ok_or_else(|| anyhow!("{what} needs a network model"))
}

pub fn cluster_names(spec_ids: &[String], p: &Partition) -> Clusters {
    p.clusters()
        .into_iter()
        .map(|c| c.into_iter().map(|k| spec_ids[k].clone()).collect())
        .collect()
}

fn same_clusters(a: &Clusters, b: &Clusters) -> bool {
    let norm = |c: &Clusters| {
        let mut v: Vec<Vec<String>> = c
            .iter()
            .map(|x| {
                let mut x = x.clone();
                x.sort();
                x
            })
            .collect();
        v.sort();
        v
    };
    norm(a) == norm(b)
}

struct Issued {
    kind: &'static str,
    passed: bool,
    margin: Option<f64>,
    detail: Value,
}

fn issue(scn: &Scenario, spec: &CertificateSpec, cfg: &CertifyConfig) -> Result<Issued> {
    let base = scn.resolve_model(spec.model.as_deref().unwrap_or(&scn.model))?;
    let lm = with_params(&base, &scoped_params(&base, &scn.params, &spec.params))?;
    Ok(match &spec.check {
        CheckSpec::Contraction {
            measure,
            weight,
            domain,
            quotient,
        } => {
            let kind = parse_measure(measure, weight.as_ref())?;
            let m = match quotient {
                None => lm.system()?,
                Some(clusters) => {
                    let spec = network(&lm, "a quotient")?;
                    let ids: Vec<String> = spec.nodes.iter().map(|n| n.id.clone()).collect();
                    quotient_system(spec, &partition_of(&ids, clusters)?)?
                }
            };
            let c = certify_contraction(&m, &box_with(&m, domain)?, &kind, cfg)?;
            Issued {
                kind: "contraction",
                passed: c.status.passed(),
                margin: Some(c.margin),
                detail: serde_json::to_value(&c)?,
            }
        }
        CheckSpec::Toward {
            measure,
            weight,
            domain,
            action,
            partition,
        } => {
            let kind = parse_measure(measure, weight.as_ref())?;
            let m = lm.system()?;
            let s = match (action, partition) {
                (Some(a), None) => {
                    let decl = lm.action(a).ok_or_else(|| anyhow!("no action `{a}`"))?;
                    fixed_subspace(&linear_action_from_decl(&m, decl)?)
                }
                (None, Some(p)) => synchrony_subspace(&m, &partition_of(&node_ids(&m), p)?)?,
                _ => bail!("give exactly one of `action` or `partition`"),
            };
            let c = certify_toward_subspace(&m, &s, &box_with(&m, domain)?, &kind, cfg)?;
            Issued {
                kind: "toward",
                passed: c.status.passed(),
                margin: Some(c.margin),
                detail: serde_json::to_value(&c)?,
            }
        }
        CheckSpec::Cascade {
            measure,
            partitions,
            range,
        } => {
            let kind = parse_measure(measure, None)?;
            let spec = network(&lm, "a cascade")?;
            let ids: Vec<String> = spec.nodes.iter().map(|n| n.id.clone()).collect();
            let parts = partitions
                .iter()
                .map(|p| partition_of(&ids, p))
                .collect::<Result<Vec<_>>>()?;
            let c = certify_cascade(spec, &parts, &kind, cfg, range.map(|[a, b]| (a, b)))?;
            let margin = c.stages.iter().map(|s| s.certificate.margin).reduce(f64::min);
            Issued {
                kind: "cascade",
                passed: c.status.passed(),
                margin,
                detail: serde_json::to_value(&c)?,
            }
        }
        CheckSpec::Hierarchical {
            groups,
            measures,
            domain,
            off_diagonal_bound,
        } => {
            let kinds = measures
                .iter()
                .map(|k| if k == "skip" { Ok(None) } else { parse_measure(k, None).map(Some) })
                .collect::<Result<Vec<_>>>()?;
            let m = lm.system()?;
            let c = certify_hierarchical(&m, groups, &kinds, &box_with(&m, domain)?, cfg, *off_diagonal_bound)?;
            let margin = c.blocks.iter().flatten().map(|b| b.margin).reduce(f64::min);
            Issued {
                kind: "hierarchical",
                passed: c.status.passed(),
                margin,
                detail: serde_json::to_value(&c)?,
            }
        }
        CheckSpec::SecondOrder { eps, phi, x, u } => {
            let phi = parse_expression(phi)?;
            let c = certify_second_order(*eps, &phi, (x[0], x[1]), (u[0], u[1]), cfg)?;
            Issued {
                kind: "second-order",
                passed: c.status.passed(),
                margin: Some(c.margin),
                detail: serde_json::to_value(&c)?,
            }
        }
        CheckSpec::Virtual {
            virtual_model,
            copies,
            measure,
            domain,
            virtual_box,
        } => {
            let kind = parse_measure(measure, None)?;
            let real = lm.system()?;
            let vlm = scn.resolve_model(virtual_model)?;
            let v = with_params(&vlm, &params_known(&vlm, &scn.params))?.system()?;
            let copies = copies
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|s| real.state_index(s).ok_or_else(|| anyhow!("no state `{s}`")))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let c = certify_virtual(
                &v,
                &real,
                &VirtualBinding { copies },
                &box_with(&real, domain)?,
                &box_with(&v, virtual_box)?,
                &kind,
                cfg,
            )?;
            Issued {
                kind: "virtual",
                passed: c.status.passed(),
                margin: Some(c.contraction.margin),
                detail: serde_json::to_value(&c)?,
            }
        }
        CheckSpec::Condition {
            condition,
            ranges,
            values,
        } => {
            let e = parse_expression(condition)?;
            let ranges: Vec<(String, (f64, f64))> = ranges.iter().map(|(k, [a, b])| (k.clone(), (*a, *b))).collect();
            let mut vals: BTreeMap<String, f64> = match &lm.kind {
                ModelKind::System(m) => m.params.iter().cloned().collect(),
                ModelKind::Network(n) => n.params.iter().cloned().collect(),
            };
            vals.extend(values.clone());
            let vals: Vec<(String, f64)> = vals
                .into_iter()
                .filter(|(k, _)| e.free_vars().contains(k) && !ranges.iter().any(|r| &r.0 == k))
                .collect();
            let c = certify_condition(&e, &ranges, &vals, cfg)?;
            Issued {
                kind: "condition",
                passed: c.status.passed(),
                margin: Some(c.margin),
                detail: serde_json::to_value(&c)?,
            }
        }
        CheckSpec::Partition { clusters } => {
            let spec = network(&lm, "a partition")?;
            let ids: Vec<String> = spec.nodes.iter().map(|n| n.id.clone()).collect();
            let got = cluster_names(&ids, &coarsest_balanced_partition(spec, None));
            Issued {
                kind: "partition",
                passed: same_clusters(&got, clusters),
                margin: None,
                detail: serde_json::json!({ "coarsest": got, "expected": clusters }),
            }
        }
        CheckSpec::Equivariance { action, tol } => {
            let m = lm.system()?;
            let decl = lm.action(action).ok_or_else(|| anyhow!("no action `{action}`"))?;
            let g = linear_action_from_decl(&m, decl)?;
            let r = check_equivariance(&m, &g, &m.default_box(), cfg.samples, tol.unwrap_or(EQUIVARIANCE_TOL))?;
            Issued {
                kind: "equivariance",
                passed: r.pass,
                margin: None,
                detail: serde_json::to_value(&r)?,
            }
        }
    })
}

/// Scenario-wide parameters the model declares, then the entry's own
/// overrides (which must all exist).
fn scoped_params(
    lm: &LoadedModel,
    scenario: &BTreeMap<String, f64>,
    own: &BTreeMap<String, f64>,
) -> BTreeMap<String, f64> {
    let mut out = params_known(lm, scenario);
    out.extend(own.clone());
    out
}

/// Scenario parameters that the model also declares.
fn params_known(lm: &LoadedModel, params: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let has = |name: &str| match &lm.kind {
        ModelKind::System(m) => m.param_index(name).is_some(),
        ModelKind::Network(n) => n.params.iter().any(|p| p.0 == name),
    };
    params.iter().filter(|(k, _)| has(k)).map(|(k, v)| (k.clone(), *v)).collect()
}

fn certificate_outcome(scn: &Scenario, spec: &CertificateSpec, cfg: &CertifyConfig) -> Result<CertificateOutcome> {
    let issued = issue(scn, spec, cfg).with_context(|| format!("certificate `{}`", spec.name))?;
    let mut met = match spec.expect {
        Some(Expect::Pass) => issued.passed,
        Some(Expect::Fail) => !issued.passed,
        None => true,
    };
    if let (Some(lo), Some(m)) = (spec.min_margin, issued.margin) {
        met &= m >= lo;
    }
    if let (Some(hi), Some(m)) = (spec.max_margin, issued.margin) {
        met &= m <= hi;
    }
    Ok(CertificateOutcome {
        name: spec.name.clone(),
        kind: issued.kind.into(),
        status: if issued.passed { "pass" } else { "fail" }.into(),
        margin: issued.margin,
        expect: spec.expect,
        min_margin: spec.min_margin,
        max_margin: spec.max_margin,
        met,
        detail: issued.detail,
    })
}

pub fn solver_config(s: &SolverSpec, horizon: f64) -> Result<SolverConfig> {
    let method = match s.method.as_str() {
        "rk45" | "dopri5" => Method::Rk45 {
            rtol: s.rtol,
            atol: s.atol,
            dt_max: s.dt_max,
        },
        "rk4" => Method::Rk4 { dt: s.dt },
        other => bail!("unknown method `{other}` (use rk45 or rk4)"),
    };
    Ok(SolverConfig {
        method,
        t0: 0.0,
        t_end: horizon,
        ramps: Vec::new(),
    })
}

pub fn initial_states(x0: &X0Spec, m: &SystemModel, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if let Some(v) = &x0.values {
        if v.len() != m.dim() {
            bail!("x0 has {} values, model has {} states", v.len(), m.dim());
        }
        return Ok(vec![v.clone()]);
    }
    let count = x0.count.unwrap_or(1);
    let ranges: Vec<(f64, f64)> = match x0.random {
        Some([a, b]) => vec![(a, b); m.dim()],
        None => m.default_box().states,
    };
    Ok((0..count)
        .map(|_| ranges.iter().map(|(a, b)| if a < b { rng.gen_range(*a..*b) } else { *a }).collect())
        .collect())
}

/// One trajectory; delayed models use the method of steps with constant history.
pub fn simulate(m: &SystemModel, x0: &[f64], cfg: &SolverConfig) -> Result<Trajectory> {
    if m.is_delayed() {
        let mut cfg = cfg.clone();
        if let Method::Rk45 { dt_max, .. } = cfg.method {
            cfg.method = Method::Rk4 { dt: dt_max.min(0.01) };
        }
        let x0 = x0.to_vec();
        Ok(integrate_dde(m, &move |_| x0.clone(), &cfg)?)
    } else {
        Ok(integrate(m, x0, cfg)?)
    }
}

/// The trajectory's states at its grid points inside `[a, b]` plus the two ends.
fn window_points(traj: &Trajectory, a: f64, b: f64) -> Result<Vec<(f64, Vec<f64>)>> {
    let (a, b) = (a.max(traj.t0()), b.min(traj.t_end()));
    if a > b {
        bail!("window [{a}, {b}] lies outside the run");
    }
    let mut out: Vec<(f64, Vec<f64>)> = traj
        .times
        .iter()
        .zip(&traj.states)
        .filter(|(t, _)| **t >= a && **t <= b)
        .map(|(t, x)| (*t, x.clone()))
        .collect();
    out.push((a, traj.at(a).expect("inside")));
    out.push((b, traj.at(b).expect("inside")));
    Ok(out)
}

fn points_trajectory(traj: &Trajectory, pts: Vec<(f64, Vec<f64>)>) -> Trajectory {
    let (times, states) = pts.into_iter().unzip();
    Trajectory {
        names: traj.names.clone(),
        times,
        states,
        segments: Vec::new(),
        model_hash: traj.model_hash.clone(),
    }
}

struct MetricContext<'a> {
    lm: &'a LoadedModel,
    m: &'a SystemModel,
    runs: &'a [Trajectory],
    certificates: &'a [CertificateOutcome],
}

fn metric_label(k: &MetricKind) -> &'static str {
    match k {
        MetricKind::Sync { .. } => "sync",
        MetricKind::SyncRate { .. } => "sync-rate",
        MetricKind::Rate { .. } => "rate",
        MetricKind::Period { .. } => "period",
        MetricKind::Hsym { .. } => "hsym",
        MetricKind::Value { .. } => "value",
        MetricKind::Equilibrium => "equilibrium",
    }
}

fn evaluate_metric(ctx: &MetricContext<'_>, spec: &MetricSpec) -> Result<MetricOutcome> {
    let m = ctx.m;
    let lower_is_worse = matches!(spec.kind, MetricKind::SyncRate { .. } | MetricKind::Rate { .. });
    let per_run: Vec<f64> = match &spec.kind {
        MetricKind::Sync { partition, window } => {
            let p = partition_of(&node_ids(m), partition)?;
            ctx.runs
                .iter()
                .map(|tr| {
                    let pts = points_trajectory(tr, window_points(tr, window[0], window[1])?);
                    Ok(sync_error(&pts, m, &p)?.into_iter().fold(0.0f64, f64::max))
                })
                .collect::<Result<_>>()?
        }
        MetricKind::SyncRate { partition, window } => {
            let p = partition_of(&node_ids(m), partition)?;
            ctx.runs
                .iter()
                .map(|tr| {
                    let e = sync_error(tr, m, &p)?;
                    Ok(convergence_rate(&tr.times, &e, (window[0], window[1]))?.rate)
                })
                .collect::<Result<_>>()?
        }
        MetricKind::Rate { window } => {
            if ctx.runs.len() < 2 {
                bail!("a rate needs at least two runs");
            }
            ctx.runs
                .windows(2)
                .map(|w| Ok(estimate_contraction_rate(&w[0], &w[1], (window[0], window[1]))?.rate))
                .collect::<Result<_>>()?
        }
        MetricKind::Period { period, tail } => ctx
            .runs
            .iter()
            .map(|tr| Ok(periodicity_check(tr, *period, *tail)?))
            .collect::<Result<_>>()?,
        MetricKind::Hsym { action, shift, after } => {
            let decl = ctx.lm.action(action).ok_or_else(|| anyhow!("no action `{action}`"))?;
            let a = SpatioTemporalAction {
                action: linear_action_from_decl(m, decl)?,
                shift: *shift,
            };
            ctx.runs
                .iter()
                .map(|tr| {
                    Ok(h_symmetry_residual(tr, &a)?
                        .into_iter()
                        .filter(|(t, _)| t >= after)
                        .fold(0.0f64, |acc, (_, r)| acc.max(r)))
                })
                .collect::<Result<_>>()?
        }
        MetricKind::Value { state, target, window } => {
            let k = m.state_index(state).ok_or_else(|| anyhow!("no state `{state}`"))?;
            ctx.runs
                .iter()
                .map(|tr| {
                    Ok(window_points(tr, window[0], window[1])?
                        .iter()
                        .fold(0.0f64, |acc, (_, x)| acc.max((x[k] - target).abs())))
                })
                .collect::<Result<_>>()?
        }
        MetricKind::Equilibrium => ctx
            .runs
            .iter()
            .map(|tr| {
                let xf = tr.final_state();
                let eq = equilibrium(m, xf, tr.t_end())?;
                Ok(xf.iter().zip(&eq).fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs())))
            })
            .collect::<Result<_>>()?,
    };
    let value = if lower_is_worse {
        per_run.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        per_run.iter().copied().fold(0.0f64, f64::max)
    };
    let mut min = spec.min;
    if let Some(name) = &spec.min_from_certificate {
        let c = ctx
            .certificates
            .iter()
            .find(|c| &c.name == name)
            .ok_or_else(|| anyhow!("no certificate `{name}` to take a bound from"))?;
        let margin = c.margin.ok_or_else(|| anyhow!("certificate `{name}` has no margin"))?;
        min = Some(min.map_or(margin - spec.slack, |v: f64| v.max(margin - spec.slack)));
    }
    let met = value.is_finite() && min.is_none_or(|lo| value >= lo) && spec.max.is_none_or(|hi| value <= hi);
    Ok(MetricOutcome {
        name: spec.name.clone().unwrap_or_else(|| metric_label(&spec.kind).into()),
        kind: metric_label(&spec.kind).into(),
        value,
        per_run,
        min,
        max: spec.max,
        met,
    })
}

fn run_simulation(
    scn: &Scenario,
    spec: &SimulationSpec,
    index: usize,
    certificates: &[CertificateOutcome],
    out: &Output,
) -> Result<SimulationOutcome> {
    let base = scn.resolve_model(spec.model.as_deref().unwrap_or(&scn.model))?;
    let lm = with_params(&base, &scoped_params(&base, &scn.params, &spec.params))?;
    let mut m = lm.system()?;
    for (name, v) in &spec.delays {
        m = m.with_delay(name, *v)?;
    }
    for (name, signal) in &spec.inputs {
        m = m.with_input(name, signal)?;
    }
    let cfg = solver_config(&spec.solver, spec.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed.wrapping_add(index as u64));
    let x0s = initial_states(&spec.x0, &m, &mut rng)?;
    let runs = x0s
        .par_iter()
        .map(|x0| simulate(&m, x0, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let ctx = MetricContext {
        lm: &lm,
        m: &m,
        runs: &runs,
        certificates,
    };
    let metrics = spec
        .metrics
        .iter()
        .map(|s| evaluate_metric(&ctx, s).with_context(|| format!("metric `{}`", metric_label(&s.kind))))
        .collect::<Result<Vec<_>>>()?;
    let files = match &out.dir {
        Some(dir) => write_artifacts(dir, spec, &m, &runs)?,
        None => Vec::new(),
    };
    Ok(SimulationOutcome {
        name: spec.name.clone(),
        model_hash: m.model_hash(),
        runs: runs.len(),
        files,
        met: metrics.iter().all(|x| x.met),
        metrics,
    })
}

fn write_artifacts(dir: &Path, spec: &SimulationSpec, m: &SystemModel, runs: &[Trajectory]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    if spec.csv {
        for (k, tr) in runs.iter().enumerate() {
            let name = format!("{}-{k}.csv", spec.name);
            write_csv(tr, &dir.join(&name))?;
            files.push(name);
        }
    }
    if let Some(tr) = runs.first() {
        let series: Vec<PlotSeries> = tr
            .names
            .iter()
            .enumerate()
            .take(16)
            .map(|(i, n)| PlotSeries {
                label: n.clone(),
                points: tr.resample(1500).into_iter().map(|(t, x)| (t, x[i])).collect(),
            })
            .collect();
        let name = format!("{}.svg", spec.name);
        write_svg_plot(&dir.join(&name), &spec.name, &series, false)?;
        files.push(name);
        for (k, metric) in spec.metrics.iter().enumerate() {
            if let MetricKind::Sync { partition, .. } | MetricKind::SyncRate { partition, .. } = &metric.kind {
                let p = partition_of(&node_ids(m), partition)?;
                let e = sync_error(tr, m, &p)?;
                let s = PlotSeries {
                    label: "sync error".into(),
                    points: tr.times.iter().copied().zip(e).collect(),
                };
                let name = format!("{}-sync-{k}.svg", spec.name);
                write_svg_plot(&dir.join(&name), &format!("{} sync error", spec.name), &[s], true)?;
                files.push(name);
            }
        }
    }
    Ok(files)
}

fn substitute_draws(text: &str, draws: &BTreeMap<String, f64>) -> String {
    let mut s = text.to_string();
    for (k, v) in draws {
        s = s.replace(&format!("{{{k}}}"), &format!("({v:?})"));
    }
    s
}

fn run_fcd(scn: &Scenario, spec: &FcdSpec, index: usize) -> Result<FcdOutcome> {
    let base = scn.resolve_model(spec.model.as_deref().unwrap_or(&scn.model))?;
    let lm = with_params(&base, &scoped_params(&base, &scn.params, &BTreeMap::new()))?;
    let m = lm.system()?;
    let decl = lm.action(&spec.action).ok_or_else(|| anyhow!("no action `{}`", spec.action))?;
    let pair = |p: &BTreeMap<String, f64>| -> Result<ScalingActionPair> {
        let over: Vec<(&str, f64)> = p.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        Ok(ScalingActionPair::from_decl(&m, decl, &over)?)
    };
    let (pair_i, pair_j) = (pair(&spec.params_i)?, pair(&spec.params_j)?);
    let cfg = solver_config(&spec.solver, spec.horizon)?;
    let shared: Vec<&str> = spec.shared.iter().map(String::as_str).collect();
    let shared_idx = spec
        .shared
        .iter()
        .map(|s| m.state_index(s).ok_or_else(|| anyhow!("no state `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed.wrapping_add(1000 + index as u64));
    let draws: Vec<BTreeMap<String, f64>> = (0..spec.count)
        .map(|_| {
            spec.draws
                .iter()
                .map(|(k, [a, b])| (k.clone(), if a < b { rng.gen_range(*a..*b) } else { *a }))
                .collect()
        })
        .collect();
    let runs = draws
        .par_iter()
        .map(|d| {
            let arm = |inputs: &BTreeMap<String, String>, pair: &ScalingActionPair| -> Result<FcdArm> {
                Ok(FcdArm {
                    pair: pair.clone(),
                    inputs: inputs
                        .iter()
                        .map(|(k, v)| Ok((k.clone(), parse_expression(&substitute_draws(v, d))?)))
                        .collect::<Result<_>>()?,
                })
            };
            let (ai, aj) = (arm(&spec.inputs_i, &pair_i)?, arm(&spec.inputs_j, &pair_j)?);
            let r = fcd_experiment(&m, &ai, &aj, &shared, &spec.x0, &cfg, spec.enforce_input_match)?;
            let shared_gap = match spec.window {
                None => r.shared_gap,
                Some([a, b]) => {
                    let (a, b) = (a.max(cfg.t0), b.min(cfg.t_end));
                    let mut gap = 0.0f64;
                    let grid = (0..GAP_POINTS).map(|k| a + (b - a) * k as f64 / (GAP_POINTS - 1) as f64);
                    let steps = r.traj_i.times.iter().copied().filter(|t| *t >= a && *t <= b);
                    for t in grid.chain(steps) {
                        let (xi, xj) = (r.traj_i.at(t).expect("inside"), r.traj_j.at(t).expect("inside"));
                        for &k in &shared_idx {
                            gap = gap.max((xi[k] - xj[k]).abs());
                        }
                    }
                    gap
                }
            };
            Ok(FcdRun {
                draws: d.clone(),
                x0_j: r.x0_j,
                shared_gap,
                transformed_gap: r.transformed_gap,
                input_mismatch: r.input_mismatch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let largest_gap = runs.iter().map(|r| r.shared_gap).fold(0.0f64, f64::max);
    let smallest_gap = runs.iter().map(|r| r.shared_gap).fold(f64::INFINITY, f64::min);
    let met = largest_gap.is_finite()
        && spec.max_gap.is_none_or(|hi| largest_gap <= hi)
        && spec.min_gap.is_none_or(|lo| smallest_gap >= lo);
    Ok(FcdOutcome {
        name: spec.name.clone(),
        runs,
        largest_gap,
        smallest_gap,
        max_gap: spec.max_gap,
        min_gap: spec.min_gap,
        met,
    })
}

/// Certificates, then simulations and paired runs. Module errors are
/// returned with the failing stage; unmet expectations are reported in
/// `Report::passed`.
pub fn run_scenario(scn: &Scenario, out: &Output) -> Result<Report> {
    let lm = with_params(&scn.resolve_model(&scn.model)?, &scn.params)?;
    let main = lm.system()?;
    let cfg = CertifyConfig::default().with_samples(scn.samples.unwrap_or(certify::DEFAULT_SAMPLES));
    let certificates = scn
        .certificates
        .par_iter()
        .map(|c| certificate_outcome(scn, c, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let simulations = scn
        .simulations
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let dir = out.dir.as_ref().map(|d| d.to_path_buf());
            run_simulation(scn, s, i, &certificates, &Output { dir })
                .with_context(|| format!("simulation `{}`", s.name))
        })
        .collect::<Result<Vec<_>>>()?;
    let fcd = scn
        .fcd
        .iter()
        .enumerate()
        .map(|(i, f)| run_fcd(scn, f, i).with_context(|| format!("fcd `{}`", f.name)))
        .collect::<Result<Vec<_>>>()?;
    let passed = certificates.iter().all(|c| c.met) && simulations.iter().all(|s| s.met) && fcd.iter().all(|f| f.met);
    let report = Report {
        scenario: scn.name.clone(),
        description: scn.description.clone(),
        model: scn.model.clone(),
        model_hash: main.model_hash(),
        seed: scn.seed,
        certificates,
        simulations,
        fcd,
        passed,
    };
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(report)
}
