//! Sampled contraction certificates.
//!
//! Every certificate is evidence, not proof: the measure of the (projected)
//! Jacobian is maximised over a finite sample of the box, and the verdict
//! records the sample count, the box and the point where the maximum was
//! attained so the result can be re-checked or falsified.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{differentiate, EvalError, Expr, MapEnv, SlotEnv};
use crate::measures::{induced_norm, matrix_measure, MeasureError, MeasureKind, Norm};
use crate::model::{check_flow_invariance, ModelError, NetworkSpec, Partition, SymbolicJacobian, SystemModel};
use crate::sampling::{max_over, sample_box, ResidualReport, SampleBox, SamplePoint};
use crate::sim::{convergence_rate, RateFit, SimError, Trajectory};
use crate::symmetry::{synchrony_subspace, Subspace, SymmetryError};

/// Default required margin: pass iff `max_mu ≤ −1e-6`.
pub const DEFAULT_LAMBDA_MIN: f64 = 1e-6;
/// Default number of interior samples (corners are added on top).
pub const DEFAULT_SAMPLES: usize = 2000;
/// Consistency tolerance for virtual systems.
pub const VIRTUAL_TOL: f64 = 1e-10;
/// Flow-invariance tolerance used by cascades, relative to the box scale.
pub const INVARIANCE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("Jacobian evaluation failed at x = {x:?}, t = {t}: {source}")]
    Jacobian { x: Vec<f64>, t: f64, source: ModelError },
    #[error("grouping is not block triangular: {0}")]
    Grouping(String),
    #[error("subspaces are not strictly nested: {0}")]
    Nesting(String),
    #[error("{0}")]
    Shape(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub samples: usize,
    pub lambda_min: f64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            samples: DEFAULT_SAMPLES,
            lambda_min: DEFAULT_LAMBDA_MIN,
        }
    }
}

impl CertifyConfig {
    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

impl Status {
    pub fn from_bool(ok: bool) -> Status {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Status::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Target {
    Full,
    TowardSubspace {
        /// Rows of `V`, an orthonormal basis of the subspace's complement.
        complement: Vec<Vec<f64>>,
    },
    Block {
        index: usize,
        states: Vec<String>,
    },
    SecondOrder,
    Virtual,
}

/// Verdict of a sampled measure bound. `margin = −max_mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionCertificate {
    pub target: Target,
    pub measure: String,
    pub weight: Option<Vec<Vec<f64>>>,
    pub method: String,
    #[serde(rename = "box")]
    pub domain: SampleBox,
    pub samples: usize,
    pub max_mu: f64,
    pub margin: f64,
    pub lambda_min: f64,
    pub status: Status,
    pub witness: Option<SamplePoint>,
    pub model_hash: String,
}

impl ContractionCertificate {
    pub fn passed(&self) -> bool {
        self.status.passed()
    }

    /// Recompute the measure at the stored witness.
    pub fn reevaluate(&self, m: &SystemModel, kind: &MeasureKind) -> Result<f64, CertifyError> {
        let w = self
            .witness
            .as_ref()
            .ok_or_else(|| CertifyError::Shape("certificate has no witness".into()))?;
        let jac = m.jacobian()?;
        let j = jacobian_at(m, &jac, w)?;
        let a = match &self.target {
            Target::TowardSubspace { complement } => project(&rows_to_matrix(complement, m.dim()), &j),
            Target::Block { states, .. } => {
                let idx = state_indices(m, states)?;
                block(&j, &idx, &idx)
            }
            _ => j,
        };
        Ok(matrix_measure(&a, kind)?)
    }
}

fn matrix_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j])
}

fn project(v: &DMatrix<f64>, j: &DMatrix<f64>) -> DMatrix<f64> {
    v * j * v.transpose()
}

fn block(j: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| j[(rows[r], cols[c])])
}

fn state_indices(m: &SystemModel, names: &[String]) -> Result<Vec<usize>, CertifyError> {
    names
        .iter()
        .map(|s| {
            m.state_index(s)
                .ok_or_else(|| CertifyError::Grouping(format!("`{s}` is not a state")))
        })
        .collect()
}

/// Numeric Jacobian at a sampled point (inputs filled from the model).
pub fn jacobian_at(m: &SystemModel, jac: &SymbolicJacobian, pt: &SamplePoint) -> Result<DMatrix<f64>, CertifyError> {
    let params = m.param_values();
    let fail = |source: ModelError| CertifyError::Jacobian {
        x: pt.x.clone(),
        t: pt.t,
        source,
    };
    let u = m.resolve_sampled_inputs(&pt.inputs, pt.t, &params).map_err(fail)?;
    let j = jac
        .eval(&SlotEnv {
            states: &pt.x,
            params: &params,
            inputs: &u,
            t: pt.t,
            history: None,
        })
        .map_err(|e| fail(ModelError::Eval(e)))?;
    if let Some(bad) = j.iter().find(|v| !v.is_finite()) {
        return Err(fail(ModelError::Invalid(format!("Jacobian entry {bad}"))));
    }
    Ok(j)
}

fn check_box(m: &SystemModel, b: &SampleBox) -> Result<(), CertifyError> {
    if b.states.len() != m.dim() || b.inputs.len() != m.inputs.len() {
        return Err(CertifyError::Dimension(format!(
            "box covers {} states and {} inputs, model has {} and {}",
            b.states.len(),
            b.inputs.len(),
            m.dim(),
            m.inputs.len()
        )));
    }
    Ok(())
}

fn weight_rows(kind: &MeasureKind) -> Option<Vec<Vec<f64>>> {
    kind.weight().map(matrix_rows)
}

/// Shared driver: maximise `μ(map(J))` over the box samples.
fn sampled_certificate(
    m: &SystemModel,
    b: &SampleBox,
    kind: &MeasureKind,
    cfg: &CertifyConfig,
    target: Target,
    map: &(dyn Fn(DMatrix<f64>) -> DMatrix<f64> + Sync),
) -> Result<ContractionCertificate, CertifyError> {
    check_box(m, b)?;
    let jac = m.jacobian()?;
    let pts = sample_box(b, cfg.samples, m.is_time_varying());
    let best = max_over(&pts, |pt| -> Result<f64, CertifyError> {
        let j = jacobian_at(m, &jac, pt)?;
        Ok(matrix_measure(&map(j), kind)?)
    })
    .map_err(|(_, e)| e)?;
    let (max_mu, witness) = match best {
        Some((v, i)) => (v, Some(pts[i].clone())),
        None => (f64::NEG_INFINITY, None),
    };
    Ok(ContractionCertificate {
        target,
        measure: kind.label(),
        weight: weight_rows(kind),
        method: "sampled".into(),
        domain: b.clone(),
        samples: pts.len(),
        max_mu,
        margin: -max_mu,
        lambda_min: cfg.lambda_min,
        status: Status::from_bool(max_mu <= -cfg.lambda_min),
        witness,
        model_hash: m.model_hash(),
    })
}

/// `max μ(J(x,t))` over the box.
pub fn certify_contraction(
    m: &SystemModel,
    b: &SampleBox,
    kind: &MeasureKind,
    cfg: &CertifyConfig,
) -> Result<ContractionCertificate, CertifyError> {
    sampled_certificate(m, b, kind, cfg, Target::Full, &|j| j)
}

/// `max μ(V J(x,t) Vᵀ)` over the box, `V` the complement rows of `s`.
pub fn certify_toward_subspace(
    m: &SystemModel,
    s: &Subspace,
    b: &SampleBox,
    kind: &MeasureKind,
    cfg: &CertifyConfig,
) -> Result<ContractionCertificate, CertifyError> {
    if s.ambient() != m.dim() {
        return Err(CertifyError::Dimension(format!(
            "subspace in dimension {}, model has {} states",
            s.ambient(),
            m.dim()
        )));
    }
    if s.complement.nrows() == 0 {
        return Err(CertifyError::Shape("the subspace is the whole space; V is empty".into()));
    }
    let v = s.complement.clone();
    let target = Target::TowardSubspace {
        complement: matrix_rows(&v),
    };
    sampled_certificate(m, b, kind, cfg, target, &|j| project(&v, &j))
}

/// Diagonal-block certificates plus sampled off-diagonal coupling bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchicalCertificate {
    /// `lower` when blocks only feed later blocks, `upper` otherwise.
    pub orientation: String,
    /// `None` for blocks whose contraction is established by another
    /// argument (e.g. a sampled analytic condition).
    pub blocks: Vec<Option<ContractionCertificate>>,
    /// `(i, j, sup ||J_ij||_2)` for every structurally nonzero off-diagonal block.
    pub off_diagonal: Vec<(usize, usize, f64)>,
    pub off_diagonal_bound: Option<f64>,
    pub status: Status,
}

/// Certify a block-triangular system block by block. `groups` must
/// partition the states; `kinds[i]` is the measure for block `i`, or `None`
/// to check only the structure and coupling bounds for that block.
pub fn certify_hierarchical(
    m: &SystemModel,
    groups: &[Vec<String>],
    kinds: &[Option<MeasureKind>],
    b: &SampleBox,
    cfg: &CertifyConfig,
    off_diagonal_bound: Option<f64>,
) -> Result<HierarchicalCertificate, CertifyError> {
    if kinds.len() != groups.len() {
        return Err(CertifyError::Grouping(format!(
            "{} groups but {} measures",
            groups.len(),
            kinds.len()
        )));
    }
    let idx: Vec<Vec<usize>> = groups.iter().map(|g| state_indices(m, g)).collect::<Result<_, _>>()?;
    let mut seen = vec![false; m.dim()];
    for &i in idx.iter().flatten() {
        if std::mem::replace(&mut seen[i], true) {
            return Err(CertifyError::Grouping(format!("`{}` is in two groups", m.states[i])));
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(CertifyError::Grouping(format!("`{}` is in no group", m.states[i])));
    }
    let jac = m.jacobian()?;
    let zero_block = |a: usize, c: usize| idx[a].iter().all(|&r| idx[c].iter().all(|&s| jac.is_structural_zero(r, s)));
    let pairs: Vec<(usize, usize)> = (0..idx.len())
        .flat_map(|a| (0..idx.len()).filter(move |&c| c != a).map(move |c| (a, c)))
        .collect();
    let lower = pairs.iter().filter(|(a, c)| a < c).all(|&(a, c)| zero_block(a, c));
    let upper = pairs.iter().filter(|(a, c)| a > c).all(|&(a, c)| zero_block(a, c));
    if !lower && !upper {
        return Err(CertifyError::Grouping(
            "both strictly upper and strictly lower blocks of the Jacobian are nonzero".into(),
        ));
    }

    let mut blocks = Vec::new();
    for (k, (rows, kind)) in idx.iter().zip(kinds).enumerate() {
        let Some(kind) = kind else {
            blocks.push(None);
            continue;
        };
        let rows = rows.clone();
        let target = Target::Block {
            index: k,
            states: groups[k].clone(),
        };
        blocks.push(Some(sampled_certificate(m, b, kind, cfg, target, &move |j| {
            block(&j, &rows, &rows)
        })?));
    }

    check_box(m, b)?;
    let pts = sample_box(b, cfg.samples, m.is_time_varying());
    let mut off = Vec::new();
    for &(a, c) in pairs.iter().filter(|&&(a, c)| !zero_block(a, c)) {
        let sup = max_over(&pts, |pt| -> Result<f64, CertifyError> {
            let j = jacobian_at(m, &jac, pt)?;
            Ok(induced_norm(&block(&j, &idx[a], &idx[c]), Norm::Two))
        })
        .map_err(|(_, e)| e)?
        .map_or(0.0, |(v, _)| v);
        off.push((a, c, sup));
    }
    let bounded = off
        .iter()
        .all(|(_, _, s)| s.is_finite() && off_diagonal_bound.is_none_or(|bnd| *s <= bnd));
    let ok = bounded && blocks.iter().flatten().all(ContractionCertificate::passed);
    Ok(HierarchicalCertificate {
        orientation: if lower { "lower" } else { "upper" }.into(),
        blocks,
        off_diagonal: off,
        off_diagonal_bound,
        status: Status::from_bool(ok),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeStage {
    /// Model certified at this stage (the full network, then quotients).
    pub model: String,
    pub clusters_from: Vec<Vec<String>>,
    pub clusters_to: Vec<Vec<String>>,
    pub subspace_dim: usize,
    pub invariance: ResidualReport,
    pub certificate: ContractionCertificate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeCertificate {
    pub stages: Vec<CascadeStage>,
    /// First failing stage (0-based), if any.
    pub failed_stage: Option<usize>,
    pub status: Status,
}

fn member_ids(spec: &NetworkSpec, groups: &[Vec<usize>]) -> Vec<Vec<String>> {
    groups
        .iter()
        .map(|c| c.iter().map(|&i| spec.nodes[i].id.clone()).collect())
        .collect()
}

/// Certify a chain of nested synchrony subspaces, outermost first.
///
/// `partitions` are successively coarser partitions of the network's nodes.
/// Stage 0 certifies the full network toward the synchrony subspace of
/// `partitions[0]`; stage `i` certifies the quotient network obtained at the
/// previous stage toward the synchrony subspace of `partitions[i]`, expressed
/// in quotient coordinates. Each stage's partition must be balanced in the
/// network it is applied to. `range`, when given, replaces every state range
/// of every stage's box.
pub fn certify_cascade(
    spec: &NetworkSpec,
    partitions: &[Partition],
    kind: &MeasureKind,
    cfg: &CertifyConfig,
    range: Option<(f64, f64)>,
) -> Result<CascadeCertificate, CertifyError> {
    if partitions.is_empty() {
        return Err(CertifyError::Nesting("no subspaces given".into()));
    }
    let n = spec.nodes.len();
    for (i, p) in partitions.iter().enumerate() {
        if p.len() != n {
            return Err(CertifyError::Nesting(format!(
                "partition {i} covers {} nodes, network has {n}",
                p.len()
            )));
        }
        if i > 0 {
            let prev = &partitions[i - 1];
            if !prev.refines(p) || p.k() >= prev.k() {
                return Err(CertifyError::Nesting(format!(
                    "partition {i} ({} clusters) is not strictly coarser than partition {} ({} clusters)",
                    p.k(),
                    i - 1,
                    prev.k()
                )));
            }
        }
    }

    // Current (quotient) network and, per current node, its original members.
    let mut current = spec.clone();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut stages = Vec::new();
    for (i, target) in partitions.iter().enumerate() {
        let local = Partition::from_assignment(
            &members.iter().map(|c| target.cluster_of(c[0])).collect::<Vec<_>>(),
        );
        let model = current.assemble()?;
        let s = synchrony_subspace(&model, &local)?;
        let mut b = model.default_box();
        if let Some(r) = range {
            b.states = vec![r; model.dim()];
        }
        let scale = b.states.iter().fold(1.0f64, |a, (lo, hi)| a.max(lo.abs()).max(hi.abs()));
        let invariance = check_flow_invariance(&model, &s, &b, cfg.samples.min(500), INVARIANCE_TOL * scale)?;
        if !invariance.pass {
            return Err(CertifyError::Nesting(format!(
                "stage {i}: synchrony subspace is not flow-invariant (residual {:.3e})",
                invariance.max_residual
            )));
        }
        let certificate = certify_toward_subspace(&model, &s, &b, kind, cfg)?;
        let merged: Vec<Vec<usize>> = local
            .clusters()
            .iter()
            .map(|c| {
                let mut all: Vec<usize> = c.iter().flat_map(|&q| members[q].clone()).collect();
                all.sort_unstable();
                all
            })
            .collect();
        stages.push(CascadeStage {
            model: model.name.clone(),
            clusters_from: member_ids(spec, &members),
            clusters_to: member_ids(spec, &merged),
            subspace_dim: s.dim(),
            invariance,
            certificate,
        });
        if i + 1 < partitions.len() {
            current = current.quotient(&local)?;
            members = merged;
        }
    }
    let failed_stage = stages.iter().position(|s| !s.certificate.passed());
    Ok(CascadeCertificate {
        stages,
        failed_stage,
        status: Status::from_bool(failed_stage.is_none()),
    })
}

/// Sampled check that an expression stays positive over a box of named
/// variables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionCertificate {
    pub condition: String,
    pub ranges: Vec<(String, (f64, f64))>,
    pub samples: usize,
    /// `inf` of the expression over the samples; the check passes when positive.
    pub margin: f64,
    pub status: Status,
    pub witness: Vec<f64>,
}

pub fn certify_condition(
    condition: &Expr,
    ranges: &[(String, (f64, f64))],
    params: &[(String, f64)],
    cfg: &CertifyConfig,
) -> Result<ConditionCertificate, CertifyError> {
    let known: Vec<&str> = ranges.iter().map(|r| r.0.as_str()).chain(params.iter().map(|p| p.0.as_str())).collect();
    if let Some(v) = condition.free_vars().into_iter().find(|v| !known.contains(&v.as_str())) {
        return Err(CertifyError::Shape(format!("`{v}` has no range or value")));
    }
    let b = SampleBox {
        states: ranges.iter().map(|r| r.1).collect(),
        inputs: Vec::new(),
        time: (0.0, 0.0),
    };
    let pts = sample_box(&b, cfg.samples, false);
    let worst = max_over(&pts, |pt| -> Result<f64, CertifyError> {
        let mut env = MapEnv::new();
        for ((name, _), v) in ranges.iter().zip(&pt.x) {
            env = env.with(name, *v);
        }
        for (name, v) in params {
            env = env.with(name, *v);
        }
        Ok(-condition.evaluate(&env).map_err(|e| CertifyError::Model(ModelError::Eval(e)))?)
    })
    .map_err(|(_, e)| e)?
    .expect("box has corner samples");
    let margin = -worst.0;
    Ok(ConditionCertificate {
        condition: condition.to_string(),
        ranges: ranges.to_vec(),
        samples: pts.len(),
        margin,
        status: Status::from_bool(margin > 0.0),
        witness: pts[worst.1].x.clone(),
    })
}

/// Result of the second-order (damped oscillator) contraction test for
/// `ẋ = x f(y)`, `ε ẏ = φ(u/x) − y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondOrderCertificate {
    pub eps: f64,
    pub phi: String,
    pub x_range: (f64, f64),
    pub u_range: (f64, f64),
    pub samples: usize,
    /// `inf (∂φ/∂x)·x` over the samples.
    pub min_stiffness: f64,
    /// `−1/(2ε)`.
    pub bound: f64,
    /// `min_stiffness + 1/(2ε)`; positive when contracting.
    pub margin: f64,
    /// `sup φ'` with respect to the ratio `u/x`.
    pub slope_sup: f64,
    /// The sufficient condition `x > 2 ε u b` checked at the box extremes.
    pub ratio_condition: bool,
    pub status: Status,
    pub witness: (f64, f64),
}

/// Check `(∂φ/∂x)·x > −1/(2ε)` over a box in `(x, u)`. `phi` is an
/// expression in `x` and `u` that must depend on them only through `u/x`.
pub fn certify_second_order(
    eps: f64,
    phi: &Expr,
    x_range: (f64, f64),
    u_range: (f64, f64),
    cfg: &CertifyConfig,
) -> Result<SecondOrderCertificate, CertifyError> {
    if !(eps > 0.0) {
        return Err(CertifyError::Shape(format!("ε must be positive, got {eps}")));
    }
    if let Some(v) = phi.free_vars().into_iter().find(|v| v != "x" && v != "u") {
        return Err(CertifyError::Shape(format!("φ may only use x and u, found `{v}`")));
    }
    let dx = differentiate(phi, "x");
    let du = differentiate(phi, "u");
    let eval = |e: &Expr, x: f64, u: f64| -> Result<f64, CertifyError> {
        e.evaluate(&MapEnv::new().with("x", x).with("u", u))
            .map_err(|e: EvalError| CertifyError::Model(ModelError::Eval(e)))
    };
    let b = SampleBox {
        states: vec![x_range, u_range],
        inputs: Vec::new(),
        time: (0.0, 0.0),
    };
    let pts = sample_box(&b, cfg.samples, false);

    // φ(x, u) = φ(sx, su) for every scale s, checked numerically.
    for pt in &pts {
        let (x, u) = (pt.x[0], pt.x[1]);
        let base = eval(phi, x, u)?;
        for s in [0.5, 2.0, 3.7] {
            let v = eval(phi, s * x, s * u)?;
            if (v - base).abs() > 1e-9 * (1.0 + base.abs()) {
                return Err(CertifyError::Shape(format!(
                    "φ is not a function of u/x: φ({x}, {u}) = {base} but φ({}, {}) = {v}",
                    s * x,
                    s * u
                )));
            }
        }
    }

    // Minimise the stiffness term by maximising its negative.
    let worst = max_over(&pts, |pt| -> Result<f64, CertifyError> {
        Ok(-eval(&dx.expr, pt.x[0], pt.x[1])? * pt.x[0])
    })
    .map_err(|(_, e)| e)?
    .expect("box has corner samples");
    let slope_sup = max_over(&pts, |pt| -> Result<f64, CertifyError> {
        // φ' = ∂φ/∂(u/x) = x ∂φ/∂u
        Ok(eval(&du.expr, pt.x[0], pt.x[1])? * pt.x[0])
    })
    .map_err(|(_, e)| e)?
    .map_or(0.0, |(v, _)| v);
    let min_stiffness = -worst.0;
    let bound = -1.0 / (2.0 * eps);
    let margin = min_stiffness - bound;
    Ok(SecondOrderCertificate {
        eps,
        phi: phi.to_string(),
        x_range,
        u_range,
        samples: pts.len(),
        min_stiffness,
        bound,
        margin,
        slope_sup,
        ratio_condition: x_range.0 > 2.0 * eps * u_range.1 * slope_sup,
        status: Status::from_bool(margin > 0.0),
        witness: (pts[worst.1].x[0], pts[worst.1].x[1]),
    })
}

/// How the virtual state `y` sits inside the real state: each copy lists the
/// real components that `y` reproduces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualBinding {
    pub copies: Vec<Vec<usize>>,
}

impl VirtualBinding {
    pub fn identity(n: usize) -> VirtualBinding {
        VirtualBinding {
            copies: vec![(0..n).collect()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VirtualCertificate {
    /// `max ||v(x_c, x, t) − f_c(x, t)||_∞` over samples and copies.
    pub consistency: ResidualReport,
    pub contraction: ContractionCertificate,
    pub status: Status,
}

/// Values for the virtual model's inputs: a real state of the same name, a
/// real input of the same name, or the virtual input's own signal.
fn virtual_inputs(
    v: &SystemModel,
    real: &SystemModel,
    x: &[f64],
    u_real: &[f64],
    t: f64,
) -> Result<Vec<f64>, ModelError> {
    let vparams = v.param_values();
    v.inputs
        .iter()
        .map(|decl| {
            if let Some(i) = real.state_index(&decl.name) {
                Ok(x[i])
            } else if let Some(i) = real.input_index(&decl.name) {
                Ok(u_real[i])
            } else {
                match &decl.source {
                    crate::model::InputSource::Signal(e) => Ok(e.evaluate(&SlotEnv {
                        states: &[],
                        params: &vparams,
                        inputs: &[],
                        t,
                        history: None,
                    })?),
                    crate::model::InputSource::External => Err(ModelError::UnboundInput(decl.name.clone())),
                }
            }
        })
        .collect()
}

/// Certify a virtual system `ẏ = v(y, x, t)` for the real system `ẋ = f(x, t)`:
/// (a) `v(x_c, x, t) = f_c(x, t)` on every copy `c`, and (b) `v` contracts in
/// `y` uniformly over sampled `x`. The sampled `x` come from `real_box`; the
/// `y` from `v_box`'s state ranges.
pub fn certify_virtual(
    v: &SystemModel,
    real: &SystemModel,
    binding: &VirtualBinding,
    real_box: &SampleBox,
    v_box: &SampleBox,
    kind: &MeasureKind,
    cfg: &CertifyConfig,
) -> Result<VirtualCertificate, CertifyError> {
    check_box(real, real_box)?;
    if v_box.states.len() != v.dim() {
        return Err(CertifyError::Dimension(format!(
            "virtual box has {} states, virtual model {}",
            v_box.states.len(),
            v.dim()
        )));
    }
    for c in &binding.copies {
        if c.len() != v.dim() || c.iter().any(|&i| i >= real.dim()) {
            return Err(CertifyError::Dimension(format!(
                "copy {c:?} does not match a {}-dimensional y inside {} real states",
                v.dim(),
                real.dim()
            )));
        }
    }
    let time_varying = real.is_time_varying() || v.is_time_varying();
    let rparams = real.param_values();
    let vparams = v.param_values();

    // (a) consistency
    let pts = sample_box(real_box, cfg.samples, time_varying);
    let max = max_over(&pts, |pt| -> Result<f64, ModelError> {
        let u = real.resolve_sampled_inputs(&pt.inputs, pt.t, &rparams)?;
        let f = real.eval_field_with(&pt.x, &u, pt.t, &rparams)?;
        let vin = virtual_inputs(v, real, &pt.x, &u, pt.t)?;
        let mut worst = 0.0f64;
        for c in &binding.copies {
            let y: Vec<f64> = c.iter().map(|&i| pt.x[i]).collect();
            let fv = v.eval_field_with(&y, &vin, pt.t, &vparams)?;
            for (k, &i) in c.iter().enumerate() {
                worst = worst.max((fv[k] - f[i]).abs());
            }
        }
        Ok(worst)
    })
    .map_err(|(_, e)| e)?;
    let consistency = ResidualReport::from_max(&pts, max, VIRTUAL_TOL);

    // (b) contraction in y, with x (and real inputs) sampled jointly
    let joint = SampleBox {
        states: v_box.states.iter().chain(&real_box.states).copied().collect(),
        inputs: real_box.inputs.clone(),
        time: real_box.time,
    };
    let jac = v.jacobian()?;
    let jpts = sample_box(&joint, cfg.samples, time_varying);
    let ny = v.dim();
    let best = max_over(&jpts, |pt| -> Result<f64, CertifyError> {
        let (y, x) = pt.x.split_at(ny);
        let u = real.resolve_sampled_inputs(&pt.inputs, pt.t, &rparams)?;
        let vin = virtual_inputs(v, real, x, &u, pt.t)?;
        let j = jac
            .eval(&SlotEnv {
                states: y,
                params: &vparams,
                inputs: &vin,
                t: pt.t,
                history: None,
            })
            .map_err(|e| CertifyError::Jacobian {
                x: pt.x.clone(),
                t: pt.t,
                source: ModelError::Eval(e),
            })?;
        Ok(matrix_measure(&j, kind)?)
    })
    .map_err(|(_, e)| e)?;
    let (max_mu, witness) = match best {
        Some((val, i)) => (val, Some(jpts[i].clone())),
        None => (f64::NEG_INFINITY, None),
    };
    let contraction = ContractionCertificate {
        target: Target::Virtual,
        measure: kind.label(),
        weight: weight_rows(kind),
        method: "sampled".into(),
        domain: joint,
        samples: jpts.len(),
        max_mu,
        margin: -max_mu,
        lambda_min: cfg.lambda_min,
        status: Status::from_bool(max_mu <= -cfg.lambda_min),
        witness,
        model_hash: v.model_hash(),
    };
    let ok = consistency.pass && contraction.passed();
    Ok(VirtualCertificate {
        consistency,
        contraction,
        status: Status::from_bool(ok),
    })
}

/// Fitted decay rate of `||x_a(t) − x_b(t)||_2` over `window`, evaluated on
/// `a`'s time grid (using `b`'s dense output).
pub fn estimate_contraction_rate(a: &Trajectory, b: &Trajectory, window: (f64, f64)) -> Result<RateFit, CertifyError> {
    if a.dim() != b.dim() {
        return Err(CertifyError::Dimension(format!("{} vs {} states", a.dim(), b.dim())));
    }
    let mut ts = Vec::new();
    let mut ds = Vec::new();
    for (t, x) in a.times.iter().zip(&a.states) {
        if let Some(y) = b.at(*t) {
            ts.push(*t);
            ds.push(x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt());
        }
    }
    Ok(convergence_rate(&ts, &ds, window)?)
}

#[cfg(test)]
mod tests;
