//! Symmetry actions, their fixed-point subspaces, and numerical checks of
//! the equivariance identities behind them.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::expr::{differentiate, EvalError, Expr, SlotEnv};
use crate::linalg::{canonical_basis_of_projector, kernel_rows, max_abs};
use crate::model::{ActionDecl, ActionKind, ModelError, Partition, SystemModel};
use crate::sampling::{max_over, sample_box, ResidualReport, SampleBox, SamplePoint};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-10;
/// Tolerance for `gamma^p = I`.
pub const ORDER_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SymmetryError {
    #[error("action is {0}x{1}, model has {2} states")]
    Dimension(usize, usize, usize),
    #[error("rows of B are not orthonormal (deviation {0:.3e})")]
    NotOrthonormal(f64),
    #[error("no order up to {0}: the action is not of finite order")]
    InfiniteOrder(usize),
    #[error("unknown node `{0}` in permutation")]
    UnknownNode(String),
    #[error("permutation moves node `{0}` onto a node of a different size")]
    BlockMismatch(String),
    #[error("node `{0}` appears twice in the cycles")]
    RepeatedNode(String),
    #[error("`{0}` is not a state or input of the model")]
    UnknownName(String),
    #[error("subspaces live in different dimensions ({0} vs {1})")]
    Mismatch(usize, usize),
    #[error("map for `{component}` is not differentiable: {expr}")]
    NotDifferentiable { component: String, expr: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("evaluation failed at sample {index}: {source}")]
    Eval { index: usize, source: ModelError },
}

impl From<EvalError> for SymmetryError {
    fn from(e: EvalError) -> Self {
        SymmetryError::Model(ModelError::Eval(e))
    }
}

/// Linear action on the flattened state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAction {
    pub matrix: DMatrix<f64>,
    /// Node permutation `sigma` when the action permutes node blocks:
    /// node `i`'s block moves to node `sigma[i]`'s slot.
    pub permutation: Option<Vec<usize>>,
    pub order: Option<usize>,
}

impl LinearAction {
    pub fn new(matrix: DMatrix<f64>) -> Result<LinearAction, SymmetryError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(SymmetryError::Dimension(matrix.nrows(), matrix.ncols(), matrix.nrows()));
        }
        Ok(LinearAction {
            matrix,
            permutation: None,
            order: None,
        })
    }

    pub fn identity(n: usize) -> LinearAction {
        LinearAction {
            matrix: DMatrix::identity(n, n),
            permutation: Some((0..n).collect()),
            order: Some(1),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Permutation of the model's node blocks; `sigma[i]` is where node
    /// `i`'s components are sent.
    pub fn from_node_permutation(m: &SystemModel, sigma: &[usize]) -> Result<LinearAction, SymmetryError> {
        let n = m.dim();
        let mut g = DMatrix::zeros(n, n);
        for (i, &s) in sigma.iter().enumerate() {
            let (from, to) = (&m.nodes[i], &m.nodes[s]);
            if from.components.len() != to.components.len() || from.template != to.template {
                return Err(SymmetryError::BlockMismatch(from.id.clone()));
            }
            for (a, b) in from.components.iter().zip(&to.components) {
                g[(*b, *a)] = 1.0;
            }
        }
        let mut action = LinearAction::new(g)?;
        action.permutation = Some(sigma.to_vec());
        action.order = action_order(&action, 10_000).ok();
        Ok(action)
    }

    /// `(a b c)` cycles over node ids; unmentioned nodes are fixed.
    pub fn from_cycles(m: &SystemModel, cycles: &[Vec<String>]) -> Result<LinearAction, SymmetryError> {
        let mut sigma: Vec<usize> = (0..m.nodes.len()).collect();
        let mut seen = vec![false; m.nodes.len()];
        for cycle in cycles {
            let idx = cycle
                .iter()
                .map(|id| m.node_index(id).ok_or_else(|| SymmetryError::UnknownNode(id.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            for (k, &i) in idx.iter().enumerate() {
                if std::mem::replace(&mut seen[i], true) {
                    return Err(SymmetryError::RepeatedNode(cycle[k].clone()));
                }
                sigma[i] = idx[(k + 1) % idx.len()];
            }
        }
        Self::from_node_permutation(m, &sigma)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let v = &self.matrix * nalgebra::DVector::from_column_slice(x);
        v.iter().copied().collect()
    }
}

/// Linear subspace with orthonormal basis rows `B` (p×n) and orthonormal
/// complement rows `V` ((n−p)×n).
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    pub basis: DMatrix<f64>,
    pub complement: DMatrix<f64>,
}

impl Subspace {
    /// From orthonormal basis rows; the complement is derived.
    pub fn from_basis(basis: DMatrix<f64>) -> Result<Subspace, SymmetryError> {
        let complement = complement_basis(&basis)?;
        Ok(Subspace { basis, complement })
    }

    pub fn full(n: usize) -> Subspace {
        Subspace {
            basis: DMatrix::identity(n, n),
            complement: DMatrix::zeros(0, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn ambient(&self) -> usize {
        self.basis.ncols()
    }

    /// Orthogonal projection onto the subspace.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(x);
        let p = self.basis.transpose() * (&self.basis * v);
        p.iter().copied().collect()
    }

    /// `||V x||_2`, the Euclidean distance to the subspace.
    pub fn distance(&self, x: &[f64]) -> f64 {
        if self.complement.nrows() == 0 {
            return 0.0;
        }
        (&self.complement * nalgebra::DVector::from_column_slice(x)).norm()
    }

    /// Largest deviation from `BBᵀ = I`, `VVᵀ = I`, `BVᵀ = 0`.
    pub fn orthogonality_defect(&self) -> f64 {
        let (p, q) = (self.basis.nrows(), self.complement.nrows());
        let bb = &self.basis * self.basis.transpose() - DMatrix::identity(p, p);
        let vv = &self.complement * self.complement.transpose() - DMatrix::identity(q, q);
        let bv = &self.basis * self.complement.transpose();
        max_abs(&bb).max(max_abs(&vv)).max(max_abs(&bv))
    }

    /// Largest principal-angle sine between the row spaces of `self.basis`
    /// and `other` (orthonormal rows); 0 when they coincide.
    pub fn angle_to(&self, other: &DMatrix<f64>) -> f64 {
        if other.nrows() != self.dim() {
            return 1.0;
        }
        // sin of the largest principal angle = ||(I - P_self) Oᵀ||_2
        let resid = other.transpose() - self.basis.transpose() * (&self.basis * other.transpose());
        if resid.is_empty() {
            return 0.0;
        }
        resid.svd(false, false).singular_values.max()
    }
}

fn basis_of_projector(p: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    if dim == 0 {
        return DMatrix::zeros(0, p.ncols());
    }
    canonical_basis_of_projector(p, dim)
}

/// Orthonormal rows spanning the orthogonal complement of `B`'s row space,
/// chosen deterministically (pivoted Gram–Schmidt over `I − BᵀB`).
pub fn complement_basis(b: &DMatrix<f64>) -> Result<DMatrix<f64>, SymmetryError> {
    let (p, n) = b.shape();
    let defect = max_abs(&(b * b.transpose() - DMatrix::identity(p, p)));
    if defect > 1e-10 {
        return Err(SymmetryError::NotOrthonormal(defect));
    }
    let proj = DMatrix::identity(n, n) - b.transpose() * b;
    Ok(basis_of_projector(&proj, n - p))
}

/// Subspace from an arbitrary kernel basis, canonicalized.
fn canonical_subspace(kernel: &DMatrix<f64>, n: usize) -> Subspace {
    let p = kernel.nrows();
    let proj = kernel.transpose() * kernel;
    let basis = basis_of_projector(&proj, p);
    let complement = basis_of_projector(&(DMatrix::identity(n, n) - &proj), n - p);
    Subspace { basis, complement }
}

/// `M = {x : γx = x}` with complement.
pub fn fixed_subspace(g: &LinearAction) -> Subspace {
    let n = g.dim();
    let k = kernel_rows(&(&g.matrix - DMatrix::identity(n, n)), RANK_TOL);
    canonical_subspace(&k, n)
}

/// Cluster-synchrony subspace `{x_i = x_j for i, j in one cluster}`, taken
/// componentwise over node blocks.
pub fn synchrony_subspace(m: &SystemModel, p: &Partition) -> Result<Subspace, SymmetryError> {
    if p.len() != m.nodes.len() {
        return Err(SymmetryError::Mismatch(p.len(), m.nodes.len()));
    }
    let n = m.dim();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for members in p.clusters() {
        let width = m.nodes[members[0]].components.len();
        for k in 0..width {
            let mut r = vec![0.0; n];
            let s = 1.0 / (members.len() as f64).sqrt();
            for &i in &members {
                let block = &m.nodes[i].components;
                if block.len() != width {
                    return Err(SymmetryError::BlockMismatch(m.nodes[i].id.clone()));
                }
                r[block[k]] = s;
            }
            rows.push(r);
        }
    }
    let mut b = DMatrix::zeros(rows.len(), n);
    for (i, r) in rows.iter().enumerate() {
        b.row_mut(i).copy_from_slice(r);
    }
    let proj = b.transpose() * &b;
    let basis = basis_of_projector(&proj, rows.len());
    let complement = basis_of_projector(&(DMatrix::identity(n, n) - proj), n - rows.len());
    Ok(Subspace { basis, complement })
}

#[derive(Debug, Clone)]
pub struct Intersection {
    pub subspace: Subspace,
    /// Only the origin is shared.
    pub trivial: bool,
}

/// `∩ M_i`, the kernel of the stacked complements.
pub fn subspace_intersection(list: &[Subspace]) -> Result<Intersection, SymmetryError> {
    let n = list.first().map_or(0, Subspace::ambient);
    if let Some(bad) = list.iter().find(|s| s.ambient() != n) {
        return Err(SymmetryError::Mismatch(n, bad.ambient()));
    }
    let rows: usize = list.iter().map(|s| s.complement.nrows()).sum();
    let mut stacked = DMatrix::zeros(rows, n);
    let mut r = 0;
    for s in list {
        let q = s.complement.nrows();
        stacked.view_mut((r, 0), (q, n)).copy_from(&s.complement);
        r += q;
    }
    let subspace = if rows == 0 {
        Subspace::full(n)
    } else {
        canonical_subspace(&kernel_rows(&stacked, RANK_TOL), n)
    };
    Ok(Intersection {
        trivial: subspace.dim() == 0,
        subspace,
    })
}

/// Smallest `p ≤ max_order` with `γ^p = I` (max-abs within [`ORDER_TOL`]).
pub fn action_order(g: &LinearAction, max_order: usize) -> Result<usize, SymmetryError> {
    let n = g.dim();
    let id = DMatrix::identity(n, n);
    let mut power = g.matrix.clone();
    for p in 1..=max_order.max(1) {
        if max_abs(&(&power - &id)) <= ORDER_TOL {
            return Ok(p);
        }
        // Runaway growth means no finite order.
        if max_abs(&power) > 1e6 {
            break;
        }
        power = &power * &g.matrix;
    }
    Err(SymmetryError::InfiniteOrder(max_order))
}

fn sample_inputs(m: &SystemModel, pt: &SamplePoint, params: &[f64]) -> Result<Vec<f64>, ModelError> {
    m.resolve_sampled_inputs(&pt.inputs, pt.t, params)
}

/// `max ||γ f(x,t) − f(γx,t)||_∞` over box samples.
pub fn check_equivariance(
    m: &SystemModel,
    g: &LinearAction,
    b: &SampleBox,
    samples: usize,
    tol: f64,
) -> Result<ResidualReport, SymmetryError> {
    if g.dim() != m.dim() {
        return Err(SymmetryError::Dimension(g.dim(), g.dim(), m.dim()));
    }
    let params = m.param_values();
    let pts = sample_box(b, samples, m.is_time_varying());
    let max = max_over(&pts, |pt| -> Result<f64, ModelError> {
        let u = sample_inputs(m, pt, &params)?;
        let f = m.eval_field_with(&pt.x, &u, pt.t, &params)?;
        let gf = g.apply(&f);
        let fg = m.eval_field_with(&g.apply(&pt.x), &u, pt.t, &params)?;
        Ok(gf.iter().zip(&fg).fold(0.0, |a, (p, q)| a.max((p - q).abs())))
    })
    .map_err(|(index, source)| SymmetryError::Eval { index, source })?;
    Ok(ResidualReport::from_max(&pts, max, tol))
}

/// State action of a scaling pair.
#[derive(Debug, Clone)]
pub enum StateMap {
    Linear(LinearAction),
    /// One expression per state component, over state, input and parameter names.
    Nonlinear(Vec<Expr>),
}

/// A state action `γ` with a matching input action `ρ`, evaluated with the
/// given parameter overrides (e.g. the scale constant).
#[derive(Debug, Clone)]
pub struct ScalingActionPair {
    pub label: String,
    pub state: StateMap,
    /// One expression per model input (identity when not listed).
    pub input: Vec<Expr>,
    pub params: Vec<(String, f64)>,
}

impl ScalingActionPair {
    pub fn identity(m: &SystemModel) -> ScalingActionPair {
        ScalingActionPair {
            label: "identity".into(),
            state: StateMap::Linear(LinearAction::identity(m.dim())),
            input: m.inputs.iter().map(|i| Expr::var(&i.name)).collect(),
            params: Vec::new(),
        }
        .resolved(m)
        .expect("identity maps resolve")
    }

    /// Build from a declared `map` (or permutation/matrix) action.
    pub fn from_decl(
        m: &SystemModel,
        decl: &ActionDecl,
        overrides: &[(&str, f64)],
    ) -> Result<ScalingActionPair, SymmetryError> {
        let mut input: Vec<Expr> = m.inputs.iter().map(|i| Expr::var(&i.name)).collect();
        let state = match &decl.kind {
            ActionKind::Map { states, inputs } => {
                let mut comps: Vec<Expr> = m.states.iter().map(|s| Expr::var(s)).collect();
                for (name, e) in states {
                    let i = m.state_index(name).ok_or_else(|| SymmetryError::UnknownName(name.clone()))?;
                    comps[i] = e.clone();
                }
                for (name, e) in inputs {
                    let i = m.input_index(name).ok_or_else(|| SymmetryError::UnknownName(name.clone()))?;
                    input[i] = e.clone();
                }
                StateMap::Nonlinear(comps)
            }
            _ => StateMap::Linear(linear_action_from_decl(m, decl)?),
        };
        let mut params = m.params.clone();
        for (name, v) in overrides {
            let k = m
                .param_index(name)
                .ok_or_else(|| SymmetryError::UnknownName(name.to_string()))?;
            params[k].1 = *v;
        }
        ScalingActionPair {
            label: decl.name.clone(),
            state,
            input,
            params,
        }
        .resolved(m)
    }

    fn resolved(mut self, m: &SystemModel) -> Result<ScalingActionPair, SymmetryError> {
        let scope = m.scope();
        if self.params.is_empty() {
            self.params = m.params.clone();
        }
        if let StateMap::Nonlinear(comps) = &mut self.state {
            for c in comps.iter_mut() {
                *c = c.resolve(&scope).map_err(ModelError::from)?;
            }
        }
        for e in &mut self.input {
            *e = e.resolve(&scope).map_err(ModelError::from)?;
        }
        Ok(self)
    }

    fn param_values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.1).collect()
    }

    /// `γ(x)` (inputs and time are available to nonlinear maps).
    pub fn apply_state(&self, x: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>, SymmetryError> {
        match &self.state {
            StateMap::Linear(g) => Ok(g.apply(x)),
            StateMap::Nonlinear(comps) => {
                let params = self.param_values();
                let env = SlotEnv {
                    states: x,
                    params: &params,
                    inputs: u,
                    t,
                    history: None,
                };
                Ok(comps.iter().map(|c| c.evaluate(&env)).collect::<Result<_, _>>()?)
            }
        }
    }

    /// `ρ(u)`.
    pub fn apply_input(&self, x: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>, SymmetryError> {
        let params = self.param_values();
        let env = SlotEnv {
            states: x,
            params: &params,
            inputs: u,
            t,
            history: None,
        };
        Ok(self.input.iter().map(|c| c.evaluate(&env)).collect::<Result<_, _>>()?)
    }

    /// Symbolic `∂γ/∂x` for nonlinear maps.
    fn state_jacobian(&self, m: &SystemModel) -> Result<Option<Vec<Vec<Expr>>>, SymmetryError> {
        let StateMap::Nonlinear(comps) = &self.state else {
            return Ok(None);
        };
        let mut rows = Vec::with_capacity(comps.len());
        for (i, c) in comps.iter().enumerate() {
            let mut row = Vec::with_capacity(m.dim());
            for s in &m.states {
                let d = differentiate(c, s);
                if d.piecewise {
                    return Err(SymmetryError::NotDifferentiable {
                        component: m.states[i].clone(),
                        expr: c.to_string(),
                    });
                }
                row.push(d.expr);
            }
            rows.push(row);
        }
        Ok(Some(rows))
    }
}

/// Matrix form of a permutation or matrix declaration.
pub fn linear_action_from_decl(m: &SystemModel, decl: &ActionDecl) -> Result<LinearAction, SymmetryError> {
    match &decl.kind {
        ActionKind::Permute(cycles) => LinearAction::from_cycles(m, cycles),
        ActionKind::Matrix(rows) => {
            let n = rows.len();
            if n != m.dim() {
                return Err(SymmetryError::Dimension(n, n, m.dim()));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let mut g = LinearAction::new(DMatrix::from_row_slice(n, n, &flat))?;
            g.order = action_order(&g, 10_000).ok();
            Ok(g)
        }
        ActionKind::Map { .. } => {
            // A map is linear when its Jacobian is constant; evaluate it at the origin.
            let pair = ScalingActionPair::from_decl(m, decl, &[])?;
            let jac = pair.state_jacobian(m)?.expect("map is nonlinear form");
            let params = pair.param_values();
            let zeros = vec![0.0; m.dim()];
            let u = vec![0.0; m.inputs.len()];
            let env = SlotEnv {
                states: &zeros,
                params: &params,
                inputs: &u,
                t: 0.0,
                history: None,
            };
            let n = m.dim();
            let mut g = DMatrix::zeros(n, n);
            for (i, row) in jac.iter().enumerate() {
                for (j, e) in row.iter().enumerate() {
                    if e.free_vars().iter().any(|v| m.state_index(v).is_some()) {
                        return Err(SymmetryError::NotDifferentiable {
                            component: m.states[i].clone(),
                            expr: "state-dependent Jacobian; not a linear action".into(),
                        });
                    }
                    g[(i, j)] = e.evaluate(&env)?;
                }
            }
            LinearAction::new(g)
        }
    }
}

/// Residual of `∂γ/∂x · f(x, u, t) = f(γ(x), ρ(u), t)` over box samples
/// (for linear `γ`, `∂γ/∂x = γ`).
pub fn check_input_equivariance(
    m: &SystemModel,
    pair: &ScalingActionPair,
    b: &SampleBox,
    samples: usize,
    tol: f64,
) -> Result<ResidualReport, SymmetryError> {
    let jac = pair.state_jacobian(m)?;
    let params = pair.param_values();
    let pts = sample_box(b, samples, m.is_time_varying());
    let max = max_over(&pts, |pt| -> Result<f64, SymmetryError> {
        let u = sample_inputs(m, pt, &params)?;
        let f = m.eval_field_with(&pt.x, &u, pt.t, &params)?;
        let lhs: Vec<f64> = match (&pair.state, &jac) {
            (StateMap::Linear(g), _) => g.apply(&f),
            (StateMap::Nonlinear(_), Some(jac)) => {
                let env = SlotEnv {
                    states: &pt.x,
                    params: &params,
                    inputs: &u,
                    t: pt.t,
                    history: None,
                };
                let mut out = vec![0.0; m.dim()];
                for (i, row) in jac.iter().enumerate() {
                    for (j, e) in row.iter().enumerate() {
                        if !e.is_zero() {
                            out[i] += e.evaluate(&env)? * f[j];
                        }
                    }
                }
                out
            }
            (StateMap::Nonlinear(_), None) => unreachable!("nonlinear maps have a Jacobian"),
        };
        let gx = pair.apply_state(&pt.x, &u, pt.t)?;
        let ru = pair.apply_input(&pt.x, &u, pt.t)?;
        let rhs = m.eval_field_with(&gx, &ru, pt.t, &params)?;
        Ok(lhs.iter().zip(&rhs).fold(0.0, |a, (p, q)| a.max((p - q).abs())))
    })
    .map_err(|(index, source)| match source {
        SymmetryError::Model(source) => SymmetryError::Eval { index, source },
        other => other,
    })?;
    Ok(ResidualReport::from_max(&pts, max, tol))
}

/// A linear action combined with a time shift: `x(t) = γ x(t + T)`.
#[derive(Debug, Clone)]
pub struct SpatioTemporalAction {
    pub action: LinearAction,
    pub shift: f64,
}
