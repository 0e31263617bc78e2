//! Flat state-space models, networks of coupled nodes, and the `.sysdl`
//! description format.
//!
//! A [`SystemModel`] is the flattened form everything downstream consumes:
//! ordered scalar state components, parameters, inputs (functions of time or
//! external), delays, and one resolved expression per component. Networks
//! ([`NetworkSpec`]) flatten into a `SystemModel` with states ordered by node
//! and then by the node template's component order.

mod network;
mod sysdl;

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{differentiate, parse_expression, EvalError, Expr, ParseError, ResolveError, Scope, SlotEnv};
use crate::sampling::{max_over, sample_box, ResidualReport, SampleBox};
use crate::symmetry::Subspace;

pub use network::{
    balance_violation, coarsest_balanced_partition, is_balanced, quotient_system, refine_coloring, Coupling,
    Edge, NetworkSpec, Node, Partition, Template,
};
pub use sysdl::{parse_model, ActionDecl, ActionKind, LoadedModel, ModelKind};

/// Default box half-width for models without a declared domain.
pub const DEFAULT_BOX: (f64, f64) = (-5.0, 5.0);
/// Default box for models declared `domain positive`.
pub const POSITIVE_BOX: (f64, f64) = (0.1, 10.0);
/// Default sampling horizon for time-varying fields.
pub const DEFAULT_HORIZON: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Expr(ParseError),
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{0}")]
    Resolve(#[from] ResolveError),
    #[error("{0}")]
    Invalid(String),
    #[error("edges labelled `{label}` join inequivalent nodes ({a} and {b})")]
    EdgeEquivalence { label: String, a: String, b: String },
    #[error("partition is not balanced: {0}")]
    Unbalanced(String),
    #[error("nonsmooth term in d({component})/d({var}): {expr}")]
    Nonsmooth { component: String, var: String, expr: String },
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("input `{0}` is external and has no binding")]
    UnboundInput(String),
}

/// Where an input's value comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    /// Expression in `t` and parameters.
    Signal(Expr),
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputDecl {
    pub name: String,
    pub source: InputSource,
}

/// Contiguous component block belonging to one network node (or, for plain
/// models, one state component per block).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeBlock {
    pub id: String,
    pub template: String,
    pub components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub name: String,
    pub states: Vec<String>,
    pub params: Vec<(String, f64)>,
    pub inputs: Vec<InputDecl>,
    pub delays: Vec<(String, f64)>,
    /// Resolved right-hand side, one entry per state component.
    pub field: Vec<Expr>,
    pub nodes: Vec<NodeBlock>,
    pub state_box: Vec<(f64, f64)>,
    pub input_box: Vec<Option<(f64, f64)>>,
    pub horizon: Option<f64>,
}

/// Jacobian entries `d f_i / d x_j` as resolved expressions.
#[derive(Debug, Clone)]
pub struct SymbolicJacobian {
    pub entries: Vec<Vec<Expr>>,
}

impl SymbolicJacobian {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn eval(&self, env: &SlotEnv<'_>) -> Result<DMatrix<f64>, EvalError> {
        let n = self.entries.len();
        let mut j = DMatrix::zeros(n, n);
        for (r, row) in self.entries.iter().enumerate() {
            for (c, e) in row.iter().enumerate() {
                if !e.is_zero() {
                    j[(r, c)] = e.evaluate(env)?;
                }
            }
        }
        Ok(j)
    }

    /// True when `d f_i/d x_j` folds to the constant zero.
    pub fn is_structural_zero(&self, i: usize, j: usize) -> bool {
        self.entries[i][j].is_zero()
    }
}

/// Load a `.sysdl` file.
pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_model(&text)
}

impl SystemModel {
    /// Build and validate a flat model from unresolved expressions.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        states: Vec<String>,
        params: Vec<(String, f64)>,
        inputs: Vec<InputDecl>,
        delays: Vec<(String, f64)>,
        field: Vec<Expr>,
        nodes: Option<Vec<NodeBlock>>,
    ) -> Result<SystemModel, ModelError> {
        if field.len() != states.len() {
            return Err(ModelError::Invalid(format!(
                "{} states but {} dynamics equations",
                states.len(),
                field.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for n in states
            .iter()
            .chain(params.iter().map(|p| &p.0))
            .chain(inputs.iter().map(|i| &i.name))
            .chain(delays.iter().map(|d| &d.0))
        {
            if !seen.insert(n.clone()) {
                return Err(ModelError::Invalid(format!("`{n}` declared twice")));
            }
            if n == "t" {
                return Err(ModelError::Invalid("`t` is reserved for time".into()));
            }
        }
        for (d, v) in &delays {
            if !(*v >= 0.0) {
                return Err(ModelError::Invalid(format!("delay `{d}` must be nonnegative")));
            }
        }
        let scope = Scope {
            states: states.clone(),
            params: params.iter().map(|p| p.0.clone()).collect(),
            inputs: inputs.iter().map(|i| i.name.clone()).collect(),
            delays: delays.iter().map(|d| d.0.clone()).collect(),
        };
        let input_scope = Scope {
            params: scope.params.clone(),
            ..Default::default()
        };
        let field = field
            .iter()
            .map(|e| e.resolve(&scope))
            .collect::<Result<Vec<_>, _>>()?;
        let inputs = inputs
            .into_iter()
            .map(|i| {
                Ok(InputDecl {
                    source: match i.source {
                        InputSource::Signal(e) => InputSource::Signal(e.resolve(&input_scope)?),
                        InputSource::External => InputSource::External,
                    },
                    name: i.name,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let nodes = nodes.unwrap_or_else(|| {
            states
                .iter()
                .enumerate()
                .map(|(k, s)| NodeBlock {
                    id: s.clone(),
                    template: String::new(),
                    components: vec![k],
                })
                .collect()
        });
        let n = states.len();
        let ni = inputs.len();
        Ok(SystemModel {
            name: name.into(),
            states,
            params,
            inputs,
            delays,
            field,
            nodes,
            state_box: vec![DEFAULT_BOX; n],
            input_box: vec![None; ni],
            horizon: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn is_delayed(&self) -> bool {
        self.field.iter().any(Expr::has_delay)
    }

    /// Whether the field depends on time, directly or through an input.
    pub fn is_time_varying(&self) -> bool {
        self.field.iter().any(Expr::uses_time)
            || self.inputs.iter().any(|i| match &i.source {
                InputSource::Signal(e) => e.uses_time(),
                InputSource::External => true,
            })
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.0 == name)
    }

    pub fn input_index(&self, name: &str) -> Option<usize> {
        self.inputs.iter().position(|i| i.name == name)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn param_values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.1).collect()
    }

    pub fn scope(&self) -> Scope {
        Scope {
            states: self.states.clone(),
            params: self.params.iter().map(|p| p.0.clone()).collect(),
            inputs: self.inputs.iter().map(|i| i.name.clone()).collect(),
            delays: self.delays.iter().map(|d| d.0.clone()).collect(),
        }
    }

    /// Copy with a parameter overridden.
    pub fn with_param(&self, name: &str, value: f64) -> Result<SystemModel, ModelError> {
        let k = self
            .param_index(name)
            .ok_or_else(|| ModelError::Invalid(format!("no parameter `{name}`")))?;
        let mut m = self.clone();
        m.params[k].1 = value;
        Ok(m)
    }

    /// Copy with a delay overridden.
    pub fn with_delay(&self, name: &str, value: f64) -> Result<SystemModel, ModelError> {
        let k = self
            .delays
            .iter()
            .position(|d| d.0 == name)
            .ok_or_else(|| ModelError::Invalid(format!("no delay `{name}`")))?;
        if !(value >= 0.0) {
            return Err(ModelError::Invalid(format!("delay `{name}` must be nonnegative")));
        }
        let mut m = self.clone();
        m.delays[k].1 = value;
        Ok(m)
    }

    /// Copy with an input bound to a signal given as source text.
    pub fn with_input(&self, name: &str, signal: &str) -> Result<SystemModel, ModelError> {
        let e = parse_expression(signal).map_err(ModelError::Expr)?;
        self.with_input_expr(name, e)
    }

    pub fn with_input_expr(&self, name: &str, signal: Expr) -> Result<SystemModel, ModelError> {
        let k = self
            .input_index(name)
            .ok_or_else(|| ModelError::Invalid(format!("no input `{name}`")))?;
        let scope = Scope {
            params: self.params.iter().map(|p| p.0.clone()).collect(),
            ..Default::default()
        };
        let mut m = self.clone();
        m.inputs[k].source = InputSource::Signal(signal.resolve(&scope)?);
        Ok(m)
    }

    /// Values of all inputs at time `t`.
    pub fn input_values(&self, t: f64, params: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.inputs.len()];
        self.input_values_into(t, params, &mut out)?;
        Ok(out)
    }

    pub fn input_values_into(&self, t: f64, params: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        for (k, decl) in self.inputs.iter().enumerate() {
            out[k] = match &decl.source {
                InputSource::Signal(e) => e.evaluate(&SlotEnv {
                    states: &[],
                    params,
                    inputs: &[],
                    t,
                    history: None,
                })?,
                InputSource::External => return Err(ModelError::UnboundInput(decl.name.clone())),
            };
        }
        Ok(())
    }

    /// Input values for a sampled point: box samples where given, otherwise
    /// the input's own signal at `t`.
    pub fn resolve_sampled_inputs(
        &self,
        sampled: &[Option<f64>],
        t: f64,
        params: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.inputs.len()];
        for (k, decl) in self.inputs.iter().enumerate() {
            out[k] = match (sampled.get(k).copied().flatten(), &decl.source) {
                (Some(v), _) => v,
                (None, InputSource::Signal(e)) => e.evaluate(&SlotEnv {
                    states: &[],
                    params,
                    inputs: &[],
                    t,
                    history: None,
                })?,
                (None, InputSource::External) => return Err(ModelError::UnboundInput(decl.name.clone())),
            };
        }
        Ok(out)
    }

    /// Evaluate the vector field into `out`.
    pub fn rhs_into(&self, env: &SlotEnv<'_>, out: &mut [f64]) -> Result<(), EvalError> {
        for (o, e) in out.iter_mut().zip(&self.field) {
            *o = e.evaluate(env)?;
        }
        Ok(())
    }

    /// f(x, t) with default parameters and signal inputs.
    pub fn eval_field(&self, x: &[f64], t: f64) -> Result<Vec<f64>, ModelError> {
        let params = self.param_values();
        let inputs = self.input_values(t, &params)?;
        self.eval_field_with(x, &inputs, t, &params)
    }

    pub fn eval_field_with(
        &self,
        x: &[f64],
        inputs: &[f64],
        t: f64,
        params: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.dim()];
        self.rhs_into(
            &SlotEnv {
                states: x,
                params,
                inputs,
                t,
                history: None,
            },
            &mut out,
        )?;
        Ok(out)
    }

    /// Symbolic Jacobian; rejects nonsmooth state-dependent terms.
    pub fn jacobian(&self) -> Result<SymbolicJacobian, ModelError> {
        let mut entries = Vec::with_capacity(self.dim());
        for (i, f) in self.field.iter().enumerate() {
            let mut row = Vec::with_capacity(self.dim());
            for s in &self.states {
                let d = differentiate(f, s);
                if d.piecewise {
                    return Err(ModelError::Nonsmooth {
                        component: self.states[i].clone(),
                        var: s.clone(),
                        expr: f.to_string(),
                    });
                }
                row.push(d.expr);
            }
            entries.push(row);
        }
        Ok(SymbolicJacobian { entries })
    }

    /// Default sampling box: declared ranges, else the model-wide default.
    pub fn default_box(&self) -> SampleBox {
        SampleBox {
            states: self.state_box.clone(),
            inputs: self.input_box.clone(),
            time: (0.0, self.horizon.unwrap_or(DEFAULT_HORIZON)),
        }
    }

    /// Short content hash of the resolved model.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for s in &self.states {
            h.update(s.as_bytes());
            h.update(b";");
        }
        for (p, v) in &self.params {
            h.update(format!("{p}={v:e};").as_bytes());
        }
        for i in &self.inputs {
            let src = match &i.source {
                InputSource::Signal(e) => e.to_string(),
                InputSource::External => "external".into(),
            };
            h.update(format!("{}={src};", i.name).as_bytes());
        }
        for (d, v) in &self.delays {
            h.update(format!("{d}={v:e};").as_bytes());
        }
        for e in &self.field {
            h.update(e.to_string().as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Human-readable rendering in `.sysdl` syntax.
    pub fn render(&self) -> String {
        let mut out = format!("model {}\n", self.name);
        if !self.params.is_empty() {
            out.push_str("params\n");
            for (p, v) in &self.params {
                out.push_str(&format!("  {p} = {v}\n"));
            }
        }
        out.push_str("states\n");
        for s in &self.states {
            out.push_str(&format!("  {s}\n"));
        }
        if !self.inputs.is_empty() {
            out.push_str("inputs\n");
            for i in &self.inputs {
                match &i.source {
                    InputSource::Signal(e) => out.push_str(&format!("  {} = {e}\n", i.name)),
                    InputSource::External => out.push_str(&format!("  {} = external\n", i.name)),
                }
            }
        }
        if !self.delays.is_empty() {
            out.push_str("delays\n");
            for (d, v) in &self.delays {
                out.push_str(&format!("  {d} = {v}\n"));
            }
        }
        out.push_str("dynamics\n");
        for (s, e) in self.states.iter().zip(&self.field) {
            out.push_str(&format!("  d/dt {s} = {e}\n"));
        }
        out
    }

    /// Bindings from names to the model's current parameter values.
    pub fn param_map(&self) -> HashMap<String, f64> {
        self.params.iter().cloned().collect()
    }
}

/// Sample the box, project each point onto `s`, and measure how far the
/// field there points out of the subspace (`||V f(Px, t)||_2`).
pub fn check_flow_invariance(
    m: &SystemModel,
    s: &Subspace,
    b: &SampleBox,
    samples: usize,
    tol: f64,
) -> Result<ResidualReport, ModelError> {
    if s.ambient() != m.dim() {
        return Err(ModelError::Invalid(format!(
            "subspace lives in dimension {}, model has {} states",
            s.ambient(),
            m.dim()
        )));
    }
    let params = m.param_values();
    let pts = sample_box(b, samples, m.is_time_varying());
    let max = max_over(&pts, |pt| -> Result<f64, ModelError> {
        let u = m.resolve_sampled_inputs(&pt.inputs, pt.t, &params)?;
        let x = s.project(&pt.x);
        let f = m.eval_field_with(&x, &u, pt.t, &params)?;
        Ok(s.distance(&f))
    })
    .map_err(|(_, e)| e)?;
    Ok(ResidualReport::from_max(&pts, max, tol))
}
