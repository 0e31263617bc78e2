//! Scenario files (`.scn`, TOML): a model, the certificates to issue, the
//! simulations to run and the outcomes expected of each.
//!
//! ```toml
//! name = "chain4"
//! model = "chain4"            # path relative to the scenario, or a bundled model
//! seed = 4
//!
//! [[certificate]]
//! name = "cascade"
//! kind = "cascade"
//! measure = "2"
//! partitions = [[["1", "4"], ["2", "3"]], [["1", "2", "3", "4"]]]
//! expect = "pass"
//! min_margin = 1.0
//!
//! [[simulation]]
//! name = "sync"
//! horizon = 30
//! x0 = { random = [-5, 5], count = 20 }
//!
//! [[simulation.metric]]
//! kind = "sync"
//! partition = [["1", "2", "3", "4"]]
//! window = [30, 30]
//! max = 1e-6
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use symcon_core::model::{load_model, LoadedModel};
use symcon_core::models::{bundled_model, bundled_source};

const BUNDLED: &[(&str, &str)] = &[
    ("chain4", include_str!("../scenarios/chain4.scn")),
    ("chain8", include_str!("../scenarios/chain8.scn")),
    ("hopfield13", include_str!("../scenarios/hopfield13.scn")),
    ("i1ffl-fcd", include_str!("../scenarios/i1ffl-fcd.scn")),
    ("chemotaxis-fcd", include_str!("../scenarios/chemotaxis-fcd.scn")),
    ("quorum-chemotaxis", include_str!("../scenarios/quorum-chemotaxis.scn")),
    ("quorum-periodic", include_str!("../scenarios/quorum-periodic.scn")),
    ("quorum-delay", include_str!("../scenarios/quorum-delay.scn")),
    ("hsym-demo", include_str!("../scenarios/hsym-demo.scn")),
];

pub fn bundled_scenarios() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub type Ranges = BTreeMap<String, [f64; 2]>;
pub type Clusters = Vec<Vec<String>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: String,
    #[serde(default)]
    pub seed: u64,
    /// Sample count for every certificate (default 2000).
    pub samples: Option<usize>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default, rename = "certificate")]
    pub certificates: Vec<CertificateSpec>,
    #[serde(default, rename = "simulation")]
    pub simulations: Vec<SimulationSpec>,
    #[serde(default, rename = "fcd")]
    pub fcd: Vec<FcdSpec>,
    /// Directory that relative model paths resolve against.
    #[serde(skip)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CertificateSpec {
    pub name: String,
    /// Certify a different model than the scenario's.
    pub model: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub expect: Option<Expect>,
    pub min_margin: Option<f64>,
    pub max_margin: Option<f64>,
    #[serde(flatten)]
    pub check: CheckSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CheckSpec {
    Contraction {
        measure: String,
        weight: Option<Vec<Vec<f64>>>,
        #[serde(rename = "box", default)]
        domain: Ranges,
        /// Certify the quotient network of this partition instead.
        quotient: Option<Clusters>,
    },
    Toward {
        measure: String,
        weight: Option<Vec<Vec<f64>>>,
        #[serde(rename = "box", default)]
        domain: Ranges,
        action: Option<String>,
        partition: Option<Clusters>,
    },
    Cascade {
        measure: String,
        partitions: Vec<Clusters>,
        range: Option<[f64; 2]>,
    },
    Hierarchical {
        groups: Clusters,
        /// One per group; `"skip"` leaves a block to another argument.
        measures: Vec<String>,
        #[serde(rename = "box", default)]
        domain: Ranges,
        off_diagonal_bound: Option<f64>,
    },
    SecondOrder {
        eps: f64,
        phi: String,
        x: [f64; 2],
        u: [f64; 2],
    },
    Virtual {
        virtual_model: String,
        /// Real state names reproduced by each copy of the virtual state.
        copies: Clusters,
        measure: String,
        #[serde(rename = "box", default)]
        domain: Ranges,
        #[serde(default)]
        virtual_box: Ranges,
    },
    Condition {
        condition: String,
        ranges: Ranges,
        #[serde(default)]
        values: BTreeMap<String, f64>,
    },
    Partition {
        clusters: Clusters,
    },
    Equivariance {
        action: String,
        tol: Option<f64>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub name: String,
    pub model: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub delays: BTreeMap<String, f64>,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    pub horizon: f64,
    #[serde(default)]
    pub solver: SolverSpec,
    pub x0: X0Spec,
    #[serde(default)]
    pub csv: bool,
    #[serde(default, rename = "metric")]
    pub metrics: Vec<MetricSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_method() -> String {
    "rk45".into()
}
fn default_rtol() -> f64 {
    1e-9
}
fn default_atol() -> f64 {
    1e-12
}
fn default_dt_max() -> f64 {
    0.1
}
fn default_dt() -> f64 {
    0.01
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            method: default_method(),
            rtol: default_rtol(),
            atol: default_atol(),
            dt_max: default_dt_max(),
            dt: default_dt(),
        }
    }
}

/// Initial states: explicit `values`, or `count` uniform draws from `random`
/// (every component) or from the model's state box.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct X0Spec {
    pub values: Option<Vec<f64>>,
    pub random: Option<[f64; 2]>,
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct MetricSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub max: Option<f64>,
    pub min: Option<f64>,
    /// Lower bound taken from a certificate's margin, minus `slack`.
    pub min_from_certificate: Option<String>,
    #[serde(default)]
    pub slack: f64,
    #[serde(flatten)]
    pub kind: MetricKind,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricKind {
    /// Largest synchronization error over `window`.
    Sync { partition: Clusters, window: [f64; 2] },
    /// Fitted exponential decay rate of the synchronization error.
    SyncRate { partition: Clusters, window: [f64; 2] },
    /// Fitted convergence rate between consecutive runs.
    Rate { window: [f64; 2] },
    /// `sup |x(t + T) − x(t)|` over the last `tail` before `t_end − T`.
    Period { period: f64, tail: f64 },
    /// `sup ||x(t) − γ x(t + T)||` for `t ≥ after`.
    Hsym { action: String, shift: f64, after: f64 },
    /// `sup |x_k(t) − target|` over `window`.
    Value { state: String, target: f64, window: [f64; 2] },
    /// Distance of the final state from the model's equilibrium (delays removed).
    Equilibrium,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcdSpec {
    pub name: String,
    pub model: Option<String>,
    pub action: String,
    #[serde(default)]
    pub params_i: BTreeMap<String, f64>,
    #[serde(default)]
    pub params_j: BTreeMap<String, f64>,
    /// Input expressions; `{name}` is replaced by the draw of `name`.
    pub inputs_i: BTreeMap<String, String>,
    pub inputs_j: BTreeMap<String, String>,
    #[serde(default)]
    pub draws: Ranges,
    #[serde(default = "one")]
    pub count: usize,
    pub shared: Vec<String>,
    pub x0: Vec<f64>,
    pub horizon: f64,
    #[serde(default)]
    pub solver: SolverSpec,
    /// Gap measured over this window only (default: the whole run).
    pub window: Option<[f64; 2]>,
    #[serde(default = "yes")]
    pub enforce_input_match: bool,
    pub max_gap: Option<f64>,
    pub min_gap: Option<f64>,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut s = Scenario::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        s.base = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn bundled(name: &str) -> Result<Scenario> {
        match BUNDLED.iter().find(|(n, _)| *n == name) {
            Some((_, text)) => Scenario::parse(text).with_context(|| format!("bundled scenario {name}")),
            None => bail!(
                "no bundled scenario `{name}` (available: {})",
                bundled_scenarios().collect::<Vec<_>>().join(", ")
            ),
        }
    }

    /// Resolve a model reference: a file (relative to the scenario), else a
    /// bundled model name.
    pub fn resolve_model(&self, reference: &str) -> Result<LoadedModel> {
        resolve_model(reference, self.base.as_deref())
    }
}

pub fn resolve_model(reference: &str, base: Option<&Path>) -> Result<LoadedModel> {
    let path = match base {
        Some(b) => b.join(reference),
        None => PathBuf::from(reference),
    };
    if path.is_file() {
        return load_model(&path).with_context(|| format!("loading {}", path.display()));
    }
    let stem = reference.strip_suffix(".sysdl").unwrap_or(reference);
    let stem = Path::new(stem).file_name().and_then(|s| s.to_str()).unwrap_or(stem);
    if bundled_source(stem).is_some() && !reference.contains('/') {
        return bundled_model(stem)
            .expect("bundled")
            .with_context(|| format!("bundled model {stem}"));
    }
    if reference.contains('/') || reference.ends_with(".sysdl") {
        bail!("model file not found: {}", path.display());
    }
    bail!("model `{reference}` is neither a file nor a bundled model")
}
