//! Networks of template-instantiated nodes joined by labelled edges.
//!
//! Node equivalence is "same template"; edge equivalence is "same coupling
//! label". A coupling `label(j, i) -> c = expr` contributes `expr` to
//! component `c` (default: the first) of every head node `i` with an edge
//! `j -> i : label`. Inside `expr`, `j`/`i` denote the first component of
//! the tail/head node and `j[k]`/`i[k]` the k-th (1-based).

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::{InputDecl, ModelError, NodeBlock, SystemModel, DEFAULT_BOX, POSITIVE_BOX};
use crate::expr::{Expr, VarRef};

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub id: String,
    pub states: Vec<String>,
    /// Intrinsic dynamics over the template's local state names.
    pub dynamics: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Node {
    pub id: String,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub label: String,
    pub tail: String,
    pub head: String,
    /// Head component receiving the term; `None` means the first.
    pub target: Option<String>,
    pub expr: Expr,
}

/// Directed edge between node indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkSpec {
    pub name: String,
    pub params: Vec<(String, f64)>,
    pub inputs: Vec<InputDecl>,
    pub delays: Vec<(String, f64)>,
    pub templates: Vec<Template>,
    pub nodes: Vec<Node>,
    pub couplings: Vec<Coupling>,
    pub edges: Vec<Edge>,
    /// Box ranges keyed by flattened component, template-local state, or input.
    pub boxes: Vec<(String, (f64, f64))>,
    pub positive: bool,
    pub horizon: Option<f64>,
}

/// Assignment of nodes to clusters, numbered by first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    assignment: Vec<usize>,
    k: usize,
}

impl Partition {
    /// Canonicalize an arbitrary labelling: clusters are renumbered in order
    /// of their first node.
    pub fn from_assignment<T: Eq + std::hash::Hash + Clone>(raw: &[T]) -> Partition {
        let mut ids: HashMap<T, usize> = HashMap::new();
        let assignment: Vec<usize> = raw
            .iter()
            .map(|c| {
                let next = ids.len();
                *ids.entry(c.clone()).or_insert(next)
            })
            .collect();
        Partition {
            k: ids.len(),
            assignment,
        }
    }

    /// Build from clusters of node indices; they must cover `0..n` exactly once.
    pub fn from_clusters(n: usize, clusters: &[Vec<usize>]) -> Result<Partition, ModelError> {
        let mut raw = vec![usize::MAX; n];
        for (c, members) in clusters.iter().enumerate() {
            if members.is_empty() {
                return Err(ModelError::Invalid("empty cluster".into()));
            }
            for &i in members {
                if i >= n || raw[i] != usize::MAX {
                    return Err(ModelError::Invalid(format!("node index {i} repeated or out of range")));
                }
                raw[i] = c;
            }
        }
        if raw.contains(&usize::MAX) {
            return Err(ModelError::Invalid("clusters do not cover every node".into()));
        }
        Ok(Partition::from_assignment(&raw))
    }

    pub fn discrete(n: usize) -> Partition {
        Partition {
            assignment: (0..n).collect(),
            k: n,
        }
    }

    pub fn single(n: usize) -> Partition {
        Partition {
            assignment: vec![0; n],
            k: usize::from(n > 0),
        }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cluster_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// True when every cluster of `self` lies inside a cluster of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        if self.len() != coarser.len() {
            return false;
        }
        let mut image = vec![None; self.k];
        self.assignment.iter().zip(&coarser.assignment).all(|(&a, &b)| {
            match image[a] {
                None => {
                    image[a] = Some(b);
                    true
                }
                Some(prev) => prev == b,
            }
        })
    }

    /// Merge clusters `a` and `b`.
    pub fn merged(&self, a: usize, b: usize) -> Partition {
        let raw: Vec<usize> = self
            .assignment
            .iter()
            .map(|&c| if c == b { a } else { c })
            .collect();
        Partition::from_assignment(&raw)
    }
}

/// Iterated color refinement on a labelled digraph.
///
/// `edges` holds `(tail, head, label)`; the result is the coarsest partition
/// refining `seed` in which same-colored nodes receive, for every
/// `(label, tail color)`, the same number of edges.
pub fn refine_coloring(n: usize, edges: &[(usize, usize, usize)], seed: &[usize]) -> Partition {
    let mut incoming: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for &(tail, head, label) in edges {
        incoming[head].push((tail, label));
    }
    let mut current = Partition::from_assignment(seed);
    loop {
        let signatures: Vec<(usize, Vec<(usize, usize, usize)>)> = (0..n)
            .map(|i| {
                let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
                for &(tail, label) in &incoming[i] {
                    *counts.entry((label, current.assignment[tail])).or_default() += 1;
                }
                let sig = counts.into_iter().map(|((l, c), m)| (l, c, m)).collect();
                (current.assignment[i], sig)
            })
            .collect();
        let next = Partition::from_assignment(&signatures);
        if next.k == current.k {
            return next;
        }
        current = next;
    }
}

/// First violation of balance, if any, as a human-readable message.
pub fn balance_violation(n: usize, edges: &[(usize, usize, usize)], p: &Partition) -> Option<String> {
    let mut counts: Vec<BTreeMap<(usize, usize), usize>> = vec![BTreeMap::new(); n];
    for &(tail, head, label) in edges {
        *counts[head].entry((label, p.cluster_of(tail))).or_default() += 1;
    }
    for members in p.clusters() {
        let first = members[0];
        for &other in &members[1..] {
            if counts[other] != counts[first] {
                return Some(format!(
                    "nodes {first} and {other} share a cluster but receive different inputs"
                ));
            }
        }
    }
    None
}

/// Balance check for a network partition (template agreement included).
pub fn is_balanced(spec: &NetworkSpec, p: &Partition) -> Result<(), ModelError> {
    if p.len() != spec.nodes.len() {
        return Err(ModelError::Invalid(format!(
            "partition covers {} nodes, network has {}",
            p.len(),
            spec.nodes.len()
        )));
    }
    for members in p.clusters() {
        let t = &spec.nodes[members[0]].template;
        if let Some(&bad) = members.iter().find(|&&m| &spec.nodes[m].template != t) {
            return Err(ModelError::Unbalanced(format!(
                "nodes {} and {} have different templates",
                spec.nodes[members[0]].id, spec.nodes[bad].id
            )));
        }
    }
    let (edges, _) = spec.labelled_edges();
    match balance_violation(spec.nodes.len(), &edges, p) {
        None => Ok(()),
        Some(msg) => Err(ModelError::Unbalanced(msg)),
    }
}

/// Coarsest balanced refinement of `seed` (default: the template coloring).
pub fn coarsest_balanced_partition(spec: &NetworkSpec, seed: Option<&Partition>) -> Partition {
    let n = spec.nodes.len();
    let mut raw: Vec<(usize, String)> = spec
        .nodes
        .iter()
        .map(|node| (0, node.template.clone()))
        .collect();
    if let Some(seed) = seed {
        for (i, r) in raw.iter_mut().enumerate() {
            r.0 = seed.cluster_of(i);
        }
    }
    let (edges, _) = spec.labelled_edges();
    refine_coloring(n, &edges, &Partition::from_assignment(&raw).assignment)
}

impl NetworkSpec {
    pub fn template(&self, id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn coupling(&self, label: &str) -> Option<&Coupling> {
        self.couplings.iter().find(|c| c.label == label)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Number of scalar state components after flattening.
    pub fn dim(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| self.template(&n.template).map_or(0, |t| t.states.len()))
            .sum()
    }

    /// Edges as `(tail, head, label index)`, skipping self-loops whose
    /// coupling vanishes identically when tail and head coincide.
    pub fn labelled_edges(&self) -> (Vec<(usize, usize, usize)>, Vec<String>) {
        let mut labels: Vec<String> = Vec::new();
        let mut out = Vec::new();
        for e in &self.edges {
            if e.tail == e.head && self.coupling(&e.label).is_some_and(|c| c.vanishes_on_diagonal()) {
                continue;
            }
            let l = match labels.iter().position(|l| l == &e.label) {
                Some(l) => l,
                None => {
                    labels.push(e.label.clone());
                    labels.len() - 1
                }
            };
            out.push((e.tail, e.head, l));
        }
        (out, labels)
    }

    /// Check names, references and edge equivalence.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.templates {
            if !seen.insert(&t.id) {
                return Err(ModelError::Invalid(format!("template `{}` declared twice", t.id)));
            }
            if t.states.is_empty() || t.states.len() != t.dynamics.len() {
                return Err(ModelError::Invalid(format!(
                    "template `{}` needs one `d/dt` line per state",
                    t.id
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if !seen.insert(&n.id) {
                return Err(ModelError::Invalid(format!("node `{}` declared twice", n.id)));
            }
            if self.template(&n.template).is_none() {
                return Err(ModelError::Invalid(format!(
                    "node `{}` uses unknown template `{}`",
                    n.id, n.template
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.couplings {
            if !seen.insert(&c.label) {
                return Err(ModelError::Invalid(format!("coupling `{}` declared twice", c.label)));
            }
        }
        let mut ends: HashMap<&str, (usize, usize)> = HashMap::new();
        for e in &self.edges {
            if e.tail >= self.nodes.len() || e.head >= self.nodes.len() {
                return Err(ModelError::Invalid("edge endpoint out of range".into()));
            }
            let c = self
                .coupling(&e.label)
                .ok_or_else(|| ModelError::Invalid(format!("edge uses unknown coupling `{}`", e.label)))?;
            if let Some(target) = &c.target {
                let ht = self.template(&self.nodes[e.head].template).expect("validated above");
                if !ht.states.contains(target) {
                    return Err(ModelError::Invalid(format!(
                        "coupling `{}` targets `{target}`, which node `{}` does not have",
                        c.label, self.nodes[e.head].id
                    )));
                }
            }
            match ends.get(e.label.as_str()) {
                None => {
                    ends.insert(&e.label, (e.tail, e.head));
                }
                Some(&(t0, h0)) => {
                    for (a, b) in [(t0, e.tail), (h0, e.head)] {
                        if self.nodes[a].template != self.nodes[b].template {
                            return Err(ModelError::EdgeEquivalence {
                                label: e.label.clone(),
                                a: self.nodes[a].id.clone(),
                                b: self.nodes[b].id.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Flattened component name of a node's local state.
    pub fn component_name(state: &str, node: &str) -> String {
        format!("{state}_{node}")
    }

    fn node_bindings(&self, node: usize, alias: &str) -> HashMap<String, Expr> {
        let n = &self.nodes[node];
        let t = self.template(&n.template).expect("validated");
        let mut out = HashMap::new();
        for (k, s) in t.states.iter().enumerate() {
            let v = Expr::Var(VarRef::unresolved(Self::component_name(s, &n.id)));
            if k == 0 {
                out.insert(alias.to_string(), v.clone());
            }
            out.insert(format!("{alias}[{}]", k + 1), v);
        }
        out
    }

    /// Flatten into a [`SystemModel`].
    pub fn assemble(&self) -> Result<SystemModel, ModelError> {
        self.validate()?;
        let mut states = Vec::new();
        let mut field = Vec::new();
        let mut blocks = Vec::new();
        let mut offset: Vec<usize> = Vec::new();
        for n in &self.nodes {
            let t = self.template(&n.template).expect("validated");
            let local: HashMap<String, Expr> = t
                .states
                .iter()
                .map(|s| (s.clone(), Expr::Var(VarRef::unresolved(Self::component_name(s, &n.id)))))
                .collect();
            offset.push(states.len());
            blocks.push(NodeBlock {
                id: n.id.clone(),
                template: n.template.clone(),
                components: (states.len()..states.len() + t.states.len()).collect(),
            });
            for (s, f) in t.states.iter().zip(&t.dynamics) {
                states.push(Self::component_name(s, &n.id));
                field.push(f.substitute(&local));
            }
        }
        for e in &self.edges {
            let c = self.coupling(&e.label).expect("validated");
            let mut bind = self.node_bindings(e.tail, &c.tail);
            bind.extend(self.node_bindings(e.head, &c.head));
            let ht = self.template(&self.nodes[e.head].template).expect("validated");
            let comp = match &c.target {
                None => 0,
                Some(name) => ht.states.iter().position(|s| s == name).expect("validated"),
            };
            let slot = offset[e.head] + comp;
            let term = c.expr.substitute(&bind);
            let prev = std::mem::replace(&mut field[slot], Expr::Num(0.0));
            field[slot] = Expr::Bin(crate::expr::BinOp::Add, Box::new(prev), Box::new(term));
        }
        let mut m = SystemModel::new(
            self.name.clone(),
            states,
            self.params.clone(),
            self.inputs.clone(),
            self.delays.clone(),
            field,
            Some(blocks),
        )?;
        let default = if self.positive { POSITIVE_BOX } else { DEFAULT_BOX };
        m.state_box = vec![default; m.dim()];
        m.horizon = self.horizon;
        for (name, range) in &self.boxes {
            self.apply_box(&mut m, name, *range)?;
        }
        Ok(m)
    }

    fn apply_box(&self, m: &mut SystemModel, name: &str, range: (f64, f64)) -> Result<(), ModelError> {
        if let Some(i) = m.state_index(name) {
            m.state_box[i] = range;
            return Ok(());
        }
        if let Some(i) = m.input_index(name) {
            m.input_box[i] = Some(range);
            return Ok(());
        }
        let mut hit = false;
        for n in &self.nodes {
            let t = self.template(&n.template).expect("validated");
            if t.states.iter().any(|s| s == name) {
                let i = m
                    .state_index(&Self::component_name(name, &n.id))
                    .expect("flattened name exists");
                m.state_box[i] = range;
                hit = true;
            }
        }
        if hit {
            Ok(())
        } else {
            Err(ModelError::Invalid(format!("box names unknown state or input `{name}`")))
        }
    }

    /// Network on the clusters of a balanced partition: one node per
    /// cluster (id = member ids joined by `_`), carrying the inputs of the
    /// cluster's first member with tails mapped to clusters.
    pub fn quotient(&self, p: &Partition) -> Result<NetworkSpec, ModelError> {
        self.validate()?;
        is_balanced(self, p)?;
        let clusters = p.clusters();
        let nodes: Vec<Node> = clusters
            .iter()
            .map(|members| Node {
                id: members
                    .iter()
                    .map(|&m| self.nodes[m].id.as_str())
                    .collect::<Vec<_>>()
                    .join("_"),
                template: self.nodes[members[0]].template.clone(),
            })
            .collect();
        let mut edges = Vec::new();
        for e in &self.edges {
            if e.head != clusters[p.cluster_of(e.head)][0] {
                continue;
            }
            let q = Edge {
                tail: p.cluster_of(e.tail),
                head: p.cluster_of(e.head),
                label: e.label.clone(),
            };
            if q.tail == q.head && self.coupling(&q.label).is_some_and(|c| c.vanishes_on_diagonal()) {
                continue;
            }
            edges.push(q);
        }
        // Boxes keyed by a flattened name follow their node's cluster representative.
        let mut boxes = Vec::new();
        for (name, range) in &self.boxes {
            let mut mapped = false;
            for (c, members) in clusters.iter().enumerate() {
                let rep = &self.nodes[members[0]];
                let t = self.template(&rep.template).expect("validated");
                for s in &t.states {
                    if *name == Self::component_name(s, &rep.id) {
                        boxes.push((Self::component_name(s, &nodes[c].id), *range));
                        mapped = true;
                    }
                }
            }
            let flattened_elsewhere = self.nodes.iter().any(|n| {
                self.template(&n.template)
                    .expect("validated")
                    .states
                    .iter()
                    .any(|s| *name == Self::component_name(s, &n.id))
            });
            if !mapped && !flattened_elsewhere {
                boxes.push((name.clone(), *range));
            }
        }
        Ok(NetworkSpec {
            name: format!("{}/quotient", self.name),
            nodes,
            edges,
            boxes,
            ..self.clone()
        })
    }
}

impl Coupling {
    /// Whether the coupling folds to zero when tail and head are the same node.
    pub fn vanishes_on_diagonal(&self) -> bool {
        let mut bind = HashMap::new();
        // Components up to a generous bound; unused ones are harmless.
        for k in 1..=16 {
            let v = Expr::Var(VarRef::unresolved(format!("__diag[{k}]")));
            if k == 1 {
                bind.insert(self.tail.clone(), v.clone());
                bind.insert(self.head.clone(), v.clone());
            }
            bind.insert(format!("{}[{k}]", self.tail), v.clone());
            bind.insert(format!("{}[{k}]", self.head), v);
        }
        self.expr.substitute(&bind).simplify().is_zero()
    }
}

/// Reduced model with one representative per cluster of a balanced partition.
pub fn quotient_system(spec: &NetworkSpec, p: &Partition) -> Result<SystemModel, ModelError> {
    spec.quotient(p)?.assemble()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;

    fn e(s: &str) -> Expr {
        parse_expression(s).unwrap()
    }

    fn chain(n: usize, k: f64) -> NetworkSpec {
        let mut edges = Vec::new();
        for i in 0..n - 1 {
            edges.push(Edge { tail: i, head: i + 1, label: "nn".into() });
            edges.push(Edge { tail: i + 1, head: i, label: "nn".into() });
        }
        NetworkSpec {
            name: "chain".into(),
            params: vec![("k".into(), k)],
            templates: vec![Template {
                id: "cell".into(),
                states: vec!["x".into()],
                dynamics: vec![e("-x")],
            }],
            nodes: (1..=n)
                .map(|i| Node { id: i.to_string(), template: "cell".into() })
                .collect(),
            couplings: vec![Coupling {
                label: "nn".into(),
                tail: "j".into(),
                head: "i".into(),
                target: None,
                expr: e("k*j - k*i"),
            }],
            edges,
            ..Default::default()
        }
    }

    #[test]
    fn chain_jacobian_is_shifted_laplacian() {
        let m = chain(4, 1.0).assemble().unwrap();
        let j = m.jacobian().unwrap();
        let num = j
            .eval(&crate::expr::SlotEnv {
                states: &[0.0; 4],
                params: &[1.0],
                inputs: &[],
                t: 0.0,
                history: None,
            })
            .unwrap();
        let want = nalgebra::DMatrix::from_row_slice(
            4,
            4,
            &[-2.0, 1.0, 0.0, 0.0, 1.0, -3.0, 1.0, 0.0, 0.0, 1.0, -3.0, 1.0, 0.0, 0.0, 1.0, -2.0],
        );
        assert_eq!(num, want);
        assert_eq!(m.states, vec!["x_1", "x_2", "x_3", "x_4"]);
    }

    #[test]
    fn chain_partitions_by_mirror_symmetry() {
        let p = coarsest_balanced_partition(&chain(4, 1.0), None);
        assert_eq!(p.clusters(), vec![vec![0, 3], vec![1, 2]]);
        let p = coarsest_balanced_partition(&chain(8, 1.0), None);
        assert_eq!(p.clusters(), vec![vec![0, 7], vec![1, 6], vec![2, 5], vec![3, 4]]);
    }

    #[test]
    fn quotient_drops_vanishing_self_loops() {
        let spec = chain(4, 1.0);
        let p = coarsest_balanced_partition(&spec, None);
        let q = spec.quotient(&p).unwrap();
        assert_eq!(q.nodes.len(), 2);
        assert_eq!(q.nodes[0].id, "1_4");
        assert_eq!(q.edges.len(), 2);
        // the two-node quotient is itself balanced under the single cluster
        assert!(is_balanced(&q, &Partition::single(2)).is_ok());
        let m = q.assemble().unwrap();
        let f = m.eval_field(&[1.0, 3.0], 0.0).unwrap();
        assert_eq!(f, vec![-1.0 + 2.0, -3.0 - 2.0]);
    }

    #[test]
    fn discrete_quotient_reproduces_the_network() {
        let spec = chain(3, 0.5);
        let q = spec.quotient(&Partition::discrete(3)).unwrap().assemble().unwrap();
        let full = spec.assemble().unwrap();
        let x = [0.3, -1.0, 2.0];
        assert_eq!(q.eval_field(&x, 0.0).unwrap(), full.eval_field(&x, 0.0).unwrap());
    }

    #[test]
    fn unbalanced_quotient_is_rejected() {
        let spec = chain(4, 1.0);
        let p = Partition::from_clusters(4, &[vec![0, 1], vec![2, 3]]).unwrap();
        assert!(matches!(spec.quotient(&p), Err(ModelError::Unbalanced(_))));
    }

    #[test]
    fn heterogeneous_templates_give_singletons() {
        let mut spec = chain(3, 1.0);
        for (i, n) in spec.nodes.iter_mut().enumerate() {
            n.template = format!("t{i}");
        }
        spec.templates = (0..3)
            .map(|i| Template { id: format!("t{i}"), states: vec!["x".into()], dynamics: vec![e("-x")] })
            .collect();
        spec.edges.clear();
        assert_eq!(coarsest_balanced_partition(&spec, None).k(), 3);
    }

    #[test]
    fn edge_equivalence_violation() {
        let mut spec = chain(2, 1.0);
        spec.templates.push(Template { id: "other".into(), states: vec!["x".into()], dynamics: vec![e("-2*x")] });
        spec.nodes.push(Node { id: "3".into(), template: "other".into() });
        spec.edges.push(Edge { tail: 2, head: 1, label: "nn".into() });
        assert!(matches!(spec.validate(), Err(ModelError::EdgeEquivalence { .. })));
    }

    #[test]
    fn partition_helpers() {
        let p = Partition::from_assignment(&[5, 5, 2, 7]);
        assert_eq!(p.assignment(), &[0, 0, 1, 2]);
        assert!(Partition::discrete(4).refines(&p));
        assert!(!p.refines(&Partition::discrete(4)));
        assert_eq!(p.merged(1, 2).k(), 2);
        assert!(Partition::from_clusters(3, &[vec![0], vec![0, 1, 2]]).is_err());
    }
}
