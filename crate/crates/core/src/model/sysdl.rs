//! Line-oriented reader for `.sysdl` model files.
//!
//! ```text
//! # comment
//! model <name>
//! horizon <T>                    sampling horizon for time-varying fields
//! domain positive                default box [0.1, 10] instead of [-5, 5]
//! params                         then `name = expr` lines (earlier params in scope)
//! states                         then names, or `v[3]` for v[1], v[2], v[3]
//! inputs                         then `name = expr-of-t` or `name = external`
//! delays                         then `name = expr`
//! dynamics                       then `d/dt name = expr`
//! box                            then `name in [lo, hi]`
//!
//! template <id> {                network node template
//!   states a b
//!   d/dt a = expr
//! }
//! node <id> : <template>
//! nodes 1..8 : <template>        also `nodes a b c : <template>`
//! coupling <label>(j, i) = expr  optionally `-> comp` before `=`
//! edge 1 -> 2 : <label>          `<->` adds both directions; comma-separate several
//!
//! action <name> permute (1 4)(2 3)
//! action <name> map { x -> x/umin, y -> y } input-map { u -> u/umin }
//! action <name> matrix [0 -1; 1 0]
//! ```
//!
//! Section keywords must start a line; a section's entries may follow on
//! the same line (`states Y Z`).

use std::collections::HashMap;

use super::network::{Coupling, Edge, NetworkSpec, Node, Template};
use super::{InputDecl, InputSource, ModelError, SystemModel, DEFAULT_BOX, POSITIVE_BOX};
use crate::expr::{parse_expression, Expr, MapEnv};

#[derive(Debug, Clone, PartialEq)]
pub enum ActionKind {
    /// Node cycles; `(a b c)` sends node a's slot to b's, b's to c's, c's to a's.
    Permute(Vec<Vec<String>>),
    /// Per-component state map and per-input map (unlisted names map to themselves).
    Map {
        states: Vec<(String, Expr)>,
        inputs: Vec<(String, Expr)>,
    },
    /// Dense matrix acting on the flattened state.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDecl {
    pub name: String,
    pub kind: ActionKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    System(SystemModel),
    Network(NetworkSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedModel {
    pub kind: ModelKind,
    pub actions: Vec<ActionDecl>,
}

impl LoadedModel {
    /// The flat model, assembling networks.
    pub fn into_system(self) -> Result<SystemModel, ModelError> {
        match self.kind {
            ModelKind::System(m) => Ok(m),
            ModelKind::Network(n) => n.assemble(),
        }
    }

    pub fn system(&self) -> Result<SystemModel, ModelError> {
        self.clone().into_system()
    }

    pub fn network(&self) -> Option<&NetworkSpec> {
        match &self.kind {
            ModelKind::Network(n) => Some(n),
            ModelKind::System(_) => None,
        }
    }

    pub fn action(&self, name: &str) -> Option<&ActionDecl> {
        self.actions.iter().find(|a| a.name == name)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Params,
    States,
    Inputs,
    Delays,
    Dynamics,
    Box,
}

struct Reader {
    name: String,
    horizon: Option<f64>,
    positive: bool,
    params: Vec<(String, f64)>,
    states: Vec<String>,
    inputs: Vec<InputDecl>,
    delays: Vec<(String, f64)>,
    dynamics: Vec<(String, Expr, usize)>,
    boxes: Vec<(String, (f64, f64), usize)>,
    templates: Vec<Template>,
    nodes: Vec<Node>,
    couplings: Vec<Coupling>,
    edges: Vec<(String, String, String, usize)>,
    actions: Vec<ActionDecl>,
    section: Section,
    open_template: Option<(Template, Vec<(String, Expr)>, usize)>,
}

fn syntax(line: usize, col: usize, msg: impl Into<String>) -> ModelError {
    ModelError::Syntax {
        line,
        col,
        msg: msg.into(),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_node_id(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Split on `sep` outside parentheses and brackets.
fn split_top(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            c if c == sep && depth == 0 => {
                out.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

/// 1-based column of `part` inside `line` (which it must borrow from).
fn col_of(line: &str, part: &str) -> usize {
    let offset = part.as_ptr() as usize - line.as_ptr() as usize;
    line[..offset].chars().count() + 1
}

impl Reader {
    fn expr(&self, raw: &str, text: &str, line: usize) -> Result<Expr, ModelError> {
        let trimmed = text.trim();
        parse_expression(trimmed).map_err(|e| ModelError::Expr(e.offset(line, col_of(raw, trimmed))))
    }

    fn constant(&self, raw: &str, text: &str, line: usize) -> Result<f64, ModelError> {
        let e = self.expr(raw, text, line)?;
        let env = self
            .params
            .iter()
            .fold(MapEnv::new(), |env, (n, v)| env.with(n, *v));
        e.evaluate(&env)
            .map_err(|err| syntax(line, col_of(raw, text.trim()), format!("not a constant: {err}")))
    }

    fn entry(&mut self, raw: &str, body: &str, line: usize) -> Result<(), ModelError> {
        let body = body.trim();
        if body.is_empty() {
            return Ok(());
        }
        let col = col_of(raw, body);
        match self.section {
            Section::None => Err(syntax(line, col, format!("unexpected `{body}` outside a section"))),
            Section::States => {
                for tok in body.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
                    self.states.extend(expand_state(tok).ok_or_else(|| {
                        syntax(line, col_of(raw, tok), format!("bad state declaration `{tok}`"))
                    })?);
                }
                Ok(())
            }
            Section::Params | Section::Inputs | Section::Delays => {
                let (name, value) = body
                    .split_once('=')
                    .ok_or_else(|| syntax(line, col, "expected `name = value`"))?;
                let name = name.trim();
                if !is_ident(name) {
                    return Err(syntax(line, col, format!("bad name `{name}`")));
                }
                match self.section {
                    Section::Params => {
                        let v = self.constant(raw, value, line)?;
                        self.params.push((name.into(), v));
                    }
                    Section::Delays => {
                        let v = self.constant(raw, value, line)?;
                        self.delays.push((name.into(), v));
                    }
                    _ => {
                        let source = if value.trim() == "external" {
                            InputSource::External
                        } else {
                            InputSource::Signal(self.expr(raw, value, line)?)
                        };
                        self.inputs.push(InputDecl {
                            name: name.into(),
                            source,
                        });
                    }
                }
                Ok(())
            }
            Section::Dynamics => {
                let (name, e) = self.derivative(raw, body, line)?;
                self.dynamics.push((name, e, line));
                Ok(())
            }
            Section::Box => {
                let (name, range) = body
                    .split_once(" in ")
                    .ok_or_else(|| syntax(line, col, "expected `name in [lo, hi]`"))?;
                let range = range.trim();
                let inner = range
                    .strip_prefix('[')
                    .and_then(|r| r.strip_suffix(']'))
                    .ok_or_else(|| syntax(line, col_of(raw, range), "expected `[lo, hi]`"))?;
                let parts = split_top(inner, ',');
                if parts.len() != 2 {
                    return Err(syntax(line, col_of(raw, range), "expected `[lo, hi]`"));
                }
                let lo = self.constant(raw, parts[0], line)?;
                let hi = self.constant(raw, parts[1], line)?;
                if !(lo <= hi) {
                    return Err(syntax(line, col_of(raw, range), "empty box range"));
                }
                self.boxes.push((name.trim().to_string(), (lo, hi), line));
                Ok(())
            }
        }
    }

    /// `d/dt name = expr`
    fn derivative(&self, raw: &str, body: &str, line: usize) -> Result<(String, Expr), ModelError> {
        let rest = body
            .strip_prefix("d/dt")
            .ok_or_else(|| syntax(line, col_of(raw, body), "expected `d/dt name = expr`"))?;
        let (name, e) = rest
            .split_once('=')
            .ok_or_else(|| syntax(line, col_of(raw, body), "expected `=`"))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(syntax(line, col_of(raw, body), "missing state name"));
        }
        Ok((name.to_string(), self.expr(raw, e, line)?))
    }

    fn template_line(&mut self, raw: &str, body: &str, line: usize) -> Result<(), ModelError> {
        let body = body.trim();
        if body.is_empty() {
            return Ok(());
        }
        if body == "}" {
            let (mut t, eqs, start) = self.open_template.take().expect("inside template");
            for s in &t.states {
                let mut hits = eqs.iter().filter(|(n, _)| n == s);
                let e = hits
                    .next()
                    .ok_or_else(|| syntax(start, 1, format!("template `{}`: no dynamics for `{s}`", t.id)))?;
                if hits.next().is_some() {
                    return Err(syntax(start, 1, format!("template `{}`: `{s}` defined twice", t.id)));
                }
                t.dynamics.push(e.1.clone());
            }
            if let Some((n, _)) = eqs.iter().find(|(n, _)| !t.states.contains(n)) {
                return Err(syntax(start, 1, format!("template `{}`: `{n}` is not a state", t.id)));
            }
            self.templates.push(t);
            return Ok(());
        }
        if let Some(rest) = body.strip_prefix("states") {
            for tok in rest.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
                if !is_ident(tok) {
                    return Err(syntax(line, col_of(raw, tok), format!("bad state name `{tok}`")));
                }
                self.open_template.as_mut().unwrap().0.states.push(tok.to_string());
            }
            return Ok(());
        }
        let (name, e) = self.derivative(raw, body, line)?;
        self.open_template.as_mut().unwrap().1.push((name, e));
        Ok(())
    }

    fn line(&mut self, raw: &str, line: usize) -> Result<(), ModelError> {
        let text = raw.split('#').next().unwrap_or("");
        if text.trim().is_empty() {
            return Ok(());
        }
        if self.open_template.is_some() {
            return self.template_line(raw, text, line);
        }
        let trimmed = text.trim_start();
        let (word, rest) = trimmed
            .split_once(char::is_whitespace)
            .unwrap_or((trimmed, ""));
        let col = col_of(raw, trimmed);
        let section = match word {
            "params" => Some(Section::Params),
            "states" => Some(Section::States),
            "inputs" => Some(Section::Inputs),
            "delays" => Some(Section::Delays),
            "dynamics" => Some(Section::Dynamics),
            "box" => Some(Section::Box),
            _ => None,
        };
        if let Some(s) = section {
            self.section = s;
            return self.entry(raw, rest, line);
        }
        match word {
            "model" => {
                let name = rest.trim();
                if name.is_empty() {
                    return Err(syntax(line, col, "missing model name"));
                }
                self.name = name.to_string();
            }
            "horizon" => self.horizon = Some(self.constant(raw, rest, line)?),
            "domain" => match rest.trim() {
                "positive" => self.positive = true,
                "real" => self.positive = false,
                other => return Err(syntax(line, col, format!("unknown domain `{other}`"))),
            },
            "template" => {
                let rest = rest.trim();
                let id = rest
                    .strip_suffix('{')
                    .map(str::trim)
                    .filter(|id| is_ident(id))
                    .ok_or_else(|| syntax(line, col, "expected `template <id> {`"))?;
                self.open_template = Some((
                    Template {
                        id: id.to_string(),
                        states: Vec::new(),
                        dynamics: Vec::new(),
                    },
                    Vec::new(),
                    line,
                ));
                self.section = Section::None;
            }
            "node" | "nodes" => {
                let (ids, tpl) = rest
                    .rsplit_once(':')
                    .ok_or_else(|| syntax(line, col, format!("expected `{word} <ids> : <template>`")))?;
                let tpl = tpl.trim();
                for id in expand_node_ids(ids).ok_or_else(|| syntax(line, col, "bad node list"))? {
                    self.nodes.push(Node {
                        id,
                        template: tpl.to_string(),
                    });
                }
                self.section = Section::None;
            }
            "coupling" => {
                let c = self.coupling(raw, rest, line)?;
                self.couplings.push(c);
                self.section = Section::None;
            }
            "edge" | "edges" => {
                let (list, label) = rest
                    .rsplit_once(':')
                    .ok_or_else(|| syntax(line, col, "expected `edge a -> b : label`"))?;
                let label = label.trim().to_string();
                for item in list.split(',') {
                    let (a, b, both) = if let Some((a, b)) = item.split_once("<->") {
                        (a, b, true)
                    } else if let Some((a, b)) = item.split_once("->") {
                        (a, b, false)
                    } else {
                        return Err(syntax(line, col_of(raw, item), "expected `a -> b` or `a <-> b`"));
                    };
                    let (a, b) = (a.trim().to_string(), b.trim().to_string());
                    self.edges.push((a.clone(), b.clone(), label.clone(), line));
                    if both {
                        self.edges.push((b, a, label.clone(), line));
                    }
                }
                self.section = Section::None;
            }
            "action" => {
                let a = self.action(raw, rest, line)?;
                self.actions.push(a);
                self.section = Section::None;
            }
            _ => return self.entry(raw, text, line),
        }
        Ok(())
    }

    fn coupling(&self, raw: &str, rest: &str, line: usize) -> Result<Coupling, ModelError> {
        let col = col_of(raw, rest.trim_start());
        let (head_part, e) = rest
            .split_once('=')
            .ok_or_else(|| syntax(line, col, "expected `coupling label(j, i) = expr`"))?;
        let (sig, target) = match head_part.split_once("->") {
            Some((s, t)) => (s, Some(t.trim().to_string())),
            None => (head_part, None),
        };
        let (label, args) = sig
            .trim()
            .strip_suffix(')')
            .and_then(|s| s.split_once('('))
            .ok_or_else(|| syntax(line, col, "expected `label(tail, head)`"))?;
        let args: Vec<&str> = args.split(',').map(str::trim).collect();
        if args.len() != 2 || !args.iter().all(|a| is_ident(a)) || !is_ident(label.trim()) {
            return Err(syntax(line, col, "expected `label(tail, head)`"));
        }
        Ok(Coupling {
            label: label.trim().to_string(),
            tail: args[0].to_string(),
            head: args[1].to_string(),
            target,
            expr: self.expr(raw, e, line)?,
        })
    }

    fn action(&self, raw: &str, rest: &str, line: usize) -> Result<ActionDecl, ModelError> {
        let rest = rest.trim();
        let col = col_of(raw, rest);
        let (name, body) = rest
            .split_once(char::is_whitespace)
            .ok_or_else(|| syntax(line, col, "expected `action <name> <kind> ...`"))?;
        let body = body.trim();
        let (kind, args) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
        let kind = match kind {
            "permute" => {
                let mut cycles = Vec::new();
                let mut s = args.trim();
                while !s.is_empty() {
                    let inner = s
                        .strip_prefix('(')
                        .and_then(|r| r.split_once(')'))
                        .ok_or_else(|| syntax(line, col_of(raw, s), "expected `(a b ...)`"))?;
                    let cycle: Vec<String> = inner
                        .0
                        .split(|c: char| c.is_whitespace() || c == ',')
                        .filter(|t| !t.is_empty())
                        .map(String::from)
                        .collect();
                    if cycle.is_empty() {
                        return Err(syntax(line, col_of(raw, s), "empty cycle"));
                    }
                    cycles.push(cycle);
                    s = inner.1.trim_start();
                }
                ActionKind::Permute(cycles)
            }
            "map" => {
                let (states, tail) = self.braced_map(raw, args, line)?;
                let tail = tail.trim();
                let inputs = if tail.is_empty() {
                    Vec::new()
                } else {
                    let m = tail
                        .strip_prefix("input-map")
                        .ok_or_else(|| syntax(line, col_of(raw, tail), "expected `input-map { ... }`"))?;
                    let (inputs, extra) = self.braced_map(raw, m, line)?;
                    if !extra.trim().is_empty() {
                        return Err(syntax(line, col_of(raw, extra.trim()), "trailing text"));
                    }
                    inputs
                };
                ActionKind::Map { states, inputs }
            }
            "matrix" => {
                let a = args.trim();
                let inner = a
                    .strip_prefix('[')
                    .and_then(|r| r.strip_suffix(']'))
                    .ok_or_else(|| syntax(line, col_of(raw, a), "expected `[a b; c d]`"))?;
                let rows = inner
                    .split(';')
                    .map(|row| {
                        row.split(|c: char| c.is_whitespace() || c == ',')
                            .filter(|t| !t.is_empty())
                            .map(|t| self.constant(raw, t, line))
                            .collect::<Result<Vec<f64>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(syntax(line, col_of(raw, a), "action matrix must be square"));
                }
                ActionKind::Matrix(rows)
            }
            other => return Err(syntax(line, col, format!("unknown action kind `{other}`"))),
        };
        Ok(ActionDecl {
            name: name.to_string(),
            kind,
        })
    }

    /// `{ a -> expr, b -> expr }` followed by anything; returns the rest.
    #[allow(clippy::type_complexity)]
    fn braced_map<'a>(
        &self,
        raw: &str,
        s: &'a str,
        line: usize,
    ) -> Result<(Vec<(String, Expr)>, &'a str), ModelError> {
        let s = s.trim_start();
        let body = s
            .strip_prefix('{')
            .ok_or_else(|| syntax(line, col_of(raw, s), "expected `{`"))?;
        let close = body
            .find('}')
            .ok_or_else(|| syntax(line, col_of(raw, s), "missing `}`"))?;
        let mut out = Vec::new();
        for item in split_top(&body[..close], ',') {
            if item.trim().is_empty() {
                continue;
            }
            let (name, e) = item
                .split_once("->")
                .ok_or_else(|| syntax(line, col_of(raw, item), "expected `name -> expr`"))?;
            out.push((name.trim().to_string(), self.expr(raw, e, line)?));
        }
        Ok((out, &body[close + 1..]))
    }

    fn finish(self) -> Result<LoadedModel, ModelError> {
        if let Some((t, _, line)) = &self.open_template {
            return Err(syntax(*line, 1, format!("template `{}` is not closed", t.id)));
        }
        let name = if self.name.is_empty() { "model".to_string() } else { self.name.clone() };
        let is_network = !self.templates.is_empty() || !self.nodes.is_empty();
        let kind = if is_network {
            if !self.states.is_empty() || !self.dynamics.is_empty() {
                return Err(ModelError::Invalid(
                    "networks declare states inside templates, not in a `states` section".into(),
                ));
            }
            let index: HashMap<&str, usize> = self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| (n.id.as_str(), i))
                .collect();
            let mut edges = Vec::new();
            for (a, b, label, line) in &self.edges {
                let lookup = |id: &str| {
                    index
                        .get(id)
                        .copied()
                        .ok_or_else(|| syntax(*line, 1, format!("edge mentions unknown node `{id}`")))
                };
                edges.push(Edge {
                    tail: lookup(a)?,
                    head: lookup(b)?,
                    label: label.clone(),
                });
            }
            let spec = NetworkSpec {
                name,
                params: self.params,
                inputs: self.inputs,
                delays: self.delays,
                templates: self.templates,
                nodes: self.nodes,
                couplings: self.couplings,
                edges,
                boxes: self.boxes.into_iter().map(|(n, r, _)| (n, r)).collect(),
                positive: self.positive,
                horizon: self.horizon,
            };
            // Surface resolution and equivalence errors at load time.
            spec.assemble()?;
            ModelKind::Network(spec)
        } else {
            if !self.edges.is_empty() || !self.couplings.is_empty() {
                return Err(ModelError::Invalid("edges and couplings need network nodes".into()));
            }
            let mut field = Vec::with_capacity(self.states.len());
            for s in &self.states {
                let mut hits = self.dynamics.iter().filter(|(n, _, _)| n == s);
                let (_, e, _) = hits
                    .next()
                    .ok_or_else(|| ModelError::Invalid(format!("no dynamics for state `{s}`")))?;
                if let Some((_, _, line)) = hits.next() {
                    return Err(syntax(*line, 1, format!("second equation for `{s}`")));
                }
                field.push(e.clone());
            }
            if let Some((n, _, line)) = self.dynamics.iter().find(|(n, _, _)| !self.states.contains(n)) {
                return Err(syntax(*line, 1, format!("`{n}` is not a declared state")));
            }
            let mut m = SystemModel::new(
                name,
                self.states,
                self.params,
                self.inputs,
                self.delays,
                field,
                None,
            )?;
            let default = if self.positive { POSITIVE_BOX } else { DEFAULT_BOX };
            m.state_box = vec![default; m.dim()];
            m.horizon = self.horizon;
            for (n, range, line) in &self.boxes {
                if let Some(i) = m.state_index(n) {
                    m.state_box[i] = *range;
                } else if let Some(i) = m.input_index(n) {
                    m.input_box[i] = Some(*range);
                } else {
                    let prefix = format!("{n}[");
                    let hits: Vec<usize> = (0..m.dim()).filter(|&i| m.states[i].starts_with(&prefix)).collect();
                    if hits.is_empty() {
                        return Err(syntax(*line, 1, format!("box names unknown state or input `{n}`")));
                    }
                    for i in hits {
                        m.state_box[i] = *range;
                    }
                }
            }
            ModelKind::System(m)
        };
        Ok(LoadedModel {
            kind,
            actions: self.actions,
        })
    }
}

fn expand_state(tok: &str) -> Option<Vec<String>> {
    if is_ident(tok) {
        return Some(vec![tok.to_string()]);
    }
    let (name, dim) = tok.strip_suffix(']')?.split_once('[')?;
    let dim: usize = dim.parse().ok()?;
    if !is_ident(name) || dim == 0 {
        return None;
    }
    Some((1..=dim).map(|k| format!("{name}[{k}]")).collect())
}

/// `1..8`, or whitespace/comma separated ids.
fn expand_node_ids(s: &str) -> Option<Vec<String>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
        if a > b {
            return None;
        }
        return Some((a..=b).map(|i| i.to_string()).collect());
    }
    let ids: Vec<String> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect();
    (!ids.is_empty() && ids.iter().all(|i| is_node_id(i))).then_some(ids)
}

/// Parse `.sysdl` source text.
pub fn parse_model(text: &str) -> Result<LoadedModel, ModelError> {
    let mut r = Reader {
        name: String::new(),
        horizon: None,
        positive: false,
        params: Vec::new(),
        states: Vec::new(),
        inputs: Vec::new(),
        delays: Vec::new(),
        dynamics: Vec::new(),
        boxes: Vec::new(),
        templates: Vec::new(),
        nodes: Vec::new(),
        couplings: Vec::new(),
        edges: Vec::new(),
        actions: Vec::new(),
        section: Section::None,
        open_template: None,
    };
    for (i, raw) in text.lines().enumerate() {
        r.line(raw, i + 1)?;
    }
    r.finish()
}
