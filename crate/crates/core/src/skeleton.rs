//! Computation skeletons: DAGs with `n` input nodes, activation-labelled
//! internal nodes and a single output node.
//!
//! A [`SkeletonSpec`] is an unchecked declaration (as written in a file or
//! built in code). [`Skeleton::validate`] checks it and produces a
//! [`Skeleton`] whose nodes are stored in canonical order: input nodes in
//! declaration order, then internal nodes in a topological order that breaks
//! ties by declaration order. Node indices are positions in that order, so
//! iterating `0..len()` is a valid evaluation order.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::activation::ActivationSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown activation `{name}`")]
    UnknownActivation { line: usize, name: String },
    #[error("duplicate node identifier `{0}`")]
    DuplicateId(String),
    #[error("node `{node}` references undefined parent `{parent}`")]
    DanglingParent { node: String, parent: String },
    #[error("cycle detected through node `{0}`")]
    Cycle(String),
    #[error("internal node `{0}` has no activation")]
    MissingActivation(String),
    #[error("internal node `{0}` has no parents")]
    NoParents(String),
    #[error("skeleton has no output node")]
    MissingOutput,
    #[error("skeleton has more than one output: {0:?}")]
    MultipleOutputs(Vec<String>),
    #[error("output `{0}` must be an internal node")]
    OutputIsInput(String),
    #[error("output `{0}` is not a declared node")]
    UnknownOutput(String),
    #[error("skeleton has no input nodes")]
    NoInputs,
    #[error("activation `{activation}` of node `{node}` is not C-bounded")]
    NotCBounded { node: String, activation: String },
}

/// Unchecked declaration of a node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeDecl {
    Input {
        name: String,
    },
    Internal {
        name: String,
        activation: Option<ActivationSpec>,
        parents: Vec<String>,
    },
}

impl NodeDecl {
    pub fn name(&self) -> &str {
        match self {
            NodeDecl::Input { name } | NodeDecl::Internal { name, .. } => name,
        }
    }
}

/// Unchecked skeleton declaration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkeletonSpec {
    pub nodes: Vec<NodeDecl>,
    pub outputs: Vec<String>,
}

impl SkeletonSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(mut self, name: impl Into<String>) -> Self {
        self.nodes.push(NodeDecl::Input { name: name.into() });
        self
    }

    pub fn node<S: AsRef<str>>(
        mut self,
        name: impl Into<String>,
        activation: ActivationSpec,
        parents: &[S],
    ) -> Self {
        self.nodes.push(NodeDecl::Internal {
            name: name.into(),
            activation: Some(activation),
            parents: parents.iter().map(|p| p.as_ref().to_string()).collect(),
        });
        self
    }

    pub fn output(mut self, name: impl Into<String>) -> Self {
        self.outputs.push(name.into());
        self
    }

    pub fn validate(self) -> Result<Skeleton, SkeletonError> {
        Skeleton::validate(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// Input node reading block `block` of the input.
    Input { block: usize },
    Internal {
        activation: ActivationSpec,
        parents: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

impl Node {
    pub fn is_input(&self) -> bool {
        matches!(self.kind, NodeKind::Input { .. })
    }

    pub fn parents(&self) -> &[usize] {
        match &self.kind {
            NodeKind::Input { .. } => &[],
            NodeKind::Internal { parents, .. } => parents,
        }
    }

    pub fn activation(&self) -> Option<&ActivationSpec> {
        match &self.kind {
            NodeKind::Input { .. } => None,
            NodeKind::Internal { activation, .. } => Some(activation),
        }
    }
}

/// A validated computation skeleton. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    nodes: Vec<Node>,
    output: usize,
    n_inputs: usize,
    depths: Vec<usize>,
}

impl Skeleton {
    pub fn validate(spec: SkeletonSpec) -> Result<Self, SkeletonError> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, decl) in spec.nodes.iter().enumerate() {
            if index.insert(decl.name(), i).is_some() {
                return Err(SkeletonError::DuplicateId(decl.name().to_string()));
            }
        }
        let n_inputs = spec
            .nodes
            .iter()
            .filter(|d| matches!(d, NodeDecl::Input { .. }))
            .count();
        if n_inputs == 0 {
            return Err(SkeletonError::NoInputs);
        }

        let mut parent_idx: Vec<Vec<usize>> = Vec::with_capacity(spec.nodes.len());
        for decl in &spec.nodes {
            match decl {
                NodeDecl::Input { .. } => parent_idx.push(Vec::new()),
                NodeDecl::Internal {
                    name,
                    activation,
                    parents,
                } => {
                    if activation.is_none() {
                        return Err(SkeletonError::MissingActivation(name.clone()));
                    }
                    if parents.is_empty() {
                        return Err(SkeletonError::NoParents(name.clone()));
                    }
                    let mut ps = Vec::with_capacity(parents.len());
                    for p in parents {
                        match index.get(p.as_str()) {
                            Some(&j) => ps.push(j),
                            None => {
                                return Err(SkeletonError::DanglingParent {
                                    node: name.clone(),
                                    parent: p.clone(),
                                })
                            }
                        }
                    }
                    parent_idx.push(ps);
                }
            }
        }

        let output_decl = match spec.outputs.as_slice() {
            [] => return Err(SkeletonError::MissingOutput),
            [one] => one,
            many => return Err(SkeletonError::MultipleOutputs(many.to_vec())),
        };
        let output_old = *index
            .get(output_decl.as_str())
            .ok_or_else(|| SkeletonError::UnknownOutput(output_decl.clone()))?;
        if matches!(spec.nodes[output_old], NodeDecl::Input { .. }) {
            return Err(SkeletonError::OutputIsInput(output_decl.clone()));
        }

        // Kahn's algorithm; ready nodes are taken smallest declaration index first.
        let n = spec.nodes.len();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut pending = vec![0usize; n];
        for (v, ps) in parent_idx.iter().enumerate() {
            for &p in ps {
                children[p].push(v);
                pending[v] += 1;
            }
        }
        let mut order: Vec<usize> = (0..n)
            .filter(|&i| matches!(spec.nodes[i], NodeDecl::Input { .. }))
            .collect();
        let mut ready: BTreeSet<usize> = BTreeSet::new();
        let release = |v: usize, pending: &mut Vec<usize>, ready: &mut BTreeSet<usize>| {
            for &c in &children[v] {
                pending[c] -= 1;
                if pending[c] == 0 {
                    ready.insert(c);
                }
            }
        };
        for i in 0..n {
            if matches!(spec.nodes[i], NodeDecl::Input { .. }) {
                release(i, &mut pending, &mut ready);
            }
        }
        // Internal nodes whose parents are all internal and never released are
        // exactly the nodes on or downstream of a cycle.
        while let Some(v) = ready.pop_first() {
            order.push(v);
            release(v, &mut pending, &mut ready);
        }
        if order.len() != n {
            let placed: BTreeSet<usize> = order.iter().copied().collect();
            let stuck = (0..n).find(|i| !placed.contains(i)).unwrap();
            return Err(SkeletonError::Cycle(spec.nodes[stuck].name().to_string()));
        }

        let sinks: Vec<String> = (0..n)
            .filter(|&i| children[i].is_empty() && i != output_old)
            .map(|i| spec.nodes[i].name().to_string())
            .collect();
        if !sinks.is_empty() {
            let mut all = vec![output_decl.clone()];
            all.extend(sinks);
            return Err(SkeletonError::MultipleOutputs(all));
        }

        let mut new_index = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let mut nodes = Vec::with_capacity(n);
        let mut depths = Vec::with_capacity(n);
        let mut block = 0;
        for &old in &order {
            match &spec.nodes[old] {
                NodeDecl::Input { name } => {
                    nodes.push(Node {
                        name: name.clone(),
                        kind: NodeKind::Input { block },
                    });
                    block += 1;
                    depths.push(0);
                }
                NodeDecl::Internal {
                    name, activation, ..
                } => {
                    let parents: Vec<usize> =
                        parent_idx[old].iter().map(|&p| new_index[p]).collect();
                    let depth = 1 + parents.iter().map(|&p| depths[p]).max().unwrap();
                    depths.push(depth);
                    nodes.push(Node {
                        name: name.clone(),
                        kind: NodeKind::Internal {
                            activation: activation.unwrap(),
                            parents,
                        },
                    });
                }
            }
        }

        Ok(Self {
            nodes,
            output: new_index[output_old],
            n_inputs,
            depths,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, v: usize) -> &Node {
        &self.nodes[v]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of input nodes (`n`).
    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    /// `|S|`: the number of non-input nodes.
    pub fn size(&self) -> usize {
        self.nodes.len() - self.n_inputs
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Internal node indices in evaluation order.
    pub fn internal_nodes(&self) -> std::ops::Range<usize> {
        self.n_inputs..self.nodes.len()
    }

    pub fn deg(&self, v: usize) -> usize {
        self.nodes[v].parents().len()
    }

    pub fn node_depth(&self, v: usize) -> usize {
        self.depths[v]
    }

    pub fn node_depths(&self) -> &[usize] {
        &self.depths
    }

    /// Longest input-to-output path length.
    pub fn depth(&self) -> usize {
        self.depths[self.output]
    }

    pub fn metrics(&self) -> SkeletonMetrics {
        let depth = self.depth();
        let mut comp = 1.0;
        for level in 1..=depth {
            let widest = self
                .internal_nodes()
                .filter(|&v| self.depths[v] == level)
                .map(|v| self.deg(v) + 1)
                .max()
                .unwrap_or(1);
            comp *= widest as f64;
        }
        let mut c_bounded = Some(0.0f64);
        let mut not_bounded = None;
        let mut c_lip = 0.0f64;
        for v in self.internal_nodes() {
            let act = self.nodes[v].activation().unwrap();
            c_lip = c_lip.max(act.c_lipschitz()).max(act.eval(0.0).abs());
            match (act.c_bounded(), c_bounded) {
                (Some(c), Some(acc)) => c_bounded = Some(acc.max(c)),
                (None, _) => {
                    c_bounded = None;
                    not_bounded.get_or_insert((self.nodes[v].name.clone(), act.name()));
                }
                _ => {}
            }
        }
        SkeletonMetrics {
            depth,
            comp,
            c_bounded,
            c_lipschitz: c_lip,
            not_bounded: not_bounded.map(|(n, a)| (n, a.to_string())),
            node_depths: self.depths.clone(),
        }
    }

    /// Canonical line-format text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Input { .. } => {
                    let _ = writeln!(out, "input {}", node.name);
                }
                NodeKind::Internal {
                    activation,
                    parents,
                } => {
                    let _ = write!(out, "node {} {}", node.name, activation.name());
                    for &p in parents {
                        let _ = write!(out, " {}", self.nodes[p].name);
                    }
                    out.push('\n');
                }
            }
        }
        let _ = writeln!(out, "output {}", self.nodes[self.output].name);
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn parse(text: &str) -> Result<Self, SkeletonError> {
        parse_spec(text)?.validate()
    }
}

impl std::str::FromStr for Skeleton {
    type Err = SkeletonError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Parse the line format without validating the graph.
///
/// ```text
/// # comment
/// input x1
/// input x2
/// node h relu x1 x2
/// output h
/// ```
pub fn parse_spec(text: &str) -> Result<SkeletonSpec, SkeletonError> {
    let mut spec = SkeletonSpec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut tokens = content.split_whitespace();
        let Some(keyword) = tokens.next() else {
            continue;
        };
        let rest: Vec<&str> = tokens.collect();
        let syntax = |message: &str| SkeletonError::Syntax {
            line,
            message: message.to_string(),
        };
        let mut declare = |name: &str| -> Result<(), SkeletonError> {
            if let Some(prev) = seen.insert(name.to_string(), line) {
                return Err(SkeletonError::Syntax {
                    line,
                    message: format!("duplicate node identifier `{name}` (first declared on line {prev})"),
                });
            }
            Ok(())
        };
        match keyword {
            "input" => {
                let [name] = rest.as_slice() else {
                    return Err(syntax("expected `input <id>`"));
                };
                declare(name)?;
                spec.nodes.push(NodeDecl::Input {
                    name: name.to_string(),
                });
            }
            "node" => {
                let [name, act, parents @ ..] = rest.as_slice() else {
                    return Err(syntax("expected `node <id> <activation> <parent-id>...`"));
                };
                if parents.is_empty() {
                    return Err(syntax("node needs at least one parent"));
                }
                let activation = ActivationSpec::from_name(act).ok_or_else(|| {
                    SkeletonError::UnknownActivation {
                        line,
                        name: act.to_string(),
                    }
                })?;
                declare(name)?;
                spec.nodes.push(NodeDecl::Internal {
                    name: name.to_string(),
                    activation: Some(activation),
                    parents: parents.iter().map(|p| p.to_string()).collect(),
                });
            }
            "output" => {
                let [name] = rest.as_slice() else {
                    return Err(syntax("expected `output <id>`"));
                };
                if !spec.outputs.is_empty() {
                    return Err(syntax("more than one `output` line"));
                }
                spec.outputs.push(name.to_string());
            }
            other => return Err(syntax(&format!("unknown keyword `{other}`"))),
        }
    }
    Ok(spec)
}

/// Canonical form of a skeleton document.
pub fn canonicalize(text: &str) -> Result<String, SkeletonError> {
    Ok(Skeleton::parse(text)?.to_text())
}

/// Complexity constants of a skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonMetrics {
    pub depth: usize,
    /// `∏_{i=1}^{depth} max_{depth(v)=i} (deg(v) + 1)`.
    pub comp: f64,
    c_bounded: Option<f64>,
    c_lipschitz: f64,
    not_bounded: Option<(String, String)>,
    pub node_depths: Vec<usize>,
}

impl SkeletonMetrics {
    /// Smallest `C` with every activation `C`-bounded.
    pub fn c_bounded(&self) -> Result<f64, SkeletonError> {
        match (&self.c_bounded, &self.not_bounded) {
            (Some(c), _) => Ok(*c),
            (None, Some((node, act))) => Err(SkeletonError::NotCBounded {
                node: node.clone(),
                activation: act.clone(),
            }),
            (None, None) => unreachable!(),
        }
    }

    /// Smallest `C` with every activation `C`-Lipschitz and `|σ(0)| ≤ C`.
    pub fn c_lipschitz(&self) -> f64 {
        self.c_lipschitz
    }

    /// `C(S) = (8C)^depth √comp`, defined only for C-bounded activations.
    pub fn c_of_s(&self) -> Result<f64, SkeletonError> {
        Ok((8.0 * self.c_bounded()?).powi(self.depth as i32) * self.comp.sqrt())
    }

    /// `C′(S) = (4C)^depth √comp` with the Lipschitz constant `C`.
    pub fn c_prime_of_s(&self) -> f64 {
        (4.0 * self.c_lipschitz).powi(self.depth as i32) * self.comp.sqrt()
    }

    /// `α = 2L(3C)^depth √comp`, the per-step gradient scale used by the
    /// drift bound, for an `L`-Lipschitz loss.
    pub fn drift_alpha(&self, loss_lipschitz: f64) -> f64 {
        2.0 * loss_lipschitz * (3.0 * self.c_lipschitz).powi(self.depth as i32) * self.comp.sqrt()
    }
}

/// Fully connected layered skeleton: `n` inputs, then layers of the given
/// widths, each node connected to every node of the previous layer, and a
/// single output node on top.
pub fn layered(n_inputs: usize, widths: &[usize], activation: ActivationSpec) -> Skeleton {
    let mut spec = SkeletonSpec::new();
    let mut prev: Vec<String> = (1..=n_inputs).map(|i| format!("x{i}")).collect();
    for name in &prev {
        spec = spec.input(name.clone());
    }
    for (l, &w) in widths.iter().enumerate() {
        let layer: Vec<String> = (1..=w).map(|j| format!("h{}_{}", l + 1, j)).collect();
        for name in &layer {
            spec = spec.node(name.clone(), activation, &prev);
        }
        prev = layer;
    }
    spec = spec.node("out", activation, &prev).output("out");
    spec.validate().expect("layered skeleton is well formed")
}
