//! Dataflow graph: kernels connected by FIFO edges carrying stream types.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::converter::ConverterSpec;
use crate::itensor::ITensorType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Compute,
    Converter,
    DmaIn,
    DmaOut,
    Fork,
    Join,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::Compute => "compute",
            NodeKind::Converter => "converter",
            NodeKind::DmaIn => "dma_in",
            NodeKind::DmaOut => "dma_out",
            NodeKind::Fork => "fork",
            NodeKind::Join => "join",
        };
        f.write_str(s)
    }
}

/// Timing of one kernel under the steady-pipeline model.
///
/// `t` counts firings. The first result is ready `d` cycles after the
/// kernel starts, one more every `ii` cycles after that, and the kernel is
/// done after `l = d + (t - 1) * ii` cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ProfileRepr")]
pub struct KernelProfile {
    #[serde(rename = "L")]
    pub l: u64,
    #[serde(rename = "D")]
    pub d: u64,
    #[serde(rename = "II")]
    pub ii: u64,
    #[serde(rename = "T")]
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("II must be positive")]
    ZeroII,
    #[error("T must be positive")]
    ZeroT,
    #[error("L = {given} disagrees with D + (T-1)*II = {derived}")]
    LatencyMismatch { given: u64, derived: u64 },
}

impl KernelProfile {
    pub fn new(d: u64, ii: u64, t: u64) -> Result<Self, ProfileError> {
        if ii == 0 {
            return Err(ProfileError::ZeroII);
        }
        if t == 0 {
            return Err(ProfileError::ZeroT);
        }
        Ok(Self {
            l: d + (t - 1) * ii,
            d,
            ii,
            t,
        })
    }
}

#[derive(Deserialize)]
struct ProfileRepr {
    #[serde(rename = "L")]
    l: Option<u64>,
    #[serde(rename = "D")]
    d: u64,
    #[serde(rename = "II")]
    ii: u64,
    #[serde(rename = "T")]
    t: u64,
}

impl TryFrom<ProfileRepr> for KernelProfile {
    type Error = ProfileError;

    fn try_from(r: ProfileRepr) -> Result<Self, ProfileError> {
        let p = KernelProfile::new(r.d, r.ii, r.t)?;
        match r.l {
            Some(given) if given != p.l => Err(ProfileError::LatencyMismatch {
                given,
                derived: p.l,
            }),
            _ => Ok(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KernelNode {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub in_ports: Vec<ITensorType>,
    #[serde(default)]
    pub out_ports: Vec<ITensorType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<KernelProfile>,
    /// On-chip buffer bytes the node needs for itself.
    #[serde(default)]
    pub resource_cost: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub die_index: Option<u32>,
    /// Operator this kernel was lowered from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converter: Option<ConverterSpec>,
    /// Scheduled start cycle, set by FIFO sizing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_time: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_bank: Option<u32>,
}

impl KernelNode {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        Self {
            id: id.into(),
            kind,
            in_ports: vec![],
            out_ports: vec![],
            profile: None,
            resource_cost: 0,
            fusion_index: None,
            die_index: None,
            op: None,
            converter: None,
            start_time: None,
            memory_bank: None,
        }
    }

    pub fn with_ports(mut self, ins: Vec<ITensorType>, outs: Vec<ITensorType>) -> Self {
        self.in_ports = ins;
        self.out_ports = outs;
        self
    }

    pub fn with_profile(mut self, profile: KernelProfile) -> Self {
        self.profile = Some(profile);
        self
    }

    /// Firings per token on an input port.
    pub fn in_rate(&self, port: usize) -> u64 {
        (self.firings() / self.in_ports[port].token_count().max(1)).max(1)
    }

    pub fn out_rate(&self, port: usize) -> u64 {
        (self.firings() / self.out_ports[port].token_count().max(1)).max(1)
    }

    /// Firing, modulo the port rate, on which an input port pops. Joins
    /// read their inputs round-robin; every other kernel reads on the first
    /// firing of each group.
    pub fn in_phase(&self, port: usize) -> u64 {
        match self.kind {
            NodeKind::Join => port as u64 % self.in_rate(port),
            _ => 0,
        }
    }

    /// Firing count; falls back to the largest port token count.
    pub fn firings(&self) -> u64 {
        match self.profile {
            Some(p) => p.t,
            None => self
                .in_ports
                .iter()
                .chain(&self.out_ports)
                .map(|t| t.token_count())
                .max()
                .unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PortRef {
    pub node: String,
    pub port: usize,
}

impl PortRef {
    pub fn new(node: impl Into<String>, port: usize) -> Self {
        Self {
            node: node.into(),
            port,
        }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FifoEdge {
    pub id: String,
    pub producer: PortRef,
    pub consumer: PortRef,
    #[serde(rename = "type")]
    pub ty: ITensorType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u64>,
    /// Routed through external memory instead of an on-chip stream.
    #[serde(default)]
    pub external: bool,
    /// Operator-level tensor this edge carries, when lowered from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<String>,
}

impl FifoEdge {
    pub fn stream(id: impl Into<String>, producer: PortRef, consumer: PortRef, ty: ITensorType) -> Self {
        Self {
            id: id.into(),
            producer,
            consumer,
            ty,
            depth: None,
            external: false,
            tensor: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataflowGraph {
    #[serde(default)]
    pub nodes: Vec<KernelNode>,
    #[serde(default)]
    pub edges: Vec<FifoEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphViolation {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("duplicate edge id `{0}`")]
    DuplicateEdge(String),
    #[error("node `{node}` port {port}: {msg}")]
    BadPortType { node: String, port: String, msg: String },
    #[error("{kind} node `{node}` {msg}")]
    BadShape { node: String, kind: NodeKind, msg: String },
    #[error("edge `{edge}` refers to missing port {port}")]
    DanglingPort { edge: String, port: PortRef },
    #[error("port {port} is connected to more than one edge")]
    PortReused { port: String },
    #[error("edge `{edge}` type does not match {side} port type")]
    TypeMismatch { edge: String, side: &'static str },
    #[error("edge `{edge}` connects different tensors")]
    DataMismatch { edge: String },
    #[error("edge `{0}` has zero depth")]
    ZeroDepth(String),
    #[error("edge `{0}` closes a cycle")]
    Cycle(String),
    #[error("node `{node}`: {msg}")]
    BadProfile { node: String, msg: String },
    #[error("node `{0}` has no profile")]
    MissingProfile(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{} graph violation(s): {}", .0.len(), join_violations(.0))]
pub struct ValidationReport(pub Vec<GraphViolation>);

fn join_violations(v: &[GraphViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphParseError {
    #[error("parse error at line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error(transparent)]
    Invalid(#[from] ValidationReport),
}

/// Edge indices touching each node, in edge order.
#[derive(Debug, Clone)]
pub struct Adjacency {
    pub index: HashMap<String, usize>,
    pub inputs: Vec<Vec<usize>>,
    pub outputs: Vec<Vec<usize>>,
}

impl DataflowGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_index(&self) -> HashMap<String, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect()
    }

    pub fn node(&self, id: &str) -> Option<&KernelNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut KernelNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn edge(&self, id: &str) -> Option<&FifoEdge> {
        self.edges.iter().find(|e| e.id == id)
    }

    /// Assumes edge endpoints exist.
    pub fn adjacency(&self) -> Adjacency {
        let index = self.node_index();
        let mut inputs = vec![vec![]; self.nodes.len()];
        let mut outputs = vec![vec![]; self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            if let Some(&p) = index.get(&edge.producer.node) {
                outputs[p].push(e);
            }
            if let Some(&c) = index.get(&edge.consumer.node) {
                inputs[c].push(e);
            }
        }
        Adjacency {
            index,
            inputs,
            outputs,
        }
    }

    /// A fresh id with the given prefix not used by any node or edge.
    pub fn fresh_id(&self, prefix: &str) -> String {
        let used: HashSet<&str> = self
            .nodes
            .iter()
            .map(|n| n.id.as_str())
            .chain(self.edges.iter().map(|e| e.id.as_str()))
            .collect();
        (0..)
            .map(|i| format!("{prefix}{i}"))
            .find(|c| !used.contains(c.as_str()))
            .unwrap()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    /// Parses and validates a graph document.
    pub fn from_json(text: &str) -> Result<Self, GraphParseError> {
        let g: DataflowGraph =
            serde_json::from_str(text).map_err(|e| GraphParseError::Syntax {
                line: e.line(),
                column: e.column(),
                msg: e.to_string(),
            })?;
        validate_graph(&g)?;
        Ok(g)
    }
}

fn check_node(node: &KernelNode, out: &mut Vec<GraphViolation>) {
    let ports = node
        .in_ports
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("in{i}"), t))
        .chain(
            node.out_ports
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("out{i}"), t)),
        );
    for (port, ty) in ports {
        if let Err(e) = ty.validate() {
            out.push(GraphViolation::BadPortType {
                node: node.id.clone(),
                port,
                msg: e.to_string(),
            });
        }
    }
    let shape = |msg: &str| GraphViolation::BadShape {
        node: node.id.clone(),
        kind: node.kind,
        msg: msg.to_string(),
    };
    match node.kind {
        NodeKind::Fork => {
            if node.in_ports.len() != 1 || node.out_ports.len() < 2 {
                out.push(shape("needs 1 input and at least 2 outputs"));
            } else if node.out_ports.iter().any(|t| !t.matches(&node.in_ports[0])) {
                out.push(shape("outputs must duplicate the input type"));
            }
        }
        NodeKind::Join => {
            if node.in_ports.len() < 2 || node.out_ports.len() != 1 {
                out.push(shape("needs at least 2 inputs and 1 output"));
            } else {
                let sum: u64 = node.in_ports.iter().map(|t| t.token_count()).sum();
                if node.out_ports[0].token_count() != sum {
                    out.push(shape("output token count must equal the sum of inputs"));
                }
            }
        }
        NodeKind::DmaIn if !node.in_ports.is_empty() || node.out_ports.len() != 1 => {
            out.push(shape("needs exactly 1 output and no inputs"))
        }
        NodeKind::DmaOut if node.in_ports.len() != 1 || !node.out_ports.is_empty() => {
            out.push(shape("needs exactly 1 input and no outputs"))
        }
        NodeKind::Converter if node.in_ports.len() != 1 || node.out_ports.len() != 1 => {
            out.push(shape("needs exactly 1 input and 1 output"))
        }
        _ => {}
    }
    if let Some(p) = node.profile {
        if p.ii == 0 || p.t == 0 || p.l != p.d + (p.t.max(1) - 1) * p.ii {
            out.push(GraphViolation::BadProfile {
                node: node.id.clone(),
                msg: "inconsistent L, D, II, T".into(),
            });
        }
        for ty in node.in_ports.iter().chain(&node.out_ports) {
            let c = ty.token_count();
            if c == 0 || p.t % c != 0 {
                out.push(GraphViolation::BadProfile {
                    node: node.id.clone(),
                    msg: format!("port token count {c} does not divide T = {}", p.t),
                });
                break;
            }
        }
    }
}

/// Checks ids, port types, node shapes, edge endpoints and type agreement,
/// profiles, and acyclicity. Reports every violation found.
pub fn validate_graph(g: &DataflowGraph) -> Result<(), ValidationReport> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for n in &g.nodes {
        if !seen.insert(n.id.as_str()) {
            out.push(GraphViolation::DuplicateNode(n.id.clone()));
        }
        check_node(n, &mut out);
    }
    let mut seen_edges = HashSet::new();
    let mut used_ports = HashSet::new();
    let index = g.node_index();
    let mut endpoints_ok = true;
    for e in &g.edges {
        if !seen_edges.insert(e.id.as_str()) {
            out.push(GraphViolation::DuplicateEdge(e.id.clone()));
        }
        if e.depth == Some(0) {
            out.push(GraphViolation::ZeroDepth(e.id.clone()));
        }
        let prod = index
            .get(&e.producer.node)
            .and_then(|&i| g.nodes[i].out_ports.get(e.producer.port));
        let cons = index
            .get(&e.consumer.node)
            .and_then(|&i| g.nodes[i].in_ports.get(e.consumer.port));
        for (port, present, dir) in [(&e.producer, prod.is_some(), "out"), (&e.consumer, cons.is_some(), "in")] {
            if !present {
                endpoints_ok = false;
                out.push(GraphViolation::DanglingPort {
                    edge: e.id.clone(),
                    port: port.clone(),
                });
            } else if !used_ports.insert(format!("{}:{dir}{}", port.node, port.port)) {
                out.push(GraphViolation::PortReused {
                    port: format!("{}:{dir}{}", port.node, port.port),
                });
            }
        }
        let (Some(p), Some(c)) = (prod, cons) else { continue };
        if !p.matches(&e.ty) {
            out.push(GraphViolation::TypeMismatch {
                edge: e.id.clone(),
                side: "producer",
            });
        }
        if e.external {
            if !c.compatible_data(&e.ty) {
                out.push(GraphViolation::DataMismatch { edge: e.id.clone() });
            }
        } else if !c.matches(&e.ty) {
            out.push(GraphViolation::TypeMismatch {
                edge: e.id.clone(),
                side: "consumer",
            });
        }
    }
    if endpoints_ok && out.iter().all(|v| !matches!(v, GraphViolation::DuplicateNode(_))) {
        if let Err(CycleError { edge }) = topo_order(g) {
            out.push(GraphViolation::Cycle(edge));
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(ValidationReport(out))
    }
}

/// Every node must carry a profile before sizing or simulation.
pub fn require_profiles(g: &DataflowGraph) -> Result<(), ValidationReport> {
    let missing: Vec<_> = g
        .nodes
        .iter()
        .filter(|n| n.profile.is_none())
        .map(|n| GraphViolation::MissingProfile(n.id.clone()))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(ValidationReport(missing))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cycle through edge `{edge}`")]
pub struct CycleError {
    pub edge: String,
}

/// Node indices with every producer before its consumers. Ready nodes are
/// taken in id order.
pub fn topo_order(g: &DataflowGraph) -> Result<Vec<usize>, CycleError> {
    let adj = g.adjacency();
    let n = g.nodes.len();
    let mut indeg: Vec<usize> = adj.inputs.iter().map(|v| v.len()).collect();
    let mut ready: BinaryHeap<Reverse<(&str, usize)>> = (0..n)
        .filter(|&i| indeg[i] == 0)
        .map(|i| Reverse((g.nodes[i].id.as_str(), i)))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, v))) = ready.pop() {
        order.push(v);
        for &e in &adj.outputs[v] {
            let c = adj.index[&g.edges[e].consumer.node];
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.push(Reverse((g.nodes[c].id.as_str(), c)));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every leftover node has a leftover predecessor; walk back until a
    // node repeats and report the edge that closes the loop.
    let done: HashSet<usize> = order.into_iter().collect();
    let mut v = (0..n).find(|i| !done.contains(i)).unwrap();
    let mut visited = BTreeSet::new();
    loop {
        visited.insert(v);
        let e = *adj.inputs[v]
            .iter()
            .find(|&&e| !done.contains(&adj.index[&g.edges[e].producer.node]))
            .unwrap();
        let p = adj.index[&g.edges[e].producer.node];
        if visited.contains(&p) {
            return Err(CycleError {
                edge: g.edges[e].id.clone(),
            });
        }
        v = p;
    }
}
