//! Cycle-accurate token simulator.
//!
//! Follows the same cycle convention as [`crate::sizing`]: pops at the start
//! of a cycle (all kernels first), pushes at the end, occupancy observed
//! after both. A kernel begins once its release cycle has passed and every
//! input it reads on its first firing holds a token. Firing `n` pops one
//! token from each input port scheduled for that firing, then `D` cycles
//! later its results become poppable. A missing input token delays only the
//! kernel's next pops. A full output FIFO freezes the whole kernel for the
//! cycle. Edges marked external go through memory: their consumer reads
//! only after the producer has written every token.
//!
//! Cycles where nothing can change are skipped.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{topo_order, validate_graph, DataflowGraph, NodeKind, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimConfig {
    pub horizon: u64,
    pub record_occupancy: bool,
    /// Extra cycles before a DMA node's results appear.
    pub dma_latency: u64,
    /// Hold each kernel until its scheduled start time.
    pub honor_start_times: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 50_000_000,
            record_occupancy: false,
            dma_latency: 0,
            honor_start_times: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Deadlock,
    Timeout,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeTrace {
    pub id: String,
    pub start: Option<u64>,
    pub finish: Option<u64>,
    pub firings: u64,
    /// Cycles a pop was late for lack of an input token.
    pub starved_cycles: u64,
    /// Cycles frozen on a full output FIFO.
    pub blocked_cycles: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FifoTrace {
    pub id: String,
    pub depth: Option<u64>,
    pub external: bool,
    pub max_occupancy: u64,
    pub pushed: u64,
    pub popped: u64,
    /// `(cycle, occupancy)` at every change, when recording is on.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeadlockInfo {
    pub blocked: Vec<String>,
    /// Nodes each waiting on the next, closing into a loop when one exists.
    pub wait_chain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SimTrace {
    pub outcome: Outcome,
    /// Cycle at which the last kernel finished, or where the run stopped.
    pub total_latency: u64,
    pub nodes: Vec<NodeTrace>,
    pub fifos: Vec<FifoTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadlock: Option<DeadlockInfo>,
}

impl SimTrace {
    pub fn completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn node(&self, id: &str) -> Option<&NodeTrace> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn fifo(&self, id: &str) -> Option<&FifoTrace> {
        self.fifos.iter().find(|f| f.id == id)
    }

    pub fn total_blocked(&self) -> u64 {
        self.nodes.iter().map(|n| n.blocked_cycles).sum()
    }

    /// Summary without occupancy samples.
    pub fn summary_json(&self) -> String {
        let mut copy = self.clone();
        for f in &mut copy.fifos {
            f.samples.clear();
        }
        serde_json::to_string_pretty(&copy).expect("trace serializes")
    }

    /// `cycle,fifo,occupancy` rows for every recorded change.
    pub fn occupancy_csv(&self) -> String {
        let mut out = String::from("cycle,fifo,occupancy\n");
        for f in &self.fifos {
            for &(c, o) in &f.samples {
                let _ = writeln!(out, "{c},{},{o}", f.id);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Invalid(#[from] ValidationReport),
    #[error("node `{0}` has no profile")]
    MissingProfile(String),
    #[error("node `{0}` has zero initial delay; results need at least one cycle")]
    ZeroInitialDelay(String),
}

struct Fifo {
    occupancy: u64,
    depth: Option<u64>,
    external: bool,
    tokens: u64,
    /// Tokens the consumer reads; an external read may revisit data.
    reads: u64,
    pushed: u64,
    popped: u64,
    /// For external edges: first cycle at which the consumer may read.
    ready_at: Option<u64>,
}

impl Fifo {
    fn can_pop(&self, t: u64) -> bool {
        if self.external {
            self.ready_at.is_some_and(|r| r <= t) && self.popped < self.reads
        } else {
            self.occupancy > 0
        }
    }

    fn has_room(&self) -> bool {
        self.external || self.depth.is_none_or(|d| self.occupancy < d)
    }
}

struct Port {
    fifo: usize,
    rate: u64,
    phase: u64,
}

struct Kernel {
    d: u64,
    ii: u64,
    firings: u64,
    inputs: Vec<Port>,
    outputs: Vec<Port>,
    next_firing: u64,
    next_pop: u64,
    pending: VecDeque<(u64, u64)>,
    started: bool,
    waiting: bool,
    blocked: bool,
    last_pop: Option<u64>,
    last_push: Option<u64>,
    blocked_on: Option<usize>,
    trace: NodeTrace,
}

impl Kernel {
    fn done_popping(&self) -> bool {
        self.next_firing >= self.firings
    }

    fn done(&self) -> bool {
        self.done_popping() && self.pending.is_empty()
    }

    fn pushes_on(&self, firing: u64) -> impl Iterator<Item = &Port> {
        self.outputs.iter().filter(move |p| (firing + 1).is_multiple_of(p.rate))
    }

    fn pops_on(&self, firing: u64) -> impl Iterator<Item = &Port> {
        self.inputs.iter().filter(move |p| firing % p.rate == p.phase)
    }

    fn shift(&mut self, cycles: u64) {
        for p in &mut self.pending {
            p.0 += cycles;
        }
        if !self.done_popping() {
            self.next_pop += cycles;
        }
        self.trace.blocked_cycles += cycles;
    }
}

pub fn simulate(g: &DataflowGraph, cfg: &SimConfig) -> Result<SimTrace, SimError> {
    validate_graph(g)?;
    let order = topo_order(g).expect("validated graph is acyclic");
    let adj = g.adjacency();
    let mut fifos: Vec<Fifo> = g
        .edges
        .iter()
        .map(|e| Fifo {
            occupancy: 0,
            depth: if e.external { None } else { e.depth },
            external: e.external,
            tokens: e.ty.token_count(),
            reads: g
                .node(&e.consumer.node)
                .map_or(e.ty.token_count(), |n| n.in_ports[e.consumer.port].token_count()),
            pushed: 0,
            popped: 0,
            ready_at: None,
        })
        .collect();
    let mut fifo_traces: Vec<FifoTrace> = g
        .edges
        .iter()
        .map(|e| FifoTrace {
            id: e.id.clone(),
            depth: e.depth,
            external: e.external,
            ..Default::default()
        })
        .collect();
    let mut kernels = Vec::with_capacity(g.nodes.len());
    for (v, node) in g.nodes.iter().enumerate() {
        let p = node.profile.ok_or_else(|| SimError::MissingProfile(node.id.clone()))?;
        let extra = match node.kind {
            NodeKind::DmaIn | NodeKind::DmaOut => cfg.dma_latency,
            _ => 0,
        };
        let d = p.d + extra;
        if d == 0 {
            return Err(SimError::ZeroInitialDelay(node.id.clone()));
        }
        let inputs = adj.inputs[v]
            .iter()
            .map(|&e| {
                let port = g.edges[e].consumer.port;
                Port {
                    fifo: e,
                    rate: node.in_rate(port),
                    phase: node.in_phase(port),
                }
            })
            .collect();
        let outputs = adj.outputs[v]
            .iter()
            .map(|&e| Port {
                fifo: e,
                rate: node.out_rate(g.edges[e].producer.port),
                phase: 0,
            })
            .collect();
        let release = if cfg.honor_start_times {
            node.start_time.unwrap_or(0)
        } else {
            0
        };
        kernels.push(Kernel {
            d,
            ii: p.ii,
            firings: p.t,
            inputs,
            outputs,
            next_firing: 0,
            next_pop: release,
            pending: VecDeque::new(),
            started: false,
            waiting: false,
            blocked: false,
            last_pop: None,
            last_push: None,
            blocked_on: None,
            trace: NodeTrace {
                id: node.id.clone(),
                ..Default::default()
            },
        });
    }

    let mut t = 0u64;
    let outcome = loop {
        if kernels.iter().all(Kernel::done) {
            break Outcome::Completed;
        }
        if t > cfg.horizon {
            break Outcome::Timeout;
        }
        let mut changed = false;
        let mut pushed_any = false;
        let mut touched: Vec<usize> = Vec::new();

        for &v in &order {
            let k = &mut kernels[v];
            k.waiting = false;
            if k.done_popping() || k.next_pop > t {
                continue;
            }
            let n = k.next_firing;
            if !k.pops_on(n).all(|p| fifos[p.fifo].can_pop(t)) {
                k.waiting = true;
                continue;
            }
            if k.started {
                k.trace.starved_cycles += t - k.next_pop;
            } else {
                k.started = true;
                k.trace.start = Some(t);
            }
            let popped: Vec<usize> = k.pops_on(n).map(|p| p.fifo).collect();
            for f in popped {
                fifos[f].occupancy = fifos[f].occupancy.saturating_sub(1);
                fifos[f].popped += 1;
                touched.push(f);
            }
            if k.pushes_on(n).next().is_some() {
                k.pending.push_back((t + k.d - 1, n));
            }
            k.last_pop = Some(t);
            k.next_firing += 1;
            k.next_pop = t + k.ii;
            k.trace.firings += 1;
            changed = true;
        }

        for k in kernels.iter_mut() {
            k.blocked = false;
            let Some(&(when, firing)) = k.pending.front() else { continue };
            if when != t {
                continue;
            }
            let targets: Vec<usize> = k.pushes_on(firing).map(|p| p.fifo).collect();
            if let Some(&full) = targets.iter().find(|&&f| !fifos[f].has_room()) {
                k.blocked = true;
                k.blocked_on = Some(full);
                k.shift(1);
                continue;
            }
            for f in targets {
                let fifo = &mut fifos[f];
                fifo.occupancy += 1;
                fifo.pushed += 1;
                if fifo.external && fifo.pushed == fifo.tokens {
                    fifo.ready_at = Some(t + 1);
                }
                touched.push(f);
            }
            k.pending.pop_front();
            k.last_push = Some(t);
            changed = true;
            pushed_any = true;
        }

        touched.sort_unstable();
        touched.dedup();
        for f in touched {
            let occ = fifos[f].occupancy;
            let tr = &mut fifo_traces[f];
            tr.max_occupancy = tr.max_occupancy.max(occ);
            if cfg.record_occupancy {
                match tr.samples.last_mut() {
                    Some(last) if last.0 == t => last.1 = occ,
                    _ => tr.samples.push((t, occ)),
                }
            }
        }

        // Next cycle at which something can happen without outside help.
        let mut next: Option<u64> = None;
        let mut consider = |c: u64| next = Some(next.map_or(c, |x: u64| x.min(c)));
        let mut any_retry = false;
        for k in &kernels {
            if k.blocked {
                any_retry = true;
                continue;
            }
            if let Some(&(when, _)) = k.pending.front() {
                consider(when);
            }
            if !k.done_popping() {
                if k.waiting {
                    if pushed_any {
                        consider(t + 1);
                    }
                } else {
                    consider(k.next_pop);
                }
            }
        }
        if any_retry && changed {
            consider(t + 1);
        }
        match next {
            None if any_retry || kernels.iter().any(|k| !k.done()) => {
                if kernels.iter().all(Kernel::done) {
                    break Outcome::Completed;
                }
                break Outcome::Deadlock;
            }
            None => break Outcome::Completed,
            Some(c) => {
                let c = c.max(t + 1);
                for k in kernels.iter_mut().filter(|k| k.blocked) {
                    k.shift(c - t - 1);
                }
                t = c;
            }
        }
    };

    let mut total = 0;
    let mut node_traces = Vec::with_capacity(kernels.len());
    for k in &kernels {
        let mut tr = k.trace.clone();
        if k.done() && k.started {
            let by_pop = k.last_pop.map(|p| p + k.d);
            let by_push = k.last_push.map(|p| p + 1);
            tr.finish = by_pop.max(by_push);
            total = total.max(tr.finish.unwrap_or(0));
        }
        node_traces.push(tr);
    }
    for (tr, f) in fifo_traces.iter_mut().zip(&fifos) {
        tr.pushed = f.pushed;
        tr.popped = f.popped;
    }
    let deadlock = (outcome == Outcome::Deadlock).then(|| wait_chain(g, &kernels, &fifos, &adj.index));
    if outcome != Outcome::Completed {
        total = t;
    }
    Ok(SimTrace {
        outcome,
        total_latency: total,
        nodes: node_traces,
        fifos: fifo_traces,
        deadlock,
    })
}

fn wait_chain(
    g: &DataflowGraph,
    kernels: &[Kernel],
    fifos: &[Fifo],
    index: &std::collections::HashMap<String, usize>,
) -> DeadlockInfo {
    // Each stuck node waits on one neighbour: the consumer of a full output
    // or the producer of an empty input.
    let waits_on = |v: usize| -> Option<usize> {
        let k = &kernels[v];
        if k.done() {
            return None;
        }
        if let Some(&(_, firing)) = k.pending.front() {
            if let Some(p) = k.pushes_on(firing).find(|p| !fifos[p.fifo].has_room()) {
                return Some(index[&g.edges[p.fifo].consumer.node]);
            }
        }
        if !k.done_popping() {
            let n = k.next_firing;
            if let Some(p) = k.pops_on(n).find(|p| !fifos[p.fifo].can_pop(u64::MAX)) {
                return Some(index[&g.edges[p.fifo].producer.node]);
            }
        }
        None
    };
    let blocked: Vec<usize> = (0..kernels.len()).filter(|&v| !kernels[v].done()).collect();
    let mut chain = Vec::new();
    if let Some(&first) = blocked.iter().find(|&&v| kernels[v].blocked_on.is_some()).or(blocked.first()) {
        let mut v = first;
        let mut seen = vec![false; kernels.len()];
        loop {
            chain.push(g.nodes[v].id.clone());
            if seen[v] {
                break;
            }
            seen[v] = true;
            match waits_on(v) {
                Some(u) => v = u,
                None => break,
            }
        }
        // Keep only the loop itself when the walk closed one.
        if let Some(last) = chain.last().cloned() {
            if let Some(pos) = chain.iter().position(|x| *x == last) {
                if pos + 1 < chain.len() {
                    chain.drain(..pos);
                }
            }
        }
    }
    DeadlockInfo {
        blocked: blocked.iter().map(|&v| g.nodes[v].id.clone()).collect(),
        wait_chain: chain,
    }
}

/// Whether the run stalled for good, with the waiting nodes.
pub fn detect_deadlock(trace: &SimTrace) -> (bool, Vec<String>) {
    match &trace.deadlock {
        Some(d) => (true, d.wait_chain.clone()),
        None => (false, vec![]),
    }
}

/// Summed busy spans over the end-to-end span. Above 1 means kernels ran
/// concurrently.
pub fn measure_overlap(trace: &SimTrace) -> f64 {
    let spans: Vec<(u64, u64)> = trace
        .nodes
        .iter()
        .filter_map(|n| Some((n.start?, n.finish?)))
        .collect();
    let (Some(first), Some(last)) = (
        spans.iter().map(|s| s.0).min(),
        spans.iter().map(|s| s.1).max(),
    ) else {
        return 0.0;
    };
    if last == first {
        return 1.0;
    }
    let busy: u64 = spans.iter().map(|(s, f)| f - s).sum();
    busy as f64 / (last - first) as f64
}
