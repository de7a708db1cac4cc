//! Placing kernels on dies and buffers in memory bank tiers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{topo_order, DataflowGraph};

/// Above this many nodes die partitioning switches from branch-and-bound to
/// hill climbing.
pub const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("no dies given")]
    NoDies,
    #[error("design needs {need} bytes but the dies hold {have}")]
    OverCapacity { need: u64, have: u64 },
    #[error("no assignment respects the per-die capacities")]
    NoFit,
    #[error("bank classes must be non-empty with positive sizes")]
    BadBanks,
    #[error("out of memory units for buffer `{0}`")]
    OutOfUnits(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DieSpec {
    /// Bytes per die; one entry per die.
    pub capacities: Vec<u64>,
}

impl DieSpec {
    pub fn uniform(count: usize, capacity: u64) -> Self {
        Self {
            capacities: vec![capacity; count],
        }
    }

    pub fn count(&self) -> usize {
        self.capacities.len()
    }
}

/// Weights of the cut and imbalance terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionWeights {
    pub alpha: u64,
    pub beta: u64,
}

impl Default for PartitionWeights {
    fn default() -> Self {
        Self { alpha: 1, beta: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DiePartition {
    /// Die per node, indexed like the graph's nodes.
    pub dies: Vec<u32>,
    pub loads: Vec<u64>,
    pub cut_bytes: u64,
    pub imbalance: u64,
    pub objective: u64,
    pub exact: bool,
}

/// Node loads and weighted edges, the only things the objective sees.
struct Problem {
    costs: Vec<u64>,
    edges: Vec<(usize, usize, u64)>,
    caps: Vec<u64>,
    w: PartitionWeights,
}

impl Problem {
    fn new(g: &DataflowGraph, spec: &DieSpec, w: PartitionWeights) -> Self {
        let index = g.node_index();
        Self {
            costs: g.nodes.iter().map(|n| n.resource_cost).collect(),
            edges: g
                .edges
                .iter()
                .map(|e| (index[&e.producer.node], index[&e.consumer.node], e.ty.token_bytes()))
                .collect(),
            caps: spec.capacities.clone(),
            w,
        }
    }

    fn loads(&self, dies: &[u32]) -> Vec<u64> {
        let mut loads = vec![0; self.caps.len()];
        for (v, &d) in dies.iter().enumerate() {
            loads[d as usize] += self.costs[v];
        }
        loads
    }

    fn feasible(&self, dies: &[u32]) -> bool {
        self.loads(dies).iter().zip(&self.caps).all(|(l, c)| l <= c)
    }

    fn evaluate(&self, dies: &[u32]) -> (u64, u64, u64) {
        let cut: u64 = self
            .edges
            .iter()
            .filter(|(a, b, _)| dies[*a] != dies[*b])
            .map(|(_, _, w)| w)
            .sum();
        let loads = self.loads(dies);
        let imbalance = loads.iter().max().unwrap() - loads.iter().min().unwrap();
        (self.w.alpha * cut + self.w.beta * imbalance, cut, imbalance)
    }

    fn result(&self, dies: Vec<u32>, exact: bool) -> DiePartition {
        let (objective, cut_bytes, imbalance) = self.evaluate(&dies);
        DiePartition {
            loads: self.loads(&dies),
            dies,
            cut_bytes,
            imbalance,
            objective,
            exact,
        }
    }
}

fn check(g: &DataflowGraph, spec: &DieSpec) -> Result<(), AllocError> {
    if spec.count() == 0 {
        return Err(AllocError::NoDies);
    }
    let need: u64 = g.nodes.iter().map(|n| n.resource_cost).sum();
    let have: u64 = spec.capacities.iter().fold(0u64, |a, &c| a.saturating_add(c));
    if need > have {
        return Err(AllocError::OverCapacity { need, have });
    }
    Ok(())
}

/// Exact for small graphs, hill climbing above `EXACT_LIMIT` nodes.
pub fn partition_dies(g: &DataflowGraph, spec: &DieSpec, w: PartitionWeights) -> Result<DiePartition, AllocError> {
    if g.nodes.len() <= EXACT_LIMIT {
        partition_exact(g, spec, w)
    } else {
        partition_greedy(g, spec, w)
    }
}

pub fn partition_exact(g: &DataflowGraph, spec: &DieSpec, w: PartitionWeights) -> Result<DiePartition, AllocError> {
    check(g, spec)?;
    let p = Problem::new(g, spec, w);
    let n = p.costs.len();
    let k = p.caps.len();
    // Edges become known once both ends are placed.
    let mut closing: Vec<Vec<(usize, u64)>> = vec![vec![]; n];
    for &(a, b, wt) in &p.edges {
        closing[a.max(b)].push((a.min(b), wt));
    }
    let mut suffix = vec![0u64; n + 1];
    for v in (0..n).rev() {
        suffix[v] = suffix[v + 1] + p.costs[v];
    }
    struct Search<'a> {
        p: &'a Problem,
        closing: Vec<Vec<(usize, u64)>>,
        suffix: Vec<u64>,
        dies: Vec<u32>,
        loads: Vec<u64>,
        best: Option<(u64, Vec<u32>)>,
        identical: bool,
    }
    impl Search<'_> {
        fn go(&mut self, v: usize, cut: u64, used: usize) {
            let k = self.loads.len();
            let max = *self.loads.iter().max().unwrap();
            let min = *self.loads.iter().min().unwrap();
            let imb_lb = max.saturating_sub(min + self.suffix[v]);
            let lb = self.p.w.alpha * cut + self.p.w.beta * imb_lb;
            if self.best.as_ref().is_some_and(|(b, _)| lb >= *b) {
                return;
            }
            if v == self.dies.len() {
                let obj = self.p.w.alpha * cut + self.p.w.beta * (max - min);
                if self.best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    self.best = Some((obj, self.dies.clone()));
                }
                return;
            }
            // With identical dies, only the first unused die is worth trying.
            let limit = if self.identical { (used + 1).min(k) } else { k };
            for d in 0..limit {
                if self.loads[d] + self.p.costs[v] > self.p.caps[d] {
                    continue;
                }
                let extra: u64 = self.closing[v]
                    .iter()
                    .filter(|(u, _)| self.dies[*u] != d as u32)
                    .map(|(_, w)| w)
                    .sum();
                self.dies[v] = d as u32;
                self.loads[d] += self.p.costs[v];
                self.go(v + 1, cut + extra, used.max(d + 1));
                self.loads[d] -= self.p.costs[v];
            }
        }
    }
    let mut s = Search {
        p: &p,
        closing,
        suffix,
        dies: vec![0; n],
        loads: vec![0; k],
        best: None,
        identical: p.caps.windows(2).all(|w| w[0] == w[1]),
    };
    s.go(0, 0, 0);
    let (_, dies) = s.best.ok_or(AllocError::NoFit)?;
    Ok(p.result(dies, true))
}

const RESTARTS: usize = 24;
const RESTART_SEED: u64 = 0x5eed;

/// Local search over single moves and pairwise swaps from a few structured
/// and some seeded random starting points; keeps the best.
pub fn partition_greedy(g: &DataflowGraph, spec: &DieSpec, w: PartitionWeights) -> Result<DiePartition, AllocError> {
    check(g, spec)?;
    let p = Problem::new(g, spec, w);
    let n = p.costs.len();
    let k = p.caps.len();
    let order = topo_order(g).unwrap_or_else(|_| (0..n).collect());
    let total: u64 = p.costs.iter().sum();

    let mut starts: Vec<Vec<u32>> = vec![];
    // Contiguous blocks of the topological order with even load.
    let mut blocks = vec![0u32; n];
    let mut acc = 0u64;
    for &v in &order {
        let d = (acc * k as u64).checked_div(total).unwrap_or(0).min(k as u64 - 1);
        blocks[v] = d as u32;
        acc += p.costs[v];
    }
    starts.push(blocks);
    // Largest node first onto the lightest die.
    let mut by_cost: Vec<usize> = (0..n).collect();
    by_cost.sort_by_key(|&v| (std::cmp::Reverse(p.costs[v]), v));
    let mut lpt = vec![0u32; n];
    let mut loads = vec![0u64; k];
    for v in by_cost {
        let d = (0..k).min_by_key(|&d| (loads[d], d)).unwrap();
        lpt[v] = d as u32;
        loads[d] += p.costs[v];
    }
    starts.push(lpt);
    starts.push(vec![0; n]);
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    for _ in 0..RESTARTS {
        starts.push((0..n).map(|_| rng.gen_range(0..k as u32)).collect());
    }

    let mut best: Option<(u64, Vec<u32>)> = None;
    for mut dies in starts {
        if !p.feasible(&dies) {
            continue;
        }
        let mut obj = p.evaluate(&dies).0;
        loop {
            let mut improved = false;
            for v in 0..n {
                for d in 0..k as u32 {
                    if d == dies[v] {
                        continue;
                    }
                    let old = dies[v];
                    dies[v] = d;
                    let o = p.evaluate(&dies).0;
                    if o < obj && p.feasible(&dies) {
                        obj = o;
                        improved = true;
                    } else {
                        dies[v] = old;
                    }
                }
            }
            for a in 0..n {
                for b in a + 1..n {
                    if dies[a] == dies[b] {
                        continue;
                    }
                    dies.swap(a, b);
                    let o = p.evaluate(&dies).0;
                    if o < obj && p.feasible(&dies) {
                        obj = o;
                        improved = true;
                    } else {
                        dies.swap(a, b);
                    }
                }
            }
            if !improved {
                break;
            }
        }
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, dies));
        }
    }
    let (_, dies) = best.ok_or(AllocError::NoFit)?;
    Ok(p.result(dies, false))
}

impl DiePartition {
    pub fn apply(&self, g: &mut DataflowGraph) {
        for (node, &d) in g.nodes.iter_mut().zip(&self.dies) {
            node.die_index = Some(d);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BankClass {
    pub name: String,
    pub unit_bytes: u64,
    pub units: u32,
}

/// Bank tiers, smallest unit first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSpec {
    pub classes: Vec<BankClass>,
}

impl Default for BankSpec {
    fn default() -> Self {
        let class = |name: &str, unit_bytes, units| BankClass {
            name: name.into(),
            unit_bytes,
            units,
        };
        Self {
            classes: vec![
                class("small", 1024, 4096),
                class("medium", 36 * 1024, 1024),
                class("large", 288 * 1024, 128),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buffer {
    pub id: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BankAssignment {
    pub buffer: String,
    pub class: usize,
    /// More than one unit when the buffer was split.
    pub units: Vec<u32>,
}

/// Largest buffers first, each into the smallest tier with a free unit big
/// enough; buffers beyond the largest unit are split over several.
pub fn assign_memory_banks(buffers: &[Buffer], spec: &BankSpec) -> Result<Vec<BankAssignment>, AllocError> {
    if spec.classes.is_empty() || spec.classes.iter().any(|c| c.unit_bytes == 0) {
        return Err(AllocError::BadBanks);
    }
    let mut next_free: Vec<u32> = vec![0; spec.classes.len()];
    let mut order: Vec<&Buffer> = buffers.iter().collect();
    order.sort_by(|a, b| b.bytes.cmp(&a.bytes).then_with(|| a.id.cmp(&b.id)));
    let largest = spec.classes.len() - 1;
    let mut out = vec![];
    for buf in order {
        let fits = (0..spec.classes.len())
            .find(|&c| spec.classes[c].unit_bytes >= buf.bytes && next_free[c] < spec.classes[c].units);
        let (class, count) = match fits {
            Some(c) => (c, 1),
            None if buf.bytes > spec.classes[largest].unit_bytes => {
                (largest, buf.bytes.div_ceil(spec.classes[largest].unit_bytes) as u32)
            }
            None => return Err(AllocError::OutOfUnits(buf.id.clone())),
        };
        if next_free[class] + count > spec.classes[class].units {
            return Err(AllocError::OutOfUnits(buf.id.clone()));
        }
        out.push(BankAssignment {
            buffer: buf.id.clone(),
            class,
            units: (next_free[class]..next_free[class] + count).collect(),
        });
        next_free[class] += count;
    }
    Ok(out)
}

/// On-chip buffers of a built design: node-owned storage and stream FIFOs.
pub fn graph_buffers(g: &DataflowGraph) -> Vec<Buffer> {
    let nodes = g.nodes.iter().filter(|n| n.resource_cost > 0).map(|n| Buffer {
        id: n.id.clone(),
        bytes: n.resource_cost,
    });
    let fifos = g.edges.iter().filter(|e| !e.external).map(|e| Buffer {
        id: e.id.clone(),
        bytes: e.depth.unwrap_or(1) * e.ty.token_bytes(),
    });
    nodes.chain(fifos).collect()
}

/// Records the chosen tier on nodes that own a buffer.
pub fn apply_banks(g: &mut DataflowGraph, assignments: &[BankAssignment]) {
    for a in assignments {
        if let Some(n) = g.node_mut(&a.buffer) {
            n.memory_bank = Some(a.class as u32);
        }
    }
}
