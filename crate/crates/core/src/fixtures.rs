//! Small types and graphs used by examples, tests and the benchmarks.

use rand::Rng;

use crate::graph::{DataflowGraph, FifoEdge, KernelNode, KernelProfile, NodeKind, PortRef};
use crate::itensor::{ElementKind, ITensorType};

/// 8x8 f32 tensor, 4x2 tiles, column-of-tiles order.
pub fn column_tiles() -> ITensorType {
    ITensorType::new(
        vec![8, 8],
        vec![4, 2],
        vec![4, 2],
        vec![2, 4],
        vec![1, 0],
        ElementKind::f32(),
    )
    .unwrap()
}

/// Same tensor, each column of tiles streamed twice.
pub fn column_tiles_twice() -> ITensorType {
    ITensorType::new(
        vec![8, 8],
        vec![4, 2],
        vec![4, 2, 2],
        vec![2, 1, 4],
        vec![2, 0],
        ElementKind::f32(),
    )
    .unwrap()
}

/// 64x64 f32 in 16x16 tiles, row-major, and the same tensor in 16x8 tiles.
pub fn retile_pair() -> (ITensorType, ITensorType) {
    let src = ITensorType::row_major(vec![64, 64], vec![16, 16], ElementKind::f32()).unwrap();
    let dst = ITensorType::row_major(vec![64, 64], vec![16, 8], ElementKind::f32()).unwrap();
    (src, dst)
}

/// A 1-D stream of `tokens` scalar tokens.
pub fn scalar_stream(tokens: usize) -> ITensorType {
    ITensorType::row_major(vec![tokens], vec![1], ElementKind::f32()).unwrap()
}

/// Compute kernels `K0..` with the given initial delays and IIs, all
/// firing `tokens` times, wired by `(producer, consumer)` pairs as edges
/// `e0..`. Port numbers follow edge order.
pub fn profiled_dag(ds: &[u64], iis: &[u64], tokens: usize, edges: &[(usize, usize)]) -> DataflowGraph {
    let mut g = DataflowGraph::new();
    let ins = |v: usize| edges.iter().filter(|e| e.1 == v).count();
    let outs = |v: usize| edges.iter().filter(|e| e.0 == v).count();
    for v in 0..ds.len() {
        g.nodes.push(
            KernelNode::new(format!("K{v}"), NodeKind::Compute)
                .with_ports(vec![scalar_stream(tokens); ins(v)], vec![scalar_stream(tokens); outs(v)])
                .with_profile(KernelProfile::new(ds[v], iis[v], tokens as u64).unwrap()),
        );
    }
    let (mut op, mut ip) = (vec![0; ds.len()], vec![0; ds.len()]);
    for (k, &(i, j)) in edges.iter().enumerate() {
        g.edges.push(FifoEdge::stream(
            format!("e{k}"),
            PortRef::new(format!("K{i}"), op[i]),
            PortRef::new(format!("K{j}"), ip[j]),
            scalar_stream(tokens),
        ));
        op[i] += 1;
        ip[j] += 1;
    }
    g
}

/// Two kernels joined by one unbounded FIFO, the consumer held until
/// `delay` cycles after the producer starts.
pub fn two_kernel_chain(src: KernelProfile, dst_ii: u64, delay: u64) -> DataflowGraph {
    let mut g = profiled_dag(&[src.d, 1], &[src.ii, dst_ii], src.t as usize, &[(0, 1)]);
    g.nodes[0].start_time = Some(0);
    g.nodes[1].start_time = Some(delay);
    g
}

/// Shape of a random DAG: node count, edges (producer index below
/// consumer index), and per-node D and II.
#[derive(Debug, Clone)]
pub struct RandomDag {
    pub ds: Vec<u64>,
    pub iis: Vec<u64>,
    pub tokens: usize,
    pub edges: Vec<(usize, usize)>,
}

impl RandomDag {
    /// Up to `max_nodes` nodes, edge probability 0.35, D in 1..=8,
    /// II in 1..=4, T in 1..=16.
    pub fn sample(rng: &mut impl Rng, max_nodes: usize) -> Self {
        let n = rng.gen_range(2..=max_nodes.max(2));
        let mut edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|j| (0..j).map(move |i| (i, j)))
            .filter(|_| rng.gen_bool(0.35))
            .collect();
        if edges.is_empty() {
            edges.push((0, 1));
        }
        Self {
            ds: (0..n).map(|_| rng.gen_range(1..=8)).collect(),
            iis: (0..n).map(|_| rng.gen_range(1..=4)).collect(),
            tokens: rng.gen_range(1..=16),
            edges,
        }
    }

    pub fn graph(&self) -> DataflowGraph {
        profiled_dag(&self.ds, &self.iis, self.tokens, &self.edges)
    }
}

/// Assembles a type from per-dim (tile, element) log2 extents, re-iteration
/// tripcounts and a level order.
pub fn build_type(
    dims: &[(u32, u32)],
    reiters: &[usize],
    order: &[usize],
    kind: ElementKind,
) -> Option<ITensorType> {
    let rank = dims.len();
    let data: Vec<usize> = dims.iter().map(|(t, e)| 1usize << (t + e)).collect();
    let elem: Vec<usize> = dims.iter().map(|(_, e)| 1usize << e).collect();
    if data.iter().product::<usize>() > 4096 {
        return None;
    }
    let levels = order.len();
    let mut trips = vec![0; levels];
    let mut steps = vec![0; levels];
    let mut dim_source = vec![0; rank];
    for (slot, &level) in order.iter().enumerate() {
        if slot < rank {
            trips[level] = data[slot] / elem[slot];
            steps[level] = elem[slot];
            dim_source[slot] = level;
        } else {
            trips[level] = reiters[slot - rank];
            steps[level] = 1;
        }
    }
    ITensorType::new(data, elem, trips, steps, dim_source, kind).ok()
}
