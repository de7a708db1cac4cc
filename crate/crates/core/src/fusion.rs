//! Greedy stream fusion under an on-chip memory budget, with converter
//! insertion, DMA folding and stream vectorization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::converter::{infer_converter, ConverterError, PING_PONG};
use crate::graph::{topo_order, validate_graph, DataflowGraph, FifoEdge, KernelNode, KernelProfile, NodeKind, PortRef, ValidationReport};
use crate::itensor::ITensorType;

/// FIFO depth assumed while costing; real depths come from sizing.
pub const DEFAULT_FIFO_DEPTH: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FusionError {
    #[error("FIFO depth must be at least 1")]
    ZeroDepth,
    #[error("edge `{edge}`: {source}")]
    Converter { edge: String, source: ConverterError },
    #[error("node `{node}` needs {cost} bytes on its own, over the {cmax}-byte budget; refine its tiling")]
    OverBudget { node: String, cost: u64, cmax: u64 },
    #[error("invalid graph: {0}")]
    Invalid(ValidationReport),
    #[error("edge `{edge}`: {msg}")]
    Vectorize { edge: String, msg: String },
}

/// Bytes a stream between two port types needs: a converter when the
/// layouts differ, plus a FIFO of `depth` producer tokens.
pub fn pair_cost(src: &ITensorType, dst: &ITensorType, depth: u64) -> Result<u64, ConverterError> {
    let fifo = depth * src.token_bytes();
    if src.matches(dst) {
        return Ok(fifo);
    }
    Ok(infer_converter(src, dst)?.byte_cost + fifo)
}

fn consumer_type<'a>(g: &'a DataflowGraph, e: &FifoEdge) -> &'a ITensorType {
    &g.node(&e.consumer.node).expect("validated graph").in_ports[e.consumer.port]
}

pub fn edge_memory_cost(g: &DataflowGraph, e: &FifoEdge, depth: u64) -> Result<u64, FusionError> {
    if depth == 0 {
        return Err(FusionError::ZeroDepth);
    }
    pair_cost(&e.ty, consumer_type(g, e), depth).map_err(|source| FusionError::Converter {
        edge: e.id.clone(),
        source,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FusionPlan {
    pub groups: Vec<Vec<String>>,
    pub costs: Vec<u64>,
    pub node_to_group: BTreeMap<String, usize>,
}

impl FusionPlan {
    pub fn group_of(&self, node: &str) -> Option<usize> {
        self.node_to_group.get(node).copied()
    }

    pub fn fits(&self, cmax: u64) -> bool {
        self.costs.iter().all(|&c| c <= cmax)
    }
}

/// Memory interfaces are not fused on their own; they follow the kernel
/// they feed or drain.
fn participates(node: &KernelNode) -> bool {
    !matches!(node.kind, NodeKind::DmaIn | NodeKind::DmaOut)
}

/// Visits nodes in topological order and joins each one to the newest
/// group among its producers when the budget allows, otherwise opens a new
/// group. Group cost counts interior edges and member resource costs.
pub fn plan_fusion(g: &DataflowGraph, cmax: u64, depth: u64) -> Result<FusionPlan, FusionError> {
    validate_graph(g).map_err(FusionError::Invalid)?;
    let order = topo_order(g).expect("validated graphs are acyclic");
    let adj = g.adjacency();
    let mut plan = FusionPlan::default();
    for v in order {
        let node = &g.nodes[v];
        if !participates(node) {
            continue;
        }
        if node.resource_cost > cmax {
            return Err(FusionError::OverBudget {
                node: node.id.clone(),
                cost: node.resource_cost,
                cmax,
            });
        }
        let mut cand: BTreeMap<usize, u64> = BTreeMap::new();
        for &e in &adj.inputs[v] {
            let edge = &g.edges[e];
            if let Some(&f) = plan.node_to_group.get(&edge.producer.node) {
                *cand.entry(f).or_default() += edge_memory_cost(g, edge, depth)?;
            }
        }
        let target = cand
            .iter()
            .next_back()
            .map(|(&f, &c)| (f, c))
            .filter(|&(f, c)| plan.costs[f] + c + node.resource_cost <= cmax);
        let f = match target {
            Some((f, c)) => {
                plan.costs[f] += c + node.resource_cost;
                plan.groups[f].push(node.id.clone());
                f
            }
            None => {
                plan.groups.push(vec![node.id.clone()]);
                plan.costs.push(node.resource_cost);
                plan.groups.len() - 1
            }
        };
        plan.node_to_group.insert(node.id.clone(), f);
    }
    Ok(plan)
}

/// Plans fusion and rewrites the graph: fusion indices on nodes, interior
/// edges become streams, and a converter is inserted on every interior edge
/// whose two ends disagree on layout.
pub fn explore_fusion(g: &mut DataflowGraph, cmax: u64, depth: u64) -> Result<FusionPlan, FusionError> {
    let mut plan = plan_fusion(g, cmax, depth)?;
    apply_plan(g, &mut plan)?;
    Ok(plan)
}

/// Group of a node, with DMA nodes placed next to their kernel.
fn placed_group(g: &DataflowGraph, plan: &FusionPlan, node: &str) -> Option<usize> {
    plan.group_of(node).or_else(|| {
        let n = g.node(node)?;
        let neighbour = match n.kind {
            NodeKind::DmaIn => &g.edges.iter().find(|e| e.producer.node == node)?.consumer.node,
            NodeKind::DmaOut => &g.edges.iter().find(|e| e.consumer.node == node)?.producer.node,
            _ => return None,
        };
        plan.group_of(neighbour)
    })
}

pub fn apply_plan(g: &mut DataflowGraph, plan: &mut FusionPlan) -> Result<(), FusionError> {
    let placed: Vec<Option<usize>> = g.nodes.iter().map(|n| placed_group(g, plan, &n.id)).collect();
    for (node, f) in g.nodes.iter_mut().zip(placed) {
        node.fusion_index = f.map(|f| f as u32);
    }
    let group = |g: &DataflowGraph, id: &str| g.node(id).and_then(|n| n.fusion_index);
    let mut inserted = vec![];
    for i in 0..g.edges.len() {
        let f = group(g, &g.edges[i].producer.node);
        let interior = f.is_some() && f == group(g, &g.edges[i].consumer.node);
        g.edges[i].external = !interior;
        if !interior {
            continue;
        }
        let dst = consumer_type(g, &g.edges[i]).clone();
        if g.edges[i].ty.matches(&dst) {
            continue;
        }
        let edge = g.edges[i].clone();
        let spec = infer_converter(&edge.ty, &dst).map_err(|source| FusionError::Converter {
            edge: edge.id.clone(),
            source,
        })?;
        let id = g.fresh_id(&format!("cvt_{}_{}_", edge.consumer.node, edge.consumer.port));
        let mut cvt = KernelNode::new(id.clone(), NodeKind::Converter).with_ports(vec![edge.ty.clone()], vec![dst.clone()]);
        cvt.resource_cost = spec.byte_cost;
        cvt.converter = Some(spec);
        cvt.fusion_index = f;
        let mut head = FifoEdge::stream(format!("{}>cvt", edge.id), edge.producer.clone(), PortRef::new(id.clone(), 0), edge.ty.clone());
        head.tensor = edge.tensor.clone();
        let e = &mut g.edges[i];
        e.producer = PortRef::new(id.clone(), 0);
        e.ty = dst;
        let f = f.unwrap() as usize;
        plan.groups[f].push(id.clone());
        plan.node_to_group.insert(id, f);
        inserted.push((cvt, head));
    }
    for (cvt, head) in inserted {
        g.nodes.push(cvt);
        g.edges.push(head);
    }
    debug_assert!(validate_graph(g).is_ok());
    Ok(())
}

/// Interior edge between a DMA and a compute kernel with identical layouts
/// at both ends.
fn foldable(g: &DataflowGraph, e: &FifoEdge) -> bool {
    let (p, c) = (g.node(&e.producer.node).unwrap(), g.node(&e.consumer.node).unwrap());
    let dma_compute = matches!(
        (p.kind, c.kind),
        (NodeKind::DmaIn, NodeKind::Compute) | (NodeKind::Compute, NodeKind::DmaOut)
    );
    dma_compute && !e.external && p.fusion_index.is_some() && p.fusion_index == c.fusion_index && e.ty.matches(&c.in_ports[e.consumer.port])
}

fn merge_profiles(a: Option<KernelProfile>, b: Option<KernelProfile>, t: Option<u64>) -> Option<KernelProfile> {
    match (a, b) {
        (Some(a), Some(b)) => {
            let t = t.unwrap_or(b.t);
            KernelProfile::new(a.d + b.d, a.ii.max(b.ii), t).ok()
        }
        (a, b) => a.or(b),
    }
}

/// Removes DMA nodes whose tile goes straight into (or out of) a fused
/// kernel with the same layout, folding their cost into the kernel.
/// Returns the new graph and the ids of the folded edges.
pub fn fold_identity_edges(g: &DataflowGraph) -> (DataflowGraph, Vec<String>) {
    let mut out = g.clone();
    let mut folded = vec![];
    while let Some(i) = out.edges.iter().position(|e| foldable(&out, e)) {
        let e = out.edges.remove(i);
        let p_kind = out.node(&e.producer.node).unwrap().kind;
        let (dma_id, kernel_id) = if p_kind == NodeKind::DmaIn {
            (e.producer.node.clone(), e.consumer.node.clone())
        } else {
            (e.consumer.node.clone(), e.producer.node.clone())
        };
        let dma = out.node(&dma_id).unwrap().clone();
        out.nodes.retain(|n| n.id != dma_id);
        let kernel = out.node_mut(&kernel_id).unwrap();
        let t = kernel.profile.map(|p| p.t);
        kernel.profile = merge_profiles(kernel.profile, dma.profile, t);
        kernel.resource_cost += dma.resource_cost;
        // Drop the kernel port and shift the later ones down.
        if p_kind == NodeKind::DmaIn {
            let port = e.consumer.port;
            kernel.in_ports.remove(port);
            for x in &mut out.edges {
                if x.consumer.node == kernel_id && x.consumer.port > port {
                    x.consumer.port -= 1;
                }
            }
        } else {
            let port = e.producer.port;
            kernel.out_ports.remove(port);
            for x in &mut out.edges {
                if x.producer.node == kernel_id && x.producer.port > port {
                    x.producer.port -= 1;
                }
            }
        }
        folded.push(e.id);
    }
    (out, folded)
}

/// Regroups a stream so each token carries `factors[d]` times more data
/// along dim `d`. The level driving every widened dim must divide.
pub fn vectorize_type(ty: &ITensorType, factors: &[usize]) -> Result<ITensorType, String> {
    if factors.len() != ty.rank() {
        return Err(format!("expected {} factors, got {}", ty.rank(), factors.len()));
    }
    let mut out = ty.clone();
    for (d, &f) in factors.iter().enumerate() {
        let level = ty.dim_source[d];
        if f == 0 || !ty.iter_tripcounts[level].is_multiple_of(f) {
            return Err(format!(
                "factor {f} does not divide tripcount {} of dim {d}",
                ty.iter_tripcounts[level]
            ));
        }
        out.iter_tripcounts[level] /= f;
        out.iter_steps[level] *= f;
        out.element_shape[d] *= f;
    }
    out.validate().map_err(|e| e.to_string())?;
    Ok(out)
}

/// Factors that widen only the dim driven by the innermost level.
pub fn innermost_factors(ty: &ITensorType, factor: usize) -> Result<Vec<usize>, String> {
    let last = ty.depth().checked_sub(1).ok_or("type has no levels")?;
    let d = ty
        .driven_dim(last)
        .ok_or_else(|| "innermost level re-iterates; nothing to widen".to_string())?;
    let mut f = vec![1; ty.rank()];
    f[d] = factor;
    Ok(f)
}

fn rescale(p: &mut Option<KernelProfile>, factor: u64) -> Result<(), String> {
    if let Some(old) = *p {
        if old.t % factor != 0 {
            return Err(format!("factor {factor} does not divide T = {}", old.t));
        }
        let ii = old.ii * factor;
        *p = Some(KernelProfile::new(old.d + (factor - 1) * old.ii, ii, old.t / factor).map_err(|e| e.to_string())?);
    }
    Ok(())
}

/// Widens the listed streams along their innermost dim. Both endpoint
/// kernels fire `factor` times less often with `factor` times the work per
/// firing; every port on them must be widened consistently.
pub fn vectorize_streams(g: &DataflowGraph, factors: &BTreeMap<String, usize>) -> Result<DataflowGraph, FusionError> {
    let mut out = g.clone();
    let mut scaled: BTreeMap<String, usize> = BTreeMap::new();
    for (edge_id, &factor) in factors {
        if factor == 1 {
            continue;
        }
        let err = |msg: String| FusionError::Vectorize {
            edge: edge_id.clone(),
            msg,
        };
        let i = out
            .edges
            .iter()
            .position(|e| &e.id == edge_id)
            .ok_or_else(|| err("no such edge".into()))?;
        let e = out.edges[i].clone();
        let f = innermost_factors(&e.ty, factor).map_err(err)?;
        let wide = vectorize_type(&e.ty, &f).map_err(err)?;
        out.edges[i].ty = wide.clone();
        out.node_mut(&e.producer.node).unwrap().out_ports[e.producer.port] = wide.clone();
        out.node_mut(&e.consumer.node).unwrap().in_ports[e.consumer.port] = wide;
        for n in [&e.producer.node, &e.consumer.node] {
            match scaled.get(n) {
                Some(&prev) if prev != factor => {
                    return Err(err(format!("node `{n}` already widened by {prev}")));
                }
                Some(_) => {}
                None => {
                    rescale(&mut out.node_mut(n).unwrap().profile, factor as u64).map_err(err)?;
                    scaled.insert(n.clone(), factor);
                }
            }
        }
    }
    validate_graph(&out).map_err(FusionError::Invalid)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TensorMemory {
    pub tensor: String,
    /// Size of the tensor itself.
    pub bytes: u64,
    pub before: u64,
    pub after: u64,
    pub streamed: bool,
}

/// On-chip bytes held for intermediate tensors before and after fusion.
/// Unfused, every intermediate sits in a full ping-pong buffer, priced like
/// a converter buffer, so producer and consumer can overlap. Fused, a fully
/// streamed tensor costs its converters plus its FIFOs; anything still
/// crossing a group boundary keeps its ping-pong buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MemoryReport {
    /// Summed tensor sizes, without double buffering.
    pub tensor_bytes: u64,
    pub baseline: u64,
    pub fused: u64,
    pub tensors: Vec<TensorMemory>,
}

impl MemoryReport {
    pub fn ratio(&self) -> f64 {
        if self.baseline == 0 {
            return 1.0;
        }
        self.fused as f64 / self.baseline as f64
    }
}

/// Edges from a compute kernel to a compute kernel, possibly through forks
/// and converters, are intermediate. `fifo_bytes` prices one stream edge.
pub fn memory_report(g: &DataflowGraph, fifo_bytes: impl Fn(&FifoEdge) -> u64) -> MemoryReport {
    let kind = |id: &str| g.node(id).map(|n| n.kind);
    let mut by_tensor: BTreeMap<&str, Vec<&FifoEdge>> = BTreeMap::new();
    for e in &g.edges {
        if let Some(t) = &e.tensor {
            by_tensor.entry(t).or_default().push(e);
        }
    }
    let mut tensors = vec![];
    for (t, edges) in by_tensor {
        let from_memory = edges.iter().any(|e| kind(&e.producer.node) == Some(NodeKind::DmaIn));
        let to_kernel = edges.iter().any(|e| kind(&e.consumer.node) == Some(NodeKind::Compute));
        if from_memory || !to_kernel {
            continue;
        }
        let bytes = edges[0].ty.tensor_bytes();
        let before = PING_PONG * bytes;
        let converters: BTreeSet<&str> = edges
            .iter()
            .filter(|e| kind(&e.consumer.node) == Some(NodeKind::Converter))
            .map(|e| e.consumer.node.as_str())
            .collect();
        let conv_bytes: u64 = converters.iter().map(|c| g.node(c).unwrap().resource_cost).sum();
        let fifos: u64 = edges.iter().filter(|e| !e.external).map(|e| fifo_bytes(e)).sum();
        let streamed = edges.iter().all(|e| !e.external);
        let after = conv_bytes + fifos + if streamed { 0 } else { before };
        tensors.push(TensorMemory {
            tensor: t.to_string(),
            bytes,
            before,
            after,
            streamed,
        });
    }
    MemoryReport {
        tensor_bytes: tensors.iter().map(|t| t.bytes).sum(),
        baseline: tensors.iter().map(|t| t.before).sum(),
        fused: tensors.iter().map(|t| t.after).sum(),
        tensors,
    }
}

/// Sized depth when present, otherwise the costing default.
pub fn sized_fifo_bytes(e: &FifoEdge) -> u64 {
    e.depth.unwrap_or(DEFAULT_FIFO_DEPTH) * e.ty.token_bytes()
}

pub fn fusion_report(g: &DataflowGraph, plan: &FusionPlan, cmax: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "fusion groups: {} (budget {cmax} bytes)", plan.groups.len());
    for (i, (members, cost)) in plan.groups.iter().zip(&plan.costs).enumerate() {
        let _ = writeln!(s, "  group {i}: {cost} bytes: {}", members.join(", "));
    }
    let converters: Vec<&KernelNode> = g.nodes.iter().filter(|n| n.kind == NodeKind::Converter).collect();
    let _ = writeln!(s, "converters: {}", converters.len());
    for c in converters {
        if let Some(spec) = &c.converter {
            let _ = writeln!(
                s,
                "  {}: buffer {:?} after {} shared loop(s), {} bytes",
                c.id, spec.buf_shape, spec.shared_loop_depth, spec.byte_cost
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{column_tiles, column_tiles_twice};
    use crate::itensor::ElementKind;

    /// Chain k0 -> k1 -> ... whose edge `i` costs `costs[i]` bytes at FIFO
    /// depth 1 (one token of that many bytes).
    fn chain_with_costs(costs: &[u64]) -> DataflowGraph {
        let mut g = DataflowGraph::default();
        let ty = |c: u64| ITensorType::whole(vec![1], ElementKind::new("b", c as u32));
        for i in 0..=costs.len() {
            let ins = if i == 0 { vec![] } else { vec![ty(costs[i - 1])] };
            let outs = if i == costs.len() { vec![] } else { vec![ty(costs[i])] };
            g.nodes.push(KernelNode::new(format!("k{i}"), NodeKind::Compute).with_ports(ins, outs));
        }
        for (i, &c) in costs.iter().enumerate() {
            g.edges.push(FifoEdge::stream(
                format!("e{i}"),
                PortRef::new(format!("k{i}"), 0),
                PortRef::new(format!("k{}", i + 1), 0),
                ty(c),
            ));
        }
        g
    }

    #[test]
    fn edge_costs() {
        let t = ITensorType::row_major(vec![8, 8], vec![4, 2], ElementKind::f32()).unwrap();
        assert_eq!(pair_cost(&t, &t, 2).unwrap(), 64);
        assert_eq!(pair_cost(&column_tiles(), &column_tiles_twice(), 2).unwrap(), 128 + 2 * column_tiles().token_bytes());
        let g = chain_with_costs(&[1]);
        assert_eq!(edge_memory_cost(&g, &g.edges[0], 0), Err(FusionError::ZeroDepth));
    }

    #[test]
    fn chain_hand_trace() {
        let mut g = chain_with_costs(&[10, 20]);
        let plan = plan_fusion(&g, 25, 1).unwrap();
        assert_eq!(plan.groups, vec![vec!["k0".to_string(), "k1".into()], vec!["k2".into()]]);
        assert_eq!(plan.costs, [10, 0]);

        let all_single = plan_fusion(&g, 0, 1).unwrap();
        assert_eq!(all_single.groups.len(), 3);
        assert!(all_single.fits(0));

        explore_fusion(&mut g, 25, 1).unwrap();
        assert!(!g.edges[0].external);
        assert!(g.edges[1].external);
        assert_eq!(g.node("k2").unwrap().fusion_index, Some(1));
    }

    #[test]
    fn diamond_sums_edges_from_one_group() {
        let ty = ITensorType::whole(vec![1], ElementKind::new("b", 10));
        let mut g = DataflowGraph::default();
        g.nodes.push(KernelNode::new("a", NodeKind::Compute).with_ports(vec![], vec![ty.clone(), ty.clone()]));
        g.nodes.push(KernelNode::new("b", NodeKind::Compute).with_ports(vec![ty.clone()], vec![ty.clone()]));
        g.nodes.push(KernelNode::new("c", NodeKind::Compute).with_ports(vec![ty.clone(), ty.clone()], vec![]));
        let e = |id: &str, p: &str, pp, c: &str, cp| FifoEdge::stream(id, PortRef::new(p, pp), PortRef::new(c, cp), ty.clone());
        g.edges = vec![e("ab", "a", 0, "b", 0), e("ac", "a", 1, "c", 0), e("bc", "b", 0, "c", 1)];
        // a, b fused at 10; c brings 20 more.
        assert_eq!(plan_fusion(&g, 30, 1).unwrap().costs, [30]);
        assert_eq!(plan_fusion(&g, 29, 1).unwrap().costs, [10, 0]);
    }

    #[test]
    fn oversized_node_is_an_error() {
        let mut g = chain_with_costs(&[1]);
        g.nodes[1].resource_cost = 100;
        assert!(matches!(plan_fusion(&g, 50, 2), Err(FusionError::OverBudget { ref node, .. }) if node == "k1"));
    }

    #[test]
    fn mismatched_interior_edge_gets_converter() {
        let mut g = DataflowGraph::default();
        g.nodes.push(KernelNode::new("p", NodeKind::Compute).with_ports(vec![], vec![column_tiles()]));
        g.nodes.push(KernelNode::new("c", NodeKind::Compute).with_ports(vec![column_tiles_twice()], vec![]));
        let mut e = FifoEdge::stream("x", PortRef::new("p", 0), PortRef::new("c", 0), column_tiles());
        e.external = true;
        g.edges.push(e);
        let plan = explore_fusion(&mut g, u64::MAX, 2).unwrap();
        assert_eq!(plan.groups.len(), 1);
        validate_graph(&g).unwrap();
        let cvt = g.nodes.iter().find(|n| n.kind == NodeKind::Converter).unwrap();
        assert_eq!(cvt.converter.as_ref().unwrap().buf_shape, [8, 2]);
        assert_eq!(plan.group_of(&cvt.id), Some(0));
        assert!(g.edges.iter().all(|e| !e.external));
        assert!(fusion_report(&g, &plan, u64::MAX).contains("[8, 2]"));
    }

    #[test]
    fn dma_folding() {
        let t = column_tiles();
        let mut g = DataflowGraph::default();
        g.nodes.push(
            KernelNode::new("load", NodeKind::DmaIn)
                .with_ports(vec![], vec![t.clone()])
                .with_profile(KernelProfile::new(10, 2, 8).unwrap()),
        );
        g.nodes.push(
            KernelNode::new("k", NodeKind::Compute)
                .with_ports(vec![t.clone()], vec![column_tiles_twice()])
                .with_profile(KernelProfile::new(5, 3, 8).unwrap()),
        );
        g.nodes.push(
            KernelNode::new("store", NodeKind::DmaOut)
                .with_ports(vec![column_tiles_twice()], vec![])
                .with_profile(KernelProfile::new(9, 1, 8).unwrap()),
        );
        g.edges.push(FifoEdge::stream("in", PortRef::new("load", 0), PortRef::new("k", 0), t.clone()));
        g.edges.push(FifoEdge::stream("out", PortRef::new("k", 0), PortRef::new("store", 0), column_tiles_twice()));
        for n in &mut g.nodes {
            n.fusion_index = Some(0);
        }
        let (folded, ids) = fold_identity_edges(&g);
        assert_eq!(ids, ["in", "out"]);
        assert_eq!(folded.nodes.len(), 1);
        let p = folded.nodes[0].profile.unwrap();
        assert_eq!((p.d, p.ii, p.t), (24, 3, 8));
        validate_graph(&folded).unwrap();

        // A layout change blocks folding.
        g.nodes[1].in_ports[0] = column_tiles_twice();
        g.edges[0].ty = column_tiles_twice();
        g.nodes[0].out_ports[0] = column_tiles_twice();
        g.nodes[0].fusion_index = Some(1);
        let (same, ids) = fold_identity_edges(&g);
        assert_eq!(ids, ["out"]);
        assert_eq!(same.nodes.len(), 2);
    }

    #[test]
    fn vectorized_sequence_groups_original() {
        let t = ITensorType::row_major(vec![8, 8], vec![1, 1], ElementKind::f32()).unwrap();
        let wide = vectorize_type(&t, &innermost_factors(&t, 4).unwrap()).unwrap();
        assert_eq!(wide.element_shape, [1, 4]);
        let orig = t.access_sequence();
        let grouped: Vec<_> = orig.iter().step_by(4).cloned().collect();
        assert_eq!(wide.access_sequence(), grouped);
        assert_eq!(vectorize_type(&t, &[1, 1]).unwrap(), t);
        assert!(vectorize_type(&t, &[1, 3]).is_err());

        let block = vectorize_type(&t, &[2, 4]).unwrap();
        assert_eq!(block.element_shape, [2, 4]);
        assert_eq!(t.token_count() / block.token_count(), 8);
    }

    #[test]
    fn vectorize_stream_updates_both_ends() {
        let t = ITensorType::row_major(vec![4, 8], vec![1, 1], ElementKind::f32()).unwrap();
        let mut g = DataflowGraph::default();
        g.nodes.push(
            KernelNode::new("a", NodeKind::Compute)
                .with_ports(vec![], vec![t.clone()])
                .with_profile(KernelProfile::new(3, 1, 32).unwrap()),
        );
        g.nodes.push(
            KernelNode::new("b", NodeKind::Compute)
                .with_ports(vec![t.clone()], vec![])
                .with_profile(KernelProfile::new(2, 1, 32).unwrap()),
        );
        g.edges.push(FifoEdge::stream("ab", PortRef::new("a", 0), PortRef::new("b", 0), t));
        let factors = BTreeMap::from([("ab".to_string(), 4usize)]);
        let v = vectorize_streams(&g, &factors).unwrap();
        assert_eq!(v.nodes[0].profile.unwrap().t, 8);
        assert_eq!(v.nodes[1].profile.unwrap().ii, 4);
        assert_eq!(v.edges[0].ty.token_count(), 8);
        let bad = BTreeMap::from([("ab".to_string(), 3usize)]);
        assert!(matches!(vectorize_streams(&g, &bad), Err(FusionError::Vectorize { .. })));
    }
}
