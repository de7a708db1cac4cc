//! Tile-and-lower: every op becomes one kernel whose ports carry the stream
//! layout its loop nest reads or writes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ops::{Access, LoopNest, OpGraph, Template};
use super::{FrontendError, OpTiling, TileConfig};
use crate::graph::{DataflowGraph, FifoEdge, KernelNode, NodeKind, PortRef};
use crate::itensor::{ElementKind, ITensorType};

/// What the profile model needs to know about a lowered op.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KernelInfo {
    pub op: String,
    pub template: Template,
    pub tiling: OpTiling,
    /// Loop tripcounts over tiles.
    pub trips: Vec<usize>,
    /// Scalar operations per firing.
    pub work: u64,
    pub unroll: u64,
    /// The kernel keeps an output tile live across a reduction sweep.
    pub accumulates: bool,
}

impl KernelInfo {
    pub fn firings(&self) -> u64 {
        self.trips.iter().map(|&t| t as u64).product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lowered {
    pub graph: DataflowGraph,
    /// Keyed by kernel id.
    pub kernels: BTreeMap<String, KernelInfo>,
}

/// Stream type of one operand. Inputs revisit tiles once per loop that does
/// not index them; outputs are only produced once, after their reduction
/// loops.
pub fn operand_type(
    nest: &LoopNest,
    access: &Access,
    shape: &[usize],
    kind: ElementKind,
    tiling: &OpTiling,
    is_output: bool,
) -> ITensorType {
    let element_shape: Vec<usize> = access.loops.iter().map(|&l| tiling.tile_sizes[l]).collect();
    let mut trips = vec![];
    let mut steps = vec![];
    let mut dim_source = vec![0; shape.len()];
    for &l in &tiling.loop_order {
        let trip = nest.loops[l].tripcount / tiling.tile_sizes[l];
        if let Some(d) = access.loops.iter().position(|&x| x == l) {
            dim_source[d] = trips.len();
            trips.push(trip);
            steps.push(tiling.tile_sizes[l]);
        } else if !is_output && trip > 1 {
            trips.push(trip);
            steps.push(1);
        }
    }
    ITensorType::new(shape.to_vec(), element_shape, trips, steps, dim_source, kind)
        .expect("lowered operand types are valid")
}

struct Use {
    node: String,
    port: usize,
    ty: ITensorType,
}

pub fn tile_and_lower(ops: &OpGraph, cfg: &TileConfig) -> Result<Lowered, FrontendError> {
    let ops = &ops.clone().normalized()?;
    let mut g = DataflowGraph::new();
    let mut kernels = BTreeMap::new();
    // tensor -> (producing port, type)
    let mut produced: BTreeMap<String, (PortRef, ITensorType)> = BTreeMap::new();
    let mut uses: BTreeMap<String, Vec<Use>> = BTreeMap::new();

    for i in ops.op_order()? {
        let op = &ops.ops[i];
        let nest = ops.loop_nest(op)?;
        let tiling = cfg.resolve(&op.id, &nest)?;
        let mut ins = vec![];
        for (port, acc) in nest.inputs.iter().enumerate() {
            let decl = ops.decl(&acc.tensor)?;
            let ty = operand_type(&nest, acc, &decl.shape, decl.kind.clone(), &tiling, false);
            uses.entry(acc.tensor.clone()).or_default().push(Use {
                node: op.id.clone(),
                port,
                ty: ty.clone(),
            });
            ins.push(ty);
        }
        let out = operand_type(
            &nest,
            &nest.output,
            &nest.output_shape,
            ops.kind_of(&op.output),
            &tiling,
            true,
        );
        produced.insert(op.output.clone(), (PortRef::new(op.id.clone(), 0), out.clone()));
        let mut node = KernelNode::new(op.id.clone(), NodeKind::Compute).with_ports(ins, vec![out]);
        node.op = Some(op.id.clone());
        g.nodes.push(node);
        let trips: Vec<usize> = nest
            .loops
            .iter()
            .zip(&tiling.tile_sizes)
            .map(|(l, t)| l.tripcount / t)
            .collect();
        kernels.insert(
            op.id.clone(),
            KernelInfo {
                op: op.id.clone(),
                template: op.template,
                work: tiling.tile_sizes.iter().map(|&t| t as u64).product(),
                unroll: tiling.unroll_factors.iter().map(|&u| u as u64).product(),
                accumulates: nest.reduction_loops().next().is_some(),
                trips,
                tiling,
            },
        );
    }

    // Graph inputs: one load per tensor, read in the layout of its first
    // consumer; further consumers hang off a fork like any shared result.
    for tensor in ops.graph_inputs() {
        let ty = uses[&tensor][0].ty.clone();
        let id = format!("load_{tensor}");
        let mut dma = KernelNode::new(id.clone(), NodeKind::DmaIn).with_ports(vec![], vec![ty.clone()]);
        dma.op = Some(tensor.clone());
        g.nodes.push(dma);
        produced.insert(tensor, (PortRef::new(id, 0), ty));
    }

    let outputs = ops.graph_outputs();
    for (tensor, (src, ty)) in &produced {
        let mut sinks: Vec<PortRef> = uses
            .get(tensor)
            .map(|v| v.iter().map(|u| PortRef::new(u.node.clone(), u.port)).collect())
            .unwrap_or_default();
        if outputs.contains(tensor) {
            let id = format!("store_{tensor}");
            let mut dma = KernelNode::new(id.clone(), NodeKind::DmaOut).with_ports(vec![ty.clone()], vec![]);
            dma.op = Some(tensor.clone());
            g.nodes.push(dma);
            sinks.push(PortRef::new(id, 0));
        }
        match sinks.len() {
            0 => {
                return Err(FrontendError::Op {
                    op: src.node.clone(),
                    msg: format!("result `{tensor}` is never used"),
                })
            }
            1 => {
                let sink = sinks.pop().unwrap();
                g.edges.push(external_edge(tensor, src.clone(), sink, ty.clone()));
            }
            k => {
                let fork_id = format!("fork_{tensor}");
                let fork = KernelNode::new(fork_id.clone(), NodeKind::Fork)
                    .with_ports(vec![ty.clone()], vec![ty.clone(); k]);
                g.nodes.push(fork);
                g.edges.push(external_edge(tensor, src.clone(), PortRef::new(fork_id.clone(), 0), ty.clone()));
                for (i, sink) in sinks.into_iter().enumerate() {
                    g.edges.push(external_edge(tensor, PortRef::new(fork_id.clone(), i), sink, ty.clone()));
                }
            }
        }
    }
    Ok(Lowered { graph: g, kernels })
}

fn external_edge(tensor: &str, producer: PortRef, consumer: PortRef, ty: ITensorType) -> FifoEdge {
    let id = format!("{tensor}:{}.{}", consumer.node, consumer.port);
    let mut e = FifoEdge::stream(id, producer, consumer, ty);
    e.external = true;
    e.tensor = Some(tensor.to_string());
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{OpNode, TensorDecl, TileOverride};
    use crate::graph::validate_graph;

    fn tensors(list: &[(&str, Vec<usize>)]) -> BTreeMap<String, TensorDecl> {
        list.iter()
            .map(|(n, s)| {
                (
                    n.to_string(),
                    TensorDecl {
                        shape: s.clone(),
                        kind: ElementKind::f32(),
                    },
                )
            })
            .collect()
    }

    fn op(id: &str, template: Template, inputs: &[&str], output: &str) -> OpNode {
        OpNode {
            id: id.into(),
            template,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.into(),
            perm: None,
        }
    }

    #[test]
    fn elementwise_tiles_row_major() {
        let ops = OpGraph {
            tensors: tensors(&[("x", vec![64, 64])]),
            ops: vec![op("relu", Template::ElementwiseUnary, &["x"], "y")],
            outputs: vec![],
        };
        let low = tile_and_lower(&ops, &TileConfig::default()).unwrap();
        let relu = low.graph.node("relu").unwrap();
        let t = &relu.in_ports[0];
        assert_eq!(t.iter_tripcounts, [4, 4]);
        assert_eq!(t.dim_source, [0, 1]);
        assert_eq!(t.element_shape, [16, 16]);
        assert_eq!(relu.out_ports[0], *t);
        assert_eq!(low.kernels["relu"].firings(), 16);
        validate_graph(&low.graph).unwrap();
        let ids: Vec<&str> = low.graph.nodes.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, ["relu", "load_x", "store_y"]);
        assert!(low.graph.edges.iter().all(|e| e.external));
    }

    #[test]
    fn matmul_operand_reiterates_under_outer_loop() {
        let ops = OpGraph {
            tensors: tensors(&[("a", vec![16, 32]), ("b", vec![32, 16])]),
            ops: vec![op("mm", Template::Matmul, &["a", "b"], "c")],
            outputs: vec![],
        };
        let mut cfg = TileConfig {
            default_tile_size: 4,
            ..Default::default()
        };
        // j outermost: A is re-read once per column tile.
        cfg.ops.insert(
            "mm".into(),
            TileOverride {
                loop_order: Some(vec![1, 0, 2]),
                ..Default::default()
            },
        );
        let low = tile_and_lower(&ops, &cfg).unwrap();
        let mm = low.graph.node("mm").unwrap();
        let a = &mm.in_ports[0];
        assert_eq!(a.iter_tripcounts, [4, 4, 8]);
        assert!(a.is_reiteration(0));
        assert_eq!(a.dim_source, [1, 2]);
        let seq = a.access_sequence();
        for tile in [[0, 0], [12, 28]] {
            assert_eq!(seq.iter().filter(|o| o[..] == tile[..]).count(), 16 / 4);
        }
        // Output drops the reduction level and is pushed once per sweep.
        let c = &mm.out_ports[0];
        assert_eq!(c.iter_tripcounts, [4, 4]);
        assert_eq!(c.dim_source, [1, 0]);
        assert_eq!(mm.out_rate(0), 8);
        assert_eq!(low.kernels["mm"].firings() / c.token_count(), 8);
        assert!(low.kernels["mm"].accumulates);
    }

    #[test]
    fn shared_tensor_gets_fork_and_output_store() {
        let ops = OpGraph {
            tensors: tensors(&[("x", vec![8, 8])]),
            ops: vec![
                op("p", Template::ElementwiseUnary, &["x"], "h"),
                op("q", Template::ElementwiseBinary, &["h", "x"], "y"),
            ],
            outputs: vec!["h".into(), "y".into()],
        };
        let low = tile_and_lower(&ops, &TileConfig::default()).unwrap();
        validate_graph(&low.graph).unwrap();
        let fork = low.graph.node("fork_h").unwrap();
        assert_eq!(fork.out_ports.len(), 2);
        assert!(low.graph.node("store_h").is_some());
        assert!(low.graph.node("load_x").is_some());
        assert_eq!(low.graph.node("fork_x").unwrap().out_ports.len(), 2);
        assert_eq!(low.graph.edges.len(), 7);
    }

    #[test]
    fn bad_tiling_is_rejected() {
        let ops = OpGraph {
            tensors: tensors(&[("x", vec![12])]),
            ops: vec![op("r", Template::ElementwiseUnary, &["x"], "y")],
            outputs: vec![],
        };
        let mut cfg = TileConfig::default();
        cfg.ops.insert(
            "r".into(),
            TileOverride {
                tile_sizes: Some(vec![5]),
                ..Default::default()
            },
        );
        assert!(matches!(tile_and_lower(&ops, &cfg), Err(FrontendError::Tiling { .. })));
    }
}
