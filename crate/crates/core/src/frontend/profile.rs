//! Analytic kernel profiles, with per-node overrides from measurements.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::lower::{KernelInfo, Lowered};
use super::FrontendError;
use crate::graph::{DataflowGraph, KernelNode, KernelProfile, NodeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CostModel {
    /// Pipeline stages between reading an input and writing a result.
    pub pipe_depth: u64,
    pub bus_bits: u64,
    /// Extra cycles before the first beat of a memory transfer.
    pub dma_latency: u64,
    /// When false every node needs an override.
    pub analytic: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            pipe_depth: 4,
            bus_bits: 512,
            dma_latency: 8,
            analytic: true,
        }
    }
}

/// Measured profiles keyed by node id, applied verbatim.
pub type ProfileOverrides = BTreeMap<String, KernelProfile>;

fn mk(node: &KernelNode, d: u64, ii: u64, t: u64) -> Result<KernelProfile, FrontendError> {
    KernelProfile::new(d, ii, t).map_err(|e| FrontendError::BadProfile {
        node: node.id.clone(),
        msg: e.to_string(),
    })
}

fn beats(bytes: u64, bus_bits: u64) -> u64 {
    (bytes * 8).div_ceil(bus_bits).max(1)
}

/// Profile of one node from the analytic model. `info` is required for
/// compute kernels.
pub fn estimate_profile(
    node: &KernelNode,
    info: Option<&KernelInfo>,
    model: &CostModel,
) -> Result<KernelProfile, FrontendError> {
    match node.kind {
        NodeKind::Compute => {
            let info = info.ok_or_else(|| FrontendError::MissingProfile(node.id.clone()))?;
            let ii = info.work.div_ceil(info.unroll).max(1);
            mk(node, ii + model.pipe_depth, ii, info.firings())
        }
        NodeKind::DmaIn | NodeKind::DmaOut => {
            let ty = node.out_ports.first().or(node.in_ports.first()).expect("dma has one port");
            let ii = beats(ty.token_bytes(), model.bus_bits);
            mk(node, ii + model.dma_latency, ii, ty.token_count())
        }
        NodeKind::Fork | NodeKind::Join => mk(node, 1, 1, node.firings()),
        NodeKind::Converter => {
            let (src, dst) = (&node.in_ports[0], &node.out_ports[0]);
            let t = src.token_count().max(dst.token_count());
            let r_in = t / src.token_count();
            let reuse = node.converter.as_ref().map_or(1, |c| c.reuse_count()).max(1);
            // A full shared iteration must arrive before the first token
            // can leave.
            let fill = (src.token_count() / reuse).max(1) * r_in;
            mk(node, fill + model.pipe_depth, 1, t)
        }
    }
}

/// On-chip bytes a node holds for itself.
pub fn resource_cost(node: &KernelNode, info: Option<&KernelInfo>) -> u64 {
    match node.kind {
        NodeKind::Compute if info.is_some_and(|i| i.accumulates) => node.out_ports[0].token_bytes(),
        NodeKind::DmaIn => 2 * node.out_ports[0].token_bytes(),
        NodeKind::DmaOut => 2 * node.in_ports[0].token_bytes(),
        NodeKind::Converter => node.converter.as_ref().map_or(0, |c| c.byte_cost),
        _ => 0,
    }
}

/// Fills in profile and resource cost for every node.
pub fn annotate_profiles(
    g: &mut DataflowGraph,
    kernels: &BTreeMap<String, KernelInfo>,
    model: &CostModel,
    overrides: &ProfileOverrides,
) -> Result<(), FrontendError> {
    for node in &mut g.nodes {
        let info = kernels.get(&node.id);
        node.profile = Some(match overrides.get(&node.id) {
            Some(p) => *p,
            None if model.analytic => estimate_profile(node, info, model)?,
            None => return Err(FrontendError::MissingProfile(node.id.clone())),
        });
        node.resource_cost = resource_cost(node, info);
    }
    Ok(())
}

impl Lowered {
    pub fn annotate(&mut self, model: &CostModel, overrides: &ProfileOverrides) -> Result<(), FrontendError> {
        annotate_profiles(&mut self.graph, &self.kernels, model, overrides)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{tile_and_lower, OpGraph, TileConfig};
    use crate::graph::{require_profiles, validate_graph};

    fn demo() -> Lowered {
        let ops = OpGraph::from_json(
            r#"{"tensors": {"a": {"shape": [32, 32]}, "b": {"shape": [32, 32]}},
                "ops": [{"id": "mm", "template": "matmul", "inputs": ["a", "b"], "output": "c"},
                        {"id": "act", "template": "elementwise_unary", "inputs": ["c"], "output": "y"}]}"#,
        )
        .unwrap();
        tile_and_lower(&ops, &TileConfig::default()).unwrap()
    }

    #[test]
    fn analytic_profiles() {
        let mut low = demo();
        low.annotate(&CostModel::default(), &ProfileOverrides::new()).unwrap();
        validate_graph(&low.graph).unwrap();
        require_profiles(&low.graph).unwrap();
        let mm = low.graph.node("mm").unwrap();
        // 16x16x16 tile, no unroll: one MAC per cycle.
        assert_eq!(mm.profile.unwrap().ii, 4096);
        assert_eq!(mm.profile.unwrap().d, 4100);
        assert_eq!(mm.profile.unwrap().t, 8);
        assert_eq!(mm.resource_cost, 16 * 16 * 4);
        let load = low.graph.node("load_a").unwrap();
        // 1 KiB tile over a 64-byte bus.
        assert_eq!(load.profile.unwrap().ii, 16);
        assert_eq!(load.profile.unwrap().t, 8);
    }

    #[test]
    fn overrides_and_missing_profiles() {
        let mut low = demo();
        let mut ov = ProfileOverrides::new();
        ov.insert("act".into(), KernelProfile::new(7, 3, 4).unwrap());
        low.annotate(&CostModel::default(), &ov).unwrap();
        assert_eq!(low.graph.node("act").unwrap().profile.unwrap().d, 7);

        let model = CostModel {
            analytic: false,
            ..Default::default()
        };
        let err = low.annotate(&model, &ov).unwrap_err();
        assert!(matches!(err, FrontendError::MissingProfile(ref n) if n == "mm"), "{err}");
    }
}
