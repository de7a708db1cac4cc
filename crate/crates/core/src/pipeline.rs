//! End-to-end flow: lower, fuse, fold, vectorize, size, allocate, and the
//! checks that close the loop through the simulator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{
    apply_banks, assign_memory_banks, graph_buffers, partition_dies, AllocError, BankAssignment, BankSpec, DiePartition, DieSpec,
    PartitionWeights,
};
use crate::converter::{verify_converter, Counterexample};
use crate::frontend::{
    estimate_profile, tile_and_lower, CostModel, FrontendError, OpGraph, ProfileOverrides, TileConfig,
};
use crate::fusion::{
    explore_fusion, fold_identity_edges, memory_report, sized_fifo_bytes, vectorize_streams, FusionError, FusionPlan, MemoryReport,
    DEFAULT_FIFO_DEPTH,
};
use crate::graph::{validate_graph, DataflowGraph, NodeKind, ValidationReport};
use crate::sim::{simulate, Outcome, SimConfig, SimError, SimTrace};
use crate::sizing::{size_fifos, SizingError, SizingResult, Strategy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct CompileOptions {
    pub tiles: TileConfig,
    pub model: CostModel,
    pub overrides: ProfileOverrides,
    /// Fusion budget in bytes.
    pub cmax: u64,
    /// FIFO depth assumed by the fusion cost model.
    pub fifo_depth: u64,
    pub strategy: Strategy,
    pub fold: bool,
    /// Stream widening per edge id.
    pub vectorize: BTreeMap<String, usize>,
    pub dies: Option<DieSpec>,
    pub die_weights: PartitionWeights,
    pub banks: Option<BankSpec>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            tiles: TileConfig::default(),
            model: CostModel::default(),
            overrides: ProfileOverrides::new(),
            cmax: u64::MAX,
            fifo_depth: DEFAULT_FIFO_DEPTH,
            strategy: Strategy::Normal,
            fold: true,
            vectorize: BTreeMap::new(),
            dies: None,
            die_weights: PartitionWeights::default(),
            banks: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("frontend: {0}")]
    Frontend(#[from] FrontendError),
    #[error("fusion: {0}")]
    Fusion(#[from] FusionError),
    #[error("fifo sizing: {0}")]
    Sizing(#[from] SizingError),
    #[error("allocation: {0}")]
    Alloc(#[from] AllocError),
    #[error("fusion: group {group} costs {cost} bytes, over the {cmax}-byte budget")]
    Budget { group: usize, cost: u64, cmax: u64 },
}

impl PipelineError {
    pub fn pass(&self) -> &'static str {
        match self {
            PipelineError::Frontend(_) => "frontend",
            PipelineError::Fusion(_) | PipelineError::Budget { .. } => "fusion",
            PipelineError::Sizing(_) => "fifo_sizing",
            PipelineError::Alloc(_) => "allocation",
        }
    }

    /// What the user can change to get past this error.
    pub fn hint(&self) -> &'static str {
        match self {
            PipelineError::Frontend(FrontendError::MissingProfile(_)) => "add the node to the profile overrides or enable the analytic model",
            PipelineError::Frontend(FrontendError::Tiling { .. }) => "pick tile sizes that divide the loop bounds",
            PipelineError::Frontend(_) => "fix the operator graph",
            PipelineError::Fusion(FusionError::OverBudget { .. }) | PipelineError::Budget { .. } => {
                "reduce tile sizes or unroll factors, or raise the fusion budget"
            }
            PipelineError::Fusion(_) => "check the stream types of the graph",
            PipelineError::Sizing(_) => "check the kernel profiles",
            PipelineError::Alloc(_) => "add dies or memory units, or shrink the design",
        }
    }

    /// True when the inputs were fine but no design fits the constraints.
    pub fn infeasible(&self) -> bool {
        matches!(
            self,
            PipelineError::Fusion(FusionError::OverBudget { .. }) | PipelineError::Budget { .. } | PipelineError::Alloc(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Compiled {
    /// Lowered and profiled, before fusion.
    pub lowered: DataflowGraph,
    /// Fused, folded, sized and allocated.
    pub graph: DataflowGraph,
    pub plan: FusionPlan,
    pub folded: Vec<String>,
    pub sizing: SizingResult,
    pub memory: MemoryReport,
    pub dies: Option<DiePartition>,
    pub banks: Option<Vec<BankAssignment>>,
}

/// Profiles for nodes created after lowering, such as converters.
fn fill_profiles(g: &mut DataflowGraph, model: &CostModel, overrides: &ProfileOverrides) -> Result<(), FrontendError> {
    for node in g.nodes.iter_mut().filter(|n| n.profile.is_none()) {
        node.profile = Some(match overrides.get(&node.id) {
            Some(p) => *p,
            None if model.analytic => estimate_profile(node, None, model)?,
            None => return Err(FrontendError::MissingProfile(node.id.clone())),
        });
    }
    Ok(())
}

pub fn compile(ops: &OpGraph, opts: &CompileOptions) -> Result<Compiled, PipelineError> {
    let mut low = tile_and_lower(ops, &opts.tiles)?;
    low.annotate(&opts.model, &opts.overrides)?;
    let lowered = low.graph.clone();

    let mut g = low.graph;
    let plan = explore_fusion(&mut g, opts.cmax, opts.fifo_depth)?;
    if let Some((group, &cost)) = plan.costs.iter().enumerate().find(|(_, &c)| c > opts.cmax) {
        return Err(PipelineError::Budget {
            group,
            cost,
            cmax: opts.cmax,
        });
    }
    fill_profiles(&mut g, &opts.model, &opts.overrides)?;
    let (mut g, folded) = if opts.fold { fold_identity_edges(&g) } else { (g, vec![]) };
    if !opts.vectorize.is_empty() {
        g = vectorize_streams(&g, &opts.vectorize)?;
    }

    let sizing = size_fifos(&g, opts.strategy)?;
    sizing.apply(&mut g);
    let memory = memory_report(&g, sized_fifo_bytes);

    let dies = match &opts.dies {
        Some(spec) => {
            let p = partition_dies(&g, spec, opts.die_weights)?;
            p.apply(&mut g);
            Some(p)
        }
        None => None,
    };
    let banks = match &opts.banks {
        Some(spec) => {
            let a = assign_memory_banks(&graph_buffers(&g), spec)?;
            apply_banks(&mut g, &a);
            Some(a)
        }
        None => None,
    };
    Ok(Compiled {
        lowered,
        graph: g,
        plan,
        folded,
        sizing,
        memory,
        dies,
        banks,
    })
}

/// Bytes of on-chip storage a built design holds: node buffers plus sized
/// stream FIFOs.
pub fn on_chip_bytes(g: &DataflowGraph) -> u64 {
    let nodes: u64 = g.nodes.iter().map(|n| n.resource_cost).sum();
    let fifos: u64 = g.edges.iter().filter(|e| !e.external).map(sized_fifo_bytes).sum();
    nodes + fifos
}

/// Sum of every kernel's latency run on its own.
pub fn isolated_latency(g: &DataflowGraph) -> u64 {
    g.nodes
        .iter()
        .filter(|n| n.kind == NodeKind::Compute)
        .filter_map(|n| n.profile.map(|p| p.l))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("invalid graph: {0}")]
    Invalid(ValidationReport),
    #[error("converter `{node}` misses data: {counterexample:?}")]
    Converter { node: String, counterexample: Counterexample },
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("simulation deadlocked; wait chain {0:?}")]
    Deadlock(Vec<String>),
    #[error("simulation timed out")]
    Timeout,
    #[error("`{node}` stalled {cycles} cycles on a full output FIFO")]
    Stall { node: String, cycles: u64 },
}

impl VerifyError {
    /// Simulation failures as opposed to malformed designs.
    pub fn is_runtime(&self) -> bool {
        matches!(self, VerifyError::Deadlock(_) | VerifyError::Timeout | VerifyError::Stall { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VerifyReport {
    pub converters_checked: usize,
    pub total_latency: u64,
    pub trace: SimTrace,
}

/// Graph checks, every converter replayed, and a full simulation that must
/// finish without a producer ever blocking on a full stream.
pub fn verify(g: &DataflowGraph, cfg: &SimConfig) -> Result<VerifyReport, VerifyError> {
    validate_graph(g).map_err(VerifyError::Invalid)?;
    let mut converters_checked = 0;
    for n in g.nodes.iter().filter(|n| n.kind == NodeKind::Converter) {
        if let Some(spec) = &n.converter {
            verify_converter(&n.in_ports[0], &n.out_ports[0], spec).map_err(|counterexample| VerifyError::Converter {
                node: n.id.clone(),
                counterexample,
            })?;
            converters_checked += 1;
        }
    }
    let trace = simulate(g, cfg)?;
    match trace.outcome {
        Outcome::Completed => {}
        Outcome::Deadlock => {
            let chain = trace.deadlock.as_ref().map(|d| d.wait_chain.clone()).unwrap_or_default();
            return Err(VerifyError::Deadlock(chain));
        }
        Outcome::Timeout => return Err(VerifyError::Timeout),
    }
    if let Some(n) = trace.nodes.iter().find(|n| n.blocked_cycles > 0) {
        return Err(VerifyError::Stall {
            node: n.id.clone(),
            cycles: n.blocked_cycles,
        });
    }
    Ok(VerifyReport {
        converters_checked,
        total_latency: trace.total_latency,
        trace,
    })
}

/// Built-in operator graphs and tilings.
pub mod bundled {
    use super::*;

    pub const DEMO_CHAIN: &str = include_str!("../data/demo_chain.json");
    pub const DEMO_CHAIN_TILES: &str = include_str!("../data/demo_chain.tiles.json");
    pub const TRANSFORMER_BLOCK: &str = include_str!("../data/transformer_block.json");
    pub const TRANSFORMER_BLOCK_TILES: &str = include_str!("../data/transformer_block.tiles.json");

    pub fn demo_chain() -> (OpGraph, TileConfig) {
        (
            OpGraph::from_json(DEMO_CHAIN).expect("bundled graph parses"),
            TileConfig::from_json(DEMO_CHAIN_TILES).expect("bundled tiles parse"),
        )
    }

    pub fn transformer_block() -> (OpGraph, TileConfig) {
        (
            OpGraph::from_json(TRANSFORMER_BLOCK).expect("bundled graph parses"),
            TileConfig::from_json(TRANSFORMER_BLOCK_TILES).expect("bundled tiles parse"),
        )
    }

    /// Looks a bundled graph up by name.
    pub fn by_name(name: &str) -> Option<(OpGraph, TileConfig)> {
        match name {
            "demo" | "demo_chain" => Some(demo_chain()),
            "transformer" | "transformer_block" => Some(transformer_block()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(tiles: TileConfig) -> CompileOptions {
        CompileOptions {
            tiles,
            ..Default::default()
        }
    }

    #[test]
    fn demo_chain_compiles_and_verifies() {
        let (ops, tiles) = bundled::demo_chain();
        let c = compile(&ops, &opts(tiles)).unwrap();
        assert_eq!(c.plan.groups.len(), 1);
        let report = verify(&c.graph, &SimConfig::default()).unwrap();
        assert!(report.total_latency < isolated_latency(&c.graph));
    }

    #[test]
    fn transformer_fuses_into_one_group() {
        let (ops, tiles) = bundled::transformer_block();
        let c = compile(&ops, &opts(tiles)).unwrap();
        assert_eq!(c.plan.groups.len(), 1);
        assert!(c.graph.edges.iter().filter(|e| e.tensor.is_some()).all(|e| !e.external));
        verify(&c.graph, &SimConfig::default()).unwrap();
    }

    #[test]
    fn small_budget_splits_and_stays_within_it() {
        let (ops, tiles) = bundled::transformer_block();
        let cmax = 64 * 1024;
        let c = compile(
            &ops,
            &CompileOptions {
                cmax,
                ..opts(tiles)
            },
        )
        .unwrap();
        assert!(c.plan.groups.len() > 1);
        assert!(c.plan.fits(cmax));
        verify(&c.graph, &SimConfig::default()).unwrap();
    }

    #[test]
    fn missing_profile_names_the_node() {
        let (ops, tiles) = bundled::demo_chain();
        let mut o = opts(tiles);
        o.model.analytic = false;
        let err = compile(&ops, &o).unwrap_err();
        assert!(err.to_string().contains("mm"), "{err}");
        assert_eq!(err.pass(), "frontend");
    }

    #[test]
    fn oversized_kernel_is_infeasible() {
        let (ops, tiles) = bundled::demo_chain();
        let err = compile(
            &ops,
            &CompileOptions {
                cmax: 16,
                ..opts(tiles)
            },
        )
        .unwrap_err();
        assert!(err.infeasible(), "{err}");
    }

    #[test]
    fn corrupted_depth_is_caught() {
        let (ops, tiles) = bundled::transformer_block();
        let mut c = compile(&ops, &opts(tiles)).unwrap();
        let e = c.graph.edges.iter_mut().filter(|e| !e.external).max_by_key(|e| e.depth).unwrap();
        e.depth = Some(e.depth.unwrap() - 1);
        let err = verify(&c.graph, &SimConfig::default()).unwrap_err();
        assert!(err.is_runtime(), "{err}");
    }
}
