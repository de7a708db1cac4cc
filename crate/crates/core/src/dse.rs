//! Tiling-space exploration: per-kernel unroll from a global budget, loop
//! permutation, interface vector widths, and a seeded search that scores
//! every candidate through the full compile-and-simulate flow.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{largest_divisor_at_most, FrontendError, LoopKind, LoopNest, OpGraph, TileConfig, TileOverride};
use crate::pipeline::{compile, on_chip_bytes, verify, CompileOptions, PipelineError};
use crate::sim::SimConfig;

/// Unroll factor per kernel, in input order, plus any budget warning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnrollPlan {
    pub factors: Vec<u64>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    latency: f64,
    factor: u64,
    index: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Longest latency first, then the smaller factor, then the lower index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.latency
            .total_cmp(&other.latency)
            .then_with(|| other.factor.cmp(&self.factor))
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Repeatedly doubles the unroll factor of the slowest kernel and halves
/// its estimate until the product of factors reaches `budget`. Kernels are
/// identified by position; callers pass them sorted by id.
pub fn intensity_aware_unroll(latencies: &[f64], budget: u64) -> UnrollPlan {
    let mut warning = None;
    let mut target = budget.max(1);
    if !target.is_power_of_two() {
        let down = 1 << (63 - target.leading_zeros());
        warning = Some(format!("unroll budget {budget} is not a power of two; using {down}"));
        target = down;
    }
    let mut factors = vec![1u64; latencies.len()];
    let mut heap: BinaryHeap<Entry> = latencies
        .iter()
        .enumerate()
        .map(|(index, &latency)| Entry {
            latency,
            factor: 1,
            index,
        })
        .collect();
    let mut product = 1u64;
    while product < target {
        let Some(mut top) = heap.pop() else { break };
        top.factor *= 2;
        top.latency /= 2.0;
        factors[top.index] = top.factor;
        product *= 2;
        heap.push(top);
    }
    UnrollPlan { factors, warning }
}

/// Reductions first, then parallel loops, each group in original order.
pub fn permute_loops(nest: &LoopNest) -> Vec<usize> {
    let (red, par): (Vec<usize>, Vec<usize>) =
        (0..nest.loops.len()).partition(|&l| nest.loops[l].kind == LoopKind::Reduction);
    red.into_iter().chain(par).collect()
}

/// Spreads a kernel's unroll factor over its loops: parallel loops first,
/// innermost in `order` first, each capped so it divides its tile.
pub fn distribute_unroll(nest: &LoopNest, tiles: &[usize], order: &[usize], factor: u64) -> Vec<usize> {
    let mut unroll = vec![1usize; nest.loops.len()];
    let mut left = factor as usize;
    let by_kind = |kind: LoopKind| order.iter().rev().copied().filter(move |&l| nest.loops[l].kind == kind);
    for l in by_kind(LoopKind::Parallel).chain(by_kind(LoopKind::Reduction)) {
        if left <= 1 {
            break;
        }
        let u = largest_divisor_at_most(tiles[l], left);
        unroll[l] = u;
        left /= u;
    }
    unroll
}

/// Vector width of each interface, inputs then output: the unroll of the
/// loop driving the interface's innermost data dim, clamped to divide the
/// tile extent there.
pub fn infer_vectorization(nest: &LoopNest, tiles: &[usize], unroll: &[usize]) -> Vec<usize> {
    nest.inputs
        .iter()
        .chain(std::iter::once(&nest.output))
        .map(|acc| match acc.loops.last() {
            Some(&l) => largest_divisor_at_most(tiles[l], unroll[l]),
            None => 1,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct DseSpace {
    pub default_tile_sizes: Vec<usize>,
    pub overall_unroll_sizes: Vec<u64>,
    /// Whether to try the reduction-outward loop order.
    pub permute: Vec<bool>,
    /// Trials drawn when not searching the full grid.
    pub trials: usize,
    pub grid: bool,
    pub seed: u64,
    pub latency_weight: f64,
    pub memory_weight: f64,
}

impl Default for DseSpace {
    fn default() -> Self {
        Self {
            default_tile_sizes: vec![8, 16, 32],
            overall_unroll_sizes: vec![1, 4, 16],
            permute: vec![false],
            trials: 4,
            grid: false,
            seed: 0,
            latency_weight: 1.0,
            memory_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DseSpaceError {
    #[error("`{0}` has no values")]
    Empty(&'static str),
    #[error("`{0}` must be positive")]
    NotPositive(&'static str),
}

impl DseSpace {
    pub fn check(&self) -> Result<(), DseSpaceError> {
        if self.default_tile_sizes.is_empty() {
            return Err(DseSpaceError::Empty("defaultTileSizes"));
        }
        if self.overall_unroll_sizes.is_empty() {
            return Err(DseSpaceError::Empty("overallUnrollSizes"));
        }
        if self.permute.is_empty() {
            return Err(DseSpaceError::Empty("permute"));
        }
        if self.default_tile_sizes.contains(&0) {
            return Err(DseSpaceError::NotPositive("defaultTileSizes"));
        }
        if self.overall_unroll_sizes.contains(&0) {
            return Err(DseSpaceError::NotPositive("overallUnrollSizes"));
        }
        if !self.grid && self.trials == 0 {
            return Err(DseSpaceError::NotPositive("trials"));
        }
        if !(self.latency_weight >= 0.0 && self.memory_weight >= 0.0) {
            return Err(DseSpaceError::NotPositive("weights"));
        }
        Ok(())
    }

    /// Every combination, tile size outermost.
    pub fn grid_points(&self) -> Vec<Candidate> {
        let mut out = vec![];
        for &t in &self.default_tile_sizes {
            for &u in &self.overall_unroll_sizes {
                for &p in &self.permute {
                    out.push(Candidate {
                        default_tile_size: t,
                        overall_unroll_size: u,
                        permute: p,
                    });
                }
            }
        }
        out
    }

    /// The full grid, or `trials` grid points in seeded random order.
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut points = self.grid_points();
        if !self.grid {
            points.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
            points.truncate(self.trials);
        }
        points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Candidate {
    pub default_tile_size: usize,
    pub overall_unroll_size: u64,
    pub permute: bool,
}

/// Per-op tiling for one candidate. Explicit per-op tile sizes and loop
/// orders in `base` are kept; unroll and vector widths are derived.
pub fn derive_tiling(ops: &OpGraph, base: &TileConfig, cand: &Candidate) -> Result<(TileConfig, Option<String>), FrontendError> {
    let ops = ops.clone().normalized()?;
    let mut cfg = TileConfig {
        default_tile_size: cand.default_tile_size,
        ops: Default::default(),
    };
    let mut plans = vec![];
    for i in ops.op_order()? {
        let op = &ops.ops[i];
        let nest = ops.loop_nest(op)?;
        let fixed = base.ops.get(&op.id).cloned().unwrap_or_default();
        let seed = TileConfig {
            default_tile_size: cand.default_tile_size,
            ops: [(
                op.id.clone(),
                TileOverride {
                    tile_sizes: fixed.tile_sizes,
                    loop_order: fixed.loop_order.clone(),
                    ..Default::default()
                },
            )]
            .into(),
        };
        let mut tiling = seed.resolve(&op.id, &nest)?;
        if cand.permute && fixed.loop_order.is_none() {
            tiling.loop_order = permute_loops(&nest);
        }
        let work: f64 = nest.loops.iter().map(|l| l.tripcount as f64).product();
        plans.push((op.id.clone(), nest, tiling, work));
    }
    plans.sort_by(|a, b| a.0.cmp(&b.0));
    let latencies: Vec<f64> = plans.iter().map(|p| p.3).collect();
    let unroll = intensity_aware_unroll(&latencies, cand.overall_unroll_size);
    for ((id, nest, mut tiling, _), &f) in plans.into_iter().zip(&unroll.factors) {
        tiling.unroll_factors = distribute_unroll(&nest, &tiling.tile_sizes, &tiling.loop_order, f);
        let widths = infer_vectorization(&nest, &tiling.tile_sizes, &tiling.unroll_factors);
        tiling.vector_factor = *widths.last().unwrap_or(&1);
        cfg.ops.insert(id, tiling.into());
    }
    Ok((cfg, unroll.warning))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrialRecord {
    pub trial: usize,
    pub config: Candidate,
    pub feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    /// Bytes by which the worst group exceeds the budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overshoot: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl TrialRecord {
    fn failed(trial: usize, config: Candidate, err: String, overshoot: Option<u64>) -> Self {
        Self {
            trial,
            config,
            feasible: false,
            latency: None,
            memory: None,
            objective: None,
            overshoot,
            error: Some(err),
            warning: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub trials: Vec<TrialRecord>,
    /// Index into `trials`.
    pub best: usize,
    pub tiles: TileConfig,
}

impl SearchOutcome {
    /// One JSON object per line.
    pub fn log_jsonl(&self) -> String {
        trial_log(&self.trials)
    }
}

pub fn trial_log(trials: &[TrialRecord]) -> String {
    trials
        .iter()
        .map(|t| serde_json::to_string(t).expect("trial serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DseError {
    #[error("search space: {0}")]
    Space(String),
    #[error("no feasible trial; closest was trial {} ({})", least.trial, least.error.as_deref().unwrap_or("?"))]
    NoFeasible { least: Box<TrialRecord>, trials: Vec<TrialRecord> },
}

fn overshoot(e: &PipelineError) -> Option<u64> {
    match e {
        PipelineError::Budget { cost, cmax, .. } => Some(cost.saturating_sub(*cmax)),
        PipelineError::Fusion(crate::fusion::FusionError::OverBudget { cost, cmax, .. }) => Some(cost.saturating_sub(*cmax)),
        _ => None,
    }
}

/// Compiles, verifies and simulates one candidate.
pub fn evaluate(ops: &OpGraph, base: &CompileOptions, space: &DseSpace, trial: usize, cand: Candidate, sim: &SimConfig) -> TrialRecord {
    let (tiles, warning) = match derive_tiling(ops, &base.tiles, &cand) {
        Ok(t) => t,
        Err(e) => return TrialRecord::failed(trial, cand, e.to_string(), None),
    };
    let opts = CompileOptions {
        tiles,
        ..base.clone()
    };
    let compiled = match compile(ops, &opts) {
        Ok(c) => c,
        Err(e) => return TrialRecord::failed(trial, cand, e.to_string(), overshoot(&e)),
    };
    let report = match verify(&compiled.graph, sim) {
        Ok(r) => r,
        Err(e) => return TrialRecord::failed(trial, cand, e.to_string(), None),
    };
    let memory = on_chip_bytes(&compiled.graph);
    let latency = report.total_latency;
    TrialRecord {
        trial,
        config: cand,
        feasible: true,
        latency: Some(latency),
        memory: Some(memory),
        objective: Some(space.latency_weight * latency as f64 + space.memory_weight * memory as f64),
        overshoot: None,
        error: None,
        warning,
    }
}

/// Scores every candidate and returns the feasible one with the lowest
/// objective; ties go to the earlier trial.
pub fn search(ops: &OpGraph, base: &CompileOptions, space: &DseSpace, sim: &SimConfig) -> Result<SearchOutcome, DseError> {
    space.check().map_err(|e| DseError::Space(e.to_string()))?;
    let trials: Vec<TrialRecord> = space
        .candidates()
        .into_iter()
        .enumerate()
        .map(|(i, c)| evaluate(ops, base, space, i, c, sim))
        .collect();
    let best = trials
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.objective.map(|o| (i, o)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    match best {
        Some(best) => {
            let (tiles, _) = derive_tiling(ops, &base.tiles, &trials[best].config).expect("winning tiling derives again");
            Ok(SearchOutcome { trials, best, tiles })
        }
        None => {
            let least = trials
                .iter()
                .min_by_key(|t| (t.overshoot.unwrap_or(u64::MAX), t.trial))
                .cloned()
                .expect("at least one trial");
            Err(DseError::NoFeasible {
                least: Box::new(least),
                trials,
            })
        }
    }
}
