//! FIFO sizing from piecewise-linear token curves.
//!
//! Every kernel produces and consumes tokens along straight lines set by
//! its profile. Once start times are fixed, the peak occupancy of a FIFO
//! follows in closed form from the two curves on its ends. Start times come
//! from a linear program over per-node start cycles that keeps every
//! consumer from running dry and minimizes the summed edge delays.
//!
//! Cycle convention: a pop happens at the start of a cycle, a push at the
//! end, and occupancy is observed after both. A kernel started at `s` pops
//! for firing `n` at `s + n*II`; the matching result is pushed at the end of
//! cycle `s + D + n*II - 1` and can be popped from `s + D + n*II` on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{require_profiles, NodeKind, topo_order, validate_graph, DataflowGraph, KernelProfile, ValidationReport};
use crate::lp::{q, LinearProgram, LpError, Relation, Q};

/// A FIFO holds at least one token.
pub const MIN_DEPTH: u64 = 1;

/// Cumulative token count of one kernel port over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenCurve {
    pub start_time: u64,
    #[serde(rename = "D")]
    pub d: u64,
    #[serde(rename = "II")]
    pub ii: u64,
    #[serde(rename = "T")]
    pub t: u64,
}

impl TokenCurve {
    /// Tokens that can be popped at the start of cycle `time`.
    pub fn produced(&self, time: u64) -> u64 {
        let first = self.start_time + self.d;
        if time < first {
            0
        } else {
            self.t.min(1 + (time - first) / self.ii)
        }
    }

    /// Tokens popped by a consumer up to and including cycle `time`, when
    /// the curve describes pops (`d` is then the offset of the first pop).
    pub fn consumed(&self, time: u64) -> u64 {
        self.produced(time)
    }
}

/// Which side limits the FIFO.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Producer at least as fast as the consumer: tokens pile up until the
    /// consumer catches the tail of the stream.
    SourceFaster,
    /// Consumer faster: the backlog is whatever arrived before it started.
    SourceSlower,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SizingError {
    #[error("delay {delay} is below the producer's initial delay {d}")]
    DelayBelowInitial { delay: u64, d: u64 },
    #[error(transparent)]
    Invalid(#[from] ValidationReport),
    #[error("start-time program failed: {0}")]
    Lp(#[from] LpError),
}

/// Peak occupancy before clamping, with the branch used.
pub fn max_tokens_unclamped(
    t: u64,
    d_src: u64,
    ii_src: u64,
    ii_dst: u64,
    delay: u64,
) -> Result<(u64, Branch), SizingError> {
    if delay < d_src {
        return Err(SizingError::DelayBelowInitial { delay, d: d_src });
    }
    let l = (d_src + (t - 1) * ii_src) as i64;
    let delay_i = delay as i64;
    if ii_src <= ii_dst {
        let backlog = (l - delay_i - 1).div_euclid(ii_dst as i64);
        let v = (t as i64 - 1 - backlog).max(0) as u64;
        Ok((v.min(t), Branch::SourceFaster))
    } else {
        let v = (delay - d_src + 1).div_ceil(ii_src);
        Ok((v.min(t), Branch::SourceSlower))
    }
}

/// Peak FIFO occupancy for a producer with `src` timing feeding a consumer
/// with `dst` timing, the consumer starting `delay` cycles after the
/// producer, `t` tokens in the stream.
pub fn max_tokens(src: &KernelProfile, dst: &KernelProfile, delay: u64, t: u64) -> Result<u64, SizingError> {
    max_tokens_unclamped(t, src.d, src.ii, dst.ii, delay).map(|(v, _)| v.max(MIN_DEPTH))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Kernels keep their native rates.
    #[default]
    Normal,
    /// Every kernel is slowed to the pace of the slowest one.
    Conservative,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "normal" => Ok(Strategy::Normal),
            "conservative" => Ok(Strategy::Conservative),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Per-node profiles used for sizing.
///
/// Normal keeps each kernel's own II unless its stream inputs arrive more
/// slowly, in which case it runs at the pace they arrive. Loads, forks and
/// converters have no pace of their own and also slow down to the rate
/// their consumers pop. Conservative first stretches each II so that
/// `firings * II` is the same for all kernels (rounded up), then applies the
/// same propagation.
pub fn equalize(g: &DataflowGraph, strategy: Strategy) -> Result<Vec<KernelProfile>, SizingError> {
    require_profiles(g)?;
    let profiles: Vec<KernelProfile> = g.nodes.iter().map(|n| n.profile.unwrap()).collect();
    let seed: Vec<u64> = match strategy {
        Strategy::Normal => profiles.iter().map(|p| p.ii).collect(),
        Strategy::Conservative => {
            let pace = profiles.iter().map(|p| p.t * p.ii).max().unwrap_or(0);
            profiles.iter().map(|p| pace.div_ceil(p.t).max(p.ii)).collect()
        }
    };
    let ii = propagate_pace(g, seed)?;
    Ok(profiles
        .iter()
        .zip(&g.nodes)
        .zip(ii)
        .map(|((p, node), ii)| {
            // A converter's warm-up is counted in input firings.
            let d = match node.kind {
                NodeKind::Converter if ii != p.ii => (p.d * ii).div_ceil(p.ii),
                _ => p.d,
            };
            KernelProfile::new(d, ii, p.t).unwrap()
        })
        .collect())
}

fn elastic(kind: NodeKind) -> bool {
    matches!(kind, NodeKind::DmaIn | NodeKind::Fork | NodeKind::Converter)
}

/// Raises firing intervals until no kernel outruns a stream input and no
/// elastic node outruns its consumers. External edges go through memory
/// and do not couple rates.
fn propagate_pace(g: &DataflowGraph, mut ii: Vec<u64>) -> Result<Vec<u64>, SizingError> {
    let order = topo_order(g).map_err(|c| {
        SizingError::Invalid(ValidationReport(vec![crate::graph::GraphViolation::Cycle(c.edge)]))
    })?;
    let adj = g.adjacency();
    let rates: Vec<(usize, usize, u64, u64)> = g
        .edges
        .iter()
        .map(|e| {
            let (p, c) = (adj.index[&e.producer.node], adj.index[&e.consumer.node]);
            (p, c, g.nodes[p].out_rate(e.producer.port), g.nodes[c].in_rate(e.consumer.port))
        })
        .collect();
    // Sweeps only raise values; rounding between unequal rates can creep
    // for a few rounds, so the count is capped.
    for _ in 0..4 * g.nodes.len() + 8 {
        let mut changed = false;
        for &v in &order {
            for &e in &adj.inputs[v] {
                let (p, _, rs, rt) = rates[e];
                if g.edges[e].external {
                    continue;
                }
                let need = (rs * ii[p]).div_ceil(rt);
                if need > ii[v] {
                    ii[v] = need;
                    changed = true;
                }
            }
        }
        for &v in order.iter().rev() {
            if !elastic(g.nodes[v].kind) {
                continue;
            }
            for &e in &adj.outputs[v] {
                let (_, c, rs, rt) = rates[e];
                if g.edges[e].external {
                    continue;
                }
                let need = (rt * ii[c]).div_ceil(rs);
                if need > ii[v] {
                    ii[v] = need;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(ii)
}

/// Production and consumption timing of one edge, relative to the start
/// of its producer and consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EdgeCurve {
    pub tokens: u64,
    /// First token poppable this many cycles after the producer starts.
    pub d_src: u64,
    pub ii_src: u64,
    /// First pop this many cycles after the consumer starts.
    pub offset_dst: u64,
    pub ii_dst: u64,
    /// Producer finish relative to its start.
    pub src_latency: u64,
    /// Producer's own initial delay.
    pub src_d: u64,
}

impl EdgeCurve {
    /// Smallest start-to-start delay at which the consumer never waits on
    /// this edge.
    pub fn no_starve_delay(&self, external: bool) -> u64 {
        if external {
            return self.src_latency;
        }
        let catch_up = (self.tokens - 1) * self.ii_src.saturating_sub(self.ii_dst);
        (self.d_src + catch_up).saturating_sub(self.offset_dst).max(self.src_d)
    }
}

pub fn edge_curves(g: &DataflowGraph, profiles: &[KernelProfile]) -> Vec<EdgeCurve> {
    let index = g.node_index();
    g.edges
        .iter()
        .map(|e| {
            let (pi, ci) = (index[&e.producer.node], index[&e.consumer.node]);
            let (prod, cons) = (&g.nodes[pi], &g.nodes[ci]);
            let (ps, pc) = (profiles[pi], profiles[ci]);
            let rs = prod.out_rate(e.producer.port);
            let rt = cons.in_rate(e.consumer.port);
            EdgeCurve {
                tokens: e.ty.token_count(),
                d_src: ps.d + (rs - 1) * ps.ii,
                ii_src: rs * ps.ii,
                offset_dst: cons.in_phase(e.consumer.port) * pc.ii,
                ii_dst: rt * pc.ii,
                src_latency: ps.l,
                src_d: ps.d,
            }
        })
        .collect()
}

/// Longest-path lower bounds between every ordered node pair, where each
/// edge carries `weights[e]`. `None` means unreachable.
pub fn thresholds(g: &DataflowGraph, weights: &[u64]) -> Result<Vec<Vec<Option<u64>>>, SizingError> {
    let order = topo_order(g).map_err(|c| {
        SizingError::Invalid(ValidationReport(vec![crate::graph::GraphViolation::Cycle(c.edge)]))
    })?;
    let adj = g.adjacency();
    let n = g.nodes.len();
    let mut dist = vec![vec![None; n]; n];
    for (u, row) in dist.iter_mut().enumerate() {
        row[u] = Some(0u64);
        for &v in &order {
            let Some(dv) = row[v] else { continue };
            for &e in &adj.outputs[v] {
                let c = adj.index[&g.edges[e].consumer.node];
                let cand = dv + weights[e];
                if row[c].is_none_or(|x| x < cand) {
                    row[c] = Some(cand);
                }
            }
        }
    }
    Ok(dist)
}

/// Start cycle per node minimizing the summed edge delays subject to
/// `start[consumer] - start[producer] >= weights[e]`, with source nodes at 0.
/// Among optimal schedules the one with the smallest summed start times is
/// returned.
pub fn solve_delays(g: &DataflowGraph, weights: &[u64]) -> Result<Vec<u64>, SizingError> {
    solve_delays_with_cost(g, weights, None)
}

/// As [`solve_delays`], with one extra tie-break before the earliest-start
/// one: among schedules with the optimal summed delay, minimize
/// `sum(cost[e] * delay[e])`.
pub fn solve_delays_with_cost(
    g: &DataflowGraph,
    weights: &[u64],
    cost: Option<&[u64]>,
) -> Result<Vec<u64>, SizingError> {
    let n = g.nodes.len();
    if n == 0 {
        return Ok(vec![]);
    }
    let adj = g.adjacency();
    let mut lp = LinearProgram::new(n);
    let delay_objective = |per_edge: &dyn Fn(usize) -> i64| {
        let mut obj = vec![q(0); n];
        for (e, edge) in g.edges.iter().enumerate() {
            let (i, j) = (adj.index[&edge.producer.node], adj.index[&edge.consumer.node]);
            obj[j] += q(per_edge(e));
            obj[i] -= q(per_edge(e));
        }
        obj
    };
    for (e, edge) in g.edges.iter().enumerate() {
        let (i, j) = (adj.index[&edge.producer.node], adj.index[&edge.consumer.node]);
        lp.add(vec![(j, q(1)), (i, q(-1))], Relation::Ge, q(weights[e] as i64));
    }
    for v in 0..n {
        if adj.inputs[v].is_empty() {
            lp.add(vec![(v, q(1))], Relation::Eq, q(0));
        }
    }
    let mut objectives = vec![delay_objective(&|_| 1)];
    if let Some(cost) = cost {
        objectives.push(delay_objective(&|e| cost[e] as i64));
    }
    objectives.push(vec![q(1); n]);
    let last = objectives.len() - 1;
    let mut x = vec![];
    for (k, obj) in objectives.into_iter().enumerate() {
        lp.objective = obj;
        let sol = lp.solve()?;
        if k < last {
            // Pin this pass's optimum before moving to the next objective.
            let terms: Vec<(usize, Q)> = lp.objective.iter().copied().enumerate().filter(|(_, c)| *c != q(0)).collect();
            if !terms.is_empty() {
                lp.add(terms, Relation::Le, sol.value);
            }
        }
        x = sol.x;
    }
    Ok(x.iter().map(|x| x.ceil().to_integer().max(0) as u64).collect())
}

/// Bytes a FIFO gains per cycle of extra delay, scaled to small integers.
fn buffer_costs(g: &DataflowGraph, curves: &[EdgeCurve]) -> Vec<u64> {
    let raw: Vec<f64> = g
        .edges
        .iter()
        .zip(curves)
        .map(|(e, c)| {
            if e.external {
                0.0
            } else {
                e.ty.token_bytes() as f64 / c.ii_src.max(c.ii_dst).max(1) as f64
            }
        })
        .collect();
    let top = raw.iter().copied().fold(0.0, f64::max);
    raw.iter()
        .map(|&r| if r == 0.0 { 0 } else { ((r / top * 1000.0).round() as u64).max(1) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EdgeSizing {
    pub edge: String,
    pub delay: u64,
    /// Lower bound on the delay used when scheduling.
    pub min_delay: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unclamped: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<Branch>,
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SizingResult {
    pub strategy: Strategy,
    /// Indexed like the graph's nodes.
    pub start_times: Vec<u64>,
    pub profiles: Vec<KernelProfile>,
    pub edges: Vec<EdgeSizing>,
    pub total_delay: u64,
    pub total_depth: u64,
}

impl SizingResult {
    /// Writes start times, depths and the sized profiles onto the graph.
    pub fn apply(&self, g: &mut DataflowGraph) {
        for (node, (&s, &p)) in g.nodes.iter_mut().zip(self.start_times.iter().zip(&self.profiles)) {
            node.start_time = Some(s);
            node.profile = Some(p);
        }
        for (edge, sized) in g.edges.iter_mut().zip(&self.edges) {
            edge.depth = sized.depth;
        }
    }
}

/// Schedules start times and derives a depth for every stream edge.
pub fn size_fifos(g: &DataflowGraph, strategy: Strategy) -> Result<SizingResult, SizingError> {
    validate_graph(g)?;
    let profiles = equalize(g, strategy)?;
    let curves = edge_curves(g, &profiles);
    let weights: Vec<u64> = g
        .edges
        .iter()
        .zip(&curves)
        .map(|(e, c)| c.no_starve_delay(e.external))
        .collect();
    let costs = buffer_costs(g, &curves);
    let start_times = solve_delays_with_cost(g, &weights, Some(&costs))?;
    let index = g.node_index();
    let mut edges = Vec::with_capacity(g.edges.len());
    for ((e, c), &w) in g.edges.iter().zip(&curves).zip(&weights) {
        let delay = start_times[index[&e.consumer.node]] - start_times[index[&e.producer.node]];
        let mut sized = EdgeSizing {
            edge: e.id.clone(),
            delay,
            min_delay: w,
            depth: None,
            unclamped: None,
            branch: None,
            external: e.external,
        };
        if !e.external {
            let (v, branch) = max_tokens_unclamped(c.tokens, c.d_src, c.ii_src, c.ii_dst, delay + c.offset_dst)?;
            sized.depth = Some(v.max(MIN_DEPTH));
            sized.unclamped = Some(v);
            sized.branch = Some(branch);
        }
        edges.push(sized);
    }
    Ok(SizingResult {
        strategy,
        total_delay: edges.iter().map(|e| e.delay).sum(),
        total_depth: edges.iter().filter_map(|e| e.depth).sum(),
        start_times,
        profiles,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::profiled_dag as dag;

    /// Peak of produced-minus-consumed over time, straight from the curves.
    fn curve_peak(t: u64, d: u64, ii_src: u64, ii_dst: u64, delay: u64) -> u64 {
        let prod = TokenCurve { start_time: 0, d, ii: ii_src, t };
        let cons = TokenCurve { start_time: delay, d: 0, ii: ii_dst, t };
        let end = d + t * ii_src + delay + t * ii_dst + 2;
        (0..end)
            .map(|time| prod.produced(time + 1).saturating_sub(cons.consumed(time)))
            .max()
            .unwrap()
    }

    #[test]
    fn boundary_cases() {
        let src = KernelProfile::new(3, 1, 8).unwrap();
        let dst = KernelProfile::new(2, 2, 8).unwrap();
        assert_eq!(max_tokens(&src, &dst, src.l, 8).unwrap(), 8);
        let slow = KernelProfile::new(3, 4, 8).unwrap();
        let fast = KernelProfile::new(1, 1, 8).unwrap();
        assert_eq!(max_tokens_unclamped(8, 3, 4, 1, 3).unwrap(), (1, Branch::SourceSlower));
        assert_eq!(max_tokens(&slow, &fast, 3, 8).unwrap(), 1);
        assert!(matches!(
            max_tokens(&slow, &fast, 2, 8),
            Err(SizingError::DelayBelowInitial { .. })
        ));
    }

    #[test]
    fn source_warms_up_then_streams_to_half_rate_target() {
        // First token ready at cycle 5, one per cycle after; the target
        // starts on the first token and takes one every other cycle.
        let src = KernelProfile::new(5, 1, 5).unwrap();
        let dst = KernelProfile::new(1, 2, 5).unwrap();
        assert_eq!(max_tokens(&src, &dst, 5, 5).unwrap(), 3);
        assert_eq!(curve_peak(5, 5, 1, 2, 5), 3);
    }

    #[test]
    fn closed_form_matches_curve_difference() {
        for t in 1u64..=16 {
            for d in 1..=8 {
                for ii_src in 1u64..=4 {
                    for ii_dst in 1..=4 {
                        let l = d + (t - 1) * ii_src;
                        for delay in d..=l {
                            // The curves assume the consumer is never starved.
                            if delay < d + (t - 1) * ii_src.saturating_sub(ii_dst) {
                                continue;
                            }
                            let (v, _) = max_tokens_unclamped(t, d, ii_src, ii_dst, delay).unwrap();
                            assert_eq!(v, curve_peak(t, d, ii_src, ii_dst, delay), "{t} {d} {ii_src} {ii_dst} {delay}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn monotone_in_delay() {
        for t in 1u64..=12 {
            for d in 1u64..=5 {
                for ii_src in 1u64..=4 {
                    for ii_dst in 1..=4 {
                        let l = d + (t - 1) * ii_src;
                        let vals: Vec<u64> = (d..=l + 3)
                            .map(|delay| max_tokens_unclamped(t, d, ii_src, ii_dst, delay).unwrap().0)
                            .collect();
                        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
                    }
                }
            }
        }
    }

    #[test]
    fn equalize_strategies() {
        let g = dag(&[2, 2], &[1, 4], 8, &[(0, 1)]);
        assert_eq!(equalize(&g, Strategy::Normal).unwrap()[0].ii, 1);
        let c = equalize(&g, Strategy::Conservative).unwrap();
        assert_eq!((c[0].ii, c[1].ii), (4, 4));
        assert_eq!(c[0].l, 2 + 7 * 4);
        let same = dag(&[2, 3], &[2, 2], 8, &[(0, 1)]);
        assert_eq!(equalize(&same, Strategy::Conservative).unwrap(), equalize(&same, Strategy::Normal).unwrap());
    }

    #[test]
    fn thresholds_sum_initial_delays() {
        let g = dag(&[2, 3, 1], &[1, 1, 1], 4, &[(0, 1), (1, 2)]);
        let th = thresholds(&g, &[2, 3]).unwrap();
        assert_eq!(th[0][2], Some(5));
        assert_eq!(th[2][0], None);
    }

    #[test]
    fn schedules_on_worked_graphs() {
        let chain = dag(&[2, 3, 1], &[1, 1, 1], 4, &[(0, 1), (1, 2)]);
        assert_eq!(solve_delays(&chain, &[2, 3]).unwrap(), vec![0, 2, 5]);

        // K0 -> K1, K0 -> K2, K1 -> K2 with D0 = 2, D1 = 3.
        let fig = dag(&[2, 3, 1], &[1, 1, 1], 4, &[(0, 1), (0, 2), (1, 2)]);
        let start = solve_delays(&fig, &[2, 2, 3]).unwrap();
        assert_eq!(start, vec![0, 2, 5]);
        let th = thresholds(&fig, &[2, 2, 3]).unwrap();
        assert_eq!(th[0][2], Some(5));
    }

    #[test]
    fn earliest_among_optimal_schedules() {
        // A -> B, A -> C, C -> D. Moving C and D later leaves the summed
        // delay unchanged; the tie-break keeps them early.
        let g = dag(&[1, 1, 1, 1], &[1, 1, 1, 1], 2, &[(0, 1), (0, 2), (2, 3)]);
        assert_eq!(solve_delays(&g, &[1, 1, 1]).unwrap(), vec![0, 1, 1, 2]);
    }

    #[test]
    fn fed_kernel_runs_at_its_producers_pace() {
        let g = dag(&[3, 2], &[4, 1], 6, &[(0, 1)]);
        let r = size_fifos(&g, Strategy::Normal).unwrap();
        // The consumer cannot outrun its input, so it is sized at II 4 and
        // starts on the first token.
        assert_eq!(r.profiles[1].ii, 4);
        assert_eq!(r.start_times, vec![0, 3]);
        let e = &r.edges[0];
        assert_eq!(e.depth, Some(curve_peak(6, 3, 4, 4, 3).max(1)));
        let c = size_fifos(&g, Strategy::Conservative).unwrap();
        assert!(c.total_depth <= r.total_depth);
    }

    #[test]
    fn elastic_nodes_follow_their_consumer() {
        let mut g = dag(&[1, 2], &[1, 8], 6, &[(0, 1)]);
        g.nodes[0].kind = NodeKind::Fork;
        let p = equalize(&g, Strategy::Normal).unwrap();
        assert_eq!((p[0].ii, p[1].ii), (8, 8));
        g.nodes[0].kind = NodeKind::Compute;
        assert_eq!(equalize(&g, Strategy::Normal).unwrap()[0].ii, 1);
    }

    #[test]
    fn memory_tie_break_moves_slack_to_cheap_edges() {
        // A -> B -> D and A -> C -> D; D waits on the slow branch. Both
        // placements of B's slack have the same summed delay.
        let g = dag(&[1, 1, 20, 1], &[1, 1, 1, 1], 4, &[(0, 1), (1, 3), (0, 2), (2, 3)]);
        let w = [1, 1, 1, 20];
        let early = solve_delays(&g, &w).unwrap();
        assert_eq!(early[1], 1);
        let late = solve_delays_with_cost(&g, &w, Some(&[1, 5, 1, 1])).unwrap();
        assert_eq!(late[1], 21 - 1);
    }
}
