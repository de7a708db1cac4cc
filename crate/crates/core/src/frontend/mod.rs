//! From tensor operators to a typed kernel graph: tiling, lowering, analytic
//! kernel profiles and tile packing for memory.

mod lower;
mod ops;
mod pack;
mod profile;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lower::{operand_type, tile_and_lower, KernelInfo, Lowered};
pub use ops::{Access, LoopDesc, LoopKind, LoopNest, OpGraph, OpNode, TensorDecl, Template};
pub use pack::{pack, PackError, PackedLayout};
pub use profile::{annotate_profiles, estimate_profile, CostModel, ProfileOverrides};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrontendError {
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("op `{op}`: {msg}")]
    Op { op: String, msg: String },
    #[error("op graph has a cycle")]
    CyclicOps,
    #[error("tiling of `{op}`: {msg}")]
    Tiling { op: String, msg: String },
    #[error("no profile for node `{0}` and the analytic model is off")]
    MissingProfile(String),
    #[error("profile for `{node}`: {msg}")]
    BadProfile { node: String, msg: String },
}

pub const DEFAULT_TILE: usize = 16;

fn default_tile() -> usize {
    DEFAULT_TILE
}

/// Per-op tiling. Unset fields fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TileOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unroll_factors: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loop_order: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_factor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TileConfig {
    #[serde(default = "default_tile")]
    pub default_tile_size: usize,
    #[serde(default)]
    pub ops: BTreeMap<String, TileOverride>,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            default_tile_size: DEFAULT_TILE,
            ops: BTreeMap::new(),
        }
    }
}

impl TileConfig {
    pub fn from_json(text: &str) -> Result<Self, FrontendError> {
        serde_json::from_str(text).map_err(|e| FrontendError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tile config serializes")
    }

    /// Full tiling of one op, checked against its loop nest.
    pub fn resolve(&self, op: &str, nest: &LoopNest) -> Result<OpTiling, FrontendError> {
        let n = nest.loops.len();
        let bad = |msg: String| FrontendError::Tiling {
            op: op.to_string(),
            msg,
        };
        let o = self.ops.get(op).cloned().unwrap_or_default();
        let tile_sizes = o.tile_sizes.unwrap_or_else(|| {
            nest.loops
                .iter()
                .map(|l| largest_divisor_at_most(l.tripcount, self.default_tile_size))
                .collect()
        });
        let unroll_factors = o.unroll_factors.unwrap_or_else(|| vec![1; n]);
        let loop_order = o.loop_order.unwrap_or_else(|| (0..n).collect());
        let vector_factor = o.vector_factor.unwrap_or(1);
        if tile_sizes.len() != n || unroll_factors.len() != n || loop_order.len() != n {
            return Err(bad(format!("expected {n} entries per loop list")));
        }
        for (i, l) in nest.loops.iter().enumerate() {
            let t = tile_sizes[i];
            if t == 0 || l.tripcount % t != 0 {
                return Err(bad(format!("tile {t} does not divide loop {i} of {}", l.tripcount)));
            }
            let u = unroll_factors[i];
            if u == 0 || t % u != 0 {
                return Err(bad(format!("unroll {u} does not divide tile {t} of loop {i}")));
            }
        }
        let mut sorted = loop_order.clone();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(bad(format!("loop order {loop_order:?} is not a permutation")));
        }
        if vector_factor == 0 {
            return Err(bad("vector factor must be positive".into()));
        }
        Ok(OpTiling {
            tile_sizes,
            unroll_factors,
            loop_order,
            vector_factor,
        })
    }
}

/// Resolved tiling of one op.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OpTiling {
    pub tile_sizes: Vec<usize>,
    pub unroll_factors: Vec<usize>,
    /// Outermost loop first.
    pub loop_order: Vec<usize>,
    pub vector_factor: usize,
}

impl From<OpTiling> for TileOverride {
    fn from(t: OpTiling) -> Self {
        Self {
            tile_sizes: Some(t.tile_sizes),
            unroll_factors: Some(t.unroll_factors),
            loop_order: Some(t.loop_order),
            vector_factor: Some(t.vector_factor),
        }
    }
}

pub fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}
