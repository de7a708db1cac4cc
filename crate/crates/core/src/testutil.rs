//! Shared fixtures and generators for unit tests.

use proptest::prelude::*;

pub use crate::fixtures::{build_type, column_tiles, column_tiles_twice};
use crate::itensor::{ElementKind, ITensorType};

/// Random valid types with at most 4096 elements.
pub fn arb_itensor() -> impl Strategy<Value = ITensorType> {
    (1usize..=3, 0usize..=2)
        .prop_flat_map(|(rank, reiter)| {
            (
                proptest::collection::vec((0u32..=3, 0u32..=2), rank),
                proptest::collection::vec(1usize..=3, reiter),
                Just((0..rank + reiter).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
        .prop_filter_map("too large", |(dims, reiters, order)| {
            build_type(&dims, &reiters, &order, ElementKind::f32())
        })
}
