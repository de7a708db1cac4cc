//! Stream layout converters.
//!
//! A converter sits between a producer and a consumer whose stream layouts
//! differ. It owns a ping-pong buffer: one half fills from the producer
//! while the consumer drains the other, and the halves swap once per
//! iteration of the loop levels both sides share. [`infer_converter`]
//! derives the smallest such buffer from the two types alone;
//! [`verify_converter`] replays the materialized schedule element by
//! element; [`minimal_buffer_bruteforce`] searches for the true minimum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::itensor::ITensorType;

/// Buffers are double-buffered.
pub const PING_PONG: u64 = 2;

/// Default element cap for the exhaustive minimality search.
pub const DEFAULT_BRUTEFORCE_CAP: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConverterSpec {
    /// Elements per data dim held by one half of the buffer.
    pub buf_shape: Vec<usize>,
    /// Number of outermost loop levels shared by producer and consumer.
    pub shared_loop_depth: usize,
    pub shared_loop_tripcounts: Vec<usize>,
    pub byte_cost: u64,
}

impl ConverterSpec {
    pub fn new(src: &ITensorType, buf_shape: Vec<usize>, shared_loop_depth: usize) -> Self {
        let shared_loop_tripcounts = src.iter_tripcounts[..shared_loop_depth].to_vec();
        let elements: u64 = buf_shape.iter().map(|&b| b as u64).product();
        Self {
            byte_cost: PING_PONG * elements * src.element_kind.byte_width as u64,
            buf_shape,
            shared_loop_depth,
            shared_loop_tripcounts,
        }
    }

    /// Times the buffer is refilled over one pass of the stream.
    pub fn reuse_count(&self) -> u64 {
        self.shared_loop_tripcounts.iter().map(|&t| t as u64).product()
    }

    pub fn buffer_elements(&self) -> u64 {
        self.buf_shape.iter().map(|&b| b as u64).product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConverterError {
    #[error("source and target view different tensors ({src:?} vs {dst:?})")]
    Incompatible { src: Vec<usize>, dst: Vec<usize> },
    #[error("source and target types match; connect them with a plain FIFO")]
    IdenticalTypes,
    #[error("invalid stream type: {0}")]
    InvalidType(#[from] crate::itensor::TypeViolation),
    #[error("tensor has {elements} elements, above the search cap of {cap}")]
    CapExceeded { elements: u64, cap: u64 },
}

/// How reducible data dimensions are found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionRule {
    /// Every data dim is checked on its own, subject to the shared outer
    /// prefix.
    #[default]
    PerDimension,
    /// Scan data dims from the first and stop at the first mismatch.
    PrefixScan,
}

/// A level is shared when both sides loop the same number of times over
/// the same data dim, or both re-iterate.
fn level_shared(src: &ITensorType, dst: &ITensorType, level: usize) -> bool {
    src.iter_tripcounts[level] == dst.iter_tripcounts[level]
        && src.driven_dim(level) == dst.driven_dim(level)
}

/// Length of the longest outermost run of shared loop levels.
pub fn shared_prefix(src: &ITensorType, dst: &ITensorType) -> usize {
    let depth = src.depth().min(dst.depth());
    (0..depth)
        .take_while(|&l| level_shared(src, dst, l))
        .count()
}

fn check_pair(src: &ITensorType, dst: &ITensorType) -> Result<(), ConverterError> {
    src.validate()?;
    dst.validate()?;
    if !src.compatible_data(dst) {
        return Err(ConverterError::Incompatible {
            src: src.data_shape.clone(),
            dst: dst.data_shape.clone(),
        });
    }
    Ok(())
}

pub fn infer_converter(src: &ITensorType, dst: &ITensorType) -> Result<ConverterSpec, ConverterError> {
    infer_converter_with(src, dst, ReductionRule::PerDimension)
}

pub fn infer_converter_with(
    src: &ITensorType,
    dst: &ITensorType,
    rule: ReductionRule,
) -> Result<ConverterSpec, ConverterError> {
    check_pair(src, dst)?;
    if src.matches(dst) {
        return Err(ConverterError::IdenticalTypes);
    }
    Ok(match rule {
        ReductionRule::PerDimension => per_dimension(src, dst),
        ReductionRule::PrefixScan => prefix_scan(src, dst),
    })
}

fn per_dimension(src: &ITensorType, dst: &ITensorType) -> ConverterSpec {
    let shared = shared_prefix(src, dst);
    let buf_shape = (0..src.rank())
        .map(|d| {
            let level = src.dim_source[d];
            let reducible = src.element_shape[d] == dst.element_shape[d]
                && level == dst.dim_source[d]
                && level < shared;
            if reducible {
                src.element_shape[d]
            } else {
                src.data_shape[d]
            }
        })
        .collect();
    ConverterSpec::new(src, buf_shape, shared)
}

fn prefix_scan(src: &ITensorType, dst: &ITensorType) -> ConverterSpec {
    let mut buf_shape = Vec::new();
    let mut shared_loops = Vec::new();
    let mut before = 0usize;
    for d in 0..src.rank() {
        if src.element_shape[d] != dst.element_shape[d] {
            break;
        }
        if src.dim_source[d] != dst.dim_source[d] {
            break;
        }
        buf_shape.push(src.element_shape[d]);
        shared_loops.push(src.dim_source[d]);
        before += 1;
    }
    while shared_loops.iter().any(|&l| l >= before) {
        buf_shape.pop();
        shared_loops.pop();
        before -= 1;
    }
    buf_shape.extend_from_slice(&src.data_shape[buf_shape.len()..]);
    ConverterSpec::new(src, buf_shape, before)
}

/// Why a materialized converter schedule fails.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    /// The declared shared loops are not shared by the two layouts.
    SharedLoopMismatch,
    /// Buffer rank differs from the tensor rank, or an extent is zero.
    BadBufferShape,
    /// The consumer read a slot holding a different element, or nothing.
    MissingElement,
    /// Some element was never delivered to the consumer.
    Uncovered,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("converter fails at shared iteration {iteration:?}, element {offset:?}: {violation:?}")]
pub struct Counterexample {
    pub iteration: Vec<usize>,
    pub offset: Vec<usize>,
    pub violation: Violation,
}

struct Buffer<'a> {
    shape: &'a [usize],
    data_shape: &'a [usize],
    slots: Vec<(u64, u64)>,
}

impl<'a> Buffer<'a> {
    fn slot(&self, coord: &[usize]) -> usize {
        coord
            .iter()
            .zip(self.shape)
            .fold(0, |acc, (&c, &b)| acc * b + c % b)
    }

    fn linear(&self, coord: &[usize]) -> u64 {
        coord
            .iter()
            .zip(self.data_shape)
            .fold(0, |acc, (&c, &n)| acc * n as u64 + c as u64)
    }
}

/// Calls `f` for every element coordinate of the tile at `offset`.
fn for_each_in_tile(offset: &[usize], tile: &[usize], mut f: impl FnMut(&[usize]) -> bool) -> bool {
    let rank = tile.len();
    let mut idx = vec![0usize; rank];
    let mut coord = offset.to_vec();
    loop {
        if !f(&coord) {
            return false;
        }
        let mut d = rank;
        loop {
            if d == 0 {
                return true;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < tile[d] {
                coord[d] = offset[d] + idx[d];
                break;
            }
            idx[d] = 0;
            coord[d] = offset[d];
        }
    }
}

/// Replays the converter schedule: per shared iteration the producer fills
/// one buffer half in its own order, then the consumer drains it in its own
/// order. Buffer slots are addressed by element coordinate modulo the
/// buffer extent. Every consumer read must find the element it expects,
/// and the consumer must see the whole tensor.
pub fn verify_converter(
    src: &ITensorType,
    dst: &ITensorType,
    spec: &ConverterSpec,
) -> Result<(), Counterexample> {
    let fail = |iteration: Vec<usize>, offset: Vec<usize>, violation| {
        Err(Counterexample {
            iteration,
            offset,
            violation,
        })
    };
    let depth = spec.shared_loop_depth;
    if depth > shared_prefix(src, dst) {
        return fail(vec![], vec![], Violation::SharedLoopMismatch);
    }
    if spec.buf_shape.len() != src.rank() || spec.buf_shape.contains(&0) {
        return fail(vec![], vec![], Violation::BadBufferShape);
    }

    let mut buffer = Buffer {
        shape: &spec.buf_shape,
        data_shape: &src.data_shape,
        slots: vec![(0, 0); spec.buffer_elements() as usize],
    };
    let mut delivered = vec![false; src.num_elements() as usize];
    let mut produced = src.accesses().peekable();
    let mut consumed = dst.accesses().peekable();
    let mut generation = 0u64;

    while produced.peek().is_some() || consumed.peek().is_some() {
        generation += 1;
        let iteration = match (produced.peek(), consumed.peek()) {
            (Some((c, _)), _) | (None, Some((c, _))) => c[..depth].to_vec(),
            (None, None) => unreachable!(),
        };
        while let Some((counters, offset)) = produced.peek() {
            if counters[..depth] != iteration[..] {
                break;
            }
            for_each_in_tile(offset, &src.element_shape, |coord| {
                let slot = buffer.slot(coord);
                buffer.slots[slot] = (generation, buffer.linear(coord));
                true
            });
            produced.next();
        }
        while let Some((counters, offset)) = consumed.peek() {
            if counters[..depth] != iteration[..] {
                break;
            }
            let mut missing = None;
            for_each_in_tile(offset, &dst.element_shape, |coord| {
                let want = buffer.linear(coord);
                if buffer.slots[buffer.slot(coord)] != (generation, want) {
                    missing = Some(coord.to_vec());
                    return false;
                }
                delivered[want as usize] = true;
                true
            });
            if let Some(coord) = missing {
                return fail(iteration, coord, Violation::MissingElement);
            }
            consumed.next();
        }
    }
    if let Some(first) = delivered.iter().position(|d| !d) {
        let mut rem = first;
        let mut coord = vec![0; src.rank()];
        for d in (0..src.rank()).rev() {
            coord[d] = rem % src.data_shape[d];
            rem /= src.data_shape[d];
        }
        return fail(vec![], coord, Violation::Uncovered);
    }
    Ok(())
}

/// Smallest buffer (by volume, then lexicographically) whose schedule
/// verifies, with every shared outer level used as a buffer-swap loop.
/// Each dim ranges over multiples of the element extent.
pub fn minimal_buffer_bruteforce(
    src: &ITensorType,
    dst: &ITensorType,
    cap: u64,
) -> Result<Vec<usize>, ConverterError> {
    check_pair(src, dst)?;
    let elements = src.num_elements();
    if elements > cap {
        return Err(ConverterError::CapExceeded { elements, cap });
    }
    let depth = shared_prefix(src, dst);
    let choices: Vec<Vec<usize>> = (0..src.rank())
        .map(|d| {
            let e = src.element_shape[d];
            (1..=src.data_shape[d] / e).map(|k| k * e).collect()
        })
        .collect();
    let mut candidates: Vec<Vec<usize>> = vec![vec![]];
    for options in &choices {
        candidates = candidates
            .into_iter()
            .flat_map(|prefix| {
                options.iter().map(move |&o| {
                    let mut next = prefix.clone();
                    next.push(o);
                    next
                })
            })
            .collect();
    }
    candidates.sort_by(|a, b| {
        let va: usize = a.iter().product();
        let vb: usize = b.iter().product();
        va.cmp(&vb).then_with(|| a.cmp(b))
    });
    for shape in candidates {
        let spec = ConverterSpec::new(src, shape, depth);
        if verify_converter(src, dst, &spec).is_ok() {
            return Ok(spec.buf_shape);
        }
    }
    // The full tensor with shared loops always verifies.
    Ok(src.data_shape.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::itensor::ElementKind;
    use crate::fixtures::retile_pair;
    use crate::testutil::*;
    use proptest::prelude::*;

    #[test]
    fn column_reread_buffers_one_column_of_tiles() {
        let spec = infer_converter(&column_tiles(), &column_tiles_twice()).unwrap();
        assert_eq!(spec.buf_shape, vec![8, 2]);
        assert_eq!(spec.shared_loop_depth, 1);
        assert_eq!(spec.shared_loop_tripcounts, vec![4]);
        assert_eq!(spec.byte_cost, 2 * 8 * 2 * 4);
        assert_eq!(verify_converter(&column_tiles(), &column_tiles_twice(), &spec), Ok(()));
    }

    #[test]
    fn undersized_buffer_has_counterexample() {
        let spec = ConverterSpec::new(&column_tiles(), vec![4, 2], 1);
        let err = verify_converter(&column_tiles(), &column_tiles_twice(), &spec).unwrap_err();
        assert_eq!(err.violation, Violation::MissingElement);
        assert_eq!(err.iteration, vec![0]);
    }

    #[test]
    fn fully_mismatched_layouts_buffer_everything() {
        let rows = ITensorType::row_major(vec![8, 8], vec![2, 2], ElementKind::f32()).unwrap();
        let cols = ITensorType::new(
            vec![8, 8],
            vec![2, 2],
            vec![4, 4],
            vec![2, 2],
            vec![1, 0],
            ElementKind::f32(),
        )
        .unwrap();
        let spec = infer_converter(&rows, &cols).unwrap();
        assert_eq!(spec.buf_shape, vec![8, 8]);
        assert_eq!(spec.shared_loop_depth, 0);
        assert_eq!(spec.byte_cost, 2 * rows.tensor_bytes());
        verify_converter(&rows, &cols, &spec).unwrap();
    }

    #[test]
    fn row_retile_reuses_buffer_four_times() {
        let (src, dst) = retile_pair();
        let spec = infer_converter(&src, &dst).unwrap();
        assert_eq!(spec.buf_shape, vec![16, 64]);
        assert_eq!(spec.shared_loop_tripcounts, vec![4]);
        assert_eq!(spec.reuse_count(), 4);
        verify_converter(&src, &dst, &spec).unwrap();
    }

    #[test]
    fn whole_buffer_without_shared_loops_always_verifies() {
        let spec = ConverterSpec::new(&column_tiles(), vec![8, 8], 0);
        verify_converter(&column_tiles(), &column_tiles_twice(), &spec).unwrap();
        verify_converter(&column_tiles_twice(), &column_tiles(), &spec).unwrap();
    }

    #[test]
    fn rejects_bad_pairs() {
        assert_eq!(
            infer_converter(&column_tiles(), &column_tiles()),
            Err(ConverterError::IdenticalTypes)
        );
        let other = ITensorType::row_major(vec![8, 4], vec![4, 2], ElementKind::f32()).unwrap();
        assert!(matches!(
            infer_converter(&column_tiles(), &other),
            Err(ConverterError::Incompatible { .. })
        ));
        let big = ITensorType::row_major(vec![128, 64], vec![16, 16], ElementKind::f32()).unwrap();
        assert!(matches!(
            minimal_buffer_bruteforce(&big, &big, DEFAULT_BRUTEFORCE_CAP),
            Err(ConverterError::CapExceeded { .. })
        ));
    }

    #[test]
    fn corrupted_shared_depth_is_reported() {
        let spec = ConverterSpec::new(&column_tiles(), vec![8, 2], 2);
        let err = verify_converter(&column_tiles(), &column_tiles_twice(), &spec).unwrap_err();
        assert_eq!(err.violation, Violation::SharedLoopMismatch);
    }

    #[test]
    fn bruteforce_minimum_on_worked_example() {
        assert_eq!(
            minimal_buffer_bruteforce(&column_tiles(), &column_tiles_twice(), DEFAULT_BRUTEFORCE_CAP).unwrap(),
            vec![8, 2]
        );
        // Matching types collapse to a single token.
        assert_eq!(
            minimal_buffer_bruteforce(&column_tiles(), &column_tiles(), DEFAULT_BRUTEFORCE_CAP).unwrap(),
            vec![4, 2]
        );
    }

    #[test]
    fn transpose_of_tiles_bound() {
        // Same 4x2 tiles, opposite tile orders.
        let row = ITensorType::row_major(vec![8, 8], vec![4, 2], ElementKind::f32()).unwrap();
        let col = column_tiles();
        let oracle = minimal_buffer_bruteforce(&row, &col, DEFAULT_BRUTEFORCE_CAP).unwrap();
        let spec = infer_converter(&row, &col).unwrap();
        assert_eq!(oracle, vec![8, 8]);
        assert!(spec.buf_shape.iter().zip(&oracle).all(|(a, b)| a >= b));
    }

    #[test]
    fn prefix_scan_misses_second_dim() {
        let spec = infer_converter_with(&column_tiles(), &column_tiles_twice(), ReductionRule::PrefixScan).unwrap();
        assert_eq!(spec.buf_shape, vec![8, 8]);
        verify_converter(&column_tiles(), &column_tiles_twice(), &spec).unwrap();
    }

    fn arb_pair() -> impl Strategy<Value = (ITensorType, ITensorType)> {
        (1usize..=3).prop_flat_map(|rank| {
            let dim = (0u32..=3, 0u32..=2, 0u32..=2);
            (
                proptest::collection::vec(dim, rank),
                proptest::collection::vec(1usize..=2, 0..=1),
                proptest::collection::vec(1usize..=2, 0..=1),
                any::<u64>(),
            )
                .prop_filter_map("invalid", move |(dims, ra, rb, seed)| {
                    // Shared data extent 2^(t+e), element extents may differ.
                    let a: Vec<(u32, u32)> = dims.iter().map(|&(t, e, _)| (t, e)).collect();
                    let b: Vec<(u32, u32)> = dims
                        .iter()
                        .map(|&(t, e, f)| {
                            let total = t + e;
                            let f = f.min(total);
                            (total - f, f)
                        })
                        .collect();
                    let order = |n: usize, salt: u64| {
                        let mut o: Vec<usize> = (0..n).collect();
                        let mut s = seed ^ salt;
                        for i in (1..n).rev() {
                            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                            o.swap(i, (s >> 33) as usize % (i + 1));
                        }
                        o
                    };
                    let ta = build_type(&a, &ra, &order(rank + ra.len(), 1), ElementKind::f32())?;
                    let tb = build_type(&b, &rb, &order(rank + rb.len(), 2), ElementKind::f32())?;
                    Some((ta, tb))
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn inferred_converters_verify((src, dst) in arb_pair()) {
            prop_assume!(!src.matches(&dst));
            let spec = infer_converter(&src, &dst).unwrap();
            prop_assert_eq!(verify_converter(&src, &dst, &spec), Ok(()));
            let oracle = minimal_buffer_bruteforce(&src, &dst, DEFAULT_BRUTEFORCE_CAP).unwrap();
            prop_assert_eq!(&spec.buf_shape, &oracle);
            let literal = infer_converter_with(&src, &dst, ReductionRule::PrefixScan).unwrap();
            prop_assert!(literal.buf_shape.iter().zip(&spec.buf_shape).all(|(l, p)| l >= p));
            prop_assert_eq!(verify_converter(&src, &dst, &literal), Ok(()));
        }
    }
}
