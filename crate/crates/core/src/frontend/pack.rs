//! Packs a tensor tile by tile into bus-width words, so one tile is one
//! contiguous burst.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::itensor::ElementKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PackError {
    #[error("tile sizes {tiles:?} do not divide shape {shape:?}")]
    TileMismatch { shape: Vec<usize>, tiles: Vec<usize> },
    #[error("word shape {word:?} does not divide tile {tiles:?}")]
    WordMismatch { word: Vec<usize>, tiles: Vec<usize> },
    #[error("a {bits}-bit word does not fit a {bus}-bit bus")]
    WordTooWide { bits: u64, bus: u64 },
    #[error("tile of {elements} elements is not a whole number of {group}-element words")]
    PartialWord { elements: usize, group: usize },
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
}

/// Tile-major layout: outer tile grid, then either the tile itself or a
/// grid of fixed-shape words inside it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PackedLayout {
    pub original_shape: Vec<usize>,
    pub tile_sizes: Vec<usize>,
    pub packed_shape: Vec<usize>,
    /// Scalars per bus word.
    pub vector_group: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_shape: Option<Vec<usize>>,
    pub element_kind: ElementKind,
}

pub fn pack(
    shape: &[usize],
    tiles: &[usize],
    kind: ElementKind,
    bus_bits: u64,
    word_shape: Option<&[usize]>,
) -> Result<PackedLayout, PackError> {
    if shape.len() != tiles.len() || shape.iter().zip(tiles).any(|(&s, &t)| t == 0 || s % t != 0) {
        return Err(PackError::TileMismatch {
            shape: shape.to_vec(),
            tiles: tiles.to_vec(),
        });
    }
    let outer: Vec<usize> = shape.iter().zip(tiles).map(|(s, t)| s / t).collect();
    let tile_elems: usize = tiles.iter().product();
    let (inner, group) = match word_shape {
        Some(w) => {
            if w.len() != tiles.len() || w.iter().zip(tiles).any(|(&w, &t)| w == 0 || t % w != 0) {
                return Err(PackError::WordMismatch {
                    word: w.to_vec(),
                    tiles: tiles.to_vec(),
                });
            }
            let group: usize = w.iter().product();
            let bits = group as u64 * kind.bits();
            if bits > bus_bits {
                return Err(PackError::WordTooWide { bits, bus: bus_bits });
            }
            (tiles.iter().zip(w).map(|(t, w)| t / w).collect(), group)
        }
        None => {
            let group = (bus_bits / kind.bits()).max(1) as usize;
            if !tile_elems.is_multiple_of(group) {
                return Err(PackError::PartialWord {
                    elements: tile_elems,
                    group,
                });
            }
            (tiles.to_vec(), group)
        }
    };
    Ok(PackedLayout {
        original_shape: shape.to_vec(),
        tile_sizes: tiles.to_vec(),
        packed_shape: outer.into_iter().chain(inner).collect(),
        vector_group: group,
        word_shape: word_shape.map(<[usize]>::to_vec),
        element_kind: kind,
    })
}

fn linear(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (i, s)| acc * s + i)
}

fn delinear(mut lin: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        out[d] = lin % shape[d];
        lin /= shape[d];
    }
    out
}

impl PackedLayout {
    fn rank(&self) -> usize {
        self.original_shape.len()
    }

    fn outer(&self) -> Vec<usize> {
        self.original_shape.iter().zip(&self.tile_sizes).map(|(s, t)| s / t).collect()
    }

    pub fn num_words(&self) -> usize {
        self.original_shape.iter().product::<usize>() / self.vector_group
    }

    pub fn num_elements(&self) -> usize {
        self.original_shape.iter().product()
    }

    /// Word and lane holding one element.
    pub fn locate(&self, idx: &[usize]) -> (usize, usize) {
        let r = self.rank();
        let outer = self.outer();
        let tile_idx: Vec<usize> = (0..r).map(|d| idx[d] / self.tile_sizes[d]).collect();
        let within: Vec<usize> = (0..r).map(|d| idx[d] % self.tile_sizes[d]).collect();
        let tile_lin = linear(&tile_idx, &outer);
        match &self.word_shape {
            Some(w) => {
                let grid: Vec<usize> = self.tile_sizes.iter().zip(w).map(|(t, w)| t / w).collect();
                let word_idx: Vec<usize> = (0..r).map(|d| within[d] / w[d]).collect();
                let lane_idx: Vec<usize> = (0..r).map(|d| within[d] % w[d]).collect();
                let words_per_tile: usize = grid.iter().product();
                (tile_lin * words_per_tile + linear(&word_idx, &grid), linear(&lane_idx, w))
            }
            None => {
                let off = linear(&within, &self.tile_sizes);
                let words_per_tile = self.tile_sizes.iter().product::<usize>() / self.vector_group;
                (tile_lin * words_per_tile + off / self.vector_group, off % self.vector_group)
            }
        }
    }

    /// Inverse of `locate`.
    pub fn index_of(&self, word: usize, lane: usize) -> Vec<usize> {
        let r = self.rank();
        let outer = self.outer();
        let (tile_lin, within) = match &self.word_shape {
            Some(w) => {
                let grid: Vec<usize> = self.tile_sizes.iter().zip(w).map(|(t, w)| t / w).collect();
                let words_per_tile: usize = grid.iter().product();
                let word_idx = delinear(word % words_per_tile, &grid);
                let lane_idx = delinear(lane, w);
                (word / words_per_tile, (0..r).map(|d| word_idx[d] * w[d] + lane_idx[d]).collect())
            }
            None => {
                let words_per_tile = self.tile_sizes.iter().product::<usize>() / self.vector_group;
                let off = (word % words_per_tile) * self.vector_group + lane;
                (word / words_per_tile, delinear(off, &self.tile_sizes))
            }
        };
        let tile_idx = delinear(tile_lin, &outer);
        let within: Vec<usize> = within;
        (0..r).map(|d| tile_idx[d] * self.tile_sizes[d] + within[d]).collect()
    }

    /// Reorders row-major values into packed order.
    pub fn pack_values<T: Copy>(&self, data: &[T]) -> Result<Vec<T>, PackError> {
        self.check_len(data.len())?;
        Ok((0..data.len())
            .map(|p| {
                let idx = self.index_of(p / self.vector_group, p % self.vector_group);
                data[linear(&idx, &self.original_shape)]
            })
            .collect())
    }

    pub fn unpack_values<T: Copy>(&self, packed: &[T]) -> Result<Vec<T>, PackError> {
        self.check_len(packed.len())?;
        Ok((0..packed.len())
            .map(|i| {
                let (w, l) = self.locate(&delinear(i, &self.original_shape));
                packed[w * self.vector_group + l]
            })
            .collect())
    }

    /// Packed little-endian image of f32 data.
    pub fn pack_f32_le(&self, data: &[f32]) -> Result<Vec<u8>, PackError> {
        Ok(self.pack_values(data)?.iter().flat_map(|v| v.to_le_bytes()).collect())
    }

    fn check_len(&self, got: usize) -> Result<(), PackError> {
        let expected = self.num_elements();
        if got != expected {
            return Err(PackError::Length { expected, got });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_tiles_on_a_wide_bus() {
        let p = pack(&[64, 64], &[16, 16], ElementKind::u8(), 512, None).unwrap();
        assert_eq!(p.packed_shape, [4, 4, 16, 16]);
        assert_eq!(p.vector_group, 64);
        assert_eq!(p.num_words(), 64);
        // Second tile row starts 4 words into the first tile.
        assert_eq!(p.locate(&[4, 0]), (1, 0));
        assert_eq!(p.locate(&[0, 16]), (4, 0));
        assert_eq!(p.locate(&[63, 63]), (63, 63));
    }

    #[test]
    fn square_words() {
        let p = pack(&[64, 64], &[16, 16], ElementKind::f32(), 2048, Some(&[8, 8])).unwrap();
        assert_eq!(p.packed_shape, [4, 4, 2, 2]);
        assert_eq!(p.vector_group, 64);
        assert_eq!(p.locate(&[8, 0]), (2, 0));
        assert_eq!(p.locate(&[1, 1]), (0, 9));
        assert!(matches!(
            pack(&[64, 64], &[16, 16], ElementKind::f32(), 512, Some(&[8, 8])),
            Err(PackError::WordTooWide { .. })
        ));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            pack(&[60, 64], &[16, 16], ElementKind::u8(), 512, None),
            Err(PackError::TileMismatch { .. })
        ));
        assert!(matches!(
            pack(&[8, 8], &[4, 4], ElementKind::u8(), 512, None),
            Err(PackError::PartialWord { .. })
        ));
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(
            outer in proptest::collection::vec(1usize..=3, 2),
            tile_log in proptest::collection::vec(1u32..=3, 2),
            word_log in proptest::collection::vec(0u32..=1, 2),
            words in any::<bool>(),
        ) {
            let tiles: Vec<usize> = tile_log.iter().map(|&l| 1 << l).collect();
            let shape: Vec<usize> = outer.iter().zip(&tiles).map(|(o, t)| o * t).collect();
            let word: Vec<usize> = word_log.iter().map(|&l| 1 << l).collect();
            let p = if words {
                pack(&shape, &tiles, ElementKind::f32(), 512, Some(&word)).unwrap()
            } else {
                pack(&shape, &tiles, ElementKind::u8(), 16, None).unwrap()
            };
            let data: Vec<u32> = (0..p.num_elements() as u32).collect();
            let packed = p.pack_values(&data).unwrap();
            prop_assert_eq!(p.unpack_values(&packed).unwrap(), data.clone());
            let mut seen = packed.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, data);
            // Each tile is one contiguous run.
            let tile_elems: usize = tiles.iter().product();
            for (i, &v) in packed.iter().enumerate() {
                let idx = delinear(v as usize, &shape);
                let tile: Vec<usize> = idx.iter().zip(&tiles).map(|(i, t)| i / t).collect();
                let outer_shape: Vec<usize> = shape.iter().zip(&tiles).map(|(s, t)| s / t).collect();
                prop_assert_eq!(linear(&tile, &outer_shape), i / tile_elems);
            }
        }
    }
}
