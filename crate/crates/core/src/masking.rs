//! Row-chunk masks: grid construction, deterministic sampling, exhaustive
//! enumeration, expansion to row selections and application to matrices.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, SplitMix64};
use crate::spectra::Spectrogram;

/// Default cap on the number of masks `enumerate_masks` will produce.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("chunk count {chunks} out of range for {rows} rows")]
    ChunkCount { rows: usize, chunks: usize },
    #[error("features must be in 1..={chunks}, got {features}")]
    Features { chunks: usize, features: usize },
    #[error("enumeration of {requested} masks exceeds budget {budget}")]
    BudgetExceeded { requested: u128, budget: u64 },
    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("fill value must be finite")]
    NonFiniteFill,
}

/// Partition of `rows` rows into `m` contiguous chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkGrid {
    rows: usize,
    boundaries: Vec<Range<usize>>,
}

impl ChunkGrid {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn chunks(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[Range<usize>] {
        &self.boundaries
    }

    pub fn interval(&self, chunk: usize) -> Range<usize> {
        self.boundaries[chunk].clone()
    }

    /// Chunk index owning each row.
    pub fn row_to_chunk(&self) -> Vec<usize> {
        let mut owner = vec![0; self.rows];
        for (z, r) in self.boundaries.iter().enumerate() {
            owner[r.clone()].fill(z);
        }
        owner
    }
}

/// Splits `[0, rows)` into `chunks` intervals. When `chunks` does not
/// divide `rows`, the first `rows % chunks` intervals get one extra row.
pub fn make_grid(rows: usize, chunks: usize) -> Result<ChunkGrid, MaskError> {
    if chunks < 1 || chunks > rows {
        return Err(MaskError::ChunkCount { rows, chunks });
    }
    let base = rows / chunks;
    let extra = rows % chunks;
    let mut start = 0;
    let boundaries = (0..chunks)
        .map(|z| {
            let len = base + usize::from(z < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect();
    Ok(ChunkGrid { rows, boundaries })
}

/// A binary selection over chunks together with the iteration that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkMask {
    pub bits: Vec<bool>,
    pub iteration_index: u64,
}

impl ChunkMask {
    pub fn new(bits: Vec<bool>, iteration_index: u64) -> Self {
        Self {
            bits,
            iteration_index,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn includes(&self, chunk: usize) -> bool {
        self.bits[chunk]
    }

    /// Bit string with chunk 0 first, e.g. `"1010"`.
    pub fn to_bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }
}

/// Samples `features` distinct chunks. Pure in `(seed, iteration, m, features)`.
pub fn sample_mask(
    seed: u64,
    iteration: u64,
    grid: &ChunkGrid,
    features: usize,
) -> Result<ChunkMask, MaskError> {
    let m = grid.chunks();
    if features < 1 || features > m {
        return Err(MaskError::Features {
            chunks: m,
            features,
        });
    }
    let mut rng = SplitMix64::new(derive_seed(seed, iteration));
    let mut bits = vec![false; m];
    for z in rng.choose_distinct(m, features) {
        bits[z] = true;
    }
    Ok(ChunkMask::new(bits, iteration))
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exhaustive mask list. Without `features`, all `2^m` patterns in
/// increasing binary order (chunk 0 is the most significant bit); with
/// `features`, every mask of that popcount in lexicographic order of the
/// chosen index sets. `iteration_index` is the position in the list.
pub fn enumerate_masks(
    grid: &ChunkGrid,
    features: Option<usize>,
    budget: u64,
) -> Result<Vec<ChunkMask>, MaskError> {
    let m = grid.chunks();
    let requested = match features {
        None => {
            if m >= 127 {
                u128::MAX
            } else {
                1u128 << m
            }
        }
        Some(k) if k >= 1 && k <= m => binomial(m, k),
        Some(k) => {
            return Err(MaskError::Features {
                chunks: m,
                features: k,
            })
        }
    };
    if requested > u128::from(budget) {
        return Err(MaskError::BudgetExceeded { requested, budget });
    }
    let masks = match features {
        None => (0..requested as u64)
            .map(|code| {
                let bits = (0..m).map(|i| (code >> (m - 1 - i)) & 1 == 1).collect();
                ChunkMask::new(bits, code)
            })
            .collect(),
        Some(k) => {
            let mut out = Vec::with_capacity(requested as usize);
            let mut idx: Vec<usize> = (0..k).collect();
            loop {
                let mut bits = vec![false; m];
                for &i in &idx {
                    bits[i] = true;
                }
                out.push(ChunkMask::new(bits, out.len() as u64));
                // Advance to the next combination in lexicographic order.
                let Some(pos) = (0..k).rev().find(|&p| idx[p] < m - k + p) else {
                    break;
                };
                idx[pos] += 1;
                for p in pos + 1..k {
                    idx[p] = idx[p - 1] + 1;
                }
            }
            out
        }
    };
    Ok(masks)
}

/// Binary per-row selection, constant within each grid chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowSelection {
    pub v: Vec<bool>,
}

impl RowSelection {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn selected(&self) -> usize {
        self.v.iter().filter(|b| **b).count()
    }
}

pub fn expand_mask(mask: &ChunkMask, grid: &ChunkGrid) -> Result<RowSelection, MaskError> {
    if mask.len() != grid.chunks() {
        return Err(MaskError::LengthMismatch {
            expected: grid.chunks(),
            found: mask.len(),
        });
    }
    let mut v = vec![false; grid.rows()];
    for (z, r) in grid.boundaries().iter().enumerate() {
        if mask.bits[z] {
            v[r.clone()].fill(true);
        }
    }
    Ok(RowSelection { v })
}

/// Keeps rows where `selection` is set and replaces the others with `fill`.
pub fn apply_mask(
    input: &Spectrogram,
    selection: &RowSelection,
    fill: f64,
) -> Result<Spectrogram, MaskError> {
    if selection.len() != input.rows() {
        return Err(MaskError::LengthMismatch {
            expected: input.rows(),
            found: selection.len(),
        });
    }
    if !fill.is_finite() {
        return Err(MaskError::NonFiniteFill);
    }
    let cols = input.cols();
    let mut values = Vec::with_capacity(input.values().len());
    for (i, &keep) in selection.v.iter().enumerate() {
        if keep {
            values.extend_from_slice(input.row(i));
        } else {
            values.extend(std::iter::repeat_n(fill, cols));
        }
    }
    Ok(Spectrogram::from_trusted(
        input.rows(),
        cols,
        values,
        input.row_frequencies().map(<[f64]>::to_vec),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn grid_even_split() {
        let g = make_grid(150, 75).unwrap();
        assert_eq!(g.chunks(), 75);
        assert!(g.boundaries().iter().all(|r| r.len() == 2));
        let g = make_grid(4, 4).unwrap();
        assert!(g.boundaries().iter().all(|r| r.len() == 1));
    }

    #[test]
    fn grid_uneven_split() {
        let g = make_grid(5, 2).unwrap();
        assert_eq!(g.boundaries(), &[0..3, 3..5]);
    }

    #[test]
    fn grid_rejects_bad_counts() {
        assert_eq!(
            make_grid(4, 0),
            Err(MaskError::ChunkCount { rows: 4, chunks: 0 })
        );
        assert!(make_grid(4, 5).is_err());
    }

    #[test]
    fn full_selection_ignores_seed() {
        let g = make_grid(10, 5).unwrap();
        for seed in [0, 1, 99] {
            let m = sample_mask(seed, 3, &g, 5).unwrap();
            assert!(m.bits.iter().all(|b| *b));
        }
    }

    #[test]
    fn single_feature_is_repeatable() {
        let g = make_grid(4, 4).unwrap();
        let a = sample_mask(11, 5, &g, 1).unwrap();
        assert_eq!(a.popcount(), 1);
        for _ in 0..1000 {
            assert_eq!(sample_mask(11, 5, &g, 1).unwrap(), a);
        }
    }

    #[test]
    fn features_out_of_range() {
        let g = make_grid(4, 4).unwrap();
        assert!(sample_mask(0, 0, &g, 0).is_err());
        assert!(sample_mask(0, 0, &g, 5).is_err());
    }

    #[test]
    fn enumerate_all_two_chunks() {
        let g = make_grid(2, 2).unwrap();
        let got: Vec<String> = enumerate_masks(&g, None, DEFAULT_ENUMERATION_BUDGET)
            .unwrap()
            .iter()
            .map(ChunkMask::to_bit_string)
            .collect();
        assert_eq!(got, ["00", "01", "10", "11"]);
    }

    #[test]
    fn enumerate_singletons_lexicographic() {
        let g = make_grid(4, 4).unwrap();
        let got: Vec<String> = enumerate_masks(&g, Some(1), DEFAULT_ENUMERATION_BUDGET)
            .unwrap()
            .iter()
            .map(ChunkMask::to_bit_string)
            .collect();
        assert_eq!(got, ["1000", "0100", "0010", "0001"]);
    }

    #[test]
    fn enumerate_pairs() {
        let g = make_grid(4, 4).unwrap();
        let masks = enumerate_masks(&g, Some(2), DEFAULT_ENUMERATION_BUDGET).unwrap();
        let set: std::collections::HashSet<_> = masks.iter().map(|m| m.bits.clone()).collect();
        assert_eq!(masks.len(), 6);
        assert_eq!(set.len(), 6);
        assert_eq!(masks[0].to_bit_string(), "1100");
        assert_eq!(masks[5].to_bit_string(), "0011");
    }

    #[test]
    fn enumerate_respects_budget() {
        let g = make_grid(30, 30).unwrap();
        assert!(matches!(
            enumerate_masks(&g, None, DEFAULT_ENUMERATION_BUDGET),
            Err(MaskError::BudgetExceeded { .. })
        ));
        assert!(enumerate_masks(&g, Some(2), DEFAULT_ENUMERATION_BUDGET).is_ok());
    }

    #[test]
    fn enumerate_full_space_has_no_repeats() {
        for m in 1..=12 {
            let g = make_grid(m, m).unwrap();
            let masks = enumerate_masks(&g, None, DEFAULT_ENUMERATION_BUDGET).unwrap();
            let set: std::collections::HashSet<_> = masks.iter().map(|x| x.bits.clone()).collect();
            assert_eq!(masks.len(), 1 << m);
            assert_eq!(set.len(), 1 << m);
        }
    }

    #[test]
    fn expand_examples() {
        let g = make_grid(6, 3).unwrap();
        let v = expand_mask(&ChunkMask::new(bits("101"), 0), &g).unwrap();
        assert_eq!(v.v, bits("110011"));
        let v = expand_mask(&ChunkMask::new(bits("000"), 0), &g).unwrap();
        assert_eq!(v.selected(), 0);
        let g = make_grid(5, 2).unwrap();
        let v = expand_mask(&ChunkMask::new(bits("01"), 0), &g).unwrap();
        assert_eq!(v.v, bits("00011"));
    }

    #[test]
    fn expand_length_mismatch() {
        let g = make_grid(6, 3).unwrap();
        assert_eq!(
            expand_mask(&ChunkMask::new(bits("10"), 0), &g),
            Err(MaskError::LengthMismatch {
                expected: 3,
                found: 2
            })
        );
    }

    #[test]
    fn apply_examples() {
        let m = Spectrogram::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = apply_mask(&m, &RowSelection { v: bits("10") }, 0.0).unwrap();
        assert_eq!(out.values(), &[1.0, 2.0, 0.0, 0.0]);
        let out = apply_mask(&m, &RowSelection { v: bits("11") }, 0.0).unwrap();
        assert_eq!(out, m);
        let out = apply_mask(&m, &RowSelection { v: bits("00") }, 0.0).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
        assert!(apply_mask(&m, &RowSelection { v: bits("1") }, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn grid_intervals_partition_rows(rows in 1usize..300, m_frac in 0.0f64..1.0) {
            let m = 1 + ((rows - 1) as f64 * m_frac) as usize;
            let g = make_grid(rows, m).unwrap();
            let mut next = 0;
            for r in g.boundaries() {
                prop_assert_eq!(r.start, next);
                prop_assert!(r.len() == rows / m || r.len() == rows.div_ceil(m));
                next = r.end;
            }
            prop_assert_eq!(next, rows);
        }

        #[test]
        fn sampled_masks_select_whole_chunks(
            seed in any::<u64>(), iter in 0u64..1_000_000,
            m in 1usize..40, per in 1usize..5, f_frac in 0.0f64..1.0,
        ) {
            let features = 1 + ((m - 1) as f64 * f_frac) as usize;
            let g = make_grid(m * per, m).unwrap();
            let mask = sample_mask(seed, iter, &g, features).unwrap();
            prop_assert_eq!(mask.popcount(), features);
            let v = expand_mask(&mask, &g).unwrap();
            prop_assert_eq!(v.selected(), features * per);
        }

        #[test]
        fn masked_entries_are_original_or_fill(
            values in proptest::collection::vec(-100.0f64..100.0, 12),
            sel in proptest::collection::vec(any::<bool>(), 4),
            fill in -5.0f64..5.0,
        ) {
            let m = Spectrogram::new(4, 3, values).unwrap();
            let out = apply_mask(&m, &RowSelection { v: sel.clone() }, fill).unwrap();
            for (i, &keep) in sel.iter().enumerate() {
                for j in 0..3 {
                    let expect = if keep { m.get(i, j) } else { fill };
                    prop_assert_eq!(out.get(i, j), expect);
                }
            }
        }
    }
}
