//! Structural mask, gold labels and threshold-based candidate selection.

use std::collections::BTreeSet;

use crate::numkernel::Tensor2;
use crate::subword::TokenSeq;

/// Which pieces may start or end an entity.
///
/// Only sentence pieces qualify. A start must be the first piece of a word
/// and an end the last piece of a word, so pieces in the middle of a word
/// are excluded from both roles. A 2D cell `(i, j)` is valid when `i` is a
/// valid start, `j` a valid end, and `j >= i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuralMask {
    start: Vec<bool>,
    end: Vec<bool>,
}

impl StructuralMask {
    pub fn new(start: Vec<bool>, end: Vec<bool>) -> Self {
        assert_eq!(start.len(), end.len());
        StructuralMask { start, end }
    }

    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    pub fn start_valid(&self, i: usize) -> bool {
        self.start.get(i).copied().unwrap_or(false)
    }

    pub fn end_valid(&self, j: usize) -> bool {
        self.end.get(j).copied().unwrap_or(false)
    }

    pub fn cell_valid(&self, i: usize, j: usize) -> bool {
        j >= i && self.start_valid(i) && self.end_valid(j)
    }

    pub fn valid_starts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.start[i])
    }

    pub fn valid_ends(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&j| self.end[j])
    }

    /// `l x 1` column of 0/1 start validity.
    pub fn start_tensor(&self) -> Tensor2 {
        Tensor2::col_vector(&self.start.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>())
    }

    pub fn end_tensor(&self) -> Tensor2 {
        Tensor2::col_vector(&self.end.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>())
    }

    /// `l x l` 0/1 cell validity.
    pub fn cell_tensor(&self) -> Tensor2 {
        let l = self.len();
        let mut t = Tensor2::zeros(l, l);
        for i in 0..l {
            for j in i..l {
                if self.cell_valid(i, j) {
                    t.set(i, j, 1.0);
                }
            }
        }
        t
    }

    pub fn apply_start(&self, s: &mut [f64]) {
        for (v, &ok) in s.iter_mut().zip(&self.start) {
            if !ok {
                *v = 0.0;
            }
        }
    }

    pub fn apply_end(&self, e: &mut [f64]) {
        for (v, &ok) in e.iter_mut().zip(&self.end) {
            if !ok {
                *v = 0.0;
            }
        }
    }

    pub fn apply_matrix(&self, m: &mut Tensor2) {
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                if !self.cell_valid(i, j) {
                    m.set(i, j, 0.0);
                }
            }
        }
    }
}

/// Mask derived from the token layout of `seq`.
pub fn build_structural_mask(seq: &TokenSeq) -> StructuralMask {
    let l = seq.len();
    let start = (0..l)
        .map(|i| seq.is_text(i) && seq.is_word_start(i))
        .collect();
    let end = (0..l).map(|i| seq.is_text(i) && seq.is_word_end(i)).collect();
    StructuralMask { start, end }
}

/// Gold boundaries of one training unit, in piece indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldLabels {
    pub starts: BTreeSet<usize>,
    pub ends: BTreeSet<usize>,
    pub cells: BTreeSet<(usize, usize)>,
}

impl GoldLabels {
    /// Maps sentence char spans `[start, end)` to piece cells. Spans whose
    /// boundaries do not fall on valid pieces (for example, cut off by
    /// truncation) are dropped; the count of dropped spans is returned.
    pub fn from_char_spans(
        seq: &TokenSeq,
        mask: &StructuralMask,
        spans: &[(usize, usize)],
    ) -> (Self, usize) {
        let mut gold = GoldLabels::default();
        let mut dropped = 0;
        for &(cs, ce) in spans {
            match (seq.piece_starting_at(cs), seq.piece_ending_at(ce)) {
                (Some(i), Some(j)) if mask.cell_valid(i, j) => gold.insert(i, j),
                _ => dropped += 1,
            }
        }
        (gold, dropped)
    }

    pub fn insert(&mut self, i: usize, j: usize) {
        self.starts.insert(i);
        self.ends.insert(j);
        self.cells.insert((i, j));
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Thresholded start/end sets and the 2D cells they select, with their
/// probabilities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskedSelection {
    pub starts: Vec<usize>,
    pub ends: Vec<usize>,
    pub cells: Vec<((usize, usize), f64)>,
}

impl MaskedSelection {
    pub fn keys(&self) -> Vec<(usize, usize)> {
        self.cells.iter().map(|&(k, _)| k).collect()
    }
}

/// Keeps positions with `s[i] > threshold` (resp. `e[j]`), unions in gold
/// boundaries when `gold` is given, and collects the valid upper-triangle
/// cells of `m` over the resulting start × end grid.
///
/// `s`, `e` and `m` are expected to be structurally masked already; the mask
/// is re-checked so unmasked input cannot leak invalid cells.
pub fn select_candidates(
    s: &[f64],
    e: &[f64],
    m: Option<&Tensor2>,
    threshold: f64,
    mask: &StructuralMask,
    gold: Option<&GoldLabels>,
) -> MaskedSelection {
    let mut starts: BTreeSet<usize> = (0..s.len())
        .filter(|&i| s[i] > threshold && mask.start_valid(i))
        .collect();
    let mut ends: BTreeSet<usize> = (0..e.len())
        .filter(|&j| e[j] > threshold && mask.end_valid(j))
        .collect();
    if let Some(g) = gold {
        starts.extend(&g.starts);
        ends.extend(&g.ends);
    }
    let mut cells = Vec::new();
    if let Some(m) = m {
        for &i in &starts {
            for &j in ends.range(i..) {
                if mask.cell_valid(i, j) {
                    cells.push(((i, j), m.get(i, j)));
                }
            }
        }
    }
    MaskedSelection {
        starts: starts.into_iter().collect(),
        ends: ends.into_iter().collect(),
        cells,
    }
}
