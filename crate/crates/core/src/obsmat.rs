//! Observed entries of a partially revealed matrix.
//!
//! An [`ObservedMatrix`] holds the index set `E` together with the revealed
//! values, i.e. the sparse matrix `P_E(N)` whose unobserved positions read as
//! zero. Entries are kept in coordinate form sorted by `(row, col)` so that
//! every reduction over them runs in a fixed order.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default trimming factor: rows or columns observed more than twice the
/// average degree are dropped.
pub const DEFAULT_TRIM_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl Entry {
    pub fn new(row: usize, col: usize, value: f64) -> Self {
        Entry { row, col, value }
    }

    fn key(&self) -> (usize, usize) {
        (self.row, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeProfile {
    pub row_degrees: Vec<usize>,
    pub col_degrees: Vec<usize>,
}

impl ObservedMatrix {
    /// Validates bounds, rejects duplicate positions and sorts by `(row, col)`.
    pub fn new(rows: usize, cols: usize, mut entries: Vec<Entry>) -> Result<Self> {
        for e in &entries {
            if e.row >= rows || e.col >= cols {
                return Err(Error::IndexOutOfBounds {
                    row: e.row,
                    col: e.col,
                    rows,
                    cols,
                });
            }
        }
        entries.sort_by_key(Entry::key);
        if let Some(w) = entries.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(Error::DuplicateEntry {
                row: w[0].row,
                col: w[0].col,
            });
        }
        Ok(ObservedMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn from_triplets<I>(rows: usize, cols: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        let entries = triplets
            .into_iter()
            .map(|(i, j, v)| Entry::new(i, j, v))
            .collect();
        Self::new(rows, cols, entries)
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        ObservedMatrix {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    /// Every position of `dense` observed.
    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let (rows, cols) = dense.shape();
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(Entry::new(i, j, dense[(i, j)]));
            }
        }
        ObservedMatrix {
            rows,
            cols,
            entries,
        }
    }

    // Callers guarantee sorted, unique, in-bounds entries.
    fn from_sorted(rows: usize, cols: usize, entries: Vec<Entry>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].key() < w[1].key()));
        ObservedMatrix {
            rows,
            cols,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter()
    }

    /// Fraction of observed positions, |E| / (m n).
    pub fn density(&self) -> f64 {
        self.entries.len() as f64 / (self.rows as f64 * self.cols as f64)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.entries
            .binary_search_by_key(&(row, col), Entry::key)
            .is_ok()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&(row, col), Entry::key)
            .ok()
            .map(|k| self.entries[k].value)
    }

    /// Dense `P_E(N)`: observed values, zeros elsewhere.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for e in &self.entries {
            out[(e.row, e.col)] = e.value;
        }
        out
    }

    /// 0/1 indicator of `E`.
    pub fn mask_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for e in &self.entries {
            out[(e.row, e.col)] = 1.0;
        }
        out
    }

    pub fn frobenius_norm_squared(&self) -> f64 {
        self.entries.iter().map(|e| e.value * e.value).sum()
    }

    /// Same index set with values replaced by `f(row, col, value)`.
    pub fn map_values<F>(&self, mut f: F) -> ObservedMatrix
    where
        F: FnMut(usize, usize, f64) -> f64,
    {
        let entries = self
            .entries
            .iter()
            .map(|e| Entry::new(e.row, e.col, f(e.row, e.col, e.value)))
            .collect();
        Self::from_sorted(self.rows, self.cols, entries)
    }

    /// Same pattern with new values, given in entry order.
    pub(crate) fn with_values(&self, values: &[f64]) -> ObservedMatrix {
        assert_eq!(values.len(), self.entries.len(), "with_values: length");
        let entries = self
            .entries
            .iter()
            .zip(values)
            .map(|(e, &v)| Entry::new(e.row, e.col, v))
            .collect();
        Self::from_sorted(self.rows, self.cols, entries)
    }

    /// `P_E(N) · B` for a dense `B` with `cols` rows.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.cols, "mul_dense: inner dimension");
        self.scatter(b, self.rows, |e| (e.row, e.col))
    }

    /// `P_E(N)ᵀ · B` for a dense `B` with `rows` rows.
    pub fn tr_mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.rows, "tr_mul_dense: inner dimension");
        self.scatter(b, self.cols, |e| (e.col, e.row))
    }

    /// `out[dst] += value · b[src]` over entries, where `(dst, src)` picks the
    /// row of the output and of `b`. Works on transposed copies so that both
    /// rows are contiguous.
    fn scatter<F>(&self, b: &DMatrix<f64>, out_rows: usize, pick: F) -> DMatrix<f64>
    where
        F: Fn(&Entry) -> (usize, usize),
    {
        let k = b.ncols();
        let bt = b.transpose();
        let mut out_t = DMatrix::zeros(k, out_rows);
        if k > 0 {
            let src = bt.as_slice();
            let dst = out_t.as_mut_slice();
            for e in &self.entries {
                let (d, s) = pick(e);
                let from = &src[s * k..(s + 1) * k];
                for (o, v) in dst[d * k..(d + 1) * k].iter_mut().zip(from) {
                    *o += e.value * v;
                }
            }
        }
        out_t.transpose()
    }

    /// Half-open ranges into `entries()` for each row.
    pub(crate) fn row_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = Vec::with_capacity(self.rows);
        let mut start = 0;
        for i in 0..self.rows {
            let mut end = start;
            while end < self.entries.len() && self.entries[end].row == i {
                end += 1;
            }
            ranges.push(start..end);
            start = end;
        }
        ranges
    }
}

/// `P_E(dense)` with `E` taken from `mask`.
pub fn project(mask: &ObservedMatrix, dense: &DMatrix<f64>) -> Result<ObservedMatrix> {
    if dense.shape() != mask.shape() {
        return Err(Error::Dimension {
            expected: mask.shape(),
            found: dense.shape(),
        });
    }
    Ok(mask.map_values(|i, j, _| dense[(i, j)]))
}

pub fn degrees(obs: &ObservedMatrix) -> DegreeProfile {
    let mut row_degrees = vec![0; obs.rows];
    let mut col_degrees = vec![0; obs.cols];
    for e in &obs.entries {
        row_degrees[e.row] += 1;
        col_degrees[e.col] += 1;
    }
    DegreeProfile {
        row_degrees,
        col_degrees,
    }
}

/// Trimming with the default factor of two.
pub fn trim(obs: &ObservedMatrix) -> Result<ObservedMatrix> {
    trim_with_factor(obs, DEFAULT_TRIM_FACTOR)
}

/// Drops every row with degree above `factor·|E|/m` and every column with
/// degree above `factor·|E|/n`. Both thresholds come from the input set.
pub fn trim_with_factor(obs: &ObservedMatrix, factor: f64) -> Result<ObservedMatrix> {
    if obs.is_empty() {
        return Err(Error::invalid("cannot trim an empty observation set"));
    }
    if !(factor > 0.0) {
        return Err(Error::invalid(format!("trim factor must be positive, got {factor}")));
    }
    let total = obs.len() as f64;
    let row_cap = factor * total / obs.rows as f64;
    let col_cap = factor * total / obs.cols as f64;
    let deg = degrees(obs);
    let entries = obs
        .entries
        .iter()
        .filter(|e| {
            deg.row_degrees[e.row] as f64 <= row_cap && deg.col_degrees[e.col] as f64 <= col_cap
        })
        .copied()
        .collect();
    Ok(ObservedMatrix::from_sorted(obs.rows, obs.cols, entries))
}

/// Random disjoint split into `(train, validation)` with
/// `|validation| = round(fraction·|E|)`.
pub fn split_holdout(
    obs: &ObservedMatrix,
    fraction: f64,
    seed: u64,
) -> Result<(ObservedMatrix, ObservedMatrix)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "holdout fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let held = (fraction * obs.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..obs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_held = vec![false; obs.len()];
    for &k in &order[..held] {
        is_held[k] = true;
    }
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (k, e) in obs.entries.iter().enumerate() {
        if is_held[k] {
            valid.push(*e);
        } else {
            train.push(*e);
        }
    }
    Ok((
        ObservedMatrix::from_sorted(obs.rows, obs.cols, train),
        ObservedMatrix::from_sorted(obs.rows, obs.cols, valid),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_obs(rows: usize, cols: usize, count: usize, seed: u64) -> ObservedMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells: Vec<(usize, usize)> =
            (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).collect();
        cells.shuffle(&mut rng);
        ObservedMatrix::from_triplets(
            rows,
            cols,
            cells[..count].iter().map(|&(i, j)| (i, j, rng.gen::<f64>())),
        )
        .unwrap()
    }

    #[test]
    fn rejects_duplicates_and_out_of_range() {
        let dup = ObservedMatrix::from_triplets(2, 2, [(0, 1, 1.0), (0, 1, 2.0)]);
        assert!(matches!(dup, Err(Error::DuplicateEntry { row: 0, col: 1 })));
        let oob = ObservedMatrix::from_triplets(2, 2, [(2, 0, 1.0)]);
        assert!(matches!(oob, Err(Error::IndexOutOfBounds { .. })));
    }

    #[test]
    fn entries_are_sorted_row_major() {
        let obs = ObservedMatrix::from_triplets(3, 3, [(2, 0, 1.0), (0, 2, 2.0), (0, 1, 3.0)])
            .unwrap();
        let keys: Vec<_> = obs.iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(keys, vec![(0, 1), (0, 2), (2, 0)]);
    }

    #[test]
    fn project_full_mask_is_identity() {
        let a = DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 2.5);
        let full = ObservedMatrix::from_dense(&DMatrix::zeros(3, 4));
        let p = project(&full, &a).unwrap();
        assert_eq!(p.to_dense(), a);
    }

    #[test]
    fn project_empty_mask_gives_no_entries() {
        let a = DMatrix::from_element(3, 3, 5.0);
        let p = project(&ObservedMatrix::empty(3, 3), &a).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.to_dense(), DMatrix::zeros(3, 3));
    }

    #[test]
    fn project_single_entry() {
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 1)] = 7.0;
        let mask = ObservedMatrix::from_triplets(2, 2, [(0, 1, 0.0)]).unwrap();
        let p = project(&mask, &a).unwrap();
        assert_eq!(p.entries(), &[Entry::new(0, 1, 7.0)]);
    }

    #[test]
    fn project_checks_dimensions() {
        let mask = ObservedMatrix::empty(2, 3);
        assert!(matches!(
            project(&mask, &DMatrix::zeros(3, 2)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn degrees_of_empty_and_single() {
        let d = degrees(&ObservedMatrix::empty(4, 5));
        assert_eq!(d.row_degrees, vec![0; 4]);
        assert_eq!(d.col_degrees, vec![0; 5]);

        let one = ObservedMatrix::from_triplets(4, 5, [(2, 3, 1.5)]).unwrap();
        let d = degrees(&one);
        assert_eq!(d.row_degrees, vec![0, 0, 1, 0]);
        assert_eq!(d.col_degrees, vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn degrees_conserve_count() {
        let obs = random_obs(10, 10, 30, 1);
        let d = degrees(&obs);
        assert_eq!(d.row_degrees.iter().sum::<usize>(), 30);
        assert_eq!(d.col_degrees.iter().sum::<usize>(), 30);
    }

    #[test]
    fn trim_keeps_uniform_degrees() {
        // Two entries in every row and column of a 5x5 circulant pattern.
        let obs = ObservedMatrix::from_triplets(
            5,
            5,
            (0..5).flat_map(|i| [(i, i, 1.0), (i, (i + 1) % 5, 2.0)]),
        )
        .unwrap();
        assert_eq!(trim(&obs).unwrap(), obs);
    }

    #[test]
    fn trim_drops_overfull_row() {
        // Row 0 holds 8 of 20 entries; the remaining 12 sit one per cell on
        // rows 1..9 and distinct columns so no column is overfull.
        let mut t: Vec<(usize, usize, f64)> = (0..8).map(|j| (0, j, 1.0)).collect();
        let rest = [
            (1, 0), (1, 8), (2, 1), (2, 9), (3, 2), (4, 3), (5, 4), (6, 5), (7, 6), (8, 7),
            (9, 8), (9, 9),
        ];
        t.extend(rest.iter().map(|&(i, j)| (i, j, 2.0)));
        let obs = ObservedMatrix::from_triplets(10, 10, t).unwrap();
        assert_eq!(obs.len(), 20);

        // Brute-force degree count: row cap 2·20/10 = 4, col cap 4.
        let mut row_deg = [0usize; 10];
        let mut col_deg = [0usize; 10];
        for e in obs.iter() {
            row_deg[e.row] += 1;
            col_deg[e.col] += 1;
        }
        assert_eq!(row_deg[0], 8);
        assert!(row_deg[1..].iter().all(|&d| d <= 4));
        assert!(col_deg.iter().all(|&d| d <= 4));

        let trimmed = trim(&obs).unwrap();
        assert_eq!(trimmed.len(), 12);
        assert!(trimmed.iter().all(|e| e.row != 0));
    }

    #[test]
    fn trim_single_entry_and_empty() {
        let one = ObservedMatrix::from_triplets(1, 1, [(0, 0, 4.0)]).unwrap();
        assert_eq!(trim(&one).unwrap(), one);
        // In a larger matrix the average degree drops below one and the lone
        // entry exceeds twice of it.
        let sparse = ObservedMatrix::from_triplets(3, 3, [(1, 1, 4.0)]).unwrap();
        assert!(trim(&sparse).unwrap().is_empty());
        assert!(trim(&ObservedMatrix::empty(3, 3)).is_err());
    }

    #[test]
    fn split_with_zero_fraction_keeps_everything() {
        let obs = random_obs(6, 7, 20, 4);
        let (train, valid) = split_holdout(&obs, 0.0, 11).unwrap();
        assert_eq!(train, obs);
        assert!(valid.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let obs = random_obs(8, 8, 40, 5);
        let a = split_holdout(&obs, 0.25, 99).unwrap();
        let b = split_holdout(&obs, 0.25, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 10);
        assert!(split_holdout(&obs, 1.0, 1).is_err());
    }

    #[test]
    fn sparse_products_match_dense() {
        let obs = random_obs(7, 5, 17, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = crate::linalg::gaussian_matrix(&mut rng, 5, 3);
        let c = crate::linalg::gaussian_matrix(&mut rng, 7, 2);
        let dense = obs.to_dense();
        assert!((obs.mul_dense(&b) - &dense * &b).norm() < 1e-12);
        assert!((obs.tr_mul_dense(&c) - dense.transpose() * &c).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn trim_respects_pre_trim_caps(rows in 2usize..12, cols in 2usize..12, frac in 0.05f64..1.0, seed in 0u64..1000) {
            let count = ((rows * cols) as f64 * frac).ceil() as usize;
            let obs = random_obs(rows, cols, count, seed);
            let trimmed = trim(&obs).unwrap();
            let d = degrees(&trimmed);
            let total = obs.len() as f64;
            prop_assert!(d.row_degrees.iter().all(|&k| k as f64 <= 2.0 * total / rows as f64));
            prop_assert!(d.col_degrees.iter().all(|&k| k as f64 <= 2.0 * total / cols as f64));
            prop_assert!(trimmed.iter().all(|e| obs.get(e.row, e.col) == Some(e.value)));
        }

        #[test]
        fn split_partitions_entries(count in 1usize..60, frac in 0.0f64..0.99, seed in 0u64..1000) {
            let obs = random_obs(8, 8, count, seed);
            let (train, valid) = split_holdout(&obs, frac, seed ^ 0xabc).unwrap();
            prop_assert_eq!(train.len() + valid.len(), obs.len());
            prop_assert_eq!(valid.len(), (frac * count as f64).round() as usize);
            prop_assert!(valid.iter().all(|e| !train.contains(e.row, e.col)));
            prop_assert!(valid.iter().chain(train.iter()).all(|e| obs.get(e.row, e.col) == Some(e.value)));
        }

        #[test]
        fn project_copies_values_exactly(seed in 0u64..500, count in 0usize..30) {
            let mask = random_obs(6, 5, count, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let dense = crate::linalg::gaussian_matrix(&mut rng, 6, 5);
            let p = project(&mask, &dense).unwrap();
            prop_assert_eq!(p.len(), mask.len());
            for e in p.iter() {
                prop_assert_eq!(e.value.to_bits(), dense[(e.row, e.col)].to_bits());
            }
        }
    }
}
