//! Bipartite assignment of predicted masks to ground-truth instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{bce_kernel, dice_kernel, DICE_SMOOTH};
use crate::mask::{clamp_prob, ensure_same_dims, BinaryMask, SoftMask, PROB_EPS};
use crate::model::PredictionSet;

/// Cost assigned to padding cells when a rectangular matrix is squared up.
pub const PAD_COST: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub w_obj: f64,
    pub w_bce: f64,
    pub w_dice: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_obj: 2.0,
            w_bce: 5.0,
            w_dice: 5.0,
        }
    }
}

/// Dense `rows x cols` matrix of finite costs (rows = predictions, cols = ground truths).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: entries.len(),
            });
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("cost entries must be finite, got {bad}")));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    /// Sum of the costs of the given `(row, col)` pairs, in order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Matched `(prediction, ground truth)` pairs and the per-prediction indicator vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<(usize, usize)>,
    pub indicators: Vec<u8>,
}

impl MatchResult {
    pub fn from_pairs(pairs: Vec<(usize, usize)>, num_predictions: usize) -> Self {
        let mut indicators = vec![0u8; num_predictions];
        for &(p, _) in &pairs {
            indicators[p] = 1;
        }
        Self { pairs, indicators }
    }

    pub fn empty(num_predictions: usize) -> Self {
        Self::from_pairs(Vec::new(), num_predictions)
    }
}

/// Matching cost of one prediction against one ground-truth mask.
pub fn pair_cost(pred_mask: &SoftMask, pred_score: f64, gt: &BinaryMask, weights: &CostWeights) -> Result<f64> {
    ensure_same_dims(gt.dims(), pred_mask.dims())?;
    let target = gt.to_soft();
    Ok(pair_cost_raw(pred_mask.values(), pred_score, target.values(), weights))
}

fn pair_cost_raw(pred: &[f64], score: f64, target: &[f64], weights: &CostWeights) -> f64 {
    let obj = -(score.max(PROB_EPS)).ln();
    let mut cost = weights.w_obj * obj;
    if weights.w_bce != 0.0 {
        cost += weights.w_bce * bce_kernel(pred, target, 0.0, None, None);
    }
    if weights.w_dice != 0.0 {
        cost += weights.w_dice * dice_kernel(pred, target, 0.0, None, None);
    }
    cost
}

/// Minimum-cost assignment of every column (ground truth) to a distinct row
/// (prediction). Returns `(row, col)` pairs sorted by column.
///
/// Rectangular inputs are padded to square with [`PAD_COST`]; pairs touching
/// padding are dropped, so when `rows < cols` only `rows` columns are assigned.
pub fn hungarian(cost: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    if cost.rows == 0 || cost.cols == 0 {
        return Err(Error::Empty("cost matrix has an empty dimension"));
    }
    let n = cost.rows.max(cost.cols);
    // Internally rows are ground truths and columns predictions, so that the
    // column scan below resolves ties toward the lowest prediction index.
    let a = |gt: usize, pred: usize| -> f64 {
        if gt < cost.cols && pred < cost.rows {
            cost.get(pred, gt)
        } else {
            PAD_COST
        }
    };

    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter_map(|j| {
            let (gt, pred) = (owner[j] - 1, j - 1);
            (gt < cost.cols && pred < cost.rows).then_some((pred, gt))
        })
        .collect();
    pairs.sort_by_key(|&(_, gt)| gt);
    Ok(pairs)
}

/// Builds the prediction-by-annotation cost matrix.
///
/// Same values as [`pair_cost`] up to summation order. Per-prediction log
/// terms are computed once; each pair then only visits its gt pixels.
pub fn cost_matrix(pred: &PredictionSet, annotations: &[BinaryMask], weights: &CostWeights) -> Result<CostMatrix> {
    let n = pred.masks.len();
    let k = annotations.len();
    let gt_pixels: Vec<Vec<usize>> = annotations
        .iter()
        .map(|g| {
            ensure_same_dims(pred.foreground.dims(), g.dims())?;
            Ok(g.bits().iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect())
        })
        .collect::<Result<_>>()?;
    let mut on_any = vec![false; pred.foreground.len()];
    for &i in gt_pixels.iter().flatten() {
        on_any[i] = true;
    }
    let mut entries = Vec::with_capacity(n * k);
    let mut gap = vec![0.0; pred.foreground.len()];
    for (mask, &score) in pred.masks.iter().zip(&pred.scores) {
        let values = mask.values();
        let len = values.len() as f64;
        // bce = (sum of -ln(1-p) + sum over gt of [ln(1-p) - ln p]) / len;
        // the first sum is taken as logs of chunked products, each factor >= PROB_EPS
        let mut neg_lq = 0.0;
        for chunk in values.chunks(16) {
            let prod: f64 = chunk.iter().map(|&v| 1.0 - clamp_prob(v)).product();
            neg_lq -= prod.ln();
        }
        let sum_p: f64 = values.iter().sum();
        for (i, &v) in values.iter().enumerate() {
            if on_any[i] {
                let p = clamp_prob(v);
                gap[i] = ((1.0 - p) / p).ln();
            }
        }
        let obj = weights.w_obj * -(score.max(PROB_EPS)).ln();
        for pixels in &gt_pixels {
            let mut cost = obj;
            if weights.w_bce != 0.0 {
                let on: f64 = pixels.iter().map(|&i| gap[i]).sum();
                cost += weights.w_bce * (neg_lq + on) / len;
            }
            if weights.w_dice != 0.0 {
                let inter: f64 = pixels.iter().map(|&i| values[i]).sum();
                let num = 2.0 * inter + DICE_SMOOTH;
                let den = sum_p + pixels.len() as f64 + DICE_SMOOTH;
                cost += weights.w_dice * (1.0 - num / den);
            }
            entries.push(cost);
        }
    }
    CostMatrix::new(n, k, entries)
}

/// Matches the prediction slots to the annotations and derives the indicator vector.
pub fn match_predictions(
    pred: &PredictionSet,
    annotations: &[BinaryMask],
    weights: &CostWeights,
) -> Result<MatchResult> {
    let n = pred.masks.len();
    let k = annotations.len();
    if k > n {
        return Err(Error::TooManyInstances { gts: k, queries: n });
    }
    if k == 0 {
        return Ok(MatchResult::empty(n));
    }
    let cost = cost_matrix(pred, annotations, weights)?;
    Ok(MatchResult::from_pairs(hungarian(&cost)?, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{bce, dice};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over injective maps of columns into rows.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, col: usize, used: &mut [bool], acc: f64, best: &mut f64) {
            if col == cost.cols() {
                *best = best.min(acc);
                return;
            }
            for r in 0..cost.rows() {
                if !used[r] {
                    used[r] = true;
                    rec(cost, col + 1, used, acc + cost.get(r, col), best);
                    used[r] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.rows()], 0.0, &mut best);
        best
    }

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> CostMatrix {
        CostMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect()).unwrap()
    }

    fn check_assignment(cost: &CostMatrix, pairs: &[(usize, usize)]) {
        assert_eq!(pairs.len(), cost.rows().min(cost.cols()));
        let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(rows.len(), pairs.len());
        assert_eq!(cols.len(), pairs.len());
    }

    #[test]
    fn diagonal_matrix_gives_identity() {
        let cost = CostMatrix::from_rows(&[
            vec![0.01, 9.0, 9.0],
            vec![9.0, 0.01, 9.0],
            vec![9.0, 9.0, 0.01],
        ])
        .unwrap();
        assert_eq!(hungarian(&cost).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn single_cell() {
        let cost = CostMatrix::from_rows(&[vec![3.5]]).unwrap();
        assert_eq!(hungarian(&cost).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        let cost = CostMatrix::new(0, 0, vec![]).unwrap();
        assert!(matches!(hungarian(&cost), Err(Error::Empty(_))));
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn ties_prefer_lowest_prediction_index() {
        let cost = CostMatrix::new(4, 2, vec![1.0; 8]).unwrap();
        assert_eq!(hungarian(&cost).unwrap(), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn random_square_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..200 {
            let cost = random_matrix(&mut rng, 5, 5);
            let pairs = hungarian(&cost).unwrap();
            check_assignment(&cost, &pairs);
            assert!(cost.total(&pairs) <= brute_force(&cost) + 1e-12);
        }
    }

    #[test]
    fn rectangular_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let rows = rng.gen_range(1..7);
            let cols = rng.gen_range(1..=rows);
            let cost = random_matrix(&mut rng, rows, cols);
            let pairs = hungarian(&cost).unwrap();
            check_assignment(&cost, &pairs);
            assert!(cost.total(&pairs) <= brute_force(&cost) + 1e-9);
        }
    }

    #[test]
    fn cost_matrix_agrees_with_pair_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (h, w) = (9, 7);
            let masks: Vec<SoftMask> = (0..4)
                .map(|_| SoftMask::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
                .collect();
            let scores: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let gts: Vec<BinaryMask> = (0..3).map(|_| BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.3))).collect();
            let pred = PredictionSet {
                masks: masks.clone(),
                scores: scores.clone(),
                foreground: masks[0].clone(),
            };
            let wts = CostWeights::default();
            let m = cost_matrix(&pred, &gts, &wts).unwrap();
            for i in 0..4 {
                for j in 0..3 {
                    let direct = pair_cost(&masks[i], scores[i], &gts[j], &wts).unwrap();
                    assert!((m.get(i, j) - direct).abs() <= 1e-12 * direct.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn pair_cost_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let gt = BinaryMask::from_fn(6, 6, |_, _| rng.gen_bool(0.3));
        let w = CostWeights::default();
        assert!(pair_cost(&gt.to_soft(), 1.0, &gt, &w).unwrap() < 1e-5);

        let half = SoftMask::uniform(6, 6, 0.5).unwrap();
        let t = gt.to_soft();
        let expected = w.w_obj * std::f64::consts::LN_2
            + w.w_bce * bce(&half, &t).unwrap().value
            + w.w_dice * dice(&half, &t).unwrap().value;
        assert!((pair_cost(&half, 0.5, &gt, &w).unwrap() - expected).abs() < 1e-12);

        let lo = pair_cost(&half, 0.3, &gt, &w).unwrap();
        let hi = pair_cost(&half, 0.31, &gt, &w).unwrap();
        assert!(hi < lo);
        assert!(pair_cost(&half, 0.5, &BinaryMask::zeros(5, 6), &w).is_err());
    }

    fn prediction_from(masks: Vec<SoftMask>, scores: Vec<f64>) -> PredictionSet {
        let (h, w) = masks[0].dims();
        PredictionSet {
            masks,
            scores,
            foreground: SoftMask::uniform(h, w, 0.5).unwrap(),
        }
    }

    #[test]
    fn match_without_instances() {
        let pred = prediction_from(vec![SoftMask::uniform(3, 3, 0.5).unwrap(); 4], vec![0.5; 4]);
        let m = match_predictions(&pred, &[], &CostWeights::default()).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.indicators, vec![0; 4]);
    }

    #[test]
    fn match_pairs_identical_masks() {
        let a = BinaryMask::from_fn(4, 4, |r, _| r < 2);
        let b = BinaryMask::from_fn(4, 4, |r, _| r >= 2);
        let pred = prediction_from(vec![b.to_soft(), a.to_soft()], vec![0.9, 0.9]);
        let m = match_predictions(&pred, &[a, b], &CostWeights::default()).unwrap();
        assert_eq!(m.pairs, vec![(1, 0), (0, 1)]);
        assert_eq!(m.indicators, vec![1, 1]);
    }

    #[test]
    fn match_rejects_too_many_instances() {
        let pred = prediction_from(vec![SoftMask::uniform(2, 2, 0.5).unwrap()], vec![0.5]);
        let gts = vec![BinaryMask::zeros(2, 2), BinaryMask::zeros(2, 2)];
        assert!(matches!(
            match_predictions(&pred, &gts, &CostWeights::default()),
            Err(Error::TooManyInstances { .. })
        ));
    }

    #[test]
    fn match_six_by_three_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let masks: Vec<_> = (0..6)
                .map(|_| SoftMask::new(5, 5, (0..25).map(|_| rng.gen_range(0.01..0.99)).collect()).unwrap())
                .collect();
            let scores: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..0.99)).collect();
            let gts: Vec<_> = (0..3).map(|_| BinaryMask::from_fn(5, 5, |_, _| rng.gen_bool(0.4))).collect();
            let pred = prediction_from(masks, scores);
            let w = CostWeights::default();
            let m = match_predictions(&pred, &gts, &w).unwrap();
            let cost = cost_matrix(&pred, &gts, &w).unwrap();
            assert_eq!(m.pairs.len(), 3);
            assert!(cost.total(&m.pairs) <= brute_force(&cost) + 1e-9);
            for (j, &v) in m.indicators.iter().enumerate() {
                assert_eq!(v == 1, m.pairs.iter().any(|p| p.0 == j));
            }
        }
    }

    proptest! {
        #[test]
        fn row_shift_keeps_assignment(seed in any::<u64>(), n in 2usize..7, row in 0usize..7, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = random_matrix(&mut rng, n, n);
            let row = row % n;
            let mut shifted = cost.entries.clone();
            for c in 0..n {
                shifted[row * n + c] += shift;
            }
            let shifted = CostMatrix::new(n, n, shifted).unwrap();
            prop_assert_eq!(hungarian(&cost).unwrap(), hungarian(&shifted).unwrap());
        }
    }
}
