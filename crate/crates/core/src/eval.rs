//! Class-agnostic COCO-style AP/AR.
//!
//! Detections are matched greedily per image in descending score order.
//! Precision/recall curves are built over detections pooled from all images,
//! precision is made monotone from the right and sampled at 101 recall points.
//! Size buckets follow the COCO ignore rules: ground truths outside the bucket
//! are ignored, as are detections matched to them and unmatched detections
//! whose own area falls outside the bucket.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{binarize, ensure_same_dims, iou, BinaryMask};
use crate::model::ToyModel;
use crate::synth::Sample;

/// Reported when a bucket holds no ground truth.
pub const EMPTY_BUCKET: f64 = -1.0;
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub mask: BinaryMask,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_detections: [usize; 3],
    /// Areas strictly below this are small.
    pub small_area: usize,
    /// Areas strictly above this are large.
    pub large_area: usize,
    /// Soft masks are binarized with `> mask_threshold`.
    pub mask_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_detections: [1, 10, 100],
            small_area: 8 * 8,
            large_area: 24 * 24,
            mask_threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() {
            return Err(Error::invalid("at least one IoU threshold is required"));
        }
        if t.iter().any(|&v| !(v > 0.0 && v < 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("IoU thresholds must be strictly increasing in (0, 1)"));
        }
        if self.max_detections.contains(&0) || self.max_detections.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("max_detections must be positive and non-decreasing"));
        }
        if self.small_area > self.large_area {
            return Err(Error::invalid("small_area must not exceed large_area"));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::invalid("mask_threshold must lie in (0, 1)"));
        }
        Ok(())
    }

    fn budget(&self) -> usize {
        self.max_detections[2]
    }

    fn ranges(&self) -> [AreaRange; 4] {
        [
            AreaRange::All,
            AreaRange::Between(0, self.small_area.saturating_sub(1)),
            AreaRange::Between(self.small_area, self.large_area),
            AreaRange::Between(self.large_area + 1, usize::MAX),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "AP100")]
    pub ap100: f64,
    #[serde(rename = "APs")]
    pub ap_small: f64,
    #[serde(rename = "APm")]
    pub ap_medium: f64,
    #[serde(rename = "APl")]
    pub ap_large: f64,
    #[serde(rename = "AR100")]
    pub ar100: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let fmt = |v: f64| if v == EMPTY_BUCKET { "   n/a".to_string() } else { format!("{:6.2}", 100.0 * v) };
        writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "AP100", "APs", "APm", "APl", "AR100", "AR10", "AR1").unwrap();
        writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            fmt(self.ap100),
            fmt(self.ap_small),
            fmt(self.ap_medium),
            fmt(self.ap_large),
            fmt(self.ar100),
            fmt(self.ar10),
            fmt(self.ar1)
        )
        .unwrap();
        writeln!(
            s,
            "images {}  ground truths {}  detections {}",
            self.images, self.ground_truths, self.detections
        )
        .unwrap();
        s
    }

    /// Fields that are not the empty-bucket sentinel all lie in [0, 1].
    pub fn is_well_formed(&self) -> bool {
        [self.ap100, self.ap_small, self.ap_medium, self.ap_large, self.ar100, self.ar10, self.ar1]
            .iter()
            .all(|&v| v == EMPTY_BUCKET || (0.0..=1.0).contains(&v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AreaRange {
    All,
    /// Inclusive bounds.
    Between(usize, usize),
}

impl AreaRange {
    fn contains(self, area: usize) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Between(lo, hi) => (lo..=hi).contains(&area),
        }
    }
}

/// Result of greedy matching on one image, in score order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchFlags {
    /// Indices into the detection list, descending score, truncated to the budget.
    pub order: Vec<usize>,
    /// Whether `order[k]` is a true positive.
    pub true_positive: Vec<bool>,
    /// Which ground truth `order[k]` matched.
    pub matched_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

/// Stable descending-score order; ties keep insertion order.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Per-image data reused across thresholds and buckets.
struct ImageEval {
    scores: Vec<f64>,
    det_areas: Vec<usize>,
    gt_areas: Vec<usize>,
    /// `ious[d][g]` for detections in score order.
    ious: Vec<Vec<f64>>,
}

impl ImageEval {
    fn new(dets: &[Detection], gts: &[BinaryMask], budget: usize) -> Result<Self> {
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let mut order = score_order(&scores);
        order.truncate(budget);
        let ious = order
            .iter()
            .map(|&d| gts.iter().map(|g| iou(&dets[d].mask, g)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scores: order.iter().map(|&d| scores[d]).collect(),
            det_areas: order.iter().map(|&d| dets[d].mask.area()).collect(),
            gt_areas: gts.iter().map(|g| g.area()).collect(),
            ious,
        })
    }

    /// Greedy matching of the first `max_dets` detections.
    /// Returns per-detection `(matched gt, ignored)` and per-gt ignore flags.
    fn greedy(&self, threshold: f64, max_dets: usize, range: AreaRange) -> (Vec<(Option<usize>, bool)>, Vec<bool>) {
        let gt_ignored: Vec<bool> = self.gt_areas.iter().map(|&a| !range.contains(a)).collect();
        // non-ignored ground truths are preferred
        let mut gt_order: Vec<usize> = (0..self.gt_areas.len()).collect();
        gt_order.sort_by_key(|&g| gt_ignored[g]);
        let mut taken = vec![false; self.gt_areas.len()];
        let n = self.scores.len().min(max_dets);
        let mut out = Vec::with_capacity(n);
        for d in 0..n {
            let mut best: Option<usize> = None;
            let mut best_iou = threshold;
            for &g in &gt_order {
                if taken[g] {
                    continue;
                }
                if let Some(b) = best {
                    if !gt_ignored[b] && gt_ignored[g] {
                        break;
                    }
                }
                let v = self.ious[d][g];
                if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best_iou = v;
                    best = Some(g);
                }
            }
            let ignored = match best {
                Some(g) => {
                    taken[g] = true;
                    gt_ignored[g]
                }
                None => !range.contains(self.det_areas[d]),
            };
            out.push((best, ignored));
        }
        (out, gt_ignored)
    }
}

/// Greedy matching of one image's detections against its ground truths.
pub fn match_detections(dets: &[Detection], gts: &[BinaryMask], iou_threshold: f64, max_dets: usize) -> Result<MatchFlags> {
    if let Some(first) = gts.first().or(dets.first().map(|d| &d.mask)) {
        for m in gts.iter().chain(dets.iter().map(|d| &d.mask)) {
            ensure_same_dims(first.dims(), m.dims())?;
        }
    }
    let img = ImageEval::new(dets, gts, max_dets)?;
    let (flags, _) = img.greedy(iou_threshold, max_dets, AreaRange::All);
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut order = score_order(&scores);
    order.truncate(max_dets);
    let mut gt_matched = vec![false; gts.len()];
    for (g, _) in &flags {
        if let Some(g) = g {
            gt_matched[*g] = true;
        }
    }
    Ok(MatchFlags {
        order,
        true_positive: flags.iter().map(|(g, _)| g.is_some()).collect(),
        matched_gt: flags.iter().map(|(g, _)| *g).collect(),
        gt_matched,
    })
}

/// 101-point interpolated AP from pooled `(score, true_positive)` pairs.
/// Zero when there are no ground truths.
pub fn average_precision(stream: &[(f64, bool)], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let scores: Vec<f64> = stream.iter().map(|s| s.0).collect();
    let order = score_order(&scores);
    let flags: Vec<bool> = order.iter().map(|&i| stream[i].1).collect();
    interpolated_ap(&flags, num_gts)
}

/// `flags` are already in rank order.
fn interpolated_ap(flags: &[bool], num_gts: usize) -> f64 {
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gts as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Fraction of ground truths matched, zero when there are none.
pub fn average_recall(matched: usize, num_gts: usize) -> f64 {
    if num_gts == 0 {
        0.0
    } else {
        matched as f64 / num_gts as f64
    }
}

/// `(AP, recall)` at one threshold, budget and bucket; sentinel when the bucket is empty.
fn accumulate(images: &[ImageEval], threshold: f64, max_dets: usize, range: AreaRange) -> (f64, f64) {
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    let mut npig = 0usize;
    for img in images {
        let (flags, gt_ignored) = img.greedy(threshold, max_dets, range);
        npig += gt_ignored.iter().filter(|&&i| !i).count();
        for (d, (g, ignored)) in flags.into_iter().enumerate() {
            if !ignored {
                pooled.push((img.scores[d], g.is_some()));
            }
        }
    }
    if npig == 0 {
        return (EMPTY_BUCKET, EMPTY_BUCKET);
    }
    let matched = pooled.iter().filter(|p| p.1).count();
    (average_precision(&pooled, npig), average_recall(matched, npig))
}

fn mean_over_thresholds(images: &[ImageEval], cfg: &EvalConfig, max_dets: usize, range: AreaRange) -> (f64, f64) {
    let per: Vec<(f64, f64)> = cfg
        .iou_thresholds
        .iter()
        .map(|&t| accumulate(images, t, max_dets, range))
        .collect();
    if per[0].0 == EMPTY_BUCKET {
        return (EMPTY_BUCKET, EMPTY_BUCKET);
    }
    let n = per.len() as f64;
    (per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().map(|p| p.1).sum::<f64>() / n)
}

/// Scores per-image detections against per-image ground truths.
pub fn evaluate_detections(images: &[(Vec<Detection>, Vec<BinaryMask>)], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let prepared: Vec<ImageEval> = images
        .par_iter()
        .map(|(dets, gts)| {
            if let Some(first) = gts.first().or(dets.first().map(|d| &d.mask)) {
                for m in gts.iter().chain(dets.iter().map(|d| &d.mask)) {
                    ensure_same_dims(first.dims(), m.dims())?;
                }
            }
            if dets.iter().any(|d| !(0.0..=1.0).contains(&d.score)) {
                return Err(Error::invalid("detection scores must lie in [0, 1]"));
            }
            ImageEval::new(dets, gts, cfg.budget())
        })
        .collect::<Result<_>>()?;
    let gts: usize = images.iter().map(|i| i.1.len()).sum();
    let [m1, m10, m100] = cfg.max_detections;
    let [all, small, medium, large] = cfg.ranges();
    let (ap100, ar100) = mean_over_thresholds(&prepared, cfg, m100, all);
    let (_, ar10) = mean_over_thresholds(&prepared, cfg, m10, all);
    let (_, ar1) = mean_over_thresholds(&prepared, cfg, m1, all);
    let clamp_empty = |v: f64| if v == EMPTY_BUCKET { 0.0 } else { v };
    Ok(EvalReport {
        ap100: clamp_empty(ap100),
        ap_small: mean_over_thresholds(&prepared, cfg, m100, small).0,
        ap_medium: mean_over_thresholds(&prepared, cfg, m100, medium).0,
        ap_large: mean_over_thresholds(&prepared, cfg, m100, large).0,
        ar100: clamp_empty(ar100),
        ar10: clamp_empty(ar10),
        ar1: clamp_empty(ar1),
        images: images.len(),
        ground_truths: gts,
        detections: prepared.iter().map(|p| p.scores.len()).sum(),
    })
}

/// Inference output: binarized masks and objectness scores. The foreground branch is dropped.
pub fn detect(model: &ToyModel, sample: &Sample, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let pred = model.forward(&sample.features)?;
    let mut dets = pred
        .masks
        .iter()
        .zip(&pred.scores)
        .map(|(m, &s)| {
            Ok(Detection {
                mask: binarize(m, cfg.mask_threshold)?,
                score: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let order = score_order(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
    let mut sorted: Vec<Detection> = order.iter().map(|&i| dets[i].clone()).collect();
    sorted.truncate(cfg.budget());
    dets = sorted;
    Ok(dets)
}

/// Evaluates a model against the dense annotations of every sample.
pub fn evaluate(model: &ToyModel, samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let images = samples
        .par_iter()
        .map(|s| Ok((detect(model, s, cfg)?, s.full_masks())))
        .collect::<Result<Vec<_>>>()?;
    evaluate_detections(&images, cfg)
}

/// Self-test path: every dense annotation becomes a detection with score 1.
pub fn evaluate_oracle(samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    let images: Vec<_> = samples
        .iter()
        .map(|s| {
            let gts = s.full_masks();
            let dets = gts.iter().map(|g| Detection { mask: g.clone(), score: 1.0 }).collect();
            (dets, gts)
        })
        .collect();
    evaluate_detections(&images, cfg)
}
