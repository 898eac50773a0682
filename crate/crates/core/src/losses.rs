//! Segmentation loss terms with exact analytic gradients.
//!
//! Every per-pixel loss is a mean over pixels. Gradients are returned with
//! respect to the prediction inputs (probabilities); the trainer chains them
//! through the model's logistic heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{
    clamp_prob, ensure_same_dims, logistic, soft_union_input_derivative,
    soft_union_preactivation, BinaryMask, SoftMask, SoftUnionMode,
};
use crate::matching::MatchResult;
use crate::model::{PredictionGrad, PredictionSet};

/// Smoothing constant of the soft dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Mask term.
    pub alpha: f64,
    /// Foreground term.
    pub beta: f64,
    /// Cross-task consistency term.
    pub gamma: f64,
    /// Objectness term.
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 1.0,
            gamma: 1.0,
            omega: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("omega", self.omega),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("loss weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// The set-prediction baseline: no foreground branch, no consistency.
    pub fn baseline() -> Self {
        Self {
            beta: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }
}

/// Which side of the consistency loss is detached from the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopGradient {
    #[default]
    None,
    /// No gradient reaches the instance masks.
    ThroughGhat,
    /// No gradient reaches the foreground prediction.
    ThroughF,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub soft_union_mode: SoftUnionMode,
    pub stop_gradient: StopGradient,
}

/// The four weighted terms and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub mask_loss: f64,
    pub foreground_loss: f64,
    pub consistency_loss: f64,
    pub objectness_loss: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn combine(weights: &LossWeights, mask: f64, foreground: f64, consistency: f64, objectness: f64) -> Self {
        Self {
            mask_loss: mask,
            foreground_loss: foreground,
            consistency_loss: consistency,
            objectness_loss: objectness,
            total: weights.alpha * mask
                + weights.beta * foreground
                + weights.gamma * consistency
                + weights.omega * objectness,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.mask_loss,
            self.foreground_loss,
            self.consistency_loss,
            self.objectness_loss,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Loss terms plus the gradient over the model's flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub gradient: Vec<f64>,
}

/// A scalar loss with its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

// Slice kernels. Values are unscaled; gradients are accumulated as
// `scale * d(value)/d(input)` into the optional buffers.

pub(crate) fn bce_kernel(
    pred: &[f64],
    target: &[f64],
    scale: f64,
    mut grad_pred: Option<&mut [f64]>,
    mut grad_target: Option<&mut [f64]>,
) -> f64 {
    let n = pred.len() as f64;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        let p = clamp_prob(pred[i]);
        let t = target[i];
        let (lp, lq) = (p.ln(), (1.0 - p).ln());
        sum -= t * lp + (1.0 - t) * lq;
        if let Some(g) = grad_pred.as_deref_mut() {
            g[i] -= scale * (t / p - (1.0 - t) / (1.0 - p)) / n;
        }
        if let Some(g) = grad_target.as_deref_mut() {
            g[i] -= scale * (lp - lq) / n;
        }
    }
    sum / n
}

pub(crate) fn dice_kernel(
    pred: &[f64],
    target: &[f64],
    scale: f64,
    grad_pred: Option<&mut [f64]>,
    grad_target: Option<&mut [f64]>,
) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        sp += p;
        st += t;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + st + DICE_SMOOTH;
    let den2 = den * den;
    if let Some(g) = grad_pred {
        for (gi, &t) in g.iter_mut().zip(target) {
            *gi -= scale * (2.0 * t * den - num) / den2;
        }
    }
    if let Some(g) = grad_target {
        for (gi, &p) in g.iter_mut().zip(pred) {
            *gi -= scale * (2.0 * p * den - num) / den2;
        }
    }
    1.0 - num / den
}

/// Mean binary cross-entropy of `pred` against a binary or soft `target`.
pub fn bce(pred: &SoftMask, target: &SoftMask) -> Result<LossGrad> {
    ensure_same_dims(target.dims(), pred.dims())?;
    let mut grad = vec![0.0; pred.len()];
    let value = bce_kernel(pred.values(), target.values(), 1.0, Some(&mut grad), None);
    Ok(LossGrad { value, grad })
}

/// Smoothed soft dice loss.
pub fn dice(pred: &SoftMask, target: &SoftMask) -> Result<LossGrad> {
    ensure_same_dims(target.dims(), pred.dims())?;
    let mut grad = vec![0.0; pred.len()];
    let value = dice_kernel(pred.values(), target.values(), 1.0, Some(&mut grad), None);
    Ok(LossGrad { value, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyGrad {
    pub value: f64,
    pub mask_grads: Vec<Vec<f64>>,
    pub foreground_grad: Vec<f64>,
}

/// `value` is dice + bce of the foreground prediction against the soft
/// union of the instance masks; gradients reach both sides unless stopped.
pub(crate) fn consistency_kernel(
    masks: &[&[f64]],
    foreground: &[f64],
    mode: SoftUnionMode,
    stop: StopGradient,
    scale: f64,
    mask_grads: Option<&mut [Vec<f64>]>,
    foreground_grad: Option<&mut [f64]>,
) -> f64 {
    let pre = soft_union_preactivation(masks, mode);
    let ghat: Vec<f64> = pre.iter().map(|&z| logistic(z)).collect();

    let want_masks = mask_grads.is_some() && stop != StopGradient::ThroughGhat;
    let want_fg = foreground_grad.is_some() && stop != StopGradient::ThroughF;

    let mut d_ghat = if want_masks {
        Some(vec![0.0; ghat.len()])
    } else {
        None
    };
    let fg_buf = if want_fg { foreground_grad } else { None };
    let (fg_a, fg_b) = match fg_buf {
        Some(buf) => {
            let mut tmp = vec![0.0; buf.len()];
            let d = dice_kernel(foreground, &ghat, scale, Some(&mut tmp), d_ghat.as_deref_mut());
            let b = bce_kernel(foreground, &ghat, scale, Some(&mut tmp), d_ghat.as_deref_mut());
            for (o, t) in buf.iter_mut().zip(tmp) {
                *o += t;
            }
            (d, b)
        }
        None => {
            let d = dice_kernel(foreground, &ghat, scale, None, d_ghat.as_deref_mut());
            let b = bce_kernel(foreground, &ghat, scale, None, d_ghat.as_deref_mut());
            (d, b)
        }
    };

    if let (Some(dg), Some(out)) = (d_ghat, mask_grads) {
        for (j, m) in masks.iter().enumerate() {
            let g = &mut out[j];
            for i in 0..m.len() {
                let s = ghat[i] * (1.0 - ghat[i]);
                g[i] += dg[i] * s * soft_union_input_derivative(m[i], mode);
            }
        }
    }
    fg_a + fg_b
}

pub fn consistency_loss(
    pred_masks: &[SoftMask],
    foreground_pred: &SoftMask,
    mode: SoftUnionMode,
    stop: StopGradient,
) -> Result<ConsistencyGrad> {
    if pred_masks.is_empty() {
        return Err(Error::Empty("consistency loss needs at least one instance mask"));
    }
    for m in pred_masks {
        ensure_same_dims(foreground_pred.dims(), m.dims())?;
    }
    let views: Vec<&[f64]> = pred_masks.iter().map(|m| m.values()).collect();
    let mut mask_grads = vec![vec![0.0; foreground_pred.len()]; pred_masks.len()];
    let mut foreground_grad = vec![0.0; foreground_pred.len()];
    let value = consistency_kernel(
        &views,
        foreground_pred.values(),
        mode,
        stop,
        1.0,
        Some(&mut mask_grads),
        Some(&mut foreground_grad),
    );
    Ok(ConsistencyGrad {
        value,
        mask_grads,
        foreground_grad,
    })
}

/// Binary-target bce + dice for one matched pair.
fn pair_kernel(pred: &[f64], target: &[f64], scale: f64, grad: Option<&mut [f64]>) -> f64 {
    match grad {
        Some(g) => {
            bce_kernel(pred, target, scale, Some(&mut *g), None)
                + dice_kernel(pred, target, scale, Some(g), None)
        }
        None => bce_kernel(pred, target, scale, None, None) + dice_kernel(pred, target, scale, None, None),
    }
}

/// Mean over matched pairs of bce + dice. One gradient per pair.
pub fn mask_loss(matched_pairs: &[(&SoftMask, &BinaryMask)]) -> Result<(f64, Vec<Vec<f64>>)> {
    if matched_pairs.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let scale = 1.0 / matched_pairs.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(matched_pairs.len());
    for (pred, gt) in matched_pairs {
        ensure_same_dims(gt.dims(), pred.dims())?;
        let target = gt.to_soft();
        let mut g = vec![0.0; pred.len()];
        total += pair_kernel(pred.values(), target.values(), scale, Some(&mut g));
        grads.push(g);
    }
    Ok((total * scale, grads))
}

/// bce + dice of the foreground prediction against the foreground ground truth.
pub fn foreground_loss(foreground: &SoftMask, target: &BinaryMask) -> Result<LossGrad> {
    ensure_same_dims(target.dims(), foreground.dims())?;
    let t = target.to_soft();
    let mut grad = vec![0.0; foreground.len()];
    let value = pair_kernel(foreground.values(), t.values(), 1.0, Some(&mut grad));
    Ok(LossGrad { value, grad })
}

/// Mean binary cross-entropy of the objectness scores against the match indicators.
pub fn objectness_loss(scores: &[f64], indicators: &[u8]) -> Result<LossGrad> {
    if scores.len() != indicators.len() {
        return Err(Error::LengthMismatch {
            expected: scores.len(),
            actual: indicators.len(),
        });
    }
    if scores.is_empty() {
        return Ok(LossGrad {
            value: 0.0,
            grad: Vec::new(),
        });
    }
    let target: Vec<f64> = indicators.iter().map(|&v| v as f64).collect();
    let mut grad = vec![0.0; scores.len()];
    let value = bce_kernel(scores, &target, 1.0, Some(&mut grad), None);
    Ok(LossGrad { value, grad })
}

/// Ground truth attached to a labeled sample.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub matching: &'a MatchResult,
    pub annotations: &'a [BinaryMask],
    pub foreground: &'a BinaryMask,
}

/// The joint objective for one sample.
///
/// Labeled samples get all four weighted terms. Unlabeled samples get only
/// the consistency term; the others are reported as exactly zero.
pub fn total_loss(
    pred: &PredictionSet,
    supervision: Option<Supervision<'_>>,
    labeled: bool,
    options: &LossOptions,
) -> Result<(LossTerms, PredictionGrad)> {
    let weights = &options.weights;
    let n = pred.masks.len();
    let dims = pred.foreground.dims();
    let pixels = pred.foreground.len();
    for m in &pred.masks {
        ensure_same_dims(dims, m.dims())?;
    }
    if n == 0 {
        return Err(Error::Empty("prediction set has no instance masks"));
    }
    let mut grad = PredictionGrad::zeros(n, pixels);
    let views: Vec<&[f64]> = pred.masks.iter().map(|m| m.values()).collect();

    let (mg, fg) = if weights.gamma > 0.0 {
        (Some(grad.masks.as_mut_slice()), Some(grad.foreground.as_mut_slice()))
    } else {
        (None, None)
    };
    let consistency = consistency_kernel(
        &views,
        pred.foreground.values(),
        options.soft_union_mode,
        options.stop_gradient,
        weights.gamma,
        mg,
        fg,
    );

    if !labeled {
        let terms = LossTerms::combine(weights, 0.0, 0.0, consistency, 0.0);
        return Ok((terms, grad));
    }
    let sup = supervision.ok_or(Error::MissingGroundTruth)?;
    ensure_same_dims(dims, sup.foreground.dims())?;
    if sup.matching.indicators.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: sup.matching.indicators.len(),
        });
    }

    // mask term over matched pairs
    let mut mask_value = 0.0;
    if !sup.matching.pairs.is_empty() {
        let scale = 1.0 / sup.matching.pairs.len() as f64;
        for &(pi, gi) in &sup.matching.pairs {
            let gt = sup
                .annotations
                .get(gi)
                .ok_or_else(|| Error::invalid(format!("match refers to missing annotation {gi}")))?;
            ensure_same_dims(dims, gt.dims())?;
            let target = gt.to_soft();
            let g = if weights.alpha > 0.0 {
                Some(grad.masks[pi].as_mut_slice())
            } else {
                None
            };
            mask_value += pair_kernel(views[pi], target.values(), weights.alpha * scale, g);
        }
        mask_value *= scale;
    }

    let fg_target = sup.foreground.to_soft();
    let fg_grad = if weights.beta > 0.0 {
        Some(grad.foreground.as_mut_slice())
    } else {
        None
    };
    let fg_value = pair_kernel(pred.foreground.values(), fg_target.values(), weights.beta, fg_grad);

    let indicators: Vec<f64> = sup.matching.indicators.iter().map(|&v| v as f64).collect();
    let obj_grad = if weights.omega > 0.0 {
        Some(grad.scores.as_mut_slice())
    } else {
        None
    };
    let obj_value = bce_kernel(&pred.scores, &indicators, weights.omega, obj_grad, None);

    let terms = LossTerms::combine(weights, mask_value, fg_value, consistency, obj_value);
    Ok((terms, grad))
}
