//! Teacher-student pseudo-labeling.
//!
//! The teacher is an exponential moving average of the student. Confident
//! teacher masks that overlap no annotation by more than `epsilon` IoU become
//! extra positive instances for the student.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{binarize, ensure_same_dims, iou, BinaryMask};
use crate::model::{FeatureGrid, PredictionSet, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    pub enabled: bool,
    /// Objectness must be strictly above this to become a proposal.
    pub confidence_threshold: f64,
    /// A proposal is kept when its best IoU against any annotation is at most this.
    pub iou_epsilon: f64,
    pub ema_decay: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            confidence_threshold: 0.8,
            iou_epsilon: 0.2,
            ema_decay: 0.999,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "confidence threshold must lie in (0, 1), got {}",
                self.confidence_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.iou_epsilon) {
            return Err(Error::invalid(format!("iou epsilon must lie in [0, 1], got {}", self.iou_epsilon)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid(format!("ema decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// EMA shadow of the student, same parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub model: ToyModel,
    pub decay: f64,
}

impl TeacherState {
    pub fn new(student: &ToyModel, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("ema decay must lie in [0, 1], got {decay}")));
        }
        Ok(Self {
            model: student.clone(),
            decay,
        })
    }

    pub fn params(&self) -> &[f64] {
        self.model.params()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoProposal {
    pub query: usize,
    pub mask: BinaryMask,
    pub confidence: f64,
    pub accepted: bool,
}

/// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
pub fn ema_update(teacher: &TeacherState, student_params: &[f64]) -> Result<TeacherState> {
    let mut next = teacher.clone();
    ema_update_in_place(&mut next, student_params)?;
    Ok(next)
}

pub fn ema_update_in_place(teacher: &mut TeacherState, student_params: &[f64]) -> Result<()> {
    let decay = teacher.decay;
    let params = teacher.model.params_mut();
    if params.len() != student_params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            actual: student_params.len(),
        });
    }
    for (t, &s) in params.iter_mut().zip(student_params) {
        *t = decay * *t + (1.0 - decay) * s;
    }
    Ok(())
}

/// Keeps queries whose score is strictly above `threshold`, masks binarized at 0.5.
pub fn filter_by_confidence(pred: &PredictionSet, threshold: f64) -> Result<Vec<PseudoProposal>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("confidence threshold must lie in (0, 1), got {threshold}")));
    }
    pred.scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(j, &s)| {
            Ok(PseudoProposal {
                query: j,
                mask: binarize(&pred.masks[j], 0.5)?,
                confidence: s,
                accepted: false,
            })
        })
        .collect()
}

/// Best IoU of `mask` against any of `gts`; 0 with no gts.
pub fn max_iou(mask: &BinaryMask, gts: &[BinaryMask]) -> Result<f64> {
    gts.iter().try_fold(0.0f64, |best, g| Ok(best.max(iou(mask, g)?)))
}

/// Returns the accepted proposals, each flagged `accepted`.
pub fn filter_by_iou(proposals: &[PseudoProposal], gts: &[BinaryMask], epsilon: f64) -> Result<Vec<PseudoProposal>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("iou epsilon must lie in [0, 1], got {epsilon}")));
    }
    let mut out = Vec::new();
    for p in proposals {
        if max_iou(&p.mask, gts)? <= epsilon {
            out.push(PseudoProposal {
                accepted: true,
                ..p.clone()
            });
        }
    }
    Ok(out)
}

/// Ground truth first, then accepted pseudo masks in proposal order.
pub fn merge(gts: &[BinaryMask], accepted: &[PseudoProposal]) -> Result<Vec<BinaryMask>> {
    let mut out = gts.to_vec();
    if let Some(first) = gts.first().or(accepted.first().map(|p| &p.mask)) {
        let dims = first.dims();
        for m in gts.iter().chain(accepted.iter().map(|p| &p.mask)) {
            ensure_same_dims(dims, m.dims())?;
        }
    }
    out.extend(accepted.iter().filter(|p| p.accepted).map(|p| p.mask.clone()));
    Ok(out)
}

/// Teacher forward, confidence filter, IoU filter, merge.
pub fn generate_pseudo_labels(
    teacher: &TeacherState,
    features: &FeatureGrid,
    gts: &[BinaryMask],
    confidence_threshold: f64,
    epsilon: f64,
) -> Result<Vec<BinaryMask>> {
    let pred = teacher.model.forward(features)?;
    let proposals = filter_by_confidence(&pred, confidence_threshold)?;
    let accepted = filter_by_iou(&proposals, gts, epsilon)?;
    merge(gts, &accepted)
}
