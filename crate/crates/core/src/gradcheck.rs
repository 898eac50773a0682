//! Finite-difference gradient checks over a grid of loss configurations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossOptions, LossWeights, StopGradient};
use crate::mask::SoftUnionMode;
use crate::matching::CostWeights;
use crate::model::{InitConfig, ToyModel};
use crate::synth::{generate_scene, SceneSpec, FEATURE_CHANNELS};
use crate::trainer::{grad_check, GradCheckOptions, GradCheckReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSuite {
    /// Random scene and model draws per configuration.
    pub cases: usize,
    pub height: usize,
    pub width: usize,
    pub num_queries: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub cost_weights: CostWeights,
    pub check: GradCheckOptions,
}

impl Default for GradCheckSuite {
    fn default() -> Self {
        Self {
            cases: 20,
            height: 16,
            width: 16,
            num_queries: 4,
            init_scale: 0.5,
            seed: 0,
            cost_weights: CostWeights::default(),
            check: GradCheckOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub labeled: bool,
    pub options: LossOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub case: &'static str,
    pub labeled: bool,
    pub draw: usize,
    pub instances: usize,
    pub report: GradCheckReport,
}

fn only(alpha: f64, beta: f64, gamma: f64, omega: f64) -> LossWeights {
    LossWeights { alpha, beta, gamma, omega }
}

/// Each term alone and the full loss in both union modes on labeled images; the
/// consistency-only and full losses on unlabeled images. Stop-gradient variants
/// are not gradients of the loss and are left out.
pub fn cases() -> Vec<GradCheckCase> {
    let opts = |weights, soft_union_mode, stop_gradient| LossOptions {
        weights,
        soft_union_mode,
        stop_gradient,
    };
    let full = LossWeights::default();
    let lit = SoftUnionMode::SigmoidOfConfidences;
    let logits = SoftUnionMode::SigmoidOfLogits;
    let none = StopGradient::None;
    let labeled = [
        ("mask", opts(only(1.0, 0.0, 0.0, 0.0), lit, none)),
        ("foreground", opts(only(0.0, 1.0, 0.0, 0.0), lit, none)),
        ("consistency", opts(only(0.0, 0.0, 1.0, 0.0), lit, none)),
        ("consistency_logits", opts(only(0.0, 0.0, 1.0, 0.0), logits, none)),
        ("objectness", opts(only(0.0, 0.0, 0.0, 1.0), lit, none)),
        ("full", opts(full, lit, none)),
        ("full_logits", opts(full, logits, none)),
    ];
    let unlabeled = [
        ("consistency", opts(only(0.0, 0.0, 1.0, 0.0), lit, none)),
        ("consistency_logits", opts(only(0.0, 0.0, 1.0, 0.0), logits, none)),
        ("full", opts(full, lit, none)),
    ];
    labeled
        .into_iter()
        .map(|(name, options)| GradCheckCase { name, labeled: true, options })
        .chain(unlabeled.into_iter().map(|(name, options)| GradCheckCase { name, labeled: false, options }))
        .collect()
}

impl GradCheckSuite {
    pub fn validate(&self) -> Result<()> {
        if self.cases == 0 || self.num_queries == 0 {
            return Err(Error::invalid("gradcheck needs at least one case and one query"));
        }
        if !(self.check.step > 0.0 && self.check.rel_tolerance > 0.0 && self.check.abs_floor >= 0.0) {
            return Err(Error::invalid("gradcheck step and tolerances must be positive"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::invalid("gradcheck init_scale must be finite and non-negative"));
        }
        self.scene().validate()
    }

    pub fn scene(&self) -> SceneSpec {
        let side = self.height.min(self.width) as f64;
        SceneSpec {
            height: self.height,
            width: self.width,
            min_instances: 1,
            max_instances: self.num_queries.clamp(1, 3),
            min_scale: (side / 8.0).max(2.0),
            max_scale: (side / 4.0).max(2.0),
            ..SceneSpec::default()
        }
    }

    /// Runs every case on `cases` independent draws.
    pub fn run(&self) -> Result<Vec<GradCheckResult>> {
        self.validate()?;
        let spec = self.scene();
        let mut out = Vec::new();
        for (c, case) in cases().into_iter().enumerate() {
            for draw in 0..self.cases {
                let seed = self.seed ^ ((c as u64) << 40) ^ draw as u64;
                let sample = generate_scene(seed, &spec)?;
                let init = InitConfig {
                    scale: self.init_scale,
                    mask_bias: 0.0,
                };
                let model = ToyModel::init(self.num_queries, FEATURE_CHANNELS, seed.rotate_left(17), &init);
                let targets = sample.full_masks();
                let report = grad_check(
                    &model,
                    &sample.features,
                    case.labeled.then_some(targets.as_slice()),
                    &case.options,
                    &self.cost_weights,
                    &self.check,
                )?;
                out.push(GradCheckResult {
                    case: case.name,
                    labeled: case.labeled,
                    draw,
                    instances: if case.labeled { targets.len() } else { 0 },
                    report,
                });
            }
        }
        Ok(out)
    }
}
