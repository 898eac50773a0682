//! Fully- and semi-supervised training loops over the toy model.
//!
//! One loop drives both regimes. Each iteration draws one homogeneous batch,
//! labeled or unlabeled, from a deterministic per-set epoch shuffle. Per-sample
//! gradients are computed in parallel and summed in batch order, so results do
//! not depend on thread scheduling.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossOptions, LossTerms, LossWeights, StopGradient, Supervision};
use crate::mask::{union_foreground, BinaryMask, SoftUnionMode};
use crate::matching::{match_predictions, CostWeights, MatchResult};
use crate::model::{FeatureGrid, InitConfig, PredictionSet, ToyModel};
use crate::optim::{adamw_step, AdamState, StepSchedule};
use crate::pseudo_label::{ema_update_in_place, generate_pseudo_labels, PseudoLabelConfig, TeacherState};
use crate::synth::{cutout_features, Sample, FEATURE_CHANNELS};

pub const CHECKPOINT_FORMAT: &str = "owis-lab.model.v1";
pub const HISTORY_HEADER: &str = "iteration,mask_loss,foreground_loss,consistency_loss,objectness_loss,total,batch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Labeled-only iterations before unlabeled data joins. `None` means 20% of `iterations`.
    pub warmup_iterations: Option<usize>,
    pub weights: LossWeights,
    pub seed: u64,
    pub soft_union_mode: SoftUnionMode,
    pub stop_gradient: StopGradient,
    pub cost_weights: CostWeights,
    pub num_queries: usize,
    pub init: InitConfig,
    pub cutout: bool,
    pub pseudo_label: PseudoLabelConfig,
    pub schedule: StepSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.05,
            iterations: 2000,
            batch_size: 8,
            warmup_iterations: None,
            weights: LossWeights::default(),
            seed: 0,
            soft_union_mode: SoftUnionMode::default(),
            stop_gradient: StopGradient::default(),
            cost_weights: CostWeights::default(),
            num_queries: 100,
            init: InitConfig::default(),
            cutout: true,
            pseudo_label: PseudoLabelConfig::default(),
            schedule: StepSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.num_queries == 0 {
            return Err(Error::invalid("num_queries must be positive"));
        }
        if let Some(w) = self.warmup_iterations {
            if w > self.iterations {
                return Err(Error::invalid(format!(
                    "warmup_iterations ({w}) exceeds iterations ({})",
                    self.iterations
                )));
            }
        }
        if !(self.init.scale >= 0.0 && self.init.scale.is_finite() && self.init.mask_bias.is_finite()) {
            return Err(Error::invalid("init scale must be finite and non-negative"));
        }
        self.weights.validate()?;
        self.pseudo_label.validate()?;
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_iterations.unwrap_or(self.iterations / 5)
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            weights: self.weights,
            soft_union_mode: self.soft_union_mode,
            stop_gradient: self.stop_gradient,
        }
    }

    pub fn initial_model(&self, dim: usize) -> ToyModel {
        ToyModel::init(self.num_queries, dim, self.seed, &self.init)
    }
}

/// Loss and parameter gradient for one image.
///
/// `targets` is `None` for unlabeled images. Labeled images are matched
/// against `targets` on every call.
pub fn loss_and_grad_raw(
    model: &ToyModel,
    features: &FeatureGrid,
    targets: Option<&[BinaryMask]>,
    options: &LossOptions,
    cost_weights: &CostWeights,
) -> Result<LossBreakdown> {
    let pred = model.forward(features)?;
    let matching = match targets {
        Some(t) => Some(match_predictions(&pred, t, cost_weights)?),
        None => None,
    };
    loss_for_prediction(model, features, &pred, targets, matching.as_ref(), options)
}

/// Same as [`loss_and_grad_raw`] with the assignment held fixed.
pub fn loss_with_matching(
    model: &ToyModel,
    features: &FeatureGrid,
    targets: Option<&[BinaryMask]>,
    matching: Option<&MatchResult>,
    options: &LossOptions,
) -> Result<LossBreakdown> {
    let pred = model.forward(features)?;
    loss_for_prediction(model, features, &pred, targets, matching, options)
}

fn loss_for_prediction(
    model: &ToyModel,
    features: &FeatureGrid,
    pred: &PredictionSet,
    targets: Option<&[BinaryMask]>,
    matching: Option<&MatchResult>,
    options: &LossOptions,
) -> Result<LossBreakdown> {
    let dims = (features.height, features.width);
    let (terms, pgrad) = match (targets, matching) {
        (Some(t), Some(m)) => {
            let fg = union_foreground(t, dims)?;
            let sup = Supervision {
                matching: m,
                annotations: t,
                foreground: &fg,
            };
            total_loss(pred, Some(sup), true, options)?
        }
        (Some(_), None) => return Err(Error::invalid("labeled image needs a matching")),
        (None, _) => total_loss(pred, None, false, options)?,
    };
    let gradient = model.backward(features, pred, &pgrad)?;
    Ok(LossBreakdown { terms, gradient })
}

/// Loss and gradient for a sample as the trainer sees it.
pub fn loss_and_grad(model: &ToyModel, sample: &Sample, config: &TrainConfig) -> Result<LossBreakdown> {
    let targets = sample.training_masks();
    loss_and_grad_raw(
        model,
        &sample.features,
        sample.labeled.then_some(targets.as_slice()),
        &config.loss_options(),
        &config.cost_weights,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Labeled,
    Unlabeled,
}

impl BatchKind {
    pub fn name(self) -> &'static str {
        match self {
            BatchKind::Labeled => "labeled",
            BatchKind::Unlabeled => "unlabeled",
        }
    }
}

/// Batch-mean loss terms of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub terms: LossTerms,
    pub batch: BatchKind,
    /// Pseudo masks appended to the batch's targets.
    pub pseudo_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let t = &r.terms;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration,
                t.mask_loss,
                t.foreground_loss,
                t.consistency_loss,
                t.objectness_loss,
                t.total,
                r.batch.name()
            )
            .expect("writing to a String");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub teacher: TeacherState,
    pub history: History,
}

/// Deterministic epoch-shuffled index stream.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

const LABELED_STREAM: u64 = 1;
const UNLABELED_STREAM: u64 = 2;
const CUTOUT_SEED_SALT: u64 = 0x5eed_c0de;

/// Which set feeds phase-2 iteration `k`, proportional to set sizes.
fn phase_two_kind(k: usize, labeled: usize, unlabeled: usize) -> BatchKind {
    let total = (labeled + unlabeled) as u128;
    let before = (k as u128 * labeled as u128) / total;
    let after = ((k as u128 + 1) * labeled as u128) / total;
    if after > before {
        BatchKind::Labeled
    } else {
        BatchKind::Unlabeled
    }
}

/// Fully supervised training. Pseudo-labels are used when `sparse` is set and enabled in the config.
pub fn train_fully(samples: &[Sample], sparse: bool, config: &TrainConfig) -> Result<TrainOutcome> {
    train(samples, &[], sparse, config)
}

/// Warm-up on `labeled`, then interleave labeled and unlabeled batches.
pub fn train_semi(labeled: &[Sample], unlabeled: &[Sample], sparse: bool, config: &TrainConfig) -> Result<TrainOutcome> {
    train(labeled, unlabeled, sparse, config)
}

fn train(labeled: &[Sample], unlabeled: &[Sample], sparse: bool, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::Empty("training needs at least one labeled sample"));
    }
    if labeled.iter().any(|s| !s.labeled) || unlabeled.iter().any(|s| s.labeled) {
        return Err(Error::invalid("labeled and unlabeled sets are mixed up"));
    }
    let dim = labeled[0].features.channels;
    let model = config.initial_model(dim);
    train_from(model, labeled, unlabeled, sparse, config, |_, _| {})
}

/// Training loop starting from `model`. `observe` sees every iteration's row and the updated model.
pub fn train_from(
    mut model: ToyModel,
    labeled: &[Sample],
    unlabeled: &[Sample],
    sparse: bool,
    config: &TrainConfig,
    mut observe: impl FnMut(&HistoryRow, &ToyModel),
) -> Result<TrainOutcome> {
    config.validate()?;
    let options = config.loss_options();
    let use_pseudo = sparse && config.pseudo_label.enabled;
    let mut teacher = TeacherState::new(&model, config.pseudo_label.ema_decay)?;
    let mut adam = AdamState::new(model.params().len());
    let mut labeled_sampler = Sampler::new(labeled.len(), config.seed, LABELED_STREAM);
    let mut unlabeled_sampler = Sampler::new(unlabeled.len(), config.seed, UNLABELED_STREAM);
    let warmup = config.warmup();
    let mut history = History::default();

    for it in 0..config.iterations {
        let kind = if it < warmup || unlabeled.is_empty() {
            BatchKind::Labeled
        } else {
            phase_two_kind(it - warmup, labeled.len(), unlabeled.len())
        };
        let batch: Vec<&Sample> = (0..config.batch_size)
            .map(|_| match kind {
                BatchKind::Labeled => &labeled[labeled_sampler.next()],
                BatchKind::Unlabeled => &unlabeled[unlabeled_sampler.next()],
            })
            .collect();

        let per_sample: Vec<(LossBreakdown, usize)> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, sample)| {
                let gts = sample.training_masks();
                let (targets, added) = if kind == BatchKind::Labeled && use_pseudo {
                    let cfg = &config.pseudo_label;
                    let mut merged = generate_pseudo_labels(
                        &teacher,
                        &sample.features,
                        &gts,
                        cfg.confidence_threshold,
                        cfg.iou_epsilon,
                    )?;
                    merged.truncate(config.num_queries.max(gts.len()));
                    let added = merged.len() - gts.len();
                    (merged, added)
                } else {
                    (gts, 0)
                };
                let features = if config.cutout {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ CUTOUT_SEED_SALT);
                    rng.set_stream((it * config.batch_size + slot) as u64);
                    let mut f = sample.features.clone();
                    cutout_features(&mut f, &mut rng);
                    std::borrow::Cow::Owned(f)
                } else {
                    std::borrow::Cow::Borrowed(&sample.features)
                };
                let targets = (kind == BatchKind::Labeled).then_some(targets.as_slice());
                let lb = loss_and_grad_raw(&model, &features, targets, &options, &config.cost_weights)?;
                Ok((lb, added))
            })
            .collect::<Result<_>>()?;

        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; model.params().len()];
        let mut sums = [0.0; 5];
        let mut pseudo_labels = 0;
        for (lb, added) in &per_sample {
            for (g, v) in grad.iter_mut().zip(&lb.gradient) {
                *g += v;
            }
            let t = &lb.terms;
            for (s, v) in sums
                .iter_mut()
                .zip([t.mask_loss, t.foreground_loss, t.consistency_loss, t.objectness_loss, t.total])
            {
                *s += v;
            }
            pseudo_labels += added;
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        let terms = LossTerms {
            mask_loss: sums[0] * scale,
            foreground_loss: sums[1] * scale,
            consistency_loss: sums[2] * scale,
            objectness_loss: sums[3] * scale,
            total: sums[4] * scale,
        };
        if !terms.is_finite() {
            return Err(Error::invalid(format!("loss became non-finite at iteration {it}")));
        }

        let lr = config.schedule.lr(config.learning_rate, it, config.iterations);
        adamw_step(model.params_mut(), &grad, &mut adam, lr, config.weight_decay)?;
        ema_update_in_place(&mut teacher, model.params())?;

        let row = HistoryRow {
            iteration: it,
            terms,
            batch: kind,
            pseudo_labels,
        };
        observe(&row, &model);
        history.rows.push(row);
    }
    Ok(TrainOutcome { model, teacher, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tolerance: f64,
    pub abs_floor: f64,
    /// Test hook: perturbs one analytic entry so the check must fail.
    pub corrupt_gradient: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tolerance: 1e-4,
            abs_floor: 1e-6,
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub parameters: usize,
    /// `|a - n| / max(|a|, |n|, abs_floor / rel_tolerance)`, worst over all parameters.
    pub max_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Compares the analytic gradient with central differences over every parameter.
/// The assignment is computed once at the base point and held fixed.
pub fn grad_check(
    model: &ToyModel,
    features: &FeatureGrid,
    targets: Option<&[BinaryMask]>,
    options: &LossOptions,
    cost_weights: &CostWeights,
    check: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let pred = model.forward(features)?;
    let matching = match targets {
        Some(t) => Some(match_predictions(&pred, t, cost_weights)?),
        None => None,
    };
    let base = loss_with_matching(model, features, targets, matching.as_ref(), options)?;
    let mut analytic = base.gradient;
    if check.corrupt_gradient {
        let i = analytic
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        analytic[i] = analytic[i] * 1.01 + 1e-3;
    }

    let numeric: Vec<f64> = (0..analytic.len())
        .into_par_iter()
        .map(|i| {
            let eval = |delta: f64| -> Result<f64> {
                let mut params = model.params().to_vec();
                params[i] += delta;
                let m = ToyModel::from_params(model.num_queries(), model.dim(), params)?;
                Ok(loss_with_matching(&m, features, targets, matching.as_ref(), options)?.terms.total)
            };
            Ok((eval(check.step)? - eval(-check.step)?) / (2.0 * check.step))
        })
        .collect::<Result<_>>()?;

    let floor = check.abs_floor / check.rel_tolerance;
    let mut report = GradCheckReport {
        parameters: analytic.len(),
        max_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        passed: true,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > report.max_error || !err.is_finite() {
            report.max_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    report.passed = report.max_error <= check.rel_tolerance;
    Ok(report)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    num_queries: usize,
    dim: usize,
    layout: Vec<LayoutEntry>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct LayoutEntry {
    name: String,
    offset: usize,
    len: usize,
}

fn layout(n: usize, d: usize) -> Vec<LayoutEntry> {
    vec![
        LayoutEntry {
            name: "query_vectors".into(),
            offset: 0,
            len: n * d,
        },
        LayoutEntry {
            name: "objectness_vectors".into(),
            offset: n * d,
            len: n * d,
        },
        LayoutEntry {
            name: "foreground_vector".into(),
            offset: 2 * n * d,
            len: d,
        },
    ]
}

/// JSON checkpoint with the flat parameter layout spelled out.
pub fn checkpoint_to_string(model: &ToyModel) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        num_queries: model.num_queries(),
        dim: model.dim(),
        layout: layout(model.num_queries(), model.dim()),
        params: model.params().to_vec(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

pub fn checkpoint_from_str(text: &str) -> Result<ToyModel> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::malformed(format!("unsupported checkpoint format {:?}", file.format)));
    }
    if file.layout != layout(file.num_queries, file.dim) {
        return Err(Error::malformed("checkpoint layout does not match its dimensions"));
    }
    ToyModel::from_params(file.num_queries, file.dim, file.params)
}

/// Feature width produced by the scene generator.
pub const DEFAULT_DIM: usize = FEATURE_CHANNELS;
