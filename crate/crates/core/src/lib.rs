//! Open-world instance segmentation training laboratory.
//!
//! A linear three-branch head over synthetic per-pixel features, trained with
//! a set-prediction objective plus a cross-task consistency term between the
//! foreground branch and a soft union of the instance masks. Every gradient
//! is analytic and checked against finite differences.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod mask;
pub mod matching;
pub mod model;
pub mod optim;
pub mod pseudo_label;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{evaluate, evaluate_detections, evaluate_oracle, Detection, EvalConfig, EvalReport};
pub use gradcheck::GradCheckSuite;
pub use losses::{LossBreakdown, LossOptions, LossTerms, LossWeights, StopGradient};
pub use mask::{binarize, iou, soft_union_estimate, union_foreground, BinaryMask, RleMask, SoftMask, SoftUnionMode};
pub use matching::{hungarian, match_predictions, CostMatrix, CostWeights, MatchResult};
pub use model::{FeatureGrid, InitConfig, PredictionSet, ToyModel};
pub use pseudo_label::{PseudoLabelConfig, PseudoProposal, TeacherState};
pub use synth::{Dataset, DatasetManifest, DropoutPolicy, Sample, SceneSpec, ShapeKind};
pub use trainer::{GradCheckOptions, GradCheckReport, History, TrainConfig, TrainOutcome};
