//! Pluggable model construction: baseline learners, calibration refresh
//! and short fine-tuning, committing artifacts to the model store.

pub mod calibrate;
pub mod linear;
pub mod metrics;
pub mod stumps;
mod trainer;

pub use calibrate::{expected_calibration_error, CalibrationMap};
pub use metrics::MetricKind;
pub use trainer::{
    finetune, load_model, recalibrate, train, train_zoo, Hyper, Learner, LearnerParams,
    ResourceCaps, TrainedModel, TrainError, TrainerSpec, MIN_RECALIBRATION_LABELS,
};
