//! Dataset files, normalization, baselines and the evaluation harness.

pub mod dataset;
pub mod eval;
pub mod models;
pub mod normalize;
pub mod rnn;
pub mod window;

pub use dataset::{load_dataset, parse_dataset, save_dataset};
pub use eval::{eval_prediction, eval_task, FramePredictor, HorizonError, ZeroPredictor};
pub use models::{train_controller, train_model, LatentModel, ModelKind, ModelSpec, TrainedModel};
pub use normalize::{normalize, NormalizationProfile};
