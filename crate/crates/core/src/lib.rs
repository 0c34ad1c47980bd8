//! Wavelet-latent spatiotemporal forecasting on a small reverse-mode
//! autodiff engine.

pub mod autodiff;
pub mod checks;
pub mod codec;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod translator;
pub mod wavelet;

pub use autodiff::{Activation, Gradients, Graph, PoolKind, Var};
pub use config::{ModelConfig, Preset, RunConfig, Variant, PRESETS};
pub use data::{DataConfig, SequenceBatch, Split};
pub use error::{Error, Result};
pub use layers::ForwardCtx;
pub use metrics::MetricReport;
pub use model::{build_model, ModelCost, VariantInventory, Forecaster};
pub use params::{ParamKind, ParameterStore};
pub use tensor::{DType, Element, Init, Tensor};
pub use train::{Checkpoint, OptimizerState, ScheduleKind, TrainConfig, TrainState};
