//! Fixtures shared by the criterion benchmarks in `benches/`.

use wavesf_core::data::{load_split, DataConfig, Split};
use wavesf_core::model::take_frames;
use wavesf_core::{build_model, ModelConfig, ParameterStore, Tensor, Forecaster};

/// A freshly initialized model with its training split and one
/// `(inputs, targets)` batch of `batch` sequences.
pub struct Fixture {
    pub model: Forecaster,
    pub params: ParameterStore<f32>,
    pub data: Tensor<f32>,
    pub inputs: Tensor<f32>,
    pub targets: Tensor<f32>,
}

pub fn fixture(config: ModelConfig, batch: usize) -> Fixture {
    let mut data_cfg = DataConfig::for_model(&config);
    data_cfg.n_train = batch;
    let data = load_split::<f32>(&data_cfg, &config, Split::Train).expect("synthetic data");
    let inputs = take_frames(&data, 0, config.t_in).expect("input frames");
    let targets = take_frames(&data, config.t_in, config.t_out).expect("target frames");
    let (model, params) = build_model::<f32>(config).expect("valid config");
    Fixture {
        model,
        params,
        data,
        inputs,
        targets,
    }
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::normal(shape, 0.0, 1.0, seed).expect("valid shape")
}
