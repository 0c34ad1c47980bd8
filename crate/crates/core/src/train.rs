//! Adam, learning-rate schedules, the MSE training loop and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Graph;
use crate::config::{ModelConfig, Variant};
use crate::data::{batches_per_epoch, decode_tensor, encode_tensor, epoch_order, gather_batch, make_batches};
use crate::error::{Error, Result};
use crate::layers::{param_seed, ForwardCtx};
use crate::metrics::MetricReport;
use crate::model::Forecaster;
use crate::params::{ParamKind, ParameterStore};
use crate::tensor::{Element, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// One-cycle warmup fraction and divisors of the start and final rates.
pub const ONECYCLE_WARMUP: f64 = 0.3;
pub const ONECYCLE_DIV: f64 = 25.0;
pub const ONECYCLE_FINAL_DIV: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Constant,
    OneCycle,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::OneCycle => "onecycle",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ScheduleKind::Constant, ScheduleKind::OneCycle, ScheduleKind::Cosine]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown schedule `{s}`")))
    }
}

/// Learning rate at `position` of `total` (steps or epochs).
///
/// * onecycle: linear from `lr_max / 25` to `lr_max` over the first 30%,
///   then cosine down to `lr_max / 1e4`;
/// * cosine: `lr_max (1 + cos(pi position / total)) / 2`.
pub fn lr_schedule(kind: ScheduleKind, position: f64, total: f64, lr_max: f64) -> Result<f64> {
    if !(total > 0.0) || !(0.0..=total).contains(&position) {
        return Err(Error::InvalidArgument(format!(
            "schedule position {position} outside [0, {total}]"
        )));
    }
    Ok(match kind {
        ScheduleKind::Constant => lr_max,
        ScheduleKind::Cosine => (lr_max * (1.0 + (std::f64::consts::PI * position / total).cos()) / 2.0).max(0.0),
        ScheduleKind::OneCycle => {
            let warm = ONECYCLE_WARMUP * total;
            let start = lr_max / ONECYCLE_DIV;
            if position < warm {
                start + (lr_max - start) * position / warm
            } else {
                let end = lr_max / ONECYCLE_FINAL_DIV;
                let frac = if total > warm { (position - warm) / (total - warm) } else { 1.0 };
                lr_max - (lr_max - end) * (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0
            }
        }
    })
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Element> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(n, e)| (n.to_string(), Tensor::zeros(e.value.shape())))
                .collect()
        };
        OptimizerState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Non-finite gradients reject the whole step before anything changes.
pub fn adam_step<T: Element>(store: &mut ParameterStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    for (name, e) in store.iter() {
        if !e.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        let m = state.m.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if m.shape() != e.value.shape() {
            return Err(Error::shape("adam_step", m.shape(), e.value.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, e) in store.iter_mut() {
        let m = state.m.get_mut(name).expect("checked above").data_mut();
        let v = state.v.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?.data_mut();
        for (((p, &g), mi), vi) in e.value.data_mut().iter_mut().zip(e.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.as_f64();
            let m_new = ADAM_BETA1 * mi.as_f64() + (1.0 - ADAM_BETA1) * g;
            let v_new = ADAM_BETA2 * vi.as_f64() + (1.0 - ADAM_BETA2) * g * g;
            *mi = T::of_f64(m_new);
            *vi = T::of_f64(v_new);
            let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + ADAM_EPS);
            *p = T::of_f64(p.as_f64() - update);
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Element>(store: &mut ParameterStore<T>, max_norm: f64) -> f64 {
    let norm = store.iter().map(|(_, e)| e.grad.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of_f64(max_norm / norm);
        for (_, e) in store.iter_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Overrides `epochs * batches_per_epoch` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub shuffle_seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 1,
            max_steps: None,
            batch_size: 16,
            schedule: ScheduleKind::Constant,
            shuffle_seed: 0,
            eval_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, n_train: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * batches_per_epoch(n_train, self.batch_size))
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Element> {
    pub params: ParameterStore<T>,
    pub optimizer: OptimizerState<T>,
    /// Completed optimizer steps.
    pub step: usize,
}

impl<T: Element> TrainState<T> {
    pub fn new(params: ParameterStore<T>) -> Self {
        let optimizer = OptimizerState::new(&params);
        TrainState { params, optimizer, step: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Mean squared error of the model on one batch, evaluated without
/// recording gradients for later use.
pub fn batch_loss<T: Element>(model: &Forecaster, params: &ParameterStore<T>, inputs: &Tensor<T>, targets: &Tensor<T>) -> Result<f64> {
    let pred = model.predict(params, inputs, targets.shape()[1])?;
    Ok(crate::metrics::pixel_errors(&pred, targets)?.mse)
}

/// One optimizer step on the batch scheduled for `state.step`. The batch
/// and the DropPath randomness depend only on the step index, so a resumed
/// run replays the uninterrupted trajectory.
pub fn train_step<T: Element>(
    model: &Forecaster,
    state: &mut TrainState<T>,
    dataset: &Tensor<T>,
    cfg: &TrainConfig,
    total_steps: usize,
) -> Result<StepRecord> {
    let mc = model.config();
    let n = dataset.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if mc.t_out != mc.t_in {
        // the loss compares one forward pass against the target window
        return Err(Error::InvalidArgument(format!(
            "training needs t_out == t_in, got {} and {}",
            mc.t_out, mc.t_in
        )));
    }
    let per_epoch = batches_per_epoch(n, cfg.batch_size);
    let (epoch, slot) = (state.step / per_epoch, state.step % per_epoch);
    let order = epoch_order(n, cfg.shuffle_seed, epoch);
    let idx = &order[slot * cfg.batch_size..((slot + 1) * cfg.batch_size).min(n)];
    let batch = gather_batch(dataset, idx, mc.t_in, mc.t_out)?;

    let ctx = ForwardCtx::train(mc.droppath, param_seed(mc.seed, &format!("droppath{}", state.step)));
    let g = Graph::new();
    let x = g.constant(batch.inputs);
    let y = g.constant(batch.targets);
    let loss = model.forward(&g, &state.params, x, &ctx)?.mse(&y)?;
    let loss_value = loss.value().data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {}", state.step)));
    }
    let grads = g.backward(loss)?;
    state.params.zero_grad();
    grads.accumulate_into(&mut state.params)?;
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(&mut state.params, c);
    }
    let lr = lr_schedule(cfg.schedule, state.step as f64, total_steps.max(1) as f64, cfg.lr)?;
    adam_step(&mut state.params, &mut state.optimizer, lr)?;
    let record = StepRecord {
        step: state.step,
        lr,
        loss: loss_value,
    };
    state.step += 1;
    Ok(record)
}

/// Predicts `T_out` frames for every sequence of `dataset` and scores them.
pub fn evaluate<T: Element>(model: &Forecaster, params: &ParameterStore<T>, dataset: &Tensor<T>, batch_size: usize) -> Result<MetricReport> {
    let (preds, targets) = predict_dataset(model, params, dataset, batch_size)?;
    MetricReport::compute(&preds, &targets)
}

/// Predictions and targets for every sequence, in dataset order.
pub fn predict_dataset<T: Element>(
    model: &Forecaster,
    params: &ParameterStore<T>,
    dataset: &Tensor<T>,
    batch_size: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mc = model.config();
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for b in make_batches(dataset, batch_size, mc.t_in, mc.t_out, None, 0)? {
        preds.push(model.predict(params, &b.inputs, mc.t_out)?);
        targets.push(b.targets);
    }
    Ok((concat_batches(&preds)?, concat_batches(&targets)?))
}

fn concat_batches<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<(usize, MetricReport)>,
}

/// Runs from `state.step` to the configured total, evaluating on `eval_set`
/// every `eval_every` steps and after the last one. `on_step` sees every
/// record as it is produced.
pub fn train_loop<T: Element>(
    model: &Forecaster,
    state: &mut TrainState<T>,
    train_set: &Tensor<T>,
    eval_set: Option<&Tensor<T>>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, Option<&MetricReport>),
) -> Result<TrainHistory> {
    let n = train_set.shape().first().copied().unwrap_or(0);
    let total = cfg.total_steps(n);
    let mut history = TrainHistory::default();
    while state.step < total {
        let rec = train_step(model, state, train_set, cfg, total)?;
        let done = state.step;
        let due = done == total || (cfg.eval_every > 0 && done.is_multiple_of(cfg.eval_every));
        let report = match (eval_set, due) {
            (Some(ds), true) => Some(evaluate(model, &state.params, ds, cfg.batch_size)?),
            _ => None,
        };
        on_step(&rec, report.as_ref());
        history.steps.push(rec);
        if let Some(r) = report {
            history.evals.push((done, r));
        }
    }
    Ok(history)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WSFC";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Model configuration, parameters and optimizer state at a step boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element> {
    pub model: ModelConfig,
    pub schedule: ScheduleKind,
    pub state: TrainState<T>,
}

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Real => "real",
        ParamKind::Complex => "complex",
    }
}

impl<T: Element> Checkpoint<T> {
    /// Container layout: `"WSFC" | version u8 | manifest length u32 LE |
    /// manifest (UTF-8 key=value lines) | value, m, v WSFT records per
    /// parameter in manifest order`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = self.model.to_manifest();
        manifest.push_str(&format!(
            "step={}\nschedule={}\nadam_t={}\n",
            self.state.step, self.schedule, self.state.optimizer.t
        ));
        for (name, e) in self.state.params.iter() {
            manifest.push_str(&format!("param={name}:{}\n", kind_name(e.kind)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (name, e) in self.state.params.iter() {
            out.extend(encode_tensor(&e.value));
            out.extend(encode_tensor(&self.state.optimizer.m[name]));
            out.extend(encode_tensor(&self.state.optimizer.v[name]));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |expected| Error::Truncated {
            expected,
            got: bytes.len(),
        };
        if bytes.len() < 9 {
            return Err(truncated(9));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("length checked")) as usize;
        let body = 9 + len;
        if bytes.len() < body {
            return Err(truncated(body));
        }
        let manifest = std::str::from_utf8(&bytes[9..body]).map_err(|e| Error::CorruptManifest(e.to_string()))?;

        let mut fields = BTreeMap::new();
        let mut params = Vec::new();
        for line in manifest.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CorruptManifest(format!("line `{line}`")))?;
            if k == "param" {
                let (name, kind) = v
                    .rsplit_once(':')
                    .ok_or_else(|| Error::CorruptManifest(format!("param `{v}`")))?;
                let kind = match kind {
                    "real" => ParamKind::Real,
                    "complex" => ParamKind::Complex,
                    other => return Err(Error::CorruptManifest(format!("parameter kind `{other}`"))),
                };
                params.push((name.to_string(), kind));
            } else if fields.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::CorruptManifest(format!("duplicate key `{k}`")));
            }
        }
        let field = |k: &str| -> Result<&str> {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::CorruptManifest(format!("missing `{k}`")))
        };
        fn num<V: FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::CorruptManifest(format!("`{k}` = `{v}`")))
        }
        let model = ModelConfig {
            n_s: num("n_s", field("n_s")?)?,
            n_t: num("n_t", field("n_t")?)?,
            c_s: num("c_s", field("c_s")?)?,
            c_z: num("c_z", field("c_z")?)?,
            channels: num("channels", field("channels")?)?,
            height: num("height", field("height")?)?,
            width: num("width", field("width")?)?,
            t_in: num("t_in", field("t_in")?)?,
            t_out: num("t_out", field("t_out")?)?,
            variant: field("variant")?
                .parse::<Variant>()
                .map_err(|e| Error::CorruptManifest(e.to_string()))?,
            droppath: num("droppath", field("droppath")?)?,
            seed: num("seed", field("seed")?)?,
        };
        let schedule = field("schedule")?
            .parse()
            .map_err(|e: Error| Error::CorruptManifest(e.to_string()))?;
        let step = num("step", field("step")?)?;
        let t = num("adam_t", field("adam_t")?)?;

        let mut store = ParameterStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut pos = body;
        let mut next = |name: &str| -> Result<Tensor<T>> {
            let (any, used) = decode_tensor(&bytes[pos..])?;
            pos += used;
            if any.dtype() != T::DTYPE {
                return Err(Error::CorruptManifest(format!(
                    "`{name}` stored as {:?}, expected {:?}",
                    any.dtype(),
                    T::DTYPE
                )));
            }
            Ok(any.into_dtype())
        };
        for (name, kind) in &params {
            let value = next(name)?;
            let mi = next(name)?;
            let vi = next(name)?;
            if mi.shape() != value.shape() || vi.shape() != value.shape() {
                return Err(Error::CorruptManifest(format!("moment shapes of `{name}`")));
            }
            store.insert(name.clone(), value, *kind)?;
            m.insert(name.clone(), mi);
            v.insert(name.clone(), vi);
        }
        if pos != bytes.len() {
            return Err(Error::CorruptManifest(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            model,
            schedule,
            state: TrainState {
                params: store,
                optimizer: OptimizerState { m, v, t },
                step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Reads a checkpoint and checks it was written for `expected`.
    pub fn load(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::read(path)?;
        ck.check_config(expected)?;
        Ok(ck)
    }

    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        let (a, b) = (self.model.to_manifest(), expected.to_manifest());
        let diffs: Vec<String> = a
            .lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| format!("checkpoint {x} vs requested {y}"))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diffs.join(", ")))
        }
    }
}
