//! Finite-difference suites for the differentiable building blocks.
//!
//! Every suite runs in f64 on a tiny configuration whose parameters are
//! moved away from their initial values, so that zero-initialized gates and
//! scales do not hide gradient paths. Losses are random projections of the
//! outputs, which keeps gradient magnitudes near one.

use crate::autodiff::{Graph, Var};
use crate::codec::fs_block;
use crate::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::layers::{param_seed, ForwardCtx};
use crate::model::build_model;
use crate::params::{ParamKind, ParameterStore};
use crate::tensor::Tensor;
use crate::translator::{block_prefix, gated_channel_interaction, st_context, tdi_inject};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Names of the suites in run order.
pub const SUITES: [&str; 9] = [
    "conv2d",
    "gelu",
    "silu",
    "sigmoid",
    "fs_block",
    "st_context",
    "gated_channel_interaction",
    "tdi_inject",
    "model_loss",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

/// Configuration small enough to difference every parameter of the model.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_s: 1,
        n_t: 1,
        c_s: 4,
        c_z: 2,
        channels: 1,
        height: 8,
        width: 8,
        t_in: 2,
        t_out: 2,
        variant: Variant::Full,
        droppath: 0.0,
        seed: 5,
    }
}

fn randn(shape: &[usize], std: f64, seed: u64) -> Result<Tensor<f64>> {
    Tensor::normal(shape, 0.0, std, seed)
}

/// Tiny-model parameters plus noise of scale `0.3`.
fn perturbed(cfg: &ModelConfig) -> Result<ParameterStore<f64>> {
    let (_, mut store) = build_model::<f64>(cfg.clone())?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let shape = store.value(&name).expect("listed").shape().to_vec();
        let noise = randn(&shape, 0.3, param_seed(cfg.seed ^ 0x5eed, &name))?;
        let v = store.value_mut(&name)?;
        for (a, b) in v.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    Ok(store)
}

fn projection<'g>(g: &'g Graph<f64>, out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let r = g.constant(randn(&out.shape(), 1.0, seed)?);
    Ok(out.mul(&r)?.sum())
}

fn names_with<'a>(store: &'a ParameterStore<f64>, prefix: &str) -> Vec<&'a str> {
    store.names().filter(|n| n.starts_with(prefix)).collect()
}

fn with_input(store: &mut ParameterStore<f64>, shape: &[usize], seed: u64) -> Result<()> {
    store.insert("input", randn(shape, 1.0, seed)?, ParamKind::Real)
}

fn run_one(name: &'static str) -> Result<GradCheckReport> {
    let cfg = tiny_config();
    match name {
        "conv2d" => {
            let mut s = ParameterStore::new();
            with_input(&mut s, &[2, 4, 5, 6], 1)?;
            s.insert("w", randn(&[6, 2, 3, 3], 0.5, 2)?, ParamKind::Real)?;
            s.insert("b", randn(&[6], 0.5, 3)?, ParamKind::Real)?;
            grad_check(&mut s, &["input", "w", "b"], GRADCHECK_EPS, |g, p| {
                let x = g.param(p, "input")?;
                let y = x.conv2d(&g.param(p, "w")?, Some(&g.param(p, "b")?), 2)?;
                projection(g, y, 4)
            })
        }
        "gelu" | "silu" | "sigmoid" => {
            let mut s = ParameterStore::new();
            s.insert("input", randn(&[3, 7], 2.0, 5)?, ParamKind::Real)?;
            grad_check(&mut s, &["input"], GRADCHECK_EPS, move |g, p| {
                let x = g.param(p, "input")?;
                let y = match name {
                    "gelu" => x.gelu(),
                    "silu" => x.silu(),
                    _ => x.sigmoid(),
                };
                projection(g, y, 6)
            })
        }
        "fs_block" => {
            let mut s = perturbed(&cfg)?;
            with_input(&mut s, &[2, cfg.c_s, 6, 6], 7)?;
            let prefix = "encoder.stage1.fs1";
            let mut names = names_with(&s, prefix);
            names.push("input");
            let names: Vec<String> = names.into_iter().map(str::to_string).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            grad_check(&mut s, &refs, GRADCHECK_EPS, |g, p| {
                let y = fs_block(g, p, prefix, g.param(p, "input")?)?;
                projection(g, y, 8)
            })
        }
        "st_context" | "gated_channel_interaction" => {
            let mut s = perturbed(&cfg)?;
            let shape = [2, cfg.c_t(), cfg.latent_height(), cfg.latent_width()];
            with_input(&mut s, &shape, 9)?;
            let b = block_prefix(1);
            let subset: &[&str] = if name == "st_context" {
                &["ctx_norm", "spatial", "spectral", "ctx_scale"]
            } else {
                &["mix_norm", "expand", "value_dw", "grn", "out", "mix_scale"]
            };
            let mut names: Vec<String> = subset
                .iter()
                .flat_map(|part| names_with(&s, &format!("{b}.{part}")))
                .map(str::to_string)
                .collect();
            names.push("input".into());
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let ctx = ForwardCtx::eval();
            grad_check(&mut s, &refs, GRADCHECK_EPS, |g, p| {
                let x = g.param(p, "input")?;
                let y = if name == "st_context" {
                    st_context(g, p, &b, Variant::Full, x, &ctx)?
                } else {
                    gated_channel_interaction(g, p, &b, x, &ctx)?
                };
                projection(g, y, 10)
            })
        }
        "tdi_inject" => {
            let mut s = perturbed(&cfg)?;
            let shape = [2, 3, cfg.c_z, cfg.latent_height(), cfg.latent_width()];
            with_input(&mut s, &shape, 11)?;
            let refs = ["translator.tdi.dw.weight", "translator.tdi.gate", "input"];
            grad_check(&mut s, &refs, GRADCHECK_EPS, |g, p| {
                let y = tdi_inject(g, p, g.param(p, "input")?)?;
                projection(g, y, 12)
            })
        }
        _ => {
            let mut s = perturbed(&cfg)?;
            let (model, _) = build_model::<f64>(cfg.clone())?;
            let frames = [2, cfg.t_in, cfg.channels, cfg.height, cfg.width];
            let x = randn(&frames, 1.0, 13)?;
            let target = randn(&frames, 1.0, 14)?;
            let names: Vec<String> = s.names().map(str::to_string).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let ctx = ForwardCtx::eval();
            grad_check(&mut s, &refs, GRADCHECK_EPS, |g, p| {
                let y = model.forward(g, p, g.constant(x.clone()), &ctx)?;
                y.mse(&g.constant(target.clone()))
            })
        }
    }
}

/// Runs one suite by name; unknown names are an error.
pub fn run_suite(name: &str) -> Result<SuiteResult> {
    let name = SUITES
        .iter()
        .copied()
        .find(|s| *s == name)
        .ok_or_else(|| crate::error::Error::InvalidArgument(format!("unknown gradient suite `{name}`")))?;
    Ok(SuiteResult {
        name,
        report: run_one(name)?,
    })
}

pub fn run_all_suites() -> Result<Vec<SuiteResult>> {
    SUITES.iter().map(|s| run_suite(s)).collect()
}
