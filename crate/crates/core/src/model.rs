//! Full forecaster: encode every frame, translate the latent sequence,
//! decode with skips. Also prediction-length handling, the variant census
//! and analytic cost accounting.

use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::autodiff::{Graph, Var};
use crate::codec::{self, ENCODER_FS_BLOCKS, FS_KERNEL};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::fft::half_width;
use crate::layers::{ForwardCtx, Initializer};
use crate::params::{ParamKind, ParameterStore};
use crate::tensor::{Element, Tensor};
use crate::translator::{self, EXPANSION, SPATIAL_KERNEL, TDI_KERNEL, VALUE_KERNEL};

pub struct Forecaster {
    config: ModelConfig,
    forward_calls: AtomicUsize,
}

/// Builds a model and its freshly initialized parameters.
pub fn build_model<T: Element>(config: ModelConfig) -> Result<(Forecaster, ParameterStore<T>)> {
    let model = Forecaster::new(config)?;
    let store = model.init_params()?;
    Ok((model, store))
}

impl Forecaster {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Forecaster {
            config,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Deterministic initialization from the config seed.
    pub fn init_params<T: Element>(&self) -> Result<ParameterStore<T>> {
        let mut store = ParameterStore::new();
        let mut init = Initializer::new(&mut store, self.config.seed);
        codec::init_params(&self.config, &mut init)?;
        translator::init_params(&self.config, &mut init)?;
        Ok(store)
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_calls(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        let c = &self.config;
        let want = [c.t_in, c.channels, c.height, c.width];
        if shape.len() != 5 || shape[1..] != want || shape[0] == 0 {
            let mut expected = vec![shape.first().copied().unwrap_or(1).max(1)];
            expected.extend_from_slice(&want);
            return Err(Error::shape("forward", shape, &expected));
        }
        Ok(shape[0])
    }

    /// `(B, T_in, C, H, W)` -> `(B, T_in, C, H, W)`, recorded on `g`.
    pub fn forward<'g, T: Element>(
        &self,
        g: &'g Graph<T>,
        p: &ParameterStore<T>,
        x: Var<'g, T>,
        ctx: &ForwardCtx,
    ) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let b = self.check_input(&x.shape())?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let (t, c, h, w) = (cfg.t_in, cfg.channels, cfg.height, cfg.width);
        let frames = x.reshape(&[b * t, c, h, w])?;
        let enc = codec::encode(g, p, cfg, frames)?;
        let (lh, lw) = (cfg.latent_height(), cfg.latent_width());
        let latent = enc.latent.reshape(&[b, t, cfg.c_s, lh, lw])?;
        let q = translator::translate(g, p, cfg, latent, ctx)?;
        let q = q.reshape(&[b * t, cfg.c_s, lh, lw])?;
        codec::decode(g, p, cfg, q, enc.skip)?.reshape(&[b, t, c, h, w])
    }

    /// Evaluation-mode forward on a plain tensor.
    pub fn infer<T: Element>(&self, p: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let y = self.forward(&g, p, g.constant(x.clone()), &ForwardCtx::eval())?;
        let out = y.value();
        drop(g);
        Ok(Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
    }

    /// `T_out` frames: one pass truncated when `T_out <= T_in`, otherwise
    /// `ceil(T_out / T_in)` passes, each fed the previous pass's output.
    pub fn predict<T: Element>(&self, p: &ParameterStore<T>, x: &Tensor<T>, t_out: usize) -> Result<Tensor<T>> {
        if t_out == 0 {
            return Err(Error::InvalidArgument("t_out must be >= 1".into()));
        }
        let t_in = self.config.t_in;
        let passes = t_out.div_ceil(t_in);
        let mut outputs = Vec::with_capacity(passes);
        let mut input = x.clone();
        for _ in 0..passes {
            let y = self.infer(p, &input)?;
            input = y.clone();
            outputs.push(y);
        }
        let all = concat_frames(&outputs)?;
        take_frames(&all, 0, t_out)
    }
}

/// Concatenates `(B, T_i, ..)` tensors along the time axis.
pub fn concat_frames<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("no frames to concatenate".into()))?;
    let s = first.shape();
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!("expected (B, T, ..), got {s:?}")));
    }
    let frame: usize = s[2..].iter().product();
    let b = s[0];
    for p in parts {
        if p.shape()[0] != b || p.shape()[2..] != s[2..] {
            return Err(Error::shape("concat_frames", s, p.shape()));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(b * total * frame);
    for bi in 0..b {
        for p in parts {
            let t = p.shape()[1];
            data.extend_from_slice(&p.data()[bi * t * frame..(bi + 1) * t * frame]);
        }
    }
    let mut shape = s.to_vec();
    shape[1] = total;
    Tensor::from_vec(&shape, data)
}

/// Frames `start..start + len` of a `(B, T, ..)` tensor.
pub fn take_frames<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || start + len > s[1] {
        return Err(Error::InvalidArgument(format!(
            "frames {start}..{} out of range for shape {s:?}",
            start + len
        )));
    }
    let frame: usize = s[2..].iter().product();
    let t = s[1];
    let mut data = Vec::with_capacity(s[0] * len * frame);
    for bi in 0..s[0] {
        data.extend_from_slice(&x.data()[(bi * t + start) * frame..(bi * t + start + len) * frame]);
    }
    let mut shape = s.to_vec();
    shape[1] = len;
    Tensor::from_vec(&shape, data)
}

/// Parameter census of one built model.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantInventory {
    pub variant: Variant,
    /// `(name, scalar count)` in name order.
    pub entries: Vec<(String, usize)>,
    pub total: usize,
    /// Real values held by complex-valued parameters (two per entry).
    pub complex: usize,
    /// Number of 9x9 kernel tensors.
    pub kernels_9x9: usize,
    pub has_tdi_gate: bool,
}

impl VariantInventory {
    pub fn of<T: Element>(variant: Variant, store: &ParameterStore<T>) -> Self {
        let entries: Vec<(String, usize)> = store.iter().map(|(n, e)| (n.to_string(), e.value.len())).collect();
        let kernels_9x9 = store
            .iter()
            .filter(|(_, e)| {
                let s = e.value.shape();
                e.kind == ParamKind::Real && s.len() == 4 && s[2] == SPATIAL_KERNEL && s[3] == SPATIAL_KERNEL
            })
            .count();
        VariantInventory {
            variant,
            total: store.num_scalars(),
            complex: store.num_complex_scalars(),
            kernels_9x9,
            has_tdi_gate: store.contains("translator.tdi.gate"),
            entries,
        }
    }
}

/// Parameter count and multiply-accumulate estimate of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelCost {
    pub params: usize,
    pub complex_params: usize,
    /// For a single input sequence (batch 1).
    pub macs: u64,
}

/// Census of the parameters `config` would build, without materializing
/// them.
pub fn census(config: &ModelConfig) -> Result<VariantInventory> {
    let store = Forecaster::new(config.clone())?.init_params::<f32>()?;
    Ok(VariantInventory::of(config.variant, &store))
}

fn conv_macs(cout: usize, cin_per_group: usize, k: usize, h: usize, w: usize) -> u64 {
    (cout * cin_per_group * k * k * h * w) as u64
}

fn fs_block_macs(c: usize, h: usize, w: usize) -> u64 {
    conv_macs(c, 2 * c, 1, 1, 1) + conv_macs(c, 1, FS_KERNEL, h, w) + conv_macs(c, c, 1, h, w)
}

/// Spectral cost of one channel: forward and inverse transform at
/// `5 hw log2(hw)` each plus `4 h (w/2 + 1)` for the complex product.
pub fn spectral_macs(h: usize, w: usize) -> u64 {
    let hw = (h * w) as f64;
    let transform = (5.0 * hw * hw.log2()).round() as u64;
    2 * transform + (4 * h * half_width(w)) as u64
}

/// Analytic MAC estimate for one `(1, T_in, C, H, W)` forward.
pub fn estimate_macs(cfg: &ModelConfig) -> u64 {
    let (c, cs, cz, ct) = (cfg.channels, cfg.c_s, cfg.c_z, cfg.c_t());
    let (hh, ww) = (cfg.height, cfg.width);
    let mut per_frame = conv_macs(cs, c, 3, hh, ww) + conv_macs(cs, cs, 3, hh, ww);
    for i in 1..=cfg.n_s {
        let (hp, wp) = (hh >> (i - 1), ww >> (i - 1));
        let (hi, wi) = (hh >> i, ww >> i);
        per_frame += if cfg.variant.wavelet_codec() {
            conv_macs(cs, 4 * cs, 1, hi, wi) + conv_macs(4 * cs, cs, 1, hi, wi)
        } else {
            2 * conv_macs(cs, cs, 3, hp, wp)
        };
        per_frame += (ENCODER_FS_BLOCKS as u64 + 1) * fs_block_macs(cs, hi, wi);
    }
    per_frame += conv_macs(c, cs, 3, hh, ww);
    let (h, w) = (cfg.latent_height(), cfg.latent_width());
    per_frame += conv_macs(cz, cs, 1, h, w) + conv_macs(cs, cz, 1, h, w);
    if cfg.variant.has_tdi() {
        per_frame += conv_macs(cz, 1, TDI_KERNEL, h, w);
    }
    let mut block = 0;
    if cfg.variant.has_spatial_branch() {
        block += conv_macs(ct, 1, SPATIAL_KERNEL, h, w);
    }
    if cfg.variant.has_frequency_branch() {
        block += ct as u64 * spectral_macs(h, w);
    }
    block += if cfg.variant.gated_mixing() {
        conv_macs(EXPANSION * ct, ct, 1, h, w) + conv_macs(ct, 1, VALUE_KERNEL, h, w) + conv_macs(ct, ct, 1, h, w)
    } else {
        2 * conv_macs(EXPANSION * ct, ct, 1, h, w)
    };
    per_frame * cfg.t_in as u64 + block * cfg.n_t as u64
}

pub fn count_params_flops(config: &ModelConfig) -> Result<ModelCost> {
    let inv = census(config)?;
    Ok(ModelCost {
        params: inv.total,
        complex_params: inv.complex,
        macs: estimate_macs(config),
    })
}
