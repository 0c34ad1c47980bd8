//! Parameter initialization and the small parameterized building blocks
//! shared by the codec and the translator.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamKind, ParameterStore};
use crate::tensor::{Element, Tensor};

/// Epsilon of the per-plane layer normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Epsilon guarding the GRN denominator.
pub const GRN_EPS: f64 = 1e-6;
/// Initial value of every layer-scale vector.
pub const LAYER_SCALE_INIT: f64 = 1e-6;
/// Per-component std of the noise added to unit spectral weights.
pub const SPECTRAL_NOISE_STD: f64 = 0.02;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of parameter `name` under model seed `seed`. Depends only on the
/// pair, so adding or removing other parameters never shifts it.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    splitmix(fnv1a(name.as_bytes()) ^ splitmix(seed))
}

/// Registers freshly initialized parameters in a store.
pub struct Initializer<'a, T: Element> {
    store: &'a mut ParameterStore<T>,
    seed: u64,
}

impl<'a, T: Element> Initializer<'a, T> {
    pub fn new(store: &'a mut ParameterStore<T>, seed: u64) -> Self {
        Initializer { store, seed }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], mean: f64, std: f64) -> Result<()> {
        let t = Tensor::normal(shape, mean, std, param_seed(self.seed, name))?;
        self.store.insert(name, t, ParamKind::Real)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value), ParamKind::Real)
    }

    /// `{name}.weight` of shape `(cout, cin_per_group, k, k)` drawn from
    /// `N(0, 1/fan_in)` and, if requested, a zero `{name}.bias`.
    pub fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize, bias: bool) -> Result<()> {
        let fan_in = (cin_per_group * k * k) as f64;
        self.normal(&format!("{name}.weight"), &[cout, cin_per_group, k, k], 0.0, fan_in.sqrt().recip())?;
        if bias {
            self.constant(&format!("{name}.bias"), &[cout], 0.0)?;
        }
        Ok(())
    }

    /// Per-channel affine normalization parameters.
    pub fn norm(&mut self, name: &str, channels: usize) -> Result<()> {
        self.constant(&format!("{name}.scale"), &[channels], 1.0)?;
        self.constant(&format!("{name}.shift"), &[channels], 0.0)
    }

    /// Complex weights `1 + 0i` plus Gaussian noise on both components;
    /// `shape` excludes the trailing real/imaginary axis.
    pub fn spectral(&mut self, name: &str, shape: &[usize], noise: f64) -> Result<()> {
        let mut full = shape.to_vec();
        full.push(2);
        let mut t = Tensor::<T>::normal(&full, 0.0, noise, param_seed(self.seed, name))?;
        for re in t.data_mut().iter_mut().step_by(2) {
            *re = *re + T::one();
        }
        self.store.insert(name, t, ParamKind::Complex)
    }
}

/// Convolution with parameters `{name}.weight` and optional `{name}.bias`.
pub fn conv<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    name: &str,
    x: Var<'g, T>,
    groups: usize,
) -> Result<Var<'g, T>> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let bias_name = format!("{name}.bias");
    let b = if p.contains(&bias_name) {
        Some(g.param(p, &bias_name)?)
    } else {
        None
    };
    x.conv2d(&w, b.as_ref(), groups)
}

/// Depthwise convolution (one group per channel).
pub fn depthwise<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    name: &str,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let channels = x.shape()[1];
    conv(g, p, name, x, channels)
}

/// Per-channel layer normalization over spatial positions followed by a
/// learnable per-channel affine map.
pub fn norm<'g, T: Element>(g: &'g Graph<T>, p: &ParameterStore<T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let scale = g.param(p, &format!("{name}.scale"))?;
    let shift = g.param(p, &format!("{name}.shift"))?;
    x.spatial_norm(NORM_EPS)?.channel_mul(&scale)?.channel_add(&shift)
}

/// Whether stochastic layers are active, and their randomness.
pub struct ForwardCtx {
    droppath: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl ForwardCtx {
    /// Deterministic evaluation: DropPath is the identity.
    pub fn eval() -> Self {
        ForwardCtx {
            droppath: 0.0,
            rng: None,
        }
    }

    pub fn train(droppath: f64, seed: u64) -> Self {
        ForwardCtx {
            droppath,
            rng: Some(RefCell::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Stochastic depth on a residual branch of shape `(N, ..)`: each sample's
    /// branch is dropped with the configured rate and survivors are rescaled
    /// by `1 / (1 - rate)`.
    pub fn drop_path<'g, T: Element>(&self, branch: Var<'g, T>) -> Result<Var<'g, T>> {
        let Some(rng) = &self.rng else {
            return Ok(branch);
        };
        if self.droppath <= 0.0 {
            return Ok(branch);
        }
        let keep = 1.0 - self.droppath;
        let n = branch.shape()[0];
        let mut rng = rng.borrow_mut();
        let factors = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    T::of_f64(1.0 / keep)
                } else {
                    T::zero()
                }
            })
            .collect();
        branch.sample_scale(factors)
    }
}
