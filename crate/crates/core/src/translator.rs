//! Latent-space temporal model: temporal difference injection followed by a
//! stack of spatiotemporal blocks on the time-packed latent.
//!
//! Shapes: the latent sequence is `(B, T, C_z, h, w)`; packing stacks time
//! into channels as `(B, T * C_z, h, w)` with packed channel `t * C_z + c`.

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::fft::half_width;
use crate::layers::{conv, depthwise, norm, ForwardCtx, Initializer, GRN_EPS, LAYER_SCALE_INIT, SPECTRAL_NOISE_STD};
use crate::params::ParameterStore;
use crate::tensor::{Element, Tensor};

pub const TDI_KERNEL: usize = 3;
pub const SPATIAL_KERNEL: usize = 9;
pub const VALUE_KERNEL: usize = 3;
/// Channel expansion of the mixing sub-layer.
pub const EXPANSION: usize = 2;

pub fn block_prefix(k: usize) -> String {
    format!("translator.block{k}")
}

pub(crate) fn init_params<T: Element>(cfg: &ModelConfig, init: &mut Initializer<'_, T>) -> Result<()> {
    let (cs, cz, ct) = (cfg.c_s, cfg.c_z, cfg.c_t());
    let (h, w) = (cfg.latent_height(), cfg.latent_width());
    init.conv("translator.proj_in", cz, cs, 1, true)?;
    if cfg.variant.has_tdi() {
        init.conv("translator.tdi.dw", cz, 1, TDI_KERNEL, false)?;
        init.constant("translator.tdi.gate", &[cz], 0.0)?;
    }
    for k in 1..=cfg.n_t {
        let b = block_prefix(k);
        init.norm(&format!("{b}.ctx_norm"), ct)?;
        if cfg.variant.has_spatial_branch() {
            init.conv(&format!("{b}.spatial"), ct, 1, SPATIAL_KERNEL, true)?;
        }
        if cfg.variant.has_frequency_branch() {
            init.spectral(&format!("{b}.spectral"), &[ct, h, half_width(w)], SPECTRAL_NOISE_STD)?;
        }
        init.constant(&format!("{b}.ctx_scale"), &[ct], LAYER_SCALE_INIT)?;
        init.norm(&format!("{b}.mix_norm"), ct)?;
        if cfg.variant.gated_mixing() {
            init.conv(&format!("{b}.expand"), EXPANSION * ct, ct, 1, true)?;
            init.conv(&format!("{b}.value_dw"), ct, 1, VALUE_KERNEL, true)?;
            init.constant(&format!("{b}.grn.gamma"), &[ct], 0.0)?;
            init.constant(&format!("{b}.grn.beta"), &[ct], 0.0)?;
            init.conv(&format!("{b}.out"), ct, ct, 1, true)?;
        } else {
            init.conv(&format!("{b}.fc1"), EXPANSION * ct, ct, 1, true)?;
            init.conv(&format!("{b}.fc2"), ct, EXPANSION * ct, 1, true)?;
        }
        init.constant(&format!("{b}.mix_scale"), &[ct], LAYER_SCALE_INIT)?;
    }
    init.conv("translator.proj_out", cs, cz, 1, true)
}

fn rank5(op: &'static str, x: &Var<'_, impl Element>) -> Result<[usize; 5]> {
    let s = x.shape();
    <[usize; 5]>::try_from(s.as_slice())
        .map_err(|_| Error::InvalidArgument(format!("{op}: expected (B, T, C, h, w), got {s:?}")))
}

/// Frame-wise pointwise convolution on a `(B, T, C, h, w)` sequence.
fn framewise<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    name: &str,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let [b, t, c, h, w] = rank5("framewise", &x)?;
    let y = conv(g, p, name, x.reshape(&[b * t, c, h, w])?, 1)?;
    let cout = y.shape()[1];
    y.reshape(&[b, t, cout, h, w])
}

/// `Z~_t = Z_t + g * SiLU(dw3x3(Z_t - Z_{t-1}))` with `Z_1 - Z_0 = 0`, on a
/// `(B, T, C_z, h, w)` latent sequence.
pub fn tdi_inject<'g, T: Element>(g: &'g Graph<T>, p: &ParameterStore<T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
    let [b, t, c, h, w] = rank5("tdi_inject", &z)?;
    if t == 1 {
        return Ok(z);
    }
    let diff = z.narrow(1, 1, t - 1)?.sub(&z.narrow(1, 0, t - 1)?)?;
    let first = g.constant(Tensor::zeros(&[b, 1, c, h, w]));
    let delta = Var::concat(&[first, diff], 1)?.reshape(&[b * t, c, h, w])?;
    let gate = g.param(p, "translator.tdi.gate")?;
    let inj = depthwise(g, p, "translator.tdi.dw", delta)?.silu().channel_mul(&gate)?;
    z.add(&inj.reshape(&[b, t, c, h, w])?)
}

/// `(B, T, C_z, h, w)` -> `(B, T * C_z, h, w)`.
pub fn pack<'g, T: Element>(z: Var<'g, T>) -> Result<Var<'g, T>> {
    let [b, t, c, h, w] = rank5("pack", &z)?;
    z.reshape(&[b, t * c, h, w])
}

/// `(B, T * C_z, h, w)` -> `(B, T, C_z, h, w)`.
pub fn unpack<'g, T: Element>(x: Var<'g, T>, c_z: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 || c_z == 0 || !s[1].is_multiple_of(c_z) {
        return Err(Error::InvalidArgument(format!("unpack: {s:?} channels not divisible by C_z={c_z}")));
    }
    x.reshape(&[s[0], s[1] / c_z, c_z, s[2], s[3]])
}

/// Plain-tensor packing of one sequence: `(T, C_z, h, w)` -> `(T * C_z, h, w)`.
pub fn pack_tensor<T: Element>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!("pack: expected (T, C, h, w), got {s:?}")));
    }
    z.reshape(&[s[0] * s[1], s[2], s[3]])
}

/// Inverse of [`pack_tensor`].
pub fn unpack_tensor<T: Element>(x: &Tensor<T>, c_z: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || c_z == 0 || !s[0].is_multiple_of(c_z) {
        return Err(Error::InvalidArgument(format!("unpack: {s:?} channels not divisible by C_z={c_z}")));
    }
    x.reshape(&[s[0] / c_z, c_z, s[1], s[2]])
}

/// Dual-domain context sub-layer on `(B, C_t, h, w)`:
/// `x + DropPath(lambda_A * (dw9x9(y) + irfft2(rfft2(y) * Psi)))`, `y = norm(x)`.
pub fn st_context<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    prefix: &str,
    variant: Variant,
    x: Var<'g, T>,
    ctx: &ForwardCtx,
) -> Result<Var<'g, T>> {
    let y = norm(g, p, &format!("{prefix}.ctx_norm"), x)?;
    let mut fused = None;
    if variant.has_spatial_branch() {
        fused = Some(depthwise(g, p, &format!("{prefix}.spatial"), y)?);
    }
    if variant.has_frequency_branch() {
        let freq = frequency_branch(g, p, prefix, y)?;
        fused = Some(match fused {
            Some(s) => s.add(&freq)?,
            None => freq,
        });
    }
    let fused = fused.ok_or_else(|| Error::InvalidArgument(format!("{variant}: no context branch")))?;
    let scale = g.param(p, &format!("{prefix}.ctx_scale"))?;
    x.add(&ctx.drop_path(fused.channel_mul(&scale)?)?)
}

/// `irfft2(rfft2(y) * Psi)` for an already normalized `y`.
pub fn frequency_branch<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    prefix: &str,
    y: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let psi = g.param(p, &format!("{prefix}.spectral"))?;
    let width = *y.shape().last().expect("rank checked by norm");
    let spec = y.rfft2()?;
    let (ss, ps) = (spec.shape(), psi.shape());
    if ss[1..] != ps[..] {
        return Err(Error::shape("spectral weights", &ss[1..], &ps));
    }
    spec.complex_mul(&psi)?.irfft2(width)
}

/// `GRN(x) = gamma * x * G / (mean_c G + eps) + beta + x`.
pub fn grn<'g, T: Element>(g: &'g Graph<T>, p: &ParameterStore<T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let gamma = g.param(p, &format!("{prefix}.gamma"))?;
    let beta = g.param(p, &format!("{prefix}.beta"))?;
    x.grn_normalize(GRN_EPS)?.channel_mul(&gamma)?.channel_add(&beta)?.add(&x)
}

/// Gated channel interaction sub-layer on `(B, C_t, h, w)`.
pub fn gated_channel_interaction<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    prefix: &str,
    x: Var<'g, T>,
    ctx: &ForwardCtx,
) -> Result<Var<'g, T>> {
    let c = x.shape()[1];
    let y = norm(g, p, &format!("{prefix}.mix_norm"), x)?;
    let u = conv(g, p, &format!("{prefix}.expand"), y, 1)?;
    let halves = u.split(1, &[c, c])?;
    let (gate, value) = (halves[0], halves[1]);
    let v = grn(g, p, &format!("{prefix}.grn"), depthwise(g, p, &format!("{prefix}.value_dw"), value)?)?;
    let out = conv(g, p, &format!("{prefix}.out"), gate.silu().mul(&v)?, 1)?;
    let scale = g.param(p, &format!("{prefix}.mix_scale"))?;
    x.add(&ctx.drop_path(out.channel_mul(&scale)?)?)
}

/// Plain MLP mixing used by the ablation: `fc2(GELU(fc1(norm(x))))`.
pub fn mlp_mixing<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    prefix: &str,
    x: Var<'g, T>,
    ctx: &ForwardCtx,
) -> Result<Var<'g, T>> {
    let y = norm(g, p, &format!("{prefix}.mix_norm"), x)?;
    let h = conv(g, p, &format!("{prefix}.fc1"), y, 1)?.gelu();
    let out = conv(g, p, &format!("{prefix}.fc2"), h, 1)?;
    let scale = g.param(p, &format!("{prefix}.mix_scale"))?;
    x.add(&ctx.drop_path(out.channel_mul(&scale)?)?)
}

pub fn st_block<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    prefix: &str,
    variant: Variant,
    x: Var<'g, T>,
    ctx: &ForwardCtx,
) -> Result<Var<'g, T>> {
    let x = st_context(g, p, prefix, variant, x, ctx)?;
    if variant.gated_mixing() {
        gated_channel_interaction(g, p, prefix, x, ctx)
    } else {
        mlp_mixing(g, p, prefix, x, ctx)
    }
}

/// `(B, T_in, C_s, h, w)` -> `(B, T_in, C_s, h, w)`.
pub fn translate<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    cfg: &ModelConfig,
    f: Var<'g, T>,
    ctx: &ForwardCtx,
) -> Result<Var<'g, T>> {
    let [_, t, c, h, w] = rank5("translate", &f)?;
    let want = [cfg.t_in, cfg.c_s, cfg.latent_height(), cfg.latent_width()];
    if [t, c, h, w] != want {
        return Err(Error::shape("translate", &f.shape(), &[&[0][..], &want[..]].concat()));
    }
    let mut z = framewise(g, p, "translator.proj_in", f)?;
    if cfg.variant.has_tdi() {
        z = tdi_inject(g, p, z)?;
    }
    let mut x = pack(z)?;
    for k in 1..=cfg.n_t {
        x = st_block(g, p, &block_prefix(k), cfg.variant, x, ctx)?;
    }
    framewise(g, p, "translator.proj_out", unpack(x, cfg.c_z)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(cfg: &ModelConfig) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        init_params(cfg, &mut Initializer::new(&mut s, 11)).unwrap();
        s
    }

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::micro();
        cfg.c_s = 4;
        cfg.c_z = 2;
        cfg.t_in = 4;
        cfg.height = 8;
        cfg.width = 8;
        cfg
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::normal(shape, 0.0, 1.0, seed).unwrap()
    }

    #[test]
    fn tdi_zero_gate_is_identity() {
        let cfg = tiny();
        let s = setup(&cfg);
        let z = randn(&[2, 4, 2, 4, 4], 1);
        let g = Graph::new();
        let out = tdi_inject(&g, &s, g.constant(z.clone())).unwrap();
        assert_eq!(*out.value(), z);
    }

    #[test]
    fn tdi_constant_sequence_and_single_frame() {
        let cfg = tiny();
        let mut s = setup(&cfg);
        s.fill("translator.tdi.gate", 0.7).unwrap();
        let frame = randn(&[1, 1, 2, 4, 4], 2);
        let z = Tensor::stack(&[frame.clone(), frame.clone(), frame.clone()]).unwrap().reshape(&[1, 3, 2, 4, 4]).unwrap();
        let g = Graph::new();
        assert_eq!(*tdi_inject(&g, &s, g.constant(z.clone())).unwrap().value(), z);
        assert_eq!(*tdi_inject(&g, &s, g.constant(frame.clone())).unwrap().value(), frame);

        let moving = randn(&[1, 3, 2, 4, 4], 3);
        let out = tdi_inject(&g, &s, g.constant(moving.clone())).unwrap().value();
        assert_eq!(out.data()[..32], moving.data()[..32]);
        assert_ne!(out.data()[32..], moving.data()[32..]);
    }

    #[test]
    fn pack_layout_and_round_trip() {
        let z = randn(&[10, 72, 2, 2], 4);
        let packed = pack_tensor(&z).unwrap();
        assert_eq!(packed.shape(), &[720, 2, 2]);
        let plane = 4;
        let (t, c) = (2, 3);
        assert_eq!(
            packed.data()[(t * 72 + c) * plane..][..plane],
            z.data()[(t * 72 + c) * plane..][..plane]
        );
        assert_eq!(unpack_tensor(&packed, 72).unwrap(), z);
        assert!(unpack_tensor(&packed, 7).is_err());
    }

    #[test]
    fn zero_layer_scales_are_identity() {
        let cfg = tiny();
        let mut s = setup(&cfg);
        s.fill("translator.block1.ctx_scale", 0.0).unwrap();
        s.fill("translator.block1.mix_scale", 0.0).unwrap();
        let x = randn(&[2, 8, 4, 4], 5);
        let g = Graph::new();
        let ctx = ForwardCtx::eval();
        let a = st_context(&g, &s, "translator.block1", cfg.variant, g.constant(x.clone()), &ctx).unwrap();
        assert_eq!(*a.value(), x);
        let b = gated_channel_interaction(&g, &s, "translator.block1", g.constant(x.clone()), &ctx).unwrap();
        assert_eq!(*b.value(), x);
    }

    #[test]
    fn unit_spectral_weights_pass_normalized_input() {
        let cfg = tiny();
        let mut s = setup(&cfg);
        let psi = s.value("translator.block1.spectral").unwrap().map(|_| 0.0);
        let mut unit = psi;
        unit.data_mut().iter_mut().step_by(2).for_each(|v| *v = 1.0);
        s.set("translator.block1.spectral", unit).unwrap();
        s.fill("translator.block1.spatial.weight", 0.0).unwrap();
        s.fill("translator.block1.ctx_scale", 1.0).unwrap();
        let x = randn(&[1, 8, 4, 4], 6);
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let y = norm(&g, &s, "translator.block1.ctx_norm", xv).unwrap().value();
        let out = st_context(&g, &s, "translator.block1", cfg.variant, xv, &ForwardCtx::eval()).unwrap().value();
        for ((o, xi), yi) in out.data().iter().zip(x.data()).zip(y.data()) {
            assert!((o - xi - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn silenced_gate_leaves_output_bias() {
        let cfg = tiny();
        let mut s = setup(&cfg);
        // zero the gate half of the expansion so U_u = 0
        let mut w = s.value("translator.block1.expand.weight").unwrap().clone();
        w.data_mut()[..8 * 8].iter_mut().for_each(|v| *v = 0.0);
        s.set("translator.block1.expand.weight", w).unwrap();
        s.fill("translator.block1.mix_scale", 1.0).unwrap();
        let bias = Tensor::from_f64s(&[8], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        s.set("translator.block1.out.bias", bias.clone()).unwrap();
        let x = randn(&[1, 8, 4, 4], 7);
        let g = Graph::new();
        let out = gated_channel_interaction(&g, &s, "translator.block1", g.constant(x.clone()), &ForwardCtx::eval()).unwrap();
        for (i, (o, xi)) in out.value().data().iter().zip(x.data()).enumerate() {
            assert!((o - xi - bias.data()[i / 16]).abs() < 1e-12);
        }
    }

    #[test]
    fn translate_runs_every_block() {
        let mut cfg = tiny();
        cfg.n_t = 3;
        let s = setup(&cfg);
        let f = randn(&[2, 4, 4, 4, 4], 8);
        let g = Graph::new();
        let out = translate(&g, &s, &cfg, g.constant(f), &ForwardCtx::eval()).unwrap();
        assert_eq!(out.shape(), vec![2, 4, 4, 4, 4]);
        assert_eq!(g.op_count("rfft2"), 3);
        assert_eq!(g.op_count("grn"), 3);
    }

    #[test]
    fn near_identity_at_init() {
        let cfg = tiny();
        let s = setup(&cfg);
        let x = randn(&[2, 8, 4, 4], 9);
        let g = Graph::new();
        let y = st_block(&g, &s, "translator.block1", cfg.variant, g.constant(x.clone()), &ForwardCtx::eval()).unwrap();
        let diff: f64 = y.value().data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff / x.norm() < 1e-3);
    }
}
