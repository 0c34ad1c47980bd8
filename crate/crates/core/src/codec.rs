//! Multi-scale frame encoder and its mirrored decoder.
//!
//! Frames are processed independently: callers fold batch and time into the
//! leading axis, so every function here takes `(N, C, H, W)`.
//!
//! Encoder: `stem -> N_s x [haar_dwt -> pointwise 4C_s->C_s -> 2 FS blocks]`.
//! Decoder: `N_s x [FS block -> pointwise C_s->4C_s -> haar_idwt]`, then the
//! stem output is added back and a 3x3 readout maps to the frame channels.
//! The conv-codec variant swaps each DWT stage for `conv3x3 -> 2x2 average`
//! and each IDWT stage for `nearest upsample -> conv3x3`.

use crate::autodiff::{Graph, PoolKind, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{conv, depthwise, norm, Initializer};
use crate::params::ParameterStore;
use crate::tensor::Element;

/// FS blocks per encoder stage.
pub const ENCODER_FS_BLOCKS: usize = 2;
/// Kernel of the FS block depthwise convolution.
pub const FS_KERNEL: usize = 7;

/// Shallow features kept for the decoder skip, and the deepest features.
#[derive(Clone, Copy, Debug)]
pub struct EncodedFrame<V> {
    pub skip: V,
    pub latent: V,
}

pub(crate) fn init_fs_block<T: Element>(init: &mut Initializer<'_, T>, prefix: &str, c: usize) -> Result<()> {
    init.norm(&format!("{prefix}.norm"), c)?;
    init.conv(&format!("{prefix}.gate"), c, 2 * c, 1, true)?;
    init.conv(&format!("{prefix}.dw"), c, 1, FS_KERNEL, true)?;
    init.conv(&format!("{prefix}.mix"), c, c, 1, true)
}

pub(crate) fn init_params<T: Element>(cfg: &ModelConfig, init: &mut Initializer<'_, T>) -> Result<()> {
    let (c, cs) = (cfg.channels, cfg.c_s);
    init.conv("encoder.stem.conv1", cs, c, 3, true)?;
    init.conv("encoder.stem.conv2", cs, cs, 3, true)?;
    for i in 1..=cfg.n_s {
        if cfg.variant.wavelet_codec() {
            init.conv(&format!("encoder.stage{i}.fuse"), cs, 4 * cs, 1, true)?;
        } else {
            init.conv(&format!("encoder.stage{i}.down"), cs, cs, 3, true)?;
        }
        for j in 1..=ENCODER_FS_BLOCKS {
            init_fs_block(init, &format!("encoder.stage{i}.fs{j}"), cs)?;
        }
        init_fs_block(init, &format!("decoder.stage{i}.fs"), cs)?;
        if cfg.variant.wavelet_codec() {
            init.conv(&format!("decoder.stage{i}.lift"), 4 * cs, cs, 1, true)?;
        } else {
            init.conv(&format!("decoder.stage{i}.up"), cs, cs, 3, true)?;
        }
    }
    init.conv("decoder.readout", c, cs, 3, true)
}

/// `conv3x3 -> GELU -> conv3x3`.
pub fn stem<'g, T: Element>(g: &'g Graph<T>, p: &ParameterStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let h = conv(g, p, "encoder.stem.conv1", x, 1)?.gelu();
    conv(g, p, "encoder.stem.conv2", h, 1)
}

/// Per-channel gate in `(0, 1)` from the average and max pooled statistics
/// of the normalized input `y`; shape `(N, C, 1, 1)`.
pub fn fs_gate<'g, T: Element>(g: &'g Graph<T>, p: &ParameterStore<T>, prefix: &str, y: Var<'g, T>) -> Result<Var<'g, T>> {
    let pooled = Var::concat(&[y.global_pool(PoolKind::Avg)?, y.global_pool(PoolKind::Max)?], 1)?;
    Ok(conv(g, p, &format!("{prefix}.gate"), pooled, 1)?.sigmoid())
}

/// `x + mix(dw7x7(y * gate(y)))` with `y = norm(x)`.
pub fn fs_block<'g, T: Element>(g: &'g Graph<T>, p: &ParameterStore<T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let y = norm(g, p, &format!("{prefix}.norm"), x)?;
    let s = fs_gate(g, p, prefix, y)?;
    let z = depthwise(g, p, &format!("{prefix}.dw"), y.plane_mul(&s)?)?;
    let z = conv(g, p, &format!("{prefix}.mix"), z, 1)?;
    x.add(&z)
}

fn check_frames<T: Element>(cfg: &ModelConfig, x: &Var<'_, T>) -> Result<()> {
    let s = x.shape();
    let want = [cfg.channels, cfg.height, cfg.width];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::shape("encode", &s, &[&[0][..], &want[..]].concat()));
    }
    Ok(())
}

/// Encodes `(N, C, H, W)` frames into the skip `(N, C_s, H, W)` and latent
/// `(N, C_s, H / 2^N_s, W / 2^N_s)`.
pub fn encode<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    cfg: &ModelConfig,
    x: Var<'g, T>,
) -> Result<EncodedFrame<Var<'g, T>>> {
    cfg.validate()?;
    check_frames(cfg, &x)?;
    let skip = stem(g, p, x)?;
    let mut f = skip;
    for i in 1..=cfg.n_s {
        f = if cfg.variant.wavelet_codec() {
            conv(g, p, &format!("encoder.stage{i}.fuse"), f.haar_dwt()?, 1)?
        } else {
            conv(g, p, &format!("encoder.stage{i}.down"), f, 1)?.avg_pool2()?
        };
        for j in 1..=ENCODER_FS_BLOCKS {
            f = fs_block(g, p, &format!("encoder.stage{i}.fs{j}"), f)?;
        }
    }
    Ok(EncodedFrame { skip, latent: f })
}

/// Decodes latents `(N, C_s, h, w)` with the matching skips back to frames
/// `(N, C, H, W)`.
pub fn decode<'g, T: Element>(
    g: &'g Graph<T>,
    p: &ParameterStore<T>,
    cfg: &ModelConfig,
    latent: Var<'g, T>,
    skip: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let (ls, ss) = (latent.shape(), skip.shape());
    let want_latent = [cfg.c_s, cfg.latent_height(), cfg.latent_width()];
    let want_skip = [cfg.c_s, cfg.height, cfg.width];
    if ls.len() != 4 || ls[1..] != want_latent {
        return Err(Error::shape("decode latent", &ls, &[&[ss.first().copied().unwrap_or(0)][..], &want_latent[..]].concat()));
    }
    if ss.len() != 4 || ss[1..] != want_skip || ss[0] != ls[0] {
        return Err(Error::shape("decode skip", &ss, &[&[ls[0]][..], &want_skip[..]].concat()));
    }
    let mut f = latent;
    for i in (1..=cfg.n_s).rev() {
        f = fs_block(g, p, &format!("decoder.stage{i}.fs"), f)?;
        f = if cfg.variant.wavelet_codec() {
            conv(g, p, &format!("decoder.stage{i}.lift"), f, 1)?.haar_idwt()?
        } else {
            conv(g, p, &format!("decoder.stage{i}.up"), f.upsample2()?, 1)?
        };
    }
    conv(g, p, "decoder.readout", f.add(&skip)?, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::tensor::Tensor;

    fn setup(cfg: &ModelConfig) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        init_params(cfg, &mut Initializer::new(&mut s, cfg.seed)).unwrap();
        s
    }

    #[test]
    fn fs_block_shape_and_zeroed_identity() {
        let mut s = ParameterStore::<f64>::new();
        init_fs_block(&mut Initializer::new(&mut s, 1), "b", 32).unwrap();
        let x = Tensor::normal(&[1, 32, 16, 16], 0.0, 1.0, 2).unwrap();
        let g = Graph::new();
        let y = fs_block(&g, &s, "b", g.constant(x.clone())).unwrap();
        assert_eq!(y.shape(), vec![1, 32, 16, 16]);
        assert_ne!(*y.value(), x);

        s.fill("b.mix.weight", 0.0).unwrap();
        s.fill("b.mix.bias", 0.0).unwrap();
        let g = Graph::new();
        let y = fs_block(&g, &s, "b", g.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn fs_gate_in_open_unit_interval() {
        let mut s = ParameterStore::<f64>::new();
        init_fs_block(&mut Initializer::new(&mut s, 1), "b", 8).unwrap();
        let g = Graph::new();
        let y = g.constant(Tensor::normal(&[2, 8, 6, 6], 0.0, 3.0, 5).unwrap());
        let gate = fs_gate(&g, &s, "b", y).unwrap();
        assert_eq!(gate.shape(), vec![2, 8, 1, 1]);
        assert!(gate.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn stem_zero_in_zero_out() {
        let cfg = ModelConfig::micro();
        let s = setup(&cfg);
        let g = Graph::new();
        let y = stem(&g, &s, g.constant(Tensor::zeros(&[1, 1, 16, 16]))).unwrap();
        assert_eq!(y.shape(), vec![1, 16, 16, 16]);
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_decode_shapes_and_stage_counts() {
        for variant in [Variant::Full, Variant::ConvCodec] {
            let mut cfg = ModelConfig::micro().with_variant(variant);
            cfg.n_s = 2;
            cfg.c_s = 4;
            cfg.width = 8;
            let s = setup(&cfg);
            let g = Graph::new();
            let x = g.constant(Tensor::normal(&[3, 1, 16, 8], 0.0, 1.0, 0).unwrap());
            let e = encode(&g, &s, &cfg, x).unwrap();
            assert_eq!(e.skip.shape(), vec![3, 4, 16, 8]);
            assert_eq!(e.latent.shape(), vec![3, 4, 4, 2]);
            let y = decode(&g, &s, &cfg, e.latent, e.skip).unwrap();
            assert_eq!(y.shape(), vec![3, 1, 16, 8]);
            let wavelet = (variant == Variant::Full) as usize;
            assert_eq!(g.op_count("haar_dwt"), 2 * wavelet);
            assert_eq!(g.op_count("haar_idwt"), 2 * wavelet);
            assert_eq!(g.op_count("avg_pool2"), 2 * (1 - wavelet));
        }
    }

    #[test]
    fn indivisible_frames_rejected() {
        let mut cfg = ModelConfig::micro();
        cfg.n_s = 2;
        cfg.height = 30;
        let s = setup(&ModelConfig::micro());
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 30, 16]));
        assert!(matches!(encode(&g, &s, &cfg, x), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn zeroed_decoder_gives_readout_bias() {
        let cfg = ModelConfig::micro();
        let mut s = setup(&cfg);
        let names: Vec<String> = s.names().filter(|n| n.starts_with("decoder.")).map(String::from).collect();
        for n in &names {
            s.fill(n, 0.0).unwrap();
        }
        s.fill("decoder.readout.bias", 0.25).unwrap();
        let g = Graph::new();
        let latent = g.constant(Tensor::normal(&[2, 16, 8, 8], 0.0, 1.0, 1).unwrap());
        let skip = g.constant(Tensor::zeros(&[2, 16, 16, 16]));
        let y = decode(&g, &s, &cfg, latent, skip).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.25));
    }
}
