use wavesf_core::data::{load_split, DataConfig, Split};
use wavesf_core::layers::NORM_EPS;
use wavesf_core::model::{census, count_params_flops};
use wavesf_core::train::{train_loop, train_step, ScheduleKind, TrainConfig, TrainState};
use wavesf_core::translator::{
    block_prefix, frequency_branch, gated_channel_interaction, pack, pack_tensor, st_context, tdi_inject, unpack,
    unpack_tensor,
};
use wavesf_core::{build_model, ForwardCtx, Graph, ModelConfig, ParameterStore, Tensor, Variant, VariantInventory, PRESETS};

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn latent_input(cfg: &ModelConfig, seed: u64) -> Tensor<f32> {
    Tensor::normal(&[2, cfg.c_t(), cfg.latent_height(), cfg.latent_width()], 0.0, 1.0, seed).unwrap()
}

#[test]
fn zero_tdi_gate_is_exact_identity() {
    let cfg = ModelConfig::micro();
    let (_, p) = build_model::<f32>(cfg.clone()).unwrap();
    assert!(p.value("translator.tdi.gate").unwrap().data().iter().all(|&v| v == 0.0));
    let z = Tensor::<f32>::normal(&[2, 4, cfg.c_z, 8, 8], 0.0, 1.0, 3).unwrap();
    let g = Graph::new();
    let out = tdi_inject(&g, &p, g.constant(z.clone())).unwrap();
    assert_eq!(bits(&out.value()), bits(&z));
}

#[test]
fn zero_layer_scales_are_exact_identity() {
    let cfg = ModelConfig::micro();
    let (_, mut p) = build_model::<f32>(cfg.clone()).unwrap();
    let b = block_prefix(1);
    p.fill(&format!("{b}.ctx_scale"), 0.0).unwrap();
    p.fill(&format!("{b}.mix_scale"), 0.0).unwrap();
    let x = latent_input(&cfg, 4);
    let ctx = ForwardCtx::train(0.5, 1);
    let g = Graph::new();
    let xv = g.constant(x.clone());
    let a = st_context(&g, &p, &b, Variant::Full, xv, &ctx).unwrap();
    let m = gated_channel_interaction(&g, &p, &b, xv, &ctx).unwrap();
    assert_eq!(bits(&a.value()), bits(&x));
    assert_eq!(bits(&m.value()), bits(&x));
}

#[test]
fn unit_spectral_weights_pass_the_input_through() {
    let cfg = ModelConfig::micro();
    let (_, mut p) = build_model::<f32>(cfg.clone()).unwrap();
    let name = format!("{}.spectral", block_prefix(1));
    let ones: Vec<f32> = p.value(&name).unwrap().data().chunks(2).flat_map(|_| [1.0, 0.0]).collect();
    let shape = p.value(&name).unwrap().shape().to_vec();
    p.set(&name, Tensor::from_vec(&shape, ones).unwrap()).unwrap();
    let x = latent_input(&cfg, 5);
    let g = Graph::new();
    let y = g.constant(x).spatial_norm(NORM_EPS).unwrap();
    let out = frequency_branch(&g, &p, &block_prefix(1), y).unwrap();
    assert!(out.value().max_abs_diff(&y.value()).unwrap() <= 1e-5);
}

#[test]
fn zero_droppath_is_exact_identity() {
    let x = Tensor::<f32>::normal(&[4, 3, 5, 5], 0.0, 1.0, 6).unwrap();
    let g = Graph::new();
    let v = g.constant(x.clone());
    assert_eq!(bits(&ForwardCtx::train(0.0, 9).drop_path(v).unwrap().value()), bits(&x));
    assert_eq!(bits(&ForwardCtx::eval().drop_path(v).unwrap().value()), bits(&x));
}

#[test]
fn pack_round_trip_is_bitwise() {
    let z = Tensor::<f32>::normal(&[3, 4, 5, 6, 7], 0.0, 1.0, 7).unwrap();
    let seq = z.index0(1).unwrap();
    let packed = pack_tensor(&seq).unwrap();
    assert_eq!(packed.shape(), &[20, 6, 7]);
    assert_eq!(bits(&unpack_tensor(&packed, 5).unwrap()), bits(&seq));
    let g = Graph::new();
    let back = unpack(pack(g.constant(z.clone())).unwrap(), 5).unwrap();
    assert_eq!(bits(&back.value()), bits(&z));
}

#[test]
fn rollout_counts_forward_passes() {
    let cfg = ModelConfig::micro();
    let (model, p) = build_model::<f32>(cfg.clone()).unwrap();
    let x = Tensor::<f32>::normal(&[2, 4, 1, 16, 16], 0.5, 0.2, 8).unwrap();
    for (t_out, passes) in [(1, 1), (3, 1), (4, 1), (5, 2), (8, 2), (9, 3), (12, 3)] {
        model.reset_forward_calls();
        let y = model.predict(&p, &x, t_out).unwrap();
        assert_eq!(model.forward_calls(), passes, "t_out={t_out}");
        assert_eq!(y.shape(), &[2, t_out, 1, 16, 16]);
    }
    // truncation keeps the leading frames and the second pass sees the first
    let one = model.predict(&p, &x, 4).unwrap();
    let short = model.predict(&p, &x, 2).unwrap();
    assert_eq!(short, wavesf_core::model::take_frames(&one, 0, 2).unwrap());
    let long = model.predict(&p, &x, 8).unwrap();
    let second = model.predict(&p, &one, 4).unwrap();
    assert_eq!(wavesf_core::model::take_frames(&long, 4, 4).unwrap(), second);
}

#[test]
fn variant_census_invariants() {
    let base = ModelConfig::micro();
    let inv = |v| census(&base.clone().with_variant(v)).unwrap();
    let full = inv(Variant::Full);
    let spatial = inv(Variant::SpatialOnly);
    assert_eq!(spatial.complex, 0);
    assert_eq!(inv(Variant::FrequencyOnly).kernels_9x9, 0);
    assert!(!inv(Variant::NoTdi).has_tdi_gate);
    assert!(full.complex > 0 && full.kernels_9x9 == base.n_t && full.has_tdi_gate);
    assert_eq!(full.total - spatial.total, full.complex);
    let psi = base.n_t * base.c_t() * base.latent_height() * (base.latent_width() / 2 + 1) * 2;
    assert_eq!(full.complex, psi);
}

#[test]
fn every_variant_trains_a_few_steps() {
    for v in Variant::ALL {
        let cfg = ModelConfig::micro().with_variant(v);
        let data = load_split::<f32>(&DataConfig::for_model(&cfg), &cfg, Split::Train).unwrap();
        let (model, p) = build_model::<f32>(cfg).unwrap();
        let inventory = VariantInventory::of(v, &p);
        assert_eq!(inventory.total, p.num_scalars());
        let mut state = TrainState::new(p);
        let tc = TrainConfig {
            max_steps: Some(3),
            batch_size: 8,
            ..TrainConfig::default()
        };
        let h = train_loop(&model, &mut state, &data, None, &tc, |_, _| {}).unwrap();
        assert!(h.steps.iter().all(|r| r.loss.is_finite()), "{v}");
        assert!(state.params.iter().all(|(_, e)| e.value.is_finite()), "{v}");
    }
}

fn nonzero(p: &ParameterStore<f32>, name: &str) -> bool {
    p.grad(name).unwrap().data().iter().any(|&g| g != 0.0)
}

#[test]
fn gradient_reaches_every_parameter() {
    let cfg = ModelConfig::micro();
    let data = load_split::<f32>(&DataConfig::for_model(&cfg), &cfg, Split::Train).unwrap();
    let (model, p) = build_model::<f32>(cfg).unwrap();
    let mut state = TrainState::new(p);
    let tc = TrainConfig {
        max_steps: Some(2),
        batch_size: 8,
        schedule: ScheduleKind::Constant,
        ..TrainConfig::default()
    };
    // with the TDI gate at zero its kernel is exactly unreachable
    train_step(&model, &mut state, &data, &tc, 2).unwrap();
    for name in state.params.names() {
        if name == "translator.tdi.dw.weight" {
            assert!(!nonzero(&state.params, name));
        } else {
            assert!(nonzero(&state.params, name), "{name} has zero gradient at init");
        }
    }
    train_step(&model, &mut state, &data, &tc, 2).unwrap();
    for name in state.params.names() {
        assert!(nonzero(&state.params, name), "{name} has zero gradient after one step");
    }
}

#[test]
fn presets_have_expected_widths_and_run_forward() {
    let expected_cz = [72, 48, 22, 22, 22, 22, 66];
    for (preset, cz) in PRESETS.iter().zip(expected_cz) {
        let m = &preset.model;
        m.validate().unwrap();
        assert_eq!(m.c_z, cz, "{}", preset.name);
        assert_eq!(m.c_t(), preset.c_t, "{}", preset.name);
        let (model, p) = build_model::<f32>(m.clone()).unwrap();
        let x = Tensor::<f32>::normal(&[1, m.t_in, m.channels, m.height, m.width], 0.0, 1.0, 1).unwrap();
        let y = model.infer(&p, &x).unwrap();
        assert_eq!(y.shape(), x.shape(), "{}", preset.name);
        assert!(y.is_finite());
        let cost = count_params_flops(m).unwrap();
        assert_eq!(cost.params, p.num_scalars());
        assert!(cost.macs > 0);
    }
}
