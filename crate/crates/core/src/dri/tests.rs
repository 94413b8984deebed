use super::*;
use crate::init::{rng, trunc_normal};
use crate::vit::{block_forward, BlockHooks, SeqLayout};

fn backbone_cfg() -> ViTConfig {
    ViTConfig {
        depth: 3,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        patch: 4,
        image_h: 8,
        image_w: 8,
        channels: 1,
        ..ViTConfig::default()
    }
}

fn dri_cfg(plan: &str, oe_dim: usize) -> DriConfig {
    DriConfig {
        oe: OffsetEncoderConfig {
            depth: 2,
            dim: oe_dim,
            heads: 2,
            mlp_ratio: 4,
            patch: None,
        },
        plan: InjectionPlan::parse(plan).unwrap(),
        ..DriConfig::default()
    }
}

fn injector(plan: &str, oe_dim: usize) -> (ParamStore<f64>, DriInjector) {
    let mut s = ParamStore::new();
    let inj = DriInjector::new(&mut s, &backbone_cfg(), &dri_cfg(plan, oe_dim), &mut rng(1)).unwrap();
    (s, inj)
}

fn image(seed: u64) -> Tensor<f64> {
    trunc_normal(&[1, 8, 8], 1.0, &mut rng(seed))
}

#[test]
fn plan_names_round_trip_and_sites() {
    for name in InjectionPlan::ABLATION_NAMES {
        assert_eq!(InjectionPlan::parse(name).unwrap().to_string(), name);
    }
    let n = |s: &str| InjectionPlan::parse(s).unwrap().sites().len();
    assert_eq!(n("attn/post-norm"), 1);
    assert_eq!(n("both/post-norm"), 2);
    assert_eq!(n("both/residual-only"), 2);
    assert_eq!(n("both/residual+post-norm"), 4);
    assert_eq!(InjectionPlan::parse("both/residual+pre-norm").unwrap().norm_site(), NormSite::PreNorm);
    assert!(matches!(InjectionPlan::parse("both/sideways"), Err(Error::Config(_))));
    assert!(matches!(InjectionPlan::parse("both"), Err(Error::Config(_))));
}

#[test]
fn domain_vector_shape_determinism_and_zero_mean() {
    let mut s = ParamStore::<f64>::new();
    let bb = ViTConfig {
        dim: 128,
        heads: 4,
        ..backbone_cfg()
    };
    let inj = DriInjector::new(&mut s, &bb, &DriConfig::default(), &mut rng(1)).unwrap();
    let img = image(2);
    let run = || {
        let mut t = Tape::inference();
        let f = inj.encode_domain(&mut t, &s, &[&img]).unwrap();
        t.value(f).clone()
    };
    let f = run();
    assert_eq!(f.shape(), &[1, 64]);
    assert!(f.bit_eq(&run()));
    let mean = f.data().iter().sum::<f64>() / 64.0;
    assert!(mean.abs() <= 1e-6);
}

#[test]
fn encoder_rejects_foreign_image_shapes() {
    let (s, inj) = injector("both/post-norm", 8);
    let mut t = Tape::inference();
    let wrong = Tensor::zeros(&[1, 4, 8]);
    assert!(matches!(inj.encode_domain(&mut t, &s, &[&wrong]), Err(Error::Input(_))));
}

fn modulate(s: &ParamStore<f64>, inj: &DriInjector, f: &Tensor<f64>, layer: usize, site: Site) -> Result<Tensor<f64>> {
    let mut t = Tape::inference();
    let fv = t.constant(f.clone());
    let d = inj.modulate(&mut t, s, fv, layer, site)?;
    Ok(t.value(d).clone())
}

#[test]
fn fresh_modulators_are_exactly_zero() {
    let (s, inj) = injector("both/residual+post-norm", 8);
    let f: Tensor<f64> = trunc_normal(&[3, 8], 1.0, &mut rng(3));
    for m in &inj.modulators {
        let out = modulate(&s, &inj, &f, m.layer, m.site).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        for p in m.params() {
            assert!(s.tensor(p).data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn modulator_is_affine() {
    let (mut s, inj) = injector("both/post-norm", 8);
    let m = inj.modulator(1, Site::Mlp).unwrap().output_layer().clone();
    let mut r = rng(4);
    let w: Tensor<f64> = trunc_normal(&[16, 8], 1.0, &mut r);
    let b: Tensor<f64> = trunc_normal(&[16], 1.0, &mut r);
    s.tensor_mut(m.weight).data_mut().copy_from_slice(w.data());
    s.tensor_mut(m.bias.unwrap()).data_mut().copy_from_slice(b.data());
    for _ in 0..20 {
        let f1: Tensor<f64> = trunc_normal(&[1, 8], 1.0, &mut r);
        let f2: Tensor<f64> = trunc_normal(&[1, 8], 1.0, &mut r);
        let d1 = modulate(&s, &inj, &f1, 1, Site::Mlp).unwrap();
        let d2 = modulate(&s, &inj, &f2, 1, Site::Mlp).unwrap();
        for o in 0..16 {
            let lin: f64 = (0..8).map(|i| w.data()[o * 8 + i] * (f1.data()[i] - f2.data()[i])).sum();
            assert!((d1.data()[o] - d2.data()[o] - lin).abs() <= 1e-6);
        }
    }
}

#[test]
fn identity_like_modulator_pads_the_domain_vector() {
    let (mut s, inj) = injector("attn/post-norm", 8);
    let m = inj.modulator(0, Site::Attn).unwrap().output_layer().clone();
    let w = s.tensor_mut(m.weight);
    for i in 0..8 {
        w.data_mut()[i * 8 + i] = 1.0;
    }
    let e1 = Tensor::from_fn(&[1, 8], |i| if i == 0 { 1.0 } else { 0.0 });
    let d = modulate(&s, &inj, &e1, 0, Site::Attn).unwrap();
    let want: Vec<f64> = (0..16).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    assert_eq!(d.data(), want.as_slice());
}

#[test]
fn missing_modulator_is_a_plan_violation() {
    let (s, inj) = injector("attn/post-norm", 8);
    let f = Tensor::zeros(&[1, 8]);
    assert!(matches!(modulate(&s, &inj, &f, 0, Site::Mlp), Err(Error::Plan(_))));
    assert!(matches!(modulate(&s, &inj, &f, 7, Site::Attn), Err(Error::Plan(_))));
}

#[test]
fn mlp_only_plan_allocates_no_attention_modulators() {
    let (s, inj) = injector("mlp/post-norm", 8);
    assert!(inj.modulators.iter().all(|m| m.site == Site::Mlp));
    assert!(s.iter().all(|(_, p)| !(p.name.starts_with(MOD_PREFIX) && p.name.contains("attn"))));
}

#[test]
fn mlp_modulator_starts_at_zero_and_random_init_does_not() {
    let mut s = ParamStore::<f64>::new();
    let mut cfg = dri_cfg("both/post-norm", 8);
    cfg.design = ModulatorDesign::Mlp;
    let inj = DriInjector::new(&mut s, &backbone_cfg(), &cfg, &mut rng(1)).unwrap();
    let f: Tensor<f64> = trunc_normal(&[2, 8], 1.0, &mut rng(2));
    let out = modulate(&s, &inj, &f, 0, Site::Attn).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));

    cfg.init = ModulatorInit::Random;
    let mut s = ParamStore::<f64>::new();
    let inj = DriInjector::new(&mut s, &backbone_cfg(), &cfg, &mut rng(1)).unwrap();
    let out = modulate(&s, &inj, &f, 0, Site::Attn).unwrap();
    assert!(out.data().iter().any(|&v| v != 0.0));
}

/// Attention-only injection leaves the MLP half of the block untouched: the
/// block output equals the textbook MLP sub-layer applied to the injected
/// attention output.
#[test]
fn attn_only_plan_keeps_the_mlp_path_plain() {
    let bb = backbone_cfg();
    let mut s = ParamStore::<f64>::new();
    let vit = VisionTransformer::new(bb.clone(), &mut s, "bb", "cls_token", &mut rng(5)).unwrap();
    let block = &vit.blocks[0];
    let x: Tensor<f64> = trunc_normal(&[bb.seq_len(), 16], 1.0, &mut rng(6));
    let delta: Tensor<f64> = trunc_normal(&[1, 16], 1.0, &mut rng(7));
    let lay = SeqLayout {
        batch: 1,
        tokens: bb.seq_len(),
        rope: None,
    };

    let mut t = Tape::inference();
    let xv = t.constant(x);
    let dv = t.constant(delta);
    let hooks = BlockHooks {
        deviation: BlockDeviation {
            attn: Some(dv),
            ..BlockDeviation::none()
        },
        ..BlockHooks::default()
    };
    let y = block_forward(&mut t, &s, block, xv, &lay, &hooks).unwrap();

    let h = block.norm1.forward(&mut t, &s, xv).unwrap();
    let h = t.add_group(h, dv, bb.seq_len()).unwrap();
    let a = crate::vit::attention(&mut t, &s, block, h, &lay, &BlockHooks::default()).unwrap();
    let x1 = t.add(xv, a).unwrap();
    let h2 = block.norm2.forward(&mut t, &s, x1).unwrap();
    let m = block.fc1.forward(&mut t, &s, h2).unwrap();
    let m = t.gelu(m);
    let m = block.fc2.forward(&mut t, &s, m).unwrap();
    let want = t.add(x1, m).unwrap();
    assert!(t.value(y).bit_eq(t.value(want)));
}

#[test]
fn per_block_count_closed_form_and_enumeration() {
    let oe = OffsetEncoderConfig::default();
    assert_eq!(oe.block_params(), 49_984);
    let bb = ViTConfig {
        depth: 12,
        dim: 384,
        heads: 6,
        patch: 16,
        image_h: 32,
        image_w: 32,
        channels: 3,
        ..ViTConfig::default()
    };
    let mut s = ParamStore::<f32>::new();
    DriInjector::new(&mut s, &bb, &DriConfig::default(), &mut rng(1)).unwrap();
    assert_eq!(s.count_prefix("dri.oe.block0.", false), 49_984);
    assert_eq!(s.count_prefix("dri.oe.block", false), 99_968);
    assert_eq!(s.count_prefix(MOD_PREFIX, false), 599_040);
    let table = injector_param_table(&bb, &DriConfig::default());
    assert_eq!(table.get("modulators"), Some(599_040));
    assert_eq!(table.get("oe.blocks"), Some(99_968));
    assert_eq!(table.total(), s.count_prefix("dri.", false));
}
