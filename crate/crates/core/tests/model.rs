use dit_anima::conditioning::{AudioFeatureConfig, ConditionSet, IdentityCondition, IdentityMode, TextEmbedding};
use dit_anima::model::checkpoint;
use dit_anima::model::dit::{LayerContext, LayerState};
use dit_anima::model::patch;
use dit_anima::model::{AnimaModel, DitConfig, FreezeMask, Graph, LatentClip, ParamGroup};
use dit_anima::tensor::{ops, NdTensor, SeedRng};
use dit_anima::Error;

fn tiny() -> DitConfig {
    DitConfig {
        depth: 2,
        ref_depth: 2,
        model_dim: 16,
        heads: 2,
        mlp_ratio: 2,
        frames: 2,
        latent_height: 2,
        latent_width: 4,
        text_tokens: 2,
        text_dim: 4,
        face_dim: 4,
        audio: AudioFeatureConfig { layer_dim: 2, ..Default::default() },
        ..DitConfig::default()
    }
}

fn randomize(model: &mut AnimaModel, seed: u64) {
    let mut rng = SeedRng::new(seed);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let t = model.store.get_mut(id);
        for x in t.data_mut() {
            *x += 0.2 * rng.normal();
        }
    }
}

fn ref_latent(model: &AnimaModel, seed: u64) -> LatentClip {
    let c = &model.cfg;
    let dims = [1, c.latent_height, c.latent_width, c.latent_channels()];
    LatentClip::content(NdTensor::randn(&dims, &mut SeedRng::new(seed)).unwrap()).unwrap()
}

#[test]
fn reference_features_have_forced_shape() {
    let cfg = DitConfig { latent_height: 4, latent_width: 4, model_dim: 8, heads: 1, ..tiny() };
    let model = AnimaModel::new(cfg, 1).unwrap();
    let f = model.reference_forward(&ref_latent(&model, 2)).unwrap();
    assert_eq!(f.depth(), 2);
    for layer in f.layers() {
        assert_eq!(layer.dims(), &[4, 8]);
    }
}

#[test]
fn reference_features_are_deterministic() {
    let mut a = AnimaModel::new(tiny(), 3).unwrap();
    let mut b = AnimaModel::new(tiny(), 3).unwrap();
    randomize(&mut a, 9);
    randomize(&mut b, 9);
    let r = ref_latent(&a, 4);
    assert_eq!(a.reference_forward(&r).unwrap(), b.reference_forward(&r).unwrap());
}

#[test]
fn layer_zero_features_are_the_embedded_reference_patches() {
    let mut model = AnimaModel::new(tiny(), 5).unwrap();
    randomize(&mut model, 6);
    let r = ref_latent(&model, 7);
    let f = model.reference_forward(&r).unwrap();
    let w = model.store.get(model.store.find("ref_patch_embed.w").unwrap());
    let direct = ops::matmul(&patch::to_patches(r.data(), model.cfg.patch).unwrap(), w).unwrap();
    assert_eq!(f.layers()[0], direct);
}

#[test]
fn multi_frame_reference_is_contract_error() {
    let model = AnimaModel::new(tiny(), 0).unwrap();
    let c = &model.cfg;
    let two = LatentClip::content(NdTensor::zeros(&[2, c.latent_height, c.latent_width, c.latent_channels()]).unwrap())
        .unwrap();
    assert!(matches!(model.reference_forward(&two), Err(Error::Contract(_))));
}

#[test]
fn reference_depth_must_match() {
    let cfg = DitConfig { ref_depth: 3, ..tiny() };
    assert!(matches!(AnimaModel::new(cfg, 0), Err(Error::Config(_))));
    let cfg = DitConfig { model_dim: 12, heads: 2, ..tiny() };
    assert!(matches!(AnimaModel::new(cfg, 0), Err(Error::Config(_))));
}

fn layer_setup<'a>(model: &'a AnimaModel, g: &mut Graph<'a>, seed: u64) -> (LayerState, LayerContext<'a>) {
    let c = &model.cfg;
    let mut rng = SeedRng::new(seed);
    let text = g.constant(NdTensor::randn(&[c.text_tokens, c.model_dim], &mut rng).unwrap());
    let vision = g.constant(NdTensor::randn(&[c.vision_tokens(), c.model_dim], &mut rng).unwrap());
    let e = g.constant(NdTensor::randn(&[1, c.model_dim], &mut rng).unwrap());
    let (q, _) = model.rope_tables(c.text_tokens, false).unwrap();
    let rope = q.bind(g, model.rope()).unwrap();
    let ctx = LayerContext { e, rope_q: rope, rope_kv: rope, reference: None, face: None, audio: None };
    (LayerState { text: Some(text), vision }, ctx)
}

#[test]
fn zero_initialised_layer_is_identity() {
    let model = AnimaModel::new(tiny(), 11).unwrap();
    let mut g = Graph::inference(&model.store);
    let (state, ctx) = layer_setup(&model, &mut g, 12);
    let out = model.layer_forward(&mut g, 0, state, &ctx).unwrap();
    assert_eq!(g.value(out.vision), g.value(state.vision));
    assert_eq!(g.value(out.text.unwrap()), g.value(state.text.unwrap()));
}

#[test]
fn zero_text_modulation_is_the_time_term() {
    let mut model = AnimaModel::new(tiny(), 13).unwrap();
    randomize(&mut model, 14);
    let c = &model.cfg;
    let zero = TextEmbedding::null(c.text_tokens, c.text_dim).unwrap();
    let (mv, mt) = model.expert_adaln(1, &zero, 17.0).unwrap();

    let mut g = Graph::inference(&model.store);
    let e = model.conditioning_vector(&mut g, 17.0, None, None).unwrap();
    let block = &model.blocks()[1];
    let wv = block.mod_vision.forward(&mut g, e).unwrap();
    let wt = block.mod_text.forward(&mut g, e).unwrap();
    assert_eq!(g.value(wv), &mv);
    assert_eq!(g.value(wt), &mt);
    assert_ne!(mv, mt, "vision and text experts must differ");
}

#[test]
fn modulation_separates_timesteps_after_training() {
    let model = AnimaModel::new(tiny(), 21).unwrap();
    let c = model.cfg.clone();
    let text =
        TextEmbedding::new(NdTensor::randn(&[c.text_tokens, c.text_dim], &mut SeedRng::new(1)).unwrap()).unwrap();
    let (a0, _) = model.expert_adaln(0, &text, 3.0).unwrap();
    let (b0, _) = model.expert_adaln(0, &text, 40.0).unwrap();
    assert_eq!(a0, b0, "zero-initialised modulation is constant");

    let mut model = model;
    let zt = NdTensor::randn(&c.latent_dims(), &mut SeedRng::new(2)).unwrap();
    let target = NdTensor::randn(&[c.vision_tokens(), c.patch_out()], &mut SeedRng::new(3)).unwrap();
    let cond = ConditionSet { text: Some(text.clone()), ..Default::default() };
    // The output head starts at zero, so the first step only moves the head;
    // the block modulation receives gradient from the second step on.
    for _ in 0..2 {
        let grads = {
            let mut g = Graph::training(&model.store, FreezeMask::with_trainable(&[ParamGroup::FullAttention]));
            let out = model.forward(&mut g, &zt, None, 10.0, &cond).unwrap();
            let tv = g.constant(target.clone());
            let loss = g.tape.mse(out, tv).unwrap();
            g.param_grads(loss).unwrap()
        };
        for (id, grad) in grads {
            let p = model.store.get_mut(id);
            *p = ops::add(p, &ops::scale(&grad, -0.5)).unwrap();
        }
    }
    let (a, _) = model.expert_adaln(0, &text, 3.0).unwrap();
    let (b, _) = model.expert_adaln(0, &text, 40.0).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 0.0);
}

#[test]
fn forward_shapes_for_every_identity_mode() {
    for mode in IdentityMode::ALL {
        let cfg = DitConfig { identity_mode: mode, ..tiny() };
        let mut model = AnimaModel::new(cfg.clone(), 30).unwrap();
        randomize(&mut model, 31);
        let zt = NdTensor::randn(&cfg.latent_dims(), &mut SeedRng::new(1)).unwrap();
        let face = NdTensor::randn(&[1, cfg.face_dim], &mut SeedRng::new(2)).unwrap();
        let id = IdentityCondition::new(mode, face, Some(ref_latent(&model, 3))).unwrap();
        let cond = ConditionSet { identity: Some(id), ..Default::default() };
        let v = model.predict_v(&zt, None, 5.0, &cond).unwrap();
        assert_eq!(v.dims(), &cfg.latent_dims());
        assert!(v.data().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn precomputed_reference_features_match_on_the_fly() {
    let cfg = tiny();
    let mut model = AnimaModel::new(cfg.clone(), 40).unwrap();
    randomize(&mut model, 41);
    let zt = NdTensor::randn(&cfg.latent_dims(), &mut SeedRng::new(1)).unwrap();
    let face = NdTensor::randn(&[1, cfg.face_dim], &mut SeedRng::new(2)).unwrap();
    let r = ref_latent(&model, 3);
    let id = IdentityCondition::new(cfg.identity_mode, face, Some(r.clone())).unwrap();
    let a =
        model.predict_v(&zt, None, 5.0, &ConditionSet { identity: Some(id.clone()), ..Default::default() }).unwrap();
    let feats = model.reference_forward(&r).unwrap();
    let id2 = IdentityCondition { ref_latent: None, ..id }.with_features(feats);
    let b = model.predict_v(&zt, None, 5.0, &ConditionSet { identity: Some(id2), ..Default::default() }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_roundtrip_and_hash_guard() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = AnimaModel::new(tiny(), 50).unwrap();
    randomize(&mut model, 51);
    checkpoint::save(&model, dir.path()).unwrap();
    let mut fresh = AnimaModel::new(tiny(), 99).unwrap();
    checkpoint::load_into(&mut fresh, dir.path()).unwrap();
    assert_eq!(fresh.store, model.store);

    let mut other = AnimaModel::new(DitConfig { mlp_ratio: 3, ..tiny() }, 0).unwrap();
    assert!(matches!(checkpoint::load_into(&mut other, dir.path()), Err(Error::Manifest(_))));
}

#[test]
fn desk_default_forward_is_fast_enough() {
    let cfg = DitConfig::default();
    let model = AnimaModel::new(cfg.clone(), 1).unwrap();
    let zt = NdTensor::randn(&cfg.latent_dims(), &mut SeedRng::new(1)).unwrap();
    let face = NdTensor::randn(&[1, cfg.face_dim], &mut SeedRng::new(2)).unwrap();
    let r = ref_latent(&model, 3);
    let id = IdentityCondition::new(cfg.identity_mode, face, Some(r)).unwrap();
    let cond = ConditionSet { identity: Some(id), ..Default::default() };
    let start = std::time::Instant::now();
    let v = model.predict_v(&zt, None, 500.0, &cond).unwrap();
    assert_eq!(v.dims(), &cfg.latent_dims());
    assert!(start.elapsed().as_secs_f64() < 5.0);
}
