use dit_anima::conditioning::{
    build_motion_condition, synth_audio_features, ConditionSet, IdentityCondition, MotionCondition,
};
use dit_anima::diffusion::{sampler_step, Schedule};
use dit_anima::guidance::{
    cfg_combine, extrapolate, sample_clip, timesteps, BranchOutputs, GuidanceScales, SampleOptions,
};
use dit_anima::model::latent::FrameRole;
use dit_anima::model::{AnimaModel, DitConfig, LatentClip};
use dit_anima::selfcheck::{block_config, randomize_params};
use dit_anima::tensor::{NdTensor, SeedRng};
use dit_anima::trainer::{gen_synthetic, SyntheticConfig};
use dit_anima::Error;
use proptest::prelude::*;

const CLIPS: usize = 3;

fn branches(dims: &[usize], seed: u64) -> BranchOutputs {
    let mut rng = SeedRng::new(seed);
    let mut r = || NdTensor::randn(dims, &mut rng).unwrap();
    BranchOutputs { v_uncond: r(), v_text: r(), v_text_audio: r(), v_full: r() }
}

fn scales(a: f32, t: f32, i: f32) -> GuidanceScales {
    GuidanceScales::new(a, t, i).unwrap()
}

/// Model with random weights and conditions long enough for `CLIPS` clips.
fn fixture(seed: u64) -> (AnimaModel, ConditionSet, Schedule) {
    let cfg = DitConfig { depth: 2, ref_depth: 2, ..block_config() };
    let mut model = AnimaModel::new(cfg.clone(), seed).unwrap();
    randomize_params(&mut model, 0.1, seed);
    let syn = SyntheticConfig::for_model(&cfg, (CLIPS - 1) * cfg.frames);
    let sample = gen_synthetic(1, &syn, seed).unwrap().remove(0);
    let audio = synth_audio_features(&sample.audio_signal, &cfg.audio).unwrap();
    let (face, ref_latent) = model.encode_reference(&sample.ref_image).unwrap();
    let identity = IdentityCondition::new(cfg.identity_mode, face, Some(ref_latent)).unwrap();
    let cond = ConditionSet { text: Some(sample.text_embed), audio: Some(audio), identity: Some(identity) };
    (model, cond, Schedule::linear(50, 1e-4, 0.02).unwrap())
}

fn first_window(model: &AnimaModel, cond: &ConditionSet) -> ConditionSet {
    let audio = cond.audio.as_ref().unwrap().slice_frames(0, model.cfg.pixel_frames()).unwrap();
    ConditionSet { audio: Some(audio), ..cond.clone() }
}

fn opts(s: GuidanceScales) -> SampleOptions {
    SampleOptions { scales: s, steps: 4 }
}

#[test]
fn unit_and_zero_scales_select_a_branch_bitwise() {
    let b = branches(&[3, 5], 1);
    assert_eq!(cfg_combine(&b, &scales(1.0, 1.0, 1.0)).unwrap(), b.v_full);
    assert_eq!(cfg_combine(&b, &scales(0.0, 0.0, 0.0)).unwrap(), b.v_uncond);
}

#[test]
fn scalar_branches_give_eight() {
    let s = NdTensor::scalar;
    let b = BranchOutputs { v_uncond: s(0.0), v_text: s(1.0), v_text_audio: s(2.0), v_full: s(3.0) };
    assert_eq!(cfg_combine(&b, &scales(3.5, 3.5, 1.0)).unwrap().item(), 8.0);
}

#[test]
fn default_scales_are_the_balanced_setting() {
    let d = GuidanceScales::default();
    assert_eq!((d.lambda_a, d.lambda_t, d.lambda_i), (3.5, 3.5, 1.0));
    assert_eq!(SampleOptions::default().scales, d);
}

#[test]
fn invalid_scales_and_shapes_are_rejected() {
    assert!(matches!(GuidanceScales::new(-1.0, 1.0, 1.0), Err(Error::Config(_))));
    assert!(matches!(GuidanceScales::new(1.0, f32::NAN, 1.0), Err(Error::Config(_))));
    let mut b = branches(&[2, 2], 0);
    b.v_text = NdTensor::zeros(&[2, 3]).unwrap();
    assert!(matches!(cfg_combine(&b, &GuidanceScales::default()), Err(Error::Shape(_))));
}

#[test]
fn sampling_is_deterministic_and_shaped() {
    let (model, cond, s) = fixture(3);
    let cond = first_window(&model, &cond);
    let o = opts(GuidanceScales::default());
    let a = sample_clip(&model, &cond, &s, &o, 9).unwrap();
    let b = sample_clip(&model, &cond, &s, &o, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.data().dims(), &model.cfg.latent_dims());
    assert_ne!(a, sample_clip(&model, &cond, &s, &o, 10).unwrap());
}

#[test]
fn unit_scales_sample_the_full_condition_branch() {
    let (model, cond, s) = fixture(4);
    let cond = first_window(&model, &cond);
    let o = opts(scales(1.0, 1.0, 1.0));
    let guided = sample_clip(&model, &cond, &s, &o, 2).unwrap();

    let [l, h, w, c] = model.cfg.latent_dims();
    let noise = NdTensor::randn(&[l, h, w, c], &mut SeedRng::new(2)).unwrap();
    let motion = MotionCondition::empty(l, h, w, c, noise).unwrap();
    let mut z = motion.noise.data().clone();
    let ts = timesteps(&s, o.steps);
    for (k, &t) in ts.iter().enumerate() {
        let v = model.predict_v(&z, Some(&motion), t as f64, &cond).unwrap();
        z = sampler_step(&z, &v, t, ts.get(k + 1).copied().unwrap_or(0), &s).unwrap();
    }
    assert_eq!(guided.data(), &z);
}

#[test]
fn single_clip_extrapolation_is_sample_clip() {
    let (model, cond, s) = fixture(5);
    let o = opts(GuidanceScales::default());
    let ex = extrapolate(&model, &cond, &s, &o, 1, 2, 21).unwrap();
    let direct = sample_clip(&model, &first_window(&model, &cond), &s, &o, 21).unwrap();
    assert_eq!(ex.clips, vec![direct]);
}

#[test]
fn three_clip_provenance() {
    let (model, cond, s) = fixture(6);
    let o = opts(GuidanceScales::default());
    let n = 1;
    let ex = extrapolate(&model, &cond, &s, &o, CLIPS, n, 8).unwrap();
    let l = model.cfg.frames;
    assert_eq!(ex.clips.len(), CLIPS);
    assert_eq!(ex.total_frames(), CLIPS * l);
    assert_eq!(ex.concat().unwrap().frames(), CLIPS * l);
    assert_eq!(ex.motions[0].n, 0);
    for k in 1..CLIPS {
        let m = &ex.motions[k];
        assert_eq!(m.n, n);
        assert_eq!(m.motion_latents().unwrap(), ex.clips[k - 1].tail(n).unwrap().into_data());
        assert_eq!(m.padded_abs_sum(), 0.0);
    }
    assert_eq!(ex, extrapolate(&model, &cond, &s, &o, CLIPS, n, 8).unwrap());
    assert_ne!(ex.clips[1], ex.clips[0]);
}

#[test]
fn short_audio_is_a_config_error() {
    let (model, cond, s) = fixture(7);
    let o = opts(GuidanceScales::default());
    assert!(matches!(extrapolate(&model, &cond, &s, &o, CLIPS + 1, 1, 0), Err(Error::Config(_))));
    assert!(matches!(extrapolate(&model, &cond, &s, &o, 0, 1, 0), Err(Error::Config(_))));
}

#[test]
fn motion_layout_for_the_ablation_grid() {
    let (l, h, w, c) = (9, 2, 3, 4);
    let prev = LatentClip::content(NdTensor::randn(&[l, h, w, c], &mut SeedRng::new(1)).unwrap()).unwrap();
    for n in [1, 2, 4, 8] {
        let m = build_motion_condition(&prev, n, l, 5).unwrap();
        let roles = m.cond.roles();
        assert_eq!(roles.iter().filter(|r| **r == FrameRole::Motion).count(), n);
        assert_eq!(roles.iter().filter(|r| **r == FrameRole::Padded).count(), l - n);
        assert_eq!(m.noise.frames(), l);
        assert!(m.noise.roles().iter().all(|r| *r == FrameRole::Noise));
        for j in 0..n {
            assert_eq!(m.cond.frame_data(j), prev.frame_data(l - n + j));
        }
        for j in n..l {
            assert!(m.cond.frame_data(j).iter().all(|x| x.to_bits() == 0));
        }
        assert_eq!(m.tensor().unwrap().dims(), &[l, h, w, 2 * c]);
    }
    assert!(matches!(build_motion_condition(&prev, 10, l, 5), Err(Error::Config(_))));
}

/// Per-element f64 evaluation of the nested combination.
fn oracle(b: &BranchOutputs, g: &GuidanceScales, k: usize) -> f64 {
    let (u, t, a, f) = (
        b.v_uncond.data()[k] as f64,
        b.v_text.data()[k] as f64,
        b.v_text_audio.data()[k] as f64,
        b.v_full.data()[k] as f64,
    );
    let (la, lt, li) = (g.lambda_a as f64, g.lambda_t as f64, g.lambda_i as f64);
    u + lt * (t - u) + la * (a - t) + li * (f - a)
}

proptest! {
    #[test]
    fn combination_matches_oracle_and_is_linear(
        seed in 0u64..1000,
        a in 0.0f32..8.0,
        t in 0.0f32..8.0,
        i in 0.0f32..8.0,
        c in -2.0f32..2.0,
    ) {
        let g = scales(a, t, i);
        let x = branches(&[4, 3], seed);
        let y = branches(&[4, 3], seed + 1);
        let mix = |p: &NdTensor, q: &NdTensor| p.zip_map(q, |u, v| u + c * v).unwrap();
        let xy = BranchOutputs {
            v_uncond: mix(&x.v_uncond, &y.v_uncond),
            v_text: mix(&x.v_text, &y.v_text),
            v_text_audio: mix(&x.v_text_audio, &y.v_text_audio),
            v_full: mix(&x.v_full, &y.v_full),
        };
        let (cx, cxy) = (cfg_combine(&x, &g).unwrap(), cfg_combine(&xy, &g).unwrap());
        for k in 0..12 {
            let want = oracle(&x, &g, k);
            prop_assert!((cx.data()[k] as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
            let sup = oracle(&x, &g, k) + c as f64 * oracle(&y, &g, k);
            prop_assert!((cxy.data()[k] as f64 - sup).abs() <= 1e-5 * sup.abs().max(1.0));
        }
    }
}
