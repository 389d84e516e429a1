use dit_anima::diffusion::Schedule;
use dit_anima::model::{AnimaModel, DitConfig, FreezeMask, ParamGroup};
use dit_anima::selfcheck::{block_config, randomize_params};
use dit_anima::tensor::{NdTensor, SeedRng};
use dit_anima::trainer::synthetic::lip_track;
use dit_anima::trainer::{
    eval_loss, gen_synthetic, prepare_all, run_phase, train_step, train_step_with, v_loss, Phase, PreparedSample,
    StepDraws, SyntheticConfig, TrainConfig,
};
use dit_anima::Error;

const MOTION: usize = 1;

fn schedule() -> Schedule {
    Schedule::linear(50, 1e-4, 0.02).unwrap()
}

fn setup(seed: u64) -> (AnimaModel, Vec<PreparedSample>) {
    let cfg = DitConfig { depth: 2, ref_depth: 2, ..block_config() };
    let mut model = AnimaModel::new(cfg.clone(), seed).unwrap();
    randomize_params(&mut model, 0.1, seed);
    let syn = SyntheticConfig::for_model(&cfg, MOTION);
    let samples = gen_synthetic(4, &syn, seed).unwrap();
    let corpus = prepare_all(&model, &samples, MOTION).unwrap();
    (model, corpus)
}

fn cfg(phase: Phase, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { phase, steps, lr: 1e-2, seed, ..TrainConfig::default() }
}

/// Snapshot of every parameter tensor, grouped.
fn snapshot(model: &AnimaModel) -> Vec<(ParamGroup, String, Vec<u32>)> {
    model
        .store
        .iter()
        .map(|(_, p)| (p.group, p.name.clone(), p.value.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

/// Groups whose parameters differ bitwise between two snapshots.
fn changed_groups(a: &[(ParamGroup, String, Vec<u32>)], b: &[(ParamGroup, String, Vec<u32>)]) -> Vec<ParamGroup> {
    let mut out: Vec<ParamGroup> = a.iter().zip(b).filter(|(x, y)| x.2 != y.2).map(|(x, _)| x.0).collect();
    out.sort();
    out.dedup();
    out
}

#[test]
fn frozen_groups_are_bitwise_unchanged_for_100_steps_per_phase() {
    let (mut model, corpus) = setup(1);
    let s = schedule();
    for phase in [Phase::Identity, Phase::Audio] {
        let mask = phase.mask();
        let mut rng = SeedRng::new(3).split(phase.as_str());
        let before = snapshot(&model);
        for step in 0..100 {
            let prev = snapshot(&model);
            train_step(&mut model, &corpus[step % corpus.len()], &cfg(phase, 1, 0), &mask, &s, &mut rng).unwrap();
            let now = snapshot(&model);
            for (p, q) in prev.iter().zip(&now) {
                if !mask.is_trainable(p.0) {
                    assert_eq!(p.2, q.2, "{phase}: frozen {} moved at step {step}", p.1);
                }
            }
        }
        let changed = changed_groups(&before, &snapshot(&model));
        assert!(!changed.is_empty(), "{phase}: nothing trained");
        assert!(changed.iter().all(|g| mask.is_trainable(*g)), "{phase}: {changed:?}");
    }
}

#[test]
fn dropout_and_motion_mask_rates_are_within_three_sigma() {
    let c = TrainConfig::default();
    let s = schedule();
    let mut rng = SeedRng::new(42);
    let n = 10_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let d = StepDraws::sample(&mut rng, &c, &s, &[1]).unwrap();
        assert!((1..=s.steps()).contains(&d.t));
        for (k, hit) in [d.drop_text, d.drop_audio, d.drop_identity, d.mask_motion].into_iter().enumerate() {
            counts[k] += hit as usize;
        }
    }
    let within = |count: usize, p: f64| {
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        (count as f64 / n as f64 - p).abs() < 3.0 * sigma
    };
    for (k, &count) in counts[..3].iter().enumerate() {
        assert!(within(count, c.drop_prob), "condition {k}: {count}/{n}");
    }
    assert!(within(counts[3], c.motion_mask_prob), "motion mask: {}/{n}", counts[3]);
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let (mut model, corpus) = setup(2);
    let before = snapshot(&model);
    let c = TrainConfig { lr: 0.0, ..cfg(Phase::Identity, 1, 0) };
    let loss = train_step(&mut model, &corpus[0], &c, &c.phase.mask(), &schedule(), &mut SeedRng::new(0)).unwrap();
    assert!(loss.is_finite());
    assert_eq!(snapshot(&model), before);
}

#[test]
fn one_step_descends_in_nine_of_ten_seeds() {
    let s = schedule();
    let mut wins = 0;
    for seed in 0..10 {
        let (mut model, corpus) = setup(100 + seed);
        let c = TrainConfig { lr: 1e-3, ..cfg(Phase::Identity, 1, seed) };
        let mut rng = SeedRng::new(seed);
        let draws = StepDraws {
            drop_text: false,
            drop_audio: false,
            drop_identity: false,
            mask_motion: false,
            ..StepDraws::sample(&mut rng, &c, &s, corpus[0].z0.dims()).unwrap()
        };
        let before = eval_loss(&model, &corpus[0], &draws, c.phase, &s).unwrap();
        let reported = train_step_with(&mut model, &corpus[0], &draws, &c, &c.phase.mask(), &s).unwrap();
        let after = eval_loss(&model, &corpus[0], &draws, c.phase, &s).unwrap();
        assert!((reported - before).abs() <= 1e-5 * before.max(1.0));
        wins += (after < before) as usize;
    }
    assert!(wins >= 9, "descended in {wins}/10 seeds");
}

#[test]
fn mismatched_mask_is_a_config_error() {
    let (mut model, corpus) = setup(3);
    let c = cfg(Phase::Audio, 1, 0);
    let wrong = FreezeMask::with_trainable(&[ParamGroup::AudioAttention, ParamGroup::Vae]);
    let err = train_step(&mut model, &corpus[0], &c, &wrong, &schedule(), &mut SeedRng::new(0));
    assert!(matches!(err, Err(Error::Config(_))));
    let err = train_step(&mut model, &corpus[0], &c, &Phase::Identity.mask(), &schedule(), &mut SeedRng::new(0));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn phase_runs_trace_and_audit() {
    let (mut model, corpus) = setup(4);
    let s = schedule();
    let start = model.clone();
    assert!(run_phase(&mut model, &corpus, &cfg(Phase::Identity, 0, 0), &s).unwrap().is_empty());
    assert_eq!(snapshot(&model), snapshot(&start));

    let t0 = snapshot(&model);
    let trace = run_phase(&mut model, &corpus, &cfg(Phase::Identity, 7, 0), &s).unwrap();
    assert_eq!(trace.len(), 7);
    assert!(trace.iter().enumerate().all(|(k, r)| r.step == k && r.phase == Phase::Identity));
    assert_eq!(trace[0].to_string(), format!("0,identity,{}", trace[0].loss));
    let t1 = snapshot(&model);
    let trace = run_phase(&mut model, &corpus, &cfg(Phase::Audio, 5, 0), &s).unwrap();
    assert_eq!(trace.len(), 5);
    let t2 = snapshot(&model);
    assert!(!changed_groups(&t0, &t1).contains(&ParamGroup::AudioAttention));
    assert_eq!(changed_groups(&t1, &t2), vec![ParamGroup::AudioAttention]);

    let mut again = start.clone();
    run_phase(&mut again, &corpus, &cfg(Phase::Identity, 7, 0), &s).unwrap();
    assert_eq!(snapshot(&again), t1);
    assert!(matches!(run_phase(&mut again, &[], &cfg(Phase::Identity, 1, 0), &s), Err(Error::Config(_))));
}

#[test]
fn v_loss_examples() {
    let mut rng = SeedRng::new(9);
    let v = NdTensor::randn(&[3, 4], &mut rng).unwrap();
    assert_eq!(v_loss(&v, &v).unwrap(), 0.0);
    assert!((v_loss(&v.map(|x| x + 1.0), &v).unwrap() - 1.0).abs() < 1e-6);
    let w = NdTensor::randn(&[3, 4], &mut rng).unwrap();
    let oracle: f64 = v.data().iter().zip(w.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / 12.0;
    assert!((v_loss(&v, &w).unwrap() as f64 - oracle).abs() < 1e-6 * oracle.max(1.0));
    assert!(v_loss(&v, &NdTensor::zeros(&[4, 3]).unwrap()).is_err());
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn lip_region_tracks_windowed_audio() {
    let cfg = SyntheticConfig { frames: 40, ..SyntheticConfig::for_model(&DitConfig::default(), 0) };
    let samples = gen_synthetic(3, &cfg, 5).unwrap();
    assert_eq!(samples, gen_synthetic(3, &cfg, 5).unwrap());
    let (r, c, _, _) = cfg.lip;
    let frame_len = cfg.height * cfg.width * cfg.channels;
    let pixel = (r * cfg.width + c) * cfg.channels;
    for s in &samples {
        let means: Vec<f64> = s
            .audio_signal
            .chunks(cfg.samples_per_frame)
            .map(|ch| ch.iter().map(|&a| a as f64).sum::<f64>() / ch.len() as f64)
            .collect();
        let windowed: Vec<f64> = (0..means.len())
            .map(|t| {
                let lo = (t + 1).saturating_sub(cfg.audio_window);
                means[lo..=t].iter().sum::<f64>() / (t + 1 - lo) as f64
            })
            .collect();
        let lips: Vec<f64> = (0..cfg.frames).map(|t| s.video.data()[t * frame_len + pixel] as f64).collect();
        assert!(pearson(&lips, &windowed) > 0.99);
    }
}

#[test]
fn constant_audio_gives_constant_lip_after_warmup() {
    let cfg = SyntheticConfig::for_model(&DitConfig::default(), 0);
    let signal = vec![0.375f32; 12 * cfg.samples_per_frame];
    let lip = lip_track(&signal, &cfg);
    assert_eq!(lip.len(), 12);
    assert!(lip[cfg.audio_window.saturating_sub(1)..].iter().all(|&v| (v - 0.375).abs() < 1e-6));
}
