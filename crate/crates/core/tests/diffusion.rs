use dit_anima::diffusion::{
    q_sample, q_sample_at, sampler_step, v_target, v_target_at, v_to_x0_eps, NoisePair, Schedule,
};
use dit_anima::guidance::timesteps;
use dit_anima::tensor::{NdTensor, SeedRng};
use dit_anima::Error;
use proptest::prelude::*;

fn desk() -> Schedule {
    Schedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn random_pair(dims: &[usize], rng: &mut SeedRng) -> NoisePair {
    let z0 = NdTensor::randn(dims, rng).unwrap();
    let eps = NdTensor::randn(dims, rng).unwrap();
    NoisePair::new(z0, eps).unwrap()
}

/// The v that makes the clean estimate exactly `z0` at `zt`.
fn oracle_v(zt: &NdTensor, z0: &NdTensor, t: usize, s: &Schedule) -> NdTensor {
    let ab = s.alpha_bar(t);
    let eps = zt.zip_map(z0, |z, x| ((z as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32).unwrap();
    v_target(&NoisePair::new(z0.clone(), eps).unwrap(), t, s).unwrap()
}

#[test]
fn v_round_trip_on_100_random_cases() {
    let s = desk();
    let mut rng = SeedRng::new(11);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let t = 1 + rng.below(s.steps());
        let pair = random_pair(&[3, 2, 4], &mut rng);
        let zt = q_sample(&pair, t, &s).unwrap();
        let v = v_target(&pair, t, &s).unwrap();
        let (x0, eps) = v_to_x0_eps(&zt, &v, t, &s).unwrap();
        worst = worst.max(x0.max_abs_diff(&pair.z0).unwrap()).max(eps.max_abs_diff(&pair.eps).unwrap());
    }
    assert!(worst < 1e-5, "worst round-trip error {worst}");
}

#[test]
fn closed_loop_with_perfect_v_recovers_z0() {
    let s = desk();
    let mut rng = SeedRng::new(5);
    for steps in [0, 50, 10] {
        let pair = random_pair(&[2, 3, 4], &mut rng);
        let ts = timesteps(&s, steps);
        let mut z = q_sample(&pair, ts[0], &s).unwrap();
        for (k, &t) in ts.iter().enumerate() {
            let prev = ts.get(k + 1).copied().unwrap_or(0);
            let v = oracle_v(&z, &pair.z0, t, &s);
            z = sampler_step(&z, &v, t, prev, &s).unwrap();
        }
        let err = z.max_abs_diff(&pair.z0).unwrap();
        assert!(err < 1e-4, "{steps} steps: error {err}");
    }
}

#[test]
fn terminal_signal_is_small() {
    assert!(desk().alpha_bar(1000).sqrt() < 0.05);
}

#[test]
fn hand_product_schedule() {
    let s = Schedule::from_betas(vec![0.5, 0.5]).unwrap();
    assert_eq!(s.alpha_bar(1), 0.5);
    assert_eq!(s.alpha_bar(2), 0.25);
    assert!(Schedule::from_betas(vec![0.5, 1.0]).is_err());
    assert!(Schedule::linear(1, 0.5, 0.5).is_err());
}

#[test]
fn single_jump_matches_reconstruction_formula() {
    let s = desk();
    let mut rng = SeedRng::new(2);
    let zt = NdTensor::randn(&[5], &mut rng).unwrap();
    let v = NdTensor::randn(&[5], &mut rng).unwrap();
    let out = sampler_step(&zt, &v, 1000, 1, &s).unwrap();
    let (ab_t, ab_1) = (s.alpha_bar(1000), s.alpha_bar(1));
    for k in 0..5 {
        let (z, w) = (zt.data()[k] as f64, v.data()[k] as f64);
        let x0 = ab_t.sqrt() * z - (1.0 - ab_t).sqrt() * w;
        let e = (1.0 - ab_t).sqrt() * z + ab_t.sqrt() * w;
        let want = ab_1.sqrt() * x0 + (1.0 - ab_1).sqrt() * e;
        assert!((out.data()[k] as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn forward_process_statistics_at_half() {
    let n = 10_000;
    let z0 = 0.8f64;
    let mut rng = SeedRng::new(17);
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let pair = NoisePair::new(NdTensor::scalar(z0 as f32), NdTensor::scalar(rng.normal())).unwrap();
            q_sample_at(&pair, 0.5).unwrap().item() as f64
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = 0.5f64.sqrt();
    let se_mean = sd / (n as f64).sqrt();
    let se_sd = sd / (2.0 * (n - 1) as f64).sqrt();
    assert!((mean - sd * z0).abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var.sqrt() - sd).abs() < 3.0 * se_sd, "sd {}", var.sqrt());
}

#[test]
fn out_of_range_steps_are_index_errors() {
    let s = Schedule::linear(10, 1e-4, 0.02).unwrap();
    let pair = NoisePair::new(NdTensor::scalar(1.0), NdTensor::scalar(0.0)).unwrap();
    assert!(matches!(v_target(&pair, 0, &s), Err(Error::Index(_))));
    assert!(matches!(v_target(&pair, 11, &s), Err(Error::Index(_))));
    assert!(NoisePair::new(NdTensor::zeros(&[2]).unwrap(), NdTensor::zeros(&[3]).unwrap()).is_err());
}

proptest! {
    #[test]
    fn linear_schedules_are_valid(steps in 2usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.3) {
        let s = Schedule::linear(steps, lo, lo + span).unwrap();
        let mut prod = 1.0;
        for t in 1..=steps {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prod *= s.alpha(t);
            prop_assert!((s.alpha_bar(t) - prod).abs() < 1e-6);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn round_trip_at_any_level(seed in 0u64..10_000, ab in 0.0f64..=1.0) {
        let pair = random_pair(&[7], &mut SeedRng::new(seed));
        let zt = q_sample_at(&pair, ab).unwrap();
        let v = v_target_at(&pair, ab).unwrap();
        let (x0, eps) = dit_anima::diffusion::v_to_x0_eps_at(&zt, &v, ab).unwrap();
        prop_assert!(x0.max_abs_diff(&pair.z0).unwrap() < 1e-5);
        prop_assert!(eps.max_abs_diff(&pair.eps).unwrap() < 1e-5);
    }
}
