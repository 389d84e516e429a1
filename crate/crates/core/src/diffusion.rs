//! Variance schedules, forward noising, the v-parameterisation and the
//! deterministic (eta = 0) reverse step.
//!
//! Steps are 1-based: `t` ranges over `1..=T`. Step `0` denotes the clean
//! endpoint with `alpha_bar = 1` and is only valid as a sampler target.

use crate::error::{shape_err, Error, Result};
use crate::tensor::NdTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// A clean latent and the Gaussian draw used to noise it.
#[derive(Clone, Debug)]
pub struct NoisePair {
    pub z0: NdTensor,
    pub eps: NdTensor,
}

impl NoisePair {
    pub fn new(z0: NdTensor, eps: NdTensor) -> Result<Self> {
        if z0.dims() != eps.dims() {
            return shape_err(format!("noise pair dims differ: {:?} vs {:?}", z0.dims(), eps.dims()));
        }
        Ok(Self { z0, eps })
    }
}

impl Schedule {
    /// Linear beta schedule over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

fn affine(a: &NdTensor, ca: f64, b: &NdTensor, cb: f64) -> Result<NdTensor> {
    a.zip_map(b, |x, y| (ca * x as f64 + cb * y as f64) as f32)
}

/// `sqrt(ab) * z0 + sqrt(1 - ab) * eps` for an explicit `alpha_bar`.
pub fn q_sample_at(pair: &NoisePair, alpha_bar: f64) -> Result<NdTensor> {
    affine(&pair.z0, alpha_bar.sqrt(), &pair.eps, (1.0 - alpha_bar).sqrt())
}

/// `sqrt(ab) * eps - sqrt(1 - ab) * z0` for an explicit `alpha_bar`.
pub fn v_target_at(pair: &NoisePair, alpha_bar: f64) -> Result<NdTensor> {
    affine(&pair.eps, alpha_bar.sqrt(), &pair.z0, -(1.0 - alpha_bar).sqrt())
}

pub fn v_to_x0_eps_at(zt: &NdTensor, v: &NdTensor, alpha_bar: f64) -> Result<(NdTensor, NdTensor)> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok((affine(zt, a, v, -s)?, affine(zt, s, v, a)?))
}

pub fn q_sample(pair: &NoisePair, t: usize, s: &Schedule) -> Result<NdTensor> {
    s.check_step(t)?;
    q_sample_at(pair, s.alpha_bar(t))
}

pub fn v_target(pair: &NoisePair, t: usize, s: &Schedule) -> Result<NdTensor> {
    s.check_step(t)?;
    v_target_at(pair, s.alpha_bar(t))
}

pub fn v_to_x0_eps(zt: &NdTensor, v: &NdTensor, t: usize, s: &Schedule) -> Result<(NdTensor, NdTensor)> {
    s.check_step(t)?;
    v_to_x0_eps_at(zt, v, s.alpha_bar(t))
}

/// Deterministic DDIM update from step `t` to `t_prev < t` (`t_prev` may be 0).
pub fn sampler_step(zt: &NdTensor, v: &NdTensor, t: usize, t_prev: usize, s: &Schedule) -> Result<NdTensor> {
    s.check_step(t)?;
    if t_prev >= t {
        return Err(Error::Contract(format!("sampler step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let (x0, eps) = v_to_x0_eps_at(zt, v, s.alpha_bar(t))?;
    let ab = s.alpha_bar(t_prev);
    affine(&x0, ab.sqrt(), &eps, (1.0 - ab).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeedRng;

    fn pair_scalar(z0: f32, eps: f32) -> NoisePair {
        NoisePair::new(NdTensor::scalar(z0), NdTensor::scalar(eps)).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule::linear(50, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
        assert!(s.alpha_bar(50) < s.alpha_bar(1));
        let s = Schedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        assert!(Schedule::linear(1, 1e-4, 0.02).is_err());
        assert!(Schedule::linear(10, 0.03, 0.02).is_err());
        assert!(Schedule::linear(10, 0.0, 0.02).is_err());
        assert!(Schedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn alpha_bar_is_running_product() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= s.alpha(t);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-6);
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        assert!(s.alpha_bar(1000).sqrt() < 0.05);
    }

    #[test]
    fn q_sample_examples() {
        let p = pair_scalar(0.7, -1.3);
        assert_eq!(q_sample_at(&p, 1.0).unwrap().item(), 0.7);
        assert_eq!(q_sample_at(&p, 0.0).unwrap().item(), -1.3);
        let out = q_sample_at(&pair_scalar(1.0, 1.0), 0.25).unwrap().item();
        assert!((out - 1.3660254).abs() < 1e-6);
        let s = Schedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(matches!(q_sample(&p, 0, &s), Err(Error::Index(_))));
        assert!(matches!(q_sample(&p, 11, &s), Err(Error::Index(_))));
    }

    #[test]
    fn v_target_examples() {
        let p = pair_scalar(0.7, -1.3);
        assert_eq!(v_target_at(&p, 1.0).unwrap().item(), -1.3);
        assert_eq!(v_target_at(&p, 0.0).unwrap().item(), -0.7);
        let v = v_target_at(&pair_scalar(2.0, 0.0), 0.25).unwrap().item();
        assert!((v + 1.7320508).abs() < 1e-6);
    }

    #[test]
    fn x0_hat_at_clean_endpoint_is_zt() {
        let zt = NdTensor::from_vec(vec![0.3, -0.2]).unwrap();
        let v = NdTensor::from_vec(vec![5.0, 1.0]).unwrap();
        assert_eq!(v_to_x0_eps_at(&zt, &v, 1.0).unwrap().0, zt);
    }

    #[test]
    fn v_conversion_matches_scalar_oracle() {
        let mut rng = SeedRng::new(3);
        let zt = NdTensor::randn(&[4, 3], &mut rng).unwrap();
        let v = NdTensor::randn(&[4, 3], &mut rng).unwrap();
        let (x0, eps) = v_to_x0_eps_at(&zt, &v, 0.25).unwrap();
        for i in 0..12 {
            let (z, w) = (zt.data()[i] as f64, v.data()[i] as f64);
            assert!((x0.data()[i] as f64 - (0.5 * z - 0.75f64.sqrt() * w)).abs() < 1e-6);
            assert!((eps.data()[i] as f64 - (0.75f64.sqrt() * z + 0.5 * w)).abs() < 1e-6);
        }
    }

    #[test]
    fn sampler_step_contracts() {
        let s = Schedule::linear(10, 1e-4, 0.02).unwrap();
        let zt = NdTensor::from_vec(vec![0.5, 1.5]).unwrap();
        let v = NdTensor::from_vec(vec![-0.2, 0.1]).unwrap();
        let (x0, _) = v_to_x0_eps(&zt, &v, 4, &s).unwrap();
        assert_eq!(sampler_step(&zt, &v, 4, 0, &s).unwrap(), x0);
        assert!(matches!(sampler_step(&zt, &v, 4, 4, &s), Err(Error::Contract(_))));
        assert!(matches!(sampler_step(&zt, &v, 4, 5, &s), Err(Error::Contract(_))));
    }
}
