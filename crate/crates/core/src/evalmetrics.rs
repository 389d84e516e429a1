//! Fréchet distance between Gaussian feature fits, dynamic degree from flow
//! fields, and a fixed random-projection feature extractor.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, Error, Result};
use crate::model::LatentClip;
use crate::tensor::{NdTensor, SeedRng};

/// Eigenvalues above `-PSD_TOL` count as nonnegative.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return shape_err(format!("covariance {:?} does not match mean of length {d}", cov.shape()));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-8 {
                    return Err(Error::Numeric(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `[n, d]` features.
pub fn fit_gaussian(features: &NdTensor) -> Result<GaussianStats> {
    if features.rank() != 2 {
        return shape_err(format!("features must be [n, d], got {:?}", features.dims()));
    }
    let (n, d) = (features.rows(), features.cols());
    if n < 2 {
        return Err(Error::Config(format!("need at least two samples, got {n}")));
    }
    let x = DMatrix::from_row_iterator(n, d, features.data().iter().map(|&v| v as f64));
    let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    GaussianStats::new(mean, cov, n)
}

/// Eigenvalues of a symmetric matrix, with `(-PSD_TOL, 0)` clamped to zero.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    for l in e.eigenvalues.iter_mut() {
        if *l < -PSD_TOL || !l.is_finite() {
            return Err(Error::Numeric(format!("{what} has eigenvalue {l}")));
        }
        *l = l.max(0.0);
    }
    Ok(e)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m, what)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
///
/// The trace of the inner root equals the sum of singular values of
/// `S_a^1/2 S_b^1/2`, which stays accurate when either covariance is singular.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return shape_err(format!("dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    let root_a = sqrt_psd(&a.cov, "first covariance")?;
    let root_b = sqrt_psd(&b.cov, "second covariance")?;
    let cross: f64 = (root_a * root_b).singular_values().sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Per-pixel displacement between two frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: NdTensor,
    pub v: NdTensor,
}

impl FlowField {
    pub fn new(u: NdTensor, v: NdTensor) -> Result<Self> {
        if u.dims() != v.dims() {
            return shape_err(format!("flow components differ: {:?} vs {:?}", u.dims(), v.dims()));
        }
        if u.is_empty() {
            return shape_err("flow field is empty");
        }
        Ok(Self { u, v })
    }

    /// Splits `[frames, H, W, 2]` into one field per frame pair.
    pub fn from_stacked(t: &NdTensor) -> Result<Vec<Self>> {
        let d = t.dims();
        if d.len() != 4 || d[3] != 2 {
            return shape_err(format!("stacked flow must be [frames, H, W, 2], got {d:?}"));
        }
        let px = d[1] * d[2];
        t.data()
            .chunks(px * 2)
            .map(|frame| {
                let u = frame.iter().step_by(2).copied().collect();
                let v = frame.iter().skip(1).step_by(2).copied().collect();
                Self::new(NdTensor::new(vec![d[1], d[2]], u)?, NdTensor::new(vec![d[1], d[2]], v)?)
            })
            .collect()
    }

    pub fn mean_magnitude(&self) -> f64 {
        let s: f64 = self.u.data().iter().zip(self.v.data()).map(|(&u, &v)| (u as f64).hypot(v as f64)).sum();
        s / self.u.len() as f64
    }
}

/// Mean flow magnitude over frames and pixels.
pub fn dynamic_degree(flows: &[FlowField]) -> Result<f64> {
    if flows.is_empty() {
        return Err(Error::Config("dynamic degree needs at least one flow field".into()));
    }
    let (sum, n) =
        flows.iter().fold((0.0, 0usize), |(s, n), f| (s + f.mean_magnitude() * f.u.len() as f64, n + f.u.len()));
    Ok(sum / n as f64)
}

pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    /// One feature row per clip frame, `[frames, dim]`.
    fn features(&self, clip: &LatentClip) -> Result<NdTensor>;
}

/// Fixed Gaussian projection of flattened latent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjection {
    weight: NdTensor,
}

impl RandomProjection {
    pub fn new(frame_len: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = SeedRng::new(seed).split("feature_projection");
        let w = NdTensor::randn(&[frame_len, dim], &mut rng)?.map(|x| x / (frame_len as f32).sqrt());
        Ok(Self { weight: w })
    }
}

impl FeatureExtractor for RandomProjection {
    fn dim(&self) -> usize {
        self.weight.cols()
    }

    fn features(&self, clip: &LatentClip) -> Result<NdTensor> {
        let rows = clip.data().reshape(&[clip.frames(), clip.frame_len()])?;
        crate::tensor::ops::matmul(&rows, &self.weight)
    }
}
