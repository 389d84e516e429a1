//! Finite-difference gradient checking.

use super::{NdTensor, SeedRng, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f32,
    pub rel_tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    /// Offsets per side in the difference fit.
    pub points: usize,
    pub max_coords_per_input: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, rel_tol: 1e-3, abs_floor: 1e-2, points: 4, max_coords_per_input: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_rel: f64,
}

impl GradcheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    /// Scores one coordinate against `opts.rel_tol`.
    pub fn record(&mut self, analytic: f64, numeric: f64, opts: &GradcheckOptions) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.abs_floor);
        self.checked += 1;
        if rel <= opts.rel_tol {
            self.passed += 1;
        }
        self.worst_rel = self.worst_rel.max(rel);
    }

    pub fn merge(&mut self, other: &GradcheckReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.worst_rel = self.worst_rel.max(other.worst_rel);
    }
}

/// Fixed random weights shaped like `dims`, used to reduce an output to a
/// scalar so that every element contributes to the checked gradient.
pub fn projection(dims: &[usize], seed: u64) -> Result<NdTensor> {
    NdTensor::randn(dims, &mut SeedRng::new(seed).split("projection"))
}

/// `sum(out * w)` accumulated in f64.
pub fn project_f64(out: &NdTensor, w: &NdTensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(&o, &w)| o as f64 * w as f64).sum()
}

/// Compares tape gradients of `build` against finite differences.
///
/// `build` receives the tape and one leaf per entry of `inputs` and returns an
/// output node `y`; the checked loss is `sum(y * w)` for fixed random `w`. The
/// finite differences evaluate that sum in f64 so the f32 rounding of a scalar
/// loss does not swamp small gradients.
pub fn gradcheck<F>(inputs: &[NdTensor], opts: &GradcheckOptions, build: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone().with_requires_grad(true))).collect();
    let out = build(&mut tape, &vars)?;
    let w = projection(tape.dims(out), opts.seed)?;
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;

    let eval = |vals: &[NdTensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(project_f64(tape.value(out), &w))
    };

    let mut rng = SeedRng::new(opts.seed);
    let mut report = GradcheckReport::default();
    for (i, input) in inputs.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(vars[i]) {
            Some(g) => g,
            None => {
                zeros = NdTensor::zeros(input.dims())?;
                &zeros
            }
        };
        let coords: Vec<usize> = if input.len() <= opts.max_coords_per_input {
            (0..input.len()).collect()
        } else {
            (0..opts.max_coords_per_input).map(|_| rng.below(input.len())).collect()
        };
        for c in coords {
            let mut vals = inputs.to_vec();
            let numeric = central_fit(input.data()[c], opts.step, opts.points, |x| {
                vals[i].data_mut()[c] = x;
                eval(&vals)
            })?;
            report.record(analytic.data()[c] as f64, numeric, opts);
        }
    }
    Ok(report)
}

/// Derivative of `f` at `x` from a least-squares fit of `b1 d + b3 d^3` to
/// the odd part `(f(x + d) - f(x - d)) / 2` at `d = h, 2h, .., kh`. With
/// `k = 2` this is the five-point stencil; larger `k` averages out f32
/// rounding in the evaluations.
pub fn central_fit(x: f32, h: f32, k: usize, mut f: impl FnMut(f32) -> Result<f64>) -> Result<f64> {
    let (mut s2, mut s4, mut s6, mut y1, mut y3) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for j in 1..=k.max(2) {
        let d = j as f32 * h;
        let odd = (f(x + d)? - f(x - d)?) / 2.0;
        let d = d as f64;
        s2 += d * d;
        s4 += d.powi(4);
        s6 += d.powi(6);
        y1 += d * odd;
        y3 += d.powi(3) * odd;
    }
    Ok((y1 * s6 - y3 * s4) / (s2 * s6 - s4 * s4))
}
