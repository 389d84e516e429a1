//! Small building blocks composed from tape primitives.

use super::params::{Graph, Init, ParamGroup, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{NdTensor, SeedRng, Var};

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        bias: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let w = store.init(format!("{name}.w"), group, &[fan_in, fan_out], init, rng)?;
        let b = if bias { Some(store.init(format!("{name}.b"), group, &[fan_out], Init::Zeros, rng)?) } else { None };
        Ok(Self { w, b })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.p(b);
                g.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm over the last dim without affine parameters.
pub fn norm(g: &mut Graph, x: Var) -> Result<Var> {
    let d = g.tape.dims(x).last().copied().unwrap_or(1);
    let gamma = g.constant(NdTensor::ones(&[d])?);
    let beta = g.constant(NdTensor::zeros(&[d])?);
    g.tape.layer_norm(x, gamma, beta, LN_EPS)
}

/// `x * (1 + scale) + shift` with `shift`/`scale` shaped `[1, d]`.
pub fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let d = g.tape.dims(scale).to_vec();
    let one = g.constant(NdTensor::ones(&d)?);
    let s1 = g.tape.add(scale, one)?;
    let y = g.tape.mul(x, s1)?;
    g.tape.add(y, shift)
}

/// Splits a `[1, k*d]` modulation row into `k` chunks of width `d`.
pub fn chunks(g: &mut Graph, m: Var, k: usize) -> Result<Vec<Var>> {
    let d = g.tape.dims(m)[1] / k;
    (0..k).map(|i| g.tape.slice(m, 1, i * d, d)).collect()
}

/// Mean over rows as a `[1, d]` row, via a constant averaging matmul.
pub fn mean_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.tape.dims(x)[0];
    let avg = g.constant(NdTensor::full(&[1, n], 1.0 / n as f32)?);
    g.tape.matmul(avg, x)
}

/// `a - b`.
pub fn sub(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let nb = g.tape.scale(b, -1.0);
    g.tape.add(a, nb)
}
