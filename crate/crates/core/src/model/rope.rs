//! 3D rotary positional encoding.
//!
//! Each head's channels are split 2:1:1 across the `(t, y, x)` axes. Within an
//! axis, adjacent channel pairs `(2i, 2i+1)` rotate by `pos * base^(-2i/d_axis)`.

use super::params::Graph;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, NdTensor, Var};

pub const DEFAULT_BASE: f64 = 10_000.0;

pub type Position = [f64; 3];

#[derive(Clone, Debug)]
pub struct Rope3d {
    heads: usize,
    head_dim: usize,
    base: f64,
}

impl Rope3d {
    pub fn new(model_dim: usize, heads: usize, base: f64) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("model_dim {model_dim} not divisible by {heads} heads")));
        }
        let head_dim = model_dim / heads;
        if !head_dim.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "head_dim {head_dim} must be divisible by 8 for the 2:1:1 rotary split"
            )));
        }
        Ok(Self { heads, head_dim, base })
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Channel counts per axis `(t, y, x)`.
    pub fn axis_dims(&self) -> [usize; 3] {
        [self.head_dim / 2, self.head_dim / 4, self.head_dim / 4]
    }

    /// Rotation angle of every channel pair in one head.
    pub fn angles(&self, pos: Position) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (axis, &d) in self.axis_dims().iter().enumerate() {
            for i in 0..d / 2 {
                let freq = self.base.powf(-2.0 * i as f64 / d as f64);
                out.push(pos[axis] * freq);
            }
        }
        out
    }

    /// Cos/sin tables; `None` positions get the identity rotation.
    pub fn tables(&self, positions: &[Option<Position>]) -> Result<RopeTables> {
        let dim = self.model_dim();
        let n = positions.len();
        let mut cos = vec![1f32; n * dim];
        let mut sin = vec![0f32; n * dim];
        for (i, p) in positions.iter().enumerate() {
            let Some(p) = p else { continue };
            let ang = self.angles(*p);
            for h in 0..self.heads {
                for (k, &a) in ang.iter().enumerate() {
                    let c = i * dim + h * self.head_dim + 2 * k;
                    let (s, co) = a.sin_cos();
                    cos[c] = co as f32;
                    cos[c + 1] = co as f32;
                    sin[c] = s as f32;
                    sin[c + 1] = s as f32;
                }
            }
        }
        Ok(RopeTables { cos: NdTensor::new(vec![n, dim], cos)?, sin: NdTensor::new(vec![n, dim], sin)? })
    }

    /// Pair-swap matrix `R` with `(xR)_{2i} = -x_{2i+1}`, `(xR)_{2i+1} = x_{2i}`.
    pub fn rotation_matrix(&self) -> Result<NdTensor> {
        let dim = self.model_dim();
        let mut r = NdTensor::zeros(&[dim, dim])?;
        for k in (0..dim).step_by(2) {
            r.data_mut()[(k + 1) * dim + k] = -1.0;
            r.data_mut()[k * dim + k + 1] = 1.0;
        }
        Ok(r)
    }
}

#[derive(Clone, Debug)]
pub struct RopeTables {
    pub cos: NdTensor,
    pub sin: NdTensor,
}

impl RopeTables {
    pub fn len(&self) -> usize {
        self.cos.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(parts: &[&RopeTables]) -> Result<Self> {
        let cos: Vec<&NdTensor> = parts.iter().map(|p| &p.cos).collect();
        let sin: Vec<&NdTensor> = parts.iter().map(|p| &p.sin).collect();
        Ok(Self { cos: ops::concat(&cos, 0)?, sin: ops::concat(&sin, 0)? })
    }

    pub fn bind(&self, g: &mut Graph, rope: &Rope3d) -> Result<BoundRope> {
        Ok(BoundRope {
            cos: g.constant(self.cos.clone()),
            sin: g.constant(self.sin.clone()),
            rot: g.constant(rope.rotation_matrix()?),
        })
    }
}

/// Tables registered on a graph as constants.
#[derive(Clone, Copy, Debug)]
pub struct BoundRope {
    cos: Var,
    sin: Var,
    rot: Var,
}

impl BoundRope {
    /// `x * cos + (x R) * sin`.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = g.tape.mul(x, self.cos)?;
        let xr = g.tape.matmul(x, self.rot)?;
        let b = g.tape.mul(xr, self.sin)?;
        g.tape.add(a, b)
    }
}

/// Applies 3D RoPE to `[n, model_dim]` tokens by rotating channel pairs directly.
pub fn rope_3d(tokens: &NdTensor, positions: &[Position], rope: &Rope3d) -> Result<NdTensor> {
    if tokens.rank() != 2 || tokens.dims()[1] != rope.model_dim() {
        return shape_err(format!("rope expects [n, {}] tokens, got {:?}", rope.model_dim(), tokens.dims()));
    }
    if positions.len() != tokens.dims()[0] {
        return shape_err(format!("{} positions for {} tokens", positions.len(), tokens.dims()[0]));
    }
    let dim = rope.model_dim();
    let mut out = tokens.clone().into_data();
    for (i, p) in positions.iter().enumerate() {
        let ang = rope.angles(*p);
        for h in 0..rope.heads {
            for (k, &a) in ang.iter().enumerate() {
                let c = i * dim + h * rope.head_dim + 2 * k;
                let (s, co) = a.sin_cos();
                let (x0, x1) = (out[c] as f64, out[c + 1] as f64);
                out[c] = (x0 * co - x1 * s) as f32;
                out[c + 1] = (x0 * s + x1 * co) as f32;
            }
        }
    }
    NdTensor::new(tokens.dims().to_vec(), out)
}
