//! Multi-head scaled dot-product attention.

use super::layers::Linear;
use super::params::{Graph, Init, ParamGroup, ParamStore};
use super::rope::BoundRope;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{NdTensor, SeedRng, Var};

/// `softmax(Q K^T / sqrt(d_k)) V` per head, heads concatenated along columns.
pub fn multi_head(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (qd, kd, vd) = (g.tape.dims(q).to_vec(), g.tape.dims(k).to_vec(), g.tape.dims(v).to_vec());
    if qd.len() != 2 || kd.len() != 2 || vd.len() != 2 {
        return shape_err("attention operands must be matrices");
    }
    if qd[1] != kd[1] || kd[0] != vd[0] {
        return shape_err(format!("attention shapes q {qd:?}, k {kd:?}, v {vd:?} are incompatible"));
    }
    if heads == 0 || qd[1] % heads != 0 || vd[1] % heads != 0 {
        return Err(Error::Config(format!("width {} not divisible by {heads} heads", qd[1])));
    }
    let (dk, dv) = (qd[1] / heads, vd[1] / heads);
    let kt = g.tape.transpose(k)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.slice(q, 1, h * dk, dk)?;
        let kh = g.tape.slice(kt, 0, h * dk, dk)?;
        let vh = g.tape.slice(v, 1, h * dv, dv)?;
        let s = g.tape.matmul(qh, kh)?;
        let s = g.tape.scale(s, 1.0 / (dk as f32).sqrt());
        let p = g.tape.softmax_rows(s)?;
        outs.push(g.tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.tape.concat(&outs, 1)
    }
}

/// Full (unmasked) attention over all tokens of already-projected q, k, v.
pub fn full_attention_3d(q: &NdTensor, k: &NdTensor, v: &NdTensor, heads: usize) -> Result<NdTensor> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = multi_head(&mut g, q, k, v, heads)?;
    Ok(g.value(out).clone())
}

/// Bias-free q/k/v/o projections.
#[derive(Clone, Debug)]
pub struct AttnProj {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttnProj {
    /// `kv_dim` is the width of the key/value source; `zero_out` zero-initialises `wo`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        kv_dim: usize,
        zero_out: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let out_init = if zero_out { Init::Zeros } else { Init::Lecun };
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), group, dim, dim, Init::Lecun, false, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), group, kv_dim, dim, Init::Lecun, false, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), group, kv_dim, dim, Init::Lecun, false, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), group, dim, dim, out_init, false, rng)?,
        })
    }

    /// Projected attention of `q_src` rows onto `kv_src` rows, with optional
    /// rotary tables for the query and key sides.
    pub fn attend(
        &self,
        g: &mut Graph,
        q_src: Var,
        kv_src: Var,
        rope: Option<(BoundRope, BoundRope)>,
        heads: usize,
    ) -> Result<Var> {
        let mut q = self.wq.forward(g, q_src)?;
        let mut k = self.wk.forward(g, kv_src)?;
        let v = self.wv.forward(g, kv_src)?;
        if let Some((rq, rk)) = rope {
            q = rq.apply(g, q)?;
            k = rk.apply(g, k)?;
        }
        let a = multi_head(g, q, k, v, heads)?;
        self.wo.forward(g, a)
    }
}
