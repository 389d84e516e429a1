//! Named parameter storage, freeze groups and the forward graph context.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{NdTensor, SeedRng, Tape, Var};

/// Freeze granularity used by the two training phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Vae,
    FaceEncoder,
    /// Transformer blocks of the denoiser and reference network, plus their
    /// patch/text/time embedders and the output head.
    FullAttention,
    FaceAttention,
    AudioAttention,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Vae,
        ParamGroup::FaceEncoder,
        ParamGroup::FullAttention,
        ParamGroup::FaceAttention,
        ParamGroup::AudioAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Vae => "vae",
            ParamGroup::FaceEncoder => "face_encoder",
            ParamGroup::FullAttention => "full_attention",
            ParamGroup::FaceAttention => "face_attention",
            ParamGroup::AudioAttention => "audio_attention",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown parameter group {s:?}")))
    }
}

/// Per-group trainable flags.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct FreezeMask {
    trainable: BTreeSet<ParamGroup>,
}

impl FreezeMask {
    pub fn frozen() -> Self {
        Self::default()
    }

    pub fn with_trainable(groups: &[ParamGroup]) -> Self {
        Self { trainable: groups.iter().copied().collect() }
    }

    pub fn is_trainable(&self, g: ParamGroup) -> bool {
        self.trainable.contains(&g)
    }

    pub fn trainable_groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.trainable.iter().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: NdTensor,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Normal(f32),
    /// Gaussian with std `1/sqrt(fan_in)`.
    Lecun,
    /// Semi-orthogonal: orthonormal rows or columns, whichever is shorter.
    Orthogonal,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: NdTensor) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        dims: &[usize],
        init: Init,
        rng: &mut SeedRng,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => NdTensor::zeros(dims)?,
            Init::Normal(std) => NdTensor::randn(dims, rng)?.map(|x| x * std),
            Init::Lecun => {
                let std = 1.0 / (dims[0] as f32).sqrt();
                NdTensor::randn(dims, rng)?.map(|x| x * std)
            }
            Init::Orthogonal => orthogonal(dims[0], dims[1], rng)?,
        };
        Ok(self.add(name, group, value))
    }

    pub fn get(&self, id: ParamId) -> &NdTensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdTensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn count_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Modified Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut SeedRng) -> Result<NdTensor> {
    let (short, long) = (rows.min(cols), rows.max(cols));
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(short);
    while vecs.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.normal() as f64).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            vecs.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut data = vec![0f32; rows * cols];
    for (k, v) in vecs.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            if rows <= cols {
                data[k * cols + j] = x as f32;
            } else {
                data[j * cols + k] = x as f32;
            }
        }
    }
    NdTensor::new(vec![rows, cols], data)
}

/// Tape plus lazily bound parameter leaves for one forward pass.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mask: FreezeMask,
}

impl<'a> Graph<'a> {
    /// Forward-only graph: every parameter is a constant.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::training(store, FreezeMask::frozen())
    }

    /// Parameters in trainable groups become gradient leaves.
    pub fn training(store: &'a ParamStore, mask: FreezeMask) -> Self {
        Self { tape: Tape::new(), store, bound: vec![None; store.len()], mask }
    }

    /// Runs `f` on a graph that borrows `tape`, so externally built graphs
    /// (e.g. a gradcheck harness) can reach model parameters.
    pub fn on_tape<R>(
        store: &'a ParamStore,
        mask: FreezeMask,
        tape: &mut Tape,
        f: impl FnOnce(&mut Graph<'a>) -> R,
    ) -> R {
        let mut g = Self::training(store, mask);
        g.tape = std::mem::take(tape);
        let out = f(&mut g);
        *tape = g.tape;
        out
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.param(id);
        let v = if self.mask.is_trainable(param.group) {
            self.tape.leaf(param.value.clone().with_requires_grad(true))
        } else {
            self.tape.constant(param.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: NdTensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &NdTensor {
        self.tape.value(v)
    }

    /// Gradients of `loss` for every bound trainable parameter.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, NdTensor)>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.get(v).map(|g| (ParamId(i), g.clone()))
            })
            .collect())
    }
}
