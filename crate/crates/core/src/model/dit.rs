//! Diffusion transformer denoiser with expert adaLN and a parallel
//! reference network.

use sha2::{Digest, Sha256};

use super::attention::AttnProj;
use super::codec::CausalCodec;
use super::latent::LatentClip;
use super::layers::{self, Linear};
use super::params::{Graph, Init, ParamGroup, ParamStore};
use super::patch::{self, PatchSize};
use super::rope::{BoundRope, Position, Rope3d, RopeTables, DEFAULT_BASE};
use crate::conditioning::{
    Activation, AudioFeatureConfig, AudioInjector, AudioLayout, AudioProjection, AudioStrategy, ConditionSet,
    FaceAttention, FaceEncoder, IdentityMode, MotionCondition, TextEmbedding,
};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, NdTensor, SeedRng, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DitConfig {
    pub depth: usize,
    pub ref_depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: PatchSize,
    /// Latent frames per clip (`l`).
    pub frames: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub codec_stride: usize,
    pub codec_patch: usize,
    pub pixel_channels: usize,
    pub text_tokens: usize,
    pub text_dim: usize,
    pub audio: AudioFeatureConfig,
    pub audio_act: Activation,
    pub audio_strategy: AudioStrategy,
    pub face_dim: usize,
    pub identity_mode: IdentityMode,
    pub rope_base: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            ref_depth: 4,
            model_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            patch: [1, 2, 2],
            frames: 7,
            latent_height: 8,
            latent_width: 12,
            codec_stride: 2,
            codec_patch: 2,
            pixel_channels: 1,
            text_tokens: 4,
            text_dim: 16,
            audio: AudioFeatureConfig::default(),
            audio_act: Activation::Gelu,
            audio_strategy: AudioStrategy::CrossAttention,
            face_dim: 16,
            identity_mode: IdentityMode::FaceAttentionPlusRefNet,
            rope_base: DEFAULT_BASE,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("frames", self.frames),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
            ("codec_stride", self.codec_stride),
            ("codec_patch", self.codec_patch),
            ("pixel_channels", self.pixel_channels),
            ("text_tokens", self.text_tokens),
            ("text_dim", self.text_dim),
            ("face_dim", self.face_dim),
            ("audio.layer_dim", self.audio.layer_dim),
            ("audio.samples_per_frame", self.audio.samples_per_frame),
            ("audio.window", self.audio.window),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.patch.contains(&0) {
            return Err(Error::Config("patch sizes must be positive".into()));
        }
        if self.ref_depth != self.depth {
            return Err(Error::Config(format!(
                "reference network depth {} must equal denoiser depth {}",
                self.ref_depth, self.depth
            )));
        }
        Rope3d::new(self.model_dim, self.heads, self.rope_base)?;
        patch::grid(&[self.frames, self.latent_height, self.latent_width], self.patch)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn latent_channels(&self) -> usize {
        self.codec_stride * self.codec_patch * self.codec_patch * self.pixel_channels
    }

    pub fn pixel_frames(&self) -> usize {
        self.frames * self.codec_stride
    }

    pub fn pixel_height(&self) -> usize {
        self.latent_height * self.codec_patch
    }

    pub fn pixel_width(&self) -> usize {
        self.latent_width * self.codec_patch
    }

    pub fn latent_dims(&self) -> [usize; 4] {
        [self.frames, self.latent_height, self.latent_width, self.latent_channels()]
    }

    pub fn grid(&self) -> [usize; 3] {
        let [pt, ph, pw] = self.patch;
        [self.frames / pt, self.latent_height / ph, self.latent_width / pw]
    }

    pub fn tokens_per_group(&self) -> usize {
        let [_, gh, gw] = self.grid();
        gh * gw
    }

    pub fn vision_tokens(&self) -> usize {
        self.grid().iter().product()
    }

    /// Patch width of the denoiser input (noisy latent plus motion half).
    pub fn patch_in(&self) -> usize {
        2 * self.patch_out()
    }

    pub fn patch_out(&self) -> usize {
        self.patch.iter().product::<usize>() * self.latent_channels()
    }

    /// Stable `key=value` rendering used for hashing.
    pub fn canonical(&self) -> String {
        format!(
            "depth={}\nref_depth={}\nmodel_dim={}\nheads={}\nmlp_ratio={}\npatch={},{},{}\nframes={}\n\
             latent_height={}\nlatent_width={}\ncodec_stride={}\ncodec_patch={}\npixel_channels={}\n\
             text_tokens={}\ntext_dim={}\naudio_layer_dim={}\naudio_samples_per_frame={}\naudio_window={}\n\
             audio_seed={}\naudio_act={}\naudio_strategy={}\nface_dim={}\nidentity_mode={}\nrope_base={}\n",
            self.depth,
            self.ref_depth,
            self.model_dim,
            self.heads,
            self.mlp_ratio,
            self.patch[0],
            self.patch[1],
            self.patch[2],
            self.frames,
            self.latent_height,
            self.latent_width,
            self.codec_stride,
            self.codec_patch,
            self.pixel_channels,
            self.text_tokens,
            self.text_dim,
            self.audio.layer_dim,
            self.audio.samples_per_frame,
            self.audio.window,
            self.audio.seed,
            self.audio_act,
            self.audio_strategy,
            self.face_dim,
            self.identity_mode,
            self.rope_base,
        )
    }

    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-layer tokens of the reference network, taken at each layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFeatures {
    layers: Vec<NdTensor>,
}

impl ReferenceFeatures {
    pub fn new(layers: Vec<NdTensor>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Contract("reference features need at least one layer".into()));
        };
        if layers.iter().any(|l| l.dims() != first.dims() || l.rank() != 2) {
            return shape_err("reference feature layers must share one [tokens, dim] shape");
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[NdTensor] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn tokens(&self) -> usize {
        self.layers[0].dims()[0]
    }
}

/// Sinusoidal embedding `[cos(t f_i), sin(t f_i)]` of a timestep.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<NdTensor> {
    let half = dim / 2;
    let mut out = vec![0f32; dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * f).cos() as f32;
        out[half + i] = (t * f).sin() as f32;
    }
    NdTensor::new(vec![1, dim], out)
}

/// Shift, scale and gate for the attention and MLP sublayers.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub shift1: Var,
    pub scale1: Var,
    pub gate1: Var,
    pub shift2: Var,
    pub scale2: Var,
    pub gate2: Var,
}

impl Modulation {
    fn from_row(g: &mut Graph, m: Var) -> Result<Self> {
        let c = layers::chunks(g, m, 6)?;
        Ok(Self { shift1: c[0], scale1: c[1], gate1: c[2], shift2: c[3], scale2: c[4], gate2: c[5] })
    }
}

#[derive(Clone, Debug)]
pub struct DitBlock {
    pub mod_vision: Linear,
    pub mod_text: Linear,
    pub attn: AttnProj,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl DitBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, rng: &mut SeedRng) -> Result<Self> {
        let g = ParamGroup::FullAttention;
        Ok(Self {
            mod_vision: Linear::new(store, &format!("{name}.mod_v"), g, dim, 6 * dim, Init::Zeros, true, rng)?,
            mod_text: Linear::new(store, &format!("{name}.mod_t"), g, dim, 6 * dim, Init::Zeros, true, rng)?,
            attn: AttnProj::new(store, &format!("{name}.attn"), g, dim, dim, false, rng)?,
            mlp1: Linear::new(store, &format!("{name}.mlp1"), g, dim, ratio * dim, Init::Lecun, true, rng)?,
            mlp2: Linear::new(store, &format!("{name}.mlp2"), g, ratio * dim, dim, Init::Lecun, true, rng)?,
        })
    }

    /// Separate vision and text modulations from the conditioning vector.
    pub fn expert_adaln(&self, g: &mut Graph, e: Var) -> Result<(Modulation, Modulation)> {
        let mv = self.mod_vision.forward(g, e)?;
        let mt = self.mod_text.forward(g, e)?;
        Ok((Modulation::from_row(g, mv)?, Modulation::from_row(g, mt)?))
    }
}

/// Residual-stream tokens between layers.
#[derive(Clone, Copy, Debug)]
pub struct LayerState {
    pub text: Option<Var>,
    pub vision: Var,
}

/// Per-forward inputs shared by every layer.
#[derive(Clone, Debug)]
pub struct LayerContext<'a> {
    /// Activated conditioning vector `[1, dim]`.
    pub e: Var,
    /// Rotary tables for the query rows `[text; vision]`.
    pub rope_q: BoundRope,
    /// Rotary tables for the key rows `[text; vision; reference]`.
    pub rope_kv: BoundRope,
    /// Raw reference tokens, one per layer.
    pub reference: Option<Vec<Var>>,
    pub face: Option<Var>,
    pub audio: Option<(Var, &'a AudioLayout)>,
}

#[derive(Clone, Debug)]
pub struct AnimaModel {
    pub cfg: DitConfig,
    pub store: ParamStore,
    pub codec: CausalCodec,
    pub face_encoder: FaceEncoder,
    rope: Rope3d,
    patch_embed: Linear,
    ref_patch_embed: Linear,
    time1: Linear,
    time2: Linear,
    text_proj: Linear,
    text_cond: Linear,
    face_cond: Option<Linear>,
    blocks: Vec<DitBlock>,
    ref_blocks: Vec<DitBlock>,
    face_layers: Vec<FaceAttention>,
    final_mod: Linear,
    final_out: Linear,
    audio_proj: AudioProjection,
    audio_layers: Vec<AudioInjector>,
}

impl AnimaModel {
    pub fn new(cfg: DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = SeedRng::new(seed);
        let mut store = ParamStore::new();
        let d = cfg.model_dim;
        let fa = ParamGroup::FullAttention;
        let codec = CausalCodec::new(
            &mut store,
            cfg.codec_stride,
            cfg.codec_patch,
            cfg.pixel_channels,
            &mut root.split("codec"),
        )?;
        let pixels = cfg.pixel_height() * cfg.pixel_width() * cfg.pixel_channels;
        let face_encoder = FaceEncoder::new(&mut store, pixels, cfg.face_dim, &mut root.split("face_encoder"))?;

        let mut rng = root.split("embed");
        let patch_embed =
            Linear::new(&mut store, "patch_embed", fa, cfg.patch_in(), d, Init::Orthogonal, false, &mut rng)?;
        let ref_patch_embed =
            Linear::new(&mut store, "ref_patch_embed", fa, cfg.patch_out(), d, Init::Orthogonal, false, &mut rng)?;
        let time1 = Linear::new(&mut store, "time.l1", fa, d, d, Init::Lecun, true, &mut rng)?;
        let time2 = Linear::new(&mut store, "time.l2", fa, d, d, Init::Lecun, true, &mut rng)?;
        let text_proj = Linear::new(&mut store, "text.proj", fa, cfg.text_dim, d, Init::Lecun, true, &mut rng)?;
        let text_cond = Linear::new(&mut store, "text.cond", fa, cfg.text_dim, d, Init::Lecun, false, &mut rng)?;
        let face_cond = if cfg.identity_mode.uses_face_adaln() {
            let mut r = root.split("face_cond");
            Some(Linear::new(
                &mut store,
                "face.cond",
                ParamGroup::FaceAttention,
                cfg.face_dim,
                d,
                Init::Lecun,
                false,
                &mut r,
            )?)
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut ref_blocks = Vec::with_capacity(cfg.ref_depth);
        let mut face_layers = Vec::new();
        for i in 0..cfg.depth {
            let mut r = root.split_index("block", i as u64);
            blocks.push(DitBlock::new(&mut store, &format!("blocks.{i}"), d, cfg.mlp_ratio, &mut r)?);
            if cfg.identity_mode.uses_face_attention() {
                let mut r = root.split_index("face_attn", i as u64);
                face_layers.push(FaceAttention::new(&mut store, &format!("face_attn.{i}"), d, cfg.face_dim, &mut r)?);
            }
        }
        for i in 0..cfg.ref_depth {
            let mut r = root.split_index("ref_block", i as u64);
            ref_blocks.push(DitBlock::new(&mut store, &format!("ref_blocks.{i}"), d, cfg.mlp_ratio, &mut r)?);
        }
        let mut r = root.split("final");
        let final_mod = Linear::new(&mut store, "final.mod", fa, d, 2 * d, Init::Zeros, true, &mut r)?;
        let final_out = Linear::new(&mut store, "final.out", fa, d, cfg.patch_out(), Init::Zeros, true, &mut r)?;

        let mut r = root.split("audio");
        let audio_proj = AudioProjection::new(&mut store, cfg.audio.width(), d, cfg.audio_act, &mut r)?;
        let mut audio_layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut r = root.split_index("audio_attn", i as u64);
            audio_layers.push(AudioInjector::new(
                &mut store,
                &format!("audio_attn.{i}"),
                cfg.audio_strategy,
                d,
                &mut r,
            )?);
        }
        let rope = Rope3d::new(d, cfg.heads, cfg.rope_base)?;
        Ok(Self {
            cfg,
            store,
            codec,
            face_encoder,
            rope,
            patch_embed,
            ref_patch_embed,
            time1,
            time2,
            text_proj,
            text_cond,
            face_cond,
            blocks,
            ref_blocks,
            face_layers,
            final_mod,
            final_out,
            audio_proj,
            audio_layers,
        })
    }

    pub fn blocks(&self) -> &[DitBlock] {
        &self.blocks
    }

    pub fn ref_blocks(&self) -> &[DitBlock] {
        &self.ref_blocks
    }

    pub fn face_layers(&self) -> &[FaceAttention] {
        &self.face_layers
    }

    pub fn audio_layers(&self) -> &[AudioInjector] {
        &self.audio_layers
    }

    pub fn audio_projection(&self) -> &AudioProjection {
        &self.audio_proj
    }

    pub fn rope(&self) -> &Rope3d {
        &self.rope
    }

    /// Copies every parameter of `other` whose name and shape match; returns the count.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        let ids: Vec<_> = self.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            if let Some(src) = other.find(&name) {
                let v = other.get(src);
                if v.dims() == self.store.get(id).dims() {
                    *self.store.get_mut(id) = v.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Grid positions of vision tokens.
    pub fn vision_positions(&self) -> Result<Vec<Position>> {
        let c = &self.cfg;
        patch::token_positions(&[c.frames, c.latent_height, c.latent_width], c.patch)
    }

    /// Reference tokens sit at temporal position 0.
    pub fn reference_positions(&self) -> Result<Vec<Position>> {
        let c = &self.cfg;
        patch::token_positions(&[c.patch[0], c.latent_height, c.latent_width], c.patch)
    }

    /// Query and key rotary tables; text rows get the identity rotation.
    pub fn rope_tables(&self, text_rows: usize, with_reference: bool) -> Result<(RopeTables, RopeTables)> {
        let mut pos: Vec<Option<Position>> = vec![None; text_rows];
        pos.extend(self.vision_positions()?.into_iter().map(Some));
        let q = self.rope.tables(&pos)?;
        let kv = if with_reference {
            let r = self.rope.tables(&self.reference_positions()?.into_iter().map(Some).collect::<Vec<_>>())?;
            RopeTables::concat(&[&q, &r])?
        } else {
            q.clone()
        };
        Ok((q, kv))
    }

    /// `gelu(time_mlp(t) + W_text mean(c_text) [+ W_face c_id])`.
    pub fn conditioning_vector(&self, g: &mut Graph, t: f64, text: Option<Var>, face: Option<Var>) -> Result<Var> {
        let te = g.constant(timestep_embedding(t, self.cfg.model_dim)?);
        let h = self.time1.forward(g, te)?;
        let h = g.tape.gelu(h);
        let mut e = self.time2.forward(g, h)?;
        if let Some(text) = text {
            let m = layers::mean_rows(g, text)?;
            let tc = self.text_cond.forward(g, m)?;
            e = g.tape.add(e, tc)?;
        }
        if let (Some(fc), Some(face)) = (&self.face_cond, face) {
            let f = fc.forward(g, face)?;
            e = g.tape.add(e, f)?;
        }
        Ok(g.tape.gelu(e))
    }

    /// Forward-only expert adaLN rows `([1, 6d] vision, [1, 6d] text)` of one layer.
    pub fn expert_adaln(&self, layer: usize, text: &TextEmbedding, t: f64) -> Result<(NdTensor, NdTensor)> {
        let block = self.blocks.get(layer).ok_or_else(|| Error::Index(format!("layer {layer} beyond depth")))?;
        self.check_text(text)?;
        let mut g = Graph::inference(&self.store);
        let tv = g.constant(text.tokens().clone());
        let e = self.conditioning_vector(&mut g, t, Some(tv), None)?;
        let mv = block.mod_vision.forward(&mut g, e)?;
        let mt = block.mod_text.forward(&mut g, e)?;
        Ok((g.value(mv).clone(), g.value(mt).clone()))
    }

    fn check_text(&self, text: &TextEmbedding) -> Result<()> {
        if text.count() != self.cfg.text_tokens || text.dim() != self.cfg.text_dim {
            return shape_err(format!(
                "text embedding [{}, {}] does not match config [{}, {}]",
                text.count(),
                text.dim(),
                self.cfg.text_tokens,
                self.cfg.text_dim
            ));
        }
        Ok(())
    }

    /// Attention, face, audio and MLP sublayers of denoiser layer `i`.
    pub fn layer_forward(&self, g: &mut Graph, i: usize, state: LayerState, ctx: &LayerContext) -> Result<LayerState> {
        let heads = self.cfg.heads;
        let block = &self.blocks[i];
        let reference = ctx.reference.as_ref().map(|r| r[i]);
        let mods = block.expert_adaln(g, ctx.e)?;
        let mut state = attention_sublayer(g, block, mods, state, reference, ctx.rope_q, ctx.rope_kv, heads)?;
        if let (Some(face), Some(layer)) = (ctx.face, self.face_layers.get(i)) {
            state.vision = layer.forward(g, state.vision, face, heads)?;
        }
        if let Some((audio, layout)) = ctx.audio {
            state.vision = self.audio_layers[i].forward(g, state.vision, audio, layout, heads)?;
        }
        mlp_sublayer(g, block, mods, state)
    }

    /// Reference-network features of a single-frame latent, on the graph.
    pub fn reference_tokens(&self, g: &mut Graph, reference: &LatentClip) -> Result<Vec<Var>> {
        if reference.frames() != 1 {
            return Err(Error::Contract(format!("reference must be a single frame, got {}", reference.frames())));
        }
        let c = &self.cfg;
        if reference.data().dims()[1..] != [c.latent_height, c.latent_width, c.latent_channels()] {
            return shape_err(format!("reference latent {:?} does not match config", reference.data().dims()));
        }
        let data = ops::pad(reference.data(), 0, 0, c.patch[0] - 1)?;
        let patches = g.constant(patch::to_patches(&data, c.patch)?);
        let mut x = self.ref_patch_embed.forward(g, patches)?;
        let e = self.conditioning_vector(g, 0.0, None, None)?;
        let positions: Vec<Option<Position>> = self.reference_positions()?.into_iter().map(Some).collect();
        let rope = self.rope.tables(&positions)?.bind(g, &self.rope)?;
        let mut out = Vec::with_capacity(self.ref_blocks.len());
        for block in &self.ref_blocks {
            out.push(x);
            let s = LayerState { text: None, vision: x };
            let mods = block.expert_adaln(g, e)?;
            let s = attention_sublayer(g, block, mods, s, None, rope, rope, c.heads)?;
            x = mlp_sublayer(g, block, mods, s)?.vision;
        }
        Ok(out)
    }

    pub fn reference_forward(&self, reference: &LatentClip) -> Result<ReferenceFeatures> {
        let mut g = Graph::inference(&self.store);
        let vars = self.reference_tokens(&mut g, reference)?;
        ReferenceFeatures::new(vars.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Denoiser output in token space, `[vision_tokens, patch_out]`.
    ///
    /// `motion` is the condition half `[l, H, W, C]`; `None` means all padding.
    pub fn forward(
        &self,
        g: &mut Graph,
        zt: &NdTensor,
        motion: Option<&NdTensor>,
        t: f64,
        cond: &ConditionSet,
    ) -> Result<Var> {
        let c = &self.cfg;
        let dims = c.latent_dims();
        if zt.dims() != dims {
            return shape_err(format!("noisy latent {:?} does not match config {dims:?}", zt.dims()));
        }
        let zeros;
        let motion = match motion {
            Some(m) if m.dims() == dims => m,
            Some(m) => return shape_err(format!("motion half {:?} does not match {dims:?}", m.dims())),
            None => {
                zeros = NdTensor::zeros(&dims)?;
                &zeros
            }
        };
        let input = ops::concat(&[zt, motion], 3)?;
        let patches = g.constant(patch::to_patches(&input, c.patch)?);
        let vision = self.patch_embed.forward(g, patches)?;

        let text = match &cond.text {
            Some(t) => {
                self.check_text(t)?;
                t.clone()
            }
            None => TextEmbedding::null(c.text_tokens, c.text_dim)?,
        };
        let text_raw = g.constant(text.tokens().clone());
        let text_tokens = self.text_proj.forward(g, text_raw)?;

        let mut face = None;
        let mut reference = None;
        if let Some(id) = &cond.identity {
            if id.mode != c.identity_mode {
                return Err(Error::Config(format!(
                    "identity condition mode {} differs from model mode {}",
                    id.mode, c.identity_mode
                )));
            }
            id.validate()?;
            if c.identity_mode.uses_face() {
                if id.face_embed.dims() != [1, c.face_dim] {
                    return shape_err(format!("face embedding {:?} is not [1, {}]", id.face_embed.dims(), c.face_dim));
                }
                face = Some(g.constant(id.face_embed.clone()));
            }
            if c.identity_mode.uses_ref_net() {
                reference = Some(match (&id.ref_features, &id.ref_latent) {
                    (Some(f), _) => {
                        if f.depth() != c.depth {
                            return shape_err(format!("{} reference layers for depth {}", f.depth(), c.depth));
                        }
                        f.layers().iter().map(|l| g.constant(l.clone())).collect()
                    }
                    (None, Some(latent)) => self.reference_tokens(g, latent)?,
                    (None, None) => unreachable!("validated above"),
                });
            }
        }

        let layout;
        let audio = match &cond.audio {
            Some(a) => {
                if a.frames() != c.pixel_frames() || a.features().dims()[1] != c.audio.width() {
                    return shape_err(format!(
                        "audio features {:?} do not match [{}, {}]",
                        a.features().dims(),
                        c.pixel_frames(),
                        c.audio.width()
                    ));
                }
                let raw = g.constant(a.features().clone());
                let projected = self.audio_proj.forward(g, raw)?;
                layout = match c.audio_strategy {
                    AudioStrategy::CrossAttention => {
                        AudioLayout::per_frame(c.grid()[0], c.tokens_per_group(), c.patch[0] * c.codec_stride)
                    }
                    _ => AudioLayout::full(c.vision_tokens(), c.pixel_frames()),
                };
                Some((projected, &layout))
            }
            None => None,
        };

        let e = self.conditioning_vector(g, t, Some(text_raw), face.filter(|_| c.identity_mode.uses_face_adaln()))?;
        let (tq, tkv) = self.rope_tables(c.text_tokens, reference.is_some())?;
        let rope_q = tq.bind(g, &self.rope)?;
        let rope_kv = if reference.is_some() { tkv.bind(g, &self.rope)? } else { rope_q };
        let face_attn = face.filter(|_| c.identity_mode.uses_face_attention());
        let ctx = LayerContext { e, rope_q, rope_kv, reference, face: face_attn, audio };

        let mut state = LayerState { text: Some(text_tokens), vision };
        for i in 0..self.blocks.len() {
            state = self.layer_forward(g, i, state, &ctx)?;
        }
        let m = self.final_mod.forward(g, e)?;
        let sc = layers::chunks(g, m, 2)?;
        let h = layers::norm(g, state.vision)?;
        let h = layers::modulate(g, h, sc[0], sc[1])?;
        self.final_out.forward(g, h)
    }

    /// Forward-only v prediction as a `[l, H, W, C]` latent.
    pub fn predict_v(
        &self,
        zt: &NdTensor,
        motion: Option<&MotionCondition>,
        t: f64,
        cond: &ConditionSet,
    ) -> Result<NdTensor> {
        self.predict_v_raw(zt, motion.map(|m| m.cond.data()), t, cond)
    }

    /// As [`predict_v`](Self::predict_v) with the condition half given directly.
    pub fn predict_v_raw(
        &self,
        zt: &NdTensor,
        motion: Option<&NdTensor>,
        t: f64,
        cond: &ConditionSet,
    ) -> Result<NdTensor> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, zt, motion, t, cond)?;
        patch::from_patches(g.value(out), self.cfg.latent_dims(), self.cfg.patch)
    }

    /// Face embedding and reference latent of a single pixel frame `[1, H0, W0, C0]`.
    pub fn encode_reference(&self, image: &NdTensor) -> Result<(NdTensor, LatentClip)> {
        if image.rank() != 4 || image.dims()[0] != 1 {
            return Err(Error::Contract(format!("reference image must be one frame, got {:?}", image.dims())));
        }
        let face = self.face_encoder.encode(&self.store, image)?;
        let latent = self.codec.encode(&self.store, image)?;
        Ok((face, latent))
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_sublayer(
    g: &mut Graph,
    block: &DitBlock,
    (mv, mt): (Modulation, Modulation),
    state: LayerState,
    reference: Option<Var>,
    rope_q: BoundRope,
    rope_kv: BoundRope,
    heads: usize,
) -> Result<LayerState> {
    let nv = g.tape.dims(state.vision)[0];
    let hv = layers::norm(g, state.vision)?;
    let hv = layers::modulate(g, hv, mv.shift1, mv.scale1)?;
    let (h, nt) = match state.text {
        Some(xt) => {
            let ht = layers::norm(g, xt)?;
            let ht = layers::modulate(g, ht, mt.shift1, mt.scale1)?;
            let nt = g.tape.dims(xt)[0];
            (g.tape.concat(&[ht, hv], 0)?, nt)
        }
        None => (hv, 0),
    };
    let kv = match reference {
        Some(r) => {
            let hr = layers::norm(g, r)?;
            let hr = layers::modulate(g, hr, mv.shift1, mv.scale1)?;
            g.tape.concat(&[h, hr], 0)?
        }
        None => h,
    };
    let a = block.attn.attend(g, h, kv, Some((rope_q, rope_kv)), heads)?;
    gated_residual(g, state, a, nt, nv, mv.gate1, mt.gate1)
}

fn mlp_sublayer(
    g: &mut Graph,
    block: &DitBlock,
    (mv, mt): (Modulation, Modulation),
    state: LayerState,
) -> Result<LayerState> {
    let nv = g.tape.dims(state.vision)[0];
    let hv = layers::norm(g, state.vision)?;
    let hv = layers::modulate(g, hv, mv.shift2, mv.scale2)?;
    let (h, nt) = match state.text {
        Some(xt) => {
            let ht = layers::norm(g, xt)?;
            let ht = layers::modulate(g, ht, mt.shift2, mt.scale2)?;
            let nt = g.tape.dims(xt)[0];
            (g.tape.concat(&[ht, hv], 0)?, nt)
        }
        None => (hv, 0),
    };
    let h = block.mlp1.forward(g, h)?;
    let h = g.tape.gelu(h);
    let m = block.mlp2.forward(g, h)?;
    gated_residual(g, state, m, nt, nv, mv.gate2, mt.gate2)
}

/// `x += gate * delta`, split between the text rows and the vision rows of `delta`.
fn gated_residual(
    g: &mut Graph,
    state: LayerState,
    delta: Var,
    nt: usize,
    nv: usize,
    gate_v: Var,
    gate_t: Var,
) -> Result<LayerState> {
    let dv = g.tape.slice(delta, 0, nt, nv)?;
    let dv = g.tape.mul(dv, gate_v)?;
    let vision = g.tape.add(state.vision, dv)?;
    let text = match state.text {
        Some(xt) => {
            let dt = g.tape.slice(delta, 0, 0, nt)?;
            let dt = g.tape.mul(dt, gate_t)?;
            Some(g.tape.add(xt, dt)?)
        }
        None => None,
    };
    Ok(LayerState { text, vision })
}
