//! Finite-difference gradient checks over every tape primitive and one full
//! DiT layer.

use crate::conditioning::{AudioFeatureConfig, AudioLayout};
use crate::error::Result;
use crate::model::dit::{LayerContext, LayerState};
use crate::model::{AnimaModel, DitConfig, FreezeMask, Graph, ParamGroup};
use crate::tensor::gradcheck::{central_fit, gradcheck, project_f64, projection, GradcheckOptions, GradcheckReport};
use crate::tensor::{NdTensor, SeedRng, Tape, Var};

/// Small layer configuration for the block check.
pub fn block_config() -> DitConfig {
    DitConfig {
        depth: 1,
        ref_depth: 1,
        model_dim: 16,
        heads: 2,
        mlp_ratio: 2,
        frames: 2,
        latent_height: 2,
        latent_width: 4,
        text_tokens: 2,
        text_dim: 4,
        face_dim: 4,
        audio: AudioFeatureConfig { layer_dim: 2, ..Default::default() },
        ..DitConfig::default()
    }
}

fn randn(dims: &[usize], rng: &mut SeedRng) -> NdTensor {
    NdTensor::randn(dims, rng).expect("nonempty dims")
}

type Case = (&'static str, Vec<NdTensor>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = SeedRng::new(seed).split("inputs");
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {{
            let f: fn(&mut Tape, &[Var]) -> Result<Var> = $f;
            cases.push(($name, $inputs, f));
        }};
    }
    case!("matmul", vec![randn(&[6, 8], r), randn(&[8, 5], r)], |t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1]));
    case!("add", vec![randn(&[6, 8], r), randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| t.add(v[0], v[1]));
    case!("add_row_broadcast", vec![randn(&[6, 8], r), randn(&[1, 8], r)], |t: &mut Tape, v: &[Var]| t.add(v[0], v[1]));
    case!("mul", vec![randn(&[6, 8], r), randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]));
    case!("mul_row_broadcast", vec![randn(&[6, 8], r), randn(&[1, 8], r)], |t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]));
    case!("scale", vec![randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| Ok(t.scale(v[0], -1.7)));
    case!("concat_rows", vec![randn(&[4, 6], r), randn(&[5, 6], r)], |t: &mut Tape, v: &[Var]| t.concat(v, 0));
    case!("concat_cols", vec![randn(&[5, 6], r), randn(&[5, 4], r)], |t: &mut Tape, v: &[Var]| t.concat(v, 1));
    case!("slice", vec![randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| t.slice(v[0], 1, 1, 3));
    case!("pad", vec![randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| t.pad(v[0], 0, 1, 2));
    case!("transpose", vec![randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| t.transpose(v[0]));
    case!("softmax_rows", vec![randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| t.softmax_rows(v[0]));
    case!("layer_norm", vec![randn(&[6, 8], r), randn(&[1, 8], r), randn(&[1, 8], r)], |t: &mut Tape, v: &[Var]| t
        .layer_norm(v[0], v[1], v[2], 1e-5));
    case!("gelu", vec![randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| Ok(t.gelu(v[0])));
    case!("mean", vec![randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| Ok(t.mean(v[0])));
    case!("sum", vec![randn(&[6, 8], r)], |t: &mut Tape, v: &[Var]| Ok(t.sum(v[0])));
    case!("mse", vec![randn(&[2, 3], r), randn(&[2, 3], r)], |t: &mut Tape, v: &[Var]| t.mse(v[0], v[1]));
    cases
}

/// Adds `scale * N(0, 1)` to every parameter so no path is zero-initialised.
pub fn randomize_params(model: &mut AnimaModel, scale: f32, seed: u64) {
    let mut rng = SeedRng::new(seed).split("randomize");
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for x in model.store.get_mut(id).data_mut() {
            *x += scale * rng.normal();
        }
    }
}

/// Model and leaf inputs of the block check: text, vision, conditioning
/// vector, reference tokens, face token and projected audio.
pub fn block_fixture(seed: u64) -> Result<(AnimaModel, Vec<NdTensor>)> {
    let cfg = block_config();
    let mut model = AnimaModel::new(cfg.clone(), seed)?;
    randomize_params(&mut model, 0.1, seed);
    let mut rng = SeedRng::new(seed).split("block_inputs");
    let d = cfg.model_dim;
    let inputs = vec![
        NdTensor::randn(&[cfg.text_tokens, d], &mut rng)?,
        NdTensor::randn(&[cfg.vision_tokens(), d], &mut rng)?,
        NdTensor::randn(&[1, d], &mut rng)?,
        NdTensor::randn(&[cfg.latent_height / cfg.patch[1] * (cfg.latent_width / cfg.patch[2]), d], &mut rng)?,
        NdTensor::randn(&[1, cfg.face_dim], &mut rng)?,
        NdTensor::randn(&[cfg.pixel_frames(), d], &mut rng)?,
    ];
    Ok((model, inputs))
}

/// Text and vision streams after layer 0, stacked, for the six block inputs.
pub fn block_output(model: &AnimaModel, g: &mut Graph, v: &[Var]) -> Result<Var> {
    let c = &model.cfg;
    let layout = AudioLayout::per_frame(c.grid()[0], c.tokens_per_group(), c.patch[0] * c.codec_stride);
    let (q, kv) = model.rope_tables(c.text_tokens, true)?;
    let rope_q = q.bind(g, model.rope())?;
    let rope_kv = kv.bind(g, model.rope())?;
    let ctx = LayerContext {
        e: v[2],
        rope_q,
        rope_kv,
        reference: Some(vec![v[3]; c.depth]),
        face: Some(v[4]),
        audio: Some((v[5], &layout)),
    };
    let out = model.layer_forward(g, 0, LayerState { text: Some(v[0]), vision: v[1] }, &ctx)?;
    g.tape.concat(&[out.text.expect("text stream"), out.vision], 0)
}

/// Input-gradient check through one DiT layer with every pathway active.
pub fn check_block_inputs(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (model, inputs) = block_fixture(opts.seed)?;
    gradcheck(&inputs, opts, |tape, v| {
        Graph::on_tape(&model.store, FreezeMask::frozen(), tape, |g| block_output(&model, g, v))
    })
}

/// Parameter-gradient check of the same layer against central differences
/// on sampled coordinates of every trainable parameter it reads.
pub fn check_block_params(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let (model, inputs) = block_fixture(opts.seed)?;
    let mask =
        FreezeMask::with_trainable(&[ParamGroup::FullAttention, ParamGroup::FaceAttention, ParamGroup::AudioAttention]);
    let c = &model.cfg;
    let w = projection(&[c.text_tokens + c.vision_tokens(), c.model_dim], opts.seed)?;
    let grads = {
        let mut g = Graph::training(&model.store, mask);
        let v: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = block_output(&model, &mut g, &v)?;
        let wv = g.constant(w.clone());
        let prod = g.tape.mul(out, wv)?;
        let loss = g.tape.sum(prod);
        g.param_grads(loss)?
    };
    let loss_of = |m: &AnimaModel| -> Result<f64> {
        let mut g = Graph::inference(&m.store);
        let v: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = block_output(m, &mut g, &v)?;
        Ok(project_f64(g.value(out), &w))
    };
    let mut rng = SeedRng::new(opts.seed).split("param_coords");
    let mut report = GradcheckReport::default();
    let mut probe = model.clone();
    for (id, grad) in &grads {
        let n = grad.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_input {
            (0..n).collect()
        } else {
            (0..opts.max_coords_per_input).map(|_| rng.below(n)).collect()
        };
        for c in coords {
            let orig = model.store.get(*id).data()[c];
            let numeric = central_fit(orig, opts.step, opts.points, |x| {
                probe.store.get_mut(*id).data_mut()[c] = x;
                loss_of(&probe)
            })?;
            probe.store.get_mut(*id).data_mut()[c] = orig;
            report.record(grad.data()[c] as f64, numeric, opts);
        }
    }
    Ok(report)
}

/// Options for the block checks: the layer composes dozens of f32 kernels,
/// so a wider fit is needed to keep rounding below the tolerance.
pub fn block_options(seed: u64) -> GradcheckOptions {
    GradcheckOptions { step: 1e-2, points: 8, seed, ..GradcheckOptions::default() }
}

/// Every primitive case under `opts`, then the block input and parameter
/// checks under [`block_options`].
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<(String, GradcheckReport)>> {
    let mut out = Vec::new();
    for (name, inputs, build) in primitive_cases(opts.seed) {
        out.push((name.to_string(), gradcheck(&inputs, opts, build)?));
    }
    let block = block_options(opts.seed);
    out.push(("dit_block_inputs".to_string(), check_block_inputs(&block)?));
    let params = GradcheckOptions { max_coords_per_input: 8, ..block };
    out.push(("dit_block_params".to_string(), check_block_params(&params)?));
    Ok(out)
}

/// Pooled report over a suite run.
pub fn total(reports: &[(String, GradcheckReport)]) -> GradcheckReport {
    let mut t = GradcheckReport::default();
    for (_, r) in reports {
        t.merge(r);
    }
    t
}
