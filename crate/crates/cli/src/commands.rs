//! Command bodies. Each returns the paths or text it produced so the binary
//! only has to print and map errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use dit_anima::conditioning::{synth_audio_features, AudioStrategy, ConditionSet, IdentityCondition, IdentityMode};
use dit_anima::datapipe::{corpus_stats, default_bins, parse_manifest, render_manifest, run_pipeline};
use dit_anima::evalmetrics::{dynamic_degree, fit_gaussian, frechet_distance, FlowField};
use dit_anima::guidance::{extrapolate, sample_clip, GuidanceScales, SampleOptions};
use dit_anima::model::{checkpoint, AnimaModel};
use dit_anima::selfcheck::{run_suite, total};
use dit_anima::tensor::gradcheck::GradcheckOptions;
use dit_anima::tensor::io;
use dit_anima::trainer::ablation::{
    audio_ablation, cfg_ablation, identity_ablation, motion_ablation, AblationRow, CFG_GRID, MOTION_GRID, TABLE_HEADER,
};
use dit_anima::trainer::{gen_synthetic, gen_synthetic_range, prepare_all, run_phase, Phase, SyntheticConfig};
use dit_anima::{Error, NdTensor, Result};

use crate::config::RunConfig;

pub const SEED_ENV: &str = "DIT_ANIMA_SEED";

/// Seed precedence: command-line flag, then `DIT_ANIMA_SEED`, then the config.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(raw) => {
            raw.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse {raw:?} as a seed")))
        }
        None => Ok(config),
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::parse(&fs::read_to_string(path)?)
}

/// Both training phases on the synthetic corpus. Writes `checkpoint/` and
/// `loss_trace.csv` under `out`.
pub fn train(cfg: &RunConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    let schedule = cfg.schedule()?;
    let mut model = AnimaModel::new(cfg.model.clone(), seed)?;
    let n = cfg.conditions.motion_frames;
    let samples = gen_synthetic(cfg.train.corpus, &SyntheticConfig::for_model(&cfg.model, n), seed)?;
    let corpus = prepare_all(&model, &samples, n)?;
    let mut trace = String::from("step,phase,loss\n");
    for phase in [Phase::Identity, Phase::Audio] {
        for rec in run_phase(&mut model, &corpus, &cfg.train_config(phase), &schedule)? {
            if !rec.loss.is_finite() {
                return Err(Error::Numeric(format!("{phase} loss is not finite at step {}", rec.step)));
            }
            trace.push_str(&format!("{rec}\n"));
        }
    }
    fs::create_dir_all(out)?;
    let dir = out.join("checkpoint");
    checkpoint::save(&model, &dir)?;
    fs::write(out.join("loss_trace.csv"), trace)?;
    Ok(dir)
}

/// Model from `ckpt`, or freshly initialised from `seed` when absent.
pub fn load_model(cfg: &RunConfig, ckpt: Option<&Path>, seed: u64) -> Result<AnimaModel> {
    let mut model = AnimaModel::new(cfg.model.clone(), seed)?;
    if let Some(dir) = ckpt {
        checkpoint::load_into(&mut model, dir)?;
    }
    Ok(model)
}

/// Text, audio and identity of synthetic clip `[conditions] sample`, with
/// audio long enough for `clips` consecutive clips.
pub fn conditions(model: &AnimaModel, cfg: &RunConfig, clips: usize, seed: u64) -> Result<ConditionSet> {
    let m = &model.cfg;
    let syn = SyntheticConfig::for_model(m, clips.saturating_sub(1) * m.frames);
    let sample = gen_synthetic_range(cfg.conditions.sample, 1, &syn, seed)?.remove(0);
    let audio = synth_audio_features(&sample.audio_signal, &m.audio)?;
    let (face, ref_latent) = model.encode_reference(&sample.ref_image)?;
    let identity = IdentityCondition::new(m.identity_mode, face, Some(ref_latent))?;
    Ok(ConditionSet { text: Some(sample.text_embed), audio: Some(audio), identity: Some(identity) })
}

fn options(cfg: &RunConfig, scales: GuidanceScales) -> SampleOptions {
    SampleOptions { scales, steps: cfg.guidance.sample_steps }
}

/// One guided clip; writes its `[l, h, w, c]` latent to `out`.
pub fn sample(cfg: &RunConfig, model: &AnimaModel, scales: GuidanceScales, seed: u64, out: &Path) -> Result<()> {
    scales.validate()?;
    let cond = conditions(model, cfg, 1, seed)?;
    let window = model.cfg.pixel_frames();
    let audio = cond.audio.as_ref().map(|a| a.slice_frames(0, window)).transpose()?;
    let cond = ConditionSet { audio, ..cond };
    let clip = sample_clip(model, &cond, &cfg.schedule()?, &options(cfg, scales), seed)?;
    write_tensor(clip.data(), out)
}

/// `clips` chained clips; writes the concatenated `[clips * l, h, w, c]` latent.
pub fn extrapolate_cmd(
    cfg: &RunConfig,
    model: &AnimaModel,
    scales: GuidanceScales,
    clips: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    scales.validate()?;
    if clips == 0 {
        return Err(Error::Config("--clips must be at least 1".into()));
    }
    let cond = conditions(model, cfg, clips, seed)?;
    let opts = options(cfg, scales);
    let ex = extrapolate(model, &cond, &cfg.schedule()?, &opts, clips, cfg.conditions.motion_frames, seed)?;
    write_tensor(ex.concat()?.data(), out)
}

fn write_tensor(t: &NdTensor, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    io::save(t, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    #[value(name = "audio_injection")]
    AudioInjection,
    #[value(name = "identity_injection")]
    IdentityInjection,
    #[value(name = "motion_frames")]
    MotionFrames,
    Cfg,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::AudioInjection => "audio_injection",
            Axis::IdentityInjection => "identity_injection",
            Axis::MotionFrames => "motion_frames",
            Axis::Cfg => "cfg",
        }
    }
}

pub fn ablation_rows(cfg: &RunConfig, axis: Axis, seed: u64) -> Result<Vec<AblationRow>> {
    let ab = cfg.ablation();
    match axis {
        Axis::AudioInjection => audio_ablation(&ab, &AudioStrategy::ALL, seed),
        Axis::IdentityInjection => identity_ablation(&ab, &IdentityMode::ALL, seed),
        Axis::MotionFrames => motion_ablation(&ab, &MOTION_GRID, seed),
        Axis::Cfg => cfg_ablation(&ab, &CFG_GRID, seed),
    }
}

pub fn render_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{r}\n"));
    }
    s
}

/// Runs one ablation axis and writes `ablation_<axis>.csv` under `out`.
pub fn ablate(cfg: &RunConfig, axis: Axis, seed: u64, out: &Path) -> Result<String> {
    let table = render_table(&ablation_rows(cfg, axis, seed)?);
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("ablation_{}.csv", axis.as_str())), &table)?;
    Ok(table)
}

/// Filters `manifest` with the `[filter]` policy into `kept.csv` and
/// `rejected.csv`. Returns `(kept, rejected)` counts.
pub fn curate(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<(usize, usize)> {
    let records = parse_manifest(&fs::read_to_string(manifest)?)?;
    let result = run_pipeline(&records, &cfg.filter)?;
    let mut rejected = String::from("id,stage,reason\n");
    for r in &result.rejected {
        rejected.push_str(&format!("{},{},{}\n", r.record.id, r.stage, r.reason.replace(',', ";")));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("kept.csv"), render_manifest(&result.kept))?;
    fs::write(out.join("rejected.csv"), rejected)?;
    Ok((result.kept.len(), result.rejected.len()))
}

/// Writes `stats.txt` and `histograms.csv` for a manifest; returns the report.
pub fn stats(manifest: &Path, out: &Path) -> Result<String> {
    let records = parse_manifest(&fs::read_to_string(manifest)?)?;
    let stats = corpus_stats(&records, &default_bins())?;
    let report = stats.report();
    fs::create_dir_all(out)?;
    fs::write(out.join("stats.txt"), &report)?;
    fs::write(out.join("histograms.csv"), stats.histogram_csv())?;
    Ok(report)
}

/// Fréchet distance between Gaussian fits of two `[n, d]` feature dumps.
pub fn frechet(a: &Path, b: &Path) -> Result<f64> {
    frechet_distance(&fit_gaussian(&io::load(a)?)?, &fit_gaussian(&io::load(b)?)?)
}

/// Dynamic degree of a `[frames, H, W, 2]` flow dump.
pub fn dyndeg(flows: &Path) -> Result<f64> {
    dynamic_degree(&FlowField::from_stacked(&io::load(flows)?)?)
}

pub const GRADCHECK_MIN_PASS: f64 = 0.95;

/// Gradient check suite; one line per case plus a total. Fails with a
/// numeric error if the overall pass fraction is below [`GRADCHECK_MIN_PASS`].
pub fn gradcheck(seed: u64) -> Result<String> {
    let reports = run_suite(&GradcheckOptions { seed, ..GradcheckOptions::default() })?;
    let mut s = String::new();
    for (name, r) in &reports {
        s.push_str(&format!("{name} {}/{} {:.4}\n", r.passed, r.checked, r.pass_fraction()));
    }
    let t = total(&reports);
    s.push_str(&format!("total {}/{} {:.4}\n", t.passed, t.checked, t.pass_fraction()));
    if t.pass_fraction() < GRADCHECK_MIN_PASS {
        return Err(Error::Numeric(format!(
            "gradcheck pass fraction {:.4} below {GRADCHECK_MIN_PASS}\n{s}",
            t.pass_fraction()
        )));
    }
    Ok(s)
}
