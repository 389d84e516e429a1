//! Sectioned `key = value` run configuration.
//!
//! ```text
//! seed = 0
//! output = out
//!
//! [schedule]
//! steps = 50
//! ...
//! ```
//!
//! Every section must be present; keys inside a section are optional and
//! fall back to their defaults. Unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use dit_anima::conditioning::AudioFeatureConfig;
use dit_anima::datapipe::{Bounds, FilterPolicy, Metric};
use dit_anima::diffusion::Schedule;
use dit_anima::guidance::GuidanceScales;
use dit_anima::model::DitConfig;
use dit_anima::trainer::ablation::AblationConfig;
use dit_anima::trainer::{Phase, TrainConfig};
use dit_anima::{Error, Result};

pub const SECTIONS: [&str; 6] = ["schedule", "model", "train", "conditions", "guidance", "filter"];

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self { steps: a.schedule_steps, beta_start: a.beta_start, beta_end: a.beta_end }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub drop_prob: f64,
    pub motion_mask_prob: f64,
    /// Synthetic training clips.
    pub corpus: usize,
    /// Held-out clips used by the ablation proxies.
    pub held_out: usize,
    /// Noise levels at which ablation proxies are measured.
    pub eval_steps: Vec<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let (t, a) = (TrainConfig::default(), AblationConfig::default());
        Self {
            steps: a.steps,
            lr: a.lr,
            batch: a.batch,
            drop_prob: t.drop_prob,
            motion_mask_prob: t.motion_mask_prob,
            corpus: a.corpus,
            held_out: a.held_out,
            eval_steps: a.eval_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionsSection {
    /// Motion frames `n` carried between clips.
    pub motion_frames: usize,
    /// Index of the synthetic clip that supplies text, audio and reference.
    pub sample: usize,
    pub clips: usize,
}

impl Default for ConditionsSection {
    fn default() -> Self {
        Self { motion_frames: AblationConfig::default().motion_frames, sample: 0, clips: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSection {
    pub scales: GuidanceScales,
    /// DDIM steps used by `sample`, `extrapolate` and the guidance sweep.
    pub sample_steps: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self { scales: GuidanceScales::default(), sample_steps: AblationConfig::default().sample_steps }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub schedule: ScheduleSection,
    pub model: DitConfig,
    pub train: TrainSection,
    pub conditions: ConditionsSection,
    pub guidance: GuidanceSection,
    pub filter: FilterPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("out"),
            schedule: ScheduleSection::default(),
            model: AblationConfig::default().model,
            train: TrainSection::default(),
            conditions: ConditionsSection::default(),
            guidance: GuidanceSection::default(),
            filter: FilterPolicy::default(),
        }
    }
}

/// Entries of one section, consumed key by key.
struct Section {
    name: String,
    entries: BTreeMap<String, String>,
}

impl Section {
    fn field(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("[{}] {key}", self.name)
        }
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| Error::Config(format!("{}: cannot parse {raw:?}", self.field(key)))),
        }
    }

    fn take_opt(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key, f64::NAN).map(|v| (!v.is_nan()).then_some(v))
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| Error::Config(format!("{}: cannot parse {raw:?}", self.field(key))))
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("{}: unknown key", self.field(k)))),
        }
    }
}

fn split_sections(text: &str) -> Result<BTreeMap<String, Section>> {
    let mut sections = BTreeMap::new();
    sections.insert(String::new(), Section { name: String::new(), entries: BTreeMap::new() });
    let mut current = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if !SECTIONS.contains(&name.as_str()) {
                return Err(Error::Config(format!("line {}: unknown section [{name}]", n + 1)));
            }
            if sections.contains_key(&name) {
                return Err(Error::Config(format!("line {}: duplicate section [{name}]", n + 1)));
            }
            sections.insert(name.clone(), Section { name: name.clone(), entries: BTreeMap::new() });
            current = name;
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        let section = sections.get_mut(&current).expect("current section exists");
        if section.entries.insert(k.clone(), v).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {}", n + 1, section.field(&k))));
        }
    }
    Ok(sections)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections = split_sections(text)?;
        let mut section =
            |name: &str| sections.remove(name).ok_or_else(|| Error::Config(format!("missing section [{name}]")));
        let d = RunConfig::default();

        let mut top = section("")?;
        let seed = top.take("seed", d.seed)?;
        let output = top.take("output", d.output.clone())?;
        top.finish()?;

        let mut s = section("schedule")?;
        let schedule = ScheduleSection {
            steps: s.take("steps", d.schedule.steps)?,
            beta_start: s.take("beta_start", d.schedule.beta_start)?,
            beta_end: s.take("beta_end", d.schedule.beta_end)?,
        };
        s.finish()?;

        let mut s = section("model")?;
        let m = &d.model;
        let patch = s.take_list("patch", m.patch.to_vec())?;
        let patch: [usize; 3] = patch
            .try_into()
            .map_err(|_| Error::Config("[model] patch: expected three comma-separated sizes".into()))?;
        let model = DitConfig {
            depth: s.take("depth", m.depth)?,
            ref_depth: s.take("ref_depth", m.ref_depth)?,
            model_dim: s.take("model_dim", m.model_dim)?,
            heads: s.take("heads", m.heads)?,
            mlp_ratio: s.take("mlp_ratio", m.mlp_ratio)?,
            patch,
            frames: s.take("frames", m.frames)?,
            latent_height: s.take("latent_height", m.latent_height)?,
            latent_width: s.take("latent_width", m.latent_width)?,
            codec_stride: s.take("codec_stride", m.codec_stride)?,
            codec_patch: s.take("codec_patch", m.codec_patch)?,
            pixel_channels: s.take("pixel_channels", m.pixel_channels)?,
            text_tokens: s.take("text_tokens", m.text_tokens)?,
            text_dim: s.take("text_dim", m.text_dim)?,
            audio: AudioFeatureConfig {
                layer_dim: s.take("audio_layer_dim", m.audio.layer_dim)?,
                samples_per_frame: s.take("audio_samples_per_frame", m.audio.samples_per_frame)?,
                window: s.take("audio_window", m.audio.window)?,
                seed: s.take("audio_seed", m.audio.seed)?,
            },
            audio_act: s.take("audio_act", m.audio_act)?,
            audio_strategy: s.take("audio_strategy", m.audio_strategy)?,
            face_dim: s.take("face_dim", m.face_dim)?,
            identity_mode: s.take("identity_mode", m.identity_mode)?,
            rope_base: s.take("rope_base", m.rope_base)?,
        };
        s.finish()?;

        let mut s = section("train")?;
        let t = &d.train;
        let train = TrainSection {
            steps: s.take("steps", t.steps)?,
            lr: s.take("lr", t.lr)?,
            batch: s.take("batch", t.batch)?,
            drop_prob: s.take("drop_prob", t.drop_prob)?,
            motion_mask_prob: s.take("motion_mask_prob", t.motion_mask_prob)?,
            corpus: s.take("corpus", t.corpus)?,
            held_out: s.take("held_out", t.held_out)?,
            eval_steps: s.take_list("eval_steps", t.eval_steps.clone())?,
        };
        s.finish()?;

        let mut s = section("conditions")?;
        let c = &d.conditions;
        let conditions = ConditionsSection {
            motion_frames: s.take("motion_frames", c.motion_frames)?,
            sample: s.take("sample", c.sample)?,
            clips: s.take("clips", c.clips)?,
        };
        s.finish()?;

        let mut s = section("guidance")?;
        let g = &d.guidance;
        let guidance = GuidanceSection {
            scales: GuidanceScales {
                lambda_a: s.take("lambda_a", g.scales.lambda_a)?,
                lambda_t: s.take("lambda_t", g.scales.lambda_t)?,
                lambda_i: s.take("lambda_i", g.scales.lambda_i)?,
            },
            sample_steps: s.take("sample_steps", g.sample_steps)?,
        };
        s.finish()?;

        let mut s = section("filter")?;
        let mut filter = FilterPolicy { single_speaker: s.take("single_speaker", false)?, ..Default::default() };
        for metric in Metric::ALL {
            let min = s.take_opt(&format!("{metric}.min"))?;
            let max = s.take_opt(&format!("{metric}.max"))?;
            if min.is_some() || max.is_some() {
                filter.thresholds.insert(metric, Bounds { min, max });
            }
        }
        s.finish()?;

        let cfg = RunConfig { seed, output, schedule, model, train, conditions, guidance, filter };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every field before any compute starts.
    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        in_section("model", self.model.validate())?;
        in_section("train", self.train_config(Phase::Identity).validate())?;
        in_section("guidance", self.guidance.scales.validate())?;
        in_section("filter", self.filter.validate())?;
        let t = &self.train;
        if t.corpus == 0 || t.held_out == 0 {
            return Err(Error::Config("[train] corpus and held_out must be positive".into()));
        }
        if let Some(s) = t.eval_steps.iter().find(|&&s| s == 0 || s > self.schedule.steps) {
            return Err(Error::Config(format!("[train] eval_steps: {s} outside 1..={}", self.schedule.steps)));
        }
        let c = &self.conditions;
        if c.motion_frames > self.model.frames {
            return Err(Error::Config(format!(
                "[conditions] motion_frames: {} exceeds [model] frames {}",
                c.motion_frames, self.model.frames
            )));
        }
        if c.clips == 0 {
            return Err(Error::Config("[conditions] clips must be at least 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let s = &self.schedule;
        in_section("schedule", Schedule::linear(s.steps, s.beta_start, s.beta_end))
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            phase,
            steps: t.steps,
            lr: t.lr,
            batch: t.batch,
            drop_prob: t.drop_prob,
            motion_mask_prob: t.motion_mask_prob,
            seed: self.seed,
        }
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            model: self.model.clone(),
            schedule_steps: self.schedule.steps,
            beta_start: self.schedule.beta_start,
            beta_end: self.schedule.beta_end,
            motion_frames: self.conditions.motion_frames,
            corpus: self.train.corpus,
            held_out: self.train.held_out,
            steps: self.train.steps,
            lr: self.train.lr,
            batch: self.train.batch,
            eval_steps: self.train.eval_steps.clone(),
            sample_steps: self.guidance.sample_steps,
        }
    }

    /// Text form that [`RunConfig::parse`] reads back to an equal value.
    pub fn render(&self) -> String {
        let mut out = format!("seed = {}\noutput = {}\n", self.seed, self.output.display());

        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let sc = &self.schedule;
        section(
            &mut out,
            "schedule",
            &[
                ("steps", sc.steps.to_string()),
                ("beta_start", sc.beta_start.to_string()),
                ("beta_end", sc.beta_end.to_string()),
            ],
        );

        let m = &self.model;
        section(
            &mut out,
            "model",
            &[
                ("depth", m.depth.to_string()),
                ("ref_depth", m.ref_depth.to_string()),
                ("model_dim", m.model_dim.to_string()),
                ("heads", m.heads.to_string()),
                ("mlp_ratio", m.mlp_ratio.to_string()),
                ("patch", join(&m.patch)),
                ("frames", m.frames.to_string()),
                ("latent_height", m.latent_height.to_string()),
                ("latent_width", m.latent_width.to_string()),
                ("codec_stride", m.codec_stride.to_string()),
                ("codec_patch", m.codec_patch.to_string()),
                ("pixel_channels", m.pixel_channels.to_string()),
                ("text_tokens", m.text_tokens.to_string()),
                ("text_dim", m.text_dim.to_string()),
                ("audio_layer_dim", m.audio.layer_dim.to_string()),
                ("audio_samples_per_frame", m.audio.samples_per_frame.to_string()),
                ("audio_window", m.audio.window.to_string()),
                ("audio_seed", m.audio.seed.to_string()),
                ("audio_act", m.audio_act.to_string()),
                ("audio_strategy", m.audio_strategy.to_string()),
                ("face_dim", m.face_dim.to_string()),
                ("identity_mode", m.identity_mode.to_string()),
                ("rope_base", m.rope_base.to_string()),
            ],
        );

        let t = &self.train;
        section(
            &mut out,
            "train",
            &[
                ("steps", t.steps.to_string()),
                ("lr", t.lr.to_string()),
                ("batch", t.batch.to_string()),
                ("drop_prob", t.drop_prob.to_string()),
                ("motion_mask_prob", t.motion_mask_prob.to_string()),
                ("corpus", t.corpus.to_string()),
                ("held_out", t.held_out.to_string()),
                ("eval_steps", join(&t.eval_steps)),
            ],
        );

        let c = &self.conditions;
        section(
            &mut out,
            "conditions",
            &[
                ("motion_frames", c.motion_frames.to_string()),
                ("sample", c.sample.to_string()),
                ("clips", c.clips.to_string()),
            ],
        );

        let g = &self.guidance;
        section(
            &mut out,
            "guidance",
            &[
                ("lambda_a", g.scales.lambda_a.to_string()),
                ("lambda_t", g.scales.lambda_t.to_string()),
                ("lambda_i", g.scales.lambda_i.to_string()),
                ("sample_steps", g.sample_steps.to_string()),
            ],
        );

        let mut filter = vec![("single_speaker".to_string(), self.filter.single_speaker.to_string())];
        for (m, b) in &self.filter.thresholds {
            if let Some(v) = b.min {
                filter.push((format!("{m}.min"), v.to_string()));
            }
            if let Some(v) = b.max {
                filter.push((format!("{m}.max"), v.to_string()));
            }
        }
        let filter: Vec<(&str, String)> = filter.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        section(&mut out, "filter", &filter);
        out
    }
}

/// Prefixes a config error with the section it came from.
fn in_section<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("[{name}] {msg}")),
        other => other,
    })
}

fn section(out: &mut String, name: &str, entries: &[(&str, String)]) {
    let _ = writeln!(out, "\n[{name}]");
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
}
