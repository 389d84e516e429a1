//! Clip curation: staged threshold filtering over a clip manifest, 3:2
//! cropping around the face, and corpus histograms.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Source {
    Hdtf,
    Youtube,
    Movie,
    Synthetic,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::Hdtf, Source::Youtube, Source::Movie, Source::Synthetic];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Hdtf => "hdtf",
            Source::Youtube => "youtube",
            Source::Movie => "movie",
            Source::Synthetic => "synthetic",
        }
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Manifest(format!("unknown source {s:?}")))
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Face box in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub duration_s: f64,
    pub num_speakers: u32,
    pub face: BBox,
    /// Face height over video height.
    pub face_ratio: f64,
    pub head_rotation_deg: f64,
    pub sync_c: f64,
    pub sync_d: f64,
    pub camera_motion_score: f64,
    pub source: Source,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(',') {
            return Err(Error::Manifest(format!("invalid clip id {:?}", self.id)));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Manifest(format!("{}: duration_s must be positive", self.id)));
        }
        if !(0.0..=1.0).contains(&self.face_ratio) {
            return Err(Error::Manifest(format!("{}: face_ratio {} outside [0, 1]", self.id, self.face_ratio)));
        }
        for m in Metric::ALL {
            if !m.value(self).is_finite() {
                return Err(Error::Manifest(format!("{}: {} is not finite", self.id, m)));
            }
        }
        Ok(())
    }
}

/// Manifest column order.
pub const MANIFEST_HEADER: &str = "id,duration_s,num_speakers,face_x,face_y,face_w,face_h,face_ratio,\
head_rotation_deg,sync_c,sync_d,camera_motion_score,source";

pub fn parse_manifest(text: &str) -> Result<Vec<ClipRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        Some((_, h)) => return Err(Error::Manifest(format!("unexpected header {h:?}"))),
        None => return Err(Error::Manifest("manifest has no header line".into())),
    }
    lines
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 13 {
                return Err(Error::Manifest(format!("line {}: expected 13 fields, got {}", n + 1, f.len())));
            }
            let bad = |col: &str| Error::Manifest(format!("line {}: bad {col}", n + 1));
            let float = |i: usize, col: &str| f[i].parse::<f64>().map_err(|_| bad(col));
            let int = |i: usize, col: &str| f[i].parse::<u32>().map_err(|_| bad(col));
            let rec = ClipRecord {
                id: f[0].to_string(),
                duration_s: float(1, "duration_s")?,
                num_speakers: int(2, "num_speakers")?,
                face: BBox { x: int(3, "face_x")?, y: int(4, "face_y")?, w: int(5, "face_w")?, h: int(6, "face_h")? },
                face_ratio: float(7, "face_ratio")?,
                head_rotation_deg: float(8, "head_rotation_deg")?,
                sync_c: float(9, "sync_c")?,
                sync_d: float(10, "sync_d")?,
                camera_motion_score: float(11, "camera_motion_score")?,
                source: f[12].parse()?,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

pub fn render_manifest(records: &[ClipRecord]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.duration_s,
            r.num_speakers,
            r.face.x,
            r.face.y,
            r.face.w,
            r.face.h,
            r.face_ratio,
            r.head_rotation_deg,
            r.sync_c,
            r.sync_d,
            r.camera_motion_score,
            r.source
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    SingleSpeaker,
    MotionFilter,
    PostProcess,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::SingleSpeaker, Stage::MotionFilter, Stage::PostProcess];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::SingleSpeaker => "single_speaker",
            Stage::MotionFilter => "motion_filter",
            Stage::PostProcess => "post_process",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Thresholdable manifest fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    NumSpeakers,
    HeadRotation,
    CameraMotion,
    Duration,
    FaceRatio,
    SyncC,
    SyncD,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::NumSpeakers,
        Metric::HeadRotation,
        Metric::CameraMotion,
        Metric::Duration,
        Metric::FaceRatio,
        Metric::SyncC,
        Metric::SyncD,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::NumSpeakers => "num_speakers",
            Metric::HeadRotation => "head_rotation_deg",
            Metric::CameraMotion => "camera_motion_score",
            Metric::Duration => "duration_s",
            Metric::FaceRatio => "face_ratio",
            Metric::SyncC => "sync_c",
            Metric::SyncD => "sync_d",
        }
    }

    /// Stage whose predicate reads this metric.
    pub fn stage(self) -> Stage {
        match self {
            Metric::NumSpeakers => Stage::SingleSpeaker,
            Metric::HeadRotation | Metric::CameraMotion => Stage::MotionFilter,
            Metric::Duration | Metric::FaceRatio | Metric::SyncC | Metric::SyncD => Stage::PostProcess,
        }
    }

    pub fn value(self, r: &ClipRecord) -> f64 {
        match self {
            Metric::NumSpeakers => r.num_speakers as f64,
            Metric::HeadRotation => r.head_rotation_deg,
            Metric::CameraMotion => r.camera_motion_score,
            Metric::Duration => r.duration_s,
            Metric::FaceRatio => r.face_ratio,
            Metric::SyncC => r.sync_c,
            Metric::SyncD => r.sync_d,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive bounds; `None` leaves a side open.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Bounds {
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Bounds {
    pub fn admits(&self, v: f64) -> bool {
        self.min.is_none_or(|m| v >= m) && self.max.is_none_or(|m| v <= m)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterPolicy {
    /// Rejects clips with more or fewer than one speaker.
    pub single_speaker: bool,
    pub thresholds: BTreeMap<Metric, Bounds>,
}

impl FilterPolicy {
    pub fn set_min(&mut self, m: Metric, v: f64) {
        self.thresholds.entry(m).or_default().min = Some(v);
    }

    pub fn set_max(&mut self, m: Metric, v: f64) {
        self.thresholds.entry(m).or_default().max = Some(v);
    }

    pub fn validate(&self) -> Result<()> {
        for (m, b) in &self.thresholds {
            for v in [b.min, b.max].into_iter().flatten() {
                if v.is_nan() {
                    return Err(Error::Config(format!("{m} threshold is NaN")));
                }
            }
            if let (Some(lo), Some(hi)) = (b.min, b.max) {
                if lo > hi {
                    return Err(Error::Config(format!("{m}.min {lo} exceeds {m}.max {hi}")));
                }
            }
        }
        Ok(())
    }

    /// First failing stage and predicate, or `None` if the clip is kept.
    pub fn check(&self, r: &ClipRecord) -> Option<(Stage, String)> {
        for stage in Stage::ORDER {
            if stage == Stage::SingleSpeaker && self.single_speaker && r.num_speakers != 1 {
                return Some((stage, format!("num_speakers={} != 1", r.num_speakers)));
            }
            for (m, b) in self.thresholds.iter().filter(|(m, _)| m.stage() == stage) {
                let v = m.value(r);
                if let Some(lo) = b.min.filter(|&lo| v < lo) {
                    return Some((stage, format!("{m}={v} < min {lo}")));
                }
                if let Some(hi) = b.max.filter(|&hi| v > hi) {
                    return Some((stage, format!("{m}={v} > max {hi}")));
                }
            }
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub record: ClipRecord,
    pub stage: Stage,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineOutput {
    pub kept: Vec<ClipRecord>,
    pub rejected: Vec<Rejection>,
}

/// Applies the policy stage by stage; both outputs are ordered by id.
pub fn run_pipeline(manifest: &[ClipRecord], policy: &FilterPolicy) -> Result<PipelineOutput> {
    policy.validate()?;
    let mut seen = HashSet::with_capacity(manifest.len());
    for r in manifest {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Manifest(format!("duplicate clip id {:?}", r.id)));
        }
    }
    let mut sorted: Vec<&ClipRecord> = manifest.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = PipelineOutput::default();
    for r in sorted {
        match policy.check(r) {
            None => out.kept.push(r.clone()),
            Some((stage, reason)) => out.rejected.push(Rejection { record: r.clone(), stage, reason }),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Largest landscape rectangle with `w:h = 3:2` centred on the face and
/// clamped inside the frame; `portrait` swaps the ratio to `2:3`.
pub fn crop_3_2(record: &ClipRecord, frame_w: u32, frame_h: u32, portrait: bool) -> Result<CropRect> {
    let f = record.face;
    if f.x as u64 + f.w as u64 > frame_w as u64 || f.y as u64 + f.h as u64 > frame_h as u64 {
        return Err(Error::Contract(format!("{}: face box exceeds the {frame_w}x{frame_h} frame", record.id)));
    }
    let (rw, rh) = if portrait { (2, 3) } else { (3, 2) };
    let k = (frame_w / rw).min(frame_h / rh);
    if k == 0 {
        return Err(Error::Degenerate(format!("{frame_w}x{frame_h} frame is smaller than a {rw}x{rh} crop")));
    }
    let (w, h) = (rw * k, rh * k);
    // Twice the face centre keeps the arithmetic in integers.
    let place = |start: u32, len: u32, crop: u32, frame: u32| -> u32 {
        let twice = 2 * start as i64 + len as i64 - crop as i64;
        twice.div_euclid(2).clamp(0, (frame - crop) as i64) as u32
    };
    Ok(CropRect { x: place(f.x, f.w, w, frame_w), y: place(f.y, f.h, h, frame_h), w, h })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(format!("histogram edges must be increasing, got {edges:?}")));
        }
        let n = edges.len() - 1;
        Ok(Self { edges, counts: vec![0; n] })
    }

    /// Bin `i` covers `[e_i, e_{i+1})`; the last bin also takes its right
    /// edge, and values outside the range go to the nearest end bin.
    pub fn bin(&self, v: f64) -> usize {
        let n = self.counts.len();
        self.edges[1..n].partition_point(|&e| e <= v)
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bin(v);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub clips: usize,
    pub histograms: BTreeMap<Metric, Histogram>,
    pub hours: BTreeMap<Source, f64>,
}

impl CorpusStats {
    pub fn total_hours(&self) -> f64 {
        self.hours.values().sum()
    }

    /// Plain-text summary.
    pub fn report(&self) -> String {
        let mut s = format!("clips {}\ntotal_hours {:.6}\n", self.clips, self.total_hours());
        for (src, h) in &self.hours {
            s.push_str(&format!("hours.{src} {h:.6}\n"));
        }
        for (m, h) in &self.histograms {
            let counts: Vec<String> = h.counts.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!("hist.{m} {}\n", counts.join(" ")));
        }
        s
    }

    /// One `metric,lo,hi,count` line per bin.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("metric,lo,hi,count\n");
        for (m, h) in &self.histograms {
            for (i, c) in h.counts.iter().enumerate() {
                s.push_str(&format!("{m},{},{},{c}\n", h.edges[i], h.edges[i + 1]));
            }
        }
        s
    }
}

/// Ten bins over a plausible range of every metric.
pub fn default_bins() -> BTreeMap<Metric, Vec<f64>> {
    let lin = |lo: f64, hi: f64| (0..=10).map(|i| lo + (hi - lo) * i as f64 / 10.0).collect::<Vec<_>>();
    BTreeMap::from([
        (Metric::NumSpeakers, vec![0.5, 1.5, 2.5, 3.5, 4.5]),
        (Metric::HeadRotation, lin(0.0, 90.0)),
        (Metric::CameraMotion, lin(0.0, 1.0)),
        (Metric::Duration, lin(0.0, 60.0)),
        (Metric::FaceRatio, lin(0.0, 1.0)),
        (Metric::SyncC, lin(0.0, 10.0)),
        (Metric::SyncD, lin(0.0, 15.0)),
    ])
}

pub fn corpus_stats(kept: &[ClipRecord], bins: &BTreeMap<Metric, Vec<f64>>) -> Result<CorpusStats> {
    let mut histograms = BTreeMap::new();
    for (m, edges) in bins {
        let mut h = Histogram::new(edges.clone())?;
        for r in kept {
            h.add(m.value(r));
        }
        histograms.insert(*m, h);
    }
    let mut hours = BTreeMap::new();
    for r in kept {
        *hours.entry(r.source).or_insert(0.0) += r.duration_s / 3600.0;
    }
    Ok(CorpusStats { clips: kept.len(), histograms, hours })
}
