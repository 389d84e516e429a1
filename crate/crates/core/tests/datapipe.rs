use std::collections::BTreeSet;

use dit_anima::datapipe::{
    corpus_stats, crop_3_2, default_bins, parse_manifest, render_manifest, run_pipeline, BBox, Bounds, ClipRecord,
    CropRect, FilterPolicy, Metric, Source, Stage,
};
use dit_anima::tensor::SeedRng;
use dit_anima::Error;

const FRAME: (u32, u32) = (1280, 720);

fn random_clip(i: usize, rng: &mut SeedRng) -> ClipRecord {
    let fw = 20 + rng.below(400) as u32;
    let fh = 20 + rng.below(400) as u32;
    ClipRecord {
        id: format!("clip{i:05}"),
        duration_s: 0.5 + 60.0 * rng.uniform_f64(),
        num_speakers: rng.below(4) as u32,
        face: BBox {
            x: rng.below((FRAME.0 - fw) as usize) as u32,
            y: rng.below((FRAME.1 - fh) as usize) as u32,
            w: fw,
            h: fh,
        },
        face_ratio: fh as f64 / FRAME.1 as f64,
        head_rotation_deg: 90.0 * rng.uniform_f64(),
        sync_c: 10.0 * rng.uniform_f64(),
        sync_d: 15.0 * rng.uniform_f64(),
        camera_motion_score: rng.uniform_f64(),
        source: Source::ALL[rng.below(4)],
    }
}

fn manifest(n: usize, seed: u64) -> Vec<ClipRecord> {
    let mut rng = SeedRng::new(seed);
    let mut m: Vec<ClipRecord> = (0..n).map(|i| random_clip(i, &mut rng)).collect();
    // Shuffle so the id ordering of the output is exercised.
    for i in (1..m.len()).rev() {
        m.swap(i, rng.below(i + 1));
    }
    m
}

fn value(m: Metric, r: &ClipRecord) -> f64 {
    match m {
        Metric::NumSpeakers => r.num_speakers as f64,
        Metric::HeadRotation => r.head_rotation_deg,
        Metric::CameraMotion => r.camera_motion_score,
        Metric::Duration => r.duration_s,
        Metric::FaceRatio => r.face_ratio,
        Metric::SyncC => r.sync_c,
        Metric::SyncD => r.sync_d,
    }
}

fn policy() -> FilterPolicy {
    let mut p = FilterPolicy { single_speaker: true, ..Default::default() };
    p.set_max(Metric::HeadRotation, 30.0);
    p.set_max(Metric::CameraMotion, 0.6);
    p.set_min(Metric::Duration, 3.0);
    p.set_min(Metric::FaceRatio, 0.1);
    p.set_min(Metric::SyncC, 2.0);
    p.set_max(Metric::SyncD, 12.0);
    p
}

/// Linear-scan oracle: first failing stage, or `None` if kept.
fn oracle_stage(p: &FilterPolicy, r: &ClipRecord) -> Option<Stage> {
    if p.single_speaker && r.num_speakers != 1 {
        return Some(Stage::SingleSpeaker);
    }
    let fails = |m: Metric| {
        let b = p.thresholds.get(&m).copied().unwrap_or_default();
        let v = value(m, r);
        b.min.is_some_and(|lo| v < lo) || b.max.is_some_and(|hi| v > hi)
    };
    if fails(Metric::NumSpeakers) {
        return Some(Stage::SingleSpeaker);
    }
    if fails(Metric::HeadRotation) || fails(Metric::CameraMotion) {
        return Some(Stage::MotionFilter);
    }
    if [Metric::Duration, Metric::FaceRatio, Metric::SyncC, Metric::SyncD].into_iter().any(fails) {
        return Some(Stage::PostProcess);
    }
    None
}

fn kept_ids(m: &[ClipRecord], p: &FilterPolicy) -> BTreeSet<String> {
    run_pipeline(m, p).unwrap().kept.into_iter().map(|r| r.id).collect()
}

#[test]
fn partition_matches_brute_force_oracle_on_1000_clips() {
    let m = manifest(1000, 1);
    let p = policy();
    let out = run_pipeline(&m, &p).unwrap();
    assert_eq!(out.kept.len() + out.rejected.len(), m.len());
    assert!(!out.kept.is_empty() && !out.rejected.is_empty());
    for r in &m {
        match oracle_stage(&p, r) {
            None => assert!(out.kept.iter().any(|k| k.id == r.id), "{} should be kept", r.id),
            Some(stage) => {
                let rej = out.rejected.iter().find(|x| x.record.id == r.id).expect("rejected");
                assert_eq!(rej.stage, stage, "{}", r.id);
                assert!(!rej.reason.is_empty());
            }
        }
    }
    assert!(out.kept.windows(2).all(|w| w[0].id < w[1].id));
    assert!(out.rejected.windows(2).all(|w| w[0].record.id < w[1].record.id));
    assert_eq!(out, run_pipeline(&m, &p).unwrap());
}

#[test]
fn empty_policy_keeps_everything() {
    let m = manifest(50, 2);
    assert_eq!(run_pipeline(&m, &FilterPolicy::default()).unwrap().kept.len(), 50);
}

#[test]
fn second_speaker_fails_the_first_stage() {
    let mut r = manifest(1, 3).remove(0);
    r.num_speakers = 2;
    r.head_rotation_deg = 89.0;
    let out = run_pipeline(&[r], &policy()).unwrap();
    assert_eq!(out.rejected[0].stage, Stage::SingleSpeaker);
}

#[test]
fn tightening_never_grows_the_kept_set() {
    let m = manifest(400, 4);
    let mut rng = SeedRng::new(5);
    let mut p = FilterPolicy::default();
    let mut kept = kept_ids(&m, &p);
    for _ in 0..50 {
        let metric = Metric::ALL[rng.below(Metric::ALL.len())];
        let values: Vec<f64> = m.iter().map(|r| value(metric, r)).collect();
        let (lo, hi) = values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let b: Bounds = p.thresholds.get(&metric).copied().unwrap_or_default();
        let (cur_lo, cur_hi) = (b.min.unwrap_or(lo), b.max.unwrap_or(hi));
        let step = 0.05 * (hi - lo) * rng.uniform_f64();
        match rng.below(3) {
            0 => p.set_min(metric, (cur_lo + step).min(cur_hi)),
            1 => p.set_max(metric, (cur_hi - step).max(cur_lo)),
            _ => p.single_speaker = true,
        }
        let next = kept_ids(&m, &p);
        assert!(next.is_subset(&kept), "tightening {metric} grew the kept set");
        kept = next;
    }
}

#[test]
fn duplicate_ids_are_a_manifest_error() {
    let m = manifest(3, 6);
    let dup = vec![m[0].clone(), m[1].clone(), m[0].clone()];
    assert!(matches!(run_pipeline(&dup, &policy()), Err(Error::Manifest(_))));
}

#[test]
fn inverted_bounds_are_a_config_error() {
    let mut p = FilterPolicy::default();
    p.set_min(Metric::SyncC, 5.0);
    p.set_max(Metric::SyncC, 4.0);
    assert!(matches!(run_pipeline(&manifest(2, 7), &p), Err(Error::Config(_))));
}

#[test]
fn manifest_text_round_trips() {
    let m = manifest(20, 8);
    assert_eq!(parse_manifest(&render_manifest(&m)).unwrap(), m);
    let bad = render_manifest(&m).replacen(",youtube", ",vimeo", 1).replacen(",hdtf", ",vimeo", 1);
    assert!(parse_manifest(&bad).is_err());
}

/// Counting oracle with the same clamping convention: values below the first
/// edge land in bin 0, values at or above the last edge in the last bin.
fn count_bins(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let n = edges.len() - 1;
    let mut counts = vec![0; n];
    for &v in values {
        let mut bin = 0;
        for i in 0..n {
            if v >= edges[i] {
                bin = i;
            }
        }
        counts[bin] += 1;
    }
    counts
}

#[test]
fn histograms_match_counting_oracle() {
    let m = manifest(1000, 9);
    let bins = default_bins();
    let stats = corpus_stats(&m, &bins).unwrap();
    assert_eq!(stats.clips, 1000);
    for (metric, edges) in &bins {
        let values: Vec<f64> = m.iter().map(|r| value(*metric, r)).collect();
        let h = &stats.histograms[metric];
        assert_eq!(h.counts, count_bins(&values, edges), "{metric}");
        assert_eq!(h.total(), 1000);
    }
    let hours: f64 = m.iter().map(|r| r.duration_s).sum::<f64>() / 3600.0;
    assert!((stats.total_hours() - hours).abs() < 1e-9);
    assert_eq!(stats.histogram_csv().lines().count(), 1 + bins.values().map(|e| e.len() - 1).sum::<usize>());
}

#[test]
fn retained_hours_and_empty_corpus() {
    let mut m = manifest(2, 10);
    m[0].duration_s = 3600.0;
    m[1].duration_s = 7200.0;
    m[0].source = Source::Hdtf;
    m[1].source = Source::Movie;
    let stats = corpus_stats(&m, &default_bins()).unwrap();
    assert_eq!(stats.total_hours(), 3.0);
    assert_eq!(stats.hours[&Source::Movie], 2.0);
    let one = corpus_stats(&m[..1], &default_bins()).unwrap();
    assert!(one.histograms.values().all(|h| h.counts.iter().filter(|&&c| c > 0).count() == 1));
    let empty = corpus_stats(&[], &default_bins()).unwrap();
    assert_eq!(empty.clips, 0);
    assert_eq!(empty.total_hours(), 0.0);
    assert!(empty.histograms.values().all(|h| h.total() == 0));
}

/// Exhaustive oracle: largest `rw:rh` rectangle that fits, then the
/// placement whose centre is nearest the face centre, smallest offset first.
fn crop_oracle(face: BBox, fw: u32, fh: u32, (rw, rh): (u32, u32)) -> Option<CropRect> {
    let (mut w, mut h) = (0, 0);
    for cw in 1..=fw {
        let ch = cw * rh / rw;
        if ch == 0 || ch * rw != cw * rh || ch > fh {
            continue;
        }
        if cw * ch > w * h {
            (w, h) = (cw, ch);
        }
    }
    if w == 0 {
        return None;
    }
    let best = |start: u32, len: u32, crop: u32, frame: u32| {
        let target = 2 * start as i64 + len as i64;
        (0..=frame - crop).min_by_key(|&x| ((2 * x as i64 + crop as i64 - target).abs(), x)).unwrap()
    };
    Some(CropRect { x: best(face.x, face.w, w, fw), y: best(face.y, face.h, h, fh), w, h })
}

fn with_face(face: BBox) -> ClipRecord {
    ClipRecord { face, ..manifest(1, 0).remove(0) }
}

#[test]
fn crop_matches_exhaustive_oracle_on_square_frame() {
    let r = with_face(BBox { x: 450, y: 450, w: 100, h: 100 });
    let c = crop_3_2(&r, 1000, 1000, false).unwrap();
    assert_eq!(Some(c), crop_oracle(r.face, 1000, 1000, (3, 2)));
    assert_eq!((c.w, c.h), (999, 666));
    assert_eq!(c.y, 167);
    for x in (0..1000).step_by(37) {
        for y in (0..1000).step_by(41) {
            let face = BBox { x, y, w: 1 + (999 - x).min(60), h: 1 + (999 - y).min(80) };
            let r = with_face(face);
            for portrait in [false, true] {
                let ratio = if portrait { (2, 3) } else { (3, 2) };
                assert_eq!(Some(crop_3_2(&r, 1000, 1000, portrait).unwrap()), crop_oracle(face, 1000, 1000, ratio));
            }
        }
    }
}

#[test]
fn crop_matches_exhaustive_oracle_on_small_frames() {
    for fw in 1..=24 {
        for fh in 1..=24 {
            for x in 0..fw {
                for y in 0..fh {
                    let face = BBox { x, y, w: 1, h: 1 };
                    let got = crop_3_2(&with_face(face), fw, fh, false);
                    match crop_oracle(face, fw, fh, (3, 2)) {
                        Some(want) => assert_eq!(got.unwrap(), want, "{fw}x{fh} face {x},{y}"),
                        None => assert!(matches!(got, Err(Error::Degenerate(_)))),
                    }
                }
            }
        }
    }
}

#[test]
fn corner_faces_clamp_and_keep_the_ratio() {
    let (fw, fh) = FRAME;
    let corner = crop_3_2(&with_face(BBox { x: 0, y: 0, w: 50, h: 50 }), fw, fh, false).unwrap();
    assert_eq!((corner.x, corner.y), (0, 0));
    let far = crop_3_2(&with_face(BBox { x: fw - 50, y: fh - 50, w: 50, h: 50 }), fw, fh, false).unwrap();
    assert_eq!((far.x + far.w, far.y + far.h), (fw, fh));
    for c in [corner, far] {
        assert_eq!(2 * c.w, 3 * c.h);
    }
    let outside = with_face(BBox { x: fw - 10, y: 0, w: 50, h: 50 });
    assert!(matches!(crop_3_2(&outside, fw, fh, false), Err(Error::Contract(_))));
}
