//! Test-time scoring: prediction PSNR, per-clip min-max regular scores,
//! anomaly scores and difference maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sample_windows, FrameWindow, VideoClip, VideoDataset};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::tensor::Frame;

/// Floor for the MSE denominator and for a zero peak value.
pub const PSNR_FLOOR: f64 = 1e-10;

pub const SCORE_CSV_HEADER: &str = "frame_index,psnr,regular,anomaly,label";

/// Peak value in the PSNR numerator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrPeak {
    /// Maximum of the (clamped) prediction.
    #[default]
    PredictionMax,
    /// Fixed dynamic range of 1.0.
    Unit,
}

/// Range over which PSNR values are min-max normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    #[default]
    PerClip,
    PerDataset,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the prediction was all zeros and the peak had to be floored.
    pub zero_peak: bool,
}

/// PSNR in dB of `pred` against `target`; `pred` is clamped to [0, 1] first.
pub fn psnr(target: &Frame, pred: &Frame, peak: PsnrPeak) -> Result<Psnr> {
    target.ensure_same_shape(pred, "psnr")?;
    let n = pred.num_values() as f64;
    let mut max = 0.0f64;
    let mut sq = 0.0;
    for (t, p) in target.data.iter().zip(&pred.data) {
        let p = p.clamp(0.0, 1.0);
        max = max.max(p);
        sq += (t - p) * (t - p);
    }
    let mse = (sq / n).max(PSNR_FLOOR);
    let (numerator, zero_peak) = match peak {
        PsnrPeak::Unit => (1.0, false),
        PsnrPeak::PredictionMax if max > 0.0 => (max * max, false),
        PsnrPeak::PredictionMax => (PSNR_FLOOR, true),
    };
    Ok(Psnr {
        db: 10.0 * (numerator / mse).log10(),
        zero_peak,
    })
}

/// Min-max normalization to [0, 1]; a constant series maps to 0.5.
pub fn normalize_scores(series: &[f64]) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::shape("cannot normalize an empty score series"));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("score series contains non-finite values".into()));
    }
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.5; series.len()]);
    }
    Ok(series.iter().map(|v| (v - min) / (max - min)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub clip_id: String,
    /// Index of the scored (target) frame within its clip.
    pub frame_index: Vec<usize>,
    pub psnr: Vec<f64>,
    pub regular: Vec<f64>,
    pub anomaly: Vec<f64>,
    /// Ground truth for the scored frames, when the clip has labels.
    pub labels: Option<Vec<u8>>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.psnr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psnr.is_empty()
    }

    fn set_regular(&mut self, regular: Vec<f64>) {
        self.anomaly = regular.iter().map(|r| 1.0 - r).collect();
        self.regular = regular;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScoreOptions {
    pub peak: PsnrPeak,
    pub scope: NormalizationScope,
}

/// Raw PSNR of every window prediction, in window order. Never touches labels.
fn clip_psnr(params: &ModelParams, windows: &[FrameWindow<'_>], peak: PsnrPeak) -> Result<Vec<f64>> {
    windows
        .iter()
        .map(|w| {
            let (pred, _) = forward(params, w, None)?;
            let p = psnr(w.target(), &pred, peak)?;
            if p.zero_peak {
                log::warn!(
                    "clip `{}` frame {}: all-zero prediction, PSNR peak floored",
                    w.clip_id(),
                    w.target_index()
                );
            }
            Ok(p.db)
        })
        .collect()
}

fn single_clip_dataset(clip: &VideoClip, params: &ModelParams) -> VideoDataset {
    let (h, w) = params.config.image_size;
    VideoDataset {
        videos: vec![clip.clone()],
        split: crate::data::Split::Test,
        frame_height: h,
        frame_width: w,
        channels: params.config.out_channels,
    }
}

fn unnormalized_series(params: &ModelParams, clip: &VideoClip, t: usize, peak: PsnrPeak) -> Result<ScoreSeries> {
    if clip.len() <= t {
        return Err(Error::shape(format!(
            "clip `{}` has {} frames, scoring needs more than T={t}",
            clip.clip_id,
            clip.len()
        )));
    }
    let ds = single_clip_dataset(clip, params);
    let windows = sample_windows(&ds, t)?;
    let psnr = clip_psnr(params, &windows.windows, peak)?;
    let frame_index: Vec<usize> = (t..clip.len()).collect();
    let labels = clip
        .labels
        .as_ref()
        .map(|l| frame_index.iter().map(|&i| l[i]).collect());
    Ok(ScoreSeries {
        clip_id: clip.clip_id.clone(),
        frame_index,
        psnr,
        regular: Vec::new(),
        anomaly: Vec::new(),
        labels,
    })
}

/// Scores every predictable frame of one clip, normalized within the clip.
pub fn score_clip(params: &ModelParams, clip: &VideoClip, t: usize, peak: PsnrPeak) -> Result<ScoreSeries> {
    let mut series = unnormalized_series(params, clip, t, peak)?;
    let regular = normalize_scores(&series.psnr)?;
    series.set_regular(regular);
    Ok(series)
}

/// Scores every clip; normalization follows `opts.scope`.
pub fn score_dataset(
    params: &ModelParams,
    dataset: &VideoDataset,
    t: usize,
    opts: ScoreOptions,
) -> Result<Vec<ScoreSeries>> {
    let mut all = dataset
        .videos
        .iter()
        .map(|clip| unnormalized_series(params, clip, t, opts.peak))
        .collect::<Result<Vec<_>>>()?;
    match opts.scope {
        NormalizationScope::PerClip => {
            for s in &mut all {
                let regular = normalize_scores(&s.psnr)?;
                s.set_regular(regular);
            }
        }
        NormalizationScope::PerDataset => {
            let joined: Vec<f64> = all.iter().flat_map(|s| s.psnr.iter().copied()).collect();
            let mut regular = normalize_scores(&joined)?.into_iter();
            for s in &mut all {
                let part: Vec<f64> = regular.by_ref().take(s.len()).collect();
                s.set_regular(part);
            }
        }
    }
    Ok(all)
}

/// Per-pixel squared error summed over channels, min-max normalized.
pub fn diff_map(target: &Frame, pred: &Frame) -> Result<Frame> {
    target.ensure_same_shape(pred, "difference map")?;
    let c = target.channels;
    let errors: Vec<f64> = target
        .data
        .chunks_exact(c)
        .zip(pred.data.chunks_exact(c))
        .map(|(t, p)| t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    Frame::from_vec(target.height, target.width, 1, normalize_scores(&errors)?)
}

pub fn write_scores_csv(series: &ScoreSeries, path: &Path) -> Result<()> {
    let mut out = String::from(SCORE_CSV_HEADER);
    out.push('\n');
    for i in 0..series.len() {
        let label = match &series.labels {
            Some(l) => l[i].to_string(),
            None => String::new(),
        };
        writeln!(
            out,
            "{},{},{},{},{}",
            series.frame_index[i], series.psnr[i], series.regular[i], series.anomaly[i], label
        )
        .expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(clip_id: &str, path: &Path) -> Result<ScoreSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Ingestion {
        clip: clip_id.to_string(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SCORE_CSV_HEADER) {
        return Err(bad(format!("{} lacks the `{SCORE_CSV_HEADER}` header", path.display())));
    }
    let mut s = ScoreSeries {
        clip_id: clip_id.to_string(),
        frame_index: Vec::new(),
        psnr: Vec::new(),
        regular: Vec::new(),
        anomaly: Vec::new(),
        labels: Some(Vec::new()),
    };
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(bad(format!("row {}: expected 5 fields", n + 2)));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| bad(format!("row {}: bad number `{}`", n + 2, fields[i])))
        };
        s.frame_index.push(num(0)? as usize);
        s.psnr.push(num(1)?);
        s.regular.push(num(2)?);
        s.anomaly.push(num(3)?);
        match fields[4] {
            "" => s.labels = None,
            "0" | "1" => {
                if let Some(l) = s.labels.as_mut() {
                    l.push((fields[4] == "1") as u8);
                }
            }
            other => return Err(bad(format!("row {}: bad label `{other}`", n + 2))),
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::{init_params, ModelConfig};
    use proptest::prelude::*;

    fn flat(v: f64, n: usize) -> Frame {
        Frame::filled(1, n, 1, v)
    }

    #[test]
    fn twenty_db_for_unit_peak_and_mse_hundredth() {
        // Ten pixels, prediction max 1; one pixel off by sqrt(0.1) gives MSE 0.01.
        let pred = flat(1.0, 10);
        let mut target = flat(1.0, 10);
        target.data[0] = 1.0 - 0.1f64.sqrt();
        let p = psnr(&target, &pred, PsnrPeak::PredictionMax).unwrap();
        assert!((p.db - 20.0).abs() < 1e-9, "{}", p.db);
    }

    #[test]
    fn doubling_mse_costs_three_db() {
        let pred = flat(0.8, 4);
        let mut t1 = pred.clone();
        t1.data[0] = 0.6;
        let mut t2 = pred.clone();
        t2.data[0] = 0.8 - 0.2 * 2f64.sqrt();
        let a = psnr(&t1, &pred, PsnrPeak::PredictionMax).unwrap().db;
        let b = psnr(&t2, &pred, PsnrPeak::PredictionMax).unwrap().db;
        assert!(((a - b) - 10.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn identical_frames_give_large_finite_psnr() {
        let f = flat(0.5, 8);
        let same = psnr(&f, &f, PsnrPeak::PredictionMax).unwrap().db;
        assert!(same.is_finite());
        assert!((same - 10.0 * (0.25 / PSNR_FLOOR).log10()).abs() < 1e-9);
        let mut off = f.clone();
        off.data[0] = 0.51;
        assert!(same > psnr(&off, &f, PsnrPeak::PredictionMax).unwrap().db);
    }

    #[test]
    fn zero_prediction_is_flagged() {
        let p = psnr(&flat(0.3, 4), &flat(0.0, 4), PsnrPeak::PredictionMax).unwrap();
        assert!(p.zero_peak && p.db.is_finite());
        assert!(!psnr(&flat(0.3, 4), &flat(0.0, 4), PsnrPeak::Unit).unwrap().zero_peak);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_scores(&[10.0, 20.0, 30.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[17.0; 3]).unwrap(), vec![0.5; 3]);
        assert!(normalize_scores(&[]).is_err());
    }

    #[test]
    fn diff_map_cases() {
        let t = Frame::filled(8, 8, 3, 0.4);
        let same = diff_map(&t, &t).unwrap();
        assert!(same.data.iter().all(|&v| v == 0.5));

        let mut p = t.clone();
        for y in 4..8 {
            for x in 0..4 {
                let i = p.index(y, x, 1);
                p.data[i] += 0.1 * (1 + x + y) as f64;
            }
        }
        let m = diff_map(&t, &p).unwrap();
        assert_eq!(m.channels, 1);
        let (mut best, mut at) = (f64::MIN, (0, 0));
        for y in 0..8 {
            for x in 0..8 {
                if m.at(y, x, 0) > best {
                    best = m.at(y, x, 0);
                    at = (y, x);
                }
            }
        }
        assert!(at.0 >= 4 && at.1 < 4);
        assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn model_and_clip(labels: bool) -> (ModelParams, VideoClip) {
        let cfg = ModelConfig {
            image_size: (8, 8),
            patch_size: 4,
            in_channels: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            out_channels: 1,
        };
        let params = init_params(&cfg, 3, None).unwrap();
        let frames = (0..16)
            .map(|k| {
                let data = (0..64).map(|i| 0.5 + 0.4 * ((i * (k + 1)) as f64 * 0.1).sin()).collect();
                Frame::from_vec(8, 8, 1, data).unwrap()
            })
            .collect();
        let clip = VideoClip {
            clip_id: "c".into(),
            frames,
            labels: labels.then(|| (0..16).map(|k| (k >= 10) as u8).collect()),
        };
        (params, clip)
    }

    #[test]
    fn score_clip_length_and_label_alignment() {
        let (params, clip) = model_and_clip(true);
        let s = score_clip(&params, &clip, 4, PsnrPeak::PredictionMax).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s.frame_index, (4..16).collect::<Vec<_>>());
        assert_eq!(s.labels.as_ref().unwrap(), &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        for (r, a) in s.regular.iter().zip(&s.anomaly) {
            assert!((r + a - 1.0).abs() < 1e-15);
        }
        assert_eq!(s, score_clip(&params, &clip, 4, PsnrPeak::PredictionMax).unwrap());
    }

    #[test]
    fn scores_do_not_depend_on_labels() {
        let (params, with) = model_and_clip(true);
        let (_, without) = model_and_clip(false);
        let a = score_clip(&params, &with, 4, PsnrPeak::PredictionMax).unwrap();
        let b = score_clip(&params, &without, 4, PsnrPeak::PredictionMax).unwrap();
        assert_eq!((a.psnr, a.regular, a.anomaly), (b.psnr, b.regular, b.anomaly));
    }

    #[test]
    fn one_bad_frame_gets_maximal_anomaly() {
        let (mut params, mut clip) = model_and_clip(false);
        // Make the prediction constant so the error is fully controlled by the targets.
        params.decoder.weight.data.fill(0.0);
        params.decoder.bias.fill(0.5);
        for (k, f) in clip.frames.iter_mut().enumerate() {
            f.data.fill(if k == 9 { 0.5 + 0.3 } else { 0.5 + 0.03 });
        }
        let s = score_clip(&params, &clip, 4, PsnrPeak::PredictionMax).unwrap();
        let worst = s.frame_index.iter().position(|&i| i == 9).unwrap();
        assert_eq!(s.anomaly[worst], 1.0);
    }

    #[test]
    fn too_short_clip_is_rejected() {
        let (params, mut clip) = model_and_clip(false);
        clip.frames.truncate(4);
        assert!(score_clip(&params, &clip, 4, PsnrPeak::PredictionMax).is_err());
    }

    #[test]
    fn per_dataset_scope_shares_one_range() {
        let (params, clip) = model_and_clip(true);
        let mut other = clip.clone();
        other.clip_id = "d".into();
        other.frames.iter_mut().for_each(|f| f.data.iter_mut().for_each(|v| *v *= 0.5));
        let ds = VideoDataset {
            videos: vec![clip, other],
            split: Split::Test,
            frame_height: 8,
            frame_width: 8,
            channels: 1,
        };
        let opts = ScoreOptions {
            scope: NormalizationScope::PerDataset,
            ..ScoreOptions::default()
        };
        let s = score_dataset(&params, &ds, 4, opts).unwrap();
        let all: Vec<f64> = s.iter().flat_map(|x| x.regular.iter().copied()).collect();
        assert_eq!(all.iter().copied().fold(f64::MIN, f64::max), 1.0);
        assert_eq!(all.iter().copied().fold(f64::MAX, f64::min), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (params, clip) = model_and_clip(true);
        let s = score_clip(&params, &clip, 4, PsnrPeak::PredictionMax).unwrap();
        let path = dir.path().join("c.csv");
        write_scores_csv(&s, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame_index,psnr,regular,anomaly,label\n"));
        assert_eq!(text.lines().count(), 13);
        assert_eq!(read_scores_csv("c", &path).unwrap(), s);
    }

    proptest! {
        #[test]
        fn normalization_is_affine_invariant(v in prop::collection::vec(-50.0f64..50.0, 2..30), a in 0.1f64..10.0, b in -20.0f64..20.0) {
            let base = normalize_scores(&v).unwrap();
            let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let after = normalize_scores(&moved).unwrap();
            for (x, y) in base.iter().zip(&after) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn normalization_preserves_order(v in prop::collection::vec(-50.0f64..50.0, 2..30)) {
            let out = normalize_scores(&v).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
            prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
        }

        #[test]
        fn psnr_decreases_with_error(e1 in 0.01f64..0.3, extra in 0.001f64..0.3) {
            let pred = flat(0.9, 4);
            let mut t1 = pred.clone();
            t1.data[0] = 0.9 - e1;
            let mut t2 = pred.clone();
            t2.data[0] = 0.9 - e1 - extra;
            let a = psnr(&t1, &pred, PsnrPeak::PredictionMax).unwrap().db;
            let b = psnr(&t2, &pred, PsnrPeak::PredictionMax).unwrap().db;
            prop_assert!(b < a);
        }
    }
}
