//! Deterministic moving-sprite videos over a static textured background.
//!
//! Train clips show one round sprite drifting at constant speed and bouncing
//! off the borders. Every even-indexed test clip turns anomalous inside
//! `anomaly_span`: the sprite either speeds up or is drawn as a bar.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Split, VideoClip, VideoDataset};
use crate::error::{Error, Result};
use crate::seeds::{self, Stream};
use crate::tensor::Frame;

/// Speed multiplier inside a fast-motion anomaly span.
pub const FAST_MOTION_FACTOR: f64 = 3.0;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    FastMotion,
    OddShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_train_clips: usize,
    pub num_test_clips: usize,
    pub frames_per_clip: usize,
    /// Pixels per frame.
    pub sprite_speed_normal: f64,
    pub anomaly_kind: AnomalyKind,
    /// Half-open `[start, end)` frame range.
    pub anomaly_span: (usize, usize),
    pub seed: u64,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    pub sprite_radius: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_train_clips: 8,
            num_test_clips: 8,
            frames_per_clip: 24,
            sprite_speed_normal: 2.0,
            anomaly_kind: AnomalyKind::FastMotion,
            anomaly_span: (8, 16),
            seed: 0,
            frame_height: 64,
            frame_width: 64,
            channels: 1,
            sprite_radius: 5.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (start, end) = self.anomaly_span;
        if start >= end || end > self.frames_per_clip {
            return Err(Error::config(format!(
                "anomaly_span ({start}, {end}) must be a nonempty range within [0, {})",
                self.frames_per_clip
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(self.sprite_speed_normal.is_finite() && self.sprite_speed_normal > 0.0) {
            return Err(Error::config("sprite_speed_normal must be positive"));
        }
        if !(self.sprite_radius.is_finite() && self.sprite_radius > 0.0) {
            return Err(Error::config("sprite_radius must be positive"));
        }
        let min_side = self.frame_height.min(self.frame_width) as f64;
        if min_side < 4.0 * self.sprite_radius {
            return Err(Error::config("frames are too small for the sprite"));
        }
        Ok(())
    }

    /// Whether test clip `index` contains an anomaly span.
    pub fn is_anomalous_test_clip(index: usize) -> bool {
        index % 2 == 0
    }
}

/// Returns `(train, test)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(VideoDataset, VideoDataset)> {
    spec.validate()?;
    let background = background(spec);
    let make = |split: Split, count: usize| VideoDataset {
        videos: (0..count)
            .map(|i| render_clip(spec, &background, split, i))
            .collect(),
        split,
        frame_height: spec.frame_height,
        frame_width: spec.frame_width,
        channels: spec.channels,
    };
    Ok((
        make(Split::Train, spec.num_train_clips),
        make(Split::Test, spec.num_test_clips),
    ))
}

fn background(spec: &SyntheticSpec) -> Frame {
    let mut rng = seeds::rng(spec.seed, Stream::Background, 0, 0);
    let (h, w, c) = (spec.frame_height, spec.frame_width, spec.channels);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.07),
            )
        })
        .collect();
    let tint: Vec<f64> = (0..c).map(|_| rng.random_range(-0.04..0.04)).collect();
    let mut frame = Frame::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.3;
            for &(fx, fy, phase, amp) in &waves {
                let arg = std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64);
                v += amp * (arg + phase).sin();
            }
            let grain = rng.random_range(-0.03..0.03);
            for (ch, t) in tint.iter().enumerate() {
                let i = frame.index(y, x, ch);
                frame.data[i] = (v + grain + t).clamp(0.0, 1.0);
            }
        }
    }
    frame
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Bar,
}

impl Shape {
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Bar => dx.abs() <= 1.8 * r && dy.abs() <= 0.5 * r,
        }
    }
}

fn render_clip(spec: &SyntheticSpec, background: &Frame, split: Split, index: usize) -> VideoClip {
    let stream = match split {
        Split::Train => Stream::TrainClip,
        Split::Test => Stream::TestClip,
    };
    let mut rng = seeds::rng(spec.seed, stream, 0, index as u64);
    let r = spec.sprite_radius;
    let (h, w) = (spec.frame_height as f64, spec.frame_width as f64);
    let mut pos = (rng.random_range(r..w - r), rng.random_range(r..h - r));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut vel = (angle.cos() * spec.sprite_speed_normal, angle.sin() * spec.sprite_speed_normal);
    let colour: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.8..0.95)).collect();

    let anomalous = split == Split::Test && SyntheticSpec::is_anomalous_test_clip(index);
    let (start, end) = spec.anomaly_span;
    let mut frames = Vec::with_capacity(spec.frames_per_clip);
    let mut labels = Vec::with_capacity(spec.frames_per_clip);
    for k in 0..spec.frames_per_clip {
        let in_span = anomalous && (start..end).contains(&k);
        if k > 0 {
            let factor = match spec.anomaly_kind {
                AnomalyKind::FastMotion if in_span => FAST_MOTION_FACTOR,
                _ => 1.0,
            };
            pos.0 += vel.0 * factor;
            pos.1 += vel.1 * factor;
            bounce(&mut pos.0, &mut vel.0, r, w - r);
            bounce(&mut pos.1, &mut vel.1, r, h - r);
        }
        let shape = match spec.anomaly_kind {
            AnomalyKind::OddShape if in_span => Shape::Bar,
            _ => Shape::Disk,
        };
        frames.push(draw(background, pos, r, shape, &colour));
        labels.push(in_span as u8);
    }

    VideoClip {
        clip_id: format!("clip_{index:03}"),
        frames,
        labels: (split == Split::Test).then_some(labels),
    }
}

fn bounce(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    // Several reflections are possible only for steps longer than the span.
    while *p < lo || *p > hi {
        if *p < lo {
            *p = 2.0 * lo - *p;
        } else {
            *p = 2.0 * hi - *p;
        }
        *v = -*v;
    }
}

fn draw(background: &Frame, centre: (f64, f64), r: f64, shape: Shape, colour: &[f64]) -> Frame {
    let mut frame = background.clone();
    let reach = 2.0 * r + 1.0;
    let y0 = (centre.1 - reach).floor().max(0.0) as usize;
    let y1 = ((centre.1 + reach).ceil() as usize).min(frame.height);
    let x0 = (centre.0 - reach).floor().max(0.0) as usize;
    let x1 = ((centre.0 + reach).ceil() as usize).min(frame.width);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if shape.contains(px - centre.0, py - centre.1, r) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for (ch, &col) in colour.iter().enumerate() {
                let i = frame.index(y, x, ch);
                frame.data[i] = frame.data[i] * (1.0 - cover) + col * cover;
            }
        }
    }
    frame
}
