//! Video datasets, temporal windows, on-disk IO and the synthetic generator.

mod io;
mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Frame;

pub use io::{load_dataset, probe_frame_size, write_dataset, write_png};
pub use synthetic::{generate_synthetic, AnomalyKind, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    /// Frames with values in [0, 1].
    pub frames: Vec<Frame>,
    /// Per-frame anomaly flags, test split only.
    pub labels: Option<Vec<u8>>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoDataset {
    pub videos: Vec<VideoClip>,
    pub split: Split,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
}

impl VideoDataset {
    /// Checks geometry and label invariants.
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        let shape = (self.frame_height, self.frame_width, self.channels);
        for clip in &self.videos {
            if let Some(frame) = clip.frames.iter().find(|f| f.shape() != shape) {
                return Err(Error::Ingestion {
                    clip: clip.clip_id.clone(),
                    reason: format!("frame shape {:?} differs from {:?}", frame.shape(), shape),
                });
            }
            match (&clip.labels, self.split) {
                (Some(_), Split::Train) => {
                    return Err(Error::Ingestion {
                        clip: clip.clip_id.clone(),
                        reason: "train clips must not carry labels".into(),
                    })
                }
                (None, Split::Test) => {
                    return Err(Error::Ingestion {
                        clip: clip.clip_id.clone(),
                        reason: "test clip has no labels".into(),
                    })
                }
                (Some(labels), Split::Test) => {
                    check_labels(&clip.clip_id, labels, clip.frames.len())?;
                }
                (None, Split::Train) => {}
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.videos.iter().map(VideoClip::len).sum()
    }

    /// A copy with every label removed.
    pub fn without_labels(&self) -> VideoDataset {
        let mut out = self.clone();
        for clip in &mut out.videos {
            clip.labels = None;
        }
        out
    }
}

pub(crate) fn check_labels(clip: &str, labels: &[u8], frames: usize) -> Result<()> {
    if labels.len() != frames {
        return Err(Error::Ingestion {
            clip: clip.to_string(),
            reason: format!("{} labels for {} frames", labels.len(), frames),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Ingestion {
            clip: clip.to_string(),
            reason: format!("label {bad} is not 0 or 1"),
        });
    }
    Ok(())
}

/// `t` consecutive input frames plus the frame right after them.
///
/// Borrows the clip; the channel-stacked input tensor is only materialized on
/// request. Labels are deliberately not reachable from a window.
#[derive(Debug, Clone, Copy)]
pub struct FrameWindow<'a> {
    clip: &'a VideoClip,
    target_index: usize,
    t: usize,
}

impl<'a> FrameWindow<'a> {
    pub fn new(clip: &'a VideoClip, t: usize, target_index: usize) -> Result<Self> {
        if t == 0 || target_index < t || target_index >= clip.len() {
            return Err(Error::shape(format!(
                "no window with T={t} ending at frame {target_index} in a clip of {} frames",
                clip.len()
            )));
        }
        Ok(FrameWindow {
            clip,
            target_index,
            t,
        })
    }

    pub fn clip_id(&self) -> &'a str {
        &self.clip.clip_id
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn num_inputs(&self) -> usize {
        self.t
    }

    pub fn input_frames(&self) -> &'a [Frame] {
        &self.clip.frames[self.target_index - self.t..self.target_index]
    }

    pub fn target(&self) -> &'a Frame {
        &self.clip.frames[self.target_index]
    }

    /// Inputs stacked along the channel axis: H × W × (T·C), oldest first.
    pub fn inputs(&self) -> Frame {
        let frames = self.input_frames();
        let (h, w, c) = frames[0].shape();
        let mut out = Frame::zeros(h, w, self.t * c);
        for y in 0..h {
            for x in 0..w {
                for (k, frame) in frames.iter().enumerate() {
                    for ch in 0..c {
                        let dst = out.index(y, x, k * c + ch);
                        out.data[dst] = frame.at(y, x, ch);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedClip {
    pub clip_id: String,
    pub frames: usize,
}

#[derive(Debug)]
pub struct Windows<'a> {
    pub windows: Vec<FrameWindow<'a>>,
    /// Clips too short to yield a single window.
    pub skipped: Vec<SkippedClip>,
}

/// Every window of `t` inputs in clip order, stride one, never crossing clips.
pub fn sample_windows(dataset: &VideoDataset, t: usize) -> Result<Windows<'_>> {
    if t == 0 {
        return Err(Error::config("T must be at least 1"));
    }
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    for clip in &dataset.videos {
        if clip.len() <= t {
            log::warn!(
                "clip `{}` has {} frames, needs more than T={t}; skipped",
                clip.clip_id,
                clip.len()
            );
            skipped.push(SkippedClip {
                clip_id: clip.clip_id.clone(),
                frames: clip.len(),
            });
            continue;
        }
        for target_index in t..clip.len() {
            windows.push(FrameWindow {
                clip,
                target_index,
                t,
            });
        }
    }
    Ok(Windows { windows, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(id: &str, n: usize) -> VideoClip {
        VideoClip {
            clip_id: id.into(),
            frames: (0..n).map(|i| Frame::filled(2, 2, 1, i as f64 / 100.0)).collect(),
            labels: None,
        }
    }

    fn dataset(clips: Vec<VideoClip>) -> VideoDataset {
        VideoDataset {
            videos: clips,
            split: Split::Train,
            frame_height: 2,
            frame_width: 2,
            channels: 1,
        }
    }

    #[test]
    fn sixteen_frames_with_four_inputs_give_twelve_windows() {
        let ds = dataset(vec![clip("a", 16)]);
        let w = sample_windows(&ds, 4).unwrap();
        assert_eq!(w.windows.len(), 12);
        let targets: Vec<_> = w.windows.iter().map(|w| w.target_index()).collect();
        assert_eq!(targets, (4..16).collect::<Vec<_>>());
    }

    #[test]
    fn short_clip_is_skipped_with_a_record() {
        let ds = dataset(vec![clip("short", 4)]);
        let w = sample_windows(&ds, 4).unwrap();
        assert!(w.windows.is_empty());
        assert_eq!(
            w.skipped,
            vec![SkippedClip {
                clip_id: "short".into(),
                frames: 4
            }]
        );
    }

    #[test]
    fn windows_never_span_clips() {
        let ds = dataset(vec![clip("a", 10), clip("b", 10)]);
        let w = sample_windows(&ds, 4).unwrap();
        assert_eq!(w.windows.len(), 12);
        for win in &w.windows {
            let id = win.clip_id();
            let owner = ds.videos.iter().find(|c| c.clip_id == id).unwrap();
            let start = win.target_index() - 4;
            assert_eq!(win.input_frames(), &owner.frames[start..win.target_index()]);
            assert_eq!(win.target(), &owner.frames[win.target_index()]);
        }
    }

    #[test]
    fn stacked_inputs_interleave_frames_per_pixel() {
        let ds = dataset(vec![clip("a", 6)]);
        let w = sample_windows(&ds, 2).unwrap();
        let stacked = w.windows[0].inputs();
        assert_eq!(stacked.shape(), (2, 2, 2));
        assert_eq!(stacked.at(1, 1, 0), 0.0);
        assert_eq!(stacked.at(1, 1, 1), 0.01);
    }

    #[test]
    fn mismatched_labels_fail_validation() {
        let mut c = clip("t", 10);
        c.labels = Some(vec![0; 9]);
        let mut ds = dataset(vec![c]);
        ds.split = Split::Test;
        let err = ds.validate().unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref clip, .. } if clip == "t"));
    }

    #[test]
    fn zero_window_length_is_a_config_error() {
        let ds = dataset(vec![clip("a", 3)]);
        assert!(matches!(sample_windows(&ds, 0), Err(Error::Config(_))));
    }
}
