//! `<root>/<split>/<clip_id>/######.png` plus `labels.txt` for test clips.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType as PngFilter, PngEncoder};
use image::imageops::FilterType;
use image::{ExtendedColorType, ImageEncoder};

use super::{check_labels, Split, VideoClip, VideoDataset};
use crate::error::{Error, Result};
use crate::tensor::Frame;

const LABEL_FILE: &str = "labels.txt";

/// Loads one split, resizing every frame to `resize_to` (height, width).
pub fn load_dataset(
    root: &Path,
    split: Split,
    resize_to: (usize, usize),
    channels: usize,
    patch_size: usize,
) -> Result<VideoDataset> {
    let (height, width) = resize_to;
    if patch_size == 0 || height == 0 || width == 0 {
        return Err(Error::config("frame size and patch size must be positive"));
    }
    if height % patch_size != 0 || width % patch_size != 0 {
        return Err(Error::config(format!(
            "resize target {height}x{width} is not divisible by patch size {patch_size}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::config(format!("channels must be 1 or 3, got {channels}")));
    }

    let split_dir = root.join(split.as_str());
    let mut clip_dirs: Vec<PathBuf> = fs::read_dir(&split_dir)
        .map_err(|e| Error::io(&split_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();

    let mut videos = Vec::with_capacity(clip_dirs.len());
    for dir in clip_dirs {
        videos.push(load_clip(&dir, split, height, width, channels)?);
    }
    let dataset = VideoDataset {
        videos,
        split,
        frame_height: height,
        frame_width: width,
        channels,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Native (height, width) of the first frame of the first clip in `split`.
pub fn probe_frame_size(root: &Path, split: Split) -> Result<(usize, usize)> {
    let split_dir = root.join(split.as_str());
    let mut clip_dirs: Vec<PathBuf> = fs::read_dir(&split_dir)
        .map_err(|e| Error::io(&split_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    clip_dirs.sort();
    let dir = clip_dirs
        .first()
        .ok_or_else(|| Error::config(format!("no clips under {}", split_dir.display())))?;
    let path = dir.join("000000.png");
    let (w, h) = image::image_dimensions(&path).map_err(|source| Error::Image {
        path: path.clone(),
        source,
    })?;
    Ok((h as usize, w as usize))
}

fn load_clip(dir: &Path, split: Split, height: usize, width: usize, channels: usize) -> Result<VideoClip> {
    let clip_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ingestion = |reason: String| Error::Ingestion {
        clip: clip_id.clone(),
        reason,
    };

    let mut indexed = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(stem) = frame_stem(&path) else { continue };
        let index: usize = stem
            .parse()
            .map_err(|_| ingestion(format!("bad frame file name {}", path.display())))?;
        indexed.push((index, path));
    }
    indexed.sort();
    for (expected, (index, _)) in indexed.iter().enumerate() {
        if *index != expected {
            return Err(ingestion(format!("frame {expected:06}.png is missing")));
        }
    }

    let frames = indexed
        .iter()
        .map(|(_, path)| read_frame(path, height, width, channels))
        .collect::<Result<Vec<_>>>()?;

    let labels = match split {
        Split::Train => None,
        Split::Test => {
            let path = dir.join(LABEL_FILE);
            if !path.exists() {
                return Err(ingestion(format!("missing {LABEL_FILE}")));
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let labels = parse_labels(&text).map_err(ingestion)?;
            check_labels(&clip_id, &labels, frames.len())?;
            Some(labels)
        }
    };

    Ok(VideoClip {
        clip_id,
        frames,
        labels,
    })
}

fn frame_stem(path: &Path) -> Option<String> {
    if path.extension()? != "png" {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    (stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit())).then(|| stem.to_string())
}

fn parse_labels(text: &str) -> std::result::Result<Vec<u8>, String> {
    text.lines()
        .map(str::trim)
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| match line {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(format!("line {}: expected 0 or 1, found `{other}`", n + 1)),
        })
        .collect()
}

fn read_frame(path: &Path, height: usize, width: usize, channels: usize) -> Result<Frame> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img = if img.height() as usize != height || img.width() as usize != width {
        img.resize_exact(width as u32, height as u32, FilterType::Triangle)
    } else {
        img
    };
    let bytes = match channels {
        1 => img.to_luma8().into_raw(),
        _ => img.to_rgb8().into_raw(),
    };
    let data = bytes.into_iter().map(|b| b as f64 / 255.0).collect();
    Frame::from_vec(height, width, channels, data)
}

/// Quantizes `[0, 1]` values to 8 bits, round-half-up, clamping outliers.
pub(crate) fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a 1- or 3-channel frame as an 8-bit PNG with fixed encoder settings.
pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let color = match frame.channels {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        c => return Err(Error::shape(format!("cannot write a {c}-channel frame as PNG"))),
    };
    let bytes: Vec<u8> = frame.data.iter().map(|&v| quantize(v)).collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PngEncoder::new_with_quality(
        BufWriter::new(file),
        CompressionType::Default,
        PngFilter::Adaptive,
    );
    encoder
        .write_image(&bytes, frame.width as u32, frame.height as u32, color)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes `dataset` under `root` in the layout [`load_dataset`] reads.
pub fn write_dataset(dataset: &VideoDataset, root: &Path) -> Result<()> {
    let split_dir = root.join(dataset.split.as_str());
    for clip in &dataset.videos {
        let dir = split_dir.join(&clip.clip_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (k, frame) in clip.frames.iter().enumerate() {
            write_png(&dir.join(format!("{k:06}.png")), frame)?;
        }
        if let Some(labels) = &clip.labels {
            let mut text = String::with_capacity(labels.len() * 2);
            for l in labels {
                text.push(if *l == 1 { '1' } else { '0' });
                text.push('\n');
            }
            let path = dir.join(LABEL_FILE);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
