//! Patch-aligned random masks and mask-token substitution.
//!
//! A mask marks a uniformly random subset of spatial patches. The masked
//! patch embeddings are swapped for the learned mask token before positional
//! embeddings are added, which turns a normal window into a pseudo anomaly.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::seeds::{self, Stream};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn for_frame(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::config(format!(
                "frame {height}x{width} is not divisible into {patch_size}x{patch_size} patches"
            )));
        }
        Ok(PatchGrid {
            patch_size,
            rows: height / patch_size,
            cols: width / patch_size,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub grid: PatchGrid,
    /// Row-major over the patch grid.
    pub masked: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

impl PatchMask {
    pub fn empty(grid: PatchGrid) -> Self {
        PatchMask {
            grid,
            masked: vec![false; grid.num_patches()],
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// `round(ratio · n)` with halves rounded up.
pub fn masked_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).min(n)
}

pub fn validate_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} is outside [0, 1]")));
    }
    Ok(())
}

/// Uniformly random subset of exactly `masked_count(ratio, N)` patches.
pub fn generate_mask(grid: PatchGrid, ratio: f64, seed: u64) -> Result<PatchMask> {
    validate_ratio(ratio)?;
    let n = grid.num_patches();
    let k = masked_count(ratio, n);
    let mut rng = seeds::rng(seed, Stream::Mask, 0, 0);
    let mut masked = vec![false; n];
    for i in index::sample(&mut rng, n, k) {
        masked[i] = true;
    }
    Ok(PatchMask {
        grid,
        masked,
        ratio,
        seed,
    })
}

/// Replaces masked rows of `tokens` with `mask_token`; other rows are untouched.
pub fn apply_mask(tokens: &Mat, mask: &PatchMask, mask_token: &[f64]) -> Result<Mat> {
    if tokens.rows != mask.masked.len() {
        return Err(Error::shape(format!(
            "{} token embeddings for a mask over {} patches",
            tokens.rows,
            mask.masked.len()
        )));
    }
    if mask_token.len() != tokens.cols {
        return Err(Error::shape(format!(
            "mask token has dimension {}, embeddings have {}",
            mask_token.len(),
            tokens.cols
        )));
    }
    let mut out = tokens.clone();
    for (r, _) in mask.masked.iter().enumerate().filter(|(_, &m)| m) {
        out.row_mut(r).copy_from_slice(mask_token);
    }
    Ok(out)
}
