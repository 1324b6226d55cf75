//! Transformer encoder over patch tokens with a one-layer linear decoder that
//! predicts the next frame.
//!
//! The forward pass records every intermediate needed by [`backward`], which
//! accumulates exact gradients into a [`ModelParams`]-shaped buffer.

pub mod checkpoint;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::FrameWindow;
use crate::error::{Error, Result};
use crate::masking::{PatchGrid, PatchMask};
use crate::tensor::{gemm_into, gemm_strided, Frame, Mat, Strided};

pub use params::{Block, LayerNorm, Linear, ModelParams, TensorMut, TensorRef};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "vit-b")]
    VitB,
    #[serde(rename = "tiny")]
    Tiny,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit-b" => Ok(Preset::VitB),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::config(format!("unknown model preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::VitB => "vit-b",
            Preset::Tiny => "tiny",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// (height, width)
    pub image_size: (usize, usize),
    pub patch_size: usize,
    /// T·C
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// C
    pub out_channels: usize,
}

impl ModelConfig {
    pub fn preset(
        preset: Preset,
        image_size: (usize, usize),
        patch_size: usize,
        frames: usize,
        channels: usize,
    ) -> Result<Self> {
        let (embed_dim, depth, heads) = match preset {
            Preset::VitB => (768, 12, 12),
            Preset::Tiny => (64, 2, 4),
        };
        let cfg = ModelConfig {
            image_size,
            patch_size,
            in_channels: frames * channels,
            embed_dim,
            depth,
            heads,
            mlp_ratio: 4,
            out_channels: channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        PatchGrid::for_frame(h, w, self.patch_size)?;
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.out_channels == 0
            || self.in_channels == 0
            || self.in_channels % self.out_channels != 0
            || self.mlp_ratio == 0
        {
            return Err(Error::config(format!(
                "in_channels {} must be a positive multiple of out_channels {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            patch_size: self.patch_size,
            rows: self.image_size.0 / self.patch_size,
            cols: self.image_size.1 / self.patch_size,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid().num_patches()
    }

    /// Number of input frames per window.
    pub fn frames(&self) -> usize {
        self.in_channels / self.out_channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn output_patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.out_channels
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let hidden = self.mlp_hidden();
        let n = self.num_patches();
        let block = 2 * (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
        (self.patch_dim() * d + d)
            + n * d
            + d
            + self.depth * block
            + 2 * d
            + (d * self.output_patch_dim() + self.output_patch_dim())
    }
}

/// Encoder output, one row per patch token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures {
    pub tokens: Mat,
}

pub fn init_params(
    config: &ModelConfig,
    seed: u64,
    pretrained: Option<&std::path::Path>,
) -> Result<ModelParams> {
    config.validate()?;
    let mut params = ModelParams::random(config, seed);
    if let Some(path) = pretrained {
        checkpoint::load_pretrained_into(&mut params, path)?;
    }
    Ok(params)
}

/// Features of the window; masked patches are swapped for the mask token.
pub fn encode(
    params: &ModelParams,
    window: &FrameWindow<'_>,
    mask: Option<&PatchMask>,
) -> Result<EncodedFeatures> {
    let trace = forward_trace(params, window.input_frames(), mask)?;
    Ok(EncodedFeatures {
        tokens: trace.features,
    })
}

pub fn decode(params: &ModelParams, feats: &EncodedFeatures) -> Result<Frame> {
    let cfg = &params.config;
    if feats.tokens.shape() != (cfg.num_patches(), cfg.embed_dim) {
        return Err(Error::shape(format!(
            "features {:?} do not match the {}x{} token grid",
            feats.tokens.shape(),
            cfg.num_patches(),
            cfg.embed_dim
        )));
    }
    Ok(fold(cfg, &linear(&feats.tokens, &params.decoder)))
}

/// Predicted frame and encoder features.
pub fn forward(
    params: &ModelParams,
    window: &FrameWindow<'_>,
    mask: Option<&PatchMask>,
) -> Result<(Frame, EncodedFeatures)> {
    let trace = forward_trace(params, window.input_frames(), mask)?;
    let prediction = trace.prediction();
    Ok((
        prediction,
        EncodedFeatures {
            tokens: trace.features,
        },
    ))
}

struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

struct BlockCache {
    h1: Mat,
    ln1: LnCache,
    qkv: Mat,
    attn: Vec<Mat>,
    heads_out: Mat,
    h2: Mat,
    ln2: LnCache,
    pre_act: Mat,
    act: Mat,
}

/// Everything recorded by a forward pass.
pub struct Trace {
    config: ModelConfig,
    patches: Mat,
    masked: Option<Vec<bool>>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    /// Post-norm encoder output.
    pub features: Mat,
    /// Decoder output, one row of `patch²·C` values per token.
    pub output_tokens: Mat,
}

impl Trace {
    pub fn prediction(&self) -> Frame {
        fold(&self.config, &self.output_tokens)
    }
}

fn check_inputs(cfg: &ModelConfig, inputs: &[Frame]) -> Result<()> {
    let (h, w) = cfg.image_size;
    let expected = (h, w, cfg.out_channels);
    if inputs.len() != cfg.frames() {
        return Err(Error::shape(format!(
            "model expects {} input frames, got {}",
            cfg.frames(),
            inputs.len()
        )));
    }
    if let Some(f) = inputs.iter().find(|f| f.shape() != expected) {
        return Err(Error::shape(format!(
            "input frame {:?} does not match model geometry {:?}",
            f.shape(),
            expected
        )));
    }
    Ok(())
}

/// Full forward pass from `T` input frames.
pub fn forward_trace(params: &ModelParams, inputs: &[Frame], mask: Option<&PatchMask>) -> Result<Trace> {
    let cfg = &params.config;
    check_inputs(cfg, inputs)?;
    if let Some(m) = mask {
        if m.grid != cfg.grid() {
            return Err(Error::shape(format!(
                "mask grid {}x{} does not match model grid {}x{}",
                m.grid.rows,
                m.grid.cols,
                cfg.grid().rows,
                cfg.grid().cols
            )));
        }
    }

    let patches = patchify(cfg, inputs);
    let mut x = linear(&patches, &params.patch_embed);
    if let Some(m) = mask {
        for (r, _) in m.masked.iter().enumerate().filter(|(_, &v)| v) {
            x.row_mut(r).copy_from_slice(&params.mask_token);
        }
    }
    for (v, p) in x.data.iter_mut().zip(&params.pos_embed.data) {
        *v += p;
    }
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite patch embeddings".into()));
    }

    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, block) in params.blocks.iter().enumerate() {
        let cache = block_forward(cfg, block, &mut x);
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite activations after block {i}")));
        }
        blocks.push(cache);
    }
    let (features, final_ln) = layer_norm(&x, &params.norm);
    let output_tokens = linear(&features, &params.decoder);
    if !output_tokens.is_finite() {
        return Err(Error::Numeric("non-finite decoder output".into()));
    }
    Ok(Trace {
        config: cfg.clone(),
        patches,
        masked: mask.map(|m| m.masked.clone()),
        blocks,
        final_ln,
        features,
        output_tokens,
    })
}

/// Accumulates parameter gradients into `grads`.
///
/// `d_output` is the gradient with respect to the predicted frame and
/// `d_features` an optional extra gradient on the encoder features.
pub fn backward(
    params: &ModelParams,
    trace: &Trace,
    d_output: &Frame,
    d_features: Option<&Mat>,
    grads: &mut ModelParams,
) {
    let cfg = &params.config;
    let d_out_tokens = unfold(cfg, d_output);
    let mut d_feat = linear_backward(&trace.features, &d_out_tokens, &params.decoder, &mut grads.decoder, true)
        .expect("decoder input gradient");
    if let Some(extra) = d_features {
        for (a, b) in d_feat.data.iter_mut().zip(&extra.data) {
            *a += b;
        }
    }
    let mut dx = layer_norm_backward(&d_feat, &trace.final_ln, &params.norm, &mut grads.norm);
    for i in (0..params.blocks.len()).rev() {
        dx = block_backward(cfg, &params.blocks[i], &trace.blocks[i], dx, &mut grads.blocks[i]);
    }

    // Positional embeddings see the full gradient; masked rows route to the
    // mask token instead of the patch embedding.
    for (g, d) in grads.pos_embed.data.iter_mut().zip(&dx.data) {
        *g += d;
    }
    if let Some(masked) = &trace.masked {
        for (r, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
            for (g, d) in grads.mask_token.iter_mut().zip(dx.row(r)) {
                *g += d;
            }
            dx.row_mut(r).fill(0.0);
        }
    }
    linear_backward(&trace.patches, &dx, &params.patch_embed, &mut grads.patch_embed, false);
}

/// Rows are patches in raster order; each row is laid out (dy, dx, frame, channel).
pub fn patchify(cfg: &ModelConfig, inputs: &[Frame]) -> Mat {
    let grid = cfg.grid();
    let p = cfg.patch_size;
    let c = cfg.out_channels;
    let t = inputs.len();
    let mut out = Mat::zeros(grid.num_patches(), cfg.patch_dim());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let row = out.row_mut(gr * grid.cols + gc);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (gr * p + dy, gc * p + dx);
                    for frame in inputs.iter().take(t) {
                        let base = frame.index(y, x, 0);
                        row[k..k + c].copy_from_slice(&frame.data[base..base + c]);
                        k += c;
                    }
                }
            }
        }
    }
    out
}

/// Places each decoder row at its patch position.
pub fn fold(cfg: &ModelConfig, tokens: &Mat) -> Frame {
    let grid = cfg.grid();
    let p = cfg.patch_size;
    let c = cfg.out_channels;
    let (h, w) = cfg.image_size;
    let mut frame = Frame::zeros(h, w, c);
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let row = tokens.row(gr * grid.cols + gc);
            for dy in 0..p {
                let y = gr * p + dy;
                let start = frame.index(y, gc * p, 0);
                frame.data[start..start + p * c].copy_from_slice(&row[dy * p * c..(dy + 1) * p * c]);
            }
        }
    }
    frame
}

/// Inverse of [`fold`].
pub fn unfold(cfg: &ModelConfig, frame: &Frame) -> Mat {
    let grid = cfg.grid();
    let p = cfg.patch_size;
    let c = cfg.out_channels;
    let mut tokens = Mat::zeros(grid.num_patches(), cfg.output_patch_dim());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let row = tokens.row_mut(gr * grid.cols + gc);
            for dy in 0..p {
                let y = gr * p + dy;
                let start = frame.index(y, gc * p, 0);
                row[dy * p * c..(dy + 1) * p * c].copy_from_slice(&frame.data[start..start + p * c]);
            }
        }
    }
    tokens
}

fn linear(x: &Mat, lin: &Linear) -> Mat {
    let mut y = x.matmul(&lin.weight);
    y.add_row_vector(&lin.bias);
    y
}

fn linear_backward(x: &Mat, dy: &Mat, lin: &Linear, grad: &mut Linear, need_dx: bool) -> Option<Mat> {
    gemm_into(x, true, dy, false, &mut grad.weight, 1.0);
    dy.add_col_sums_to(&mut grad.bias);
    need_dx.then(|| {
        let mut dx = Mat::zeros(x.rows, x.cols);
        gemm_into(dy, false, &lin.weight, true, &mut dx, 0.0);
        dx
    })
}

fn layer_norm(x: &Mat, ln: &LayerNorm) -> (Mat, LnCache) {
    let d = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(s);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        let yr = &mut y.data[r * x.cols..(r + 1) * x.cols];
        for j in 0..x.cols {
            yr[j] = xhat.data[r * x.cols + j] * ln.gamma[j] + ln.beta[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Mat, cache: &LnCache, ln: &LayerNorm, grad: &mut LayerNorm) -> Mat {
    let cols = dy.cols;
    let d = cols as f64;
    let mut dx = Mat::zeros(dy.rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..cols {
            grad.gamma[j] += dyr[j] * xh[j];
            grad.beta[j] += dyr[j];
            dxhat[j] = dyr[j] * ln.gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let s = cache.rstd[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

fn softmax_rows(m: &mut Mat) {
    let cols = m.cols;
    for row in m.data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Runs one block in place on the residual stream `x`.
fn block_forward(cfg: &ModelConfig, block: &Block, x: &mut Mat) -> BlockCache {
    let n = x.rows;
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let (h1, ln1) = layer_norm(x, &block.norm1);
    let qkv = linear(&h1, &block.qkv);
    let mut heads_out = Mat::zeros(n, d);
    let mut attn = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = Strided::new(&qkv.data[h * dh..], 3 * d, 1);
        let k = Strided::new(&qkv.data[d + h * dh..], 3 * d, 1);
        let v = Strided::new(&qkv.data[2 * d + h * dh..], 3 * d, 1);
        let mut scores = Mat::zeros(n, n);
        gemm_strided(n, dh, n, q, k.transposed(), 0.0, &mut scores.data, n);
        scores.data.iter_mut().for_each(|s| *s *= scale);
        softmax_rows(&mut scores);
        gemm_strided(
            n,
            n,
            dh,
            Strided::new(&scores.data, n, 1),
            v,
            0.0,
            &mut heads_out.data[h * dh..],
            d,
        );
        attn.push(scores);
    }
    let attn_out = linear(&heads_out, &block.proj);
    for (a, b) in x.data.iter_mut().zip(&attn_out.data) {
        *a += b;
    }

    let (h2, ln2) = layer_norm(x, &block.norm2);
    let pre_act = linear(&h2, &block.fc1);
    let mut act = pre_act.clone();
    act.data.iter_mut().for_each(|u| *u = gelu(*u));
    let mlp_out = linear(&act, &block.fc2);
    for (a, b) in x.data.iter_mut().zip(&mlp_out.data) {
        *a += b;
    }

    BlockCache {
        h1,
        ln1,
        qkv,
        attn,
        heads_out,
        h2,
        ln2,
        pre_act,
        act,
    }
}

/// Gradient of the block input given the gradient of its output.
fn block_backward(cfg: &ModelConfig, block: &Block, cache: &BlockCache, d_out: Mat, grad: &mut Block) -> Mat {
    let n = d_out.rows;
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch.
    let mut d_act = linear_backward(&cache.act, &d_out, &block.fc2, &mut grad.fc2, true).unwrap();
    for (g, u) in d_act.data.iter_mut().zip(&cache.pre_act.data) {
        *g *= gelu_grad(*u);
    }
    let d_h2 = linear_backward(&cache.h2, &d_act, &block.fc1, &mut grad.fc1, true).unwrap();
    let mut d_mid = layer_norm_backward(&d_h2, &cache.ln2, &block.norm2, &mut grad.norm2);
    for (a, b) in d_mid.data.iter_mut().zip(&d_out.data) {
        *a += b;
    }

    // Attention branch.
    let d_heads = linear_backward(&cache.heads_out, &d_mid, &block.proj, &mut grad.proj, true).unwrap();
    let mut d_qkv = Mat::zeros(n, 3 * d);
    let mut d_attn = Mat::zeros(n, n);
    for h in 0..cfg.heads {
        let a = &cache.attn[h];
        let q = Strided::new(&cache.qkv.data[h * dh..], 3 * d, 1);
        let k = Strided::new(&cache.qkv.data[d + h * dh..], 3 * d, 1);
        let v = Strided::new(&cache.qkv.data[2 * d + h * dh..], 3 * d, 1);
        let d_o = Strided::new(&d_heads.data[h * dh..], d, 1);
        let a_view = Strided::new(&a.data, n, 1);

        gemm_strided(n, dh, n, d_o, v.transposed(), 0.0, &mut d_attn.data, n);
        gemm_strided(
            n,
            n,
            dh,
            a_view.transposed(),
            d_o,
            0.0,
            &mut d_qkv.data[2 * d + h * dh..],
            3 * d,
        );
        // Softmax backward, folded with the score scale.
        for r in 0..n {
            let ar = a.row(r);
            let dr = &mut d_attn.data[r * n..(r + 1) * n];
            let dot: f64 = ar.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
            for (g, p) in dr.iter_mut().zip(ar) {
                *g = p * (*g - dot) * scale;
            }
        }
        let ds = Strided::new(&d_attn.data, n, 1);
        gemm_strided(n, n, dh, ds, k, 0.0, &mut d_qkv.data[h * dh..], 3 * d);
        gemm_strided(n, n, dh, ds.transposed(), q, 0.0, &mut d_qkv.data[d + h * dh..], 3 * d);
    }
    let d_h1 = linear_backward(&cache.h1, &d_qkv, &block.qkv, &mut grad.qkv, true).unwrap();
    let mut d_in = layer_norm_backward(&d_h1, &cache.ln1, &block.norm1, &mut grad.norm1);
    for (a, b) in d_in.data.iter_mut().zip(&d_mid.data) {
        *a += b;
    }
    d_in
}
