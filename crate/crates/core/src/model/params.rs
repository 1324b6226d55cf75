use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::seeds::{self, Stream};
use crate::tensor::Mat;

const INIT_STD: f64 = 0.02;

/// `y = x · weight + bias`, with `weight` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Mat::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn identity(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub patch_embed: Linear,
    /// One learned vector per patch position.
    pub pos_embed: Mat,
    pub mask_token: Vec<f64>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub decoder: Linear,
}

/// A named view of one parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl ModelParams {
    /// Every parameter zeroed except layer-norm scales; also the shape used
    /// for gradient accumulators (see [`ModelParams::zeros_like`]).
    fn skeleton(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let block = Block {
            norm1: LayerNorm::identity(d),
            qkv: Linear::zeros(d, 3 * d),
            proj: Linear::zeros(d, d),
            norm2: LayerNorm::identity(d),
            fc1: Linear::zeros(d, hidden),
            fc2: Linear::zeros(hidden, d),
        };
        ModelParams {
            config: config.clone(),
            patch_embed: Linear::zeros(config.patch_dim(), d),
            pos_embed: Mat::zeros(config.num_patches(), d),
            mask_token: vec![0.0; d],
            blocks: vec![block; config.depth],
            norm: LayerNorm::identity(d),
            decoder: Linear::zeros(d, config.output_patch_dim()),
        }
    }

    /// Seeded random initialization.
    ///
    /// Linear weights, positional embeddings and the mask token are drawn from
    /// a normal with std 0.02 truncated at two standard deviations; biases
    /// start at zero and layer norms at identity.
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut params = Self::skeleton(config);
        let mut rng = seeds::rng(seed, Stream::Init, 0, 0);
        for t in params.tensors_mut() {
            if t.name.ends_with(".bias") || t.name.contains("norm") {
                continue;
            }
            for v in t.data.iter_mut() {
                *v = trunc_normal(&mut rng);
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::skeleton(&self.config);
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Parameter tensors in a fixed order under stable dotted names.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out: Vec<TensorRef<'_>> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data| out.push(TensorRef { name, shape, data });
        linear_refs("patch_embed", &self.patch_embed, &mut push);
        push("pos_embed".into(), vec![self.pos_embed.rows, self.pos_embed.cols], &self.pos_embed.data);
        push("mask_token".into(), vec![self.mask_token.len()], &self.mask_token);
        for (i, b) in self.blocks.iter().enumerate() {
            norm_refs(&format!("blocks.{i}.norm1"), &b.norm1, &mut push);
            linear_refs(&format!("blocks.{i}.attn.qkv"), &b.qkv, &mut push);
            linear_refs(&format!("blocks.{i}.attn.proj"), &b.proj, &mut push);
            norm_refs(&format!("blocks.{i}.norm2"), &b.norm2, &mut push);
            linear_refs(&format!("blocks.{i}.mlp.fc1"), &b.fc1, &mut push);
            linear_refs(&format!("blocks.{i}.mlp.fc2"), &b.fc2, &mut push);
        }
        norm_refs("norm", &self.norm, &mut push);
        linear_refs("decoder", &self.decoder, &mut push);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let ModelParams {
            patch_embed,
            pos_embed,
            mask_token,
            blocks,
            norm,
            decoder,
            ..
        } = self;
        linear_muts("patch_embed", patch_embed, &mut out);
        out.push(TensorMut {
            name: "pos_embed".into(),
            shape: vec![pos_embed.rows, pos_embed.cols],
            data: &mut pos_embed.data,
        });
        out.push(TensorMut {
            name: "mask_token".into(),
            shape: vec![mask_token.len()],
            data: mask_token,
        });
        for (i, b) in blocks.iter_mut().enumerate() {
            norm_muts(&format!("blocks.{i}.norm1"), &mut b.norm1, &mut out);
            linear_muts(&format!("blocks.{i}.attn.qkv"), &mut b.qkv, &mut out);
            linear_muts(&format!("blocks.{i}.attn.proj"), &mut b.proj, &mut out);
            norm_muts(&format!("blocks.{i}.norm2"), &mut b.norm2, &mut out);
            linear_muts(&format!("blocks.{i}.mlp.fc1"), &mut b.fc1, &mut out);
            linear_muts(&format!("blocks.{i}.mlp.fc2"), &mut b.fc2, &mut out);
        }
        norm_muts("norm", norm, &mut out);
        linear_muts("decoder", decoder, &mut out);
        out
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn trunc_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * INIT_STD;
        }
    }
}

fn linear_refs<'a>(prefix: &str, l: &'a Linear, push: &mut impl FnMut(String, Vec<usize>, &'a [f64])) {
    push(format!("{prefix}.weight"), vec![l.weight.rows, l.weight.cols], &l.weight.data);
    push(format!("{prefix}.bias"), vec![l.bias.len()], &l.bias);
}

fn norm_refs<'a>(prefix: &str, n: &'a LayerNorm, push: &mut impl FnMut(String, Vec<usize>, &'a [f64])) {
    push(format!("{prefix}.weight"), vec![n.gamma.len()], &n.gamma);
    push(format!("{prefix}.bias"), vec![n.beta.len()], &n.beta);
}

fn linear_muts<'a>(prefix: &str, l: &'a mut Linear, out: &mut Vec<TensorMut<'a>>) {
    out.push(TensorMut {
        name: format!("{prefix}.weight"),
        shape: vec![l.weight.rows, l.weight.cols],
        data: &mut l.weight.data,
    });
    out.push(TensorMut {
        name: format!("{prefix}.bias"),
        shape: vec![l.bias.len()],
        data: &mut l.bias,
    });
}

fn norm_muts<'a>(prefix: &str, n: &'a mut LayerNorm, out: &mut Vec<TensorMut<'a>>) {
    out.push(TensorMut {
        name: format!("{prefix}.weight"),
        shape: vec![n.gamma.len()],
        data: &mut n.gamma,
    });
    out.push(TensorMut {
        name: format!("{prefix}.bias"),
        shape: vec![n.beta.len()],
        data: &mut n.beta,
    });
}
