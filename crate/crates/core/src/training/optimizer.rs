use crate::model::checkpoint::Moments;
use crate::model::ModelParams;

const ADAM_EPS: f64 = 1e-8;

/// Whether decoupled weight decay applies: matrices only, never biases,
/// norms, the mask token or positional embeddings.
fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name != "pos_embed"
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub moments: Moments,
    /// Updates applied so far.
    pub steps: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            weight_decay,
            moments: Moments {
                first: params.zeros_like(),
                second: params.zeros_like(),
            },
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, wd) = (self.beta1, self.beta2, self.weight_decay);
        let Moments { first, second } = &mut self.moments;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(first.tensors_mut())
            .zip(second.tensors_mut());
        for (((p, g), m), v) in tensors {
            let decay = if decays(&p.name, &p.shape) { 1.0 - lr * wd } else { 1.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] = p.data[i] * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: (4, 4),
            patch_size: 2,
            in_channels: 1,
            embed_dim: 4,
            depth: 1,
            heads: 1,
            mlp_ratio: 1,
            out_channels: 1,
        }
    }

    #[test]
    fn first_step_moves_each_weight_by_lr_against_the_gradient_sign() {
        let params = init_params(&cfg(), 0, None).unwrap();
        let mut grads = params.zeros_like();
        grads.decoder.bias[0] = 3.0;
        grads.decoder.bias[1] = -0.5;
        let mut p = params.clone();
        let mut opt = AdamW::new(&p, 0.9, 0.999, 0.0);
        opt.step(&mut p, &grads, 0.01);
        assert!((p.decoder.bias[0] - (params.decoder.bias[0] - 0.01)).abs() < 1e-9);
        assert!((p.decoder.bias[1] - (params.decoder.bias[1] + 0.01)).abs() < 1e-9);
        assert_eq!(p.decoder.bias[2], params.decoder.bias[2]);
    }

    #[test]
    fn weight_decay_shrinks_matrices_only() {
        let mut p = init_params(&cfg(), 0, None).unwrap();
        p.decoder.bias.fill(1.0);
        let before = p.clone();
        let grads = p.zeros_like();
        let mut opt = AdamW::new(&p, 0.9, 0.999, 0.5);
        opt.step(&mut p, &grads, 0.1);
        assert_eq!(p.decoder.bias, before.decoder.bias);
        assert_eq!(p.pos_embed, before.pos_embed);
        assert!((p.decoder.weight.data[0] - 0.95 * before.decoder.weight.data[0]).abs() < 1e-15);
    }
}
