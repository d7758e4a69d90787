//! Model weights.
//!
//! Projection matrices are stored input-major ([d_in × d_out]) so the
//! forward pass is a plain `x · W` product; LoRA A/B matrices keep their
//! [d_out × r] / [d_in × r] shapes and attach at the four attention
//! projections.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Tensor;
use crate::error::Result;

use super::config::ModelConfig;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl ModelParams {
    /// Fresh weights: Normal(0, 0.02) matrices, unit normalization gains.
    pub fn new_random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid stddev");
        let mut randn = |rows: usize, cols: usize| -> Result<Tensor> {
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Ok(Tensor::matrix(rows, cols, data)?.with_requires_grad(true))
        };
        let (d, v, ff) = (cfg.d_model, cfg.vocab_size, cfg.d_ff());
        let tok_emb = randn(v, d)?;
        let pos_emb = randn(cfg.max_seq, d)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                attn_norm: gain(d),
                wq: randn(d, d)?,
                wk: randn(d, d)?,
                wv: randn(d, d)?,
                wo: randn(d, d)?,
                mlp_norm: gain(d),
                w_up: randn(d, ff)?,
                w_down: randn(ff, d)?,
            });
        }
        let final_norm = gain(d);
        let lm_head = randn(d, v)?;
        Ok(ModelParams {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Named tensors in canonical (checkpoint) order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layer{l}.wq"), &layer.wq));
            out.push((format!("layer{l}.wk"), &layer.wk));
            out.push((format!("layer{l}.wv"), &layer.wv));
            out.push((format!("layer{l}.wo"), &layer.wo));
            out.push((format!("layer{l}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layer{l}.w_up"), &layer.w_up));
            out.push((format!("layer{l}.w_down"), &layer.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.attn_norm"), &mut layer.attn_norm));
            out.push((format!("layer{l}.wq"), &mut layer.wq));
            out.push((format!("layer{l}.wk"), &mut layer.wk));
            out.push((format!("layer{l}.wv"), &mut layer.wv));
            out.push((format!("layer{l}.wo"), &mut layer.wo));
            out.push((format!("layer{l}.mlp_norm"), &mut layer.mlp_norm));
            out.push((format!("layer{l}.w_up"), &mut layer.w_up));
            out.push((format!("layer{l}.w_down"), &mut layer.w_down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    /// Flip `requires_grad` on every base tensor: true for supervised
    /// pretraining, false when only adapters train.
    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_mut() {
            let cur = std::mem::replace(t, Tensor::scalar(0.0));
            *t = cur.with_requires_grad(trainable);
        }
    }

    pub fn param_count(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.numel() as u64).sum()
    }
}

fn gain(d: usize) -> Tensor {
    Tensor::from_vec(vec![1.0; d]).with_requires_grad(true)
}
