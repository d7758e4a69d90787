//! Taped forward pass: causal self-attention decoder producing logits.

use crate::autograd::{Graph, Tensor, ValId};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraAdapter, Projection};

use super::params::{LayerParams, ModelParams};
use super::tokenizer::TokenId;

/// Name → tape-leaf binding, filled lazily so several forward passes on one
/// graph share parameter leaves (their gradients accumulate on the same
/// buffers).
#[derive(Default)]
pub struct ParamLeaves {
    entries: Vec<(String, ValId)>,
}

impl ParamLeaves {
    pub fn new() -> Self {
        ParamLeaves::default()
    }

    fn get_or_insert(&mut self, g: &mut Graph, name: &str, t: &Tensor) -> ValId {
        if let Some((_, id)) = self.entries.iter().find(|(n, _)| n == name) {
            return *id;
        }
        let id = g.leaf(t);
        self.entries.push((name.to_string(), id));
        id
    }

    /// Pre-binds `name` to an existing tape value; a later forward pass will
    /// use it instead of leafing the parameter tensor.
    pub fn bind(&mut self, name: &str, id: ValId) {
        self.entries.push((name.to_string(), id));
    }

    /// All bound (name, leaf) pairs in first-use order.
    pub fn entries(&self) -> &[(String, ValId)] {
        &self.entries
    }
}

/// x·W plus, when an adapter targets this projection, the low-rank update
/// s·(x·B)·Aᵀ — the rank-r path is never materialized as a d×d matrix.
fn projection(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    x: ValId,
    w_name: &str,
    w: &Tensor,
    adapter: Option<&LoraAdapter>,
) -> Result<ValId> {
    let w_id = leaves.get_or_insert(g, w_name, w);
    let base = g.matmul(x, w_id)?;
    let Some(ad) = adapter else {
        return Ok(base);
    };
    let a_id = leaves.get_or_insert(g, &ad.name_a(), &ad.a);
    let b_id = leaves.get_or_insert(g, &ad.name_b(), &ad.b);
    let xb = g.matmul(x, b_id)?;
    let low = g.matmul_bt(xb, a_id)?;
    let scaled = g.scale(low, ad.scale());
    g.add(base, scaled)
}

fn attention_block(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    x: ValId,
    layer_idx: usize,
    layer: &LayerParams,
    adapters: Option<&AdapterSet>,
    n_heads: usize,
    head_dim: usize,
) -> Result<ValId> {
    let get = |p: Projection| adapters.and_then(|s| s.get(layer_idx, p));
    let prefix = format!("layer{layer_idx}");
    let norm_id = leaves.get_or_insert(g, &format!("{prefix}.attn_norm"), &layer.attn_norm);
    let h = g.rms_norm(x, norm_id)?;
    let q = projection(g, leaves, h, &format!("{prefix}.wq"), &layer.wq, get(Projection::Query))?;
    let k = projection(g, leaves, h, &format!("{prefix}.wk"), &layer.wk, get(Projection::Key))?;
    let v = projection(g, leaves, h, &format!("{prefix}.wv"), &layer.wv, get(Projection::Value))?;

    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let start = head * head_dim;
        let qh = g.slice_cols(q, start, head_dim)?;
        let kh = g.slice_cols(k, start, head_dim)?;
        let vh = g.slice_cols(v, start, head_dim)?;
        let scores = g.matmul_bt(qh, kh)?;
        let scaled = g.scale(scores, inv_sqrt);
        let probs = g.softmax(scaled, true)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let att = g.concat_cols(&heads)?;
    projection(g, leaves, att, &format!("{prefix}.wo"), &layer.wo, get(Projection::Output))
}

fn mlp_block(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    x: ValId,
    layer_idx: usize,
    layer: &LayerParams,
) -> Result<ValId> {
    let prefix = format!("layer{layer_idx}");
    let norm_id = leaves.get_or_insert(g, &format!("{prefix}.mlp_norm"), &layer.mlp_norm);
    let h = g.rms_norm(x, norm_id)?;
    let up_id = leaves.get_or_insert(g, &format!("{prefix}.w_up"), &layer.w_up);
    let up = g.matmul(h, up_id)?;
    let act = g.silu(up);
    let down_id = leaves.get_or_insert(g, &format!("{prefix}.w_down"), &layer.w_down);
    g.matmul(act, down_id)
}

/// Records the full decoder forward on `g`, returning logits [len × vocab].
/// Position t depends only on tokens at positions ≤ t.
pub fn forward_logits(
    g: &mut Graph,
    leaves: &mut ParamLeaves,
    params: &ModelParams,
    adapters: Option<&AdapterSet>,
    tokens: &[TokenId],
) -> Result<ValId> {
    if tokens.is_empty() {
        return Err(Error::contract("forward_logits needs at least one token"));
    }
    if tokens.len() > params.cfg.max_seq {
        return Err(Error::Length(format!(
            "sequence of {} tokens exceeds max_seq {}",
            tokens.len(),
            params.cfg.max_seq
        )));
    }
    let tok_id = leaves.get_or_insert(g, "tok_emb", &params.tok_emb);
    let pos_id = leaves.get_or_insert(g, "pos_emb", &params.pos_emb);
    let tok_rows = g.embedding(tok_id, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos_rows = g.embedding(pos_id, &positions)?;
    let mut x = g.add(tok_rows, pos_rows)?;

    let n_heads = params.cfg.n_heads;
    let head_dim = params.cfg.head_dim();
    for (l, layer) in params.layers.iter().enumerate() {
        let att = attention_block(g, leaves, x, l, layer, adapters, n_heads, head_dim)?;
        x = g.add(x, att)?;
        let mlp = mlp_block(g, leaves, x, l, layer)?;
        x = g.add(x, mlp)?;
    }
    let fin_id = leaves.get_or_insert(g, "final_norm", &params.final_norm);
    let normed = g.rms_norm(x, fin_id)?;
    let head_id = leaves.get_or_insert(g, "lm_head", &params.lm_head);
    g.matmul(normed, head_id)
}

/// Convenience no-tape evaluation: runs `forward_logits` on a scratch graph
/// and clones out the logits tensor.
pub fn logits_nograd(
    params: &ModelParams,
    adapters: Option<&AdapterSet>,
    tokens: &[TokenId],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut leaves = ParamLeaves::new();
    let out = forward_logits(&mut g, &mut leaves, params, adapters, tokens)?;
    Ok(g.value(out).clone())
}
