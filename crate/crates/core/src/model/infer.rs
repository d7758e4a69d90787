//! Incremental no-gradient decoding with a per-layer KV cache.
//!
//! Every loop accumulates its contraction index in ascending order, matching
//! the taped kernels bit for bit: logits from this path equal
//! [`forward_logits`](super::forward::forward_logits) exactly.

use crate::autograd::kernels;
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraAdapter, Projection};

use super::params::ModelParams;
use super::tokenizer::TokenId;

/// Adapter pieces prepared for fast vector products: Aᵀ is laid out
/// [r × d_out] so the rank-r expansion is an ascending-index accumulation.
struct PreparedAdapter {
    a_t: Vec<f64>,
    b: Vec<f64>,
    rank: usize,
    scale: f64,
}

impl PreparedAdapter {
    fn new(ad: &LoraAdapter) -> Self {
        let (d_out, r) = (ad.a.shape()[0], ad.rank);
        PreparedAdapter {
            a_t: kernels::transpose(ad.a.data(), d_out, r),
            b: ad.b.data().to_vec(),
            rank: r,
            scale: ad.scale(),
        }
    }
}

/// Read-only decoding session over one model + adapter set.
pub struct Decoder<'a> {
    params: &'a ModelParams,
    // [layer][projection] in Query/Key/Value/Output order
    prepared: Vec<[Option<PreparedAdapter>; 4]>,
}

/// Mutable per-sequence state: cached K/V rows and the next position.
pub struct DecodeState {
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
    pos: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams, adapters: Option<&AdapterSet>) -> Self {
        let prepared = (0..params.cfg.n_layers)
            .map(|l| {
                let mut row: [Option<PreparedAdapter>; 4] = [None, None, None, None];
                if let Some(set) = adapters {
                    for (i, p) in Projection::ALL.iter().enumerate() {
                        row[i] = set.get(l, *p).map(PreparedAdapter::new);
                    }
                }
                row
            })
            .collect();
        Decoder { params, prepared }
    }

    pub fn start(&self) -> DecodeState {
        DecodeState {
            k_cache: vec![Vec::new(); self.params.cfg.n_layers],
            v_cache: vec![Vec::new(); self.params.cfg.n_layers],
            pos: 0,
        }
    }

    /// Feeds `token` at the next position and returns the logits row for it.
    pub fn step(&self, state: &mut DecodeState, token: TokenId) -> Result<Vec<f64>> {
        let cfg = &self.params.cfg;
        if state.pos >= cfg.max_seq {
            return Err(Error::Length(format!(
                "decode position {} exceeds max_seq {}",
                state.pos, cfg.max_seq
            )));
        }
        if token >= cfg.vocab_size {
            return Err(Error::Index(format!(
                "token id {token} out of range for vocab of {}",
                cfg.vocab_size
            )));
        }
        let (d, n_heads, head_dim) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

        let mut x = vec![0.0; d];
        let tok_row = &self.params.tok_emb.data()[token * d..(token + 1) * d];
        let pos_row = &self.params.pos_emb.data()[state.pos * d..(state.pos + 1) * d];
        for ((xv, &t), &p) in x.iter_mut().zip(tok_row).zip(pos_row) {
            *xv = t + p;
        }

        for (l, layer) in self.params.layers.iter().enumerate() {
            let h = rms_norm_row(&x, layer.attn_norm.data());
            let q = self.project(&h, layer.wq.data(), d, d, &self.prepared[l][0]);
            let k = self.project(&h, layer.wk.data(), d, d, &self.prepared[l][1]);
            let v = self.project(&h, layer.wv.data(), d, d, &self.prepared[l][2]);
            state.k_cache[l].extend_from_slice(&k);
            state.v_cache[l].extend_from_slice(&v);
            let t_now = state.pos + 1;

            let mut att = vec![0.0; d];
            let mut probs = vec![0.0; t_now];
            for head in 0..n_heads {
                let hs = head * head_dim;
                for (j, pr) in probs.iter_mut().enumerate() {
                    let k_row = &state.k_cache[l][j * d + hs..j * d + hs + head_dim];
                    let mut dot = 0.0;
                    for (qv, kv) in q[hs..hs + head_dim].iter().zip(k_row) {
                        dot += qv * kv;
                    }
                    *pr = dot * inv_sqrt;
                }
                kernels::softmax_row(&mut probs);
                let out = &mut att[hs..hs + head_dim];
                for (j, &p) in probs.iter().enumerate() {
                    let v_row = &state.v_cache[l][j * d + hs..j * d + hs + head_dim];
                    for (o, &vv) in out.iter_mut().zip(v_row) {
                        *o += p * vv;
                    }
                }
            }
            let o = self.project(&att, layer.wo.data(), d, d, &self.prepared[l][3]);
            for (xv, &ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }

            let h2 = rms_norm_row(&x, layer.mlp_norm.data());
            let ff = cfg.d_ff();
            let mut up = vec![0.0; ff];
            matvec_acc(&h2, layer.w_up.data(), ff, &mut up);
            for u in up.iter_mut() {
                *u /= 1.0 + (-*u).exp();
            }
            let mut down = vec![0.0; d];
            matvec_acc(&up, layer.w_down.data(), d, &mut down);
            for (xv, &dv) in x.iter_mut().zip(&down) {
                *xv += dv;
            }
        }

        let normed = rms_norm_row(&x, self.params.final_norm.data());
        let mut logits = vec![0.0; cfg.vocab_size];
        matvec_acc(&normed, self.params.lm_head.data(), cfg.vocab_size, &mut logits);
        state.pos += 1;
        Ok(logits)
    }

    /// Feeds every prompt token, returning the logits row for the last one.
    pub fn prefill(&self, state: &mut DecodeState, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::contract("prefill needs a non-empty prompt"));
        }
        let mut last = Vec::new();
        for &t in tokens {
            last = self.step(state, t)?;
        }
        Ok(last)
    }

    fn project(
        &self,
        x: &[f64],
        w: &[f64],
        d_in: usize,
        d_out: usize,
        adapter: &Option<PreparedAdapter>,
    ) -> Vec<f64> {
        let mut base = vec![0.0; d_out];
        matvec_acc(x, w, d_out, &mut base);
        let Some(ad) = adapter else { return base };
        let r = ad.rank;
        let mut xb = vec![0.0; r];
        debug_assert_eq!(ad.b.len(), d_in * r);
        matvec_acc(x, &ad.b, r, &mut xb);
        let mut low = vec![0.0; d_out];
        matvec_acc(&xb, &ad.a_t, d_out, &mut low);
        for (b, &lv) in base.iter_mut().zip(&low) {
            *b += lv * ad.scale;
        }
        base
    }
}

/// out[j] += Σ_k x[k]·w[k·d_out + j], k ascending (row-major input-major w).
fn matvec_acc(x: &[f64], w: &[f64], d_out: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), x.len() * d_out);
    for (k, &xv) in x.iter().enumerate() {
        let w_row = &w[k * d_out..(k + 1) * d_out];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o += xv * wv;
        }
    }
}

fn rms_norm_row(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(&xv, &gv)| xv * inv * gv).collect()
}
