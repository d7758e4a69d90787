//! Seeded top-k / temperature sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::kernels;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;

use super::infer::Decoder;
use super::params::ModelParams;
use super::tokenizer::{TokenId, EOT_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub max_new_tokens: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_new_tokens: 512,
            top_k: 50,
            temperature: 0.7,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::config(format!(
                "temperature must be nonnegative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Picks the next token from a logits row.
///
/// Temperature 0 is argmax (no division); otherwise logits are divided by
/// the temperature, the top_k highest kept (k clipped to the vocabulary),
/// renormalized, and sampled with `rng`. Ties order by (logit desc, index
/// asc), so results are reproducible.
fn sample_token(logits: &[f64], cfg: &GenConfig, rng: &mut ChaCha12Rng) -> TokenId {
    if cfg.temperature == 0.0 {
        return argmax(logits);
    }
    let k = cfg.top_k.min(logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top = &order[..k];
    let mut probs: Vec<f64> = top.iter().map(|&i| logits[i] / cfg.temperature).collect();
    kernels::softmax_row(&mut probs);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (slot, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return top[slot];
        }
    }
    top[k - 1]
}

fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive sampling from the adapted model.
///
/// Stops after sampling the end-of-text token (which is included in the
/// returned completion) or after `max_new_tokens`. The returned per-token
/// log-probabilities are of the sampled tokens under the full pre-truncation
/// softmax of the raw logits — not the renormalized top-k/temperature
/// distribution — because the policy objective needs log π(token).
pub fn generate(
    params: &ModelParams,
    adapters: Option<&AdapterSet>,
    prompt: &[TokenId],
    cfg: &GenConfig,
) -> Result<(Vec<TokenId>, Vec<f64>)> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::contract("generate needs a non-empty prompt"));
    }
    if prompt.len() + cfg.max_new_tokens > params.cfg.max_seq {
        return Err(Error::Length(format!(
            "prompt of {} tokens plus {} new tokens exceeds max_seq {}",
            prompt.len(),
            cfg.max_new_tokens,
            params.cfg.max_seq
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let decoder = Decoder::new(params, adapters);
    let mut state = decoder.start();
    let mut logits = decoder.prefill(&mut state, prompt)?;

    let mut tokens = Vec::new();
    let mut logps = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let token = sample_token(&logits, cfg, &mut rng);
        let lse = kernels::log_sum_exp(&logits);
        tokens.push(token);
        logps.push(logits[token] - lse);
        if token == EOT_ID {
            break;
        }
        logits = decoder.step(&mut state, token)?;
    }
    Ok((tokens, logps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_one_is_greedy() {
        let logits = vec![0.1, 2.0, -1.0, 1.9];
        let cfg = GenConfig {
            top_k: 1,
            temperature: 0.7,
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(sample_token(&logits, &cfg, &mut rng), 1);
        }
    }

    #[test]
    fn temperature_zero_is_argmax() {
        let logits = vec![0.5, 0.2, 3.0];
        let cfg = GenConfig {
            temperature: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        assert_eq!(sample_token(&logits, &cfg, &mut rng), 2);
    }

    #[test]
    fn two_logit_frequencies_match_hand_softmax() {
        // logits [0.6931, 0] at temperature 1, top_k 2 ⇒ p₀ ≈ 2/3;
        // 10,000 draws must land within 3σ of 2/3.
        let logits = vec![0.6931, 0.0];
        let cfg = GenConfig {
            top_k: 2,
            temperature: 1.0,
            ..Default::default()
        };
        let n = 10_000;
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut zero_count = 0;
        for _ in 0..n {
            if sample_token(&logits, &cfg, &mut rng) == 0 {
                zero_count += 1;
            }
        }
        let p = 2.0 / 3.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let freq = zero_count as f64 / n as f64;
        assert!(
            (freq - p).abs() < 3.0 * sigma,
            "freq {freq} vs {p} (3σ = {:.4})",
            3.0 * sigma
        );
    }

    #[test]
    fn top_k_is_clipped_to_vocab() {
        let logits = vec![0.0, 1.0];
        let cfg = GenConfig {
            top_k: 50,
            temperature: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let t = sample_token(&logits, &cfg, &mut rng);
        assert!(t < 2);
    }
}
