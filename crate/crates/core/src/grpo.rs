//! Group-relative advantages and the clipped surrogate policy loss.
//!
//! Rewards standardize within each group of completions for one prompt —
//! (r − mean)/std — avoiding a learned value baseline. The loss is the
//! clipped importance-ratio surrogate with the advantage broadcast uniformly
//! across a completion's tokens (outcome reward, no per-step credit), plus
//! an optional KL penalty against a frozen reference policy.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, ValId};
use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::rewards::RewardBreakdown;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    /// Completions sampled per prompt (G).
    pub group_size: usize,
    /// Clip half-width ε of the importance ratio.
    pub clip: f64,
    /// KL penalty coefficient β; 0 disables the reference-policy term.
    pub kl_coeff: f64,
    /// Standard-deviation floor below which a group counts as zero-variance.
    pub std_floor: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 4,
            clip: 0.2,
            kl_coeff: 0.0,
            std_floor: 1e-8,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::config("group_size must be at least 1"));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config(format!(
                "clip must lie in (0, 1), got {}",
                self.clip
            )));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(Error::config("kl_coeff must be nonnegative"));
        }
        Ok(())
    }
}

/// One prompt with its G sampled completions, generation-time ("behavior")
/// log-probabilities, graded rewards and standardized advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt: Vec<TokenId>,
    pub completions: Vec<Vec<TokenId>>,
    pub behavior_logps: Vec<Vec<f64>>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn total_rewards(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total).collect()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        self.total_rewards().iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// Aᵢ = (rᵢ − mean)/std_pop; a group whose population std falls below the
/// floor (all rewards equal, G = 1) standardizes to all zeros.
pub fn compute_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::contract("compute_advantages needs at least one reward"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < cfg.std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-token KL estimate exp(Δ) − Δ − 1 with Δ = logπ_ref − logπ_current;
/// nonnegative, zero iff the distributions assign the token equal
/// probability.
pub fn kl_estimate(ref_logp: f64, cur_logp: f64) -> f64 {
    let d = ref_logp - cur_logp;
    d.exp() - d - 1.0
}

/// Builds the GRPO loss on `g`:
///
///   −(1/G) Σᵢ (1/|oᵢ|) Σₜ min(ρᵢₜ·Aᵢ, clip(ρᵢₜ, 1−ε, 1+ε)·Aᵢ) + β·KL
///
/// with ρᵢₜ = exp(logπ_current − logπ_behavior). `current_logps` holds one
/// differentiable per-token log-probability tensor per completion (from
/// `log_softmax_gather`); behavior and reference log-probabilities enter as
/// constants, so the loss differentiates through logπ_current only.
pub fn grpo_loss(
    g: &mut Graph,
    group: &RolloutGroup,
    current_logps: &[ValId],
    ref_logps: Option<&[Vec<f64>]>,
    cfg: &GrpoConfig,
) -> Result<ValId> {
    cfg.validate()?;
    let n = group.completions.len();
    if n == 0 {
        return Err(Error::contract("grpo_loss needs at least one completion"));
    }
    if group.advantages.len() != n || group.behavior_logps.len() != n {
        return Err(Error::contract(format!(
            "group holds {n} completions but {} advantages and {} behavior log-prob lists",
            group.advantages.len(),
            group.behavior_logps.len()
        )));
    }
    if current_logps.len() != n {
        return Err(Error::contract(format!(
            "expected {n} current log-prob tensors, got {}",
            current_logps.len()
        )));
    }
    if let Some(refs) = ref_logps {
        if refs.len() != n {
            return Err(Error::contract(format!(
                "expected {n} reference log-prob lists, got {}",
                refs.len()
            )));
        }
    }

    let mut surr_sum: Option<ValId> = None;
    let mut kl_sum: Option<ValId> = None;
    for i in 0..n {
        let tokens = group.completions[i].len();
        let behavior = &group.behavior_logps[i];
        let cur = current_logps[i];
        if behavior.len() != tokens || g.value(cur).numel() != tokens || tokens == 0 {
            return Err(Error::contract(format!(
                "completion {i}: {tokens} tokens vs {} behavior log-probs vs {} current log-probs",
                behavior.len(),
                g.value(cur).numel()
            )));
        }

        let neg_behavior = g.constant(Tensor::from_vec(behavior.iter().map(|b| -b).collect()));
        let log_ratio = g.add(cur, neg_behavior)?;
        let ratio = g.exp(log_ratio);
        let advantage = group.advantages[i];
        let unclipped = g.scale(ratio, advantage);
        let clipped_ratio = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let clipped = g.scale(clipped_ratio, advantage);
        let surr_tokens = g.min_elem(unclipped, clipped)?;
        let surr = g.mean(surr_tokens);
        surr_sum = Some(match surr_sum {
            Some(acc) => g.add(acc, surr)?,
            None => surr,
        });

        if cfg.kl_coeff > 0.0 {
            let refs = ref_logps.ok_or_else(|| {
                Error::contract("kl_coeff > 0 requires reference log-probabilities")
            })?;
            if refs[i].len() != tokens {
                return Err(Error::contract(format!(
                    "completion {i}: {tokens} tokens vs {} reference log-probs",
                    refs[i].len()
                )));
            }
            let ref_const = g.constant(Tensor::from_vec(refs[i].clone()));
            let neg_cur = g.scale(cur, -1.0);
            let delta = g.add(ref_const, neg_cur)?;
            let e = g.exp(delta);
            let neg_delta = g.scale(delta, -1.0);
            let e_minus_delta = g.add(e, neg_delta)?;
            let minus_one = g.constant(Tensor::from_vec(vec![-1.0; tokens]));
            let kl_tokens = g.add(e_minus_delta, minus_one)?;
            let kl = g.mean(kl_tokens);
            kl_sum = Some(match kl_sum {
                Some(acc) => g.add(acc, kl)?,
                None => kl,
            });
        }
    }

    let scale = -1.0 / cfg.group_size as f64;
    let mut loss = g.scale(surr_sum.expect("n ≥ 1"), scale);
    if let Some(kl) = kl_sum {
        let kl_term = g.scale(kl, cfg.kl_coeff / cfg.group_size as f64);
        loss = g.add(loss, kl_term)?;
    }
    Ok(loss)
}
