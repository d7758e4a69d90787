//! Optimization loops: supervised pretraining of the base model and the
//! GRPO fine-tuning loop over generated rollout groups, with AdamW, linear
//! warmup, gradient accumulation and checkpointing.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use optim::{adamw_step, lr_at, Moments, OptimState, BETA1, BETA2, EPS_ADAM};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ValId};
use crate::data::{build_train_prompt, Problem, PromptSpec};
use crate::error::{Error, Result};
use crate::grpo::{compute_advantages, grpo_loss, GrpoConfig, RolloutGroup};
use crate::lora::{init_adapters, AdapterSet, LoraConfig};
use crate::model::{
    forward_logits, generate, GenConfig, ModelParams, ParamLeaves, TokenId, Tokenizer, EOT_ID,
};
use crate::rewards::compute_reward;
use crate::seeds;

/// GRPO fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Prompts (groups) per micro-batch.
    pub micro_batch: usize,
    /// Micro-batches accumulated per optimizer step; the loss is scaled by
    /// 1/accumulation so accumulated gradients equal the large-batch
    /// gradient exactly.
    pub accumulation: usize,
    pub epochs: usize,
    /// Optimizer-step cap; 0 trains by epochs alone.
    pub max_steps: u64,
    pub seed: u64,
    pub grpo: GrpoConfig,
    pub lora: LoraConfig,
    pub prompt: PromptSpec,
    /// Rollout sampling; max_new_tokens is additionally clamped to the
    /// completion budget and remaining sequence capacity.
    pub rollout: GenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            weight_decay: 0.01,
            warmup_steps: 100,
            micro_batch: 1,
            accumulation: 4,
            epochs: 1,
            max_steps: 0,
            seed: 42,
            grpo: GrpoConfig::default(),
            lora: LoraConfig::default(),
            prompt: PromptSpec::default(),
            rollout: GenConfig {
                max_new_tokens: 150,
                ..GenConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if self.micro_batch == 0 {
            return Err(Error::config("micro_batch must be at least 1"));
        }
        if self.accumulation == 0 {
            return Err(Error::config("accumulation must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.grpo.validate()?;
        self.lora.validate()?;
        self.prompt.validate()?;
        self.rollout.validate()
    }

    /// Effective batch: groups per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation
    }
}

/// Supervised pretraining hyperparameters (the desk-scale stand-in for
/// starting from a pretrained base).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Sequences per optimizer step.
    pub batch: usize,
    pub epochs: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub prompt: PromptSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            warmup_steps: 100,
            batch: 8,
            epochs: 1,
            max_steps: 0,
            seed: 42,
            prompt: PromptSpec::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.prompt.validate()
    }
}

/// Per-step training telemetry; the metrics file keeps the five stable
/// fields (step, loss, mean_reward, format_rate, lr).
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub mean_reward: f64,
    pub format_rate: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Serialize)]
struct MetricsRecord {
    step: u64,
    loss: f64,
    mean_reward: f64,
    format_rate: f64,
    lr: f64,
}

impl StepReport {
    /// One line of the line-delimited metrics file.
    pub fn metrics_line(&self) -> String {
        serde_json::to_string(&MetricsRecord {
            step: self.step,
            loss: self.loss,
            mean_reward: self.mean_reward,
            format_rate: self.format_rate,
            lr: self.lr,
        })
        .expect("metrics record serializes")
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    idx
}

fn sample_shots(pool: &[Problem], k: usize, seed: u64) -> Result<Vec<Problem>> {
    if pool.len() < k {
        return Err(Error::config(format!(
            "few-shot pool of {} is smaller than k_shot {k}",
            pool.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), k)
        .iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Epoch-wise shuffled index lookup, cached per epoch.
struct DataOrder {
    seed: u64,
    n: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl DataOrder {
    fn new(seed: u64, n: usize) -> Self {
        DataOrder {
            seed,
            n,
            cached: None,
        }
    }

    fn index_at(&mut self, global: u64) -> usize {
        let epoch = global / self.n as u64;
        let offset = (global % self.n as u64) as usize;
        let fresh = match &self.cached {
            Some((e, _)) if *e == epoch => false,
            _ => true,
        };
        if fresh {
            let perm = permutation(self.n, seeds::derive(&[self.seed, seeds::domain::DATA_ORDER, epoch]));
            self.cached = Some((epoch, perm));
        }
        self.cached.as_ref().unwrap().1[offset]
    }
}

/// Log-probabilities of `completion` tokens under (params, adapters),
/// computed without a tape. Used for the frozen reference policy.
fn sequence_logps(
    params: &ModelParams,
    adapters: Option<&AdapterSet>,
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<Vec<f64>> {
    use crate::autograd::kernels::log_sum_exp;
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(completion);
    let input = &seq[..seq.len() - 1];
    let logits = crate::model::logits_nograd(params, adapters, input)?;
    let v = logits.cols();
    let mut out = Vec::with_capacity(completion.len());
    for (i, &tok) in completion.iter().enumerate() {
        let row_idx = prompt.len() - 1 + i;
        let row = &logits.data()[row_idx * v..(row_idx + 1) * v];
        out.push(row[tok] - log_sum_exp(row));
    }
    Ok(out)
}

/// GRPO fine-tuning state: frozen base weights, trainable adapters.
pub struct GrpoTrainer {
    pub cfg: TrainConfig,
    pub tokenizer: Tokenizer,
    pub params: ModelParams,
    pub adapters: AdapterSet,
    pub optim: OptimState,
    /// Completed optimizer steps.
    pub step: u64,
    dataset: Vec<Problem>,
    shots: Vec<Problem>,
    order: DataOrder,
}

impl GrpoTrainer {
    pub fn new(
        mut params: ModelParams,
        tokenizer: Tokenizer,
        dataset: Vec<Problem>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        params.cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        params.set_trainable(false);
        let adapters = init_adapters(
            &params.cfg,
            &cfg.lora,
            seeds::derive(&[cfg.seed, seeds::domain::INIT]),
        )?;
        let shots = sample_shots(&dataset, cfg.prompt.k_shot, cfg.prompt.shot_seed)?;
        let order = DataOrder::new(cfg.seed, dataset.len());
        Ok(GrpoTrainer {
            cfg,
            tokenizer,
            params,
            adapters,
            optim: OptimState::new(),
            step: 0,
            dataset,
            shots,
            order,
        })
    }

    /// Resumes from a "grpo" checkpoint; the dataset must be supplied again
    /// (checkpoints do not embed datasets).
    pub fn from_checkpoint(ckpt: Checkpoint, dataset: Vec<Problem>) -> Result<Self> {
        if ckpt.kind != "grpo" {
            return Err(Error::Format(format!(
                "expected a grpo checkpoint, found kind {:?}",
                ckpt.kind
            )));
        }
        if dataset.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        let tokenizer = Tokenizer::from_chars(&ckpt.vocab)?;
        let mut params = ckpt.params;
        params.set_trainable(false);
        let cfg = ckpt.train;
        let shots = sample_shots(&dataset, cfg.prompt.k_shot, cfg.prompt.shot_seed)?;
        let order = DataOrder::new(cfg.seed, dataset.len());
        Ok(GrpoTrainer {
            cfg,
            tokenizer,
            params,
            adapters: ckpt.adapters,
            optim: ckpt.optim,
            step: ckpt.step,
            dataset,
            shots,
            order,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "grpo".into(),
            model_cfg: self.params.cfg.clone(),
            vocab: self.tokenizer.vocab_chars(),
            train: self.cfg.clone(),
            pretrain: PretrainConfig::default(),
            step: self.step,
            seed: self.cfg.seed,
            params: self.params.clone(),
            adapters: self.adapters.clone(),
            optim: self.optim.clone(),
        }
    }

    /// Optimizer steps a full run comprises.
    pub fn total_steps(&self) -> u64 {
        let groups = (self.cfg.epochs * self.dataset.len()) as u64;
        let by_epochs = groups / self.cfg.effective_batch() as u64;
        if self.cfg.max_steps > 0 {
            by_epochs.min(self.cfg.max_steps)
        } else {
            by_epochs
        }
    }

    /// Generates, grades and standardizes one rollout group for the given
    /// global group index.
    fn rollout_group(&mut self, group_index: u64) -> Result<RolloutGroup> {
        let problem_idx = self.order.index_at(group_index);
        let problem = self.dataset[problem_idx].clone();
        let (prompt_text, _) =
            build_train_prompt(&problem, &self.shots, &self.cfg.prompt, &self.tokenizer)?;
        let prompt = self.tokenizer.encode(&prompt_text)?;
        let identity = |e: Error| {
            Error::data(format!(
                "problem {problem_idx} ({:?}): {e}",
                truncate_for_log(&problem.question)
            ))
        };
        let capacity = self.params.cfg.max_seq.saturating_sub(prompt.len());
        let max_new = self
            .cfg
            .rollout
            .max_new_tokens
            .min(self.cfg.prompt.max_completion_tokens)
            .min(capacity);
        if max_new == 0 {
            return Err(identity(Error::Length(format!(
                "prompt of {} tokens leaves no room to generate (max_seq {})",
                prompt.len(),
                self.params.cfg.max_seq
            ))));
        }

        let g = self.cfg.grpo.group_size;
        let mut completions = Vec::with_capacity(g);
        let mut behavior_logps = Vec::with_capacity(g);
        let mut rewards = Vec::with_capacity(g);
        for rollout in 0..g as u64 {
            let gen_cfg = GenConfig {
                max_new_tokens: max_new,
                top_k: self.cfg.rollout.top_k,
                temperature: self.cfg.rollout.temperature,
                seed: seeds::derive(&[
                    self.cfg.seed,
                    seeds::domain::ROLLOUT,
                    group_index,
                    rollout,
                ]),
            };
            let (tokens, logps) =
                generate(&self.params, Some(&self.adapters), &prompt, &gen_cfg)
                    .map_err(identity)?;
            let text = self.tokenizer.decode(&tokens).map_err(identity)?;
            let reward = compute_reward(&text, &problem.answer).map_err(identity)?;
            completions.push(tokens);
            behavior_logps.push(logps);
            rewards.push(reward);
        }
        let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
        let advantages = compute_advantages(&totals, &self.cfg.grpo)?;
        Ok(RolloutGroup {
            prompt,
            completions,
            behavior_logps,
            rewards,
            advantages,
        })
    }

    /// One full optimizer step: `accumulation` micro-batches of
    /// `micro_batch` groups each — generate G rollouts per group, grade,
    /// standardize advantages, backward grpo_loss/accumulation — then one
    /// AdamW update and gradient reset.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let groups_per_step = self.cfg.effective_batch() as u64;
        let first_group = self.step * groups_per_step;
        let inv_scale = 1.0 / groups_per_step as f64;

        let mut loss_total = 0.0;
        let mut reward_sum = 0.0;
        let mut format_hits = 0usize;
        let mut rollout_count = 0usize;

        for micro in 0..self.cfg.accumulation as u64 {
            let mut graph = Graph::new();
            let mut leaves = ParamLeaves::new();
            let mut groups = Vec::with_capacity(self.cfg.micro_batch);
            let mut group_logps: Vec<Vec<ValId>> = Vec::with_capacity(self.cfg.micro_batch);
            for j in 0..self.cfg.micro_batch as u64 {
                let group_index = first_group + micro * self.cfg.micro_batch as u64 + j;
                let group = self.rollout_group(group_index)?;
                let mut cur_ids = Vec::with_capacity(group.completions.len());
                for completion in &group.completions {
                    let mut seq = group.prompt.clone();
                    seq.extend_from_slice(completion);
                    let input = &seq[..seq.len() - 1];
                    let logits = forward_logits(
                        &mut graph,
                        &mut leaves,
                        &self.params,
                        Some(&self.adapters),
                        input,
                    )?;
                    let rows =
                        graph.slice_rows(logits, group.prompt.len() - 1, completion.len())?;
                    cur_ids.push(graph.log_softmax_gather(rows, completion)?);
                }
                groups.push(group);
                group_logps.push(cur_ids);
            }

            let mut acc: Option<ValId> = None;
            for (group, cur_ids) in groups.iter().zip(&group_logps) {
                let refs = if self.cfg.grpo.kl_coeff > 0.0 {
                    let mut lists = Vec::with_capacity(group.completions.len());
                    for completion in &group.completions {
                        // frozen reference: the base model (adapters start at
                        // the identity, so the start-of-run policy is the base)
                        lists.push(sequence_logps(&self.params, None, &group.prompt, completion)?);
                    }
                    Some(lists)
                } else {
                    None
                };
                let loss = grpo_loss(&mut graph, group, cur_ids, refs.as_deref(), &self.cfg.grpo)?;
                acc = Some(match acc {
                    Some(a) => graph.add(a, loss)?,
                    None => loss,
                });
            }
            let micro_loss = graph.scale(acc.expect("micro_batch ≥ 1"), inv_scale);
            graph.backward(micro_loss)?;
            loss_total += graph.value(micro_loss).item();

            for (name, id) in leaves.entries() {
                if let Some(grad) = graph.grad(*id) {
                    accumulate_adapter_grad(&mut self.adapters, name, grad)?;
                }
            }
            for group in &groups {
                reward_sum += group.total_rewards().iter().sum::<f64>();
                format_hits += group.rewards.iter().filter(|r| r.format > 0.0).count();
                rollout_count += group.completions.len();
            }
        }

        let grad_norm = adapter_grad_norm(&self.adapters);
        let lr = lr_at(self.optim.step + 1, self.cfg.learning_rate, self.cfg.warmup_steps);
        let mut named: Vec<(String, &mut crate::autograd::Tensor)> = self
            .adapters
            .named_mut()
            .map(|(n, t)| (n, t))
            .collect();
        adamw_step(&mut named, &mut self.optim, lr, self.cfg.weight_decay)?;
        for (_, t) in named {
            t.zero_grad();
        }
        self.step += 1;

        Ok(StepReport {
            step: self.step,
            loss: loss_total,
            mean_reward: reward_sum / rollout_count as f64,
            format_rate: format_hits as f64 / rollout_count as f64,
            lr,
            grad_norm,
        })
    }
}

fn truncate_for_log(s: &str) -> String {
    if s.len() > 60 {
        format!("{}…", &s[..60])
    } else {
        s.to_string()
    }
}

fn accumulate_adapter_grad(adapters: &mut AdapterSet, name: &str, grad: &[f64]) -> Result<()> {
    for ad in adapters.iter_mut() {
        if name == ad.name_a() {
            ad.a.accumulate_grad(grad);
            return Ok(());
        }
        if name == ad.name_b() {
            ad.b.accumulate_grad(grad);
            return Ok(());
        }
    }
    // base-model leaves are frozen and produce no gradient; anything else
    // flowing a gradient here is a bug
    Err(Error::contract(format!(
        "gradient for unknown trainable tensor {name}"
    )))
}

fn adapter_grad_norm(adapters: &AdapterSet) -> f64 {
    let mut ss = 0.0;
    for ad in adapters.iter() {
        for g in [ad.a.grad(), ad.b.grad()].into_iter().flatten() {
            for v in g {
                ss += v * v;
            }
        }
    }
    ss.sqrt()
}

/// Supervised next-token pretraining over rendered (prompt, target)
/// sequences ending in the end-of-text token.
pub struct Pretrainer {
    pub cfg: PretrainConfig,
    /// Carried into checkpoints so a later GRPO run starts from the same
    /// resolved settings.
    pub train_cfg: TrainConfig,
    pub tokenizer: Tokenizer,
    pub params: ModelParams,
    pub optim: OptimState,
    pub step: u64,
    dataset: Vec<Problem>,
    shots: Vec<Problem>,
    order: DataOrder,
}

impl Pretrainer {
    pub fn new(
        mut params: ModelParams,
        tokenizer: Tokenizer,
        dataset: Vec<Problem>,
        cfg: PretrainConfig,
        train_cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        params.cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::config("pretraining dataset is empty"));
        }
        params.set_trainable(true);
        let shots = sample_shots(&dataset, cfg.prompt.k_shot, cfg.prompt.shot_seed)?;
        let order = DataOrder::new(cfg.seed, dataset.len());
        Ok(Pretrainer {
            cfg,
            train_cfg,
            tokenizer,
            params,
            optim: OptimState::new(),
            step: 0,
            dataset,
            shots,
            order,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, dataset: Vec<Problem>) -> Result<Self> {
        if ckpt.kind != "pretrain" {
            return Err(Error::Format(format!(
                "expected a pretrain checkpoint, found kind {:?}",
                ckpt.kind
            )));
        }
        if dataset.is_empty() {
            return Err(Error::config("pretraining dataset is empty"));
        }
        let tokenizer = Tokenizer::from_chars(&ckpt.vocab)?;
        let mut params = ckpt.params;
        params.set_trainable(true);
        let cfg = ckpt.pretrain;
        let shots = sample_shots(&dataset, cfg.prompt.k_shot, cfg.prompt.shot_seed)?;
        let order = DataOrder::new(cfg.seed, dataset.len());
        Ok(Pretrainer {
            cfg,
            train_cfg: ckpt.train,
            tokenizer,
            params,
            optim: ckpt.optim,
            step: ckpt.step,
            dataset,
            shots,
            order,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "pretrain".into(),
            model_cfg: self.params.cfg.clone(),
            vocab: self.tokenizer.vocab_chars(),
            train: self.train_cfg.clone(),
            pretrain: self.cfg.clone(),
            step: self.step,
            seed: self.cfg.seed,
            params: self.params.clone(),
            adapters: AdapterSet::default(),
            optim: self.optim.clone(),
        }
    }

    pub fn total_steps(&self) -> u64 {
        let sequences = (self.cfg.epochs * self.dataset.len()) as u64;
        let by_epochs = sequences / self.cfg.batch as u64;
        if self.cfg.max_steps > 0 {
            by_epochs.min(self.cfg.max_steps)
        } else {
            by_epochs
        }
    }

    fn sequence_for(&mut self, global: u64) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
        let idx = self.order.index_at(global);
        let problem = self.dataset[idx].clone();
        let (prompt, target) =
            build_train_prompt(&problem, &self.shots, &self.cfg.prompt, &self.tokenizer)?;
        let mut seq = self.tokenizer.encode(&prompt)?;
        seq.extend(self.tokenizer.encode(&target)?);
        seq.push(EOT_ID);
        if seq.len() > self.params.cfg.max_seq {
            return Err(Error::config(format!(
                "rendered sequence of {} tokens exceeds max_seq {}; shrink the prompt budgets",
                seq.len(),
                self.params.cfg.max_seq
            )));
        }
        let input = seq[..seq.len() - 1].to_vec();
        let targets = seq[1..].to_vec();
        Ok((input, targets))
    }

    /// One optimizer step over `batch` sequences: mean next-token
    /// cross-entropy per sequence, scaled by 1/batch, gradients accumulated
    /// across per-sequence tapes, then AdamW.
    pub fn pretrain_step(&mut self) -> Result<StepReport> {
        let inv = 1.0 / self.cfg.batch as f64;
        let mut loss_total = 0.0;
        for b in 0..self.cfg.batch as u64 {
            let global = self.step * self.cfg.batch as u64 + b;
            let (input, targets) = self.sequence_for(global)?;
            let mut graph = Graph::new();
            let mut leaves = ParamLeaves::new();
            let logits = forward_logits(&mut graph, &mut leaves, &self.params, None, &input)?;
            let ce = graph.softmax_cross_entropy(logits, &targets)?;
            let scaled = graph.scale(ce, inv);
            graph.backward(scaled)?;
            loss_total += graph.value(scaled).item();
            for (name, id) in leaves.entries() {
                if let Some(grad) = graph.grad(*id) {
                    accumulate_param_grad(&mut self.params, name, grad)?;
                }
            }
        }

        let lr = lr_at(self.optim.step + 1, self.cfg.learning_rate, self.cfg.warmup_steps);
        let mut named: Vec<(String, &mut crate::autograd::Tensor)> =
            self.params.named_mut().into_iter().collect();
        adamw_step(&mut named, &mut self.optim, lr, self.cfg.weight_decay)?;
        for (_, t) in named {
            t.zero_grad();
        }
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: loss_total,
            mean_reward: 0.0,
            format_rate: 0.0,
            lr,
            grad_norm: 0.0,
        })
    }
}

fn accumulate_param_grad(params: &mut ModelParams, name: &str, grad: &[f64]) -> Result<()> {
    for (n, t) in params.named_mut() {
        if n == name {
            t.accumulate_grad(grad);
            return Ok(());
        }
    }
    Err(Error::contract(format!(
        "gradient for unknown parameter {name}"
    )))
}
