//! k-shot exact-match evaluation over any dataset in the standard record
//! format.
//!
//! Items evaluate independently under per-item seeds derived from
//! (global seed, item index), so dataset order never changes an item's
//! completion; records are assembled in item order regardless of worker
//! scheduling.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_eval_prompt, Problem, PromptSpec};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::model::{generate, GenConfig, ModelParams, TokenId, Tokenizer};
use crate::rewards::{compute_reward, extract_answer, AnswerSource};
use crate::seeds;

/// Produces a completion for one evaluation prompt. The model-backed source
/// is the production path; tests may substitute a stub.
pub trait CompletionSource: Sync {
    fn complete(&self, prompt: &[TokenId], item_seed: u64) -> Result<Vec<TokenId>>;
}

/// Samples from the (optionally adapted) model with the per-item seed.
pub struct ModelSource<'a> {
    pub params: &'a ModelParams,
    pub adapters: Option<&'a AdapterSet>,
    pub gen: GenConfig,
}

impl CompletionSource for ModelSource<'_> {
    fn complete(&self, prompt: &[TokenId], item_seed: u64) -> Result<Vec<TokenId>> {
        let cfg = GenConfig {
            seed: item_seed,
            ..self.gen.clone()
        };
        let (tokens, _) = generate(self.params, self.adapters, prompt, &cfg)?;
        Ok(tokens)
    }
}

/// Per-item evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub prompt_sha256: String,
    pub completion: String,
    pub extracted: Option<String>,
    pub extraction_source: Option<String>,
    pub ground_truth: String,
    pub correctness: f64,
    pub format: f64,
    pub total: f64,
    pub seed: u64,
    /// Generation failures (capacity) are recorded, item counted incorrect.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub format_rate: f64,
    pub n_correct_marker: usize,
    pub n_correct_fallback: usize,
    pub mean_total_reward: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub items: Vec<ItemRecord>,
}

fn evaluate_item(
    source: &dyn CompletionSource,
    tokenizer: &Tokenizer,
    item: &Problem,
    index: usize,
    prompt_text: &str,
    seed: u64,
) -> Result<ItemRecord> {
    let prompt_hash = format!("{:x}", Sha256::digest(prompt_text.as_bytes()));
    let prompt = tokenizer.encode(prompt_text)?;
    let (completion, error) = match source.complete(&prompt, seed) {
        Ok(tokens) => (tokenizer.decode(&tokens)?, None),
        Err(e @ (Error::Length(_) | Error::Contract(_))) => (String::new(), Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let reward = compute_reward(&completion, &item.answer)?;
    let extracted = extract_answer(&completion);
    Ok(ItemRecord {
        index,
        prompt_sha256: prompt_hash,
        completion,
        extracted: extracted.as_ref().map(|e| e.value.to_string()),
        extraction_source: extracted.as_ref().map(|e| {
            match e.source {
                AnswerSource::Marker => "marker",
                AnswerSource::Fallback => "fallback",
            }
            .to_string()
        }),
        ground_truth: item.answer.clone(),
        correctness: reward.correctness,
        format: reward.format,
        total: reward.total,
        seed,
        error,
    })
}

/// Evaluates every dataset item: build the k-shot prompt, sample one
/// completion under the item's derived seed, grade against the ground
/// truth. `workers` bounds thread fan-out; results are identical for any
/// worker count.
pub fn evaluate(
    source: &dyn CompletionSource,
    tokenizer: &Tokenizer,
    dataset: &[Problem],
    train_pool: &[Problem],
    spec: &PromptSpec,
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::config("evaluation dataset is empty"));
    }
    // one fixed shot set per run: the prompt builder derives it from
    // shot_seed, identical across items
    let prompts: Vec<String> = dataset
        .iter()
        .map(|item| build_eval_prompt(item, train_pool, spec, tokenizer))
        .collect::<Result<_>>()?;
    let item_seeds: Vec<u64> = (0..dataset.len())
        .map(|i| seeds::derive(&[seed, seeds::domain::EVAL_ITEM, i as u64]))
        .collect();

    let workers = workers.max(1).min(dataset.len());
    let mut items: Vec<Option<ItemRecord>> = vec![None; dataset.len()];
    if workers <= 1 {
        for (i, slot) in items.iter_mut().enumerate() {
            *slot = Some(evaluate_item(
                source,
                tokenizer,
                &dataset[i],
                i,
                &prompts[i],
                item_seeds[i],
            )?);
        }
    } else {
        let chunk = dataset.len().div_ceil(workers);
        let results: Vec<Result<Vec<(usize, ItemRecord)>>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..workers {
                let lo = w * chunk;
                let hi = ((w + 1) * chunk).min(dataset.len());
                let prompts = &prompts;
                let item_seeds = &item_seeds;
                handles.push(scope.spawn(move || {
                    let mut out = Vec::with_capacity(hi.saturating_sub(lo));
                    for i in lo..hi {
                        out.push((
                            i,
                            evaluate_item(
                                source,
                                tokenizer,
                                &dataset[i],
                                i,
                                &prompts[i],
                                item_seeds[i],
                            )?,
                        ));
                    }
                    Ok(out)
                }));
            }
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for chunk_result in results {
            for (i, record) in chunk_result? {
                items[i] = Some(record);
            }
        }
    }
    let items: Vec<ItemRecord> = items.into_iter().map(|r| r.expect("all filled")).collect();

    let n_items = items.len();
    let n_correct = items.iter().filter(|r| r.correctness == 1.0).count();
    let n_correct_marker = items
        .iter()
        .filter(|r| r.correctness == 1.0 && r.extraction_source.as_deref() == Some("marker"))
        .count();
    let n_correct_fallback = items
        .iter()
        .filter(|r| r.correctness == 1.0 && r.extraction_source.as_deref() == Some("fallback"))
        .count();
    let format_hits = items.iter().filter(|r| r.format > 0.0).count();
    let mean_total_reward = items.iter().map(|r| r.total).sum::<f64>() / n_items as f64;
    Ok(EvalReport {
        summary: EvalSummary {
            n_items,
            n_correct,
            accuracy: n_correct as f64 / n_items as f64,
            format_rate: format_hits as f64 / n_items as f64,
            n_correct_marker,
            n_correct_fallback,
            mean_total_reward,
        },
        items,
    })
}

/// Writes per-item records line-delimited plus the summary as a separate
/// JSON file.
pub fn write_report(items_path: &Path, summary_path: &Path, report: &EvalReport) -> Result<()> {
    let mut f = std::fs::File::create(items_path)?;
    for item in &report.items {
        serde_json::to_writer(&mut f, item)
            .map_err(|e| Error::data(format!("serialize item record: {e}")))?;
        f.write_all(b"\n")?;
    }
    let summary = serde_json::to_string_pretty(&report.summary)
        .map_err(|e| Error::data(format!("serialize summary: {e}")))?;
    std::fs::write(summary_path, summary + "\n")?;
    Ok(())
}
