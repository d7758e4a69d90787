//! Subcommand implementations.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use picogrpo::data::{gen_synthetic, load_dataset, save_dataset, Problem};
use picogrpo::error::{Error, Result};
use picogrpo::evalharness::{evaluate, write_report, ModelSource};
use picogrpo::gradcheck;
use picogrpo::lora::count_trainable;
use picogrpo::membudget::estimate_budget;
use picogrpo::model::{ModelConfig, ModelParams, Tokenizer};
use picogrpo::rewards::compute_reward;
use picogrpo::seeds;
use picogrpo::trainer::{
    load_checkpoint, save_checkpoint, Checkpoint, GrpoTrainer, Pretrainer,
};

use crate::config::RunConfig;

/// Maps error kinds onto the stable exit-code contract:
/// 0 success, 1 config, 2 data, 3 runtime/numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Format(_) => 2,
        _ => 3,
    }
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::write(out.join("resolved.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn require_path(field: &Option<String>, name: &str) -> Result<PathBuf> {
    field
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| Error::config(format!("data.{name} must be set for this command")))
}

pub fn run_gen_data(out: &Path, name: &str, n: usize, difficulty: u8, seed: u64) -> Result<()> {
    ensure_out_dir(out)?;
    let problems = gen_synthetic(seed, n, difficulty)?;
    let path = out.join(name);
    save_dataset(&path, &problems)?;
    println!("wrote {} problems to {}", problems.len(), path.display());
    Ok(())
}

struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            file: std::fs::File::create(path)?,
        })
    }

    fn append(&mut self, line: &str) -> Result<()> {
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        Ok(())
    }
}

pub fn run_pretrain(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    save_every: Option<u64>,
) -> Result<()> {
    let train_path = require_path(&cfg.data.train_path, "train_path")?;
    let dataset = load_dataset(&train_path)?;
    ensure_out_dir(out)?;
    write_resolved(cfg, out)?;

    let mut trainer = match resume {
        Some(path) => Pretrainer::from_checkpoint(load_checkpoint(path)?, dataset)?,
        None => {
            let params = ModelParams::new_random(
                &cfg.model,
                seeds::derive(&[cfg.pretrain.seed, seeds::domain::INIT]),
            )?;
            Pretrainer::new(
                params,
                Tokenizer::default(),
                dataset,
                cfg.pretrain.clone(),
                cfg.train.clone(),
            )?
        }
    };

    let total = trainer.total_steps();
    let mut metrics = MetricsWriter::create(&out.join("pretrain_metrics.jsonl"))?;
    while trainer.step < total {
        let report = trainer.pretrain_step()?;
        metrics.append(&report.metrics_line())?;
        println!(
            "pretrain step {}/{total} loss {:.4} lr {:.2e}",
            report.step, report.loss, report.lr
        );
        if let Some(every) = save_every {
            if every > 0 && report.step % every == 0 && report.step < total {
                save_checkpoint(&out.join(format!("pretrain_step{}.pgrp", report.step)), &trainer.to_checkpoint())?;
            }
        }
    }
    save_checkpoint(&out.join("pretrain.pgrp"), &trainer.to_checkpoint())?;
    println!("saved {}", out.join("pretrain.pgrp").display());
    Ok(())
}

fn base_params_for_train(cfg: &RunConfig, init_from: Option<&Path>) -> Result<(ModelParams, Tokenizer)> {
    match init_from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model_cfg != cfg.model {
                return Err(Error::config(format!(
                    "model config {:?} does not match checkpoint {:?}",
                    cfg.model, ckpt.model_cfg
                )));
            }
            let tokenizer = Tokenizer::from_chars(&ckpt.vocab)?;
            Ok((ckpt.params, tokenizer))
        }
        None => {
            let params = ModelParams::new_random(
                &cfg.model,
                seeds::derive(&[cfg.train.seed, seeds::domain::INIT, 1]),
            )?;
            Ok((params, Tokenizer::default()))
        }
    }
}

pub fn run_train(
    cfg: &RunConfig,
    out: &Path,
    init_from: Option<&Path>,
    resume: Option<&Path>,
    save_every: Option<u64>,
) -> Result<()> {
    let train_path = require_path(&cfg.data.train_path, "train_path")?;
    let dataset = load_dataset(&train_path)?;
    ensure_out_dir(out)?;
    write_resolved(cfg, out)?;

    let mut trainer = match resume {
        Some(path) => GrpoTrainer::from_checkpoint(load_checkpoint(path)?, dataset)?,
        None => {
            let (params, tokenizer) = base_params_for_train(cfg, init_from)?;
            GrpoTrainer::new(params, tokenizer, dataset, cfg.train.clone())?
        }
    };

    let total = trainer.total_steps();
    let mut metrics = MetricsWriter::create(&out.join("metrics.jsonl"))?;
    while trainer.step < total {
        let report = trainer.train_step()?;
        metrics.append(&report.metrics_line())?;
        println!(
            "step {}/{total} loss {:+.5} mean_reward {:.3} format_rate {:.2} lr {:.2e} grad_norm {:.3e}",
            report.step, report.loss, report.mean_reward, report.format_rate, report.lr, report.grad_norm
        );
        if let Some(every) = save_every {
            if every > 0 && report.step % every == 0 && report.step < total {
                save_checkpoint(&out.join(format!("step{}.pgrp", report.step)), &trainer.to_checkpoint())?;
            }
        }
    }
    save_checkpoint(&out.join("model.pgrp"), &trainer.to_checkpoint())?;
    println!("saved {}", out.join("model.pgrp").display());
    Ok(())
}

fn adapters_opt(ckpt: &Checkpoint) -> Option<&picogrpo::lora::AdapterSet> {
    if ckpt.adapters.is_empty() {
        None
    } else {
        Some(&ckpt.adapters)
    }
}

pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let eval_path = require_path(&cfg.data.eval_path, "eval_path")?;
    let dataset = load_dataset(&eval_path)?;
    let pool = match (&cfg.data.pool_path, &cfg.data.train_path) {
        (Some(p), _) => load_dataset(Path::new(p))?,
        (None, Some(p)) => load_dataset(Path::new(p))?,
        (None, None) => Vec::new(),
    };
    let ckpt = load_checkpoint(checkpoint)?;
    let tokenizer = Tokenizer::from_chars(&ckpt.vocab)?;
    ensure_out_dir(out)?;
    write_resolved(cfg, out)?;

    let source = ModelSource {
        params: &ckpt.params,
        adapters: adapters_opt(&ckpt),
        gen: cfg.gen.clone(),
    };
    let report = evaluate(
        &source,
        &tokenizer,
        &dataset,
        &pool,
        &cfg.eval.prompt,
        cfg.eval.seed,
        cfg.eval.workers,
    )?;
    write_report(
        &out.join("eval_items.jsonl"),
        &out.join("eval_summary.json"),
        &report,
    )?;
    let s = &report.summary;
    println!(
        "eval: {}/{} correct (accuracy {:.4}), format_rate {:.4}, mean_reward {:.4}",
        s.n_correct, s.n_items, s.accuracy, s.format_rate, s.mean_total_reward
    );
    Ok(())
}

#[derive(Deserialize)]
struct GradeInput {
    completion: String,
    ground_truth: String,
}

#[derive(Serialize)]
struct GradeOutput {
    completion: String,
    ground_truth: String,
    correctness: f64,
    format: f64,
    total: f64,
}

pub fn run_grade(input: &Path, output: &Path) -> Result<()> {
    let file = std::fs::File::open(input)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", input.display())))?;
    let reader = BufReader::new(file);
    let mut out = std::fs::File::create(output)?;
    let mut count = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GradeInput = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        let reward = compute_reward(&record.completion, &record.ground_truth)
            .map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        let graded = GradeOutput {
            completion: record.completion,
            ground_truth: record.ground_truth,
            correctness: reward.correctness,
            format: reward.format,
            total: reward.total,
        };
        serde_json::to_writer(&mut out, &graded)
            .map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        out.write_all(b"\n")?;
        count += 1;
    }
    println!("graded {count} records into {}", output.display());
    Ok(())
}

pub fn run_budget(cfg: &RunConfig, json_out: Option<&Path>) -> Result<()> {
    let report = estimate_budget(&cfg.budget)?;
    print!("{}", report.render_table());
    println!(
        "total: {:.3} GB ({:.3} GiB) against a budget of {:.3} GB",
        report.total_gb(),
        report.total_gib(),
        report.budget_bytes as f64 / 1e9
    );

    // trainable-parameter accounting for the configured adapter set
    let model = ModelConfig {
        n_layers: cfg.budget.n_layers as usize,
        d_model: cfg.budget.d_model as usize,
        n_heads: cfg.budget.n_heads.max(1) as usize,
        vocab_size: 1,
        max_seq: 1,
    };
    let lora = picogrpo::lora::LoraConfig {
        rank: cfg.budget.lora_rank as usize,
        targets: picogrpo::lora::Projection::ALL[..cfg.budget.lora_targets.min(4) as usize]
            .to_vec(),
        ..Default::default()
    };
    if lora.rank > 0 && !lora.targets.is_empty() && model.n_layers > 0 {
        let (total, _) = count_trainable(&model, &lora);
        println!(
            "trainable adapter parameters: {total} (rank {} × four {}-dim projections × {} layers, r·(d_in+d_out) each)",
            lora.rank, model.d_model, model.n_layers
        );
        if cfg.budget.params > 0 {
            let pct = 100.0 * total as f64 / cfg.budget.params as f64;
            println!("trainable share of base parameters: {pct:.3}%");
        }
    }
    if let Some(path) = json_out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::data(format!("serialize budget: {e}")))?;
        std::fs::write(path, json + "\n")?;
    }
    Ok(())
}

pub fn run_gradcheck(seeds: usize) -> Result<()> {
    let outcomes = gradcheck::run_suite(seeds)?;
    let mut all_pass = true;
    for o in &outcomes {
        println!(
            "gradcheck {:<28} max_err {:.3e}  tol {:.0e}  {}",
            o.name,
            o.max_error,
            o.tolerance,
            if o.pass() { "PASS" } else { "FAIL" }
        );
        all_pass &= o.pass();
    }
    if !all_pass {
        return Err(Error::contract(
            "finite-difference suite failed; see lines above",
        ));
    }
    Ok(())
}

/// Lets tests build datasets without shelling out.
pub fn synthetic_to_file(path: &Path, seed: u64, n: usize, difficulty: u8) -> Result<Vec<Problem>> {
    let problems = gen_synthetic(seed, n, difficulty)?;
    save_dataset(path, &problems)?;
    Ok(problems)
}
