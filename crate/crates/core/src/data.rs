//! Problem records, synthetic arithmetic generation, and prompt building.
//!
//! Dataset files are UTF-8 with one flat JSON object per line carrying
//! string fields "question" and "answer"; the ground truth is the text after
//! the answer's last "####". Synthetic datasets are written in the identical
//! format so every downstream path is format-agnostic.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, Tokenizer};
use crate::rewards::{parse_decimal, ANSWER_MARKER};

/// One math problem: question, worked reasoning, normalized decimal answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub question: String,
    pub reasoning: String,
    pub answer: String,
}

/// Prompt-construction budget and few-shot policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSpec {
    pub max_prompt_tokens: usize,
    pub max_completion_tokens: usize,
    pub k_shot: usize,
    pub max_total_tokens: usize,
    pub shot_seed: u64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec {
            max_prompt_tokens: 128,
            max_completion_tokens: 150,
            k_shot: 8,
            max_total_tokens: 2048,
            shot_seed: 0,
        }
    }
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_prompt_tokens == 0 || self.max_completion_tokens == 0 || self.max_total_tokens == 0
        {
            return Err(Error::config("prompt token budgets must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    question: String,
    answer: String,
}

/// Loads a line-delimited dataset file, splitting each record's answer field
/// at its last "####" into reasoning and normalized ground truth.
pub fn load_dataset(path: &Path) -> Result<Vec<Problem>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open dataset {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut problems = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        if raw.question.is_empty() {
            return Err(Error::data(format!("line {line_no}: empty question")));
        }
        let (reasoning, truth_text) = match raw.answer.rfind("####") {
            Some(pos) => (
                raw.answer[..pos].trim_end().to_string(),
                &raw.answer[pos + 4..],
            ),
            None => (String::new(), raw.answer.as_str()),
        };
        let truth = parse_decimal(truth_text).ok_or_else(|| {
            Error::data(format!(
                "line {line_no}: ground truth {truth_text:?} does not parse as a decimal"
            ))
        })?;
        problems.push(Problem {
            question: raw.question,
            reasoning,
            answer: truth.to_string(),
        });
    }
    Ok(problems)
}

/// Writes problems in the same line-delimited format `load_dataset` reads.
pub fn save_dataset(path: &Path, problems: &[Problem]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for p in problems {
        let record = RawRecord {
            question: p.question.clone(),
            answer: if p.reasoning.is_empty() {
                format!("#### {}", p.answer)
            } else {
                format!("{}\n#### {}", p.reasoning, p.answer)
            },
        };
        serde_json::to_writer(&mut file, &record)
            .map_err(|e| Error::data(format!("serialize record: {e}")))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Deterministic word-free arithmetic problems with step-by-step reasoning.
/// Difficulty 1–3 controls operand count (2–4) and magnitude (≤ 99);
/// multiplication operands stay small so products remain two steps of
/// mental arithmetic.
pub fn gen_synthetic(seed: u64, n: usize, difficulty: u8) -> Result<Vec<Problem>> {
    if !(1..=3).contains(&difficulty) {
        return Err(Error::config(format!(
            "difficulty must be 1, 2 or 3, got {difficulty}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_operands = difficulty as usize + 1;
    let max_add = if difficulty == 1 { 9 } else { 99 };
    let allow_mul = difficulty >= 2;
    let mut problems = Vec::with_capacity(n);
    for _ in 0..n {
        let mut operands: Vec<i64> = Vec::with_capacity(n_operands);
        let mut ops: Vec<char> = Vec::with_capacity(n_operands - 1);
        operands.push(rng.gen_range(1..=max_add));
        for _ in 1..n_operands {
            let op = if allow_mul && rng.gen_range(0..3) == 0 {
                '*'
            } else if rng.gen_range(0..2) == 0 {
                '+'
            } else {
                '-'
            };
            let operand = if op == '*' {
                rng.gen_range(2..=9)
            } else {
                rng.gen_range(1..=max_add)
            };
            ops.push(op);
            operands.push(operand);
        }
        problems.push(build_problem(&operands, &ops));
    }
    Ok(problems)
}

/// Renders the expression, resolves it with '*' before '+'/'-' (left to
/// right within a precedence level), and records one reasoning line per
/// resolved operator.
fn build_problem(operands: &[i64], ops: &[char]) -> Problem {
    let mut expr = String::new();
    write!(expr, "{}", operands[0]).unwrap();
    for (op, v) in ops.iter().zip(&operands[1..]) {
        write!(expr, " {op} {v}").unwrap();
    }

    let mut values: Vec<i64> = operands.to_vec();
    let mut pending: Vec<char> = ops.to_vec();
    let mut lines: Vec<String> = Vec::new();
    while !pending.is_empty() {
        let idx = pending
            .iter()
            .position(|&o| o == '*')
            .unwrap_or(0);
        let (a, b) = (values[idx], values[idx + 1]);
        let r = match pending[idx] {
            '*' => a * b,
            '+' => a + b,
            '-' => a - b,
            _ => unreachable!(),
        };
        lines.push(format!("{a} {} {b} = {r}", pending[idx]));
        values[idx] = r;
        values.remove(idx + 1);
        pending.remove(idx);
    }

    Problem {
        question: format!("Compute {expr}."),
        reasoning: lines.join("\n"),
        answer: values[0].to_string(),
    }
}

/// "Question: {q} Solution: Let's think step by step." — the prompt tail
/// every constructed prompt ends with.
pub fn render_question(question: &str) -> String {
    format!("Question: {question} Solution: Let's think step by step.")
}

/// A fully worked example: question, reasoning and the marked answer.
pub fn render_example(p: &Problem) -> String {
    format!(
        "{} {} {}{}",
        render_question(&p.question),
        p.reasoning,
        ANSWER_MARKER,
        p.answer
    )
}

/// The training completion for a problem: " {reasoning} #### ... {answer}".
pub fn render_target(p: &Problem) -> String {
    format!(" {} {}{}", p.reasoning, ANSWER_MARKER, p.answer)
}

fn truncate_tokens_tail(tokenizer: &Tokenizer, text: &str, budget: usize) -> Result<Vec<TokenId>> {
    let tokens = tokenizer.encode(text)?;
    let start = tokens.len().saturating_sub(budget);
    Ok(tokens[start..].to_vec())
}

/// Builds a training (prompt, target-completion) pair.
///
/// Few-shot examples render fully, then the current question; the prompt is
/// token-truncated keeping its TAIL so the question always survives. The
/// target keeps its head up to `max_completion_tokens`.
pub fn build_train_prompt(
    p: &Problem,
    few_shot: &[Problem],
    spec: &PromptSpec,
    tokenizer: &Tokenizer,
) -> Result<(String, String)> {
    spec.validate()?;
    let mut prompt = String::new();
    for shot in few_shot {
        prompt.push_str(&render_example(shot));
        prompt.push_str("\n\n");
    }
    prompt.push_str(&render_question(&p.question));
    let prompt_tokens = truncate_tokens_tail(tokenizer, &prompt, spec.max_prompt_tokens)?;
    let prompt = tokenizer.decode(&prompt_tokens)?;

    let mut target_tokens = tokenizer.encode(&render_target(p))?;
    target_tokens.truncate(spec.max_completion_tokens);
    let target = tokenizer.decode(&target_tokens)?;
    Ok((prompt, target))
}

/// Builds a k-shot evaluation prompt: `k_shot` pool examples sampled without
/// replacement under `shot_seed`, then the test question. Trailing shots are
/// dropped until the tokenized prompt fits `max_total_tokens`; the test
/// question is never dropped.
pub fn build_eval_prompt(
    test: &Problem,
    train_pool: &[Problem],
    spec: &PromptSpec,
    tokenizer: &Tokenizer,
) -> Result<String> {
    spec.validate()?;
    if train_pool.len() < spec.k_shot {
        return Err(Error::config(format!(
            "few-shot pool of {} is smaller than k_shot {}",
            train_pool.len(),
            spec.k_shot
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.shot_seed);
    let shot_idx = rand::seq::index::sample(&mut rng, train_pool.len(), spec.k_shot);
    let mut shots: Vec<&Problem> = shot_idx.iter().map(|i| &train_pool[i]).collect();

    let question_part = render_question(&test.question);
    loop {
        let mut prompt = String::new();
        for shot in &shots {
            prompt.push_str(&render_example(shot));
            prompt.push_str("\n\n");
        }
        prompt.push_str(&question_part);
        let len = tokenizer.encode(&prompt)?.len();
        if len <= spec.max_total_tokens || shots.is_empty() {
            return Ok(prompt);
        }
        shots.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::{extract_answer, AnswerSource};

    /// Independent expression evaluator: recursive-descent parse of the
    /// question text with standard precedence.
    mod eval_oracle {
        pub fn eval(question: &str) -> i64 {
            let expr = question
                .strip_prefix("Compute ")
                .and_then(|s| s.strip_suffix('.'))
                .expect("synthetic question shape");
            let tokens: Vec<&str> = expr.split_whitespace().collect();
            // terms separated by +/-, factors by *
            let mut acc: Option<i64> = None;
            let mut pending_add = '+';
            let mut term = 1i64;
            let mut pending_mul = false;
            for tok in tokens {
                match tok {
                    "+" | "-" => {
                        acc = Some(apply(acc, pending_add, term));
                        pending_add = tok.chars().next().unwrap();
                        pending_mul = false;
                    }
                    "*" => pending_mul = true,
                    num => {
                        let v: i64 = num.parse().expect("operand");
                        term = if pending_mul { term * v } else { v };
                    }
                }
            }
            apply(acc, pending_add, term)
        }

        fn apply(acc: Option<i64>, op: char, term: i64) -> i64 {
            match (acc, op) {
                (None, _) => term,
                (Some(a), '+') => a + term,
                (Some(a), '-') => a - term,
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = gen_synthetic(7, 50, 2).unwrap();
        let b = gen_synthetic(7, 50, 2).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(8, 50, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_zero_items_is_empty() {
        assert!(gen_synthetic(1, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn synthetic_rejects_bad_difficulty() {
        assert!(gen_synthetic(1, 1, 0).is_err());
        assert!(gen_synthetic(1, 1, 4).is_err());
    }

    #[test]
    fn synthetic_answers_match_independent_evaluator() {
        for difficulty in 1..=3u8 {
            for p in gen_synthetic(42 + difficulty as u64, 2000, difficulty).unwrap() {
                let expected = eval_oracle::eval(&p.question);
                assert_eq!(
                    p.answer,
                    expected.to_string(),
                    "mismatch for {:?}",
                    p.question
                );
            }
        }
    }

    #[test]
    fn target_roundtrips_through_answer_extraction() {
        for p in gen_synthetic(5, 200, 3).unwrap() {
            let target = render_target(&p);
            let e = extract_answer(&target).unwrap();
            assert_eq!(e.source, AnswerSource::Marker);
            assert_eq!(e.value.to_string(), p.answer);
        }
    }

    #[test]
    fn load_splits_reasoning_and_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            "{\"question\":\"Q\",\"answer\":\"step A\\nstep B\\n#### 72\"}\n",
        )
        .unwrap();
        let problems = load_dataset(&path).unwrap();
        assert_eq!(problems.len(), 1);
        assert_eq!(problems[0].answer, "72");
        assert_eq!(problems[0].reasoning, "step A\nstep B");
    }

    #[test]
    fn load_empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn load_normalizes_commas_in_truth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(&path, "{\"question\":\"Q\",\"answer\":\"#### 1,000\"}\n").unwrap();
        let problems = load_dataset(&path).unwrap();
        assert_eq!(problems[0].answer, "1000");
    }

    #[test]
    fn load_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            "{\"question\":\"Q\",\"answer\":\"#### 1\"}\nnot json\n",
        )
        .unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        let problems = gen_synthetic(3, 25, 2).unwrap();
        save_dataset(&path, &problems).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), problems);
    }

    #[test]
    fn zero_shot_prompt_is_the_formatted_question() {
        let tk = Tokenizer::default();
        let p = Problem {
            question: "Compute 1 + 1.".into(),
            reasoning: "1 + 1 = 2".into(),
            answer: "2".into(),
        };
        let spec = PromptSpec::default();
        let (prompt, target) = build_train_prompt(&p, &[], &spec, &tk).unwrap();
        assert_eq!(prompt, "Question: Compute 1 + 1. Solution: Let's think step by step.");
        assert_eq!(target, " 1 + 1 = 2 #### The final answer is 2");
    }

    #[test]
    fn train_prompt_respects_budget_and_keeps_tail() {
        let tk = Tokenizer::default();
        let pool = gen_synthetic(11, 6, 2).unwrap();
        let spec = PromptSpec {
            max_prompt_tokens: 128,
            ..Default::default()
        };
        let (prompt, _) = build_train_prompt(&pool[0], &pool[1..5], &spec, &tk).unwrap();
        let tokens = tk.encode(&prompt).unwrap();
        assert!(tokens.len() <= 128);
        // the current question is the tail and must survive truncation
        assert!(prompt.ends_with("Solution: Let's think step by step."));
        assert!(prompt.contains(&pool[0].question));
    }

    #[test]
    fn golden_train_prompt_fixture() {
        let tk = Tokenizer::default();
        let main = Problem {
            question: "Compute 12 + 7 * 3.".into(),
            reasoning: "7 * 3 = 21\n12 + 21 = 33".into(),
            answer: "33".into(),
        };
        let shot = Problem {
            question: "Compute 2 + 2.".into(),
            reasoning: "2 + 2 = 4".into(),
            answer: "4".into(),
        };
        let spec = PromptSpec {
            max_prompt_tokens: 512,
            max_completion_tokens: 150,
            ..Default::default()
        };
        let (prompt, target) = build_train_prompt(&main, &[shot], &spec, &tk).unwrap();
        assert_eq!(
            prompt,
            "Question: Compute 2 + 2. Solution: Let's think step by step. 2 + 2 = 4 \
             #### The final answer is 4\n\n\
             Question: Compute 12 + 7 * 3. Solution: Let's think step by step."
        );
        assert_eq!(
            target,
            " 7 * 3 = 21\n12 + 21 = 33 #### The final answer is 33"
        );
    }

    #[test]
    fn eval_prompt_zero_shot_and_seeded_selection() {
        let tk = Tokenizer::default();
        let pool = gen_synthetic(2, 30, 2).unwrap();
        let test = &pool[0];
        let zero = PromptSpec {
            k_shot: 0,
            ..Default::default()
        };
        let prompt = build_eval_prompt(test, &pool, &zero, &tk).unwrap();
        assert_eq!(prompt, render_question(&test.question));

        let spec = PromptSpec {
            k_shot: 8,
            shot_seed: 77,
            ..Default::default()
        };
        let a = build_eval_prompt(test, &pool, &spec, &tk).unwrap();
        let b = build_eval_prompt(test, &pool, &spec, &tk).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_prompt_pool_too_small_is_config_error() {
        let tk = Tokenizer::default();
        let pool = gen_synthetic(2, 3, 1).unwrap();
        let spec = PromptSpec {
            k_shot: 8,
            ..Default::default()
        };
        assert!(matches!(
            build_eval_prompt(&pool[0], &pool, &spec, &tk),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_prompt_drops_shots_but_never_the_question() {
        let tk = Tokenizer::default();
        // adversarially long shots
        let mut pool = gen_synthetic(4, 10, 2).unwrap();
        for p in pool.iter_mut() {
            p.reasoning = "9 + 9 = 18\n".repeat(200);
        }
        let test = Problem {
            question: "Compute 3 + 4.".into(),
            reasoning: "3 + 4 = 7".into(),
            answer: "7".into(),
        };
        let spec = PromptSpec {
            k_shot: 8,
            max_total_tokens: 2048,
            shot_seed: 5,
            ..Default::default()
        };
        let prompt = build_eval_prompt(&test, &pool, &spec, &tk).unwrap();
        assert!(tk.encode(&prompt).unwrap().len() <= 2048);
        assert!(prompt.ends_with(&render_question(&test.question)));
    }

    #[test]
    fn eval_shots_are_sampled_without_replacement() {
        let tk = Tokenizer::default();
        let pool = gen_synthetic(9, 12, 2).unwrap();
        let spec = PromptSpec {
            k_shot: 12,
            max_total_tokens: 100_000,
            shot_seed: 3,
            ..Default::default()
        };
        let prompt = build_eval_prompt(&pool[0], &pool, &spec, &tk).unwrap();
        for p in &pool {
            let rendered = render_example(p);
            assert_eq!(prompt.matches(&rendered).count(), 1, "{}", p.question);
        }
    }

    #[test]
    fn dataset_truth_and_completion_extraction_share_normalization() {
        // the same fixture numbers must normalize identically on both paths
        let fixtures = ["460", "1,000", "12.50", "-3", "0"];
        for f in fixtures {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("one.jsonl");
            std::fs::write(
                &path,
                format!("{{\"question\":\"Q\",\"answer\":\"#### {f}\"}}\n"),
            )
            .unwrap();
            let loaded = load_dataset(&path).unwrap();
            let completion = format!("{ANSWER_MARKER}{f}");
            let extracted = extract_answer(&completion).unwrap();
            assert_eq!(loaded[0].answer, extracted.value.to_string());
        }
    }
}
