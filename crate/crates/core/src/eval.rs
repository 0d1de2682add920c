//! Held-out scoring: exact-match accuracy for multiple-choice kinds, mean
//! relative accuracy for numeric kinds, format compliance and the
//! degenerate-output rate.
//!
//! Each item is decoded freely (greedy by default) to judge the format. The
//! scored answer is then read with constrained decoding: the free output is
//! cut at its first `<answer>` (appended when missing) and the model picks
//! among the option labels, or spells a decimal from digit tokens. An
//! untrained model therefore answers at chance rather than failing to
//! produce an answer at all.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use think3d_autograd::ParamStore;

use crate::checkpoint::params_hash;
use crate::error::{Error, Result};
use crate::model::{argmax_where, generate_with_latents, prefill, Generation, Models, SamplingSpec};
use crate::rl::{answer_matches, normalize_answer, parse_decimal};
use crate::task::question::LABELS;
use crate::task::{mix_seed, Answer, QuestionKind, TrainingExample};
use crate::trajectory::{validate_format, FormatGrammar};
use crate::vocab::{TokenId, Vocab};

/// Confidence thresholds `0.50, 0.55, ..., 0.95`.
pub const MRA_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

pub fn exact_match_accuracy(predictions: &[String], truths: &[String]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if truths.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| normalize_answer(p) == normalize_answer(t))
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

/// Fraction of thresholds `t` with `|pred - truth| / truth < 1 - t`.
pub fn mean_relative_accuracy(pred: f64, truth: f64, thresholds: &[f64]) -> Result<f64> {
    if !(truth > 0.0) {
        return Err(Error::NonPositiveTruth(truth));
    }
    let rel = (pred - truth).abs() / truth;
    let pass = thresholds.iter().filter(|&&t| rel < 1.0 - t).count();
    Ok(pass as f64 / thresholds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingSpec {
    pub sampling: SamplingSpec,
    pub seed: u64,
    /// Longest numeric answer, in digit/point tokens.
    pub max_number_tokens: usize,
}

impl Default for DecodingSpec {
    fn default() -> Self {
        Self {
            sampling: SamplingSpec::default(),
            seed: 0,
            max_number_tokens: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindScore {
    pub kind: QuestionKind,
    /// `"accuracy"` or `"mra"`.
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_kind: Vec<KindScore>,
    /// Mean of the per-kind metrics.
    pub average: f64,
    pub count: usize,
    pub format_compliance: f64,
    /// Fraction of free generations with no complete answer block.
    pub degenerate_rate: f64,
    pub checkpoint_hash: String,
    /// Hash of the run config, filled in by the command layer.
    #[serde(default)]
    pub config_hash: String,
    pub seed: u64,
    pub decoding: DecodingSpec,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>8} {:>8} {:>6}", "kind", "metric", "value", "n");
        for k in &self.per_kind {
            let _ = writeln!(s, "{:<20} {:>8} {:>8.4} {:>6}", k.kind.name(), k.metric, k.value, k.count);
        }
        let _ = writeln!(s, "{:<20} {:>8} {:>8.4} {:>6}", "Avg.", "", self.average, self.count);
        let _ = writeln!(s, "{:<20} {:>8} {:>8.4}", "format", "rate", self.format_compliance);
        let _ = writeln!(s, "{:<20} {:>8} {:>8.4}", "degenerate", "rate", self.degenerate_rate);
        let _ = writeln!(s, "checkpoint {} config {}", self.checkpoint_hash, self.config_hash);
        s
    }
}

/// Per-item outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemResult {
    pub generation: Generation,
    pub format_ok: bool,
    pub degenerate: bool,
    pub answer: String,
    /// 1/0 for multiple choice, MRA for numbers.
    pub score: f64,
}

/// True when the tokens contain `<answer> ... </answer>` in that order.
pub fn has_answer_block(tokens: &[TokenId]) -> bool {
    let sp = Vocab::standard().specials();
    tokens
        .iter()
        .position(|&t| t == sp.answer_open)
        .is_some_and(|i| tokens[i + 1..].contains(&sp.answer_close))
}

/// Answer read by constrained decoding after the free trajectory's
/// `<answer>` (appended when absent).
pub fn constrained_answer(
    models: &Models,
    params: &ParamStore,
    question: &[TokenId],
    example: &TrainingExample,
    generated: &[TokenId],
    max_number_tokens: usize,
) -> Result<String> {
    let vocab = Vocab::standard();
    let sp = vocab.specials();
    let cut = generated.iter().position(|&t| t == sp.answer_open).unwrap_or(generated.len());
    let mut prefix: Vec<TokenId> = generated[..cut].to_vec();
    prefix.push(sp.answer_open);
    // Leave room for the answer tokens within the sequence limit.
    let room = models
        .vlm
        .config
        .max_seq_len
        .saturating_sub(example.views.len() * models.vlm.config.patches_per_view() + question.len() + max_number_tokens + 1);
    if prefix.len() > room {
        let drop = prefix.len() - room;
        prefix.drain(..drop);
    }
    let (mut session, mut h) = prefill(&models.vlm, params, question, &example.views)?;
    for &t in &prefix {
        h = session.push_token(t)?;
    }
    let id = |s: &str| vocab.id(s).expect("answer vocabulary");
    match &example.question.options {
        Some(opts) => {
            let labels: Vec<TokenId> = LABELS[..opts.len()].iter().map(|l| id(l)).collect();
            let logits = session.logits(&h);
            Ok(vocab.surface(argmax_where(&logits, |i| labels.contains(&i))).to_string())
        }
        None => {
            let digits: Vec<TokenId> = (0..10).map(|d| id(&d.to_string())).collect();
            let point = id(".");
            let mut out = Vec::new();
            let mut seen_point = false;
            for step in 0..max_number_tokens {
                let logits = session.logits(&h);
                // A point may follow a digit once; the last slot must be a digit.
                let allow_point = !seen_point && step > 0 && step + 1 < max_number_tokens;
                let t = argmax_where(&logits, |i| digits.contains(&i) || (allow_point && i == point));
                out.push(t);
                if seen_point {
                    break;
                }
                seen_point |= t == point;
                h = session.push_token(t)?;
            }
            Ok(vocab.decode(&out))
        }
    }
}

pub fn score_answer(answer: &str, truth: &Answer) -> Result<f64> {
    match truth {
        Answer::Label(_) => Ok(if answer_matches(answer, truth) { 1.0 } else { 0.0 }),
        Answer::Number(v) => match parse_decimal(answer) {
            Some(p) => mean_relative_accuracy(p, *v, &MRA_THRESHOLDS),
            None => Ok(0.0),
        },
    }
}

pub fn evaluate_item(
    models: &Models,
    params: &ParamStore,
    example: &TrainingExample,
    grammar: &FormatGrammar,
    decoding: &DecodingSpec,
) -> Result<ItemResult> {
    let vocab = Vocab::standard();
    let q = vocab.encode(&example.question.prompt())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(decoding.seed, example.id));
    let generation = generate_with_latents(&models.vlm, params, &q, &example.views, grammar, &decoding.sampling, &mut rng)?;
    let format_ok = validate_format(&generation.trajectory, grammar, &vocab.specials());
    let degenerate = !has_answer_block(&generation.trajectory.tokens);
    let answer = constrained_answer(models, params, &q, example, &generation.trajectory.tokens, decoding.max_number_tokens)?;
    let score = score_answer(&answer, &example.question.answer)?;
    Ok(ItemResult {
        generation,
        format_ok,
        degenerate,
        answer,
        score,
    })
}

pub fn run_benchmark(
    models: &Models,
    params: &ParamStore,
    dataset: &[TrainingExample],
    grammar: &FormatGrammar,
    decoding: &DecodingSpec,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut sums: BTreeMap<QuestionKind, (f64, usize)> = BTreeMap::new();
    let (mut fmt, mut degen) = (0usize, 0usize);
    for ex in dataset {
        let r = evaluate_item(models, params, ex, grammar, decoding)?;
        let e = sums.entry(ex.question.kind).or_default();
        e.0 += r.score;
        e.1 += 1;
        fmt += r.format_ok as usize;
        degen += r.degenerate as usize;
    }
    let per_kind: Vec<KindScore> = sums
        .into_iter()
        .map(|(kind, (s, n))| KindScore {
            kind,
            metric: if kind.is_multiple_choice() { "accuracy" } else { "mra" }.into(),
            value: s / n as f64,
            count: n,
        })
        .collect();
    let average = per_kind.iter().map(|k| k.value).sum::<f64>() / per_kind.len() as f64;
    let n = dataset.len() as f64;
    Ok(EvalReport {
        per_kind,
        average,
        count: dataset.len(),
        format_compliance: fmt as f64 / n,
        degenerate_rate: degen as f64 / n,
        checkpoint_hash: params_hash(params, "")[..16].to_string(),
        config_hash: String::new(),
        seed: decoding.seed,
        decoding: decoding.clone(),
    })
}
