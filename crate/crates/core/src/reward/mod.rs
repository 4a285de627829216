//! Teacher rewards (solution score and think-token KL) and the correctness
//! reward used for ordinary RL.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{
    parse_rlt_completion, parse_student_completion, student_generation_prefix, FormatFailure,
    SegmentedTrace, Vocabulary, END_EXPLANATION, END_THOUGHT,
};
use crate::lm::{ModelState, Real, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub format_penalty: f64,
    /// Completions longer than this (closing tag included) are penalized.
    pub max_completion_tokens: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            alpha: 0.01,
            format_penalty: -1.0,
            max_completion_tokens: 64,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.alpha >= 0.0) || !self.format_penalty.is_finite() {
            return Err(Error::InvalidConfig(format!("bad reward config {self:?}")));
        }
        Ok(())
    }
}

/// One scored teacher completion. Component fields are `None` when the
/// completion was penalized.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_ss_avg: Option<f64>,
    pub r_ss_min: Option<f64>,
    pub r_ss: Option<f64>,
    pub r_kl_avg: Option<f64>,
    pub r_kl_max: Option<f64>,
    pub r_kl: Option<f64>,
    pub total: f64,
    pub format_ok: bool,
    pub failure: Option<FormatFailure>,
    pub think_len: usize,
}

impl RewardBreakdown {
    pub fn penalty(cfg: &RewardConfig, failure: FormatFailure) -> Self {
        Self {
            total: cfg.format_penalty,
            failure: Some(failure),
            ..Default::default()
        }
    }

    /// Breakdown from per-token solution log-probabilities and think KLs.
    pub fn combine(ss: &[f64], kl: &[f64], cfg: &RewardConfig) -> Self {
        let (r_ss_avg, r_ss_min, r_ss) = avg_extreme(ss, cfg.alpha, f64::min);
        let (r_kl_avg, r_kl_max, r_kl) = avg_extreme(kl, cfg.alpha, f64::max);
        Self {
            r_ss_avg: Some(r_ss_avg),
            r_ss_min: Some(r_ss_min),
            r_ss: Some(r_ss),
            r_kl_avg: Some(r_kl_avg),
            r_kl_max: Some(r_kl_max),
            r_kl: Some(r_kl),
            total: r_ss - cfg.lambda * r_kl,
            format_ok: true,
            failure: None,
            think_len: kl.len(),
        }
    }
}

/// `(avg, extreme, avg + alpha * extreme)`.
fn avg_extreme(v: &[f64], alpha: f64, pick: fn(f64, f64) -> f64) -> (f64, f64, f64) {
    let avg = v.iter().sum::<f64>() / v.len() as f64;
    let ext = v.iter().copied().reduce(pick).unwrap_or(0.0);
    (avg, ext, avg + alpha * ext)
}

/// Average plus `alpha` times minimum of the per-token log-probabilities.
pub fn solution_score(log_probs: &[f64], alpha: f64) -> f64 {
    avg_extreme(log_probs, alpha, f64::min).2
}

/// Average plus `alpha` times maximum of the per-token KL values.
pub fn think_divergence(kls: &[f64], alpha: f64) -> f64 {
    avg_extreme(kls, alpha, f64::max).2
}

fn check_students<F: Real>(students: &[ModelState<F>]) -> Result<usize> {
    let first = students
        .first()
        .ok_or_else(|| Error::InvalidConfig("no student models".into()))?;
    let vocab = first.config.vocab_size;
    if let Some(s) = students.iter().find(|s| s.config.vocab_size != vocab) {
        return Err(Error::ConfigMismatch(format!(
            "student vocabularies differ: {} vs {}",
            vocab, s.config.vocab_size
        )));
    }
    Ok(vocab)
}

/// `ln(mean(exp(x)))`, exact when all inputs agree.
fn log_mean_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + (x - m).exp(), n + 1));
    m + (sum / n as f64).ln()
}

/// Next-token log-distributions of the student mixture (arithmetic mean of
/// probabilities) at every position of `tokens`, as f64 rows.
fn ensemble_rows<F: Real>(students: &[ModelState<F>], tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
    let vocab = check_students(students)?;
    let tables = students
        .iter()
        .map(|s| s.forward(tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..tokens.len())
        .map(|i| {
            (0..vocab)
                .map(|v| log_mean_exp(tables.iter().map(|t| t.row(i)[v].as_f64())))
                .collect()
        })
        .collect())
}

/// Per-token log-probabilities of `targets` after `context` under the mean
/// of the students' distributions.
pub fn ensemble_student_logprobs<F: Real>(
    students: &[ModelState<F>],
    context: &[TokenId],
    targets: &[TokenId],
) -> Result<Vec<f64>> {
    check_students(students)?;
    let per_student = students
        .iter()
        .map(|s| crate::lm::token_log_probs(s, context, targets))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..targets.len())
        .map(|k| log_mean_exp(per_student.iter().map(|lp| lp[k].as_f64())))
        .collect())
}

/// Per-token solution log-probabilities under the students, conditioned on
/// the question and the think tokens in the reasoning format, and their
/// score `avg + alpha * min`.
pub fn compute_r_ss<F: Real>(
    students: &[ModelState<F>],
    trace: &SegmentedTrace,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    let ctx = crate::format::student_scoring_context(&trace.question, &trace.think);
    let lp = ensemble_student_logprobs(students, &ctx, &trace.solution)?;
    Ok((solution_score(&lp, alpha), lp))
}

/// Exact KL over a vocabulary in which the two explanation-closing tags
/// (`END_EXPLANATION` for the teacher, `END_THOUGHT` for the student) count
/// as a single outcome. Computed in f64 and clamped at zero.
pub fn merged_end_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    let (a, b) = (END_EXPLANATION as usize, END_THOUGHT as usize);
    let mut kl = 0.0;
    for v in 0..log_p.len() {
        if v == a || v == b {
            continue;
        }
        let p = log_p[v].exp();
        if p > 0.0 {
            kl += p * (log_p[v] - log_q[v]);
        }
    }
    let merge = |lp: &[f64]| {
        let (x, y) = (lp[a], lp[b]);
        let m = x.max(y);
        if m == f64::NEG_INFINITY {
            m
        } else {
            m + ((x - m).exp() + (y - m).exp()).ln()
        }
    };
    let (pe, qe) = (merge(log_p), merge(log_q));
    if pe.exp() > 0.0 {
        kl += pe.exp() * (pe - qe);
    }
    kl.max(0.0)
}

fn teacher_rows<F: Real>(teacher: &ModelState<F>, trace: &SegmentedTrace) -> Result<Vec<Vec<f64>>> {
    let prompt_len = trace.think_span.start;
    let seq = &trace.tokens[..trace.think_span.end];
    let table = teacher.forward(&seq[..seq.len().max(1)])?;
    Ok((0..trace.think.len())
        .map(|t| table.row(prompt_len - 1 + t).iter().map(|x| x.as_f64()).collect())
        .collect())
}

/// Per-token KL between the teacher (teaching format, solution in context)
/// and the students (reasoning format, question only) over the think span,
/// and the score `avg + alpha * max`.
pub fn compute_r_kl<F: Real>(
    teacher: &ModelState<F>,
    students: &[ModelState<F>],
    trace: &SegmentedTrace,
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if trace.think.is_empty() {
        return Err(Error::ShapeError("empty think span".into()));
    }
    let p = teacher_rows(teacher, trace)?;
    let mut seq = student_generation_prefix(&trace.question);
    let base = seq.len() - 1;
    seq.extend_from_slice(&trace.think[..trace.think.len() - 1]);
    for s in students {
        s.check_fits(seq.len() + 1)?;
    }
    let q = ensemble_rows(students, &seq)?;
    let kls: Vec<f64> = (0..trace.think.len())
        .map(|t| merged_end_kl(&p[t], &q[base + t]))
        .collect();
    Ok((think_divergence(&kls, alpha), kls))
}

/// Scores a parsed trace; context overflow becomes a `TooLong` penalty.
pub fn score_trace<F: Real>(
    teacher: &ModelState<F>,
    students: &[ModelState<F>],
    trace: &SegmentedTrace,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    let scored = compute_r_ss(students, trace, cfg.alpha)
        .and_then(|(_, ss)| Ok((ss, compute_r_kl(teacher, students, trace, cfg.alpha)?.1)));
    match scored {
        Ok((ss, kl)) => Ok(RewardBreakdown::combine(&ss, &kl, cfg)),
        Err(Error::ContextOverflow { .. }) => Ok(RewardBreakdown::penalty(cfg, FormatFailure::TooLong)),
        Err(e) => Err(e),
    }
}

/// Dense teacher reward for one completion of a teaching prompt. Unreadable
/// or over-long completions receive `format_penalty` in place of the reward.
pub fn compute_rlt_reward<F: Real>(
    teacher: &ModelState<F>,
    students: &[ModelState<F>],
    prompt: &[TokenId],
    completion: &[TokenId],
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    if completion.len() > cfg.max_completion_tokens {
        return Ok(RewardBreakdown::penalty(cfg, FormatFailure::TooLong));
    }
    match parse_rlt_completion(prompt, completion) {
        Ok(trace) => score_trace(teacher, students, &trace, cfg),
        Err(f) => Ok(RewardBreakdown::penalty(cfg, f)),
    }
}

pub const CORRECT: f64 = 1.0;
pub const WRONG: f64 = -0.5;
pub const UNFORMATTED: f64 = -1.0;

/// The solution text of a reasoning-format completion.
pub fn student_answer(vocab: &Vocabulary, completion: &[TokenId]) -> Result<String, FormatFailure> {
    let spans = parse_student_completion(completion)?;
    Ok(vocab.detokenize(&completion[spans.solution]))
}

/// `-1` for an unreadable completion, `-0.5` for a readable wrong answer,
/// `1` for an answer the checker accepts.
pub fn correctness_reward(vocab: &Vocabulary, completion: &[TokenId], checker: impl Fn(&str) -> bool) -> f64 {
    match student_answer(vocab, completion) {
        Err(_) => UNFORMATTED,
        Ok(answer) if checker(&answer) => CORRECT,
        Ok(_) => WRONG,
    }
}
