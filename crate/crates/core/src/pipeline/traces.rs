use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::format::{
    build_distillation_record, parse_rlt_completion, render_rlt_prompt, SegmentedTrace, TraceRecord,
    Vocabulary, END_EXPLANATION,
};
use crate::lm::{sample, GenerationConfig, ModelState, Real};
use crate::reward::{compute_r_ss, compute_rlt_reward, RewardBreakdown, RewardConfig};
use crate::rl::derive_seed;
use crate::sft::{fit_records, sft_train, SftConfig, SftMetrics};
use crate::tasks::TaskInstance;

/// What the selection rule knows about one sampled completion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub parsed: bool,
    /// Its distillation record fits the length budget.
    pub fits: bool,
    pub r_ss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Selection {
    /// First parsed candidate that fits.
    Fit(usize),
    /// No candidate fits: the parsed one with the highest solution score
    /// (first on ties, unscored ones last).
    Fallback(usize),
    Skip,
}

pub fn select_candidate(candidates: &[Candidate]) -> Selection {
    if let Some(i) = candidates.iter().position(|c| c.parsed && c.fits) {
        return Selection::Fit(i);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate().filter(|(_, c)| c.parsed) {
        let score = c.r_ss.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map_or(Selection::Skip, |(i, _)| Selection::Fallback(i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedTrace {
    pub trace: SegmentedTrace,
    pub sample_index: usize,
    pub oversize: bool,
    pub r_ss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutcome {
    pub task_id: String,
    pub selected: Option<SelectedTrace>,
    pub sampled: usize,
    pub parsed: usize,
}

impl TraceOutcome {
    pub fn record(&self, vocab: &Vocabulary) -> Option<TraceRecord> {
        let s = self.selected.as_ref()?;
        Some(TraceRecord::from_trace(
            vocab,
            &s.trace,
            serde_json::json!({
                "task_id": self.task_id,
                "sample_index": s.sample_index,
                "oversize": s.oversize,
                "r_ss": s.r_ss,
            }),
        ))
    }
}

pub fn selected_traces(outcomes: &[TraceOutcome]) -> Vec<SegmentedTrace> {
    outcomes.iter().filter_map(|o| o.selected.as_ref().map(|s| s.trace.clone())).collect()
}

/// Samples up to `k` teacher explanations per task and keeps one: the first
/// parsed one whose distillation record fits `max_ctx` (sampling stops
/// there); otherwise the parsed one with the best solution score under the
/// students; otherwise the task is skipped. Sample `j` of task `i` uses
/// `derive_seed(&[gen.rng_seed, i, j])`.
#[allow(clippy::too_many_arguments)]
pub fn generate_traces<F: Real>(
    teacher: &ModelState<F>,
    students: &[ModelState<F>],
    vocab: &Vocabulary,
    tasks: &[TaskInstance],
    k: usize,
    max_ctx: usize,
    gen: &GenerationConfig,
    reward: &RewardConfig,
) -> Result<Vec<TraceOutcome>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let prompt = render_rlt_prompt(vocab, &task.question, &task.canonical_solution)?;
            let mut traces = Vec::new();
            let mut candidates = Vec::new();
            for j in 0..k.max(1) {
                let cfg = gen.clone().with_seed(derive_seed(&[gen.rng_seed, i as u64, j as u64]));
                let out = sample(teacher, &prompt, &cfg, &[END_EXPLANATION])?;
                let parsed = (out.tokens.len() <= reward.max_completion_tokens)
                    .then(|| parse_rlt_completion(&prompt, &out.tokens).ok())
                    .flatten();
                let fits = parsed
                    .as_ref()
                    .is_some_and(|t| build_distillation_record(t, max_ctx).len() <= max_ctx);
                candidates.push(Candidate {
                    parsed: parsed.is_some(),
                    fits,
                    r_ss: None,
                });
                traces.push(parsed);
                if fits {
                    break;
                }
            }
            let mut selection = select_candidate(&candidates);
            if let Selection::Fallback(_) = selection {
                for (c, t) in candidates.iter_mut().zip(&traces) {
                    if let Some(t) = t {
                        c.r_ss = compute_r_ss(students, t, reward.alpha).ok().map(|(r, _)| r);
                    }
                }
                selection = select_candidate(&candidates);
            }
            let selected = match selection {
                Selection::Fit(j) | Selection::Fallback(j) => Some(SelectedTrace {
                    trace: traces[j].clone().expect("selected candidates are parsed"),
                    sample_index: j,
                    oversize: !candidates[j].fits,
                    r_ss: candidates[j].r_ss,
                }),
                Selection::Skip => None,
            };
            Ok(TraceOutcome {
                task_id: task.id.clone(),
                selected,
                sampled: candidates.len(),
                parsed: candidates.iter().filter(|c| c.parsed).count(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketEntry {
    pub task_id: String,
    pub sample_index: usize,
    /// `None` when no readable explanation was obtained.
    pub trace: Option<SegmentedTrace>,
    pub reward: RewardBreakdown,
    /// Still unreadable after the extra resamples.
    pub flagged: bool,
}

/// Extra samples drawn for an unreadable completion before its bucket entry
/// is flagged.
pub const BUCKET_RESAMPLES: usize = 3;

/// Scores `k` explanations per task and distributes them by rank: bucket
/// `j` holds every task's `j`-th best explanation (ties keep sampling
/// order). Sample `j`, attempt `a` of task `i` uses
/// `derive_seed(&[gen.rng_seed, i, j, a])`.
#[allow(clippy::too_many_arguments)]
pub fn rank_buckets<F: Real>(
    teacher: &ModelState<F>,
    students: &[ModelState<F>],
    vocab: &Vocabulary,
    tasks: &[TaskInstance],
    k: usize,
    gen: &GenerationConfig,
    reward: &RewardConfig,
) -> Result<Vec<Vec<BucketEntry>>> {
    let per_task: Vec<Vec<BucketEntry>> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let prompt = render_rlt_prompt(vocab, &task.question, &task.canonical_solution)?;
            let mut entries = Vec::with_capacity(k);
            for j in 0..k {
                let mut entry = None;
                for a in 0..=BUCKET_RESAMPLES {
                    let seed = derive_seed(&[gen.rng_seed, i as u64, j as u64, a as u64]);
                    let out = sample(teacher, &prompt, &gen.clone().with_seed(seed), &[END_EXPLANATION])?;
                    let b = compute_rlt_reward(teacher, students, &prompt, &out.tokens, reward)?;
                    if b.format_ok {
                        let trace = parse_rlt_completion(&prompt, &out.tokens).ok();
                        entry = Some((trace, b));
                        break;
                    }
                    if a == BUCKET_RESAMPLES {
                        entry = Some((None, b));
                    }
                }
                let (trace, reward) = entry.expect("at least one attempt");
                entries.push(BucketEntry {
                    task_id: task.id.clone(),
                    sample_index: j,
                    flagged: trace.is_none(),
                    trace,
                    reward,
                });
            }
            entries.sort_by(|a, b| b.reward.total.total_cmp(&a.reward.total));
            Ok(entries)
        })
        .collect::<Result<_>>()?;
    let mut buckets: Vec<Vec<BucketEntry>> = (0..k).map(|_| Vec::with_capacity(tasks.len())).collect();
    for entries in per_task {
        for (j, e) in entries.into_iter().enumerate() {
            buckets[j].push(e);
        }
    }
    Ok(buckets)
}

/// Explanations of one bucket, flagged entries left out.
pub fn bucket_traces(bucket: &[BucketEntry]) -> Vec<SegmentedTrace> {
    bucket.iter().filter_map(|e| e.trace.clone()).collect()
}

/// Permutes the think spans across traces (a derangement is not enforced).
pub fn shuffle_thinks(traces: &[SegmentedTrace], seed: u64) -> Vec<SegmentedTrace> {
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    traces
        .iter()
        .zip(order)
        .map(|(t, j)| t.with_think(&traces[j].think))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Distilled<F: Real> {
    pub student: ModelState<F>,
    pub metrics: Vec<SftMetrics>,
    pub dropped_oversize: usize,
}

/// Builds reasoning-format records from the traces and trains the student
/// on those that fit its window.
pub fn distill<F: Real>(
    student: ModelState<F>,
    traces: &[SegmentedTrace],
    cfg: &SftConfig,
) -> Result<Distilled<F>> {
    let window = student.config.context_window;
    let records = traces.iter().map(|t| build_distillation_record(t, window)).collect();
    let (records, dropped_oversize) = fit_records(records, window);
    let (student, metrics) = sft_train(student, &records, cfg, |_| {})?;
    Ok(Distilled {
        student,
        metrics,
        dropped_oversize,
    })
}
