use serde::{Deserialize, Serialize};

use super::traces::{bucket_traces, distill, BucketEntry};
use crate::error::Result;
use crate::format::{SegmentedTrace, Vocabulary};
use crate::lm::{GenerationConfig, ModelState, Real};
use crate::sft::{eval_student, EvalReport, SftConfig};
use crate::tasks::TaskInstance;

/// Pearson correlation; `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Length of the longest common contiguous run of `think` and `solution`,
/// divided by the solution length.
pub fn overlap_ratio<T: PartialEq>(think: &[T], solution: &[T]) -> f64 {
    if solution.is_empty() {
        return 0.0;
    }
    let mut prev = vec![0usize; solution.len() + 1];
    let mut cur = vec![0usize; solution.len() + 1];
    let mut best = 0;
    for a in think {
        for (j, b) in solution.iter().enumerate() {
            cur[j + 1] = if a == b { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best as f64 / solution.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceStats {
    pub count: usize,
    pub mean_think_len: f64,
    pub mean_overlap: f64,
}

pub fn trace_stats(traces: &[SegmentedTrace]) -> TraceStats {
    let n = traces.len();
    if n == 0 {
        return TraceStats::default();
    }
    TraceStats {
        count: n,
        mean_think_len: traces.iter().map(|t| t.think.len() as f64).sum::<f64>() / n as f64,
        mean_overlap: traces.iter().map(|t| overlap_ratio(&t.think, &t.solution)).sum::<f64>() / n as f64,
    }
}

/// `|A ∩ B| / |A ∪ B|` over the solved task ids; `None` if neither solved
/// anything.
pub fn solved_set_overlap(a: &EvalReport, b: &EvalReport) -> Option<f64> {
    let (sa, sb) = (a.solved_ids(), b.solved_ids());
    let union = sa.union(&sb).count();
    (union > 0).then(|| sa.intersection(&sb).count() as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub rank: usize,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub traces: usize,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<BucketRow>,
    /// Correlation between the negated rank and accuracy; `None` when
    /// undefined.
    pub pearson: Option<f64>,
}

pub fn correlation_from_rows(rows: &[BucketRow]) -> Option<f64> {
    let x: Vec<f64> = rows.iter().map(|r| -(r.rank as f64)).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    pearson(&x, &y)
}

pub fn bucket_mean_reward(bucket: &[BucketEntry]) -> f64 {
    bucket.iter().map(|e| e.reward.total).sum::<f64>() / bucket.len().max(1) as f64
}

/// Trains one student per bucket from the same initialization and seed and
/// correlates rank with held-out accuracy.
pub fn correlation_analysis<F: Real>(
    buckets: &[Vec<BucketEntry>],
    student_init: &ModelState<F>,
    sft: &SftConfig,
    vocab: &Vocabulary,
    test: &[TaskInstance],
    gen: &GenerationConfig,
) -> Result<CorrelationReport> {
    let mut rows = Vec::with_capacity(buckets.len());
    for (rank, bucket) in buckets.iter().enumerate() {
        let traces = bucket_traces(bucket);
        let student = distill(student_init.clone(), &traces, sft)?.student;
        let report = eval_student(&student, vocab, test, gen)?;
        rows.push(BucketRow {
            rank,
            accuracy: report.accuracy,
            mean_reward: bucket_mean_reward(bucket),
            traces: traces.len(),
            flagged: bucket.len() - traces.len(),
        });
    }
    let pearson = correlation_from_rows(&rows);
    Ok(CorrelationReport { rows, pearson })
}
