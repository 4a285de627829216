//! Supervised phases: teacher warmup on the teaching format and student
//! distillation, plus student evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{
    build_teacher_record, render_student_prompt, DistillationRecord, SegmentedTrace, Vocabulary,
    END_SOLUTION,
};
use crate::lm::{
    adamw_step, cross_entropy_and_grads, sample, AdamWConfig, GenerationConfig, LmExample,
    ModelState, OptimizerState, Real,
};
use crate::reward::student_answer;
use crate::rl::derive_seed;
use crate::tasks::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub epochs: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub final_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl SftConfig {
    /// Full fine-tuning preset of the large-scale runs.
    pub fn full_finetune() -> Self {
        Self {
            epochs: 3.0,
            batch_size: 96,
            lr: 1e-5,
            lr_decay: LrDecay::Cosine,
            final_lr: 1e-6,
            warmup_ratio: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }

    /// Preset for the small (1K-example) distillation sets.
    pub fn subset_1k() -> Self {
        Self {
            epochs: 5.0,
            batch_size: 16,
            warmup_ratio: 0.05,
            weight_decay: 1e-4,
            beta2: 0.95,
            ..Self::full_finetune()
        }
    }

    /// Teacher format warmup: the 1K preset with twice the epochs.
    pub fn teacher_warmup() -> Self {
        let base = Self::subset_1k();
        Self {
            epochs: base.epochs * 2.0,
            ..base
        }
    }

    /// Scaled-down distillation defaults for small models trained from
    /// scratch.
    pub fn desk() -> Self {
        Self {
            epochs: 12.0,
            batch_size: 16,
            lr: 3e-3,
            final_lr: 3e-4,
            warmup_ratio: 0.05,
            ..Self::full_finetune()
        }
    }

    /// Desk-scale teacher warmup, twice the distillation epochs.
    pub fn desk_warmup() -> Self {
        let base = Self::desk();
        Self {
            epochs: base.epochs * 2.0,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epochs >= 0.0) || self.batch_size == 0 || !(self.lr > 0.0) || !(self.final_lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad sft config {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidConfig(format!("warmup_ratio {}", self.warmup_ratio)));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_records: usize) -> usize {
        (self.epochs * n_records as f64 / self.batch_size as f64).ceil() as usize
    }

    pub fn schedule(&self, total_steps: usize) -> LrSchedule {
        LrSchedule {
            peak: self.lr,
            final_lr: self.final_lr,
            decay: self.lr_decay,
            warmup: (total_steps as f64 * self.warmup_ratio).round() as usize,
            total: total_steps,
        }
    }

    fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

impl Default for SftConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine (or
/// flat) decay reaching `final_lr` at `total`. Update `s` (0-based) uses
/// `lr_at(s + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub final_lr: f64,
    pub decay: LrDecay,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, s: usize) -> f64 {
        if s < self.warmup {
            return self.peak * s as f64 / self.warmup as f64;
        }
        match self.decay {
            LrDecay::Constant => self.peak,
            LrDecay::Cosine => {
                let span = self.total.saturating_sub(self.warmup);
                if span == 0 {
                    return self.peak;
                }
                let t = ((s - self.warmup) as f64 / span as f64).min(1.0);
                self.final_lr + (self.peak - self.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SftMetrics {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Splits records into those that fit `window` and the number dropped.
pub fn fit_records(records: Vec<DistillationRecord>, window: usize) -> (Vec<DistillationRecord>, usize) {
    let before = records.len();
    let kept: Vec<_> = records.into_iter().filter(|r| !r.oversize && r.len() <= window).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Masked cross-entropy training. Each pass over the data is a fresh seeded
/// shuffle; batches are consecutive slices of the concatenated passes.
pub fn sft_train<F: Real>(
    mut model: ModelState<F>,
    records: &[DistillationRecord],
    cfg: &SftConfig,
    mut on_step: impl FnMut(&SftMetrics),
) -> Result<(ModelState<F>, Vec<SftMetrics>)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let examples: Vec<LmExample> = records.iter().map(DistillationRecord::to_example).collect();
    let total = cfg.total_steps(records.len());
    let schedule = cfg.schedule(total);
    let mut opt = OptimizerState::new(&model.params, cfg.adam());
    let mut stream: Vec<usize> = Vec::new();
    let mut pass = 0u64;
    let mut consumed = 0usize;
    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        while stream.len() < consumed + cfg.batch_size {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, pass])));
            stream.extend(order);
            pass += 1;
        }
        let batch: Vec<LmExample> = stream[consumed..consumed + cfg.batch_size]
            .iter()
            .map(|&i| examples[i].clone())
            .collect();
        consumed += cfg.batch_size;
        let (loss, grads) = cross_entropy_and_grads(&model, &batch)?;
        let lr = schedule.lr_at(step + 1);
        opt.set_lr(lr);
        let grad_norm = adamw_step(&mut opt, &mut model.params, &grads)?;
        model.step_count += 1;
        let m = SftMetrics {
            step,
            epoch: consumed as f64 / records.len() as f64,
            lr,
            loss,
            grad_norm,
        };
        on_step(&m);
        log.push(m);
    }
    Ok((model, log))
}

/// Familiarizes a teacher with the teaching format: the prompt holds the
/// question and solution, the target is the explanation and closing tag.
pub fn warmup_teacher<F: Real>(
    teacher: ModelState<F>,
    seed_traces: &[SegmentedTrace],
    cfg: &SftConfig,
) -> Result<(ModelState<F>, Vec<SftMetrics>)> {
    if seed_traces.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let window = teacher.config.context_window;
    let records: Vec<_> = seed_traces.iter().map(|t| build_teacher_record(t, window)).collect();
    let (records, _) = fit_records(records, window);
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    sft_train(teacher, &records, cfg, |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub id: String,
    pub formatted: bool,
    pub correct: bool,
    pub answer: Option<String>,
    pub completion_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub format_rate: f64,
    pub outcomes: Vec<EvalOutcome>,
}

impl EvalReport {
    pub fn from_outcomes(outcomes: Vec<EvalOutcome>) -> Self {
        let n = outcomes.len().max(1) as f64;
        Self {
            accuracy: outcomes.iter().filter(|o| o.correct).count() as f64 / n,
            format_rate: outcomes.iter().filter(|o| o.formatted).count() as f64 / n,
            outcomes,
        }
    }

    pub fn solved_ids(&self) -> std::collections::BTreeSet<&str> {
        self.outcomes.iter().filter(|o| o.correct).map(|o| o.id.as_str()).collect()
    }
}

/// Decodes each task's reasoning prompt and checks the solution span. With
/// sampling, task `i` uses `derive_seed(&[gen.rng_seed, i])`.
pub fn eval_student<F: Real>(
    student: &ModelState<F>,
    vocab: &Vocabulary,
    tasks: &[TaskInstance],
    gen: &GenerationConfig,
) -> Result<EvalReport> {
    let outcomes = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let prompt = render_student_prompt(vocab, &task.question)?;
            let cfg = gen.clone().with_seed(derive_seed(&[gen.rng_seed, i as u64]));
            let out = sample(student, &prompt, &cfg, &[END_SOLUTION])?;
            let answer = student_answer(vocab, &out.tokens).ok();
            Ok(EvalOutcome {
                id: task.id.clone(),
                formatted: answer.is_some(),
                correct: answer.as_deref().is_some_and(|a| task.check(a)),
                answer,
                completion_len: out.tokens.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_outcomes(outcomes))
}
