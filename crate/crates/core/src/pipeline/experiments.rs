use serde::{Deserialize, Serialize};

use super::analysis::{trace_stats, TraceStats};
use super::config::RunConfig;
use super::traces::{distill, generate_traces, selected_traces, TraceOutcome};
use crate::error::Result;
use crate::format::{
    parse_rlt_completion, render_rlt_prompt, SegmentedTrace, TraceSource, Vocabulary, END_EXPLANATION,
};
use crate::lm::{sample, GenerationConfig, ModelState, Real};
use crate::reward::RewardConfig;
use crate::rl::{
    derive_seed, rlt_prompts, rlt_scorer, train_correctness_rl, train_rlt_teacher, GrpoConfig, GrpoTrainer,
    RunOptions, StepMetrics,
};
use crate::sft::{eval_student, warmup_teacher, EvalReport, SftConfig, SftMetrics};
use crate::tasks::{synthetic_think, TaskInstance, ThinkStyle};

/// Independent initialization streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    RewardStudent = 1,
    Teacher = 2,
    Student = 3,
}

impl RunConfig {
    pub fn role_seed(&self, role: Role) -> u64 {
        derive_seed(&[self.seed, role as u64])
    }

    pub fn fresh_model(&self, role: Role) -> Result<ModelState> {
        ModelState::new(self.model_config(self.role_seed(role))?)
    }
}

/// Canonical explanations for a task list, laid out as teacher traces.
pub fn synthetic_traces(vocab: &Vocabulary, tasks: &[TaskInstance], style: ThinkStyle) -> Result<Vec<SegmentedTrace>> {
    tasks
        .iter()
        .map(|t| {
            Ok(SegmentedTrace::new(
                &vocab.tokenize_nonempty(&t.question)?,
                &vocab.tokenize_nonempty(&t.canonical_solution)?,
                &vocab.tokenize(&synthetic_think(t, style))?,
                TraceSource::Synthetic,
            ))
        })
        .collect()
}

/// The student that scores explanations: a fresh model distilled on
/// synthetic explanations of the whole training split.
pub fn train_reward_student(cfg: &RunConfig, train: &[TaskInstance]) -> Result<(ModelState, Vec<SftMetrics>)> {
    let traces = synthetic_traces(&cfg.vocab(), train, cfg.reward_student_style)?;
    let d = distill(cfg.fresh_model(Role::RewardStudent)?, &traces, &cfg.sft_config(cfg.role_seed(Role::RewardStudent)))?;
    Ok((d.student, d.metrics))
}

/// Teacher warmup on the first `seed_traces` training tasks, starting from
/// `init` (normally the reward student, or a fresh model).
pub fn warm_teacher(cfg: &RunConfig, init: ModelState, train: &[TaskInstance]) -> Result<(ModelState, Vec<SftMetrics>)> {
    let n = cfg.seed_traces.min(train.len());
    let traces = synthetic_traces(&cfg.vocab(), &train[..n], cfg.seed_style)?;
    warmup_teacher(init, &traces, &cfg.warmup_config(cfg.role_seed(Role::Teacher)))
}

/// The model a teacher starts from under this config.
pub fn teacher_init(cfg: &RunConfig, reward_student: &ModelState) -> Result<ModelState> {
    if cfg.teacher_from_student {
        let mut m = reward_student.clone();
        m.step_count = 0;
        Ok(m)
    } else {
        cfg.fresh_model(Role::Teacher)
    }
}

/// Fraction of tasks for which one sampled teacher completion parses and
/// stays within `max_tokens`.
pub fn teacher_parse_rate<F: Real>(
    teacher: &ModelState<F>,
    vocab: &Vocabulary,
    tasks: &[TaskInstance],
    gen: &GenerationConfig,
    max_tokens: usize,
) -> Result<f64> {
    use rayon::prelude::*;
    let ok = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let prompt = render_rlt_prompt(vocab, &t.question, &t.canonical_solution)?;
            let cfg = gen.clone().with_seed(derive_seed(&[gen.rng_seed, i as u64]));
            let out = sample(teacher, &prompt, &cfg, &[END_EXPLANATION])?;
            Ok(out.tokens.len() <= max_tokens && parse_rlt_completion(&prompt, &out.tokens).is_ok())
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(ok.iter().filter(|&&b| b).count() as f64 / tasks.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartSummary {
    pub acc_before: f64,
    pub acc_after_sft: f64,
    pub acc_after_rl: f64,
    pub traces: usize,
}

#[derive(Debug, Clone)]
pub struct ColdStartOutcome<F: Real> {
    pub summary: ColdStartSummary,
    pub sft_metrics: Vec<SftMetrics>,
    pub rl_metrics: Vec<StepMetrics>,
    pub student: ModelState<F>,
}

/// Distills the traces into the student (skipped when there are none, which
/// gives the plain RL baseline), then runs correctness RL. Accuracy on
/// `test` is measured before SFT, after SFT and after RL.
#[allow(clippy::too_many_arguments)]
pub fn coldstart_then_rl<F: Real>(
    student_init: ModelState<F>,
    traces: &[SegmentedTrace],
    sft: &SftConfig,
    vocab: &Vocabulary,
    rl_tasks: &[TaskInstance],
    grpo: &GrpoConfig,
    test: &[TaskInstance],
    eval_gen: &GenerationConfig,
) -> Result<ColdStartOutcome<F>> {
    let acc_before = eval_student(&student_init, vocab, test, eval_gen)?.accuracy;
    let (student, sft_metrics) = if traces.is_empty() {
        (student_init, Vec::new())
    } else {
        let d = distill(student_init, traces, sft)?;
        (d.student, d.metrics)
    };
    let acc_after_sft = if traces.is_empty() {
        acc_before
    } else {
        eval_student(&student, vocab, test, eval_gen)?.accuracy
    };
    let (student, rl_metrics) = train_correctness_rl(student, vocab, rl_tasks, grpo, RunOptions::default())?;
    let acc_after_rl = eval_student(&student, vocab, test, eval_gen)?.accuracy;
    Ok(ColdStartOutcome {
        summary: ColdStartSummary {
            acc_before,
            acc_after_sft,
            acc_after_rl,
            traces: traces.len(),
        },
        sft_metrics,
        rl_metrics,
        student,
    })
}

#[derive(Debug, Clone)]
pub struct TransferOutcome<F: Real> {
    pub traces: Vec<TraceOutcome>,
    pub student: ModelState<F>,
    pub eval: EvalReport,
}

/// Applies a teacher to a task family it was not trained on: explanations
/// for `train`, a distilled student, and its accuracy on `test`.
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_transfer<F: Real>(
    teacher: &ModelState<F>,
    reward_students: &[ModelState<F>],
    student_init: ModelState<F>,
    vocab: &Vocabulary,
    train: &[TaskInstance],
    test: &[TaskInstance],
    k: usize,
    trace_gen: &GenerationConfig,
    reward: &RewardConfig,
    sft: &SftConfig,
    eval_gen: &GenerationConfig,
) -> Result<TransferOutcome<F>> {
    let max_ctx = student_init.config.context_window;
    let traces = generate_traces(teacher, reward_students, vocab, train, k, max_ctx, trace_gen, reward)?;
    let d = distill(student_init, &selected_traces(&traces), sft)?;
    let eval = eval_student(&d.student, vocab, test, eval_gen)?;
    Ok(TransferOutcome {
        traces,
        student: d.student,
        eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub first_step: usize,
    pub steps: usize,
    /// `initial` or `interim`.
    pub reward_student: String,
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome<F: Real> {
    pub teacher: ModelState<F>,
    pub interim_student: Option<ModelState<F>>,
    pub final_student: ModelState<F>,
    pub stages: Vec<StageInfo>,
    pub rl_metrics: Vec<StepMetrics>,
}

/// Teacher RL paused after `first_stage_steps`: a student distilled from the
/// interim teacher's explanations replaces the reward student for the
/// remaining steps. The optimizer, reference and data order carry over, so
/// with an empty stage this is exactly one uninterrupted run. A final
/// student is distilled from the finished teacher.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_training<F: Real>(
    teacher: ModelState<F>,
    reward_student: ModelState<F>,
    student_init: ModelState<F>,
    vocab: &Vocabulary,
    tasks: &[TaskInstance],
    grpo: &GrpoConfig,
    reward: &RewardConfig,
    sft: &SftConfig,
    trace_gen: &GenerationConfig,
    first_stage_steps: usize,
) -> Result<TwoStageOutcome<F>> {
    let prompts = rlt_prompts(vocab, tasks)?;
    let max_ctx = student_init.config.context_window;
    let first = first_stage_steps.min(grpo.steps);
    let second = grpo.steps - first;
    let mut trainer = GrpoTrainer::new(teacher, grpo)?;
    let mut opts = RunOptions::default();
    let initial = [reward_student];
    let mut rl_metrics = trainer.run(first, &prompts, &[END_EXPLANATION], &rlt_scorer(&prompts, &initial, reward), &mut opts)?;
    let mut stages = vec![StageInfo {
        first_step: 0,
        steps: first,
        reward_student: "initial".into(),
    }];
    let mut interim_student = None;
    if second > 0 {
        let scorer_students = if first > 0 {
            let outcomes = generate_traces(&trainer.policy, &initial, vocab, tasks, 1, max_ctx, trace_gen, reward)?;
            let interim = distill(student_init.clone(), &selected_traces(&outcomes), sft)?.student;
            interim_student = Some(interim.clone());
            [interim]
        } else {
            initial.clone()
        };
        rl_metrics.extend(trainer.run(
            second,
            &prompts,
            &[END_EXPLANATION],
            &rlt_scorer(&prompts, &scorer_students, reward),
            &mut opts,
        )?);
        stages.push(StageInfo {
            first_step: first,
            steps: second,
            reward_student: if first > 0 { "interim" } else { "initial" }.into(),
        });
    }
    let scorer = interim_student.clone().unwrap_or_else(|| initial[0].clone());
    let outcomes = generate_traces(&trainer.policy, &[scorer], vocab, tasks, 1, max_ctx, trace_gen, reward)?;
    let final_student = distill(student_init, &selected_traces(&outcomes), sft)?.student;
    Ok(TwoStageOutcome {
        teacher: trainer.policy,
        interim_student,
        final_student,
        stages,
        rl_metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    /// `lambda = 0`: no think-token KL term.
    NoKl,
    /// `alpha = 0`: plain averages, no min/max terms.
    NoMinmax,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Full, AblationMode::NoKl, AblationMode::NoMinmax];

    pub fn apply(self, base: &RewardConfig) -> RewardConfig {
        match self {
            AblationMode::Full => *base,
            AblationMode::NoKl => RewardConfig { lambda: 0.0, ..*base },
            AblationMode::NoMinmax => RewardConfig { alpha: 0.0, ..*base },
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "no_kl" => Ok(AblationMode::NoKl),
            "no_minmax" => Ok(AblationMode::NoMinmax),
            _ => Err(crate::Error::InvalidConfig(format!("unknown ablation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome<F: Real> {
    pub mode: AblationMode,
    pub reward: RewardConfig,
    pub teacher: ModelState<F>,
    pub rl_metrics: Vec<StepMetrics>,
    pub traces: Vec<TraceOutcome>,
    pub stats: TraceStats,
}

/// Teacher RL under the ablated reward, then explanations for `tasks` and
/// their length and solution-copy statistics.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run<F: Real>(
    mode: AblationMode,
    teacher: ModelState<F>,
    reward_students: &[ModelState<F>],
    vocab: &Vocabulary,
    tasks: &[TaskInstance],
    grpo: &GrpoConfig,
    base_reward: &RewardConfig,
    trace_gen: &GenerationConfig,
    max_ctx: usize,
) -> Result<AblationOutcome<F>> {
    let reward = mode.apply(base_reward);
    let (teacher, rl_metrics) = train_rlt_teacher(teacher, reward_students, vocab, tasks, grpo, &reward, RunOptions::default())?;
    let traces = generate_traces(&teacher, reward_students, vocab, tasks, 1, max_ctx, trace_gen, &reward)?;
    let stats = trace_stats(&selected_traces(&traces));
    Ok(AblationOutcome {
        mode,
        reward,
        teacher,
        rl_metrics,
        traces,
        stats,
    })
}
