//! Group-relative policy optimization for both reward regimes, with GRPO and
//! leave-one-out advantages and a periodically mixed reference model.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{
    render_rlt_prompt, render_student_prompt, Vocabulary, END_EXPLANATION, END_SOLUTION,
};
use crate::lm::{
    policy_gradient_step, sample, save_model, AdamWConfig, FinishReason, GenerationConfig,
    ModelState, OptimizerState, Real, Rollout, TokenId, TokenReduction, TokenSeq,
};
use crate::reward::{compute_rlt_reward, correctness_reward, RewardBreakdown, RewardConfig, CORRECT};
use crate::tasks::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Grpo,
    Rloo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub batch_prompts: usize,
    pub steps: usize,
    pub ref_sync_every: usize,
    /// Weight kept by the reference at each sync.
    pub ref_sync_mixup: f64,
    pub advantage_eps: f64,
    pub estimator: Estimator,
    pub reduction: TokenReduction,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl GrpoConfig {
    /// Hyperparameters of the large-scale runs.
    pub fn paper() -> Self {
        Self {
            group_size: 64,
            beta: 0.04,
            batch_prompts: 1024 / 64,
            steps: 125,
            ref_sync_every: 32,
            ref_sync_mixup: 0.9,
            advantage_eps: 1e-8,
            estimator: Estimator::Grpo,
            reduction: TokenReduction::Mean,
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            temperature: 0.7,
            top_p: 1.0,
            max_new_tokens: 16384,
            seed: 0,
        }
    }

    /// Scaled-down defaults for small models on one machine.
    pub fn desk() -> Self {
        Self {
            group_size: 8,
            batch_prompts: 16,
            steps: 200,
            lr: 3e-4,
            temperature: 1.0,
            max_new_tokens: 48,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{m}: {self:?}")));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.batch_prompts == 0 || self.ref_sync_every == 0 {
            return bad("batch_prompts and ref_sync_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.ref_sync_mixup) || !(self.beta >= 0.0) || !(self.lr > 0.0) {
            return bad("mixup must lie in [0, 1], beta >= 0, lr > 0");
        }
        self.generation(0).validate()
    }

    pub fn generation(&self, seed: u64) -> GenerationConfig {
        GenerationConfig::sampled(self.temperature, self.top_p, self.max_new_tokens, seed)
    }

    fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Mixes a list of integers into one seed (SplitMix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn check_group(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    Ok(())
}

/// `(r_i - mean) / std` with the population standard deviation. Everything
/// is computed from pairwise differences, so shifting all rewards by a
/// constant that keeps them exact leaves the output bitwise unchanged.
/// Groups whose deviation is below `eps` get all-zero advantages.
pub fn normalize_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_group(rewards)?;
    let g = rewards.len() as f64;
    let mut centered = vec![0.0; rewards.len()];
    let mut sq = 0.0;
    for (i, &ri) in rewards.iter().enumerate() {
        for &rj in rewards {
            let d = ri - rj;
            centered[i] += d;
            sq += d * d;
        }
    }
    let std = (sq / (2.0 * g * g)).sqrt();
    if !(std >= eps) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(centered.into_iter().map(|c| c / g / std).collect())
}

/// Leave-one-out advantages `r_i - mean_{j != i} r_j`.
pub fn rloo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    check_group(rewards)?;
    let k = (rewards.len() - 1) as f64;
    Ok(rewards
        .iter()
        .map(|&ri| rewards.iter().map(|&rj| ri - rj).sum::<f64>() / k)
        .collect())
}

pub fn advantages(rewards: &[f64], estimator: Estimator, eps: f64) -> Result<Vec<f64>> {
    match estimator {
        Estimator::Grpo => normalize_advantages(rewards, eps),
        Estimator::Rloo => rloo_advantages(rewards),
    }
}

/// `ref ← mixup·ref + (1 − mixup)·policy`, elementwise.
pub fn sync_reference<F: Real>(reference: &mut ModelState<F>, policy: &ModelState<F>, mixup: f64) -> Result<()> {
    if reference.config.with_seed(0) != policy.config.with_seed(0) {
        return Err(Error::ConfigMismatch("reference and policy shapes differ".into()));
    }
    reference.params.check_same_layout(&policy.params)?;
    let keep = 1.0 - mixup;
    for ((_, r), (_, p)) in reference.params.iter_mut().zip(policy.params.iter()) {
        for (x, &y) in r.data.iter_mut().zip(&p.data) {
            *x = if mixup == 1.0 {
                *x
            } else if mixup == 0.0 {
                y
            } else {
                F::from_f64_lossy(mixup * x.as_f64() + keep * y.as_f64())
            };
        }
    }
    Ok(())
}

/// How one completion was scored.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scored {
    pub reward: f64,
    pub breakdown: Option<RewardBreakdown>,
    /// Correctness regime: whether the checker accepted the answer.
    pub correct: Option<bool>,
}

impl Scored {
    fn format_failed(&self) -> bool {
        match (&self.breakdown, self.correct) {
            (Some(b), _) => !b.format_ok,
            (None, Some(_)) => self.reward < crate::reward::WRONG,
            (None, None) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub prompt: TokenSeq,
    pub completions: Vec<TokenSeq>,
    pub finish: Vec<FinishReason>,
    pub rewards: Vec<f64>,
    pub scored: Vec<Scored>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }

    pub fn rollouts(&self) -> impl Iterator<Item = Rollout> + '_ {
        self.completions.iter().zip(&self.advantages).map(|(c, &a)| {
            let mut tokens = self.prompt.clone();
            tokens.extend_from_slice(c);
            Rollout {
                tokens,
                gen_start: self.prompt.len(),
                advantage: a,
            }
        })
    }
}

/// A prompt to sample from, with an identifier used in logs.
#[derive(Debug, Clone, PartialEq)]
pub struct RlPrompt {
    pub id: String,
    pub tokens: TokenSeq,
}

/// Scores one completion of prompt `index` under the policy snapshot that
/// generated it.
pub trait ScoreFn<F: Real>: Sync {
    fn score(&self, policy: &ModelState<F>, index: usize, completion: &[TokenId], finish: FinishReason) -> Result<Scored>;
}

impl<F: Real, T> ScoreFn<F> for T
where
    T: Fn(&ModelState<F>, usize, &[TokenId], FinishReason) -> Result<Scored> + Sync,
{
    fn score(&self, policy: &ModelState<F>, index: usize, completion: &[TokenId], finish: FinishReason) -> Result<Scored> {
        self(policy, index, completion, finish)
    }
}

type Sampled = (TokenSeq, FinishReason);

/// Samples `group_size` completions for each listed prompt and scores them.
/// Completion `g` of prompt `i` uses the seed `seeds(i, g)`.
#[allow(clippy::too_many_arguments)]
fn collect_groups<F: Real>(
    policy: &ModelState<F>,
    prompts: &[RlPrompt],
    indices: &[usize],
    cfg: &GrpoConfig,
    stop: &[TokenId],
    score: &dyn ScoreFn<F>,
    seeds: &(dyn Fn(usize, usize) -> u64 + Sync),
) -> Result<Vec<RolloutGroup>> {
    let g = cfg.group_size;
    let jobs: Vec<(usize, usize)> = indices.iter().flat_map(|&i| (0..g).map(move |k| (i, k))).collect();
    let results: Vec<Result<(Sampled, Scored)>> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let gen = sample(policy, &prompts[i].tokens, &cfg.generation(seeds(i, k)), stop)?;
            let s = score.score(policy, i, &gen.tokens, gen.finish)?;
            Ok(((gen.tokens, gen.finish), s))
        })
        .collect();
    let mut results = results.into_iter();
    let mut groups = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut completions = Vec::with_capacity(g);
        let mut finish = Vec::with_capacity(g);
        let mut scored = Vec::with_capacity(g);
        for _ in 0..g {
            let ((c, f), s) = results.next().expect("one result per job")?;
            completions.push(c);
            finish.push(f);
            scored.push(s);
        }
        let rewards: Vec<f64> = scored.iter().map(|s| s.reward).collect();
        let advantages = advantages(&rewards, cfg.estimator, cfg.advantage_eps)?;
        groups.push(RolloutGroup {
            prompt_id: prompts[i].id.clone(),
            prompt: prompts[i].tokens.clone(),
            completions,
            finish,
            rewards,
            scored,
            advantages,
        });
    }
    Ok(groups)
}


/// Samples one group of completions for `prompt` from the current policy,
/// scores each and attaches advantages. Completion `g` uses
/// `derive_seed(&[seed, g])`.
pub fn collect_group<F: Real>(
    policy: &ModelState<F>,
    prompt: &RlPrompt,
    cfg: &GrpoConfig,
    stop: &[TokenId],
    seed: u64,
    score: &dyn ScoreFn<F>,
) -> Result<RolloutGroup> {
    cfg.validate()?;
    let seeds = move |_: usize, g: usize| derive_seed(&[seed, g as u64]);
    let mut groups = collect_groups(policy, std::slice::from_ref(prompt), &[0], cfg, stop, score, &seeds)?;
    Ok(groups.remove(0))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub mean_reward: f64,
    pub mean_r_ss: Option<f64>,
    pub mean_r_kl: Option<f64>,
    pub format_failure_rate: f64,
    pub mean_completion_len: f64,
    pub mean_think_len: Option<f64>,
    pub pass_rate: Option<f64>,
    pub degenerate_groups: f64,
    pub kl_to_ref: f64,
    pub grad_norm: f64,
    pub loss: f64,
    pub ref_synced: bool,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn summarize(groups: &[RolloutGroup]) -> StepMetrics {
    let scored = || groups.iter().flat_map(|g| &g.scored);
    let breakdowns = || scored().filter_map(|s| s.breakdown.as_ref()).filter(|b| b.format_ok);
    let n = scored().count().max(1) as f64;
    StepMetrics {
        mean_reward: mean_of(scored().map(|s| s.reward)).unwrap_or(0.0),
        mean_r_ss: mean_of(breakdowns().filter_map(|b| b.r_ss)),
        mean_r_kl: mean_of(breakdowns().filter_map(|b| b.r_kl)),
        format_failure_rate: scored().filter(|s| s.format_failed()).count() as f64 / n,
        mean_completion_len: mean_of(groups.iter().flat_map(|g| g.completions.iter().map(|c| c.len() as f64)))
            .unwrap_or(0.0),
        mean_think_len: mean_of(breakdowns().map(|b| b.think_len as f64)),
        pass_rate: mean_of(scored().filter_map(|s| s.correct.map(|c| f64::from(u8::from(c))))),
        degenerate_groups: groups.iter().filter(|g| g.is_degenerate()).count() as f64 / groups.len().max(1) as f64,
        ..Default::default()
    }
}

/// Side channels of a training run.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Where to write the last good policy when training aborts.
    pub abort_checkpoint: Option<PathBuf>,
    /// Called after every step.
    pub on_step: Option<&'a mut dyn FnMut(&StepMetrics)>,
}

/// State of a GRPO run that can be advanced in segments, e.g. with a
/// different reward between segments. Each step draws `batch_prompts`
/// prompts (a seeded shuffle per pass over the data), samples a group per
/// prompt from the current policy, scores it, and applies one AdamW update.
/// The reference starts as a copy of the policy and is mixed toward it
/// every `ref_sync_every` steps.
#[derive(Debug, Clone)]
pub struct GrpoTrainer<F: Real> {
    pub policy: ModelState<F>,
    pub reference: ModelState<F>,
    pub opt: OptimizerState<F>,
    pub cfg: GrpoConfig,
    /// Steps taken so far.
    pub step: usize,
    order: Vec<usize>,
    cursor: usize,
    pass: u64,
}

impl<F: Real> GrpoTrainer<F> {
    pub fn new(policy: ModelState<F>, cfg: &GrpoConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            reference: policy.clone(),
            opt: OptimizerState::new(&policy.params, cfg.adam()),
            policy,
            cfg: cfg.clone(),
            step: 0,
            order: Vec::new(),
            cursor: 0,
            pass: 0,
        })
    }

    fn next_batch(&mut self, n_prompts: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_prompts);
        while batch.len() < self.cfg.batch_prompts.min(n_prompts) {
            if self.cursor >= self.order.len() {
                self.order = (0..n_prompts).collect();
                let seed = derive_seed(&[self.cfg.seed, 0xDA7A, self.pass]);
                self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                self.pass += 1;
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One collection-and-update step.
    pub fn train_step(&mut self, prompts: &[RlPrompt], stop: &[TokenId], score: &dyn ScoreFn<F>) -> Result<StepMetrics> {
        if prompts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let step = self.step;
        let batch = self.next_batch(prompts.len());
        let seed = self.cfg.seed;
        let seeds = |i: usize, g: usize| derive_seed(&[seed, step as u64, i as u64, g as u64]);
        let groups = collect_groups(&self.policy, prompts, &batch, &self.cfg, stop, score, &seeds)?;
        let rollouts: Vec<Rollout> = groups.iter().flat_map(|g| g.rollouts()).collect();
        let diag = policy_gradient_step(
            &mut self.policy,
            &rollouts,
            &self.reference,
            self.cfg.beta,
            self.cfg.reduction,
            &mut self.opt,
        )?;
        self.step += 1;
        let ref_synced = self.step % self.cfg.ref_sync_every == 0;
        if ref_synced {
            sync_reference(&mut self.reference, &self.policy, self.cfg.ref_sync_mixup)?;
        }
        Ok(StepMetrics {
            step,
            lr: self.cfg.lr,
            kl_to_ref: diag.mean_kl_to_ref,
            grad_norm: diag.grad_norm,
            loss: diag.loss,
            ref_synced,
            ..summarize(&groups)
        })
    }

    /// Runs `steps` steps. On failure the policy (unchanged by the failed
    /// step) is written to `opts.abort_checkpoint` before the error is
    /// returned.
    pub fn run(
        &mut self,
        steps: usize,
        prompts: &[RlPrompt],
        stop: &[TokenId],
        score: &dyn ScoreFn<F>,
        opts: &mut RunOptions<'_>,
    ) -> Result<Vec<StepMetrics>> {
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let m = match self.train_step(prompts, stop, score) {
                Ok(m) => m,
                Err(e) => {
                    if let Some(path) = &opts.abort_checkpoint {
                        save_model(&self.policy, path)?;
                    }
                    return Err(e);
                }
            };
            if let Some(f) = opts.on_step.as_mut() {
                f(&m);
            }
            log.push(m);
        }
        Ok(log)
    }
}

/// Runs `cfg.steps` GRPO steps from a fresh trainer.
pub fn train_grpo<F: Real>(
    policy: ModelState<F>,
    prompts: &[RlPrompt],
    cfg: &GrpoConfig,
    stop: &[TokenId],
    score: &dyn ScoreFn<F>,
    mut opts: RunOptions<'_>,
) -> Result<(ModelState<F>, Vec<StepMetrics>)> {
    let mut trainer = GrpoTrainer::new(policy, cfg)?;
    if cfg.steps > 0 && prompts.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let log = trainer.run(cfg.steps, prompts, stop, score, &mut opts)?;
    Ok((trainer.policy, log))
}

/// Dense-reward scorer for teaching prompts.
pub fn rlt_scorer<'a, F: Real>(
    prompts: &'a [RlPrompt],
    students: &'a [ModelState<F>],
    reward: &'a RewardConfig,
) -> impl Fn(&ModelState<F>, usize, &[TokenId], FinishReason) -> Result<Scored> + Sync + 'a {
    move |policy, i, completion, _| {
        let breakdown = compute_rlt_reward(policy, students, &prompts[i].tokens, completion, reward)?;
        Ok(Scored {
            reward: breakdown.total,
            breakdown: Some(breakdown),
            correct: None,
        })
    }
}

/// Correctness scorer for reasoning-format prompts built from `tasks`.
pub fn correctness_scorer<'a, F: Real>(
    vocab: &'a Vocabulary,
    tasks: &'a [TaskInstance],
) -> impl Fn(&ModelState<F>, usize, &[TokenId], FinishReason) -> Result<Scored> + Sync + 'a {
    move |_, i, completion, _| {
        let reward = correctness_reward(vocab, completion, |a| tasks[i].check(a));
        Ok(Scored {
            reward,
            breakdown: None,
            correct: Some(reward == CORRECT),
        })
    }
}

/// Teaching prompts for a task list.
pub fn rlt_prompts(vocab: &Vocabulary, tasks: &[TaskInstance]) -> Result<Vec<RlPrompt>> {
    tasks
        .iter()
        .map(|t| {
            Ok(RlPrompt {
                id: t.id.clone(),
                tokens: render_rlt_prompt(vocab, &t.question, &t.canonical_solution)?,
            })
        })
        .collect()
}

/// Reasoning-format prompts for a task list.
pub fn student_prompts(vocab: &Vocabulary, tasks: &[TaskInstance]) -> Result<Vec<RlPrompt>> {
    tasks
        .iter()
        .map(|t| {
            Ok(RlPrompt {
                id: t.id.clone(),
                tokens: render_student_prompt(vocab, &t.question)?,
            })
        })
        .collect()
}

/// Trains a teacher on teaching prompts with the dense reward computed
/// against frozen student(s).
pub fn train_rlt_teacher<F: Real>(
    teacher: ModelState<F>,
    students: &[ModelState<F>],
    vocab: &Vocabulary,
    tasks: &[TaskInstance],
    cfg: &GrpoConfig,
    reward: &RewardConfig,
    opts: RunOptions<'_>,
) -> Result<(ModelState<F>, Vec<StepMetrics>)> {
    reward.validate()?;
    let prompts = rlt_prompts(vocab, tasks)?;
    let score = rlt_scorer(&prompts, students, reward);
    train_grpo(teacher, &prompts, cfg, &[END_EXPLANATION], &score, opts)
}

/// Correctness-reward RL in the reasoning format.
pub fn train_correctness_rl<F: Real>(
    policy: ModelState<F>,
    vocab: &Vocabulary,
    tasks: &[TaskInstance],
    cfg: &GrpoConfig,
    opts: RunOptions<'_>,
) -> Result<(ModelState<F>, Vec<StepMetrics>)> {
    let prompts = student_prompts(vocab, tasks)?;
    let score = correctness_scorer(vocab, tasks);
    train_grpo(policy, &prompts, cfg, &[END_SOLUTION], &score, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(normalize_advantages(&[0.5, 0.5, 0.5], 1e-8).unwrap(), vec![0.0; 3]);
        assert_eq!(normalize_advantages(&[1.0, -1.0], 1e-8).unwrap(), vec![1.0, -1.0]);
        assert_eq!(rloo_advantages(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, -0.5, -0.5]);
        assert!(matches!(normalize_advantages(&[1.0], 1e-8), Err(Error::GroupTooSmall(1))));
        assert!(matches!(rloo_advantages(&[]), Err(Error::GroupTooSmall(0))));
    }

    #[test]
    fn derive_seed_separates_parts() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
        assert_eq!(derive_seed(&[7, 8, 9]), derive_seed(&[7, 8, 9]));
    }
}
