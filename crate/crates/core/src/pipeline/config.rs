use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::Vocabulary;
use crate::lm::{GenerationConfig, ModelConfig, TokenReduction};
use crate::reward::RewardConfig;
use crate::rl::{Estimator, GrpoConfig};
use crate::sft::{LrDecay, SftConfig};
use crate::tasks::{
    gen_arith_chain, gen_countdown, split_corpus, ArithChainSpec, CountdownSpec, Glyphs, TaskFamily,
    TaskInstance, ThinkStyle,
};

/// Every knob of a run as one flat key/value document (TOML on disk).
/// Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub family: TaskFamily,
    pub train_count: usize,
    pub test_count: usize,
    pub arith_min_steps: usize,
    pub arith_max_steps: usize,
    pub arith_modulus: i64,
    pub countdown_min_value: i64,
    pub countdown_max_value: i64,
    pub countdown_max_target: i64,
    pub countdown_glyphs: Glyphs,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_window: usize,

    /// Start the teacher from the reward student's weights instead of a
    /// fresh initialization.
    pub teacher_from_student: bool,
    /// Synthetic explanations used for teacher warmup.
    pub seed_traces: usize,
    pub seed_style: ThinkStyle,
    /// Explanation style of the reward student's training traces.
    pub reward_student_style: ThinkStyle,

    pub sft_epochs: f64,
    pub sft_batch_size: usize,
    pub sft_lr: f64,
    pub sft_final_lr: f64,
    pub sft_lr_decay: LrDecay,
    pub sft_warmup_ratio: f64,
    pub sft_weight_decay: f64,
    pub sft_beta2: f64,
    pub warmup_epochs: f64,
    pub warmup_lr: f64,

    pub rl_group_size: usize,
    pub rl_batch_prompts: usize,
    pub rl_steps: usize,
    pub rl_beta: f64,
    pub rl_lr: f64,
    pub rl_ref_sync_every: usize,
    pub rl_ref_sync_mixup: f64,
    pub rl_temperature: f64,
    pub rl_top_p: f64,
    pub rl_max_new_tokens: usize,
    pub rl_estimator: Estimator,
    pub rl_reduction: TokenReduction,

    pub reward_lambda: f64,
    pub reward_alpha: f64,
    pub reward_format_penalty: f64,

    pub traces_k: usize,
    pub traces_temperature: f64,
    pub rank_k: usize,

    pub crl_group_size: usize,
    pub crl_batch_prompts: usize,
    pub crl_steps: usize,
    pub crl_beta: f64,
    pub crl_lr: f64,
    pub crl_temperature: f64,

    pub eval_max_new_tokens: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sft = SftConfig::desk();
        let rl = GrpoConfig::desk();
        let reward = RewardConfig::default();
        Self {
            seed: 0,
            family: TaskFamily::ArithChain,
            train_count: 2000,
            test_count: 500,
            arith_min_steps: 2,
            arith_max_steps: 3,
            arith_modulus: 10,
            countdown_min_value: 1,
            countdown_max_value: 9,
            countdown_max_target: 99,
            countdown_glyphs: Glyphs::Standard,
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            d_ff: 192,
            context_window: 64,
            teacher_from_student: true,
            seed_traces: 200,
            seed_style: ThinkStyle::Steps,
            reward_student_style: ThinkStyle::Steps,
            // Longer runs make the reward student so confident that the
            // think-token KL swamps the solution score.
            sft_epochs: 6.0,
            sft_batch_size: sft.batch_size,
            sft_lr: sft.lr,
            sft_final_lr: sft.final_lr,
            sft_lr_decay: sft.lr_decay,
            sft_warmup_ratio: sft.warmup_ratio,
            sft_weight_decay: sft.weight_decay,
            sft_beta2: sft.beta2,
            warmup_epochs: SftConfig::desk_warmup().epochs,
            warmup_lr: sft.lr,
            rl_group_size: rl.group_size,
            rl_batch_prompts: rl.batch_prompts,
            rl_steps: rl.steps,
            rl_beta: rl.beta,
            rl_lr: rl.lr,
            rl_ref_sync_every: rl.ref_sync_every,
            rl_ref_sync_mixup: rl.ref_sync_mixup,
            rl_temperature: rl.temperature,
            rl_top_p: rl.top_p,
            rl_max_new_tokens: rl.max_new_tokens,
            rl_estimator: rl.estimator,
            rl_reduction: rl.reduction,
            reward_lambda: reward.lambda,
            reward_alpha: reward.alpha,
            reward_format_penalty: reward.format_penalty,
            traces_k: 1,
            traces_temperature: 0.7,
            rank_k: 8,
            crl_group_size: 8,
            crl_batch_prompts: 16,
            crl_steps: 100,
            crl_beta: 0.04,
            crl_lr: 3e-4,
            crl_temperature: 1.0,
            eval_max_new_tokens: 48,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        crate::pipeline::sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(0)?.validate()?;
        self.sft_config(0).validate()?;
        self.warmup_config(0).validate()?;
        self.grpo_config().validate()?;
        self.correctness_rl_config().validate()?;
        self.reward_config().validate()?;
        if self.traces_k == 0 || self.rank_k < 2 {
            return Err(Error::InvalidConfig("traces_k must be >= 1 and rank_k >= 2".into()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::standard()
    }

    pub fn model_config(&self, seed: u64) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size: self.vocab().size(),
            context_window: self.context_window,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sft_config(&self, seed: u64) -> SftConfig {
        SftConfig {
            epochs: self.sft_epochs,
            batch_size: self.sft_batch_size,
            lr: self.sft_lr,
            lr_decay: self.sft_lr_decay,
            final_lr: self.sft_final_lr,
            warmup_ratio: self.sft_warmup_ratio,
            weight_decay: self.sft_weight_decay,
            beta2: self.sft_beta2,
            seed,
            ..SftConfig::desk()
        }
    }

    pub fn warmup_config(&self, seed: u64) -> SftConfig {
        SftConfig {
            epochs: self.warmup_epochs,
            lr: self.warmup_lr,
            final_lr: self.sft_final_lr.min(self.warmup_lr),
            ..self.sft_config(seed)
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.rl_group_size,
            beta: self.rl_beta,
            batch_prompts: self.rl_batch_prompts,
            steps: self.rl_steps,
            ref_sync_every: self.rl_ref_sync_every,
            ref_sync_mixup: self.rl_ref_sync_mixup,
            estimator: self.rl_estimator,
            reduction: self.rl_reduction,
            lr: self.rl_lr,
            temperature: self.rl_temperature,
            top_p: self.rl_top_p,
            max_new_tokens: self.rl_max_new_tokens,
            seed: self.seed,
            ..GrpoConfig::desk()
        }
    }

    pub fn correctness_rl_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.crl_group_size,
            batch_prompts: self.crl_batch_prompts,
            steps: self.crl_steps,
            beta: self.crl_beta,
            lr: self.crl_lr,
            temperature: self.crl_temperature,
            max_new_tokens: self.eval_max_new_tokens,
            ..self.grpo_config()
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            lambda: self.reward_lambda,
            alpha: self.reward_alpha,
            format_penalty: self.reward_format_penalty,
            max_completion_tokens: self.rl_max_new_tokens,
        }
    }

    pub fn trace_generation(&self) -> GenerationConfig {
        GenerationConfig::sampled(self.traces_temperature, self.rl_top_p, self.rl_max_new_tokens, self.seed)
    }

    pub fn eval_generation(&self) -> GenerationConfig {
        GenerationConfig::greedy(self.eval_max_new_tokens)
    }

    /// The seeded train/test corpus of the configured family.
    pub fn corpus(&self) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
        self.corpus_for(self.family)
    }

    pub fn corpus_for(&self, family: TaskFamily) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
        let count = self.train_count + self.test_count;
        let tasks = match family {
            TaskFamily::ArithChain => gen_arith_chain(&ArithChainSpec {
                count,
                min_steps: self.arith_min_steps,
                max_steps: self.arith_max_steps,
                modulus: self.arith_modulus,
                seed: self.seed,
            })?,
            TaskFamily::Countdown3 | TaskFamily::Countdown4 => gen_countdown(&CountdownSpec {
                numbers: if family == TaskFamily::Countdown3 { 3 } else { 4 },
                count,
                min_value: self.countdown_min_value,
                max_value: self.countdown_max_value,
                max_target: self.countdown_max_target,
                glyphs: self.countdown_glyphs,
                seed: self.seed,
            })?,
        };
        let fraction = self.test_count as f64 / count.max(1) as f64;
        Ok(split_corpus(&tasks, fraction, self.seed))
    }
}
