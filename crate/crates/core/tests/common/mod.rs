#![allow(dead_code)]

use rlt_core::lm::{ModelConfig, ModelState, Real};
use rlt_core::pipeline::RunConfig;

/// Deterministic xorshift stream in [-0.5, 0.5).
pub struct Noise(u64);

impl Noise {
    pub fn new(seed: u64) -> Self {
        Noise(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next(&mut self) -> f64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        (self.0 >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next() + 0.5) * n as f64) as usize % n
    }
}

/// A model whose parameters are all randomized, so its distributions are
/// far from uniform.
pub fn perturbed<F: Real>(cfg: ModelConfig, scale: f64) -> ModelState<F> {
    let mut m = ModelState::<F>::new(cfg).unwrap();
    let mut noise = Noise::new(cfg.seed);
    for (name, t) in m.params.iter_mut() {
        for v in t.data.iter_mut() {
            let base = if name.ends_with(".gain") { 1.0 } else { 0.0 };
            *v = F::from_f64_lossy(base + noise.next() * 2.0 * scale);
        }
    }
    m
}

pub fn model_config(vocab_size: usize, context_window: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        context_window,
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        seed,
    }
}

/// Small arith_chain run that trains in seconds.
pub fn small_run() -> RunConfig {
    RunConfig {
        train_count: 600,
        test_count: 100,
        d_model: 32,
        d_ff: 128,
        sft_epochs: 6.0,
        rl_steps: 20,
        crl_steps: 20,
        ..RunConfig::default()
    }
}
