//! Small decoder-only language model: forward pass, per-token
//! log-probabilities, sampling, losses, analytic gradients and AdamW.

mod checkpoint;
mod config;
pub mod kernels;
mod loss;
mod model;
mod optim;
mod params;
mod policy;
mod real;
mod sample;

pub use checkpoint::{decode_model, encode_model, load_model, load_model_for_vocab, save_model, MAGIC, VERSION};
pub use config::{GenerationConfig, ModelConfig};
pub use loss::{cross_entropy_and_grads, token_log_probs, LmExample};
pub use model::{ForwardCache, LogProbTable, ModelState};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimizerState};
pub use params::{Layout, Params, Tensor};
pub use policy::{policy_gradient, policy_gradient_step, PolicyDiagnostics, Rollout, TokenReduction};
pub use real::Real;
pub use sample::{argmax, draw_token, sample, Decoder, FinishReason, Generation};

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

/// Exact `KL(p ‖ q)` between two log-distributions, accumulated in f64.
pub fn kl_divergence<F: Real>(log_p: &[F], log_q: &[F]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| {
            let lp = lp.as_f64();
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq.as_f64())
            }
        })
        .sum()
}
