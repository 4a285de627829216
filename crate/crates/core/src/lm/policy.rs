//! Advantage-weighted policy gradient with an exact KL anchor to a frozen
//! reference model.
//!
//! For rollouts `o_1..o_G` with advantages `A_i` the minimized loss is
//!
//! ```text
//! L = -(1/G) Σ_i w_i Σ_t [ A_i · log π(o_i,t | ·) - β · KL(π(·|prefix_t) ‖ π_ref(·|prefix_t)) ]
//! ```
//!
//! over generated positions only, where `w_i` is 1 for [`TokenReduction::Sum`]
//! and `1/|o_i|` for [`TokenReduction::Mean`]. The KL is summed over the whole
//! vocabulary at every position.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::ModelState;
use super::optim::{adamw_step, OptimizerState};
use super::params::Params;
use super::real::Real;
use super::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Prompt followed by the sampled completion.
    pub tokens: Vec<TokenId>,
    /// Index of the first generated token in `tokens`.
    pub gen_start: usize,
    pub advantage: f64,
}

impl Rollout {
    pub fn generated_len(&self) -> usize {
        self.tokens.len().saturating_sub(self.gen_start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenReduction {
    Sum,
    /// Per-token terms averaged within each completion.
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolicyDiagnostics {
    pub loss: f64,
    /// Per-token KL(π ‖ π_ref) averaged over the scored positions.
    pub mean_kl_to_ref: f64,
    pub mean_advantage: f64,
    pub grad_norm: f64,
    /// Generated positions that entered the loss. With `beta == 0`,
    /// rollouts with zero advantage are skipped.
    pub generated_tokens: usize,
}

/// Gradient of the policy loss without touching the model.
pub fn policy_gradient<F: Real>(
    model: &ModelState<F>,
    rollouts: &[Rollout],
    reference: &ModelState<F>,
    beta: f64,
    reduction: TokenReduction,
) -> Result<(Params<F>, PolicyDiagnostics)> {
    if model.config != reference.config.with_seed(model.config.seed) {
        return Err(Error::ConfigMismatch(
            "policy and reference shapes differ".into(),
        ));
    }
    let g = rollouts.len().max(1) as f64;
    let v = model.config.vocab_size;
    type Part<F> = (Params<F>, f64, f64, usize);
    let parts: Vec<Result<Part<F>>> = rollouts
        .par_iter()
        .map(|r| -> Result<Part<F>> {
            let mut grads = Params::zeros_like(&model.params);
            let n_gen = r.generated_len();
            if n_gen == 0 || r.gen_start == 0 {
                return Ok((grads, 0.0, 0.0, 0));
            }
            if beta == 0.0 && r.advantage == 0.0 {
                // Contributes nothing to the loss or the gradient.
                return Ok((grads, 0.0, 0.0, 0));
            }
            // The last token is never an input.
            let input = &r.tokens[..r.tokens.len() - 1];
            let cache = model.forward_train(input)?;
            let ref_table = reference.forward(input)?;
            let w = match reduction {
                TokenReduction::Sum => 1.0,
                TokenReduction::Mean => 1.0 / n_gen as f64,
            };
            let scale = w / g;
            let mut dlogits = vec![F::zero(); input.len() * v];
            let mut loss = 0.0;
            let mut kl_sum = 0.0;
            let mut pi = vec![0.0f64; v];
            for pos in (r.gen_start - 1)..input.len() {
                let tgt = r.tokens[pos + 1] as usize;
                let lp = cache.log_probs.row(pos);
                let lr = ref_table.row(pos);
                let mut kl = 0.0;
                for j in 0..v {
                    let l = lp[j].as_f64();
                    pi[j] = l.exp();
                    kl += pi[j] * (l - lr[j].as_f64());
                }
                kl_sum += kl;
                loss -= scale * (r.advantage * lp[tgt].as_f64() - beta * kl);
                let drow = &mut dlogits[pos * v..(pos + 1) * v];
                for j in 0..v {
                    let onehot = if j == tgt { 1.0 } else { 0.0 };
                    let d_logp = onehot - pi[j];
                    let d_kl = pi[j] * (lp[j].as_f64() - lr[j].as_f64() - kl);
                    drow[j] = F::from_f64_lossy(-scale * (r.advantage * d_logp - beta * d_kl));
                }
            }
            model.backward_into(&cache, &dlogits, &mut grads);
            Ok((grads, loss, kl_sum, n_gen))
        })
        .collect();

    let mut grads = Params::zeros_like(&model.params);
    let mut diag = PolicyDiagnostics::default();
    let mut kl_total = 0.0;
    for p in parts {
        let (gr, loss, kl, n) = p?;
        grads.add_assign(&gr)?;
        diag.loss += loss;
        kl_total += kl;
        diag.generated_tokens += n;
    }
    if diag.generated_tokens > 0 {
        diag.mean_kl_to_ref = kl_total / diag.generated_tokens as f64;
    }
    if !rollouts.is_empty() {
        diag.mean_advantage = rollouts.iter().map(|r| r.advantage).sum::<f64>() / g;
    }
    diag.grad_norm = grads.global_norm();
    Ok((grads, diag))
}

/// Computes the policy gradient and applies one AdamW update. On a
/// non-finite gradient the model and optimizer are left untouched.
pub fn policy_gradient_step<F: Real>(
    model: &mut ModelState<F>,
    rollouts: &[Rollout],
    reference: &ModelState<F>,
    beta: f64,
    reduction: TokenReduction,
    opt: &mut OptimizerState<F>,
) -> Result<PolicyDiagnostics> {
    let (grads, diag) = policy_gradient(model, rollouts, reference, beta, reduction)?;
    if !diag.grad_norm.is_finite() || !grads.all_finite() {
        return Err(Error::NumericalFailure("policy gradient".into()));
    }
    adamw_step(opt, &mut model.params, &grads)?;
    model.step_count += 1;
    Ok(diag)
}
