use rayon::prelude::*;

use super::model::ModelState;
use super::params::Params;
use super::real::Real;
use super::TokenId;
use crate::error::{Error, Result};

/// One teacher-forced training sequence: `target[i]` is the token that
/// should follow `input[..=i]`, and only positions with `mask[i]` count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmExample {
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl LmExample {
    /// Builds an example from a prompt and a continuation; only the
    /// continuation is scored.
    pub fn prompt_completion(prompt: &[TokenId], completion: &[TokenId]) -> Self {
        let seq: Vec<TokenId> = prompt.iter().chain(completion).copied().collect();
        let n = seq.len().saturating_sub(1);
        let input = seq[..n].to_vec();
        let target = seq[1..].to_vec();
        let mask = (0..n).map(|i| i + 1 >= prompt.len()).collect();
        Self {
            input,
            target,
            mask,
        }
    }

    pub fn scored_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `log P(targets[k] | context ++ targets[..k])` for every k.
pub fn token_log_probs<F: Real>(
    model: &ModelState<F>,
    context: &[TokenId],
    targets: &[TokenId],
) -> Result<Vec<F>> {
    if context.is_empty() || targets.is_empty() {
        return Err(Error::ShapeError(
            "token_log_probs needs a non-empty context and targets".into(),
        ));
    }
    model.check_fits(context.len() + targets.len())?;
    let seq: Vec<TokenId> = context
        .iter()
        .chain(&targets[..targets.len() - 1])
        .copied()
        .collect();
    let table = model.forward(&seq)?;
    let base = context.len() - 1;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(k, &tok)| table.row(base + k)[tok as usize])
        .collect())
}

/// Mean masked negative log-likelihood over the batch and its gradient.
pub fn cross_entropy_and_grads<F: Real>(
    model: &ModelState<F>,
    batch: &[LmExample],
) -> Result<(f64, Params<F>)> {
    let total: usize = batch.iter().map(LmExample::scored_positions).sum();
    if total == 0 {
        return Err(Error::EmptyLoss);
    }
    for ex in batch {
        if ex.input.len() != ex.target.len() || ex.input.len() != ex.mask.len() {
            return Err(Error::ShapeError(format!(
                "input/target/mask lengths {}/{}/{}",
                ex.input.len(),
                ex.target.len(),
                ex.mask.len()
            )));
        }
        model.check_fits(ex.input.len())?;
    }
    let inv_n = 1.0 / total as f64;
    let per_example: Vec<Result<(f64, Params<F>)>> = batch
        .par_iter()
        .map(|ex| {
            let mut grads = Params::zeros_like(&model.params);
            if ex.scored_positions() == 0 {
                return Ok((0.0, grads));
            }
            let cache = model.forward_train(&ex.input)?;
            let v = model.config.vocab_size;
            let mut dlogits = vec![F::zero(); ex.input.len() * v];
            let mut nll = 0.0;
            for (i, (&tgt, &m)) in ex.target.iter().zip(&ex.mask).enumerate() {
                if !m {
                    continue;
                }
                let row = cache.log_probs.row(i);
                nll -= row[tgt as usize].as_f64();
                let drow = &mut dlogits[i * v..(i + 1) * v];
                for (g, &lp) in drow.iter_mut().zip(row) {
                    *g = F::from_f64_lossy(lp.as_f64().exp() * inv_n);
                }
                drow[tgt as usize] -= F::from_f64_lossy(inv_n);
            }
            model.backward_into(&cache, &dlogits, &mut grads);
            Ok((nll, grads))
        })
        .collect();
    let mut grads = Params::zeros_like(&model.params);
    let mut nll = 0.0;
    for r in per_example {
        let (l, g) = r?;
        nll += l;
        grads.add_assign(&g)?;
    }
    Ok((nll * inv_n, grads))
}
