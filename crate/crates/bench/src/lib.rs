//! Fixtures shared by the benchmarks.

use rlt_core::format::{parse_rlt_completion, render_rlt_prompt, SegmentedTrace, Vocabulary, END_EXPLANATION};
use rlt_core::lm::TokenId;
use rlt_core::lm::{ModelConfig, ModelState};

pub fn model(vocab: &Vocabulary, d_model: usize, seed: u64) -> ModelState {
    ModelState::new(ModelConfig {
        vocab_size: vocab.size(),
        context_window: 96,
        n_layers: 2,
        n_heads: 4,
        d_model,
        d_ff: 4 * d_model,
        seed,
    })
    .expect("valid bench config")
}

pub fn tokens(vocab: &Vocabulary, text: &str) -> Vec<TokenId> {
    vocab.tokenize(text).expect("bench text tokenizes")
}

/// Teaching prompt and a well-formed explanation for one arith_chain task.
pub fn arith_rollout(vocab: &Vocabulary) -> (Vec<TokenId>, Vec<TokenId>) {
    let prompt = render_rlt_prompt(vocab, "(((7*7)+2)+5) mod 10 = ?", "6").expect("prompt renders");
    let mut completion = tokens(vocab, "7*7=9 9+2=1 1+5=6");
    completion.push(END_EXPLANATION);
    (prompt, completion)
}

pub fn arith_trace(vocab: &Vocabulary) -> SegmentedTrace {
    let (prompt, completion) = arith_rollout(vocab);
    parse_rlt_completion(&prompt, &completion).expect("fixture parses")
}
