//! Prompt layouts for the two formats.
//!
//! Reasoning (student) format, generation continues after the last token:
//!
//! ```text
//! <|system|><|reasoning_mode|><|user|>{question}<|assistant|><|begin_of_thought|>
//! ```
//!
//! Teaching (teacher) format, where the solution is part of the prompt and
//! the model writes the explanation:
//!
//! ```text
//! <|system|><|teaching_mode|><|user|>{question}<|assistant|>
//! <|begin_of_solution|>{solution}<|end_of_solution|><|begin_of_explanation|>
//! ```

use super::vocab::*;
use crate::error::Result;
use crate::lm::{TokenId, TokenSeq};

/// Student prompt without the trailing thought tag; the distillation input.
pub fn student_prompt_tokens(question: &[TokenId]) -> TokenSeq {
    let mut out = Vec::with_capacity(question.len() + 4);
    out.extend([SYSTEM, REASONING_MODE, USER]);
    out.extend_from_slice(question);
    out.push(ASSISTANT);
    out
}

/// Full generation prefix of the reasoning format.
pub fn student_generation_prefix(question: &[TokenId]) -> TokenSeq {
    let mut out = student_prompt_tokens(question);
    out.push(BEGIN_THOUGHT);
    out
}

pub fn render_student_prompt(vocab: &Vocabulary, question: &str) -> Result<TokenSeq> {
    Ok(student_generation_prefix(&vocab.tokenize_nonempty(question)?))
}

pub fn rlt_prompt_tokens(question: &[TokenId], solution: &[TokenId]) -> TokenSeq {
    let mut out = Vec::with_capacity(question.len() + solution.len() + 7);
    out.extend([SYSTEM, TEACHING_MODE, USER]);
    out.extend_from_slice(question);
    out.extend([ASSISTANT, BEGIN_SOLUTION]);
    out.extend_from_slice(solution);
    out.extend([END_SOLUTION, BEGIN_EXPLANATION]);
    out
}

pub fn render_rlt_prompt(vocab: &Vocabulary, question: &str, solution: &str) -> Result<TokenSeq> {
    Ok(rlt_prompt_tokens(
        &vocab.tokenize_nonempty(question)?,
        &vocab.tokenize_nonempty(solution)?,
    ))
}

/// Tokens that close a student target: thought, solution and turn tags
/// wrapped around the think and solution spans.
pub const STUDENT_TARGET_TAGS: usize = 5;

/// `<|begin_of_thought|>{think}<|end_of_thought|><|begin_of_solution|>{solution}<|end_of_solution|><|im_end|>`
pub fn student_target_tokens(think: &[TokenId], solution: &[TokenId]) -> TokenSeq {
    let mut out = Vec::with_capacity(think.len() + solution.len() + STUDENT_TARGET_TAGS);
    out.push(BEGIN_THOUGHT);
    out.extend_from_slice(think);
    out.extend([END_THOUGHT, BEGIN_SOLUTION]);
    out.extend_from_slice(solution);
    out.extend([END_SOLUTION, END_OF_TURN]);
    out
}

/// Reads the question span of either prompt layout.
pub(crate) fn question_span(prompt: &[TokenId]) -> Option<std::ops::Range<usize>> {
    let start = prompt.iter().position(|&t| t == USER)? + 1;
    let end = start + prompt[start..].iter().position(|&t| t == ASSISTANT)?;
    Some(start..end)
}

/// Reads the solution span of a teaching-format prompt.
pub(crate) fn solution_span(prompt: &[TokenId]) -> Option<std::ops::Range<usize>> {
    let start = prompt.iter().position(|&t| t == BEGIN_SOLUTION)? + 1;
    let end = start + prompt[start..].iter().position(|&t| t == END_SOLUTION)?;
    Some(start..end)
}
