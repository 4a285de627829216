use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::template::{
    question_span, rlt_prompt_tokens, solution_span, student_prompt_tokens, student_target_tokens,
};
use super::vocab::*;
use crate::lm::{LmExample, TokenId, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSource {
    TeacherRlt,
    TeacherRl,
    Synthetic,
}

/// Why a completion could not be read. Rewards turn this into the format
/// penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatFailure {
    MissingEndTag,
    EmptyExplanation,
    StrayTag,
    MissingSolution,
    EmptySolution,
    MalformedPrompt,
    TooLong,
}

impl std::fmt::Display for FormatFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum serializes");
        write!(f, "{}", s.as_str().unwrap_or("format_failure"))
    }
}

/// A teacher explanation laid out in the teaching format, with the spans of
/// each segment inside `tokens`.
///
/// `tokens` is the teaching prompt followed by the think tokens and the
/// closing explanation tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedTrace {
    pub question: TokenSeq,
    pub solution: TokenSeq,
    pub think: TokenSeq,
    pub tokens: TokenSeq,
    pub question_span: Range<usize>,
    pub solution_span: Range<usize>,
    pub think_span: Range<usize>,
    pub source: TraceSource,
}

impl SegmentedTrace {
    pub fn new(question: &[TokenId], solution: &[TokenId], think: &[TokenId], source: TraceSource) -> Self {
        let mut tokens = rlt_prompt_tokens(question, solution);
        let q_start = 3;
        let question_span = q_start..q_start + question.len();
        let s_start = question_span.end + 2;
        let solution_span = s_start..s_start + solution.len();
        let t_start = tokens.len();
        tokens.extend_from_slice(think);
        tokens.push(END_EXPLANATION);
        Self {
            question: question.to_vec(),
            solution: solution.to_vec(),
            think: think.to_vec(),
            think_span: t_start..t_start + think.len(),
            question_span,
            solution_span,
            tokens,
            source,
        }
    }

    /// Spans cover their segments exactly and are ordered and disjoint.
    pub fn spans_consistent(&self) -> bool {
        let ordered = self.question_span.end <= self.solution_span.start
            && self.solution_span.end <= self.think_span.start
            && self.think_span.end < self.tokens.len();
        ordered
            && self.tokens.get(self.question_span.clone()) == Some(&self.question[..])
            && self.tokens.get(self.solution_span.clone()) == Some(&self.solution[..])
            && self.tokens.get(self.think_span.clone()) == Some(&self.think[..])
            && Self::new(&self.question, &self.solution, &self.think, self.source).tokens == self.tokens
    }

    /// Teaching-format prompt (everything before the think tokens).
    pub fn rlt_prompt(&self) -> &[TokenId] {
        &self.tokens[..self.think_span.start]
    }

    /// The teacher's generation: think tokens plus the closing tag.
    pub fn rlt_completion(&self) -> &[TokenId] {
        &self.tokens[self.think_span.start..]
    }

    pub fn with_think(&self, think: &[TokenId]) -> Self {
        Self::new(&self.question, &self.solution, think, self.source)
    }
}

/// Splits a teacher completion into its explanation. The completion is what
/// the model produced after `<|begin_of_explanation|>`.
pub fn parse_rlt_completion(
    prompt: &[TokenId],
    completion: &[TokenId],
) -> Result<SegmentedTrace, FormatFailure> {
    let q = question_span(prompt).ok_or(FormatFailure::MalformedPrompt)?;
    let s = solution_span(prompt).ok_or(FormatFailure::MalformedPrompt)?;
    if rlt_prompt_tokens(&prompt[q.clone()], &prompt[s.clone()]) != prompt {
        return Err(FormatFailure::MalformedPrompt);
    }
    let end = completion
        .iter()
        .position(|&t| t == END_EXPLANATION)
        .ok_or(FormatFailure::MissingEndTag)?;
    let think = &completion[..end];
    if think.is_empty() {
        return Err(FormatFailure::EmptyExplanation);
    }
    if think.iter().any(|&t| is_special(t)) {
        return Err(FormatFailure::StrayTag);
    }
    Ok(SegmentedTrace::new(
        &prompt[q],
        &prompt[s],
        think,
        TraceSource::TeacherRlt,
    ))
}

/// Spans of a reasoning-format completion, relative to the completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentSpans {
    pub think: Range<usize>,
    pub solution: Range<usize>,
}

/// Reads `think <|end_of_thought|><|begin_of_solution|> solution <|end_of_solution|>`.
/// A leading `<|begin_of_thought|>` is accepted; anything after the closing
/// solution tag is ignored.
pub fn parse_student_completion(completion: &[TokenId]) -> Result<StudentSpans, FormatFailure> {
    let start = usize::from(completion.first() == Some(&BEGIN_THOUGHT));
    let rest = &completion[start..];
    let end_think = rest
        .iter()
        .position(|&t| t == END_THOUGHT)
        .ok_or(FormatFailure::MissingEndTag)?;
    let think = start..start + end_think;
    if completion[think.clone()].iter().any(|&t| is_special(t)) {
        return Err(FormatFailure::StrayTag);
    }
    let sol_open = think.end + 1;
    if completion.get(sol_open) != Some(&BEGIN_SOLUTION) {
        return Err(FormatFailure::MissingSolution);
    }
    let sol_start = sol_open + 1;
    let sol_len = completion[sol_start..]
        .iter()
        .position(|&t| t == END_SOLUTION)
        .ok_or(FormatFailure::MissingSolution)?;
    let solution = sol_start..sol_start + sol_len;
    if solution.is_empty() {
        return Err(FormatFailure::EmptySolution);
    }
    if completion[solution.clone()].iter().any(|&t| is_special(t)) {
        return Err(FormatFailure::StrayTag);
    }
    Ok(StudentSpans { think, solution })
}

/// A student-format training example: the prompt is context only and every
/// target token is scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistillationRecord {
    pub input_tokens: TokenSeq,
    pub target_tokens: TokenSeq,
    pub loss_mask: Vec<bool>,
    /// The record does not fit the student's context window.
    pub oversize: bool,
}

impl DistillationRecord {
    pub fn len(&self) -> usize {
        self.input_tokens.len() + self.target_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Teacher-forced example; the final target token is never an input.
    pub fn to_example(&self) -> LmExample {
        let mut ex = LmExample::prompt_completion(&self.input_tokens, &self.target_tokens);
        let offset = self.input_tokens.len() - 1;
        for (i, &m) in self.loss_mask.iter().enumerate() {
            ex.mask[offset + i] = m;
        }
        ex
    }

    /// Think and solution spans recovered from the target.
    pub fn spans(&self) -> Result<StudentSpans, FormatFailure> {
        parse_student_completion(&self.target_tokens)
    }
}

/// Moves the teacher's explanation into the reasoning format: the think
/// tokens are copied verbatim between thought tags and the ground-truth
/// solution is appended.
pub fn build_distillation_record(trace: &SegmentedTrace, context_window: usize) -> DistillationRecord {
    let input_tokens = student_prompt_tokens(&trace.question);
    let target_tokens = student_target_tokens(&trace.think, &trace.solution);
    let loss_mask = vec![true; target_tokens.len()];
    let oversize = input_tokens.len() + target_tokens.len() > context_window;
    DistillationRecord {
        input_tokens,
        target_tokens,
        loss_mask,
        oversize,
    }
}

/// Teacher warmup example: teaching prompt as context, explanation plus
/// closing tag as target.
pub fn build_teacher_record(trace: &SegmentedTrace, context_window: usize) -> DistillationRecord {
    let input_tokens = trace.rlt_prompt().to_vec();
    let target_tokens = trace.rlt_completion().to_vec();
    let loss_mask = vec![true; target_tokens.len()];
    let oversize = trace.tokens.len() > context_window;
    DistillationRecord {
        input_tokens,
        target_tokens,
        loss_mask,
        oversize,
    }
}

/// Reasoning-format context used to score a trace with a student:
/// prompt, thought tags around the think span, and the solution opener.
pub fn student_scoring_context(question: &[TokenId], think: &[TokenId]) -> TokenSeq {
    let mut ctx = student_prompt_tokens(question);
    ctx.push(BEGIN_THOUGHT);
    ctx.extend_from_slice(think);
    ctx.extend([END_THOUGHT, BEGIN_SOLUTION]);
    ctx
}
