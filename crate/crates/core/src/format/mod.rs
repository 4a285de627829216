//! Tokenizer, prompt templates, completion parsing and conversion of
//! teacher explanations into student training records.

mod dataset;
mod template;
mod trace;
mod vocab;

pub use dataset::{read_jsonl, write_jsonl, TraceRecord};
pub use template::{
    render_rlt_prompt, render_student_prompt, rlt_prompt_tokens, student_generation_prefix,
    student_prompt_tokens, student_target_tokens, STUDENT_TARGET_TAGS,
};
pub use trace::{
    build_distillation_record, build_teacher_record, parse_rlt_completion, parse_student_completion,
    student_scoring_context, DistillationRecord, FormatFailure, SegmentedTrace, StudentSpans,
    TraceSource,
};
pub use vocab::*;
