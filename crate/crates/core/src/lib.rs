//! Guideline-based prompt optimization.
//!
//! An LLM turns labelled examples and their explanations into short,
//! label-specific guidelines. A hill-climbing search then edits a set of
//! those guidelines appended to a task prompt, keeping only edits that raise
//! F1-macro on training data.

pub mod domain;
pub mod envelope;
pub mod eval;
pub mod gateway;
pub mod optimizer;
pub mod pool;
pub mod store;
pub mod commands;
