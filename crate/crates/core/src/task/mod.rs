//! Synthetic classification tasks, the tokenizer and template that frame
//! them, and classification metrics.

mod dataset;
mod evaluate;
mod generate;
mod metrics;
mod template;
mod tokenizer;

pub use dataset::{read_examples, write_examples};
pub use evaluate::{evaluate, evaluate_with, predict_label};
pub use generate::{build_corpus, generate_task, Example, TaskData, TaskSpec};
pub use metrics::Metrics;
pub use template::{render_demonstration, render_icl_prompt, render_query, Rendered, Template};
pub use tokenizer::{Tokenizer, BOS, MARKER, PAD, SEP};
