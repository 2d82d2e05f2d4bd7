use std::ops::Range;

use super::generate::Example;
use super::tokenizer::{Tokenizer, BOS, SEP};
use crate::error::{Error, Result};

const INPUT_SLOT: &str = "{input}";
const LABEL_SLOT: &str = "{label}";

/// Context-example template: a prompt with an `{input}` slot, an answer
/// with a `{label}` slot, and one single-token name per class.
///
/// Rendered sequences always start with `<bos>`; the template text itself
/// does not include it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub prompt_pattern: String,
    pub answer_pattern: String,
    pub label_names: Vec<String>,
    prompt_pre: Vec<u32>,
    prompt_post: Vec<u32>,
    answer_pre: Vec<u32>,
    answer_post: Vec<u32>,
    label_ids: Vec<u32>,
}

/// A rendered demonstration and the positions of its label tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub tokens: Vec<u32>,
    pub answer_span: Range<usize>,
}

fn split_slot(tok: &Tokenizer, pattern: &str, slot: &str) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut parts = pattern.split(slot);
    let (pre, post) = match (parts.next(), parts.next(), parts.next()) {
        (Some(pre), Some(post), None) => (pre, post),
        _ => {
            return Err(Error::Config(format!(
                "pattern {pattern:?} must contain {slot} exactly once"
            )))
        }
    };
    Ok((tok.encode(pre)?, tok.encode(post)?))
}

impl Template {
    pub fn new(
        id: impl Into<String>,
        prompt_pattern: impl Into<String>,
        answer_pattern: impl Into<String>,
        label_names: Vec<String>,
        tokenizer: &Tokenizer,
    ) -> Result<Self> {
        let id = id.into();
        let prompt_pattern = prompt_pattern.into();
        let answer_pattern = answer_pattern.into();
        if id.contains(['\n', '\t']) {
            return Err(Error::Config("template id must be a single field".into()));
        }
        if label_names.len() < 2 {
            return Err(Error::Config("a template needs at least two labels".into()));
        }
        let (prompt_pre, prompt_post) = split_slot(tokenizer, &prompt_pattern, INPUT_SLOT)?;
        let (answer_pre, answer_post) = split_slot(tokenizer, &answer_pattern, LABEL_SLOT)?;
        let mut label_ids = Vec::with_capacity(label_names.len());
        for name in &label_names {
            match tokenizer.encode(name)?.as_slice() {
                [id] => label_ids.push(*id),
                _ => {
                    return Err(Error::Config(format!(
                        "label name {name:?} must be exactly one token"
                    )))
                }
            }
        }
        let mut sorted = label_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != label_ids.len() {
            return Err(Error::Config("label names must be distinct".into()));
        }
        Ok(Self {
            id,
            prompt_pattern,
            answer_pattern,
            label_names,
            prompt_pre,
            prompt_post,
            answer_pre,
            answer_post,
            label_ids,
        })
    }

    /// `"<input> =>"` / `"<label>"`: the format the synthetic corpora use.
    pub fn standard(id: impl Into<String>, label_names: Vec<String>, tokenizer: &Tokenizer) -> Result<Self> {
        Self::new(id, "{input} =>", "{label}", label_names, tokenizer)
    }

    pub fn n_classes(&self) -> usize {
        self.label_ids.len()
    }

    /// Token id of each class's label name, by class index.
    pub fn label_ids(&self) -> &[u32] {
        &self.label_ids
    }

    /// Canonical text form: four `key=value` lines. This is both the
    /// distributed template payload and the input of the template hash.
    pub fn canonical(&self) -> String {
        format!(
            "id={}\nprompt={}\nanswer={}\nlabels={}\n",
            self.id,
            self.prompt_pattern,
            self.answer_pattern,
            self.label_names.join(" ")
        )
    }

    pub fn parse_canonical(text: &str, tokenizer: &Tokenizer) -> Result<Self> {
        let mut fields = [None; 4];
        for line in text.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::decode("template", format!("line {line:?}")))?;
            let slot = match key {
                "id" => 0,
                "prompt" => 1,
                "answer" => 2,
                "labels" => 3,
                _ => return Err(Error::decode("template", format!("unknown key {key:?}"))),
            };
            fields[slot] = Some(value);
        }
        let [Some(id), Some(prompt), Some(answer), Some(labels)] = fields else {
            return Err(Error::decode("template", "missing field"));
        };
        let labels = labels.split_whitespace().map(str::to_string).collect();
        Self::new(id, prompt, answer, labels, tokenizer)
    }

    /// Prompt segment for one input, without `<bos>`.
    pub fn prompt_segment(&self, input: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.prompt_pre.len() + input.len() + self.prompt_post.len());
        out.extend_from_slice(&self.prompt_pre);
        out.extend_from_slice(input);
        out.extend_from_slice(&self.prompt_post);
        out
    }

    /// Prompt plus answer for one example, without `<bos>`; also returns
    /// the label's offset within the segment.
    pub fn demo_segment(&self, example: &Example) -> Result<(Vec<u32>, usize)> {
        let label = *self.label_ids.get(example.label).ok_or_else(|| {
            Error::Config(format!(
                "label {} out of range for {} classes",
                example.label,
                self.n_classes()
            ))
        })?;
        let mut out = self.prompt_segment(&example.input);
        out.extend_from_slice(&self.answer_pre);
        let at = out.len();
        out.push(label);
        out.extend_from_slice(&self.answer_post);
        Ok((out, at))
    }
}

/// `<bos>` followed by the prompt for `input`; the next-token logits at the
/// last position score the answer.
pub fn render_query(template: &Template, input: &[u32]) -> Vec<u32> {
    let mut out = vec![BOS];
    out.extend(template.prompt_segment(input));
    out
}

pub fn render_demonstration(template: &Template, example: &Example, max_len: usize) -> Result<Rendered> {
    let (segment, at) = template.demo_segment(example)?;
    let mut tokens = Vec::with_capacity(segment.len() + 1);
    tokens.push(BOS);
    tokens.extend(segment);
    if tokens.len() > max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: max_len,
        });
    }
    Ok(Rendered {
        tokens,
        answer_span: at + 1..at + 2,
    })
}

/// In-prompt demonstrations: `<bos> demo <sep> demo <sep> … query`. When
/// the window overflows, the oldest demonstrations are dropped first.
pub fn render_icl_prompt(
    template: &Template,
    demos: &[Example],
    query_input: &[u32],
    max_len: usize,
) -> Result<Vec<u32>> {
    let query = template.prompt_segment(query_input);
    let mut budget = max_len
        .checked_sub(1 + query.len())
        .ok_or(Error::SequenceTooLong {
            len: 1 + query.len(),
            max: max_len,
        })?;
    let mut kept = Vec::new();
    for demo in demos.iter().rev() {
        let (segment, _) = template.demo_segment(demo)?;
        if segment.len() + 1 > budget {
            break;
        }
        budget -= segment.len() + 1;
        kept.push(segment);
    }
    let mut out = vec![BOS];
    for segment in kept.into_iter().rev() {
        out.extend(segment);
        out.push(SEP);
    }
    out.extend(query);
    Ok(out)
}
