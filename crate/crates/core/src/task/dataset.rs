use std::fs;
use std::path::Path;

use super::generate::Example;
use crate::error::{Error, Result};

/// One example per line: space-separated token ids, a tab, the class index.
pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut text = String::new();
    for e in examples {
        let ids: Vec<String> = e.input.iter().map(u32::to_string).collect();
        text.push_str(&ids.join(" "));
        text.push('\t');
        text.push_str(&e.label.to_string());
        text.push('\n');
    }
    crate::nn::write_atomic(path, text.as_bytes())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    parse_examples(&fs::read_to_string(path)?)
}

pub(crate) fn parse_examples(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::decode("dataset", format!("line {}: {what}", i + 1));
            let (ids, label) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let input = ids
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| bad("bad token id")))
                .collect::<Result<Vec<_>>>()?;
            let label = label.trim().parse().map_err(|_| bad("bad class index"))?;
            Ok(Example { input, label })
        })
        .collect()
}
