use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::template::Template;
use super::tokenizer::{Tokenizer, BOS, SEP};
use crate::error::{Error, Result};

/// One labelled input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<u32>,
    pub label: usize,
}

/// Synthetic topic-classification task.
///
/// Each class owns a disjoint lexicon; inputs are drawn from one class
/// lexicon with some shared noise words mixed in. The label word for each
/// class depends on the naming scheme, and all schemes permute the same
/// label words, so a class is only mapped to its label unambiguously once
/// the scheme is known from demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub n_classes: usize,
    pub words_per_class: usize,
    pub n_noise: usize,
    pub min_input_len: usize,
    pub max_input_len: usize,
    pub noise_rate: f64,
    pub naming_schemes: Vec<Vec<String>>,
    pub seed: u64,
}

const LABEL_WORDS: [&str; 8] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
];

impl Default for TaskSpec {
    fn default() -> Self {
        Self::rotated(4, 2)
    }
}

impl TaskSpec {
    /// `n_classes` classes and `n_schemes` naming schemes, scheme `s`
    /// naming class `c` with label word `(c + s) mod C`.
    pub fn rotated(n_classes: usize, n_schemes: usize) -> Self {
        let words: Vec<String> = (0..n_classes)
            .map(|c| {
                LABEL_WORDS
                    .get(c)
                    .map(|w| w.to_string())
                    .unwrap_or_else(|| format!("label{c}"))
            })
            .collect();
        let naming_schemes = (0..n_schemes)
            .map(|s| (0..n_classes).map(|c| words[(c + s) % n_classes].clone()).collect())
            .collect();
        Self {
            n_classes,
            words_per_class: 16,
            n_noise: 24,
            min_input_len: 3,
            max_input_len: 5,
            noise_rate: 0.1,
            naming_schemes,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.words_per_class == 0 {
            return Err(Error::Config("class lexicons cannot be empty".into()));
        }
        if self.min_input_len == 0 || self.min_input_len > self.max_input_len {
            return Err(Error::Config("input length range is empty".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} not in [0, 1)", self.noise_rate)));
        }
        if self.noise_rate > 0.0 && self.n_noise == 0 {
            return Err(Error::Config("noise_rate > 0 needs noise words".into()));
        }
        if self.naming_schemes.is_empty() {
            return Err(Error::Config("at least one naming scheme is required".into()));
        }
        for (i, scheme) in self.naming_schemes.iter().enumerate() {
            if scheme.len() != self.n_classes {
                return Err(Error::Config(format!(
                    "naming scheme {i} has {} labels for {} classes",
                    scheme.len(),
                    self.n_classes
                )));
            }
        }
        Ok(())
    }

    fn label_symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.naming_schemes.iter().flatten() {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        out
    }

    /// Reserved symbols, label words, class lexicons, then noise words.
    pub fn tokenizer(&self) -> Result<Tokenizer> {
        self.validate()?;
        let mut extra = self.label_symbols();
        for c in 0..self.n_classes {
            extra.extend((0..self.words_per_class).map(|i| format!("c{c}w{i}")));
        }
        extra.extend((0..self.n_noise).map(|i| format!("n{i}")));
        Tokenizer::new(extra)
    }

    fn first_lexicon_id(&self) -> u32 {
        (4 + self.label_symbols().len()) as u32
    }

    /// Token ids of one class's lexicon.
    pub fn lexicon(&self, class: usize) -> Vec<u32> {
        let base = self.first_lexicon_id() + (class * self.words_per_class) as u32;
        (base..base + self.words_per_class as u32).collect()
    }

    pub fn noise_words(&self) -> Vec<u32> {
        let base = self.first_lexicon_id() + (self.n_classes * self.words_per_class) as u32;
        (base..base + self.n_noise as u32).collect()
    }

    pub fn template(&self, scheme_index: usize, tokenizer: &Tokenizer) -> Result<Template> {
        let scheme = self.naming_schemes.get(scheme_index).ok_or_else(|| {
            Error::Config(format!(
                "scheme {scheme_index} out of range ({} schemes)",
                self.naming_schemes.len()
            ))
        })?;
        Template::standard(format!("topic-s{scheme_index}"), scheme.clone(), tokenizer)
    }

    fn sample_input<R: Rng>(&self, rng: &mut R, class: usize) -> Vec<u32> {
        let lexicon = self.lexicon(class);
        let noise = self.noise_words();
        let len = rng.random_range(self.min_input_len..=self.max_input_len);
        let mut input: Vec<u32> = (0..len)
            .map(|_| {
                if !noise.is_empty() && rng.random_bool(self.noise_rate) {
                    noise[rng.random_range(0..noise.len())]
                } else {
                    lexicon[rng.random_range(0..lexicon.len())]
                }
            })
            .collect();
        if !input.iter().any(|t| lexicon.contains(t)) {
            let at = rng.random_range(0..len);
            input[at] = lexicon[rng.random_range(0..lexicon.len())];
        }
        input
    }

    /// Class whose lexicon covers most of `input` (lowest index on ties).
    pub fn majority_class(&self, input: &[u32]) -> Option<usize> {
        let counts: Vec<usize> = (0..self.n_classes)
            .map(|c| {
                let lex = self.lexicon(c);
                input.iter().filter(|t| lex.contains(t)).count()
            })
            .collect();
        let best = *counts.iter().max()?;
        (best > 0).then(|| counts.iter().position(|&c| c == best).unwrap())
    }
}

const CORPUS_STREAM: u64 = 1;
const TASK_STREAM: u64 = 2;

/// Pretraining documents: `<bos>` then templated labelled sentences joined
/// by `<sep>`, cut to exactly `doc_len` tokens. Each document uses one
/// naming scheme drawn uniformly.
pub fn build_corpus(spec: &TaskSpec, n_docs: usize, doc_len: usize, max_seq_len: usize) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    if doc_len > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: doc_len,
            max: max_seq_len,
        });
    }
    if doc_len < 2 {
        return Err(Error::Config("doc_len must be at least 2".into()));
    }
    let tokenizer = spec.tokenizer()?;
    let templates: Vec<Template> = (0..spec.naming_schemes.len())
        .map(|s| spec.template(s, &tokenizer))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(CORPUS_STREAM);
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let template = &templates[rng.random_range(0..templates.len())];
        let mut doc = vec![BOS];
        while doc.len() < doc_len {
            let label = rng.random_range(0..spec.n_classes);
            let example = Example {
                input: spec.sample_input(&mut rng, label),
                label,
            };
            let (segment, _) = template.demo_segment(&example)?;
            doc.extend(segment);
            doc.push(SEP);
        }
        doc.truncate(doc_len);
        docs.push(doc);
    }
    Ok(docs)
}

/// A generated task under one naming scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub scheme_index: usize,
    pub template: Template,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Training examples with uniformly random classes and a class-balanced,
/// shuffled test set. When `n_test` is not a multiple of the class count
/// the remainder goes to the lowest classes (per-class counts differ by at
/// most one) and a warning is logged.
pub fn generate_task(spec: &TaskSpec, n_train: usize, n_test: usize, scheme_index: usize) -> Result<TaskData> {
    let tokenizer = spec.tokenizer()?;
    let template = spec.template(scheme_index, &tokenizer)?;
    let c = spec.n_classes;
    if !n_test.is_multiple_of(c) {
        log::warn!("n_test {n_test} is not divisible by {c} classes; per-class counts will differ by one");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(TASK_STREAM);
    let train = (0..n_train)
        .map(|_| {
            let label = rng.random_range(0..c);
            Example {
                input: spec.sample_input(&mut rng, label),
                label,
            }
        })
        .collect();
    let mut test: Vec<Example> = (0..c)
        .flat_map(|label| {
            let count = n_test / c + usize::from(label < n_test % c);
            std::iter::repeat_n(label, count)
        })
        .map(|label| Example {
            input: spec.sample_input(&mut rng, label),
            label,
        })
        .collect();
    test.shuffle(&mut rng);
    Ok(TaskData {
        scheme_index,
        template,
        train,
        test,
    })
}
