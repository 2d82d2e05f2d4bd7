use rayon::prelude::*;

use super::generate::Example;
use super::metrics::Metrics;
use super::template::{render_query, Template};
use crate::error::Result;
use crate::injection::{query_site, ContextVector, InjectionCoefficients};
use crate::nn::ToyTransformer;

/// Class whose label token scores highest in `next_token_logits`; ties go
/// to the lowest class index.
pub fn predict_label(next_token_logits: &[f32], template: &Template) -> usize {
    let mut best = 0;
    for (class, &id) in template.label_ids().iter().enumerate() {
        if next_token_logits[id as usize] > next_token_logits[template.label_ids()[best] as usize] {
            best = class;
        }
    }
    best
}

/// Score every test example with `next_token_logits`, which maps an
/// example to the logits for the token following its prompt. Examples are
/// scored in parallel; the reduction is order-independent.
pub fn evaluate_with<F>(template: &Template, test: &[Example], next_token_logits: F) -> Result<Metrics>
where
    F: Fn(usize, &Example) -> Result<Vec<f32>> + Sync,
{
    let predicted = test
        .par_iter()
        .enumerate()
        .map(|(i, e)| next_token_logits(i, e).map(|row| predict_label(&row, template)))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = test.iter().map(|e| e.label).collect();
    Metrics::from_predictions(&truth, &predicted, template.n_classes())
}

/// Accuracy and macro-F1 of the plain model (`injection` absent) or of the
/// injected model on bare queries.
pub fn evaluate(
    model: &ToyTransformer,
    injection: Option<(&ContextVector, &InjectionCoefficients)>,
    template: &Template,
    test: &[Example],
    last_position_only: bool,
) -> Result<Metrics> {
    evaluate_with(template, test, |_, e| {
        let tokens = render_query(template, &e.input);
        let logits = match injection {
            None => model.forward(&tokens, false)?.0,
            Some((v, coeffs)) => {
                let site = query_site(last_position_only, tokens.len());
                model.forward_injected_at(&tokens, v, coeffs, site)?
            }
        };
        Ok(logits.last().to_vec())
    })
}
