use std::sync::Arc;

use super::{ContextVector, InjectionCoefficients};
use crate::error::{Error, Result};
use crate::nn::{InjectionSite, Logits, ToyTransformer};

/// A frozen model closed over one global context vector and coefficient
/// set. Every call is a single injected forward pass; the model weights are
/// shared, never copied.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    model: Arc<ToyTransformer>,
    vector: ContextVector,
    coeffs: InjectionCoefficients,
    last_position_only: bool,
}

/// Turn the raw model into a task-specific one.
pub fn adapt(
    model: Arc<ToyTransformer>,
    vector: ContextVector,
    coeffs: InjectionCoefficients,
) -> Result<AdaptedModel> {
    AdaptedModel::new(model, vector, coeffs, false)
}

impl AdaptedModel {
    pub fn new(
        model: Arc<ToyTransformer>,
        vector: ContextVector,
        coeffs: InjectionCoefficients,
        last_position_only: bool,
    ) -> Result<Self> {
        let cfg = model.config();
        if vector.n_layers() != cfg.n_layers || vector.d_model() != cfg.d_model {
            return Err(Error::Shape(format!(
                "context vector {}×{} does not fit model {}×{}",
                vector.n_layers(),
                vector.d_model(),
                cfg.n_layers,
                cfg.d_model
            )));
        }
        if coeffs.n_layers() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "{} coefficient layers for a {}-layer model",
                coeffs.n_layers(),
                cfg.n_layers
            )));
        }
        Ok(Self {
            model,
            vector,
            coeffs,
            last_position_only,
        })
    }

    pub fn model(&self) -> &Arc<ToyTransformer> {
        &self.model
    }

    pub fn vector(&self) -> &ContextVector {
        &self.vector
    }

    pub fn coefficients(&self) -> &InjectionCoefficients {
        &self.coeffs
    }

    /// Logits for a query prompt. In last-position mode only the prompt's
    /// final token is injected.
    pub fn logits(&self, tokens: &[u32]) -> Result<Logits> {
        let site = query_site(self.last_position_only, tokens.len());
        self.model
            .forward_injected_at(tokens, &self.vector, &self.coeffs, site)
    }
}

/// Injection site for a query prompt of `len` tokens.
pub(crate) fn query_site(last_position_only: bool, len: usize) -> InjectionSite {
    if last_position_only {
        InjectionSite::Position(len.saturating_sub(1))
    } else {
        InjectionSite::AllPositions
    }
}
