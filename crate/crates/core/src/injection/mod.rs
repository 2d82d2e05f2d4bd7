//! Client-side context mathematics: demonstration vectors, their local
//! mean, the injection coefficients, and the adapted inference handle.

mod adapt;
mod coefficients;
mod vectors;

pub use adapt::{adapt, AdaptedModel};
pub(crate) use adapt::query_site;
pub use coefficients::{neutral_coefficients, GradientVector, InjectionCoefficients};
pub use vectors::{
    extract_demonstration_vector, local_context_vector, ContextVector, DemonstrationVector, Dtype,
    Provenance, IFCV_HEADER_LEN,
};
