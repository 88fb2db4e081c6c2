//! Generation, enrichment, scoring, and evaluation of structured model and
//! data cards.
//!
//! The pipeline reads a paper (as Markdown) plus repository metadata,
//! extracts each card field with an adaptive multi-round query loop
//! ([`extract`]), fills remaining gaps from a curated pool of similar cards
//! ([`enrich`]), and scores the result ([`metrics`], [`judge`]). All model
//! calls go through [`gateway::Gateway`], which has a scripted mock backend
//! for offline, reproducible runs.

pub mod enrich;
pub mod extract;
pub mod gateway;
pub mod ingest;
pub mod judge;
pub mod metrics;
pub mod pool;
pub mod rng;
pub mod schema;
pub mod trace;
mod workers;

pub use schema::{Card, CardKind, Confidence, Field, FieldKey, FieldProvenance, FieldStatus};
