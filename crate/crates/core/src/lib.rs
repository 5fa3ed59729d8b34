//! Natural-language explanations of change between before/after satellite
//! image pairs.
//!
//! The pipeline runs one of three prompting strategies (All-at-Once,
//! Step-by-Step, Hybrid) over pluggable chat-completion backends, scores the
//! explanations by noun Coverage against reference captions, collects human
//! Truthfulness/Informativeness ratings and renders a results table.

pub mod annotation;
pub mod backend;
pub mod dataset;
pub mod imaging;
pub mod metrics;
pub mod prompting;
pub mod report;

pub use backend::{Backend, BackendSpec, ChatRequest, ChatResponse, ResponseCache};
pub use dataset::{BiTemporalPair, DatasetStore, Split};
pub use imaging::Raster;
pub use prompting::{build_plan, execute, GenerationRecord, Strategy, StrategyPlan};
