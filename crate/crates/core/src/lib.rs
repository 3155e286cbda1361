//! Structured four-stage reasoning and reward-guided test-time search.
//!
//! - [`stages`]: the tagged response grammar.
//! - [`backends`]: generator and reward interfaces, HTTP and simulated implementations.
//! - [`search`]: best-of-N, stage-wise beam search and retracing search.
//! - [`datagen`]: prompt-driven data generation with judge filtering.
//! - [`harness`]: benchmark runs, grading and scaling sweeps.
//! - [`oracle`]: exact outcome enumeration for simulated worlds.

pub mod backends;
pub mod datagen;
pub mod harness;
pub mod keyed;
pub mod oracle;
pub mod search;
pub mod stages;
