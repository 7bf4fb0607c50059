//! Desk-scale pedagogical alignment for structured tutor responses.
//!
//! The pipeline goes: parse and validate structured tutor conversations
//! ([`schema`]), derive preference pairs and perplexity probes from tutor
//! divergence ([`prefgen`]), score them with DPO/IPO/KTO objectives
//! ([`losses`]), train a small factorized tutor policy ([`policy`]), and
//! evaluate alignment with per-field accuracy/F1, multi-round curves, and
//! perplexity gaps ([`metrics`]).

pub mod losses;
pub mod math;
pub mod metrics;
pub mod policy;
pub mod prefgen;
pub mod schema;
