//! Evolutionary optimization of prompt cue sets for image-based data
//! extraction.
//!
//! The search space ([`schema::CueSchema`]) is a set of cue categories; an
//! individual ([`schema::Genotype`]) picks cues from each category. The
//! [`engine`] evolves a population against an evaluation backend
//! ([`backends::Evaluator`]): either a vision LLM behind an HTTP transport or
//! a deterministic planted-landscape oracle. [`analysis`] provides ablation,
//! consistency probing and run-log reports.

pub mod analysis;
pub mod backends;
pub mod dataset;
pub mod engine;
pub mod fitness;
pub mod genome_ops;
pub mod parsing;
pub mod schema;

use sha2::{Digest, Sha256};

pub(crate) fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
