//! Tooling for relation-grounded vision-instruction datasets and yes/no
//! hallucination benchmarks.
//!
//! The pipeline runs in stages:
//!
//! - [`annotation`] loads scene-graph style annotations and assembles the
//!   per-relation image context that seeds each prompt.
//! - [`prompt`] renders the generator and classifier chat transcripts.
//! - [`gateway`] sends transcripts to a chat-completions endpoint (or a
//!   scripted mock) with caching, retries and usage accounting.
//! - [`qa`] parses generations, classifier replies and yes/no answers.
//! - [`dataset`] builds instruction samples and renders them for specific
//!   model conversation templates.
//! - [`bench`] and [`review`] build the candidate pool, record human
//!   keep/reject decisions and finalize fixed-size benchmark subsets.
//! - [`eval`] scores model responses against a benchmark.
//!
//! [`geometry`] holds the box and mask arithmetic the other stages share.

pub mod annotation;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gateway;
pub mod geometry;
pub mod jsonl;
pub mod prompt;
pub mod qa;
pub mod review;
mod workers;

pub use annotation::{Corpus, ImageContext, RelationAnnotation};
pub use geometry::{BinaryMask, BoundingBox};
