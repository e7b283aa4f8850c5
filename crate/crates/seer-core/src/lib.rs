//! Core library for SEER: a skill-evolving grounded-reasoning harness that
//! turns free-text segmentation requests into canonical executable answers,
//! scores them against a frozen synthetic environment, and distills
//! high-reward reasoning episodes into an auditable skill bank.
//!
//! Module map:
//! - [`volume`] - synthetic 3D cases, multi-view rendering, the frozen
//!   executor and the Dice metric
//! - [`trace`] - the (evidence, rationale, answer) wire format, parser and
//!   compliance rubric
//! - [`perturb`] - clinically equivalent rephrasing groups and synthetic
//!   request generation
//! - [`reward`] - composite rewards, stability objective and group-relative
//!   advantages
//! - [`bank`] - skill artifacts: embedding, retrieval, distillation,
//!   deduplication, culling and persistence
//! - [`policy`] - the pluggable policy client (scripted simulator or remote
//!   chat endpoint) and training-data exports
//! - [`evolution`] - the round loop tying everything together, with episode
//!   logs and audit reports

pub mod bank;
pub mod episode;
pub mod evolution;
pub mod hashing;
pub mod perturb;
pub mod policy;
pub mod reward;
pub mod trace;
pub mod volume;
