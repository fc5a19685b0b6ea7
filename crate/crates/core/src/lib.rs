//! Incremental metric learning for point-cloud place recognition.
//!
//! A permutation-invariant point encoder is trained on a sequence of
//! domains. Forgetting of earlier domains is countered by distilling the
//! angular structure of a frozen teacher's descriptor space, replaying a
//! small memory of positive pairs from past domains, and relaxing the
//! distillation weight with a sigmoid schedule over each step.

pub mod data;
pub mod seed;
pub mod encoder;
pub mod losses;
pub mod memory;
pub mod eval;
pub mod trainer;
pub mod config;
pub mod selfcheck;
pub mod cli;
