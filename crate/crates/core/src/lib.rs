//! Embedding-level teacher/student distillation for nucleotide sequences.
//!
//! The crate covers the whole pipeline:
//!
//! * [`genbank`]: streaming GenBank flat-file ingest, taxonomy categories,
//!   quota subsampling and binary sequence shards.
//! * [`tokenizer`]: per-nucleotide tokens and the fixed-context token file.
//! * [`tensor`]: a small dense tensor type with a reverse-mode tape.
//! * [`teacher`]: frozen targets, synthetic or loaded from embedding dumps.
//! * [`student`]: residual MLP student with two pooled, projected taps.
//! * [`losses`] and [`metrics`]: cosine/MSE/KL losses, CKA, variance,
//!   PCA spectra and entropy diagnostics.
//! * [`trainer`]: AdamW with warmup and clipping, validation and logging.
//! * [`report`]: plot-ready CSV tables derived from a metrics log.
//!
//! Batch work (per-sequence tapes, Gram matrices, teacher passes) goes
//! through [`par`], which uses rayon when the `parallel` feature is enabled
//! and a plain loop otherwise. Reductions always run in a fixed order, so
//! both paths give bit-identical results.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod genbank;
mod io;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod report;
pub mod rng;
pub mod student;
pub mod teacher;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
