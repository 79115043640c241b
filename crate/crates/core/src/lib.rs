//! A desk-scale few-shot object detection laboratory.
//!
//! The crate implements a complete pretrain-transfer pipeline on a synthetic
//! shapes benchmark: dataset generation with base/novel class splits
//! ([`synthgen`]), a toy two-stage detector trained from scratch
//! ([`detector`]), centroid-based initialization of novel classifier rows
//! with adaptive length re-scaling ([`ki_init`]), the few-shot transfer loop
//! with per-component learning-rate scaling and freezing ([`transfer`]),
//! detection metrics ([`evalkit`]), and convergence-speed / FLOPs accounting
//! ([`efficiency`]).

pub mod detector;
pub mod efficiency;
pub mod error;
pub mod evalkit;
pub mod ki_init;
pub mod synthgen;
pub mod transfer;

pub use error::{CoreError, Result};
