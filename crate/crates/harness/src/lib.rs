//! Synthetic-scene training, distillation, evaluation and reporting for the
//! `fasd` detectors.

pub mod config;
pub mod scene;
pub mod train;
pub mod ablate;
pub mod eval;
pub mod report;
