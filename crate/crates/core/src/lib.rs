//! Self-supervised audio representation learning on spectrogram patches.
//!
//! The pretraining objective combines two pretext tasks solved jointly on
//! randomly masked log-mel patch sequences:
//!
//! * masked latent prediction: a predictor estimates the teacher encoder's
//!   latent representation of the masked patches from the student encoding
//!   of the visible ones;
//! * online classification: predicted and target latents are projected by
//!   student/teacher heads into K-way probability distributions matched
//!   with a cross-entropy loss, with temperature sharpening and centering
//!   keeping the head away from degenerate solutions.
//!
//! Teacher parameters are exponential moving averages of the student and
//! never receive gradients. The crate also ships the surrounding harness:
//! log-mel frontend, seeded masking, schedules, a training loop with step
//! logs and versioned checkpoints, collapse diagnostics, linear-probe
//! evaluation (accuracy / mAP with confidence intervals), an ablation grid
//! runner, and a synthetic dataset generator so everything runs offline.

pub mod ablation;
pub mod config;
pub mod container;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod gradcheck;
pub mod graph;
pub mod manifest;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod resample;
pub mod rng;
pub mod schedules;
pub mod steplog;
pub mod synthdata;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
