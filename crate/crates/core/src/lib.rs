//! Desk-scale continuous-attention reasoning.
//!
//! A recurrent memory-attention-composition cell (`mac`), its
//! continuous-attention variant driven by a learned ODE over attention
//! logits (`daft`), interchangeable fixed-step and adaptive solvers
//! (`ode`), transition-length metrics over attention trajectories
//! (`metrics`), a deterministic synthetic reasoning task (`taskgen`),
//! and the training/evaluation harness behind the CLI (`harness`).
//! Everything runs on a small f64 tensor substrate with a reverse-mode
//! tape (`tensor`, `tape`).

pub mod daft;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod mac;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ode;
pub mod tape;
pub mod taskgen;
pub mod tensor;
