//! Hybrid diffusion over an aligned discrete token track and continuous
//! token track.
//!
//! Both tracks are corrupted by absorbing-mask schedules; the network fuses
//! them, predicts categorical logits for masked discrete tokens and the
//! injected noise for masked continuous tokens (a per-token DDPM). Sampling
//! covers unconditional co-generation, motif scaffolding, folding (continuous
//! from discrete) and inverse folding (discrete from continuous), with
//! classifier-free guidance on the continuous track. A synthetic toy world
//! with exact oracles makes cross-modal learning measurable.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod network;
pub mod persistence;
pub mod real;
pub mod rng;
pub mod sampling;
pub mod schedules;
pub mod token_space;
pub mod toyworld;
pub mod training;

pub use error::{Error, Result};
