//! Desk-scale cardiac world model.
//!
//! A phase-driven ODE provides the ground-truth environment, a small codec maps
//! beats to latent states, and an action-conditioned latent diffusion model
//! (trained with an ODE-derived energy anchor) predicts post-intervention
//! states that feed a mean-variance intervention ranker.

// Negated comparisons deliberately reject NaN in argument validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod action_space;
pub mod diffusion_engine;
pub mod ecg_ode;
pub mod epk_world_model;
pub mod io;
pub mod latent_codec;
pub mod nn;
pub mod risk_decision;
pub mod rollout_harness;
pub mod signal_metrics;
