//! Estimation of post-intervention counterfactual trajectories for panel
//! data with a small donor pool.
//!
//! The crate bundles three estimator families behind one panel-data model:
//!
//! * a spatiotemporal encoder-decoder network ([`model`], [`training`],
//!   [`inference`]) that is pre-trained on pseudo-counterfactual tasks over
//!   the donor pool and fine-tuned on the target's pre-intervention period,
//! * linear synthetic-control baselines ([`baselines`]): SVD-denoised LASSO
//!   regression and matrix completion with a nuclear-norm penalty,
//! * a latent-factor synthetic benchmark generator ([`synthgen`]) with a
//!   known ground-truth mean trajectory for scoring.
//!
//! Everything in here is deterministic given explicit seeds and pure of IO;
//! file formats, the CLI, and the experiment harness live in the companion
//! `panelcast` crate. The crate is `no_std`-compatible (with `alloc`) when
//! built without the `std` feature.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
mod error;
pub mod inference;
mod mat;
pub mod model;
pub mod numerics;
pub mod panel;
pub mod rng;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
pub use mat::Mat;
