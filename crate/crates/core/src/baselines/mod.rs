//! Linear comparison estimators.
//!
//! Both run on the raw (unscaled) panel over the covariate of interest and
//! produce the same [`CounterfactualEstimate`](crate::inference::CounterfactualEstimate)
//! shape as the sequence model, tagged with the estimator name.

mod mcnnm;
mod rsc;

pub use mcnnm::{mcnnm_estimate, LambdaChoice, McnnmConfig, McnnmFit};
pub use rsc::{rsc_estimate, RankCut, RscConfig, RscFit};
