//! Latent-factor synthetic benchmark generator.
//!
//! Mean trajectories come from two fixed factor functions of a per-unit
//! latent θ and a per-time latent ρ (with ρⱼ = j); observations add iid
//! Gaussian noise. The target's mean trajectory is drawn from the same
//! family as the donors but is not a linear combination of donor rows,
//! and it is retained as the scoring ground truth.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::{Rng, SeedableRng};

use crate::panel::Panel;
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SynthConfig {
    /// Donor count N; the generated panel has N+1 units with the target at
    /// row 0.
    pub n_donors: usize,
    /// Horizon T.
    pub horizon: usize,
    /// Intervention instance T0.
    pub t0: usize,
    /// Observation noise variance σ².
    pub noise_variance: f64,
    pub seed: u64,
    /// Explicit per-unit latents (target first); drawn uniform [0,1] from
    /// the unit substreams when absent.
    pub theta: Option<Vec<f64>>,
}

impl SynthConfig {
    pub fn new(n_donors: usize, horizon: usize, t0: usize, noise_variance: f64, seed: u64) -> Self {
        SynthConfig { n_donors, horizon, t0, noise_variance, seed, theta: None }
    }

    fn validate(&self) -> Result<()> {
        if self.n_donors < 1 {
            return Err(Error::Invalid("synthetic panel needs at least one donor".into()));
        }
        if self.horizon < 2 || self.t0 == 0 || self.t0 >= self.horizon {
            return Err(Error::Invalid(format!(
                "need 0 < T0 < T (got T0={}, T={})",
                self.t0, self.horizon
            )));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Invalid("noise variance must be non-negative".into()));
        }
        if let Some(theta) = &self.theta {
            if theta.len() != self.n_donors + 1 {
                return Err(Error::Invalid(format!(
                    "explicit theta must have N+1 = {} entries, got {}",
                    self.n_donors + 1,
                    theta.len()
                )));
            }
        }
        Ok(())
    }
}

/// First-covariate factor function: trend in θ plus a seasonal profile in ρ
/// built from degree-valued angles.
pub fn mean_covariate_1(theta: f64, rho: f64, horizon: usize) -> f64 {
    let t = horizon as f64;
    let f1 = rho % 360.0;
    let f2 = rho % 180.0;
    let rad = core::f64::consts::PI / 180.0;
    theta
        + (rho * theta / t) * (rho / t).exp()
        + (2.0 * f1 * rad).cos()
        + (f1 * rad).sin()
        + (2.0 * f2 * rad).cos()
        + (f2 * rad).sin()
}

/// Second-covariate factor function: a logistic curve in θ and ρ with range
/// (0, 10), strictly increasing in θ for ρ ≥ 0.
pub fn mean_covariate_2(theta: f64, rho: f64, horizon: usize) -> f64 {
    let t = horizon as f64;
    10.0 / (1.0 + (-theta - rho / t - 0.7 * theta * rho / t).exp())
}

/// Generator output: the noiseless mean panel, the observed (noisy) panel,
/// and the target's post-intervention mean of the first covariate.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub mean: Panel,
    pub observed: Panel,
    /// `mean[target, t, 0]` for `t in [t0, horizon)`; for scoring only.
    pub truth: Vec<f64>,
}

/// Generates the benchmark panel. One ChaCha substream per unit (stream id
/// = unit row) makes rows reproducible independently of each other: the
/// unit's θ is drawn first (when not explicit), then its noise in
/// time-major order.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let units = config.n_donors + 1;
    let horizon = config.horizon;
    let k_len = 2usize;
    let sigma = config.noise_variance.sqrt();

    let mut mean_values = Vec::with_capacity(units * horizon * k_len);
    let mut observed_values = Vec::with_capacity(units * horizon * k_len);
    for unit in 0..units {
        let mut rng = StreamRng::seed_from_u64(config.seed);
        rng.set_stream(unit as u64);
        let theta = match &config.theta {
            Some(t) => t[unit],
            None => rng.random::<f64>(),
        };
        for t in 0..horizon {
            let rho = t as f64;
            let m = [mean_covariate_1(theta, rho, horizon), mean_covariate_2(theta, rho, horizon)];
            for &value in &m {
                let noise: f64 = if sigma > 0.0 { crate::rng::normal(&mut rng) * sigma } else { 0.0 };
                mean_values.push(value);
                observed_values.push(value + noise);
            }
        }
    }

    let unit_labels: Vec<String> = (0..units)
        .map(|u| if u == 0 { "target".into() } else { format!("d{u}") })
        .collect();
    let time_labels: Vec<String> = (0..horizon).map(|t| format!("{t}")).collect();
    let covariate_labels: Vec<String> = (1..=k_len).map(|k| format!("c{k}")).collect();

    let mask = alloc::vec![true; units * horizon * k_len];
    let mean = Panel::new(mean_values, mask.clone(), unit_labels.clone(), time_labels.clone(), covariate_labels.clone())?;
    let observed = Panel::new(observed_values, mask, unit_labels, time_labels, covariate_labels)?;
    let truth: Vec<f64> = (config.t0..horizon).map(|t| mean.value(0, t, 0)).collect();
    Ok(SynthOutput { mean, observed, truth })
}
