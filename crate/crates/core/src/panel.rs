//! Canonical panel-data model: missing-data handling, scaling, low-rank
//! denoising, and pre/post-intervention window splitting.
//!
//! A [`Panel`] holds one target unit and N donor units observed over T time
//! steps and K covariates, together with an observed-mask that survives
//! every transformation so downstream losses can ignore missing entries.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::mat::Mat;
use crate::numerics;
use crate::{Error, Result};

/// Observation tensor of shape (units × time × covariates) plus mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    values: Vec<f64>,
    observed: Vec<bool>,
    pub unit_labels: Vec<String>,
    pub time_labels: Vec<String>,
    pub covariate_labels: Vec<String>,
    units: usize,
    time_len: usize,
    covariates: usize,
}

impl Panel {
    /// Builds a panel, validating shapes, label uniqueness, and finiteness of
    /// every observed value.
    pub fn new(
        values: Vec<f64>,
        observed: Vec<bool>,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
        covariate_labels: Vec<String>,
    ) -> Result<Self> {
        let units = unit_labels.len();
        let time_len = time_labels.len();
        let covariates = covariate_labels.len();
        if units < 2 || time_len < 2 || covariates < 1 {
            return Err(Error::Invalid(format!(
                "panel requires U >= 2, T >= 2, K >= 1 (got U={units}, T={time_len}, K={covariates})"
            )));
        }
        let len = units * time_len * covariates;
        if values.len() != len || observed.len() != len {
            return Err(Error::Invalid(format!(
                "panel storage length mismatch: expected {len}, got values={}, observed={}",
                values.len(),
                observed.len()
            )));
        }
        for labels in [&unit_labels, &time_labels, &covariate_labels] {
            for (i, a) in labels.iter().enumerate() {
                if labels[..i].contains(a) {
                    return Err(Error::Invalid(format!("duplicate label '{a}'")));
                }
            }
        }
        for (i, (&v, &m)) in values.iter().zip(&observed).enumerate() {
            if m && !v.is_finite() {
                return Err(Error::Invalid(format!(
                    "observed value at flat index {i} is not finite"
                )));
            }
        }
        Ok(Panel { values, observed, unit_labels, time_labels, covariate_labels, units, time_len, covariates })
    }

    #[inline]
    pub fn units(&self) -> usize {
        self.units
    }

    #[inline]
    pub fn time_len(&self) -> usize {
        self.time_len
    }

    #[inline]
    pub fn covariates(&self) -> usize {
        self.covariates
    }

    #[inline]
    fn idx(&self, unit: usize, t: usize, k: usize) -> usize {
        debug_assert!(unit < self.units && t < self.time_len && k < self.covariates);
        (unit * self.time_len + t) * self.covariates + k
    }

    #[inline]
    pub fn value(&self, unit: usize, t: usize, k: usize) -> f64 {
        self.values[self.idx(unit, t, k)]
    }

    #[inline]
    pub fn is_observed(&self, unit: usize, t: usize, k: usize) -> bool {
        self.observed[self.idx(unit, t, k)]
    }

    pub fn set_value(&mut self, unit: usize, t: usize, k: usize, value: f64) {
        let i = self.idx(unit, t, k);
        self.values[i] = value;
    }

    pub fn set_observed(&mut self, unit: usize, t: usize, k: usize, observed: bool) {
        let i = self.idx(unit, t, k);
        self.observed[i] = observed;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }
}

/// Which unit is treated, when, and which covariate is reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InterventionSpec {
    pub target_unit: usize,
    /// Intervention instance; predictions start at this time index.
    pub t0: usize,
    pub covariate_of_interest: usize,
}

impl InterventionSpec {
    pub fn new(target_unit: usize, t0: usize) -> Self {
        InterventionSpec { target_unit, t0, covariate_of_interest: 0 }
    }

    pub fn validate(&self, panel: &Panel) -> Result<()> {
        if self.target_unit >= panel.units() {
            return Err(Error::Invalid(format!(
                "target unit {} out of range (U={})",
                self.target_unit,
                panel.units()
            )));
        }
        if self.t0 == 0 || self.t0 >= panel.time_len() {
            return Err(Error::Invalid(format!(
                "intervention instance {} must lie in [1, T-1] (T={})",
                self.t0,
                panel.time_len()
            )));
        }
        if self.covariate_of_interest >= panel.covariates() {
            return Err(Error::Invalid(format!(
                "covariate of interest {} out of range (K={})",
                self.covariate_of_interest,
                panel.covariates()
            )));
        }
        Ok(())
    }
}

/// Per-covariate min/max over the scaling-fit region, in original units.
/// Degenerate covariates (max = min) are flagged and map to a constant 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl ScalingStats {
    #[inline]
    pub fn scale_value(&self, v: f64, k: usize) -> f64 {
        if self.degenerate[k] {
            0.5
        } else {
            (v - self.min[k]) / (self.max[k] - self.min[k])
        }
    }

    #[inline]
    pub fn invert_value(&self, v: f64, k: usize) -> f64 {
        if self.degenerate[k] {
            self.min[k]
        } else {
            v * (self.max[k] - self.min[k]) + self.min[k]
        }
    }
}

/// Fits per-covariate min/max using all observed donor entries over the full
/// period plus observed target entries strictly before the intervention.
/// Target post-intervention values never influence the statistics.
pub fn fit_scaling(panel: &Panel, spec: &InterventionSpec) -> Result<ScalingStats> {
    spec.validate(panel)?;
    let k_len = panel.covariates();
    let mut min = vec![f64::INFINITY; k_len];
    let mut max = vec![f64::NEG_INFINITY; k_len];
    let mut seen = vec![false; k_len];
    for unit in 0..panel.units() {
        let horizon = if unit == spec.target_unit { spec.t0 } else { panel.time_len() };
        for t in 0..horizon {
            for k in 0..k_len {
                if panel.is_observed(unit, t, k) {
                    let v = panel.value(unit, t, k);
                    min[k] = min[k].min(v);
                    max[k] = max[k].max(v);
                    seen[k] = true;
                }
            }
        }
    }
    if let Some(k) = seen.iter().position(|&s| !s) {
        return Err(Error::Invalid(format!(
            "covariate '{}' has no observed entries in the scaling-fit region",
            panel.covariate_labels[k]
        )));
    }
    let degenerate = min.iter().zip(&max).map(|(a, b)| a == b).collect();
    Ok(ScalingStats { min, max, degenerate })
}

/// Maps every value through `(v - min) / (max - min)`; the mask is kept.
pub fn apply_scaling(panel: &Panel, stats: &ScalingStats) -> Result<Panel> {
    if stats.min.len() != panel.covariates() {
        return Err(Error::Invalid("scaling stats do not match panel covariates".into()));
    }
    let mut out = panel.clone();
    for unit in 0..panel.units() {
        for t in 0..panel.time_len() {
            for k in 0..panel.covariates() {
                let v = panel.value(unit, t, k);
                if v.is_finite() {
                    out.set_value(unit, t, k, stats.scale_value(v, k));
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`apply_scaling`] for one covariate's series; exact on
/// non-degenerate covariates.
pub fn invert_scaling(series: &[f64], stats: &ScalingStats, covariate: usize) -> Result<Vec<f64>> {
    if covariate >= stats.min.len() {
        return Err(Error::Invalid(format!("covariate {covariate} out of range")));
    }
    Ok(series.iter().map(|&v| stats.invert_value(v, covariate)).collect())
}

/// Sets unobserved values to zero. The observed-mask is retained unchanged
/// so training losses can keep ignoring those entries.
pub fn impute_zeros(panel: &Panel) -> Panel {
    let mut out = panel.clone();
    for unit in 0..panel.units() {
        for t in 0..panel.time_len() {
            for k in 0..panel.covariates() {
                if !panel.is_observed(unit, t, k) {
                    out.set_value(unit, t, k, 0.0);
                }
            }
        }
    }
    out
}

/// Replaces the donor sub-tensor with its best rank-`m` approximation.
///
/// Donors are flattened to an N × (T*K) matrix, truncated via SVD, and
/// written back; the target unit's rows are untouched. Expects a zero-imputed
/// panel.
pub fn lowrank_denoise(panel: &Panel, spec: &InterventionSpec, m: usize) -> Result<Panel> {
    spec.validate(panel)?;
    let donors: Vec<usize> = (0..panel.units()).filter(|&u| u != spec.target_unit).collect();
    let n = donors.len();
    let flat_cols = panel.time_len() * panel.covariates();
    let max_rank = n.min(flat_cols);
    if m == 0 || m > max_rank {
        return Err(Error::Invalid(format!(
            "singular-value count {m} out of range [1, {max_rank}]"
        )));
    }
    let mut flat = Mat::zeros(n, flat_cols);
    for (row, &unit) in donors.iter().enumerate() {
        for t in 0..panel.time_len() {
            for k in 0..panel.covariates() {
                flat[(row, t * panel.covariates() + k)] = panel.value(unit, t, k);
            }
        }
    }
    let truncated = numerics::svd(&flat)?.reconstruct_truncated(m);
    let mut out = panel.clone();
    for (row, &unit) in donors.iter().enumerate() {
        for t in 0..panel.time_len() {
            for k in 0..panel.covariates() {
                out.set_value(unit, t, k, truncated[(row, t * panel.covariates() + k)]);
            }
        }
    }
    Ok(out)
}

/// A contiguous slice of the panel covering `len` time steps for a chosen
/// set of units, annotated with everything tokenization needs: the global
/// unit indices (for spatial embeddings), the designated target row, and the
/// global start time (for temporal embeddings).
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub unit_ids: Vec<usize>,
    pub target_row: usize,
    pub start_time: usize,
    pub len: usize,
    pub covariates: usize,
    values: Vec<f64>,
}

impl Window {
    pub fn zeros(unit_ids: Vec<usize>, target_row: usize, start_time: usize, len: usize, covariates: usize) -> Self {
        let values = vec![0.0; unit_ids.len() * len * covariates];
        Window { unit_ids, target_row, start_time, len, covariates, values }
    }

    #[inline]
    pub fn unit_count(&self) -> usize {
        self.unit_ids.len()
    }

    #[inline]
    fn idx(&self, row: usize, t: usize, k: usize) -> usize {
        debug_assert!(row < self.unit_ids.len() && t < self.len && k < self.covariates);
        (row * self.len + t) * self.covariates + k
    }

    #[inline]
    pub fn value(&self, row: usize, t: usize, k: usize) -> f64 {
        self.values[self.idx(row, t, k)]
    }

    pub fn set_value(&mut self, row: usize, t: usize, k: usize, value: f64) {
        let i = self.idx(row, t, k);
        self.values[i] = value;
    }

    /// Copies rows for `unit_ids` over `[start_time, start_time + len)` out
    /// of the panel.
    pub fn from_panel(
        panel: &Panel,
        unit_ids: Vec<usize>,
        target_row: usize,
        start_time: usize,
        len: usize,
    ) -> Result<Self> {
        if start_time + len > panel.time_len() {
            return Err(Error::Invalid(format!(
                "window [{start_time}, {}) overflows horizon T={}",
                start_time + len,
                panel.time_len()
            )));
        }
        if target_row >= unit_ids.len() {
            return Err(Error::Invalid("window target row out of range".into()));
        }
        let mut w = Window::zeros(unit_ids, target_row, start_time, len, panel.covariates());
        for row in 0..w.unit_count() {
            let unit = w.unit_ids[row];
            if unit >= panel.units() {
                return Err(Error::Invalid(format!("window unit id {unit} out of range")));
            }
            for t in 0..len {
                for k in 0..panel.covariates() {
                    let v = panel.value(unit, start_time + t, k);
                    w.set_value(row, t, k, v);
                }
            }
        }
        Ok(w)
    }
}

/// Splits the full unit set around `anchor`: a pre window of length
/// `l_minus` ending at `anchor - 1` and a post window of length `l_plus`
/// starting at `anchor`. The pair partitions `[anchor - l_minus, anchor +
/// l_plus)` with unit order preserved.
pub fn split_pre_post(
    panel: &Panel,
    spec: &InterventionSpec,
    l_minus: usize,
    l_plus: usize,
    anchor: usize,
) -> Result<(Window, Window)> {
    spec.validate(panel)?;
    if anchor < l_minus {
        return Err(Error::Invalid(format!(
            "pre window underflows: anchor {anchor} < l_minus {l_minus}"
        )));
    }
    if anchor + l_plus > panel.time_len() {
        return Err(Error::Invalid(format!(
            "post window overflows: anchor {anchor} + l_plus {l_plus} > T={}",
            panel.time_len()
        )));
    }
    let unit_ids: Vec<usize> = (0..panel.units()).collect();
    let pre = Window::from_panel(panel, unit_ids.clone(), spec.target_unit, anchor - l_minus, l_minus)?;
    let post = Window::from_panel(panel, unit_ids, spec.target_unit, anchor, l_plus)?;
    Ok((pre, post))
}
