//! Temporal position embeddings from acquisition timestamps.
//!
//! Two time axes are supported: calendar days and thermal time (growing
//! degree days). Both use the same Fourier embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MAX_PERIOD: f64 = 10_000.0;

/// Acquisition times of one sample with their validity flags.
///
/// Timestamps are not required to be sorted; a sample is a set of
/// acquisitions, not a sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub timestamps: Vec<f32>,
    pub valid: Vec<bool>,
}

impl TimeAxis {
    pub fn new(timestamps: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if timestamps.len() != valid.len() {
            return Err(Error::Data(format!(
                "{} timestamps but {} mask entries",
                timestamps.len(),
                valid.len()
            )));
        }
        if let Some(t) = timestamps
            .iter()
            .zip(&valid)
            .find(|(t, &v)| v && !(t.is_finite() && **t >= 0.0))
        {
            return Err(Error::Data(format!("invalid timestamp {}", t.0)));
        }
        Ok(Self { timestamps, valid })
    }

    /// Every step valid.
    pub fn all_valid(timestamps: Vec<f32>) -> Result<Self> {
        let valid = vec![true; timestamps.len()];
        Self::new(timestamps, valid)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Keeps the steps at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            timestamps: indices.iter().map(|&i| self.timestamps[i]).collect(),
            valid: indices.iter().map(|&i| self.valid[i]).collect(),
        }
    }
}

/// Fourier embedding `[sin(t / w_i), cos(t / w_i)]` interleaved, with
/// `w_i = max_period^(2i / d_pe)`. Rows of invalid steps are zero.
pub fn sinusoidal_pe<T: Scalar>(time: &TimeAxis, d_pe: usize, max_period: f64) -> Result<Tensor<T>> {
    if d_pe == 0 || !d_pe.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding width must be even and positive, got {d_pe}")));
    }
    if !(max_period > 0.0 && max_period.is_finite()) {
        return Err(Error::Config(format!("max_period must be positive, got {max_period}")));
    }
    let half = d_pe / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| max_period.powf(-(2.0 * i as f64) / d_pe as f64))
        .collect();
    let mut data = vec![T::zero(); time.len() * d_pe];
    for (k, (&t, &valid)) in time.timestamps.iter().zip(&time.valid).enumerate() {
        if !valid {
            continue;
        }
        let row = &mut data[k * d_pe..(k + 1) * d_pe];
        for (i, &f) in inv_freq.iter().enumerate() {
            let angle = t as f64 * f;
            row[2 * i] = T::of(angle.sin());
            row[2 * i + 1] = T::of(angle.cos());
        }
    }
    Tensor::new(&[time.len(), d_pe], data)
}

/// Accumulated growing degree days at each acquisition.
///
/// Day `d` (1-based) contributes `max(0, (tmin_d + tmax_d) / 2 - t_base)`;
/// an acquisition on day `d` sees the sum over days `1..=d`.
pub fn gdd_accumulate(
    daily_tmin: &[f64],
    daily_tmax: &[f64],
    t_base: f64,
    acquisition_days: &[usize],
) -> Result<TimeAxis> {
    if daily_tmin.len() != daily_tmax.len() {
        return Err(Error::Data(format!(
            "{} minimum vs {} maximum temperatures",
            daily_tmin.len(),
            daily_tmax.len()
        )));
    }
    let mut cumulative = Vec::with_capacity(daily_tmin.len() + 1);
    cumulative.push(0.0);
    let mut acc = 0.0f64;
    for (lo, hi) in daily_tmin.iter().zip(daily_tmax) {
        acc += ((lo + hi) / 2.0 - t_base).max(0.0);
        cumulative.push(acc);
    }
    let timestamps = acquisition_days
        .iter()
        .map(|&d| {
            if d == 0 || d > daily_tmin.len() {
                Err(Error::Data(format!(
                    "acquisition day {d} outside temperature record 1..={}",
                    daily_tmin.len()
                )))
            } else {
                Ok(cumulative[d] as f32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    TimeAxis::all_valid(timestamps)
}

/// Thermal positional encoding: the Fourier embedding over accumulated
/// degree days.
pub fn thermal_pe<T: Scalar>(gdd_axis: &TimeAxis, d_pe: usize, max_gdd_period: f64) -> Result<Tensor<T>> {
    sinusoidal_pe(gdd_axis, d_pe, max_gdd_period)
}
