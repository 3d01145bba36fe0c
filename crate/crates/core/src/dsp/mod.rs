//! Trace types and the low-level signal operations the attack pipeline
//! composes: magnitude, low-pass filtering, normalization, windowed
//! statistics.
//!
//! All operations are pure: they take traces by reference and return new
//! traces, so a trace can be shared freely across threads.

mod filter;
pub mod io;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use filter::{design_lowpass, lowpass_filter, lowpass_filter_with_taps, notch_filter};

/// ISO/IEC 14443 carrier frequency.
pub const CARRIER_HZ: f64 = 13.56e6;

/// Default simulation rate, a quarter of the carrier.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = CARRIER_HZ / 4.0;

/// Card subcarrier offset, f_c / 16.
pub const SUBCARRIER_HZ: f64 = CARRIER_HZ / 16.0;

/// Half-width of the band a card response occupies around the carrier.
pub const CARD_BAND_HALF_WIDTH_HZ: f64 = SUBCARRIER_HZ;

/// The narrower capture half-width used by the original SDR flow graph.
pub const NARROW_CAPTURE_HALF_WIDTH_HZ: f64 = 423.75e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Synthetic,
    File,
}

/// A uniformly sampled, real-valued envelope signal.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeTrace {
    samples: Vec<f64>,
    sample_rate: f64,
    origin: Origin,
    label: Option<String>,
}

impl MagnitudeTrace {
    /// Builds a trace, rejecting non-finite samples and non-positive rates.
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::Parameter(format!("sample rate must be > 0, got {sample_rate}")));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Structural(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            origin: Origin::Synthetic,
            label: None,
        })
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same metadata, new samples. Callers guarantee finiteness.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        debug_assert!(samples.iter().all(|s| s.is_finite()));
        Self {
            samples,
            sample_rate: self.sample_rate,
            origin: self.origin,
            label: self.label.clone(),
        }
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.samples.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Raw in-phase/quadrature capture prior to envelope detection.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTrace {
    pub i_samples: Vec<f64>,
    pub q_samples: Vec<f64>,
    pub sample_rate: f64,
}

/// A frequency band given as a center and a half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub center_hz: f64,
    pub half_width_hz: f64,
}

impl BandSpec {
    pub fn new(center_hz: f64, half_width_hz: f64) -> Result<Self> {
        if !(half_width_hz > 0.0) {
            return Err(Error::Parameter(format!("band half-width must be > 0, got {half_width_hz}")));
        }
        Ok(Self { center_hz, half_width_hz })
    }

    /// 13.56 MHz ± 847.5 kHz, the band a card reply occupies.
    pub fn card_band() -> Self {
        Self { center_hz: CARRIER_HZ, half_width_hz: CARD_BAND_HALF_WIDTH_HZ }
    }

    /// 13.56 MHz ± 423.75 kHz.
    pub fn narrow_capture() -> Self {
        Self { center_hz: CARRIER_HZ, half_width_hz: NARROW_CAPTURE_HALF_WIDTH_HZ }
    }
}

impl Default for BandSpec {
    fn default() -> Self {
        Self::card_band()
    }
}

/// Envelope of an I/Q capture: `sqrt(i² + q²)` per sample.
pub fn magnitude(trace: &ComplexTrace) -> Result<MagnitudeTrace> {
    if trace.i_samples.len() != trace.q_samples.len() {
        return Err(Error::Structural(format!(
            "I has {} samples but Q has {}",
            trace.i_samples.len(),
            trace.q_samples.len()
        )));
    }
    let samples = trace
        .i_samples
        .iter()
        .zip(&trace.q_samples)
        .map(|(i, q)| i.hypot(*q))
        .collect();
    MagnitudeTrace::new(samples, trace.sample_rate)
}

/// Scales a trace so that its peak is 1.0. An all-zero trace is returned as is.
pub fn normalize(trace: &MagnitudeTrace) -> MagnitudeTrace {
    let peak = trace.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    if peak == 0.0 {
        return trace.clone();
    }
    trace.with_samples(trace.samples.iter().map(|s| s / peak).collect())
}

/// Arithmetic mean of a slice; 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation of a slice (two-pass).
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// Population standard deviation over `range` of the trace.
pub fn std_dev(trace: &MagnitudeTrace, range: Range<usize>) -> Result<f64> {
    if range.start >= range.end {
        return Err(Error::Parameter(format!("empty range {range:?}")));
    }
    if range.end > trace.len() {
        return Err(Error::Parameter(format!(
            "range {range:?} exceeds trace length {}",
            trace.len()
        )));
    }
    Ok(population_std(&trace.samples[range]))
}

/// Centered moving mean. Near the edges the mean is taken over the part of
/// the window that lies inside the trace, so the output keeps the input
/// length.
pub fn moving_average(trace: &MagnitudeTrace, window_samples: usize) -> Result<MagnitudeTrace> {
    if window_samples == 0 {
        return Err(Error::Parameter("moving-average window must be >= 1".into()));
    }
    if window_samples > trace.len() {
        return Err(Error::Parameter(format!(
            "window {window_samples} exceeds trace length {}",
            trace.len()
        )));
    }
    Ok(trace.with_samples(centered_mean(&trace.samples, window_samples)))
}

/// Slice-level centered moving mean used by [`moving_average`] and the
/// pipeline. Window `w` covers `[i - (w-1)/2, i + w/2]`.
pub(crate) fn centered_mean(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 || w <= 1 {
        return x.to_vec();
    }
    let back = (w - 1) / 2;
    let fwd = w / 2;
    // sums run over deviations from the first sample, which keeps constant
    // inputs exact
    let anchor = x[0];
    let x: Vec<f64> = x.iter().map(|v| v - anchor).collect();
    let mut out = Vec::with_capacity(n);
    let mut lo = 0usize;
    let mut hi = fwd.min(n - 1) + 1; // exclusive
    let mut sum: f64 = x[lo..hi].iter().sum();
    for i in 0..n {
        let new_lo = i.saturating_sub(back);
        let new_hi = (i + fwd).min(n - 1) + 1;
        while hi < new_hi {
            sum += x[hi];
            hi += 1;
        }
        while lo < new_lo {
            sum -= x[lo];
            lo += 1;
        }
        // re-anchor periodically so add/subtract drift stays bounded
        if i % w == 0 {
            sum = x[lo..hi].iter().sum();
        }
        out.push(anchor + sum / (hi - lo) as f64);
    }
    out
}

/// Linear-interpolated percentile (`q` in `[0, 1]`) of unsorted values.
pub(crate) fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut below, above) = v.select_nth_unstable_by(lo, |a, b| a.total_cmp(b));
    if frac == 0.0 {
        return below;
    }
    // the next order statistic is the smallest value above position `lo`
    let next = above.iter().copied().fold(f64::INFINITY, f64::min);
    below * (1.0 - frac) + next * frac
}
