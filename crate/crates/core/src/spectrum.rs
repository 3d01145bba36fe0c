//! Power spectrum and amplitude statistics of blocking-card recordings, and
//! the rule set that labels a card from a pair of recordings (with and
//! without a reader field).

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::dsp::{self, MagnitudeTrace, CARD_BAND_HALF_WIDTH_HZ};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            // periodic Hann, which sums exactly under 50 % overlap
            Window::Hann => (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub frequencies_hz: Vec<f64>,
    /// Power per Hz; `Σ power · bin_width` is the mean-square power.
    pub power: Vec<f64>,
    /// Power in dB relative to the strongest bin.
    pub power_db: Vec<f64>,
    pub bin_width_hz: f64,
}

impl Psd {
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.bin_width_hz
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frequency_hz,power,power_db\n");
        for ((f, p), d) in self.frequencies_hz.iter().zip(&self.power).zip(&self.power_db) {
            out.push_str(&format!("{f},{p},{d}\n"));
        }
        out
    }

    /// Bin indices whose centre lies in `(lo_hz, hi_hz]`.
    fn band(&self, lo_hz: f64, hi_hz: f64) -> std::ops::Range<usize> {
        let lo = self.frequencies_hz.iter().position(|&f| f > lo_hz).unwrap_or(self.power.len());
        let hi = self.frequencies_hz.iter().rposition(|&f| f <= hi_hz).map_or(lo, |i| i + 1);
        lo..hi.max(lo)
    }
}

/// Welch estimate with a Hann window.
pub fn estimate_psd(trace: &MagnitudeTrace, segment_len: usize) -> Result<Psd> {
    estimate_psd_with(trace, segment_len, Window::Hann)
}

/// Welch estimate: averaged periodograms of half-overlapping windowed
/// segments, scaled so that the PSD integrates to the mean-square power.
pub fn estimate_psd_with(trace: &MagnitudeTrace, segment_len: usize, window: Window) -> Result<Psd> {
    if segment_len < 2 {
        return Err(Error::Parameter("PSD segment length must be ≥ 2".into()));
    }
    if trace.len() < segment_len {
        return Err(Error::Parameter(format!(
            "trace of {} samples is shorter than one {segment_len}-sample segment",
            trace.len()
        )));
    }
    let x = trace.samples();
    let fs = trace.sample_rate();
    let w = window.coefficients(segment_len);
    let w_power: f64 = w.iter().map(|v| v * v).sum();
    let step = (segment_len / 2).max(1);
    let fft = FftPlanner::new().plan_fft_forward(segment_len);
    let n_bins = segment_len / 2 + 1;
    let mut acc = vec![0.0; n_bins];
    let mut count = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); segment_len];
    let mut start = 0;
    while start + segment_len <= x.len() {
        for (b, (s, c)) in buf.iter_mut().zip(x[start..start + segment_len].iter().zip(&w)) {
            *b = Complex::new(s * c, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        count += 1;
        start += step;
    }
    let scale = 1.0 / (fs * w_power * count as f64);
    let power: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let one_sided = if k == 0 || (segment_len % 2 == 0 && k == n_bins - 1) { 1.0 } else { 2.0 };
            p * scale * one_sided
        })
        .collect();
    let peak = power.iter().cloned().fold(0.0, f64::max);
    let power_db = power
        .iter()
        .map(|&p| if peak > 0.0 { 10.0 * (p / peak).max(1e-300).log10() } else { 0.0 })
        .collect();
    let bin_width_hz = fs / segment_len as f64;
    Ok(Psd {
        frequencies_hz: (0..n_bins).map(|k| k as f64 * bin_width_hz).collect(),
        power,
        power_db,
        bin_width_hz,
    })
}

/// A narrowband component found in a PSD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Interpolated centre frequency.
    pub offset_hz: f64,
    /// Height above the median level of the searched band.
    pub prominence_db: f64,
}

/// Local maxima in `(lo_hz, hi_hz]` standing at least `threshold_db` above
/// the band median. Within `min_separation_bins` only the strongest peak is
/// kept, which discards window sidelobes. Sorted by frequency.
pub fn find_peaks(psd: &Psd, lo_hz: f64, hi_hz: f64, threshold_db: f64, min_separation_bins: usize) -> Vec<Peak> {
    let band = psd.band(lo_hz, hi_hz);
    if band.len() < 3 {
        return Vec::new();
    }
    let floor = dsp::percentile(&psd.power[band.clone()], 0.5);
    if !(floor > 0.0) {
        // a noiseless band: any non-zero bin is a line
        return lines_without_floor(psd, band, min_separation_bins);
    }
    let p = &psd.power;
    let mut candidates: Vec<(usize, f64)> = band
        .clone()
        .filter(|&k| k > 0 && k + 1 < p.len() && p[k] >= p[k - 1] && p[k] > p[k + 1])
        .map(|k| (k, 10.0 * (p[k] / floor).log10()))
        .filter(|&(_, prom)| prom >= threshold_db)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| k.0.abs_diff(c.0) > min_separation_bins) {
            kept.push(c);
        }
    }
    let mut peaks: Vec<Peak> = kept
        .into_iter()
        .map(|(k, prom)| Peak { offset_hz: interpolate_peak(psd, k), prominence_db: prom })
        .collect();
    peaks.sort_by(|a, b| a.offset_hz.total_cmp(&b.offset_hz));
    peaks
}

fn lines_without_floor(psd: &Psd, band: std::ops::Range<usize>, min_sep: usize) -> Vec<Peak> {
    let p = &psd.power;
    let peak = band.clone().map(|k| p[k]).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Vec::new();
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut order: Vec<usize> = band
        .filter(|&k| k > 0 && k + 1 < p.len() && p[k] >= p[k - 1] && p[k] > p[k + 1] && p[k] > peak * 1e-6)
        .collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    for k in order {
        if kept.iter().all(|&j| j.abs_diff(k) > min_sep) {
            kept.push(k);
        }
    }
    kept.sort_unstable();
    kept.into_iter()
        .map(|k| Peak { offset_hz: interpolate_peak(psd, k), prominence_db: f64::INFINITY })
        .collect()
}

/// Parabolic interpolation of the peak position on the log spectrum.
fn interpolate_peak(psd: &Psd, k: usize) -> f64 {
    let p = &psd.power;
    if k == 0 || k + 1 >= p.len() || p[k - 1] <= 0.0 || p[k + 1] <= 0.0 {
        return psd.frequencies_hz[k];
    }
    let (a, b, c) = (p[k - 1].ln(), p[k].ln(), p[k + 1].ln());
    let denom = a - 2.0 * b + c;
    let delta = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    psd.frequencies_hz[k] + delta.clamp(-0.5, 0.5) * psd.bin_width_hz
}

/// Geometric over arithmetic mean of the PSD in `(lo_hz, hi_hz]`.
pub fn spectral_flatness(psd: &Psd, lo_hz: f64, hi_hz: f64) -> f64 {
    let band = psd.band(lo_hz, hi_hz);
    let p = &psd.power[band];
    if p.is_empty() {
        return 0.0;
    }
    let arith = p.iter().sum::<f64>() / p.len() as f64;
    if !(arith > 0.0) {
        return 0.0;
    }
    let geo = (p.iter().map(|v| v.max(1e-300).ln()).sum::<f64>() / p.len() as f64).exp();
    (geo / arith).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Amplitude distribution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` bin edges.
    pub edges: Vec<f64>,
    /// Fraction of samples per bin; sums to 1.
    pub probabilities: Vec<f64>,
    pub samples: usize,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    /// Number of local maxima holding at least 10 % of the tallest bin,
    /// after a three-bin smoothing.
    pub fn mode_count(&self) -> usize {
        let p = dsp::centered_mean(&self.probabilities, 3);
        let top = p.iter().cloned().fold(0.0, f64::max);
        let n = p.len();
        (0..n)
            .filter(|&i| {
                let left = if i == 0 { 0.0 } else { p[i - 1] };
                let right = if i + 1 == n { 0.0 } else { p[i + 1] };
                p[i] > left && p[i] >= right && p[i] >= 0.1 * top
            })
            .count()
    }

    /// Chi-square goodness-of-fit p-value against a normal law fitted by
    /// moments. Bins expecting fewer than five samples are pooled into the
    /// tails.
    pub fn gaussian_fit_p_value(&self, mean: f64, std: f64) -> f64 {
        if !(std > 0.0) || self.samples == 0 {
            return 0.0;
        }
        let normal = Normal::new(mean, std).expect("std > 0");
        let n = self.samples as f64;
        let mut observed = Vec::new();
        let mut expected = Vec::new();
        let (mut o_acc, mut e_acc) = (0.0, 0.0);
        let last = self.probabilities.len() - 1;
        for (i, &p) in self.probabilities.iter().enumerate() {
            let lo = if i == 0 { f64::NEG_INFINITY } else { self.edges[i] };
            let hi = if i == last { f64::INFINITY } else { self.edges[i + 1] };
            o_acc += p * n;
            e_acc += (normal.cdf(hi) - normal.cdf(lo)) * n;
            if e_acc >= 5.0 {
                observed.push(o_acc);
                expected.push(e_acc);
                o_acc = 0.0;
                e_acc = 0.0;
            }
        }
        if let (Some(o), Some(e)) = (observed.last_mut(), expected.last_mut()) {
            *o += o_acc;
            *e += e_acc;
        }
        if observed.len() <= 3 {
            return 0.0;
        }
        let stat: f64 = observed.iter().zip(&expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
        let dof = (observed.len() - 3) as f64;
        1.0 - ChiSquared::new(dof).expect("dof > 0").cdf(stat)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,probability\n");
        for (e, p) in self.edges.windows(2).zip(&self.probabilities) {
            out.push_str(&format!("{},{},{}\n", e[0], e[1], p));
        }
        out
    }
}

/// Normalized histogram of sample amplitudes over `bins` equal bins
/// spanning the sample range.
pub fn amplitude_pdf(trace: &MagnitudeTrace, bins: usize) -> Result<Histogram> {
    if bins < 8 {
        return Err(Error::Parameter(format!("at least 8 histogram bins required, got {bins}")));
    }
    let x = trace.samples();
    if x.is_empty() {
        return Err(Error::Parameter("empty trace".into()));
    }
    let (lo, hi) = (trace.min(), trace.max());
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in x {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = x.len() as f64;
    Ok(Histogram {
        edges: (0..=bins).map(|i| lo + i as f64 * width).collect(),
        probabilities: counts.iter().map(|&c| c as f64 / n).collect(),
        samples: x.len(),
    })
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CardLabel {
    ReactiveGaussian,
    ReactiveFixedFrequency,
    Active,
    Shielding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub segment_len: usize,
    /// Noise power, relative to the squared carrier level, below which a
    /// recording counts as idle.
    pub idle_threshold: f64,
    pub flatness_threshold: f64,
    pub peak_threshold_db: f64,
    pub min_peaks: usize,
    /// Upper edge of the band searched for noise structure.
    pub band_hz: f64,
    pub histogram_bins: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            segment_len: 1024,
            idle_threshold: 1e-4,
            flatness_threshold: 0.5,
            peak_threshold_db: 12.0,
            min_peaks: 3,
            band_hz: CARD_BAND_HALF_WIDTH_HZ,
            histogram_bins: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub psd: Psd,
    pub amplitude_histogram: Histogram,
    pub spectral_flatness: f64,
    pub detected_peaks: Vec<Peak>,
    /// Mode count of the amplitude histogram.
    pub amplitude_modes: usize,
    /// Chi-square p-value of the amplitude histogram against a normal law.
    pub gaussian_fit_p: f64,
    /// Noise power with the field on, relative to the squared carrier.
    pub relative_noise_with_field: f64,
    /// Power without a field, relative to the squared carrier.
    pub relative_power_without_field: f64,
    pub label: CardLabel,
}

impl SpectrumReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Labels a blocking card from a recording taken inside a reader field and
/// one taken without a field.
///
/// Powers are measured relative to the squared mean level of the
/// with-field recording, so the rules do not depend on amplitude units:
///
/// 1. power without field above idle: the card emits on its own, `Active`;
/// 2. with-field fluctuation at idle level: nothing emitted, `Shielding`;
/// 3. flat spectrum over the card band: `ReactiveGaussian`;
/// 4. at least `min_peaks` narrow peaks: `ReactiveFixedFrequency`;
/// 5. otherwise `ReactiveGaussian`.
pub fn classify_blocking_card(
    with_field: &MagnitudeTrace,
    without_field: &MagnitudeTrace,
    cfg: &ClassifierConfig,
) -> Result<SpectrumReport> {
    if with_field.sample_rate() != without_field.sample_rate() {
        return Err(Error::Parameter(format!(
            "sample rates differ: {} vs {}",
            with_field.sample_rate(),
            without_field.sample_rate()
        )));
    }
    let on = with_field.samples();
    let off = without_field.samples();
    if on.is_empty() || off.is_empty() {
        return Err(Error::Parameter("both recordings must be non-empty".into()));
    }
    let mean_on = dsp::mean(on);
    let var_on = dsp::population_std(on).powi(2);
    let ms_off = off.iter().map(|v| v * v).sum::<f64>() / off.len() as f64;
    // reference: carrier level when present, else the overall RMS
    let rms_on = (on.iter().map(|v| v * v).sum::<f64>() / on.len() as f64).sqrt();
    let reference = if mean_on.abs() > 0.0 { mean_on.abs() } else { rms_on };
    let (rel_on, rel_off) = if reference > 0.0 {
        (var_on / (reference * reference), ms_off / (reference * reference))
    } else if ms_off > 0.0 {
        (0.0, f64::INFINITY)
    } else {
        (0.0, 0.0)
    };

    // structure of the field-on fluctuation, carrier removed
    let ac: Vec<f64> = on.iter().map(|v| v - mean_on).collect();
    let ac = MagnitudeTrace::new(ac, with_field.sample_rate())?;
    let seg = cfg.segment_len.min(ac.len()).max(2);
    let psd = estimate_psd(&ac, seg)?;
    let flatness = spectral_flatness(&psd, 0.0, cfg.band_hz);
    let dc_guard = 2.0 * psd.bin_width_hz;
    let peaks = find_peaks(&psd, dc_guard, cfg.band_hz, cfg.peak_threshold_db, 4);
    let histogram = amplitude_pdf(with_field, cfg.histogram_bins)?;
    let gaussian_fit_p = histogram.gaussian_fit_p_value(mean_on, var_on.sqrt());

    let label = if rel_off > cfg.idle_threshold {
        CardLabel::Active
    } else if rel_on <= cfg.idle_threshold {
        CardLabel::Shielding
    } else if flatness >= cfg.flatness_threshold {
        CardLabel::ReactiveGaussian
    } else if peaks.len() >= cfg.min_peaks {
        CardLabel::ReactiveFixedFrequency
    } else {
        CardLabel::ReactiveGaussian
    };
    Ok(SpectrumReport {
        psd,
        amplitude_modes: histogram.mode_count(),
        amplitude_histogram: histogram,
        spectral_flatness: flatness,
        detected_peaks: peaks,
        gaussian_fit_p,
        relative_noise_with_field: rel_on,
        relative_power_without_field: rel_off,
        label,
    })
}

// ---------------------------------------------------------------------------
// Synthetic recordings
// ---------------------------------------------------------------------------

/// Receiver noise floor added to every synthetic recording.
pub const RECEIVER_NOISE_STD: f64 = 1e-5;

/// A pair of synthetic recordings (field on, field off) of a card with the
/// given behaviour, `n` samples each at the default rate.
pub fn synthetic_recordings(label: CardLabel, n: usize, seed: u64) -> Result<(MagnitudeTrace, MagnitudeTrace)> {
    use crate::jammer::{gen_gaussian_noise, gen_multitone_noise};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let fs = dsp::DEFAULT_SAMPLE_RATE_HZ;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor_on = gen_gaussian_noise(n, 1.0, RECEIVER_NOISE_STD, fs, rng.random())?;
    let floor_off = gen_gaussian_noise(n, 1.0, RECEIVER_NOISE_STD, fs, rng.random())?;
    let carrier = 1.0;
    let (on, off): (Vec<f64>, Vec<f64>) = match label {
        CardLabel::ReactiveGaussian => {
            let std = rng.random_range(0.01..0.2);
            let noise = gen_gaussian_noise(n, 1.0, std, fs, rng.random())?;
            (noise.samples().iter().map(|v| carrier + v).collect(), vec![0.0; n])
        }
        CardLabel::ReactiveFixedFrequency => {
            let spacing = rng.random_range(0.1e6..0.25e6);
            let amplitude = rng.random_range(0.02..0.08);
            let tones = gen_multitone_noise(n, spacing, &dsp::BandSpec::card_band(), amplitude, fs, rng.random())?;
            let white = gen_gaussian_noise(n, 1.0, 0.1 * amplitude, fs, rng.random())?;
            let on = tones.samples().iter().zip(white.samples()).map(|(t, w)| carrier + t + w).collect();
            (on, vec![0.0; n])
        }
        CardLabel::Active => {
            let std = rng.random_range(0.01..0.2);
            let a = gen_gaussian_noise(n, 1.0, std, fs, rng.random())?;
            let b = gen_gaussian_noise(n, 1.0, std, fs, rng.random())?;
            (a.samples().iter().map(|v| carrier + v).collect(), b.samples().to_vec())
        }
        CardLabel::Shielding => {
            let attenuation = rng.random_range(0.001..0.5);
            (vec![carrier * attenuation; n], vec![0.0; n])
        }
    };
    let add = |x: Vec<f64>, f: &MagnitudeTrace| -> Vec<f64> { x.iter().zip(f.samples()).map(|(a, b)| a + b).collect() };
    Ok((
        MagnitudeTrace::new(add(on, &floor_on), fs)?.with_label("with field"),
        MagnitudeTrace::new(add(off, &floor_off), fs)?.with_label("without field"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::DEFAULT_SAMPLE_RATE_HZ as FS;
    use crate::jammer::{gen_gaussian_noise, NoiseProfile};

    fn tone(f: f64, n: usize, amp: f64) -> MagnitudeTrace {
        MagnitudeTrace::new((0..n).map(|i| amp * (2.0 * PI * f * i as f64 / FS + 0.4).cos()).collect(), FS).unwrap()
    }

    #[test]
    fn tone_gives_single_dominant_bin() {
        let n = 1 << 16;
        let seg = 1024;
        let f = 200.0 * FS / seg as f64;
        let psd = estimate_psd(&tone(f, n, 1.0), seg).unwrap();
        let k = psd.power_db.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(k, 200);
        let median = dsp::percentile(&psd.power_db, 0.5);
        assert!(-median >= 30.0);
    }

    #[test]
    fn white_noise_is_flat() {
        let t = gen_gaussian_noise(1_000_000, 1.0, 1.0, FS, 1).unwrap();
        let psd = estimate_psd(&t, 1024).unwrap();
        // DC and Nyquist bins are one-sided and sit lower; compare the rest
        let inner = &psd.power[1..psd.power.len() - 1];
        let max = inner.iter().cloned().fold(0.0, f64::max);
        let median = dsp::percentile(inner, 0.5);
        assert!(10.0 * (max / median).log10() <= 6.0);
        assert!(spectral_flatness(&psd, 0.0, CARD_BAND_HALF_WIDTH_HZ) > 0.95);
    }

    #[test]
    fn constant_signal_has_only_dc() {
        let t = MagnitudeTrace::new(vec![0.7; 4096], FS).unwrap();
        let psd = estimate_psd_with(&t, 512, Window::Rectangular).unwrap();
        assert!(psd.power[0] > 0.0);
        assert!(psd.power[1..].iter().all(|&p| p < 1e-20 * psd.power[0]));
        assert!((psd.total_power() - 0.49).abs() < 1e-9);
    }

    #[test]
    fn parseval_holds() {
        for (window, seed) in [(Window::Hann, 3), (Window::Rectangular, 4)] {
            let noise = gen_gaussian_noise(1 << 18, 1.0, 0.3, FS, seed).unwrap();
            let t = MagnitudeTrace::new(
                noise.samples().iter().zip(tone(400e3, 1 << 18, 0.5).samples()).map(|(a, b)| a + b + 0.2).collect(),
                FS,
            )
            .unwrap();
            let psd = estimate_psd_with(&t, 2048, window).unwrap();
            let ms = t.samples().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
            assert!((psd.total_power() / ms - 1.0).abs() < 0.02, "{window:?}");
        }
    }

    #[test]
    fn short_trace_is_rejected() {
        let t = MagnitudeTrace::new(vec![0.0; 100], FS).unwrap();
        assert!(matches!(estimate_psd(&t, 256), Err(Error::Parameter(_))));
    }

    #[test]
    fn peaks_sit_on_the_comb() {
        let n = 1 << 17;
        let band = dsp::BandSpec::card_band();
        let t = crate::jammer::gen_multitone_noise(n, 0.2e6, &band, 0.05, FS, 2).unwrap();
        let w = gen_gaussian_noise(n, 1.0, 0.005, FS, 3).unwrap();
        let x = MagnitudeTrace::new(t.samples().iter().zip(w.samples()).map(|(a, b)| a + b).collect(), FS).unwrap();
        let psd = estimate_psd(&x, 1024).unwrap();
        let peaks = find_peaks(&psd, 2.0 * psd.bin_width_hz, CARD_BAND_HALF_WIDTH_HZ, 12.0, 4);
        let offsets: Vec<f64> = peaks.iter().map(|p| p.offset_hz).collect();
        assert_eq!(offsets.len(), 4, "{offsets:?}");
        for (k, f) in offsets.iter().enumerate() {
            assert!((f - (k + 1) as f64 * 0.2e6).abs() < psd.bin_width_hz, "{f}");
        }
        assert!(offsets.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn histogram_basics() {
        let t = MagnitudeTrace::new(vec![0.3; 1000], FS).unwrap();
        let h = amplitude_pdf(&t, 16).unwrap();
        assert_eq!(h.probabilities.iter().filter(|&&p| p > 0.0).count(), 1);
        assert!((h.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(amplitude_pdf(&t, 4).is_err());
    }

    #[test]
    fn gaussian_histogram_fits_normal_law() {
        let t = gen_gaussian_noise(1_000_000, 1.0, 0.5, FS, 8).unwrap();
        let h = amplitude_pdf(&t, 64).unwrap();
        let m = dsp::mean(t.samples());
        let s = dsp::population_std(t.samples());
        assert!(h.gaussian_fit_p_value(m, s) > 0.01);
        assert_eq!(h.mode_count(), 1);
        // a mixture is both bimodal and clearly non-normal
        let mix = NoiseProfile::default_mixture().generate(200_000, 0.0, FS, 1).unwrap();
        let h = amplitude_pdf(&mix, 64).unwrap();
        assert_eq!(h.mode_count(), 2);
        let m = dsp::mean(mix.samples());
        let s = dsp::population_std(mix.samples());
        assert!(h.gaussian_fit_p_value(m, s) < 1e-6);
    }

    #[test]
    fn fixtures_classify_correctly() {
        let cfg = ClassifierConfig::default();
        for label in [CardLabel::ReactiveGaussian, CardLabel::ReactiveFixedFrequency, CardLabel::Active, CardLabel::Shielding] {
            for seed in 0..5 {
                let (on, off) = synthetic_recordings(label, 1 << 15, seed).unwrap();
                let report = classify_blocking_card(&on, &off, &cfg).unwrap();
                assert_eq!(report.label, label, "seed {seed}");
                assert!((0.0..=1.0).contains(&report.spectral_flatness));
            }
        }
    }

    #[test]
    fn mixture_card_reads_as_gaussian() {
        let n = 1 << 15;
        let noise = NoiseProfile::default_mixture().generate(n, 0.0, FS, 5).unwrap();
        let on = MagnitudeTrace::new(noise.samples().iter().map(|v| 1.0 + v).collect(), FS).unwrap();
        let off = MagnitudeTrace::new(vec![0.0; n], FS).unwrap();
        let r = classify_blocking_card(&on, &off, &ClassifierConfig::default()).unwrap();
        assert_eq!(r.label, CardLabel::ReactiveGaussian);
        assert_eq!(r.amplitude_modes, 2);
    }

    #[test]
    fn classification_is_scale_invariant() {
        let cfg = ClassifierConfig::default();
        for label in [CardLabel::ReactiveGaussian, CardLabel::ReactiveFixedFrequency, CardLabel::Active, CardLabel::Shielding] {
            let (on, off) = synthetic_recordings(label, 1 << 14, 9).unwrap();
            let scale = |t: &MagnitudeTrace| {
                MagnitudeTrace::new(t.samples().iter().map(|v| v * 37.5).collect(), FS).unwrap()
            };
            let a = classify_blocking_card(&on, &off, &cfg).unwrap().label;
            let b = classify_blocking_card(&scale(&on), &scale(&off), &cfg).unwrap().label;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sample_rate_mismatch_is_rejected() {
        let a = MagnitudeTrace::new(vec![1.0; 2048], FS).unwrap();
        let b = MagnitudeTrace::new(vec![0.0; 2048], FS / 2.0).unwrap();
        assert!(matches!(classify_blocking_card(&a, &b, &ClassifierConfig::default()), Err(Error::Parameter(_))));
    }

    #[test]
    fn silent_recordings_read_as_shielding() {
        let z = MagnitudeTrace::new(vec![0.0; 2048], FS).unwrap();
        let r = classify_blocking_card(&z, &z, &ClassifierConfig::default()).unwrap();
        assert_eq!(r.label, CardLabel::Shielding);
    }
}
