//! Noise models for blocking cards and the operator that superimposes them
//! on a clean session trace.
//!
//! Four behaviours are modelled: white Gaussian noise, a comb of equally
//! spaced tones, a Gaussian mixture (used for classifier fixtures), and a
//! shielding card that attenuates the field instead of emitting anything.
//! A profile is either reactive (powered by the reader, silent without a
//! field) or active (battery powered, emitting across the whole trace).

use std::f64::consts::{FRAC_PI_4, PI};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{BandSpec, MagnitudeTrace};
use crate::error::{Error, Result};

/// Per-tone amplitude of the multi-tone jammer when none is given, relative
/// to the normalized envelope peak.
///
/// The amplitude is per tone, so a denser comb carries more power. At this
/// level a 0.05 MHz comb nearly always drives the envelope past the 1.5
/// saturation threshold, while a 0.2 MHz comb stays below it.
pub const DEFAULT_TONE_AMPLITUDE: f64 = 0.085;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianWhite {
        /// Noise std as a fraction of the clean-signal std.
        std_factor: f64,
    },
    MultiTone {
        spacing_hz: f64,
        #[serde(default)]
        band: BandSpec,
        #[serde(default = "default_tone_amplitude")]
        per_tone_amplitude: f64,
        /// Seeds the tone phases. The same comb is emitted in every session.
        #[serde(default)]
        phase_seed: u64,
    },
    GaussianMixture {
        means: Vec<f64>,
        stds: Vec<f64>,
        weights: Vec<f64>,
    },
    Shielding {
        attenuation_factor: f64,
    },
}

fn default_tone_amplitude() -> f64 {
    DEFAULT_TONE_AMPLITUDE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    #[serde(flatten)]
    pub kind: NoiseKind,
    #[serde(default = "default_reactive")]
    pub reactive: bool,
}

fn default_reactive() -> bool {
    true
}

impl NoiseProfile {
    pub fn gaussian(std_factor: f64) -> Self {
        Self { kind: NoiseKind::GaussianWhite { std_factor }, reactive: true }
    }

    pub fn multitone(spacing_hz: f64) -> Self {
        Self {
            kind: NoiseKind::MultiTone {
                spacing_hz,
                band: BandSpec::card_band(),
                per_tone_amplitude: DEFAULT_TONE_AMPLITUDE,
                phase_seed: 0,
            },
            reactive: true,
        }
    }

    /// Two-component mixture with a bimodal amplitude distribution.
    pub fn default_mixture() -> Self {
        Self {
            kind: NoiseKind::GaussianMixture {
                means: vec![-0.08, 0.08],
                stds: vec![0.03, 0.03],
                weights: vec![0.5, 0.5],
            },
            reactive: true,
        }
    }

    pub fn shielding(attenuation_factor: f64) -> Self {
        Self { kind: NoiseKind::Shielding { attenuation_factor }, reactive: true }
    }

    pub fn active(mut self) -> Self {
        self.reactive = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            NoiseKind::GaussianWhite { std_factor } => {
                if !(*std_factor >= 0.0) || !std_factor.is_finite() {
                    return Err(Error::Parameter(format!("std_factor must be ≥ 0, got {std_factor}")));
                }
            }
            NoiseKind::MultiTone { spacing_hz, band, per_tone_amplitude, .. } => {
                if !(*spacing_hz > 0.0) {
                    return Err(Error::Parameter(format!("spacing_hz must be > 0, got {spacing_hz}")));
                }
                if !(band.half_width_hz > 0.0) {
                    return Err(Error::Parameter("band half-width must be > 0".into()));
                }
                if !(*per_tone_amplitude >= 0.0) {
                    return Err(Error::Parameter("per_tone_amplitude must be ≥ 0".into()));
                }
            }
            NoiseKind::GaussianMixture { means, stds, weights } => {
                if means.is_empty() || means.len() != stds.len() || means.len() != weights.len() {
                    return Err(Error::Parameter("mixture component lists must be non-empty and equal length".into()));
                }
                if stds.iter().any(|s| !(*s >= 0.0)) || weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(Error::Parameter("mixture stds and weights must be ≥ 0".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Parameter(format!("mixture weights sum to {total}, not 1")));
                }
            }
            NoiseKind::Shielding { attenuation_factor } => {
                if !(0.0..1.0).contains(attenuation_factor) {
                    return Err(Error::Parameter(format!(
                        "attenuation_factor must be in [0, 1), got {attenuation_factor}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether the profile adds a noise waveform (everything but shielding).
    pub fn is_additive(&self) -> bool {
        !matches!(self.kind, NoiseKind::Shielding { .. })
    }

    /// Short human-readable tag, used in metric tables.
    pub fn label(&self) -> String {
        let mode = if self.reactive { "" } else { " (active)" };
        match &self.kind {
            NoiseKind::GaussianWhite { std_factor } => format!("gaussian {std_factor}{mode}"),
            NoiseKind::MultiTone { spacing_hz, .. } => format!("multitone {}MHz{mode}", spacing_hz / 1e6),
            NoiseKind::GaussianMixture { .. } => format!("mixture{mode}"),
            NoiseKind::Shielding { attenuation_factor } => format!("shielding {attenuation_factor}"),
        }
    }

    /// Noise waveform of `n` samples. `clean_std` scales the Gaussian kind;
    /// `seed` drives the random kinds (multi-tone phases come from the
    /// profile's own seed). Shielding yields zeros.
    pub fn generate(&self, n: usize, clean_std: f64, sample_rate: f64, seed: u64) -> Result<MagnitudeTrace> {
        self.validate()?;
        match &self.kind {
            NoiseKind::GaussianWhite { std_factor } => {
                gen_gaussian_noise(n, clean_std, *std_factor, sample_rate, seed)
            }
            NoiseKind::MultiTone { spacing_hz, band, per_tone_amplitude, phase_seed } => {
                gen_multitone_noise(n, *spacing_hz, band, *per_tone_amplitude, sample_rate, *phase_seed)
            }
            NoiseKind::GaussianMixture { means, stds, weights } => {
                gen_mixture_noise(n, means, stds, weights, sample_rate, seed)
            }
            NoiseKind::Shielding { .. } => MagnitudeTrace::new(vec![0.0; n], sample_rate),
        }
    }
}

/// Zero-mean white Gaussian noise with std `factor × clean_std`.
pub fn gen_gaussian_noise(
    n: usize,
    clean_std: f64,
    factor: f64,
    sample_rate: f64,
    seed: u64,
) -> Result<MagnitudeTrace> {
    if n == 0 {
        return Err(Error::Parameter("noise length must be > 0".into()));
    }
    if !(factor >= 0.0) || !(clean_std >= 0.0) {
        return Err(Error::Parameter(format!("invalid noise std {factor} × {clean_std}")));
    }
    let sigma = factor * clean_std;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    MagnitudeTrace::new(samples, sample_rate)
}

/// Samples between exact re-evaluations of a tone's phase.
const PHASOR_BLOCK: usize = 1024;

/// Number of tones on each side of zero: `floor(half_width / spacing)`.
pub fn tone_half_count(spacing_hz: f64, band: &BandSpec) -> usize {
    (band.half_width_hz / spacing_hz + 1e-9).floor() as usize
}

/// Comb of `2K + 1` equal-amplitude cosines at offsets `k · spacing`,
/// `k ∈ [−K, K]`.
///
/// The envelope is real, so the tones at `±k` land on the same frequency.
/// Their phases are paired (`φ₋ₖ = π/2 − φₖ`) so that each pair adds in
/// quadrature, and the zero-offset tone sits at `±π/4`. The total power is
/// then exactly `(2K + 1) · A² / 2` over whole periods.
pub fn gen_multitone_noise(
    n: usize,
    spacing_hz: f64,
    band: &BandSpec,
    amplitude: f64,
    sample_rate: f64,
    seed: u64,
) -> Result<MagnitudeTrace> {
    if n == 0 {
        return Err(Error::Parameter("noise length must be > 0".into()));
    }
    if !(spacing_hz > 0.0) {
        return Err(Error::Parameter(format!("spacing_hz must be > 0, got {spacing_hz}")));
    }
    if sample_rate < 2.0 * band.half_width_hz {
        return Err(Error::Parameter(format!(
            "sample rate {sample_rate} Hz below twice the band half-width {} Hz",
            band.half_width_hz
        )));
    }
    let k_max = tone_half_count(spacing_hz, band);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dc_phase = if rng.random::<bool>() { FRAC_PI_4 } else { -FRAC_PI_4 };
    let dc = amplitude * dc_phase.cos();
    let mut samples = vec![dc; n];
    for k in 1..=k_max {
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let w = 2.0 * PI * k as f64 * spacing_hz / sample_rate;
        // cos(wt + φ) + cos(−wt + π/2 − φ) = cos(wt + φ) + sin(wt + φ), run
        // as a rotating phasor that is re-anchored every block
        let (sw, cw) = w.sin_cos();
        for (b, block) in samples.chunks_mut(PHASOR_BLOCK).enumerate() {
            let (mut s, mut c) = (w * (b * PHASOR_BLOCK) as f64 + phi).sin_cos();
            for v in block {
                *v += amplitude * (c + s);
                (c, s) = (c * cw - s * sw, s * cw + c * sw);
            }
        }
    }
    MagnitudeTrace::new(samples, sample_rate)
}

/// I.i.d. samples from a Gaussian mixture.
pub fn gen_mixture_noise(
    n: usize,
    means: &[f64],
    stds: &[f64],
    weights: &[f64],
    sample_rate: f64,
    seed: u64,
) -> Result<MagnitudeTrace> {
    if n == 0 {
        return Err(Error::Parameter("noise length must be > 0".into()));
    }
    let components = means
        .iter()
        .zip(stds)
        .map(|(&m, &s)| Normal::new(m, s).map_err(|e| Error::Parameter(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let chooser = rand::distr::weighted::WeightedIndex::new(weights)
        .map_err(|e| Error::Parameter(format!("mixture weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let c = chooser.sample(&mut rng);
            components[c].sample(&mut rng)
        })
        .collect();
    MagnitudeTrace::new(samples, sample_rate)
}

/// Superimposes `noise` on `clean`.
///
/// Additive kinds are summed element-wise; a reactive profile contributes
/// only inside `field_intervals`. Shielding ignores `noise` and scales the
/// clean trace by the attenuation factor (inside the field intervals when
/// reactive, everywhere otherwise).
pub fn apply_noise(
    clean: &MagnitudeTrace,
    noise: &MagnitudeTrace,
    profile: &NoiseProfile,
    field_intervals: &[Range<usize>],
) -> Result<MagnitudeTrace> {
    profile.validate()?;
    if clean.len() != noise.len() {
        return Err(Error::Structural(format!(
            "clean trace has {} samples, noise has {}",
            clean.len(),
            noise.len()
        )));
    }
    if let Some(bad) = field_intervals.iter().find(|r| r.start > r.end || r.end > clean.len()) {
        return Err(Error::Structural(format!(
            "field interval {:?} outside trace of {} samples",
            bad,
            clean.len()
        )));
    }
    let mut out = clean.samples().to_vec();
    let everywhere = [0..clean.len()];
    let regions = if profile.reactive { field_intervals } else { &everywhere[..] };
    match profile.kind {
        NoiseKind::Shielding { attenuation_factor } => {
            for r in regions {
                out[r.clone()].iter_mut().for_each(|v| *v *= attenuation_factor);
            }
        }
        _ => {
            for r in regions {
                for (o, n) in out[r.clone()].iter_mut().zip(&noise.samples()[r.clone()]) {
                    *o += n;
                }
            }
        }
    }
    Ok(clean.with_samples(out))
}
