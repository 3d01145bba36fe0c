//! The eavesdropping attack end to end: session simulation, discard of
//! corrupted traces, field detection, segmentation, optional averaging,
//! demodulation and the detection / demodulation / success metrics.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, MagnitudeTrace};
use crate::error::{Error, Result};
use crate::jammer::{apply_noise, NoiseKind, NoiseProfile};
use crate::modem::{self, ModemConfig, Segment};
use crate::protocol::{self, CardKind, FrameKind, Sender, Transcript};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Envelope bounds used to label segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SenderThresholds {
    /// A segment whose smoothed envelope dips below this holds reader pauses.
    pub low: f64,
    /// A segment without pauses is a card reply if its std stays below this.
    pub high: f64,
}

impl SenderThresholds {
    /// Midpoint between the pause level and the card ripple trough, in
    /// units of the normalized trace.
    pub fn from_modem(cfg: &ModemConfig) -> Self {
        let peak = cfg.clean_peak();
        let pause = cfg.reader_pause / peak;
        let trough = cfg.reader_high * (1.0 - cfg.card_mod_depth) / peak;
        Self { low: pause + 0.5 * (trough - pause), high: 0.3 }
    }
}

impl Default for SenderThresholds {
    fn default() -> Self {
        Self::from_modem(&ModemConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub repetitions: usize,
    pub discard_amplitude_threshold: f64,
    pub std_diff_threshold: f64,
    /// Window of the field-activation moving average.
    pub ma_window: usize,
    /// Window of the mean absolute gradient used for segmentation.
    pub gradient_window: usize,
    /// Minimum activity above the noise floor that opens a segment.
    pub gradient_threshold: f64,
    /// Active runs closer than this are merged into one segment.
    pub merge_gap: usize,
    pub sender_thresholds: SenderThresholds,
    pub averaging_n: usize,
    /// Notch out narrowband interference found in the carrier-only stretch
    /// before the first reader command.
    pub tone_excision: bool,
    /// Height above the spectral median at which a line counts as a tone.
    pub excision_threshold_db: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::for_modem(&ModemConfig::default())
    }
}

impl AttackConfig {
    pub const AVERAGING_CHOICES: [usize; 6] = [1, 2, 4, 8, 16, 32];

    /// Defaults scaled to the bit period of `modem`.
    pub fn for_modem(modem: &ModemConfig) -> Self {
        let bit = modem.samples_per_bit();
        Self {
            repetitions: 80,
            discard_amplitude_threshold: 1.5,
            std_diff_threshold: 0.01,
            ma_window: 2 * bit,
            gradient_window: bit,
            gradient_threshold: 0.02,
            merge_gap: 2 * bit,
            sender_thresholds: SenderThresholds::from_modem(modem),
            averaging_n: 1,
            tone_excision: true,
            excision_threshold_db: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Parameter("repetitions must be ≥ 1".into()));
        }
        if self.averaging_n == 0 {
            return Err(Error::Parameter("averaging_n must be ≥ 1".into()));
        }
        if self.ma_window == 0 || self.gradient_window == 0 {
            return Err(Error::Parameter("window lengths must be ≥ 1".into()));
        }
        let positive = [
            ("discard_amplitude_threshold", self.discard_amplitude_threshold),
            ("std_diff_threshold", self.std_diff_threshold),
            ("gradient_threshold", self.gradient_threshold),
            ("sender_thresholds.low", self.sender_thresholds.low),
            ("sender_thresholds.high", self.sender_thresholds.high),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Parameter(format!("{name} must be > 0, got {v}")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Session simulation
// ---------------------------------------------------------------------------

/// Carrier-only bit periods between field activation and the first message.
pub const SETTLE_BITS: usize = 128;

/// True position of one message in a simulated trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub message_index: usize,
    pub sender: Sender,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSession {
    pub trace: MagnitudeTrace,
    pub annotations: Vec<Annotation>,
    pub field: Range<usize>,
    /// Std of the clean normalized session, the reference for Gaussian noise.
    pub clean_std: f64,
}

/// Builds the clean envelope of one session, normalized so the carrier plus
/// card ripple peaks at 1.0. `lead_in` samples of field-off precede the
/// field; the same amount follows it when `lead_in` is `None`.
fn clean_session(
    transcript: &Transcript,
    cfg: &ModemConfig,
    lead_in: Option<usize>,
) -> Result<(Vec<f64>, Vec<Annotation>, Range<usize>)> {
    let bit = cfg.samples_per_bit();
    let mut field = vec![cfg.reader_high; SETTLE_BITS * bit];
    let mut annotations = Vec::with_capacity(transcript.messages.len());
    for (index, msg) in transcript.messages.iter().enumerate() {
        let bits = protocol::encode_frame(msg)?;
        let frame = match msg.sender {
            Sender::Reader => modem::modulate_reader(&bits, cfg)?,
            Sender::Card => modem::modulate_card(&bits, cfg)?,
        };
        let start = field.len();
        let (lo, hi) = active_extent(frame.samples(), cfg.reader_high);
        annotations.push(Annotation { message_index: index, sender: msg.sender, start: start + lo, end: start + hi });
        field.extend_from_slice(frame.samples());
        field.extend(std::iter::repeat_n(cfg.reader_high, cfg.guard_bits * bit));
    }
    let lead = lead_in.unwrap_or(field.len() / 2);
    let tail = field.len() / 2;
    let peak = cfg.clean_peak();
    let mut samples = vec![0.0; lead];
    samples.extend(field.iter().map(|v| v / peak));
    samples.extend(std::iter::repeat_n(0.0, tail));
    let field_range = lead..lead + field.len();
    for a in &mut annotations {
        a.start += lead;
        a.end += lead;
    }
    Ok((samples, annotations, field_range))
}

/// First and one-past-last sample that differ from the idle level.
fn active_extent(frame: &[f64], idle: f64) -> (usize, usize) {
    let lo = frame.iter().position(|&v| v != idle).unwrap_or(0);
    let hi = frame.iter().rposition(|&v| v != idle).map_or(frame.len(), |i| i + 1);
    (lo, hi)
}

/// Std of the clean session over its field plus half the field length of
/// field-off on each side. Fixing the window makes the Gaussian noise level
/// independent of the actual lead-in.
fn reference_std(samples: &[f64], field: &Range<usize>) -> f64 {
    let f = &samples[field.clone()];
    let window = 2.0 * f.len() as f64;
    let sum: f64 = f.iter().sum();
    let sum_sq: f64 = f.iter().map(|v| v * v).sum();
    let mean = sum / window;
    (sum_sq / window - mean * mean).max(0.0).sqrt()
}

/// Mixes a base seed and a stream index into an independent 64-bit seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One noisy session trace with ground-truth annotations.
///
/// Layout: field-off lead-in, field activation, a settle period of
/// [`SETTLE_BITS`], then each message followed by `guard_bits` of carrier,
/// then a field-off tail. Reactive noise starts at field activation, so a
/// deterministic jammer (the tone comb) repeats identically in every session.
pub fn simulate_session(
    transcript: &Transcript,
    profile: &NoiseProfile,
    cfg: &ModemConfig,
    seed: u64,
) -> Result<SimulatedSession> {
    simulate_session_with_lead_in(transcript, profile, cfg, seed, None)
}

/// [`simulate_session`] with an explicit field-off lead-in length.
pub fn simulate_session_with_lead_in(
    transcript: &Transcript,
    profile: &NoiseProfile,
    cfg: &ModemConfig,
    seed: u64,
    lead_in: Option<usize>,
) -> Result<SimulatedSession> {
    cfg.validate()?;
    profile.validate()?;
    let (samples, annotations, field) = clean_session(transcript, cfg, lead_in)?;
    let clean_std = reference_std(&samples, &field);
    let n = samples.len();
    let clean = MagnitudeTrace::new(samples, cfg.sample_rate)?.with_label("simulated session");
    let noise_seed = derive_seed(seed, 1);
    let noise = if profile.reactive {
        let burst = profile.generate(field.len(), clean_std, cfg.sample_rate, noise_seed)?;
        let mut v = vec![0.0; n];
        v[field.clone()].copy_from_slice(burst.samples());
        MagnitudeTrace::new(v, cfg.sample_rate)?
    } else {
        profile.generate(n, clean_std, cfg.sample_rate, noise_seed)?
    };
    let trace = apply_noise(&clean, &noise, profile, std::slice::from_ref(&field))?;
    Ok(SimulatedSession { trace, annotations, field, clean_std })
}

// ---------------------------------------------------------------------------
// Trace analysis
// ---------------------------------------------------------------------------

/// Maximal intervals where the moving average exceeds half its own
/// maximum, dropping those shorter than `min_len`.
pub fn detect_field_activation(trace: &MagnitudeTrace, cfg: &AttackConfig) -> Result<Vec<Range<usize>>> {
    detect_field_with_min(trace, cfg, 1)
}

fn detect_field_with_min(trace: &MagnitudeTrace, cfg: &AttackConfig, min_len: usize) -> Result<Vec<Range<usize>>> {
    if trace.is_empty() {
        return Err(Error::FieldNotFound);
    }
    // the reference peak is taken on the smoothed envelope so that noise
    // spikes do not lift the activation level
    let ma = dsp::centered_mean(trace.samples(), cfg.ma_window.min(trace.len()));
    let peak = ma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::FieldNotFound);
    }
    let level = 0.5 * peak;
    let mut out = Vec::new();
    let mut start = None;
    for (i, &v) in ma.iter().enumerate() {
        match (v > level, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..ma.len());
    }
    out.retain(|r| r.len() >= min_len.max(cfg.ma_window));
    // a field with no idle carrier at all (e.g. a steady modulated tone)
    // still counts; only an all-idle trace has no activation
    if out.is_empty() || out.iter().all(|r| r.len() == trace.len()) && is_flat(trace.samples()) {
        return Err(Error::FieldNotFound);
    }
    Ok(out)
}

fn is_flat(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Splits the field interval into message segments and labels each with a
/// sender (`None` for unknown).
pub fn segment_messages(
    trace: &MagnitudeTrace,
    field: &Range<usize>,
    cfg: &AttackConfig,
    modem_cfg: &ModemConfig,
) -> Result<Vec<Segment>> {
    if field.start >= field.end || field.end > trace.len() {
        return Err(Error::Parameter(format!("field {field:?} outside trace")));
    }
    let bit = modem_cfg.samples_per_bit();
    let x = &trace.samples()[field.clone()];
    if x.len() < 2 * bit {
        return Err(Error::SegmentationEmpty);
    }
    let grad: Vec<f64> = gradient_abs(x);
    let activity = dsp::centered_mean(&grad, cfg.gradient_window.min(x.len()));
    let floor = dsp::percentile(&activity, 0.10);
    let threshold = floor + cfg.gradient_threshold.max(0.6 * floor);

    // Deep reader pauses count as activity on their own: with strong noise
    // the gradient of the sparse pauses can sink below the threshold between
    // them, while the pauses themselves stay unmistakable.
    let smooth = dsp::centered_mean(x, 4);
    let pad = bit / 2;
    let mut paused = vec![false; x.len()];
    for (i, _) in smooth.iter().enumerate().filter(|(_, &v)| v < cfg.sender_thresholds.low) {
        paused[i.saturating_sub(pad)..(i + pad).min(x.len())].iter_mut().for_each(|p| *p = true);
    }

    let mut runs: Vec<Range<usize>> = Vec::new();
    let mut open = None;
    for (i, &a) in activity.iter().enumerate() {
        match (a > threshold || paused[i], open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                runs.push(s..i);
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push(s..x.len());
    }
    let mut merged: Vec<Range<usize>> = Vec::new();
    for r in runs {
        match merged.last_mut() {
            Some(last) if r.start - last.end < cfg.merge_gap => last.end = r.end,
            _ => merged.push(r),
        }
    }
    merged.retain(|r| r.len() >= bit);
    if merged.is_empty() {
        return Err(Error::SegmentationEmpty);
    }

    let energy = modem::gradient_energy(x);
    let quarter = (bit / 4).max(1);
    let energy_sum: Vec<f64> = dsp::centered_mean(&energy, 2 * quarter).iter().map(|e| e * (2 * quarter) as f64).collect();
    let energy_floor = dsp::percentile(&energy_sum, 0.10);
    let carrier = dsp::percentile(x, 0.5);
    let ripple = modem_cfg.card_mod_depth * carrier;

    let mut out = Vec::with_capacity(merged.len());
    for r in merged {
        let lo = r.start.saturating_sub(bit / 2);
        let hi = (r.end + bit / 2).min(x.len());
        let min_env = smooth[r.clone()].iter().cloned().fold(f64::INFINITY, f64::min);
        let (range, sender) = if min_env < cfg.sender_thresholds.low {
            let low = cfg.sender_thresholds.low;
            let first = (lo..hi).find(|&i| smooth[i] < low).unwrap_or(r.start);
            let last = (lo..hi).rev().find(|&i| smooth[i] < low).unwrap_or(r.end - 1);
            (first..(last + 2).min(x.len()), Some(Sender::Reader))
        } else if dsp::population_std(&x[r.clone()]) < cfg.sender_thresholds.high {
            // card bounds from where the subcarrier energy reaches half its
            // expected level above the floor
            let level = energy_floor + 0.5 * (2 * quarter) as f64 * ripple * ripple;
            let first = (lo..hi).find(|&i| energy_sum[i] > level);
            let last = (lo..hi).rev().find(|&i| energy_sum[i] > level);
            match (first, last) {
                (Some(f), Some(l)) if l > f => (f..(l + 2).min(x.len()), Some(Sender::Card)),
                _ => (r.clone(), Some(Sender::Card)),
            }
        } else {
            (r.clone(), None)
        };
        if range.len() >= bit / 2 {
            out.push(Segment::new(field.start + range.start, field.start + range.end, sender)?);
        }
    }
    if out.is_empty() {
        return Err(Error::SegmentationEmpty);
    }
    Ok(out)
}

fn gradient_abs(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| ((x[(i + 1).min(n - 1)] - x[i.saturating_sub(1)]) / 2.0).abs())
        .collect()
}

/// Field intervals and segments of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceAnalysis {
    pub fields: Vec<Range<usize>>,
    pub segments: Vec<Segment>,
    /// The trace after tone excision; segments refer to this trace.
    pub cleaned: MagnitudeTrace,
    /// Frequencies of the notched tones.
    pub excised_tones_hz: Vec<f64>,
}

const EXCISION_SEGMENT: usize = 1024;
const EXCISION_POLE_RADIUS: f64 = 0.995;
/// A notch bank only helps against sparse lines; a denser comb covers the
/// card band and is left alone like wideband noise.
const MAX_EXCISED_TONES: usize = 12;

/// Finds narrowband lines in the carrier-only stretch at the start of the
/// field (up to the first reader pause) and notches them out of the whole
/// field, unless there are more than [`MAX_EXCISED_TONES`]. Returns the
/// notched frequencies.
fn excise_tones(x: &mut [f64], field: &Range<usize>, fs: f64, cfg: &AttackConfig, bit: usize) -> Result<Vec<f64>> {
    let f = &x[field.clone()];
    let smooth = dsp::centered_mean(f, 4);
    let first_pause = smooth.iter().position(|&v| v < cfg.sender_thresholds.low).unwrap_or(f.len());
    let quiet = cfg.ma_window..first_pause.saturating_sub(bit);
    if quiet.len() < 2 * EXCISION_SEGMENT {
        return Ok(Vec::new());
    }
    let level = dsp::mean(&f[quiet.clone()]);
    let q: Vec<f64> = f[quiet].iter().map(|v| v - level).collect();
    if dsp::population_std(&q) <= 1e-6 * level.abs() {
        // flat to storage precision: nothing to excise
        return Ok(Vec::new());
    }
    let psd = crate::spectrum::estimate_psd(&MagnitudeTrace::new(q, fs)?, EXCISION_SEGMENT)?;
    let peaks = crate::spectrum::find_peaks(
        &psd,
        3.0 * psd.bin_width_hz,
        fs / 2.0 - 3.0 * psd.bin_width_hz,
        cfg.excision_threshold_db,
        4,
    );
    if peaks.is_empty() || peaks.len() > MAX_EXCISED_TONES {
        return Ok(Vec::new());
    }
    let center = dsp::percentile(f, 0.5);
    let mut y: Vec<f64> = f.iter().map(|v| v - center).collect();
    let mut tones = Vec::with_capacity(peaks.len());
    for p in &peaks {
        y = dsp::notch_filter(&y, p.offset_hz, fs, EXCISION_POLE_RADIUS)?;
        tones.push(p.offset_hz);
    }
    for (o, v) in x[field.clone()].iter_mut().zip(y) {
        *o = v + center;
    }
    tones.sort_by(|a, b| a.total_cmp(b));
    Ok(tones)
}

pub fn analyze_trace(trace: &MagnitudeTrace, cfg: &AttackConfig, modem_cfg: &ModemConfig) -> Result<TraceAnalysis> {
    let bit = modem_cfg.samples_per_bit();
    let fields = detect_field_with_min(trace, cfg, bit)?;
    let mut cleaned = trace.samples().to_vec();
    let mut excised_tones_hz = Vec::new();
    if cfg.tone_excision {
        for f in &fields {
            excised_tones_hz.extend(excise_tones(&mut cleaned, f, trace.sample_rate(), cfg, bit)?);
        }
    }
    let cleaned = trace.with_samples(cleaned);
    let mut segments = Vec::new();
    for f in &fields {
        match segment_messages(&cleaned, f, cfg, modem_cfg) {
            Ok(s) => segments.extend(s),
            Err(Error::SegmentationEmpty) => {}
            Err(e) => return Err(e),
        }
    }
    if segments.is_empty() {
        return Err(Error::SegmentationEmpty);
    }
    Ok(TraceAnalysis { fields, segments, cleaned, excised_tones_hz })
}

/// Why a trace was dropped before demodulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    Amplitude,
    NoCardSignal,
    NoField,
    NoSegments,
}

/// Decides whether one trace is usable. A trace is dropped when any sample
/// exceeds the amplitude threshold, or when no region where a card reply
/// may sit (the span after each reader command) has a std more than
/// `std_diff_threshold` above the noise-only region before the first
/// reader command.
pub fn discard_reason(trace: &MagnitudeTrace, cfg: &AttackConfig, modem_cfg: &ModemConfig) -> Option<DiscardReason> {
    screen_trace(trace, cfg, modem_cfg).err()
}

/// Runs [`discard_reason`] and hands back the analysis of a kept trace.
fn screen_trace(trace: &MagnitudeTrace, cfg: &AttackConfig, modem_cfg: &ModemConfig) -> std::result::Result<TraceAnalysis, DiscardReason> {
    if trace.samples().iter().any(|&v| v > cfg.discard_amplitude_threshold) {
        return Err(DiscardReason::Amplitude);
    }
    let analysis = match analyze_trace(trace, cfg, modem_cfg) {
        Ok(a) => a,
        Err(Error::SegmentationEmpty) => return Err(DiscardReason::NoSegments),
        Err(_) => return Err(DiscardReason::NoField),
    };
    match card_signal_present(&analysis, cfg, modem_cfg) {
        true => Ok(analysis),
        false => Err(DiscardReason::NoCardSignal),
    }
}

fn card_signal_present(analysis: &TraceAnalysis, cfg: &AttackConfig, modem_cfg: &ModemConfig) -> bool {
    let x = analysis.cleaned.samples();
    let bit = modem_cfg.samples_per_bit();
    for field in &analysis.fields {
        let segs: Vec<&Segment> = analysis.segments.iter().filter(|s| s.start >= field.start && s.end <= field.end).collect();
        let Some(first) = segs.iter().find(|s| s.sender_hint == Some(Sender::Reader)) else { continue };
        // noise-only: from activation (past the smoothing transient) to the
        // first reader command, less a guard bit on each side
        let quiet_lo = field.start + cfg.ma_window;
        let quiet_hi = first.start.saturating_sub(bit);
        if quiet_hi < quiet_lo + bit {
            continue;
        }
        let noise_std = dsp::population_std(&x[quiet_lo..quiet_hi]);
        let readers: Vec<&&Segment> = segs.iter().filter(|s| s.sender_hint == Some(Sender::Reader)).collect();
        for (k, r) in readers.iter().enumerate() {
            let lo = r.end + bit;
            let hi = readers.get(k + 1).map_or(field.end - cfg.ma_window, |next| next.start).saturating_sub(bit);
            if hi < lo + bit {
                continue;
            }
            if dsp::population_std(&x[lo..hi]) - noise_std > cfg.std_diff_threshold {
                return true;
            }
        }
    }
    false
}

/// Indices of the traces that survive [`discard_reason`].
pub fn discard_corrupted(traces: &[MagnitudeTrace], cfg: &AttackConfig, modem_cfg: &ModemConfig) -> Vec<usize> {
    traces
        .par_iter()
        .enumerate()
        .filter(|(_, t)| discard_reason(t, cfg, modem_cfg).is_none())
        .map(|(i, _)| i)
        .collect()
}

/// Element-wise mean of session traces after aligning each on the rising
/// field edge of the first (shift limited to `max_shift` samples).
///
/// Only sessions with identical content can be averaged, so Classic
/// sessions (fresh nonces and ciphertext every time) are refused.
pub fn average_traces(traces: &[MagnitudeTrace], card_kind: CardKind, max_shift: usize) -> Result<MagnitudeTrace> {
    if card_kind == CardKind::Classic {
        return Err(Error::Parameter(
            "MIFARE Classic sessions carry fresh random nonces and cannot be averaged".into(),
        ));
    }
    let Some(reference) = traces.first() else {
        return Err(Error::Structural("no traces to average".into()));
    };
    let n = reference.len();
    if let Some(t) = traces.iter().find(|t| t.len() != n) {
        return Err(Error::Structural(format!("trace lengths differ: {} vs {}", n, t.len())));
    }
    if traces.len() == 1 {
        return Ok(reference.clone());
    }
    let ref_edge = rising_edge(reference.samples());
    let mut acc = vec![0.0; n];
    for t in traces {
        let shift = best_shift(reference.samples(), t.samples(), ref_edge, max_shift);
        let x = t.samples();
        for (i, a) in acc.iter_mut().enumerate() {
            let j = (i as isize + shift).clamp(0, n as isize - 1) as usize;
            *a += x[j];
        }
    }
    let k = traces.len() as f64;
    Ok(reference.with_samples(acc.into_iter().map(|v| v / k).collect()))
}

fn rising_edge(x: &[f64]) -> usize {
    let peak = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    x.iter().position(|&v| v > 0.5 * peak).unwrap_or(0)
}

/// Lag of `other` against `reference` that maximizes the correlation of
/// their first differences around the field edge.
fn best_shift(reference: &[f64], other: &[f64], edge: usize, max_shift: usize) -> isize {
    let n = reference.len();
    let half = 4 * max_shift.max(1);
    let lo = edge.saturating_sub(half).max(1);
    let hi = (edge + half).min(n);
    let diff = |x: &[f64], i: isize| -> f64 {
        if i < 1 || i as usize >= n {
            0.0
        } else {
            x[i as usize] - x[i as usize - 1]
        }
    };
    let m = max_shift as isize;
    (-m..=m)
        .map(|s| {
            let c: f64 = (lo..hi).map(|i| diff(reference, i as isize) * diff(other, i as isize + s)).sum();
            (s, c)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.abs().cmp(&a.0.abs())))
        .map_or(0, |(s, _)| s)
}

// ---------------------------------------------------------------------------
// Recovery and metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveredMessage {
    pub sender: Option<Sender>,
    /// Demodulated bits as `0`/`1` text, or `None` if demodulation failed.
    pub bits: Option<String>,
    /// Decoded payload (CRC stripped when valid), or `None` on failure.
    pub hex_payload: Option<String>,
    pub failure: Option<String>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveredTranscript {
    pub messages: Vec<RecoveredMessage>,
    /// Every card message of the session was recovered with valid
    /// parity and CRC.
    pub complete: bool,
    pub discarded: Option<DiscardReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub card_detection_rate: f64,
    pub card_demodulation_rate: f64,
    pub reader_demodulation_rate: f64,
    pub attack_success_rate: f64,
    /// ASR > 0: at least one session recovered the whole card content.
    pub bypassed: bool,
    pub per_session_success: Vec<bool>,
    pub counts: MetricCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub card_messages: usize,
    pub card_detected: usize,
    pub card_demodulated: usize,
    pub reader_messages: usize,
    pub reader_demodulated: usize,
    pub repetitions: usize,
    pub successes: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl SessionMetrics {
    pub fn from_counts(counts: MetricCounts, per_session_success: Vec<bool>) -> Self {
        let asr = ratio(counts.successes, counts.repetitions);
        Self {
            card_detection_rate: ratio(counts.card_detected, counts.card_messages),
            card_demodulation_rate: ratio(counts.card_demodulated, counts.card_messages),
            reader_demodulation_rate: ratio(counts.reader_demodulated, counts.reader_messages),
            attack_success_rate: asr,
            bypassed: asr > 0.0,
            per_session_success,
            counts,
        }
    }
}

/// Demodulates and decodes a labeled segment without ground truth. Seven
/// bits decode as a short frame; longer frames are tried with a trailing
/// CRC first. The raw bits are kept for scoring.
fn recover_segment(trace: &MagnitudeTrace, seg: &Segment, modem_cfg: &ModemConfig) -> RecoveredMessage {
    let base =
        RecoveredMessage { sender: seg.sender_hint, bits: None, hex_payload: None, failure: None, start: seg.start, end: seg.end };
    let Some(sender) = seg.sender_hint else {
        return RecoveredMessage { failure: Some("unknown sender".into()), ..base };
    };
    let bits = match modem::demodulate(trace, seg, sender, modem_cfg) {
        Ok(b) => b,
        Err(e) => return RecoveredMessage { failure: Some(e.to_string()), ..base },
    };
    let decoded = if bits.len() == 7 {
        protocol::decode_frame(&bits, FrameKind::Short, false)
    } else {
        protocol::decode_frame(&bits, FrameKind::Standard, true)
            .or_else(|_| protocol::decode_frame(&bits, FrameKind::Standard, false))
    };
    let base = RecoveredMessage { bits: Some(protocol::bits_to_text(&bits)), ..base };
    match decoded {
        Ok(bytes) => RecoveredMessage { hex_payload: Some(protocol::hex(&bytes)), ..base },
        Err(e) => RecoveredMessage { failure: Some(e.to_string()), ..base },
    }
}

/// Ground truth of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionTruth {
    pub transcript: Transcript,
    pub annotations: Vec<Annotation>,
}

/// A session trace with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub trace: MagnitudeTrace,
    pub truth: SessionTruth,
}

/// Per-message scoring of one recovered session against the ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Score {
    card_detected: usize,
    card_demodulated: usize,
    reader_demodulated: usize,
    complete: bool,
}

/// A truth message counts as detected when one recovered segment covers at
/// least half of it (the one with the largest overlap), and as demodulated
/// when that segment also carries the right sender and its bits decode to
/// the true payload under the true framing.
fn score_session(recovered: &RecoveredTranscript, truth: &SessionTruth) -> Score {
    let mut score = Score::default();
    if recovered.discarded.is_some() {
        return score;
    }
    let mut all_cards = true;
    for ann in &truth.annotations {
        let msg = &truth.transcript.messages[ann.message_index];
        let span = ann.end - ann.start;
        let overlap = |r: &RecoveredMessage| r.end.min(ann.end).saturating_sub(r.start.max(ann.start));
        let best = recovered
            .messages
            .iter()
            .map(|r| (r, overlap(r)))
            .max_by_key(|&(_, o)| o)
            .filter(|&(_, o)| 2 * o >= span)
            .map(|(r, _)| r);
        let ok = best.is_some_and(|r| {
            r.sender == Some(msg.sender)
                && r.bits.as_deref().is_some_and(|text| {
                    protocol::text_to_bits(text)
                        .and_then(|bits| protocol::decode_frame(&bits, msg.frame_kind, msg.crc))
                        .is_ok_and(|bytes| bytes == msg.payload)
                })
        });
        match msg.sender {
            Sender::Card => {
                score.card_detected += usize::from(best.is_some());
                score.card_demodulated += usize::from(ok);
                all_cards &= ok;
            }
            Sender::Reader => score.reader_demodulated += usize::from(ok),
        }
    }
    score.complete = all_cards;
    score
}

/// Metrics of recovered sessions against their ground truth, pairwise.
pub fn score_transcripts(recovered: &[RecoveredTranscript], truths: &[SessionTruth]) -> Result<SessionMetrics> {
    if recovered.len() != truths.len() {
        return Err(Error::Structural(format!(
            "{} recovered sessions for {} ground truths",
            recovered.len(),
            truths.len()
        )));
    }
    let mut counts = MetricCounts { repetitions: truths.len(), ..MetricCounts::default() };
    let mut success = Vec::with_capacity(truths.len());
    for (r, t) in recovered.iter().zip(truths) {
        if let Some(a) = t.annotations.iter().find(|a| a.message_index >= t.transcript.messages.len()) {
            return Err(Error::Structural(format!("annotation refers to message {}", a.message_index)));
        }
        let sc = score_session(r, t);
        counts.card_messages += t.transcript.card_messages().count();
        counts.reader_messages += t.transcript.reader_messages().count();
        counts.card_detected += sc.card_detected;
        counts.card_demodulated += sc.card_demodulated;
        counts.reader_demodulated += sc.reader_demodulated;
        counts.successes += usize::from(sc.complete);
        success.push(sc.complete);
    }
    Ok(SessionMetrics::from_counts(counts, success))
}

/// Output of [`run_attack`] and [`attack_traces`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub recovered: Vec<RecoveredTranscript>,
    pub metrics: SessionMetrics,
}

/// Simulates `cfg.repetitions` sessions and runs the full attack on them.
pub fn run_attack(
    transcript: &Transcript,
    profile: &NoiseProfile,
    cfg: &AttackConfig,
    modem_cfg: &ModemConfig,
    seed: u64,
) -> Result<AttackResult> {
    cfg.validate()?;
    modem_cfg.validate()?;
    profile.validate()?;
    refuse_classic_averaging(transcript.card_kind, cfg)?;
    let sessions: Vec<LabeledTrace> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|i| simulate_repetition(transcript, profile, modem_cfg, seed, i))
        .collect::<Result<_>>()?;
    attack_traces(&sessions, cfg, modem_cfg)
}

/// Session `index` of a run seeded with `seed`. Classic sessions draw fresh
/// nonces and ciphertext per repetition.
pub fn simulate_repetition(
    transcript: &Transcript,
    profile: &NoiseProfile,
    modem_cfg: &ModemConfig,
    seed: u64,
    index: usize,
) -> Result<LabeledTrace> {
    let session_seed = derive_seed(seed, index as u64);
    let t = match transcript.card_kind {
        CardKind::Classic => transcript.rekeyed(derive_seed(session_seed, 2)),
        CardKind::Ultralight => transcript.clone(),
    };
    let s = simulate_session(&t, profile, modem_cfg, session_seed)?;
    Ok(LabeledTrace { trace: s.trace, truth: SessionTruth { transcript: t, annotations: s.annotations } })
}

fn refuse_classic_averaging(kind: CardKind, cfg: &AttackConfig) -> Result<()> {
    if cfg.averaging_n > 1 && kind == CardKind::Classic {
        return Err(Error::Parameter(
            "averaging needs identical sessions; MIFARE Classic sessions differ every time".into(),
        ));
    }
    Ok(())
}

/// Runs the attack on recorded sessions: discard, optional averaging,
/// segmentation, demodulation and scoring.
///
/// With `averaging_n > 1`, session `i` averages its own trace with the
/// next `averaging_n − 1` kept traces (cyclically) before segmentation.
/// A discarded session recovers nothing.
pub fn attack_traces(sessions: &[LabeledTrace], cfg: &AttackConfig, modem_cfg: &ModemConfig) -> Result<AttackResult> {
    cfg.validate()?;
    modem_cfg.validate()?;
    for s in sessions {
        refuse_classic_averaging(s.truth.transcript.card_kind, cfg)?;
    }
    let screened: Vec<std::result::Result<TraceAnalysis, DiscardReason>> =
        sessions.par_iter().map(|s| screen_trace(&s.trace, cfg, modem_cfg)).collect();
    let kept: Vec<usize> = (0..sessions.len()).filter(|&i| screened[i].is_ok()).collect();

    let recovered: Vec<RecoveredTranscript> = (0..sessions.len())
        .into_par_iter()
        .map(|i| {
            let analysis = match &screened[i] {
                Err(reason) => {
                    return Ok(RecoveredTranscript { messages: Vec::new(), complete: false, discarded: Some(*reason) })
                }
                Ok(a) => a,
            };
            if cfg.averaging_n == 1 {
                return Ok(recover_session(&analysis.cleaned, &analysis.segments, modem_cfg));
            }
            let pos = kept.iter().position(|&k| k == i).expect("kept");
            let take = cfg.averaging_n.min(kept.len());
            let batch: Vec<MagnitudeTrace> = (0..take).map(|j| sessions[kept[(pos + j) % kept.len()]].trace.clone()).collect();
            let trace = average_traces(&batch, sessions[i].truth.transcript.card_kind, modem_cfg.samples_per_bit())?;
            match analyze_trace(&trace, cfg, modem_cfg) {
                Ok(a) => Ok(recover_session(&a.cleaned, &a.segments, modem_cfg)),
                Err(Error::FieldNotFound | Error::SegmentationEmpty) => Ok(recover_session(&trace, &[], modem_cfg)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let truths: Vec<SessionTruth> = sessions.iter().map(|s| s.truth.clone()).collect();
    let metrics = score_transcripts(&recovered, &truths)?;
    let recovered = recovered
        .into_iter()
        .zip(&metrics.per_session_success)
        .map(|(r, &complete)| RecoveredTranscript { complete, ..r })
        .collect();
    Ok(AttackResult { recovered, metrics })
}

fn recover_session(trace: &MagnitudeTrace, segments: &[Segment], modem_cfg: &ModemConfig) -> RecoveredTranscript {
    let messages = segments.iter().map(|seg| recover_segment(trace, seg, modem_cfg)).collect();
    RecoveredTranscript { messages, complete: false, discarded: None }
}

// ---------------------------------------------------------------------------
// Countermeasure sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "values", rename_all = "snake_case")]
pub enum SweepFamily {
    /// Reactive Gaussian jammer, std as a fraction of the clean std.
    GaussianFactors(Vec<f64>),
    /// Reactive tone comb, spacing in Hz.
    ToneSpacings(Vec<f64>),
}

impl SweepFamily {
    pub fn default_gaussian() -> Self {
        Self::GaussianFactors(vec![0.05, 0.10, 0.15, 0.20, 0.25, 0.30])
    }

    pub fn default_tones() -> Self {
        Self::ToneSpacings(vec![0.05e6, 0.10e6, 0.15e6, 0.20e6, 0.25e6])
    }

    fn points(&self) -> Vec<f64> {
        match self {
            Self::GaussianFactors(v) | Self::ToneSpacings(v) => v.clone(),
        }
    }

    /// Jammer profile for one sweep point; tone phases follow `seed`.
    pub fn profile(&self, param: f64, seed: u64) -> NoiseProfile {
        match self {
            Self::GaussianFactors(_) => NoiseProfile::gaussian(param),
            Self::ToneSpacings(_) => {
                let mut p = NoiseProfile::multitone(param);
                if let NoiseKind::MultiTone { phase_seed, .. } = &mut p.kind {
                    *phase_seed = seed;
                }
                p
            }
        }
    }
}

/// One row of a metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub param: f64,
    pub reader_demod_rate: f64,
    pub card_demod_rate: f64,
    pub detection_rate: f64,
    pub asr: f64,
}

impl MetricsRow {
    pub fn from_metrics(param: f64, m: &SessionMetrics) -> Self {
        Self {
            param,
            reader_demod_rate: m.reader_demodulation_rate,
            card_demod_rate: m.card_demodulation_rate,
            detection_rate: m.card_detection_rate,
            asr: m.attack_success_rate,
        }
    }
}

pub const METRICS_CSV_HEADER: &str = "param,reader_demod_rate,card_demod_rate,detection_rate,asr";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.param, r.reader_demod_rate, r.card_demod_rate, r.detection_rate, r.asr
        ));
    }
    out
}

pub fn metrics_json(rows: &[MetricsRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)?)
}

/// Mean rates over `seeds` for each parameter of `family`.
pub fn countermeasure_sweep(
    transcript: &Transcript,
    family: &SweepFamily,
    cfg: &AttackConfig,
    modem_cfg: &ModemConfig,
    seeds: &[u64],
) -> Result<Vec<MetricsRow>> {
    if seeds.is_empty() {
        return Err(Error::Parameter("sweep needs at least one seed".into()));
    }
    family
        .points()
        .into_iter()
        .map(|param| {
            let runs: Vec<SessionMetrics> = seeds
                .par_iter()
                .map(|&seed| run_attack(transcript, &family.profile(param, seed), cfg, modem_cfg, seed).map(|r| r.metrics))
                .collect::<Result<_>>()?;
            let k = runs.len() as f64;
            let avg = |f: fn(&SessionMetrics) -> f64| runs.iter().map(f).sum::<f64>() / k;
            Ok(MetricsRow {
                param,
                reader_demod_rate: avg(|m| m.reader_demodulation_rate),
                card_demod_rate: avg(|m| m.card_demodulation_rate),
                detection_rate: avg(|m| m.card_detection_rate),
                asr: avg(|m| m.attack_success_rate),
            })
        })
        .collect()
}
