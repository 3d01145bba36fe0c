//! Line coding between frame bits and envelope traces.
//!
//! Reader → card: 100 % ASK with modified-Miller coding. Each bit period is
//! one of three patterns, with a pause a quarter period wide:
//!
//! | pattern | pause position     | used for                         |
//! |---------|--------------------|----------------------------------|
//! | X       | second half start  | logic 1                          |
//! | Y       | none               | logic 0 after a 1, end of frame  |
//! | Z       | period start       | logic 0 otherwise, start of frame|
//!
//! Card → reader: load modulation with an f_c/16 subcarrier, Manchester
//! coded. The subcarrier fills the first half of a 1 and the second half of
//! a 0, preceded by a start bit (logic 1).

use serde::{Deserialize, Serialize};

use crate::dsp::{self, MagnitudeTrace, CARRIER_HZ, DEFAULT_SAMPLE_RATE_HZ, SUBCARRIER_HZ};
use crate::error::{Error, Result};
use crate::protocol::{Bits, Sender};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubcarrierShape {
    Square,
    Sine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModemConfig {
    pub sample_rate: f64,
    /// 106 kbit/s, f_c / 128.
    pub bit_rate: f64,
    pub subcarrier_hz: f64,
    pub reader_high: f64,
    pub reader_pause: f64,
    /// Peak subcarrier ripple relative to the carrier.
    pub card_mod_depth: f64,
    /// Unmodulated bit periods between consecutive messages.
    pub guard_bits: usize,
    /// Flip every demodulated bit (polarity of externally decoded traces).
    pub invert_bits: bool,
    pub subcarrier_shape: SubcarrierShape,
    /// Samples per reader bit period allowed to disagree with the best
    /// matching Miller pattern.
    pub pattern_tolerance: usize,
}

impl Default for ModemConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE_HZ,
            bit_rate: CARRIER_HZ / 128.0,
            subcarrier_hz: SUBCARRIER_HZ,
            reader_high: 1.0,
            reader_pause: 0.0,
            card_mod_depth: 0.08,
            guard_bits: 10,
            invert_bits: false,
            subcarrier_shape: SubcarrierShape::Square,
            pattern_tolerance: 0,
        }
    }
}

impl ModemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate >= 2.0 * self.subcarrier_hz) {
            return Err(Error::Parameter(format!(
                "sample rate {} Hz cannot carry a {} Hz subcarrier",
                self.sample_rate, self.subcarrier_hz
            )));
        }
        if !(self.card_mod_depth > 0.0 && self.card_mod_depth < 1.0) {
            return Err(Error::Parameter(format!("card_mod_depth {} not in (0, 1)", self.card_mod_depth)));
        }
        if !(self.bit_rate > 0.0) || self.samples_per_bit_f() < 4.0 {
            return Err(Error::Parameter("bit period shorter than four samples".into()));
        }
        if !(self.reader_high > self.reader_pause) {
            return Err(Error::Parameter("reader_high must exceed reader_pause".into()));
        }
        Ok(())
    }

    pub fn samples_per_bit_f(&self) -> f64 {
        self.sample_rate / self.bit_rate
    }

    /// Bit period rounded to whole samples.
    pub fn samples_per_bit(&self) -> usize {
        self.samples_per_bit_f().round() as usize
    }

    fn bit_start(&self, k: usize) -> usize {
        (k as f64 * self.samples_per_bit_f()).round() as usize
    }

    pub fn pause_samples(&self) -> usize {
        (self.samples_per_bit_f() / 4.0).round().max(1.0) as usize
    }

    /// Samples occupied by a modulated reader frame of `n_bits`.
    pub fn reader_frame_samples(&self, n_bits: usize) -> usize {
        self.bit_start(n_bits + 2)
    }

    /// Samples occupied by a modulated card frame of `n_bits`.
    pub fn card_frame_samples(&self, n_bits: usize) -> usize {
        self.bit_start(n_bits + 2)
    }

    /// Peak of a clean envelope: the carrier plus the card ripple.
    pub fn clean_peak(&self) -> f64 {
        self.reader_high * (1.0 + self.card_mod_depth)
    }
}

/// Half-open sample interval of a trace holding one message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub sender_hint: Option<Sender>,
}

impl Segment {
    pub fn new(start: usize, end: usize, sender_hint: Option<Sender>) -> Result<Self> {
        if start >= end {
            return Err(Error::Parameter(format!("empty segment [{start}, {end})")));
        }
        Ok(Self { start, end, sender_hint })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn overlap(&self, start: usize, end: usize) -> usize {
        self.end.min(end).saturating_sub(self.start.max(start))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Miller {
    X,
    Y,
    Z,
}

fn miller_sequence(bits: &[bool]) -> Vec<Miller> {
    let mut out = Vec::with_capacity(bits.len() + 2);
    out.push(Miller::Z);
    let mut prev_one = false;
    for &b in bits {
        out.push(match (b, prev_one) {
            (true, _) => Miller::X,
            (false, true) => Miller::Y,
            (false, false) => Miller::Z,
        });
        prev_one = b;
    }
    out.push(Miller::Y);
    out
}

/// Envelope of a reader frame: start-of-communication, one modified-Miller
/// period per bit, then one idle period.
pub fn modulate_reader(bits: &[bool], cfg: &ModemConfig) -> Result<MagnitudeTrace> {
    cfg.validate()?;
    if bits.is_empty() {
        return Err(Error::Parameter("cannot modulate an empty frame".into()));
    }
    let seq = miller_sequence(bits);
    let mut out = vec![cfg.reader_high; cfg.bit_start(seq.len())];
    let half = cfg.samples_per_bit() / 2;
    let pause = cfg.pause_samples();
    for (k, sym) in seq.iter().enumerate() {
        let offset = match sym {
            Miller::X => half,
            Miller::Z => 0,
            Miller::Y => continue,
        };
        let s = cfg.bit_start(k) + offset;
        out[s..s + pause].iter_mut().for_each(|v| *v = cfg.reader_pause);
    }
    MagnitudeTrace::new(out, cfg.sample_rate)
}

/// Subcarrier value (±1 for square) at `n` samples after frame start.
fn subcarrier(n: usize, cfg: &ModemConfig) -> f64 {
    let phase = 2.0 * std::f64::consts::PI * cfg.subcarrier_hz * (n as f64 + 0.5) / cfg.sample_rate;
    match cfg.subcarrier_shape {
        SubcarrierShape::Square => phase.sin().signum(),
        SubcarrierShape::Sine => phase.sin(),
    }
}

/// Envelope of a card frame: carrier with subcarrier ripple in the
/// Manchester half-bits, a leading start bit and a trailing idle period.
pub fn modulate_card(bits: &[bool], cfg: &ModemConfig) -> Result<MagnitudeTrace> {
    cfg.validate()?;
    if bits.is_empty() {
        return Err(Error::Parameter("cannot modulate an empty frame".into()));
    }
    let n_periods = bits.len() + 2;
    let mut out = vec![cfg.reader_high; cfg.bit_start(n_periods)];
    let ripple = cfg.reader_high * cfg.card_mod_depth;
    for (k, &b) in std::iter::once(&true).chain(bits).enumerate() {
        let start = cfg.bit_start(k);
        let end = cfg.bit_start(k + 1);
        let mid = start + (end - start) / 2;
        let (lo, hi) = if b { (start, mid) } else { (mid, end) };
        for (n, v) in out.iter_mut().enumerate().take(hi).skip(lo) {
            *v += ripple * subcarrier(n, cfg);
        }
    }
    MagnitudeTrace::new(out, cfg.sample_rate)
}

/// Recovers frame bits from one message segment. Start and end-of-frame
/// periods are stripped; the result feeds [`crate::protocol::decode_frame`].
pub fn demodulate(
    trace: &MagnitudeTrace,
    seg: &Segment,
    sender: Sender,
    cfg: &ModemConfig,
) -> Result<Bits> {
    cfg.validate()?;
    if seg.end > trace.len() || seg.start >= seg.end {
        return Err(Error::Parameter(format!(
            "segment [{}, {}) outside trace of {} samples",
            seg.start,
            seg.end,
            trace.len()
        )));
    }
    if seg.len() <= cfg.samples_per_bit() {
        return Err(Error::Parameter("segment shorter than one bit period".into()));
    }
    let mut bits = match sender {
        Sender::Reader => demod_reader(trace.samples(), seg, cfg)?,
        Sender::Card => demod_card(trace.samples(), seg, cfg)?,
    };
    if cfg.invert_bits {
        bits.iter_mut().for_each(|b| *b = !*b);
    }
    Ok(bits)
}

/// Carrier level of a segment. Pauses and ripple troughs are a minority of
/// samples, so the median sits on the carrier.
fn carrier_level(x: &[f64]) -> f64 {
    dsp::percentile(x, 0.5)
}

fn demod_reader(x: &[f64], seg: &Segment, cfg: &ModemConfig) -> Result<Bits> {
    let seg_x = &x[seg.start..seg.end];
    let high = carrier_level(seg_x);
    let pause_level = cfg.reader_pause * high / cfg.reader_high;
    let threshold = 0.5 * (high + pause_level);
    let Some(first) = seg_x.iter().position(|&v| v < threshold) else {
        return Err(Error::Demod { position: 0 });
    };
    let origin = seg.start + first;
    let period = cfg.samples_per_bit();
    let half = period / 2;
    let pause = cfg.pause_samples();
    let template = |sym: Miller, j: usize| match sym {
        Miller::X => (half..half + pause).contains(&j),
        Miller::Z => j < pause,
        Miller::Y => false,
    };

    let mut symbols = Vec::new();
    let mut k = 0;
    loop {
        let start = origin + cfg.bit_start(k);
        if start >= seg.end || start + period > x.len() {
            break;
        }
        let window = &x[start..start + period];
        let (best, mismatches) = [Miller::X, Miller::Y, Miller::Z]
            .into_iter()
            .map(|sym| {
                let miss = window
                    .iter()
                    .enumerate()
                    .filter(|&(j, &v)| (v < threshold) != template(sym, j))
                    .count();
                (sym, miss)
            })
            .min_by_key(|&(_, miss)| miss)
            .expect("three candidates");
        if mismatches > cfg.pattern_tolerance {
            return Err(Error::Demod { position: k });
        }
        if k == 0 && best != Miller::Z {
            return Err(Error::Demod { position: 0 });
        }
        symbols.push(best);
        k += 1;
    }

    // walk the data periods; a Y after a logic 0 marks end of frame
    let mut bits = Vec::new();
    let mut prev_one = false;
    let mut last_was_y = false;
    for (pos, sym) in symbols.iter().enumerate().skip(1) {
        match (sym, prev_one) {
            (Miller::X, _) => {
                bits.push(true);
                prev_one = true;
                last_was_y = false;
            }
            (Miller::Y, true) => {
                bits.push(false);
                prev_one = false;
                last_was_y = true;
            }
            (Miller::Y, false) => break,
            (Miller::Z, false) => {
                bits.push(false);
                last_was_y = false;
            }
            (Miller::Z, true) => return Err(Error::Demod { position: pos }),
        }
    }
    // A trailing "0 after 1" cannot be told apart from the end-of-frame
    // idle period. Drop it, then complete to the nearest frame length:
    // 7 bits for a short frame, a multiple of 9 for a standard one.
    if last_was_y {
        bits.pop();
    }
    if bits.is_empty() {
        return Err(Error::Demod { position: 1 });
    }
    let target = if bits.len() <= 7 { 7 } else { bits.len().div_ceil(9) * 9 };
    if target - bits.len() > 1 {
        return Err(Error::Demod { position: bits.len() + 1 });
    }
    bits.resize(target, false);
    Ok(bits)
}

/// Squared central-difference gradient of `x`, the per-sample subcarrier
/// energy measure shared by the card demodulator and the segmenter.
pub(crate) fn gradient_energy(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let a = x[i.saturating_sub(1)];
            let b = x[(i + 1).min(n - 1)];
            let g = (b - a) / 2.0;
            g * g
        })
        .collect()
}

/// Gradient energy of one modulated half-bit at unit carrier.
fn reference_half_energy(cfg: &ModemConfig) -> f64 {
    let half = cfg.samples_per_bit() / 2;
    let ripple = cfg.card_mod_depth;
    let x: Vec<f64> = (0..3 * half).map(|n| 1.0 + ripple * subcarrier(n, cfg)).collect();
    gradient_energy(&x)[half..2 * half].iter().sum()
}

fn demod_card(x: &[f64], seg: &Segment, cfg: &ModemConfig) -> Result<Bits> {
    let period = cfg.samples_per_bit();
    let half = period / 2;
    // look slightly past the segment so the last bit and the idle period fit
    let lo = seg.start.saturating_sub(period);
    let hi = (seg.end + 2 * period).min(x.len());
    let local = &x[lo..hi];
    let level = carrier_level(&x[seg.start..seg.end]);
    let energy = gradient_energy(local);
    let e_ref = reference_half_energy(cfg) * level * level;
    if !(e_ref > 0.0) {
        return Err(Error::Demod { position: 0 });
    }

    // prefix sums over the energy for O(1) half-bit sums
    let mut prefix = Vec::with_capacity(energy.len() + 1);
    prefix.push(0.0);
    for e in &energy {
        prefix.push(prefix.last().unwrap() + e);
    }
    let sum = |a: usize, b: usize| prefix[b.min(energy.len())] - prefix[a.min(energy.len())];

    // alignment: the origin within half a bit of the segment start that
    // maximizes the half-bit energy contrast over the first bits
    let seg_rel = seg.start - lo;
    let probe_bits = 16.min(energy.len().saturating_sub(seg_rel) / period).max(1);
    let contrast = |origin: usize| -> f64 {
        (0..probe_bits)
            .map(|k| {
                let s = origin + k * period;
                (sum(s, s + half) - sum(s + half, s + period)).abs()
            })
            .sum()
    };
    let origin = (seg_rel.saturating_sub(half)..=seg_rel + half)
        .filter(|&o| o + period <= energy.len())
        .max_by(|&a, &b| {
            contrast(a)
                .total_cmp(&contrast(b))
                .then(b.abs_diff(seg_rel).cmp(&a.abs_diff(seg_rel)))
        })
        .ok_or(Error::Demod { position: 0 })?;

    // The segment end fixes the number of bit periods: modulation stops at
    // the middle (last bit 1) or the end (last bit 0) of the final period.
    let span = (seg.end - lo).saturating_sub(origin) as f64 - period as f64 / 4.0;
    let n_periods = (span / cfg.samples_per_bit_f()).ceil().max(1.0) as usize;
    let mut halves = Vec::with_capacity(n_periods);
    for k in 0..n_periods {
        let s = origin + cfg.bit_start(k);
        let e = origin + cfg.bit_start(k + 1);
        if e > energy.len() {
            break;
        }
        let m = s + (e - s) / 2;
        halves.push((sum(s, m), sum(m, e)));
    }
    // drop trailing periods without subcarrier, measured against the
    // unmodulated half of each bit
    let quiet: Vec<f64> = halves.iter().map(|&(a, b)| a.min(b)).collect();
    let floor = dsp::percentile(&quiet, 0.5);
    let present = |a: f64, b: f64| a.max(b) >= floor + 0.5 * e_ref;
    match halves.first() {
        Some(&(a, b)) if a > b && present(a, b) => {}
        _ => return Err(Error::Demod { position: 0 }),
    }
    while halves.len() > 1 && halves.last().is_some_and(|&(a, b)| !present(a, b)) {
        halves.pop();
    }
    let bits = halves[1..].iter().map(|&(a, b)| a > b).collect();
    Ok(bits)
}
