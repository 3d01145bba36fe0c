use std::f64::consts::PI;

use super::MagnitudeTrace;
use crate::error::{Error, Result};

const MAX_TAPS: usize = 4001;

/// Blackman-windowed sinc low-pass taps with unity DC gain.
///
/// `taps` is forced odd so the filter has an integer group delay.
pub fn design_lowpass(cutoff_hz: f64, sample_rate: f64, taps: usize) -> Result<Vec<f64>> {
    let nyquist = sample_rate / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::Parameter(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    let taps = taps.max(3) | 1;
    let fc = cutoff_hz / sample_rate;
    let mid = (taps / 2) as f64;
    let m = (taps - 1) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let k = n as f64 - mid;
            let sinc = if k == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * k).sin() / (PI * k) };
            let x = 2.0 * PI * n as f64 / m;
            let w = 0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos();
            sinc * w
        })
        .collect();
    let gain: f64 = h.iter().sum();
    h.iter_mut().for_each(|c| *c /= gain);
    Ok(h)
}

/// Tap count giving a transition band from `0.8·cutoff` to `1.5·cutoff`
/// for a Blackman window (transition ≈ 5.5 / taps in normalized frequency).
fn default_taps(cutoff_hz: f64, sample_rate: f64) -> usize {
    let transition = 0.7 * cutoff_hz / sample_rate;
    ((5.5 / transition).ceil() as usize).clamp(15, MAX_TAPS) | 1
}

/// Linear-phase FIR low-pass. The output has the input's length; the
/// trace is edge-padded so the ends do not droop toward zero.
pub fn lowpass_filter(trace: &MagnitudeTrace, cutoff_hz: f64) -> Result<MagnitudeTrace> {
    let taps = default_taps(cutoff_hz.max(f64::MIN_POSITIVE), trace.sample_rate());
    lowpass_filter_with_taps(trace, cutoff_hz, taps)
}

pub fn lowpass_filter_with_taps(
    trace: &MagnitudeTrace,
    cutoff_hz: f64,
    taps: usize,
) -> Result<MagnitudeTrace> {
    let h = design_lowpass(cutoff_hz, trace.sample_rate(), taps)?;
    let x = trace.samples();
    if x.is_empty() {
        return Ok(trace.clone());
    }
    let half = h.len() / 2;
    let first = x[0];
    let last = x[x.len() - 1];
    let at = |i: isize| -> f64 {
        if i < 0 {
            first
        } else if i as usize >= x.len() {
            last
        } else {
            x[i as usize]
        }
    };
    let out = (0..x.len())
        .map(|n| {
            let base = n as isize - half as isize;
            h.iter()
                .enumerate()
                .map(|(k, c)| c * at(base + (h.len() - 1 - k) as isize))
                .sum()
        })
        .collect();
    Ok(trace.with_samples(out))
}

/// Zero-phase second-order notch at `freq_hz`. The pole radius `r` sets
/// the width: the -3 dB band is about `(1 - r) * sample_rate / π` wide.
/// The filter runs forward and then backward over the samples.
pub fn notch_filter(x: &[f64], freq_hz: f64, sample_rate: f64, r: f64) -> Result<Vec<f64>> {
    if !(freq_hz > 0.0 && freq_hz < sample_rate / 2.0) {
        return Err(Error::Parameter(format!("notch frequency {freq_hz} Hz outside (0, Nyquist)")));
    }
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Parameter(format!("pole radius {r} not in [0, 1)")));
    }
    let c = 2.0 * (2.0 * PI * freq_hz / sample_rate).cos();
    // unity gain at DC
    let gain = (1.0 - c * r + r * r) / (2.0 - c);
    let pass = |input: &mut Vec<f64>| {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in input.iter_mut() {
            let x0 = *v;
            let y0 = gain * (x0 - c * x1 + x2) + c * r * y1 - r * r * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    };
    let mut y = x.to_vec();
    pass(&mut y);
    y.reverse();
    pass(&mut y);
    y.reverse();
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::DEFAULT_SAMPLE_RATE_HZ;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FS: f64 = DEFAULT_SAMPLE_RATE_HZ;

    fn tone(freq: f64, n: usize) -> MagnitudeTrace {
        let v = (0..n).map(|k| (2.0 * PI * freq * k as f64 / FS + 0.3).sin()).collect();
        MagnitudeTrace::new(v, FS).unwrap()
    }

    /// RMS over the interior, away from edge-padding transients.
    fn interior_rms(t: &MagnitudeTrace, skip: usize) -> f64 {
        let s = &t.samples()[skip..t.len() - skip];
        (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt()
    }

    #[test]
    fn dc_passes_unchanged() {
        let t = MagnitudeTrace::new(vec![0.8; 2000], FS).unwrap();
        let y = lowpass_filter(&t, 400e3).unwrap();
        assert_eq!(y.len(), t.len());
        assert!(y.samples().iter().all(|v| (v - 0.8).abs() < 1e-6));
    }

    #[test]
    fn tone_above_cutoff_is_rejected_and_below_passes() {
        for &cutoff in &[200e3, 423.75e3, 847.5e3] {
            let taps = default_taps(cutoff, FS);
            let n = 20_000;
            let stop = tone(2.0 * cutoff, n);
            let pass = tone(0.5 * cutoff, n);
            let ys = lowpass_filter(&stop, cutoff).unwrap();
            let yp = lowpass_filter(&pass, cutoff).unwrap();
            let ratio_stop = interior_rms(&ys, taps) / interior_rms(&stop, taps);
            let ratio_pass = interior_rms(&yp, taps) / interior_rms(&pass, taps);
            assert!(ratio_stop <= 0.01, "cutoff {cutoff}: stop ratio {ratio_stop}");
            assert!((ratio_pass - 1.0).abs() <= 0.05, "cutoff {cutoff}: pass ratio {ratio_pass}");
        }
    }

    #[test]
    fn frequency_response_meets_mask() {
        // evaluate H(f) directly from the taps
        let cutoff = 500e3;
        let h = design_lowpass(cutoff, FS, default_taps(cutoff, FS)).unwrap();
        let resp = |f: f64| {
            let w = 2.0 * PI * f / FS;
            let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, c)| {
                (re + c * (w * k as f64).cos(), im - c * (w * k as f64).sin())
            });
            (re * re + im * im).sqrt()
        };
        for i in 0..=100 {
            let f = 0.8 * cutoff * i as f64 / 100.0;
            let db = 20.0 * resp(f).log10();
            assert!(db.abs() <= 1.0, "passband {f} Hz: {db} dB");
        }
        for i in 0..=100 {
            let f = 1.5 * cutoff + (FS / 2.0 - 1.5 * cutoff) * i as f64 / 100.0;
            let db = 20.0 * resp(f).log10();
            assert!(db <= -40.0, "stopband {f} Hz: {db} dB");
        }
    }

    #[test]
    fn filter_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..3000).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..3000).map(|_| rng.random::<f64>()).collect();
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = lowpass_filter(&MagnitudeTrace::new(x, FS).unwrap(), 300e3).unwrap();
        let fy = lowpass_filter(&MagnitudeTrace::new(y, FS).unwrap(), 300e3).unwrap();
        let fc = lowpass_filter(&MagnitudeTrace::new(combo, FS).unwrap(), 300e3).unwrap();
        for k in 0..fc.len() {
            let expect = a * fx.samples()[k] + b * fy.samples()[k];
            assert!((fc.samples()[k] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn cutoff_at_or_above_nyquist_is_rejected() {
        let t = MagnitudeTrace::new(vec![1.0; 10], FS).unwrap();
        assert!(lowpass_filter(&t, FS / 2.0).is_err());
        assert!(lowpass_filter(&t, 0.0).is_err());
    }

    #[test]
    fn notch_removes_its_tone_and_keeps_others() {
        let n = 60_000;
        let hum = tone(800e3, n);
        let keep = tone(847.5e3, n);
        let mixed: Vec<f64> = hum.samples().iter().zip(keep.samples()).map(|(a, b)| a + b).collect();
        let y = notch_filter(&mixed, 800e3, FS, 0.995).unwrap();
        let skip = 5000;
        let resid: Vec<f64> = y.iter().zip(keep.samples()).map(|(a, b)| a - b).collect();
        let rms = |v: &[f64]| (v[skip..v.len() - skip].iter().map(|x| x * x).sum::<f64>() / (v.len() - 2 * skip) as f64).sqrt();
        assert!(rms(&resid) < 0.05 * rms(hum.samples()));
        assert!(notch_filter(&mixed, 0.0, FS, 0.99).is_err());
        assert!(notch_filter(&mixed, 1e5, FS, 1.0).is_err());
    }

    #[test]
    fn notch_passes_dc() {
        let y = notch_filter(&vec![0.8; 5000], 300e3, FS, 0.99).unwrap();
        assert!(y[2000..3000].iter().all(|v| (v - 0.8).abs() < 1e-9));
    }
}
