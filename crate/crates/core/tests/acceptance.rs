//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use nfcjamlab::dsp::{self, MagnitudeTrace};
use nfcjamlab::jammer::{gen_gaussian_noise, NoiseProfile};
use nfcjamlab::modem::ModemConfig;
use nfcjamlab::pipeline::{
    average_traces, countermeasure_sweep, metrics_json, run_attack, simulate_session, AttackConfig, MetricsRow,
    SessionMetrics, SweepFamily,
};
use nfcjamlab::protocol::{
    classic_transcript, crc_a, decode_frame, encode_frame, ultralight_transcript, CardKind, CardMemory, FrameKind,
    Message, Sender, Transcript,
};
use nfcjamlab::spectrum::{classify_blocking_card, estimate_psd_with, synthetic_recordings, CardLabel, ClassifierConfig, Window};

const FS: f64 = 3.39e6;
/// Seeds per sweep point.
const SWEEP_SEEDS: u64 = 20;

type Outcome = Result<String, String>;

fn ul() -> Transcript {
    ultralight_transcript(&CardMemory::default_ultralight()).unwrap()
}

fn cl() -> Transcript {
    classic_transcript(&CardMemory::default_classic(), 1).unwrap()
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fmt_curve(rows: &[MetricsRow], pick: fn(&MetricsRow) -> f64) -> String {
    rows.iter().map(|r| format!("{}:{:.3}", r.param, pick(r))).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// 1. round trip at zero noise
// ---------------------------------------------------------------------------

fn round_trip_integrity() -> Outcome {
    let t0 = Instant::now();
    let m = ModemConfig::default();
    let cfg = AttackConfig::default();
    let mut details = Vec::new();
    let mut ok = true;
    for (name, t) in [("ultralight", ul()), ("classic", cl())] {
        let r = run_attack(&t, &NoiseProfile::gaussian(0.0), &cfg, &m, 1).map_err(|e| e.to_string())?;
        let x = &r.metrics;
        let rates = [x.card_detection_rate, x.card_demodulation_rate, x.reader_demodulation_rate, x.attack_success_rate];
        ok &= rates.iter().all(|&v| v == 1.0) && x.counts.repetitions == 80;
        details.push(format!("{name} {} msgs det/demod/reader/asr {:?}", t.messages.len(), rates));
    }
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs < 30.0;
    details.push(format!("{secs:.1} s"));
    check(ok, details.join("; "))
}

// ---------------------------------------------------------------------------
// 2. Gaussian countermeasure curve
// ---------------------------------------------------------------------------

fn gaussian_curve() -> Outcome {
    let rows = countermeasure_sweep(
        &ul(),
        &SweepFamily::default_gaussian(),
        &AttackConfig::default(),
        &ModemConfig::default(),
        &seeds(SWEEP_SEEDS),
    )
    .map_err(|e| e.to_string())?;
    let card: Vec<f64> = rows.iter().map(|r| r.card_demod_rate).collect();
    let reader: Vec<f64> = rows.iter().map(|r| r.reader_demod_rate).collect();
    let at = |p: f64| rows.iter().position(|r| (r.param - p).abs() < 1e-9).expect("sweep point");
    let mut ok = card[at(0.05)] >= 0.90 && card[at(0.25)] <= 0.05;
    ok &= card.windows(2).all(|w| w[1] - w[0] <= 0.02);
    ok &= rows.iter().filter(|r| r.param <= 0.20 + 1e-9).all(|r| r.reader_demod_rate >= 0.8);
    ok &= reader[at(0.30)] < reader[at(0.25)] && reader[at(0.30)] <= reader[at(0.20)] - 0.2;
    check(
        ok,
        format!(
            "{SWEEP_SEEDS} seeds; card {}; reader {}",
            fmt_curve(&rows, |r| r.card_demod_rate),
            fmt_curve(&rows, |r| r.reader_demod_rate)
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. multi-tone countermeasure curve
// ---------------------------------------------------------------------------

fn multitone_curve() -> Outcome {
    let rows = countermeasure_sweep(
        &ul(),
        &SweepFamily::default_tones(),
        &AttackConfig::default(),
        &ModemConfig::default(),
        &seeds(SWEEP_SEEDS),
    )
    .map_err(|e| e.to_string())?;
    let mut ok = true;
    for r in &rows {
        if (r.param - 0.05e6).abs() < 1.0 {
            ok &= r.card_demod_rate == 0.0 && r.reader_demod_rate == 0.0;
        }
        if r.param >= 0.20e6 - 1.0 {
            ok &= r.card_demod_rate >= 0.70 && r.reader_demod_rate >= 0.70;
        }
    }
    check(
        ok,
        format!(
            "{SWEEP_SEEDS} seeds; card {}; reader {}",
            fmt_curve(&rows, |r| r.card_demod_rate),
            fmt_curve(&rows, |r| r.reader_demod_rate)
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. averaging improvement
// ---------------------------------------------------------------------------

const AVERAGING_SEEDS: u64 = 4;

fn mean_card_rate(profile: impl Fn(u64) -> NoiseProfile, n: usize) -> Result<f64, String> {
    let m = ModemConfig::default();
    let cfg = AttackConfig { averaging_n: n, ..AttackConfig::default() };
    let mut total = 0.0;
    for seed in 0..AVERAGING_SEEDS {
        total += run_attack(&ul(), &profile(seed), &cfg, &m, seed).map_err(|e| e.to_string())?.metrics.card_demodulation_rate;
    }
    Ok(total / AVERAGING_SEEDS as f64)
}

fn averaging_improvement() -> Outcome {
    // calibrate: the first factor whose single-trace rate lies in [0.2, 0.5]
    let mut factor = None;
    let mut tried = Vec::new();
    for f in [0.08, 0.09, 0.10, 0.11, 0.12] {
        let r = mean_card_rate(|_| NoiseProfile::gaussian(f), 1)?;
        tried.push(format!("{f}:{r:.3}"));
        if (0.2..=0.5).contains(&r) {
            factor = Some(f);
            break;
        }
    }
    let Some(f) = factor else {
        return Err(format!("no factor with single-trace rate in [0.2, 0.5]: {}", tried.join(" ")));
    };
    let mut curve = Vec::new();
    for n in AttackConfig::AVERAGING_CHOICES {
        curve.push(mean_card_rate(|_| NoiseProfile::gaussian(f), n)?);
    }
    let monotone = curve.windows(2).all(|w| w[1] >= w[0]);
    let gain = curve[curve.len() - 1] - curve[0];
    let tones = SweepFamily::default_tones();
    let mut tone_curve = Vec::new();
    for n in AttackConfig::AVERAGING_CHOICES {
        tone_curve.push(mean_card_rate(|seed| tones.profile(0.05e6, seed), n)?);
    }
    let tones_dead = tone_curve.iter().all(|&r| r == 0.0);
    let show = |c: &[f64]| {
        AttackConfig::AVERAGING_CHOICES.iter().zip(c).map(|(n, r)| format!("{n}:{r:.3}")).collect::<Vec<_>>().join(" ")
    };
    check(
        monotone && gain >= 0.2 && tones_dead,
        format!("gaussian factor {f}: {}; gain {gain:.3}; 0.05 MHz tones: {}", show(&curve), show(&tone_curve)),
    )
}

// ---------------------------------------------------------------------------
// 5. metric invariants
// ---------------------------------------------------------------------------

fn random_profile(rng: &mut ChaCha8Rng) -> NoiseProfile {
    let p = match rng.random_range(0..5) {
        0 | 1 => NoiseProfile::gaussian(rng.random_range(0.0..0.4)),
        2 => {
            let mut p = NoiseProfile::multitone(rng.random_range(0.05e6..0.3e6));
            if let nfcjamlab::jammer::NoiseKind::MultiTone { phase_seed, .. } = &mut p.kind {
                *phase_seed = rng.random();
            }
            p
        }
        3 => NoiseProfile::default_mixture(),
        _ => NoiseProfile::shielding(rng.random_range(0.0..1.0)),
    };
    if rng.random_bool(0.1) && p.is_additive() {
        p.active()
    } else {
        p
    }
}

fn metric_invariants() -> Outcome {
    let m = ModemConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = Vec::new();
    const RUNS: usize = 1000;
    for run in 0..RUNS {
        let classic = rng.random_bool(0.3);
        let t = if classic { cl() } else { ul() };
        let reps = rng.random_range(1..=2);
        let averaging_n = if classic { 1 } else { rng.random_range(1..=2) };
        let cfg = AttackConfig { repetitions: reps, averaging_n, ..AttackConfig::default() };
        let profile = random_profile(&mut rng);
        let seed: u64 = rng.random();
        let r = run_attack(&t, &profile, &cfg, &m, seed).map_err(|e| format!("run {run}: {e}"))?;
        let x = &r.metrics;
        let c = &x.counts;
        let successes = x.per_session_success.iter().filter(|&&s| s).count();
        let fine = x.card_demodulation_rate <= x.card_detection_rate
            && c.card_demodulated <= c.card_detected
            && c.card_detected <= c.card_messages
            && c.reader_demodulated <= c.reader_messages
            && x.per_session_success.len() == reps
            && successes == c.successes
            && x.attack_success_rate == c.successes as f64 / reps as f64
            && x.bypassed == (c.successes > 0);
        if !fine {
            violations.push(format!("run {run} {}: {:?}", profile.label(), c));
        }
    }
    // determinism: identical inputs give byte-identical metrics files
    let mut identical = true;
    for seed in 0..10 {
        let cfg = AttackConfig { repetitions: 4, ..AttackConfig::default() };
        let p = NoiseProfile::gaussian(0.1 + 0.01 * seed as f64);
        let file = |r: SessionMetrics| metrics_json(&[MetricsRow::from_metrics(0.0, &r)]).unwrap() + &serde_json::to_string(&r).unwrap();
        let a = file(run_attack(&ul(), &p, &cfg, &m, seed).map_err(|e| e.to_string())?.metrics);
        let b = file(run_attack(&ul(), &p, &cfg, &m, seed).map_err(|e| e.to_string())?.metrics);
        identical &= a.as_bytes() == b.as_bytes();
    }
    check(
        violations.is_empty() && identical,
        format!(
            "{RUNS} randomized runs, {} violations{}; reruns byte-identical: {identical}",
            violations.len(),
            violations.first().map_or(String::new(), |v| format!(", first: {v}"))
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. protocol conformance
// ---------------------------------------------------------------------------

/// CRC_A shifted one bit at a time through the reflected LFSR.
fn crc_a_lfsr(data: &[u8]) -> [u8; 2] {
    let mut reg: u16 = 0x6363;
    for &byte in data {
        for i in 0..8 {
            let bit = ((byte >> i) & 1) as u16;
            let feedback = (reg ^ bit) & 1;
            reg >>= 1;
            if feedback == 1 {
                reg ^= 0x8408;
            }
        }
    }
    [(reg & 0xFF) as u8, (reg >> 8) as u8]
}

fn random_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random()).collect()
}

fn protocol_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vectors = crc_a(&[0x00, 0x00]) == [0xA0, 0x1E] && crc_a(&[0x12, 0x34]) == [0x26, 0xCF];
    let crc_mismatch = (0..10_000)
        .filter(|_| {
            let n = rng.random_range(0..=64);
            let data = random_bytes(&mut rng, n);
            crc_a(&data) != crc_a_lfsr(&data)
        })
        .count();

    let mut round_trip_failures = 0;
    for _ in 0..10_000 {
        let msg = if rng.random_bool(0.1) {
            Message::new(Sender::Reader, vec![rng.random_range(0..0x80)], FrameKind::Short, "short", false)
        } else {
            let crc = rng.random_bool(0.5);
            let n = rng.random_range(1..=64);
            let sender = if rng.random_bool(0.5) { Sender::Reader } else { Sender::Card };
            Message::new(sender, random_bytes(&mut rng, n), FrameKind::Standard, "standard", crc)
        }
        .map_err(|e| e.to_string())?;
        let ok = encode_frame(&msg)
            .and_then(|bits| decode_frame(&bits, msg.frame_kind, msg.crc))
            .is_ok_and(|p| p == msg.payload);
        round_trip_failures += usize::from(!ok);
    }

    let mut undetected = 0;
    let mut flips = 0;
    for _ in 0..20 {
        let msg = Message::new(Sender::Card, random_bytes(&mut rng, 16), FrameKind::Standard, "read", true)
            .map_err(|e| e.to_string())?;
        let bits = encode_frame(&msg).map_err(|e| e.to_string())?;
        for i in 0..bits.len() {
            let mut b = bits.clone();
            b[i] = !b[i];
            flips += 1;
            undetected += usize::from(decode_frame(&b, FrameKind::Standard, true).is_ok());
        }
    }
    check(
        vectors && crc_mismatch == 0 && round_trip_failures == 0 && undetected == 0,
        format!(
            "annex vectors {vectors}; LFSR mismatches {crc_mismatch}/10000; round-trip failures {round_trip_failures}/10000; undetected single-bit flips {undetected}/{flips}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. spectrum classifier
// ---------------------------------------------------------------------------

fn spectrum_classifier() -> Outcome {
    let cfg = ClassifierConfig::default();
    let mut wrong = Vec::new();
    for label in [CardLabel::ReactiveGaussian, CardLabel::ReactiveFixedFrequency, CardLabel::Active, CardLabel::Shielding] {
        for seed in 0..50 {
            let (on, off) = synthetic_recordings(label, 1 << 15, 1000 + seed).map_err(|e| e.to_string())?;
            let got = classify_blocking_card(&on, &off, &cfg).map_err(|e| e.to_string())?.label;
            if got != label {
                wrong.push(format!("{label:?} seed {seed} -> {got:?}"));
            }
        }
    }
    let mut parseval = Vec::new();
    for (window, seed) in [(Window::Hann, 1), (Window::Rectangular, 2)] {
        let noise = gen_gaussian_noise(1 << 18, 1.0, 0.2, FS, seed).map_err(|e| e.to_string())?;
        let v: Vec<f64> = noise
            .samples()
            .iter()
            .enumerate()
            .map(|(k, n)| n + 0.4 * (2.0 * PI * 300e3 * k as f64 / FS).sin() + 0.5)
            .collect();
        let t = MagnitudeTrace::new(v, FS).unwrap();
        let psd = estimate_psd_with(&t, 2048, window).map_err(|e| e.to_string())?;
        let ms = t.samples().iter().map(|x| x * x).sum::<f64>() / t.len() as f64;
        parseval.push(psd.total_power() / ms);
    }
    let parseval_ok = parseval.iter().all(|r| (r - 1.0).abs() <= 0.02);
    check(
        wrong.is_empty() && parseval_ok,
        format!(
            "{}/200 fixtures correct{}; PSD/mean-square Hann {:.4} rectangular {:.4}",
            200 - wrong.len(),
            wrong.first().map_or(String::new(), |w| format!(", first miss: {w:?}")),
            parseval[0],
            parseval[1]
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. DSP oracles
// ---------------------------------------------------------------------------

fn naive_moving_average(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let back = ((w - 1) / 2) as isize;
    let fwd = (w / 2) as isize;
    (0..n)
        .map(|i| {
            let lo = (i - back).max(0);
            let hi = (i + fwd).min(n - 1);
            let s: f64 = (lo..=hi).map(|j| x[j as usize]).sum();
            s / (hi - lo + 1) as f64
        })
        .collect()
}

fn tone(freq: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| (2.0 * PI * freq * k as f64 / FS + 0.3).sin()).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn dsp_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for case in 0..300 {
        let n = if case == 0 { 100_000 } else { rng.random_range(1..4000) };
        let offset = rng.random_range(-2.0..2.0);
        let x: Vec<f64> = (0..n).map(|_| offset + rng.random_range(-1.0..1.0)).collect();
        let w = rng.random_range(1..=n.min(512));
        let t = MagnitudeTrace::new(x.clone(), FS).unwrap();
        let got = dsp::moving_average(&t, w).map_err(|e| e.to_string())?;
        for (a, b) in got.samples().iter().zip(naive_moving_average(&x, w)) {
            worst = worst.max((a - b).abs());
        }
    }
    let ma_ok = worst <= 1e-12;

    let m = ModemConfig::default();
    let clean = simulate_session(&ul(), &NoiseProfile::gaussian(0.0), &m, 1).map_err(|e| e.to_string())?.trace;
    let sigma = 0.05;
    let copies: Vec<MagnitudeTrace> = (0..16)
        .map(|_| {
            let v = clean.samples().iter().map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            MagnitudeTrace::new(v, FS).unwrap()
        })
        .collect();
    let avg = average_traces(&copies, CardKind::Ultralight, m.samples_per_bit()).map_err(|e| e.to_string())?;
    let resid: Vec<f64> = avg.samples().iter().zip(clean.samples()).map(|(a, b)| a - b).collect();
    let reduction = sigma / dsp::population_std(&resid);
    let avg_ok = (reduction - 4.0).abs() <= 0.4;

    let mut filter_ok = true;
    let mut filter_detail = Vec::new();
    let n = 40_000;
    let skip = 4001;
    for cutoff in [200e3, 423.75e3, 847.5e3] {
        let pass = MagnitudeTrace::new(tone(0.5 * cutoff, n), FS).unwrap();
        let stop = MagnitudeTrace::new(tone(2.0 * cutoff, n), FS).unwrap();
        let yp = dsp::lowpass_filter(&pass, cutoff).map_err(|e| e.to_string())?;
        let ys = dsp::lowpass_filter(&stop, cutoff).map_err(|e| e.to_string())?;
        let inner = |t: &MagnitudeTrace| rms(&t.samples()[skip..n - skip]);
        let gain_pass = 20.0 * (inner(&yp) / inner(&pass)).log10();
        let gain_stop = 20.0 * (inner(&ys) / inner(&stop)).log10();
        filter_ok &= gain_pass.abs() <= 0.5 && gain_stop <= -40.0;
        filter_detail.push(format!("{:.0}k pass {gain_pass:+.2} dB stop {gain_stop:.1} dB", cutoff / 1e3));
    }
    let mixed: Vec<f64> = tone(847.5e3, n).iter().zip(tone(400e3, n)).map(|(a, b)| a + b).collect();
    let notched = dsp::notch_filter(&mixed, 847.5e3, FS, 0.995).map_err(|e| e.to_string())?;
    let kept = tone(400e3, n);
    let leak: Vec<f64> = notched.iter().zip(&kept).map(|(a, b)| a - b).collect();
    let notch_db = 20.0 * (rms(&leak[skip..n - skip]) / rms(&kept[skip..n - skip])).log10();
    filter_ok &= notch_db <= -40.0;
    filter_detail.push(format!("notch residual {notch_db:.1} dB"));

    check(
        ma_ok && avg_ok && filter_ok,
        format!(
            "moving average max error {worst:.1e}; 16-copy noise reduction {reduction:.3}x; {}",
            filter_detail.join(", ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("round-trip integrity", round_trip_integrity),
        ("gaussian countermeasure curve", gaussian_curve),
        ("multi-tone countermeasure curve", multitone_curve),
        ("averaging improvement", averaging_improvement),
        ("metric invariants", metric_invariants),
        ("protocol conformance", protocol_conformance),
        ("spectrum classifier", spectrum_classifier),
        ("dsp oracles", dsp_oracles),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = run();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS [{id}] {name}: {d} ({secs:.1} s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {d} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
