//! The five subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use nfcjamlab::dsp::io;
use nfcjamlab::jammer::NoiseProfile;
use nfcjamlab::modem::ModemConfig;
use nfcjamlab::pipeline::{
    self, AttackConfig, LabeledTrace, MetricsRow, RecoveredTranscript, SessionMetrics, SessionTruth, SweepFamily,
};
use nfcjamlab::protocol::{self, CardKind, CardMemory, Transcript};
use nfcjamlab::spectrum::{self, ClassifierConfig};

use crate::config::{
    display, layered, read_json, read_text, resolve_seed, to_value, CardArg, CliError, CliResult, FileConfig, Output,
    RunManifest,
};

const TRACE_PREFIX: &str = "trace_";
const TRANSCRIPT_PREFIX: &str = "transcript_";
const ANNOTATIONS_PREFIX: &str = "annotations_";
const RECOVERED_PREFIX: &str = "recovered_";

fn indexed(prefix: &str, i: usize) -> String {
    format!("{prefix}{i:04}")
}

/// Indices `0..n` for which `<dir>/<prefix>NNNN.<ext>` exists, contiguous
/// from zero.
fn count_indexed(dir: &Path, prefix: &str, ext: &str) -> usize {
    (0..).take_while(|&i| dir.join(format!("{}.{ext}", indexed(prefix, i))).exists()).count()
}

fn modem_for(file: &FileConfig, base: Option<&serde_json::Value>) -> CliResult<ModemConfig> {
    let base: ModemConfig = layered(&ModemConfig::default(), base, "modem")?;
    let m: ModemConfig = layered(&base, file.modem.as_ref(), "modem")?;
    m.validate()?;
    Ok(m)
}

fn attack_config_for(file: &FileConfig, modem: &ModemConfig, base: Option<&serde_json::Value>) -> CliResult<AttackConfig> {
    let base: AttackConfig = layered(&AttackConfig::for_modem(modem), base, "attack")?;
    layered(&base, file.attack.as_ref(), "attack")
}

fn base_transcript(card: CardKind, memory: Option<&Path>, seed: u64) -> CliResult<Transcript> {
    let mem = match memory {
        Some(p) => CardMemory::from_hex_dump(&read_text(p)?)?,
        None => match card {
            CardKind::Ultralight => CardMemory::default_ultralight(),
            CardKind::Classic => CardMemory::default_classic(),
        },
    };
    if mem.kind != card {
        return Err(CliError::Usage(format!("memory dump is {:?}, card is {card:?}", mem.kind)));
    }
    Ok(match card {
        CardKind::Ultralight => protocol::ultralight_transcript(&mem)?,
        CardKind::Classic => protocol::classic_transcript(&mem, seed)?,
    })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Card family of the simulated session.
    #[arg(long, value_enum)]
    card: Option<CardArg>,
    /// Noise profile JSON; no jammer when omitted.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Number of session repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Base seed (default: config file, then NFCJAMLAB_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Card content as a hex dump, one page or block per line.
    #[arg(long)]
    memory: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, file.seed)?;
    let card: CardKind = args.card.or(file.card).unwrap_or(CardArg::Ultralight).into();
    let reps = args.reps.or(file.repetitions).unwrap_or(AttackConfig::default().repetitions);
    if reps == 0 {
        return Err(CliError::Usage("--reps must be ≥ 1".into()));
    }
    let profile = match &args.profile {
        Some(p) => read_json::<NoiseProfile>(p)?,
        None => file.profile.clone().unwrap_or_else(|| NoiseProfile::gaussian(0.0)),
    };
    profile.validate()?;
    let modem = modem_for(&file, None)?;
    let transcript = base_transcript(card, args.memory.as_deref(), seed)?;

    let sessions: Vec<LabeledTrace> = (0..reps)
        .into_par_iter()
        .map(|i| pipeline::simulate_repetition(&transcript, &profile, &modem, seed, i))
        .collect::<nfcjamlab::Result<_>>()?;

    let mut out = Output::create(&args.out, &[TRACE_PREFIX, TRANSCRIPT_PREFIX, ANNOTATIONS_PREFIX])?;
    for (i, s) in sessions.iter().enumerate() {
        let trace = s.trace.clone().with_label(format!("{} repetition {i}", profile.label()));
        out.write_trace(&indexed(TRACE_PREFIX, i), &trace)?;
        let mut text = s.truth.transcript.to_json()?;
        text.push('\n');
        out.write(&format!("{}.json", indexed(TRANSCRIPT_PREFIX, i)), text.as_bytes())?;
        out.write_json(&format!("{}.json", indexed(ANNOTATIONS_PREFIX, i)), &s.truth.annotations)?;
    }
    let config = json!({
        "card": card,
        "seed": seed,
        "repetitions": reps,
        "profile": to_value(&profile),
        "modem": to_value(&modem),
    });
    let inputs = [&args.profile, &args.memory, &args.config].into_iter().flatten().map(|p| display(p)).collect();
    out.finish("simulate", config, inputs)?;
    println!("wrote {reps} {card:?} sessions to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Directory of trace files (from `simulate` or ingested).
    #[arg(long)]
    input: PathBuf,
    /// Average each trace with this many kept traces (Ultralight only).
    #[arg(long)]
    average: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `<input>/attack`).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct LoadedRun {
    traces: Vec<nfcjamlab::dsp::MagnitudeTrace>,
    truths: Option<Vec<SessionTruth>>,
    card: Option<CardKind>,
    manifest: Option<RunManifest>,
}

fn load_truths(dir: &Path, n: usize) -> CliResult<Option<Vec<SessionTruth>>> {
    let transcripts = count_indexed(dir, TRANSCRIPT_PREFIX, "json");
    let annotations = count_indexed(dir, ANNOTATIONS_PREFIX, "json");
    if transcripts == 0 && annotations == 0 {
        return Ok(None);
    }
    if transcripts != n || annotations != n {
        return Err(CliError::Usage(format!(
            "{}: {n} traces but {transcripts} transcripts and {annotations} annotation files",
            dir.display()
        )));
    }
    (0..n)
        .map(|i| {
            let t = read_text(&dir.join(format!("{}.json", indexed(TRANSCRIPT_PREFIX, i))))?;
            let transcript = Transcript::from_json(&t)?;
            let annotations = read_json(&dir.join(format!("{}.json", indexed(ANNOTATIONS_PREFIX, i))))?;
            Ok(SessionTruth { transcript, annotations })
        })
        .collect::<CliResult<Vec<_>>>()
        .map(Some)
}

fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("{}: not a directory", dir.display())));
    }
    let n = count_indexed(dir, TRACE_PREFIX, "f32");
    if n == 0 {
        return Err(CliError::NoData(format!("{}: no {TRACE_PREFIX}NNNN.f32 files", dir.display())));
    }
    let traces = (0..n)
        .map(|i| io::read_trace(&dir.join(indexed(TRACE_PREFIX, i))).map_err(CliError::from))
        .collect::<CliResult<Vec<_>>>()?;
    let truths = load_truths(dir, n)?;
    let manifest = RunManifest::read(dir)?;
    let card = manifest
        .as_ref()
        .and_then(|m| m.config.get("card"))
        .and_then(|c| serde_json::from_value::<CardKind>(c.clone()).ok())
        .or_else(|| truths.as_ref().map(|t| t[0].transcript.card_kind));
    Ok(LoadedRun { traces, truths, card, manifest })
}

pub fn attack(args: &AttackArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let run = load_run(&args.input)?;
    let recorded = run.manifest.as_ref().map(|m| &m.config);
    let modem = modem_for(&file, recorded.and_then(|c| c.get("modem")))?;
    let mut cfg = attack_config_for(&file, &modem, None)?;
    if let Some(n) = args.average {
        cfg.averaging_n = n;
    }
    // the recorded traces fix the repetition count
    cfg.repetitions = run.traces.len();
    cfg.validate()?;
    if cfg.averaging_n > 1 && run.card == Some(CardKind::Classic) {
        return Err(CliError::Usage(
            "--average needs identical sessions; MIFARE Classic sessions differ every time".into(),
        ));
    }
    if let Some(t) = run.traces.iter().find(|t| (t.sample_rate() - modem.sample_rate).abs() > 1e-6 * modem.sample_rate) {
        return Err(CliError::Usage(format!(
            "trace sample rate {} Hz differs from the modem rate {} Hz",
            t.sample_rate(),
            modem.sample_rate
        )));
    }

    let placeholder = || SessionTruth {
        transcript: Transcript { messages: Vec::new(), card_kind: run.card.unwrap_or(CardKind::Ultralight), session_seed: None },
        annotations: Vec::new(),
    };
    let sessions: Vec<LabeledTrace> = run
        .traces
        .iter()
        .enumerate()
        .map(|(i, trace)| LabeledTrace {
            trace: trace.clone(),
            truth: run.truths.as_ref().map_or_else(placeholder, |t| t[i].clone()),
        })
        .collect();
    let result = pipeline::attack_traces(&sessions, &cfg, &modem)?;

    let out_dir = args.out.clone().unwrap_or_else(|| args.input.join("attack"));
    let mut out = Output::create(&out_dir, &[RECOVERED_PREFIX, "metrics."])?;
    for (i, r) in result.recovered.iter().enumerate() {
        out.write_json(&format!("{}.json", indexed(RECOVERED_PREFIX, i)), r)?;
    }
    if run.truths.is_some() {
        write_metrics(&mut out, cfg.averaging_n as f64, &result.metrics)?;
        print_summary(&result.metrics);
    } else {
        let kept = result.recovered.iter().filter(|r| r.discarded.is_none()).count();
        println!("no ground truth in {}: wrote recovered transcripts only ({kept} traces kept)", args.input.display());
    }
    let config = json!({ "modem": to_value(&modem), "attack": to_value(&cfg), "card": run.card });
    let inputs = [Some(&args.input), args.config.as_ref()].into_iter().flatten().map(|p| display(p)).collect();
    out.finish("attack", config, inputs)
}

fn write_metrics(out: &mut Output, param: f64, metrics: &SessionMetrics) -> CliResult<()> {
    out.write_json("metrics.json", metrics)?;
    out.write("metrics.csv", pipeline::metrics_csv(&[MetricsRow::from_metrics(param, metrics)]).as_bytes())
}

fn print_summary(m: &SessionMetrics) {
    println!(
        "card detection {:.4}  card demodulation {:.4}  reader demodulation {:.4}  ASR {:.4}",
        m.card_detection_rate, m.card_demodulation_rate, m.reader_demodulation_rate, m.attack_success_rate
    );
}

// ---------------------------------------------------------------------------
// countermeasure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Gaussian,
    Multitone,
}

#[derive(Debug, Args)]
pub struct CountermeasureArgs {
    #[arg(long, value_enum)]
    family: Family,
    /// Sweep points: noise factors for `gaussian`, tone spacings in MHz for
    /// `multitone`.
    #[arg(long, value_delimiter = ',')]
    params: Option<Vec<f64>>,
    /// Number of seeds averaged per point.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// First seed; the sweep uses `seed..seed + seeds`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    card: Option<CardArg>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

const HZ_PER_MHZ: f64 = 1e6;

pub fn countermeasure(args: &CountermeasureArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let base = resolve_seed(args.seed, file.seed)?;
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be ≥ 1".into()));
    }
    let card: CardKind = args.card.or(file.card).unwrap_or(CardArg::Ultralight).into();
    let modem = modem_for(&file, None)?;
    let mut cfg = attack_config_for(&file, &modem, None)?;
    if let Some(r) = args.reps.or(file.repetitions) {
        cfg.repetitions = r;
    }
    cfg.validate()?;
    let family = match (args.family, &args.params) {
        (Family::Gaussian, None) => SweepFamily::default_gaussian(),
        (Family::Gaussian, Some(p)) => SweepFamily::GaussianFactors(p.clone()),
        (Family::Multitone, None) => SweepFamily::default_tones(),
        (Family::Multitone, Some(p)) => SweepFamily::ToneSpacings(p.iter().map(|v| v * HZ_PER_MHZ).collect()),
    };
    let points = match &family {
        SweepFamily::GaussianFactors(v) | SweepFamily::ToneSpacings(v) => v.clone(),
    };
    if points.is_empty() || points.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(CliError::Usage(format!("sweep points must be finite and ≥ 0, got {points:?}")));
    }
    for p in &points {
        family.profile(*p, base).validate()?;
    }
    let transcript = base_transcript(card, None, base)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| base.wrapping_add(i)).collect();
    let mut rows = pipeline::countermeasure_sweep(&transcript, &family, &cfg, &modem, &seeds)?;
    if args.family == Family::Multitone {
        rows.iter_mut().for_each(|r| r.param /= HZ_PER_MHZ);
    }

    let mut out = Output::create(&args.out, &["sweep."])?;
    let csv = pipeline::metrics_csv(&rows);
    out.write("sweep.csv", csv.as_bytes())?;
    out.write_json("sweep.json", &rows)?;
    let config = json!({
        "family": family,
        "param_unit": match args.family { Family::Gaussian => "factor", Family::Multitone => "MHz" },
        "seeds": seeds,
        "card": card,
        "modem": to_value(&modem),
        "attack": to_value(&cfg),
    });
    let inputs = args.config.iter().map(|p| display(p)).collect();
    out.finish("countermeasure", config, inputs)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// classify
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Trace recorded inside a reader field (path with or without `.f32`).
    #[arg(long)]
    with_field: PathBuf,
    /// Trace recorded without a reader field.
    #[arg(long)]
    without_field: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn read_trace_file(base: &Path) -> CliResult<nfcjamlab::dsp::MagnitudeTrace> {
    for p in [io::samples_path(base), io::sidecar_path(base)] {
        if !p.exists() {
            return Err(CliError::Io(format!("{}: no such file", p.display())));
        }
    }
    Ok(io::read_trace(base)?)
}

pub fn classify(args: &ClassifyArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let cfg: ClassifierConfig = layered(&ClassifierConfig::default(), file.classifier.as_ref(), "classifier")?;
    let on = read_trace_file(&args.with_field)?;
    let off = read_trace_file(&args.without_field)?;
    let report = spectrum::classify_blocking_card(&on, &off, &cfg)?;

    let mut out = Output::create(&args.out, &["report.", "psd.", "pdf."])?;
    out.write_json("report.json", &report)?;
    out.write("psd.csv", report.psd.to_csv().as_bytes())?;
    out.write("pdf.csv", report.amplitude_histogram.to_csv().as_bytes())?;
    let inputs = [Some(&args.with_field), Some(&args.without_field), args.config.as_ref()]
        .into_iter()
        .flatten()
        .map(|p| display(p))
        .collect();
    out.finish("classify", json!({ "classifier": to_value(&cfg) }), inputs)?;
    println!("{:?}", report.label);
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Directory of recovered transcripts written by `attack`.
    #[arg(long)]
    input: PathBuf,
    /// Directory with the ground truth (default: the attack's input).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Write metrics files here instead of printing only.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn metrics(args: &MetricsArgs) -> CliResult<()> {
    let n = count_indexed(&args.input, RECOVERED_PREFIX, "json");
    if n == 0 {
        return Err(CliError::NoData(format!("{}: no {RECOVERED_PREFIX}NNNN.json files", args.input.display())));
    }
    let recovered = (0..n)
        .map(|i| read_json::<RecoveredTranscript>(&args.input.join(format!("{}.json", indexed(RECOVERED_PREFIX, i)))))
        .collect::<CliResult<Vec<_>>>()?;
    let attack_manifest = RunManifest::read(&args.input)?;
    let truth_dir = match &args.truth {
        Some(d) => d.clone(),
        None => attack_manifest
            .as_ref()
            .and_then(|m| m.inputs.first())
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Usage("no --truth given and no attack manifest to find it".into()))?,
    };
    let truths = load_truths(&truth_dir, n)?
        .ok_or_else(|| CliError::NoData(format!("{}: no ground truth", truth_dir.display())))?;
    let m = pipeline::score_transcripts(&recovered, &truths)?;
    let param = attack_manifest
        .as_ref()
        .and_then(|am| am.config.pointer("/attack/averaging_n"))
        .and_then(|v| v.as_f64())
        .unwrap_or(1.0);
    match &args.out {
        Some(dir) => {
            let mut out = Output::create(dir, &["metrics."])?;
            write_metrics(&mut out, param, &m)?;
            let inputs = vec![display(&args.input), display(&truth_dir)];
            out.finish("metrics", json!({ "param": param }), inputs)?;
            print_summary(&m);
        }
        None => print!("{}", pipeline::metrics_csv(&[MetricsRow::from_metrics(param, &m)])),
    }
    Ok(())
}
