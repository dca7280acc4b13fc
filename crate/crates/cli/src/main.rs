mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use qkd_core::config::{Axis, SessionConfig};
use qkd_core::io::{self, LogWriter};
use qkd_core::model::{Announcement, SlotClass};
use qkd_core::postprocess::{postprocess, PostprocessOptions};
use qkd_core::profile::{read_profile_csv, ProfileSet};
use qkd_core::session::{SessionSimulator, SessionSummary};
use qkd_core::sidechannel::{analyze, sample_histogram, AnalysisOptions, ProtocolProbabilities};
use qkd_core::timeline::SessionTimeline;

use manifest::{digests, run_id, RunManifest};

const EXIT_INVALID: u8 = 2;
const EXIT_SYNC_REJECTED: u8 = 3;
const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "qkdsim",
    version,
    about = "Decoy-state BB84 session simulator and side-channel analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a full session and write the event logs.
    Simulate(SimulateArgs),
    /// Sync, sift and estimate QBER and decoy statistics from logs.
    Postprocess(PostprocessArgs),
    /// Mutual information between side-channel histograms and the key.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset name or TOML file.
    #[arg(long, default_value = "paper_defaults")]
    config: String,
    /// Session length in seconds.
    #[arg(long)]
    duration: f64,
    /// Defaults to the config's rng_seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Write preparation and announcement logs in the packed binary format.
    #[arg(long)]
    packed: bool,
    /// Overrides the side channel Eve samples.
    #[arg(long)]
    axis: Option<Axis>,
    /// Bin width of count_rate.csv in seconds.
    #[arg(long, default_value_t = 0.1)]
    rate_bin: f64,
}

#[derive(Args)]
struct PostprocessArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to `<input>/config.toml`.
    #[arg(long)]
    config: Option<String>,
    /// Defaults to the duration recorded in `<input>/manifest.json`.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    preparations: Option<PathBuf>,
    #[arg(long)]
    announcements: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// One `bin_center,counts` CSV per state, in state order.
    #[arg(long, num_args = 1.., required = true)]
    histograms: Vec<PathBuf>,
    /// JSON with p_a, p_s_given_a, p_b_given_as. Defaults to equal priors,
    /// every state sifted, and state i giving bit i mod 2.
    #[arg(long)]
    probabilities: Option<PathBuf>,
    #[arg(long)]
    axis: Option<Axis>,
    #[arg(long, default_value_t = 1000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Postprocess(a) => run_postprocess(&a),
        Command::Analyze(a) => run_analyze(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}

fn command_line() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn load_profiles(config: &SessionConfig) -> Result<ProfileSet> {
    Ok(match &config.profile_dir {
        Some(dir) => ProfileSet::load_dir(dir)
            .with_context(|| format!("loading profiles from {}", dir.display()))?,
        None => ProfileSet::synthetic(1e6, 1e6),
    })
}

#[derive(Serialize)]
struct Truth<'a> {
    run_id: &'a str,
    receiver_clock_offset_ps: i64,
    receiver_clock_offset_s: f64,
    receiver_clock_drift: f64,
    summary: &'a SessionSummary,
}

fn simulate(a: &SimulateArgs) -> Result<u8> {
    if !(a.duration > 0.0) || !a.duration.is_finite() {
        bail!("duration must be positive");
    }
    if !(a.rate_bin > 0.0) {
        bail!("rate-bin must be positive");
    }
    let mut config = SessionConfig::load(&a.config)?;
    if let Some(axis) = a.axis {
        config.eve_axis = axis;
    }
    if let Some(seed) = a.seed {
        config.rng_seed = seed;
    }
    let seed = config.rng_seed;
    let config_text = config.to_toml_string();
    let id = run_id(&[
        "simulate",
        &config_text,
        &seed.to_string(),
        &a.duration.to_string(),
        &a.packed.to_string(),
    ]);
    let profiles = load_profiles(&config)?;
    let sim = SessionSimulator::new(&config, a.duration, &profiles, &[])?;

    std::fs::create_dir_all(&a.out)?;
    let mut writer = LogWriter::create(&a.out, &id, a.packed, a.duration, a.rate_bin)?;
    let summary = sim.run(seed, &mut writer)?;
    let (mut outputs, rates) = writer.finish()?;

    let config_path = a.out.join("config.toml");
    std::fs::write(&config_path, &config_text)?;
    outputs.push(config_path);
    let rates_path = a.out.join("count_rate.csv");
    io::write_rates(&rates_path, &id, &rates)?;
    outputs.push(rates_path);
    let clock = sim.clock();
    let truth_path = a.out.join("truth.json");
    write_json(
        &truth_path,
        &Truth {
            run_id: &id,
            receiver_clock_offset_ps: clock.offset_ps,
            receiver_clock_offset_s: clock.offset_ps as f64 / 1e12,
            receiver_clock_drift: clock.drift,
            summary: &summary,
        },
    )?;
    outputs.push(truth_path);

    let mut inputs = Vec::new();
    if Path::new(&a.config).is_file() {
        inputs.push(PathBuf::from(&a.config));
    }
    RunManifest {
        run_id: id.clone(),
        command: command_line(),
        config: Some(a.config.clone()),
        rng_seed: Some(seed),
        duration_s: Some(a.duration),
        tool_version: VERSION.into(),
        inputs: digests(&a.out, &inputs)?,
        outputs: digests(&a.out, &outputs)?,
    }
    .write(&a.out)?;
    println!(
        "run {id}: {} slots, {} detections ({} dark) in {}",
        summary.total_slots,
        summary.detections,
        summary.dark_detections,
        a.out.display()
    );
    Ok(0)
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

fn run_postprocess(a: &PostprocessArgs) -> Result<u8> {
    let config_spec = a
        .config
        .clone()
        .unwrap_or_else(|| a.input.join("config.toml").to_string_lossy().into_owned());
    let config = SessionConfig::load(&config_spec)
        .with_context(|| format!("loading config {config_spec}"))?;
    let duration = match a.duration {
        Some(d) => d,
        None => RunManifest::read(&a.input)?
            .duration_s
            .context("input manifest has no duration; pass --duration")?,
    };
    if !(duration > 0.0) {
        bail!("duration must be positive");
    }
    let prep_path = match &a.preparations {
        Some(p) => p.clone(),
        None => first_existing(&a.input, &[io::PREPARATIONS_CSV, io::PREPARATIONS_PACKED])
            .context("no preparation log in input directory")?,
    };
    let ann_path = match &a.announcements {
        Some(p) => p.clone(),
        None => first_existing(&a.input, &[io::ANNOUNCEMENTS_CSV, io::ANNOUNCEMENTS_PACKED])
            .context("no announcement file in input directory")?,
    };
    let det_path = a
        .detections
        .clone()
        .unwrap_or_else(|| a.input.join(io::DETECTIONS_CSV));

    let prep = io::read_preparations(&prep_path)
        .with_context(|| format!("reading {}", prep_path.display()))?;
    let ann = io::read_announcements(&ann_path)
        .with_context(|| format!("reading {}", ann_path.display()))?;
    let det = io::read_detections(&det_path)
        .with_context(|| format!("reading {}", det_path.display()))?;
    let ids: Vec<&String> = [&prep.run_id, &ann.run_id, &det.run_id]
        .into_iter()
        .flatten()
        .collect();
    if ids.windows(2).any(|w| w[0] != w[1]) {
        bail!("input logs come from different runs: {ids:?}");
    }

    let profiles = load_profiles(&config)?;
    let timeline = SessionTimeline::new(duration, &config)?;
    let opts = PostprocessOptions::from_config(&config, profiles.mean_emission_ps());
    let classes: &[SlotClass] = &prep.records;
    let announcements: &[Announcement] = &ann.records;
    let out = postprocess(classes, announcements, &det.records, &timeline, &opts)?;

    let inputs = vec![prep_path, ann_path, det_path];
    let input_digests = digests(&a.input, &inputs)?;
    let id = run_id(
        &std::iter::once("postprocess".to_string())
            .chain(input_digests.iter().map(|d| d.sha256.clone()))
            .chain([config.to_toml_string(), duration.to_string()])
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );

    std::fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    let report_path = a.out.join("report.json");
    #[derive(Serialize)]
    struct Report<'a> {
        run_id: &'a str,
        #[serde(flatten)]
        report: &'a qkd_core::postprocess::PostprocessReport,
    }
    write_json(
        &report_path,
        &Report {
            run_id: &id,
            report: &out.report,
        },
    )?;
    outputs.push(report_path);
    let key_path = a.out.join("key.txt");
    if out.report.accepted {
        io::write_key(&key_path, &out.key)?;
        outputs.push(key_path);
    } else if key_path.exists() {
        // a stale key from an earlier run must not survive a rejection
        std::fs::remove_file(&key_path)?;
    }
    RunManifest {
        run_id: id.clone(),
        command: command_line(),
        config: Some(config_spec),
        rng_seed: None,
        duration_s: Some(duration),
        tool_version: VERSION.into(),
        inputs: input_digests,
        outputs: digests(&a.out, &outputs)?,
    }
    .write(&a.out)?;

    let r = &out.report;
    if !r.accepted {
        eprintln!("sync rejected; no key written");
        for n in &r.notes {
            eprintln!("  {n}");
        }
        return Ok(EXIT_SYNC_REJECTED);
    }
    if let Some(q) = &r.qber {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.3}%", 100.0 * x));
        println!(
            "QBER R {} L {} H {} mean {} ({})",
            pct(q.r),
            pct(q.l),
            pct(q.h),
            pct(q.mean),
            q.verdict
        );
    }
    if let Some(k) = &r.key {
        println!(
            "key: {} bits, {:.0} bit/s raw, {:.0} sifted events/s",
            k.key_bits, k.raw_key_rate_bps, k.sifted_rate_bps
        );
    }
    Ok(0)
}

fn default_probabilities(states: usize) -> Result<ProtocolProbabilities> {
    let p_a = vec![1.0 / states as f64; states];
    let p_s = vec![1.0; states];
    let p_b = (0..states)
        .map(|i| {
            if i % 2 == 0 {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            }
        })
        .collect();
    Ok(ProtocolProbabilities::new(p_a, p_s, p_b)?)
}

fn run_analyze(a: &AnalyzeArgs) -> Result<u8> {
    if a.histograms.len() < 2 {
        bail!("at least two state histograms are required");
    }
    let profiles = a
        .histograms
        .iter()
        .map(|p| read_profile_csv(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let probs = match &a.probabilities {
        Some(p) => {
            ProtocolProbabilities::load(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => default_probabilities(profiles.len())?,
    };
    let (report, samples) = analyze(
        &profiles,
        &probs,
        &AnalysisOptions {
            axis: a.axis,
            mc_samples: a.mc_samples,
            seed: a.seed,
        },
    )?;

    let mut inputs = a.histograms.clone();
    inputs.extend(a.probabilities.clone());
    let cwd = std::env::current_dir()?;
    let input_digests = digests(&cwd, &inputs)?;
    let mut parts: Vec<String> = vec!["analyze".into()];
    parts.extend(input_digests.iter().map(|d| d.sha256.clone()));
    parts.push(format!("{:?} {} {}", a.axis, a.mc_samples, a.seed));
    let id = run_id(&parts.iter().map(String::as_str).collect::<Vec<_>>());

    std::fs::create_dir_all(&a.out)?;
    let mut outputs = Vec::new();
    let report_path = a.out.join("mi_report.json");
    #[derive(Serialize)]
    struct Report<'a> {
        run_id: &'a str,
        #[serde(flatten)]
        report: &'a qkd_core::sidechannel::MIReport,
    }
    write_json(
        &report_path,
        &Report {
            run_id: &id,
            report: &report,
        },
    )?;
    outputs.push(report_path);

    let samples_path = a.out.join("mi_samples.csv");
    let mut text = format!("# run_id={id}\ntrial,mi_bits\n");
    for (t, s) in samples.iter().enumerate() {
        text.push_str(&format!("{t},{s}\n"));
    }
    std::fs::write(&samples_path, text)?;
    outputs.push(samples_path);
    let hist_path = a.out.join("mi_histogram.csv");
    let mut text = format!("# run_id={id}\nmi_bits,count\n");
    for (c, n) in sample_histogram(&samples, 50) {
        text.push_str(&format!("{c},{n}\n"));
    }
    std::fs::write(&hist_path, text)?;
    outputs.push(hist_path);

    RunManifest {
        run_id: id,
        command: command_line(),
        config: a.probabilities.as_ref().map(|p| p.display().to_string()),
        rng_seed: Some(a.seed),
        duration_s: None,
        tool_version: VERSION.into(),
        inputs: input_digests,
        outputs: digests(&a.out, &outputs)?,
    }
    .write(&a.out)?;

    let frac = report
        .fractional
        .map_or("undefined".to_string(), |f| format!("{f:.6}"));
    println!(
        "I = {:.6} bits, fractional {frac}, bias {:.3e}, sigma {:.3e} (propagation){}",
        report.i,
        report.bias,
        report.sigma_propagation,
        report
            .sigma_montecarlo
            .map_or(String::new(), |s| format!(", {s:.3e} (Monte Carlo)"))
    );
    Ok(0)
}
