mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sipm_core::analog::{render, PulseTemplate, Waveform};
use sipm_core::config::{load_config, parse_config, SimConfig};
use sipm_core::device::SipmDevice;
use sipm_core::discriminate::{
    count_peaks, measure_amplitudes, pulse_height_analysis, rate_estimate, DiscriminatorConfig,
};
use sipm_core::experiments::{
    rerun_manifest, run_experiment, write_run, ExperimentKind, ExperimentSpec,
};
use sipm_core::io::{
    classification_table, events_table, histogram_table, read_rate_points, read_times,
    read_waveform, times_table, write_waveform_binary, write_waveform_csv, CsvTable,
};
use sipm_core::plot::{Plot, Series, Style};
use sipm_core::rng::{derive_seed, stage};
use sipm_core::source::{generate, SourceKind};
use sipm_core::stats::fit::{fit_constant_efficiency, fit_efficiency_model};
use sipm_core::stats::EfficiencyModel;

use output::{ensure_dir, error_report, write_table, Format};

/// Points kept when plotting a waveform.
const PLOT_POINTS: usize = 20_000;

#[derive(Debug, Parser)]
#[command(name = "sipmsim", version, about = "SiPM photon-counting simulator")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalOpts {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SIPMSIM_OUT", default_value = ".")]
    out: PathBuf,
    /// Format of tabular outputs.
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
    /// Also write SVG plots.
    #[arg(long, global = true)]
    plot: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate source, device and analog chain; write events, triggers and the waveform.
    Simulate(SimulateArgs),
    /// Count discriminator peaks in a waveform file.
    Count(CountArgs),
    /// Pulse-height analysis of a waveform at given trigger times.
    Histogram(HistogramArgs),
    /// Fit an efficiency model to (mu, count_rate) data.
    Fit(FitArgs),
    /// Run one of the built-in experiments.
    Experiment(ExperimentArgs),
    /// Re-run an experiment from its manifest.
    Rerun { manifest: PathBuf },
    /// Print the effective configuration as TOML.
    Config {
        /// List the keys that took their default value instead.
        #[arg(long)]
        defaulted: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WaveformFormat {
    Bin,
    Csv,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Length of the record, s.
    #[arg(long)]
    duration: Option<f64>,
    /// Mean photons per pulse (pulsed source).
    #[arg(long)]
    mu: Option<f64>,
    /// Photon rate, Hz (CW source).
    #[arg(long)]
    photon_rate: Option<f64>,
    #[arg(long, value_enum, default_value = "bin")]
    waveform_format: WaveformFormat,
}

#[derive(Debug, Args)]
struct CountArgs {
    waveform: PathBuf,
    /// Trigger threshold, mV.
    #[arg(long)]
    threshold: Option<f64>,
    /// Re-arm level, mV.
    #[arg(long)]
    rearm: Option<f64>,
    /// Minimum time between counted peaks, s.
    #[arg(long)]
    min_separation: Option<f64>,
}

#[derive(Debug, Args)]
struct HistogramArgs {
    waveform: PathBuf,
    /// CSV with a `time_s` column of trigger times.
    #[arg(long)]
    triggers: PathBuf,
    /// Histogram bin width, mV.
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
    /// Gain in mV per detection; calibrated from the spectrum when absent.
    #[arg(long)]
    gain: Option<f64>,
    /// Gate after each trigger, s.
    #[arg(long)]
    gate: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FitModel {
    Constant,
    EfficiencyModel,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(value_enum)]
    model: FitModel,
    /// CSV with columns `mu` and `count_rate`.
    #[arg(long)]
    input: PathBuf,
    /// Pulse repetition rate, Hz.
    #[arg(long, default_value_t = 430e6)]
    rep_rate: f64,
    /// Count-rate cutoff for the constant fit, Hz.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Starting values p1,p2,p3 for the efficiency model.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.05, 0.1, 0.05])]
    initial: Vec<f64>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// multiphoton, saturation, pulsed_430, cw or power_meter.
    name: ExperimentKind,
    /// Mean detections per bunch (multiphoton); comma separated.
    #[arg(long, value_delimiter = ',')]
    a0: Vec<f64>,
    /// Cross-talk probability.
    #[arg(long)]
    pct: Option<f64>,
    /// Triggers per sweep point (multiphoton).
    #[arg(long)]
    trials: Option<u64>,
    /// Replace the default sweep; comma separated.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<f64>,
}

struct RunContext {
    config: SimConfig,
    defaulted: Vec<String>,
    out: PathBuf,
    format: Format,
    plot: bool,
}

fn load(global: &GlobalOpts) -> Result<RunContext> {
    let loaded = match &global.config {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => parse_config("")?,
    };
    let mut config = loaded.config;
    let mut defaulted = loaded.defaulted;
    if let Some(s) = global.seed {
        config.seed = s;
        defaulted.retain(|k| k != "seed");
    }
    Ok(RunContext {
        config,
        defaulted,
        out: global.out.clone(),
        format: global.format,
        plot: global.plot,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, line) = error_report(&e);
            eprintln!("{line}");
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let ctx = load(&cli.global)?;
    match cli.command {
        Command::Simulate(a) => simulate(ctx, a),
        Command::Count(a) => count(ctx, a),
        Command::Histogram(a) => histogram(ctx, a),
        Command::Fit(a) => fit(ctx, a),
        Command::Experiment(a) => experiment(ctx, a),
        Command::Rerun { manifest } => {
            ensure_dir(&ctx.out)?;
            let written = rerun_manifest(&manifest, &ctx.out, ctx.plot)?;
            report(&written);
            Ok(())
        }
        Command::Config { defaulted } => {
            if defaulted {
                for k in &ctx.defaulted {
                    println!("{k}");
                }
            } else {
                print!("{}", ctx.config.to_toml()?);
            }
            Ok(())
        }
    }
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        info!("wrote {}", p.display());
        println!("{}", p.display());
    }
}

fn waveform_plot(w: &Waveform, title: &str) -> Plot {
    let stride = w.len().div_ceil(PLOT_POINTS).max(1);
    let points = (0..w.len())
        .step_by(stride)
        .map(|i| (w.time(i) * 1e9, w.samples[i]))
        .collect();
    Plot::new(title, "time (ns)", "voltage (mV)").with(Series::new("waveform", points, Style::Line))
}

fn simulate(mut ctx: RunContext, a: SimulateArgs) -> Result<()> {
    let src = &mut ctx.config.source;
    if let Some(d) = a.duration {
        src.duration = d;
    }
    if let Some(mu) = a.mu {
        src.mu = mu;
        src.kind = SourceKind::Pulsed;
    }
    if let Some(r) = a.photon_rate {
        src.photon_rate = r;
        src.kind = SourceKind::Cw;
    }
    let cfg = &ctx.config;
    cfg.validate()?;
    ensure_dir(&ctx.out)?;
    let seed = cfg.seed;
    let arrivals = generate(&cfg.source, derive_seed(seed, stage::SOURCE, 0))?;
    let events =
        SipmDevice::new(&cfg.device)?.simulate(&arrivals, derive_seed(seed, stage::DEVICE, 0));
    let tpl =
        PulseTemplate::calibrated(&cfg.template, cfg.chain.sample_period, cfg.chain.hp_cutoff)?;
    let window = (0.0, cfg.source.duration);
    let w = render(
        &events,
        &tpl,
        &cfg.chain,
        window,
        derive_seed(seed, stage::NOISE, 0),
    )?;

    let mut written = vec![write_table(
        &ctx.out,
        "events",
        &events_table(&events),
        ctx.format,
    )?];
    if cfg.source.kind == SourceKind::Pulsed {
        let triggers = times_table(&cfg.source.pulse_times());
        written.push(write_table(&ctx.out, "triggers", &triggers, ctx.format)?);
    }
    let wpath = match a.waveform_format {
        WaveformFormat::Bin => {
            let p = ctx.out.join("waveform.bin");
            write_waveform_binary(&w, &p)?;
            p
        }
        WaveformFormat::Csv => {
            let p = ctx.out.join("waveform.csv");
            write_waveform_csv(&w, &p)?;
            p
        }
    };
    written.push(wpath);
    if ctx.plot {
        let p = ctx.out.join("waveform.svg");
        std::fs::write(&p, waveform_plot(&w, "simulated waveform").to_svg())?;
        written.push(p);
    }
    eprintln!(
        "{} photons, {} avalanches, {} samples",
        arrivals.len(),
        events.len(),
        w.len()
    );
    report(&written);
    Ok(())
}

fn discriminator(
    ctx: &RunContext,
    threshold: Option<f64>,
    rearm: Option<f64>,
    min_sep: Option<f64>,
) -> Result<DiscriminatorConfig> {
    let mut d = ctx.config.discriminator.clone();
    if let Some(t) = threshold {
        d.threshold = t;
        if rearm.is_none() && d.rearm_level >= t {
            d.rearm_level = 0.5 * t;
        }
    }
    if let Some(r) = rearm {
        d.rearm_level = r;
    }
    if let Some(s) = min_sep {
        d.min_separation = s;
    }
    d.validate()?;
    Ok(d)
}

fn file_label(p: &Path) -> String {
    p.file_name().map_or_else(
        || p.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn count(ctx: RunContext, a: CountArgs) -> Result<()> {
    let disc = discriminator(&ctx, a.threshold, a.rearm, a.min_separation)?;
    let w =
        read_waveform(&a.waveform).with_context(|| format!("reading {}", a.waveform.display()))?;
    let peaks = count_peaks(&w, &disc);
    let rate = rate_estimate(peaks.count, w.duration())?;
    let mut t = CsvTable::new(&[
        "file",
        "samples",
        "duration_s",
        "threshold_mv",
        "counts",
        "rate_hz",
        "rate_err_hz",
    ]);
    t.push([
        file_label(&a.waveform),
        w.len().to_string(),
        w.duration().to_string(),
        disc.threshold.to_string(),
        peaks.count.to_string(),
        rate.rate.to_string(),
        rate.std_err.to_string(),
    ]);
    ensure_dir(&ctx.out)?;
    let mut written = vec![write_table(&ctx.out, "count", &t, ctx.format)?];
    written.push(write_table(
        &ctx.out,
        "peaks",
        &times_table(&peaks.times),
        ctx.format,
    )?);
    eprintln!("{} peaks, rate {} Hz", peaks.count, rate.rate);
    report(&written);
    Ok(())
}

fn histogram(ctx: RunContext, a: HistogramArgs) -> Result<()> {
    let w =
        read_waveform(&a.waveform).with_context(|| format!("reading {}", a.waveform.display()))?;
    let triggers =
        read_times(&a.triggers).with_context(|| format!("reading {}", a.triggers.display()))?;
    let gate = a.gate.unwrap_or(ctx.config.discriminator.gate);
    let amps = measure_amplitudes(&w, &triggers, gate)?;
    let gain = a.gain.or(ctx.config.discriminator.gain_mv);
    let h = pulse_height_analysis(&amps.values, a.bin_width, gain, ctx.config.chain.noise_rms)?;
    ensure_dir(&ctx.out)?;
    let mut written = vec![
        write_table(&ctx.out, "histogram", &histogram_table(&h), ctx.format)?,
        write_table(
            &ctx.out,
            "classification",
            &classification_table(&h.classified),
            ctx.format,
        )?,
    ];
    if ctx.plot {
        let points = h
            .counts
            .iter()
            .enumerate()
            .map(|(i, &c)| (0.5 * (h.bin_edges[i] + h.bin_edges[i + 1]), c as f64))
            .collect();
        let plot = Plot::new("pulse-height spectrum", "amplitude (mV)", "entries")
            .with(Series::new("amplitudes", points, Style::Line));
        let p = ctx.out.join("histogram.svg");
        std::fs::write(&p, plot.to_svg())?;
        written.push(p);
    }
    eprintln!(
        "{} triggers ({} overlapping), gain {:.3} mV",
        triggers.len(),
        amps.overlap_count(),
        h.gain
    );
    report(&written);
    Ok(())
}

fn fit(ctx: RunContext, a: FitArgs) -> Result<()> {
    let points =
        read_rate_points(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut t = CsvTable::new(&["parameter", "value"]);
    match a.model {
        FitModel::Constant => {
            let cutoff = a.cutoff.unwrap_or(ctx.config.stats.rate_cutoff);
            let f = fit_constant_efficiency(&points, a.rep_rate, cutoff)
                .map_err(sipm_core::Error::from)?;
            t.push(["eta".to_string(), f.eta.to_string()]);
            t.push([
                "points_used".to_string(),
                f.diagnostics.points_used.to_string(),
            ]);
            t.push([
                "iterations".to_string(),
                f.diagnostics.iterations.to_string(),
            ]);
            t.push([
                "residual_norm_hz".to_string(),
                f.diagnostics.residual_norm.to_string(),
            ]);
        }
        FitModel::EfficiencyModel => {
            let [p1, p2, p3] = a.initial[..] else {
                bail!("--initial needs exactly three values");
            };
            let f = fit_efficiency_model(&points, a.rep_rate, (p1, p2, p3))
                .map_err(sipm_core::Error::from)?;
            match f.model {
                EfficiencyModel::Exponential { p1, p2, p3 } => {
                    t.push(["p1".to_string(), p1.to_string()]);
                    t.push(["p2".to_string(), p2.to_string()]);
                    t.push(["p3".to_string(), p3.to_string()]);
                }
                EfficiencyModel::Constant { eta } => t.push(["eta".to_string(), eta.to_string()]),
            }
            t.push(["degenerate".to_string(), f.degenerate.to_string()]);
            t.push([
                "points_used".to_string(),
                f.diagnostics.points_used.to_string(),
            ]);
            t.push([
                "iterations".to_string(),
                f.diagnostics.iterations.to_string(),
            ]);
            t.push(["residual_norm_hz".to_string(), f.residual_norm.to_string()]);
        }
    }
    ensure_dir(&ctx.out)?;
    let written = vec![write_table(&ctx.out, "fit", &t, ctx.format)?];
    for r in &t.rows {
        eprintln!("{} = {}", r[0], r[1]);
    }
    report(&written);
    Ok(())
}

fn experiment(mut ctx: RunContext, a: ExperimentArgs) -> Result<()> {
    if let Some(p) = a.pct {
        ctx.config.device.p_ct = p;
        ctx.defaulted.retain(|k| k != "device.p_ct");
    }
    let mut spec = ExperimentSpec::new(a.name, ctx.config);
    if !a.a0.is_empty() {
        if a.name != ExperimentKind::Multiphoton {
            bail!("--a0 applies only to the multiphoton experiment");
        }
        spec.sweep = a.a0;
    }
    if !a.sweep.is_empty() {
        spec.sweep = a.sweep;
    }
    if let Some(n) = a.trials {
        spec.trials = n;
    }
    spec.validate()?;
    let out = run_experiment(&spec)?;
    ensure_dir(&ctx.out)?;
    let mut written = write_run(&ctx.out, &spec, ctx.defaulted, &out, ctx.plot)?;
    if ctx.format == Format::Json {
        for (stem, table) in out.tables() {
            written.push(write_table(&ctx.out, &stem, table, Format::Json)?);
        }
    }
    for line in &out.summary {
        eprintln!("{line}");
    }
    report(&written);
    Ok(())
}
