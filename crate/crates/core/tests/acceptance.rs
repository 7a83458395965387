//! Acceptance criteria 1-11. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rayon::prelude::*;
use sipm_core::analog::{render, PulseTemplate};
use sipm_core::config::SimConfig;
use sipm_core::device::{AvalancheEvent, Cause, SipmDevice};
use sipm_core::discriminate::{count_peaks, measure_amplitudes};
use sipm_core::experiments::multiphoton::{multiplicity_counts, simulate_amplitudes, PRE_TRIGGER};
use sipm_core::experiments::{
    cw, multiphoton, pulsed, rerun_manifest, run_experiment, saturation, write_run, ExperimentKind,
    ExperimentSpec,
};
use sipm_core::source::{PhotonArrivals, SourceConfig};
use sipm_core::stats::{
    crosstalk_redistribute, dead_time_rate, detection_probability, photon_rate_to_power,
    CoherentPulseModel, CrosstalkModel, DeadTimeKind, DeadTimeModel, DetectionDistribution,
};

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
    info: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
            info: Vec::new(),
        }
    }

    fn info(mut self, line: impl Into<String>) -> Self {
        self.info.push(line.into());
        self
    }
}

fn template(cfg: &SimConfig) -> PulseTemplate {
    PulseTemplate::calibrated(&cfg.template, cfg.chain.sample_period, cfg.chain.hp_cutoff).unwrap()
}

fn cell(time: f64, pixel: u32) -> AvalancheEvent {
    AvalancheEvent {
        time,
        pixel,
        cause: Cause::Photon,
    }
}

fn c1_eq1_oracle() -> Outcome {
    let mut cfg = SimConfig::default();
    cfg.device.dark_rate_total = 0.0;
    cfg.device.p_ct = 0.097;
    let trials = 1_000_000u64;
    let counts = multiplicity_counts(&cfg, 0.2, trials, 0xC1).unwrap();
    let model = crosstalk_redistribute(
        &DetectionDistribution::poisson(0.2, 40).unwrap(),
        &CrosstalkModel::new(0.097).unwrap(),
    );
    let mut worst: f64 = 0.0;
    let mut bins = Vec::new();
    for n in 0..=6 {
        let p = model.p(n);
        let expected = p * trials as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        let observed = counts.get(n).copied().unwrap_or(0) as f64;
        let z = if sigma > 0.0 {
            (observed - expected) / sigma
        } else if observed == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z.abs());
        bins.push(format!(
            "n={n}: {observed} vs {expected:.1} ({z:+.2} sigma)"
        ));
    }
    let mut o = Outcome::new(
        worst <= 4.0,
        format!("max |z| = {worst:.2} over n <= 6 (limit 4)"),
    );
    for b in bins {
        o = o.info(b);
    }
    o
}

fn c2_pct_round_trip() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for p_ct in [0.05, 0.097, 0.15] {
        let mut cfg = SimConfig::default();
        cfg.device.p_ct = p_ct;
        let spec = ExperimentSpec {
            trials: 1_000_000,
            ..ExperimentSpec::new(ExperimentKind::Multiphoton, cfg)
        };
        let res = multiphoton::run(&spec).unwrap();
        for pt in &res.points {
            match &pt.p_ct {
                Ok(est) => {
                    let ok = (est.p_ct - p_ct).abs() <= 0.01;
                    pass &= ok;
                    lines.push(format!(
                        "p_ct {p_ct}, a0 {}: estimate {:.4}{}",
                        pt.a0,
                        est.p_ct,
                        if ok { "" } else { " (out of tolerance)" }
                    ));
                }
                Err(e) => {
                    pass = false;
                    lines.push(format!("p_ct {p_ct}, a0 {}: estimation failed: {e}", pt.a0));
                }
            }
        }
    }
    let mut o = Outcome::new(
        pass,
        "estimate_pct within +-0.01 of configured p_ct for a0 in {0.2, 1, 2}, 1e6 triggers each",
    );
    for l in lines {
        o = o.info(l);
    }
    o
}

fn c3_series_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        for j in 0..10 {
            let mu = 10.0 * (i + 1) as f64 / 10.0;
            let eta = 0.01 + 0.98 * j as f64 / 9.0;
            let closed = detection_probability(&CoherentPulseModel::new(mu).unwrap(), eta);
            // sum over n of Poisson(n; mu) * (1 - (1 - eta)^n)
            let mut term = (-mu).exp();
            let mut sum = 0.0;
            for n in 1..200 {
                term *= mu / n as f64;
                sum += term * (1.0 - (1.0 - eta).powi(n));
            }
            worst = worst.max((closed - sum).abs());
        }
    }
    Outcome::new(
        worst <= 1e-12,
        format!("max |closed - series| = {worst:.2e} on 100 (mu, eta) points (limit 1e-12)"),
    )
}

fn pair_success(noise_rms: f64, seeds: u64) -> f64 {
    let mut cfg = SimConfig::default();
    cfg.chain.noise_rms = noise_rms;
    let tpl = template(&cfg);
    let events = [cell(3e-9, 0), cell(5.3e-9, 1)];
    let ok = (0..seeds)
        .into_par_iter()
        .filter(|&s| {
            let w = render(&events, &tpl, &cfg.chain, (0.0, 10e-9), s).unwrap();
            count_peaks(&w, &cfg.discriminator).count == 2
        })
        .count();
    ok as f64 / seeds as f64
}

fn c4_pair_resolution() -> Outcome {
    let at15 = pair_success(15.0, 10_000);
    let at5 = pair_success(5.0, 10_000);
    let mut cfg = SimConfig::default();
    cfg.chain.noise_rms = 0.0;
    let tpl = template(&cfg);
    let period = 1.0 / 430e6;
    let train: Vec<AvalancheEvent> = (0..430)
        .map(|k| cell(k as f64 * period, (k % 132) as u32))
        .collect();
    let w = render(&train, &tpl, &cfg.chain, (0.0, 1e-6), 0).unwrap();
    let train_count = count_peaks(&w, &cfg.discriminator).count;
    let pass = at15 >= 0.99 && train_count == 430;
    Outcome::new(
        pass,
        format!(
            "2.3 ns pair counted as 2 in {:.2}% of 1e4 seeds at 15 mV (limit 99%); 430 MHz single-cell train over 1 us: {train_count} peaks (want 430)",
            100.0 * at15
        ),
    )
    .info(format!("pair at 5 mV noise (default chain): {:.2}%", 100.0 * at5))
}

fn c5_saturation() -> Outcome {
    let spec = ExperimentSpec {
        sweep: vec![40e6],
        ..ExperimentSpec::new(ExperimentKind::Saturation, SimConfig::default())
    };
    let res = saturation::run(&spec).unwrap();
    let p = &res.points[0];
    let sipm_err = (p.sipm_rate - 40e6).abs() / 40e6;
    let pass = p.apd_rate <= 20e6 && sipm_err <= 0.02;
    Outcome::new(
        pass,
        format!(
            "at 40 MHz: APD {:.2} MHz (limit 20), SiPM {:.3} MHz ({:.2}% off, limit 2%)",
            p.apd_rate / 1e6,
            p.sipm_rate / 1e6,
            100.0 * sipm_err
        ),
    )
}

fn c6_low_rate_fit() -> Outcome {
    let spec = ExperimentSpec::new(ExperimentKind::Pulsed430, SimConfig::default());
    let res = pulsed::run(&spec).unwrap();
    match res.fitted_eta {
        Ok(eta) => Outcome::new(
            (eta - 0.083).abs() <= 0.005,
            format!("constant eta fitted below 3 MHz = {eta:.4} (want 0.083 +- 0.005)"),
        ),
        Err(e) => Outcome::new(false, format!("fit failed: {e}")),
    }
}

fn dark_run(cfg: &SimConfig, seed: u64) -> Vec<AvalancheEvent> {
    let source = SourceConfig {
        duration: 1.0,
        ..SourceConfig::default()
    };
    SipmDevice::new(&cfg.device)
        .unwrap()
        .simulate(&PhotonArrivals::empty(source), seed)
}

fn c7_dark_counts() -> Outcome {
    let mut cfg = SimConfig::default();
    cfg.device.temperature_c = Some(-7.0);
    let events = dark_run(&cfg, 0xD7);
    let dark = events.iter().filter(|e| e.cause == Cause::Dark).count() as f64;
    let ok_total = (dark - 50_000.0).abs() <= 4.0 * 224.0;

    let mut cfg = SimConfig::default();
    cfg.device.dark_rate_total = 30e3;
    let events = dark_run(&cfg, 0xD30);
    let n_pixels = cfg.device.n_pixels as f64;
    let per_pixel = events.iter().filter(|e| e.cause == Cause::Dark).count() as f64 / n_pixels;
    let ok_pixel = (per_pixel - 227.0).abs() <= 0.02 * 227.0;
    Outcome::new(
        ok_total && ok_pixel,
        format!(
            "-7 C, 1 s: {dark} dark events (want 50000 +- 896); 30 kHz setting: {per_pixel:.1} Hz per pixel (want 227 +- 2%)"
        ),
    )
    .info(format!(
        "configured per-pixel rate at 30 kHz: {:.2} Hz; cross-talk avalanches in the -7 C run ride on the same pulses",
        cfg.device.dark_rate_per_pixel()
    ))
}

fn c8_power() -> Outcome {
    let p1 = photon_rate_to_power(5e9, 532e-9);
    let p2 = photon_rate_to_power(1.2e6, 532e-9);
    let e1 = (p1 - 1.9e-9).abs() / 1.9e-9;
    let e2 = (p2 - 0.45e-12).abs() / 0.45e-12;
    Outcome::new(
        e1 <= 0.03 && e2 <= 0.03,
        format!(
            "5 GHz -> {:.4} nW ({:.2}% off); 1.2 MHz -> {:.4} pW ({:.2}% off); limit 3%",
            p1 * 1e9,
            100.0 * e1,
            p2 * 1e12,
            100.0 * e2
        ),
    )
}

fn c9_cw() -> Outcome {
    let cfg = SimConfig::default();
    let eta = cfg.device.eta;
    let model = DeadTimeModel::new(cfg.stats.tau_res, DeadTimeKind::NonParalyzable).unwrap();
    let at_1e11 = dead_time_rate(1e11 * eta, &model);
    let ceiling_ok = (at_1e11 - 470e6).abs() <= 20e6;
    let spec = ExperimentSpec::new(ExperimentKind::Cw, cfg);
    let res = cw::run(&spec).unwrap();
    let (slope, slope_ok) = match res.slope_fit {
        Some((_, b)) => (b, ((b - eta) / eta).abs() <= 0.02),
        None => (f64::NAN, false),
    };
    let mc_top = res.points.last().map_or(f64::NAN, |p| p.count_rate);
    Outcome::new(
        ceiling_ok && slope_ok,
        format!(
            "model at 1e11 Hz incident (eta {eta}) = {:.1} MHz (want 470 +- 20); MC low-rate slope {slope:.5} ({:+.2}% vs eta, limit 2%)",
            at_1e11 / 1e6,
            100.0 * (slope - eta) / eta
        ),
    )
    .info(format!("model limit 1/tau_res = {:.1} MHz", 1e-6 / cfg_tau()))
    .info(format!("full-chain MC count rate at 1e11 Hz incident = {:.1} MHz", mc_top / 1e6))
}

fn cfg_tau() -> f64 {
    SimConfig::default().stats.tau_res
}

fn misclassification(noise_rms: f64, triggers: u64) -> f64 {
    let mut cfg = SimConfig::default();
    cfg.chain.noise_rms = noise_rms;
    let tpl = template(&cfg);
    let gain = 110.0;
    let gate = cfg.discriminator.gate;
    let window = (0.0, PRE_TRIGGER + gate + cfg.chain.sample_period);
    let wrong = (0..triggers)
        .into_par_iter()
        .filter(|&i| {
            let n = (i % 11) as u32;
            let events: Vec<AvalancheEvent> = (0..n).map(|p| cell(PRE_TRIGGER, p)).collect();
            let w = render(&events, &tpl, &cfg.chain, window, i).unwrap();
            let a = measure_amplitudes(&w, &[PRE_TRIGGER], gate).unwrap().values[0];
            (a / gain).round().max(0.0) as u32 != n
        })
        .count();
    wrong as f64 / triggers as f64
}

fn c10_photon_number_resolution() -> Outcome {
    let mut cfg = SimConfig::default();
    cfg.chain.noise_rms = 0.0;
    let tpl = template(&cfg);
    let single = render(&[cell(PRE_TRIGGER, 0)], &tpl, &cfg.chain, (0.0, 10e-9), 0)
        .unwrap()
        .max();
    let amps = simulate_amplitudes(&cfg, 5.0, 20_000, 0xA10).unwrap();
    let mut worst: f64 = 0.0;
    let mut missing = Vec::new();
    for n in 1..=10u32 {
        let mut group: Vec<f64> = amps
            .iter()
            .copied()
            .filter(|a| (a / single).round() as u32 == n)
            .collect();
        if group.is_empty() {
            missing.push(n);
            continue;
        }
        group.sort_by(f64::total_cmp);
        let median = group[group.len() / 2];
        let target = n as f64 * single;
        worst = worst.max((median - target).abs() / target);
    }
    let gain_ok = (single - 110.0).abs() <= 0.01 * 110.0;
    let noiseless_ok = missing.is_empty() && worst <= 1e-9 && gain_ok;
    let at15 = misclassification(15.0, 100_000);
    let at5 = misclassification(5.0, 100_000);
    Outcome::new(
        noiseless_ok && at15 <= 1e-4,
        format!(
            "noiseless: G = {single:.4} mV, peaks n = 1..10 at n*G within {worst:.1e} relative{}; 15 mV noise: misclassification {at15:.2e} over 1e5 triggers (limit 1e-4)",
            if missing.is_empty() { String::new() } else { format!(", missing n = {missing:?}") }
        ),
    )
    .info(format!("misclassification at 5 mV noise (default chain): {at5:.2e}"))
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn c11_determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in ExperimentKind::ALL {
        let mut spec = ExperimentSpec::new(kind, SimConfig::default());
        match kind {
            ExperimentKind::Multiphoton => spec.trials = 5_000,
            ExperimentKind::Saturation => {
                spec.sweep = vec![1e6, 40e6];
                spec.max_duration = 50e-6;
            }
            ExperimentKind::Pulsed430 => {
                spec.sweep = vec![0.0, 0.01, 0.05, 1.0, 50.0];
                spec.max_duration = 20e-6;
            }
            ExperimentKind::Cw => {
                spec.sweep = vec![0.0, 1e7, 1e9];
                spec.max_duration = 20e-6;
            }
            ExperimentKind::PowerMeter => {}
        }
        let first = root.path().join(format!("{kind}_a"));
        let second = root.path().join(format!("{kind}_b"));
        let out = run_experiment(&spec).unwrap();
        write_run(&first, &spec, Vec::new(), &out, false).unwrap();
        let manifest = first.join(format!("{kind}_manifest.toml"));
        rerun_manifest(&manifest, &second, false).unwrap();
        let a = csv_files(&first);
        let b = csv_files(&second);
        let same = !a.is_empty() && a == b;
        pass &= same;
        lines.push(format!(
            "{kind}: {} CSV files {}",
            a.len(),
            if same { "identical" } else { "DIFFER" }
        ));
    }
    let mut o = Outcome::new(
        pass,
        "re-run from each RunManifest reproduces byte-identical CSV outputs",
    );
    for l in lines {
        o = o.info(l);
    }
    o
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        (
            1,
            "cross-talk redistribution vs device Monte Carlo",
            c1_eq1_oracle,
        ),
        (2, "p_ct round trip", c2_pct_round_trip),
        (3, "detection probability series", c3_series_oracle),
        (4, "pair resolution", c4_pair_resolution),
        (5, "saturation comparison", c5_saturation),
        (6, "low-rate efficiency fit", c6_low_rate_fit),
        (7, "dark-count reproduction", c7_dark_counts),
        (8, "power conversion", c8_power),
        (9, "CW ceiling and slope", c9_cw),
        (10, "photon-number resolution", c10_photon_number_resolution),
        (11, "determinism", c11_determinism),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {verdict}: {name}: {} [{:.1} s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        for l in &o.info {
            println!("    info: {l}");
        }
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {failed} criteria failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
