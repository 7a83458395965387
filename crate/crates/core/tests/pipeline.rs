use sipm_core::analog::{render, PulseTemplate};
use sipm_core::config::{load_config, save_config, SimConfig};
use sipm_core::device::SipmDevice;
use sipm_core::discriminate::count_peaks;
use sipm_core::experiments::{
    run_experiment, write_run, ExperimentKind, ExperimentSpec, RunManifest,
};
use sipm_core::io::{
    events_table, read_events_csv, read_waveform, write_waveform_binary, write_waveform_csv,
};
use sipm_core::rng::{derive_seed, stage};
use sipm_core::source::generate;

fn simulate(
    cfg: &SimConfig,
) -> (
    Vec<sipm_core::device::AvalancheEvent>,
    sipm_core::analog::Waveform,
) {
    let arrivals = generate(&cfg.source, derive_seed(cfg.seed, stage::SOURCE, 0)).unwrap();
    let events = SipmDevice::new(&cfg.device)
        .unwrap()
        .simulate(&arrivals, derive_seed(cfg.seed, stage::DEVICE, 0));
    let c = &cfg.chain;
    let tpl = PulseTemplate::calibrated(&cfg.template, c.sample_period, c.hp_cutoff).unwrap();
    let w = render(
        &events,
        &tpl,
        c,
        (0.0, cfg.source.duration),
        derive_seed(cfg.seed, stage::NOISE, 0),
    )
    .unwrap();
    (events, w)
}

#[test]
fn config_file_to_counts_through_both_waveform_formats() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        "seed = 9\n[source]\nmu = 20.0\nrep_rate = 100e6\nduration = 2e-6\n",
    )
    .unwrap();
    let loaded = load_config(&path).unwrap();
    assert!(!loaded
        .defaulted
        .iter()
        .any(|k| k == "seed" || k == "source.mu"));
    let (events, w) = simulate(&loaded.config);
    assert!(!events.is_empty());

    let direct = count_peaks(&w, &loaded.config.discriminator).count;
    let mut fired: Vec<i64> = events
        .iter()
        .map(|e| (e.time * 100e6).floor() as i64)
        .collect();
    fired.dedup();
    assert_eq!(
        direct,
        fired.len() as u64,
        "one peak per pulse with at least one avalanche"
    );
    let bin = dir.path().join("w.bin");
    let csv = dir.path().join("w.csv");
    write_waveform_binary(&w, &bin).unwrap();
    write_waveform_csv(&w, &csv).unwrap();
    for p in [&bin, &csv] {
        let back = read_waveform(p).unwrap();
        assert_eq!(back.len(), w.len());
        assert_eq!(
            count_peaks(&back, &loaded.config.discriminator).count,
            direct
        );
    }

    let ev = dir.path().join("events.csv");
    events_table(&events).write(&ev).unwrap();
    let back = read_events_csv(&ev).unwrap();
    assert_eq!(back, events);
}

#[test]
fn saved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SimConfig {
        seed: 77,
        ..SimConfig::default()
    };
    cfg.source.mu = 5.0;
    let path = dir.path().join("c.toml");
    save_config(&cfg, &path).unwrap();
    let again = load_config(&path).unwrap().config;
    assert_eq!(simulate(&cfg).1.samples, simulate(&again).1.samples);
}

#[test]
fn write_run_lists_its_outputs_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::new(ExperimentKind::PowerMeter, SimConfig::default());
    let out = run_experiment(&spec).unwrap();
    let written = write_run(dir.path(), &spec, vec!["seed".into()], &out, true).unwrap();
    let m = RunManifest::load(&dir.path().join("power_meter_manifest.toml")).unwrap();
    assert_eq!(m.spec, spec);
    assert_eq!(m.defaulted, vec!["seed".to_string()]);
    for name in &m.outputs {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(m.outputs.iter().any(|n| n.ends_with(".svg")));
    assert_eq!(written.len(), m.outputs.len() + 1);
}
