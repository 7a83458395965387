//! Peak counting and pulse-height analysis on waveforms.

use serde::{Deserialize, Serialize};

use crate::analog::Waveform;
use crate::stats::DetectionDistribution;
use crate::{Error, Result};

/// Two-sided 95% normal quantile used for Wilson intervals.
pub const WILSON_Z: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Trigger level, mV.
    pub threshold: f64,
    /// After a trigger the discriminator re-arms once the signal drops below this level, mV.
    pub rearm_level: f64,
    /// Minimum time between consecutive triggers, s.
    pub min_separation: f64,
    /// Amplitude gate after each trigger, s.
    pub gate: f64,
    /// Single-detection amplitude, mV. Calibrated from the histogram when unset.
    pub gain_mv: Option<f64>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            threshold: 40.0,
            rearm_level: 20.0,
            min_separation: 0.0,
            gate: 5e-9,
            gain_mv: None,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::config("discriminator.threshold", "must be > 0"));
        }
        if !(self.rearm_level <= self.threshold) || !self.rearm_level.is_finite() {
            return Err(Error::config(
                "discriminator.rearm_level",
                "must be finite and not above the threshold",
            ));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::config(
                "discriminator.min_separation",
                "must be >= 0",
            ));
        }
        if !(self.gate > 0.0) {
            return Err(Error::config("discriminator.gate", "must be > 0"));
        }
        if let Some(g) = self.gain_mv {
            if !(g > 0.0) {
                return Err(Error::config("discriminator.gain_mv", "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Streaming peak finder. Feed consecutive chunks, then call [`PeakFinder::finish`].
#[derive(Debug, Clone)]
pub struct PeakFinder {
    threshold: f64,
    rearm_level: f64,
    min_separation: f64,
    t0: f64,
    dt: f64,
    index: usize,
    in_pulse: bool,
    best: f64,
    best_index: usize,
    holdoff_until: f64,
    count: u64,
    times: Option<Vec<f64>>,
}

impl PeakFinder {
    pub fn new(cfg: &DiscriminatorConfig, t0: f64, sample_period: f64, keep_times: bool) -> Self {
        Self {
            threshold: cfg.threshold,
            rearm_level: cfg.rearm_level,
            min_separation: cfg.min_separation,
            t0,
            dt: sample_period,
            index: 0,
            in_pulse: false,
            best: f64::NEG_INFINITY,
            best_index: 0,
            holdoff_until: f64::NEG_INFINITY,
            count: 0,
            times: keep_times.then(Vec::new),
        }
    }

    fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    fn emit(&mut self) {
        self.count += 1;
        let t = self.time(self.best_index);
        if let Some(times) = &mut self.times {
            times.push(t);
        }
        self.in_pulse = false;
    }

    pub fn feed(&mut self, chunk: &[f64]) {
        for &v in chunk {
            let i = self.index;
            if self.in_pulse {
                if v > self.best {
                    self.best = v;
                    self.best_index = i;
                }
                if v < self.rearm_level {
                    self.emit();
                }
            } else if v > self.threshold {
                let t = self.time(i);
                if t >= self.holdoff_until {
                    self.in_pulse = true;
                    self.best = v;
                    self.best_index = i;
                    self.holdoff_until = t + self.min_separation;
                }
            }
            self.index += 1;
        }
    }

    /// Flush a pulse still open at the end of the trace.
    pub fn finish(mut self) -> PeakCount {
        if self.in_pulse {
            self.emit();
        }
        PeakCount {
            count: self.count,
            times: self.times.unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakCount {
    pub count: u64,
    /// Time of each peak's maximum; empty when times were not kept.
    pub times: Vec<f64>,
}

/// Count threshold crossings, reporting the time of each pulse maximum.
pub fn count_peaks(w: &Waveform, cfg: &DiscriminatorConfig) -> PeakCount {
    let mut finder = PeakFinder::new(cfg, w.t0, w.sample_period, true);
    finder.feed(&w.samples);
    finder.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Amplitudes {
    pub values: Vec<f64>,
    /// Set when the gate of a trigger reaches into the next trigger's gate start.
    pub overlaps: Vec<bool>,
}

impl Amplitudes {
    pub fn overlap_count(&self) -> usize {
        self.overlaps.iter().filter(|o| **o).count()
    }
}

/// Maximum voltage in `[t, t + gate]` for every trigger time `t`.
pub fn measure_amplitudes(w: &Waveform, triggers: &[f64], gate: f64) -> Result<Amplitudes> {
    if !(gate > 0.0) {
        return Err(Error::domain("gate must be > 0"));
    }
    if triggers.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::domain("trigger times must be sorted"));
    }
    let mut values = Vec::with_capacity(triggers.len());
    let mut overlaps = Vec::with_capacity(triggers.len());
    for (k, &t) in triggers.iter().enumerate() {
        let lo = w.index_at(t);
        // include the sample at t + gate when it lies on the grid
        let hi = w.index_at(t + gate + 0.5 * w.sample_period).min(w.len());
        if t < w.t0 - 1e-9 * w.sample_period || lo >= hi {
            return Err(Error::domain(format!(
                "trigger at {t} s has no samples inside the waveform"
            )));
        }
        values.push(
            w.samples[lo..hi]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
        );
        overlaps.push(triggers.get(k + 1).is_some_and(|&next| next <= t + gate));
    }
    Ok(Amplitudes { values, overlaps })
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    let lo = if k == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if k == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub counts: Vec<u64>,
    pub distribution: DetectionDistribution,
    /// 95% Wilson interval per multiplicity.
    pub intervals: Vec<(f64, f64)>,
    pub gain: f64,
}

impl Classification {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Assign `n = round(a / gain)`, floored at zero, to every amplitude.
pub fn classify_amplitudes(amps: &[f64], gain: f64, noise_rms: f64) -> Result<Classification> {
    if !(gain > 0.0) || !gain.is_finite() {
        return Err(Error::Classification(format!("gain {gain} must be > 0")));
    }
    if !(gain > 4.0 * noise_rms) {
        return Err(Error::Classification(format!(
            "gain {gain} mV is not above 4 x noise rms ({} mV); peaks are not separable",
            4.0 * noise_rms
        )));
    }
    if amps.is_empty() {
        return Err(Error::Classification("no amplitudes to classify".into()));
    }
    let mut counts: Vec<u64> = Vec::new();
    for &a in amps {
        if !a.is_finite() {
            return Err(Error::Classification("non-finite amplitude".into()));
        }
        let n = (a / gain).round().max(0.0) as usize;
        if n >= counts.len() {
            counts.resize(n + 1, 0);
        }
        counts[n] += 1;
    }
    let total = amps.len() as u64;
    let intervals = counts
        .iter()
        .map(|&k| wilson_interval(k, total, WILSON_Z))
        .collect();
    Ok(Classification {
        distribution: DetectionDistribution::from_counts(&counts)?,
        counts,
        intervals,
        gain,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseHeightHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub gain: f64,
    pub classified: Classification,
}

/// Fixed-width histogram covering all amplitudes; edges start at a multiple of `bin_width`.
pub fn histogram(amps: &[f64], bin_width: f64) -> Result<(Vec<f64>, Vec<u64>)> {
    if !(bin_width > 0.0) {
        return Err(Error::domain("bin width must be > 0"));
    }
    if amps.is_empty() || amps.iter().any(|a| !a.is_finite()) {
        return Err(Error::domain("histogram needs finite amplitudes"));
    }
    let lo = amps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = amps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = (lo / bin_width).floor() as i64;
    let last = (hi / bin_width).floor() as i64;
    let nbins = (last - first + 1) as usize;
    if nbins > 10_000_000 {
        return Err(Error::Size {
            what: "histogram bins",
            required: nbins,
            limit: 10_000_000,
        });
    }
    let mut counts = vec![0u64; nbins];
    for &a in amps {
        let b = ((a / bin_width).floor() as i64 - first) as usize;
        counts[b.min(nbins - 1)] += 1;
    }
    let edges = (0..=nbins)
        .map(|k| (first + k as i64) as f64 * bin_width)
        .collect();
    Ok((edges, counts))
}

/// Gain from the peak structure of the amplitude histogram.
///
/// Peaks are local maxima of a lightly smoothed histogram that dominate a
/// `separation` mV neighborhood and hold at least 0.1% of the entries; each
/// peak position is refined by the centroid of the raw amplitudes within
/// `separation / 2` of it. The gain is the spacing of the first two peaks
/// above the pedestal, which cancels the upward bias the gate maximum adds
/// to every peak. With only two peaks, their spacing is used.
pub fn calibrate_gain(amps: &[f64], bin_width: f64, separation: f64) -> Result<f64> {
    let (edges, counts) = histogram(amps, bin_width)?;
    let smooth: Vec<f64> = (0..counts.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(counts.len() - 1);
            counts[lo..=hi].iter().sum::<u64>() as f64 / (hi - lo + 1) as f64
        })
        .collect();
    let reach = ((separation / bin_width).round() as usize).max(1);
    let min_count = (amps.len() as f64 * 1e-3).max(3.0);
    let mut peaks = Vec::new();
    for i in 0..smooth.len() {
        let lo = i.saturating_sub(reach);
        let hi = (i + reach).min(smooth.len() - 1);
        let v = smooth[i];
        // ties resolve to the leftmost bin
        let dominant = (lo..=hi).all(|j| smooth[j] < v || (smooth[j] == v && j >= i));
        if v >= min_count && dominant {
            peaks.push(0.5 * (edges[i] + edges[i + 1]));
            if peaks.len() == 3 {
                break;
            }
        }
    }
    if peaks.len() < 2 {
        return Err(Error::Classification(
            "amplitude histogram has fewer than two resolvable peaks; set the gain explicitly"
                .into(),
        ));
    }
    let centroid = |c: f64| {
        let (s, n) = amps
            .iter()
            .filter(|a| (**a - c).abs() <= 0.5 * separation)
            .fold((0.0, 0usize), |(s, n), a| (s + a, n + 1));
        if n > 0 {
            s / n as f64
        } else {
            c
        }
    };
    let k = peaks.len() - 2;
    let gain = centroid(peaks[k + 1]) - centroid(peaks[k]);
    if !(gain > 0.0) {
        return Err(Error::Classification(
            "calibrated gain is not positive".into(),
        ));
    }
    Ok(gain)
}

/// Histogram, gain (configured or calibrated) and classification in one step.
pub fn pulse_height_analysis(
    amps: &[f64],
    bin_width: f64,
    gain: Option<f64>,
    noise_rms: f64,
) -> Result<PulseHeightHistogram> {
    let (bin_edges, counts) = histogram(amps, bin_width)?;
    let gain = match gain {
        Some(g) => g,
        None => calibrate_gain(amps, bin_width, (8.0 * noise_rms).max(20.0))?,
    };
    let classified = classify_amplitudes(amps, gain, noise_rms)?;
    Ok(PulseHeightHistogram {
        bin_edges,
        counts,
        gain,
        classified,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub rate: f64,
    /// Poisson standard error.
    pub std_err: f64,
}

pub fn rate_estimate(counts: u64, window: f64) -> Result<RateEstimate> {
    if !(window > 0.0) || !window.is_finite() {
        return Err(Error::domain(format!("window {window} must be > 0")));
    }
    let c = counts as f64;
    Ok(RateEstimate {
        rate: c / window,
        std_err: c.sqrt() / window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analog::{render, ChainConfig, PulseTemplate, TemplateConfig};
    use crate::device::{AvalancheEvent, Cause};

    fn tpl(c: &ChainConfig) -> PulseTemplate {
        PulseTemplate::calibrated(&TemplateConfig::default(), c.sample_period, c.hp_cutoff).unwrap()
    }

    fn events(times: &[f64]) -> Vec<AvalancheEvent> {
        times
            .iter()
            .map(|&time| AvalancheEvent {
                time,
                pixel: 0,
                cause: Cause::Photon,
            })
            .collect()
    }

    fn quiet_chain() -> ChainConfig {
        ChainConfig {
            noise_rms: 0.0,
            ..ChainConfig::default()
        }
    }

    #[test]
    fn zero_waveform_no_peaks() {
        let w = Waveform::zeros(1000, 50e-12, 0.0).unwrap();
        assert_eq!(count_peaks(&w, &DiscriminatorConfig::default()).count, 0);
    }

    #[test]
    fn resolves_pair_at_2_3_ns() {
        let c = quiet_chain();
        let w = render(&events(&[1e-9, 3.3e-9]), &tpl(&c), &c, (0.0, 8e-9), 0).unwrap();
        let p = count_peaks(&w, &DiscriminatorConfig::default());
        assert_eq!(p.count, 2);
        let dt = p.times[1] - p.times[0];
        assert!((dt - 2.3e-9).abs() <= c.sample_period + 1e-15, "{dt}");
    }

    #[test]
    fn saturated_430_mhz_train() {
        let c = quiet_chain();
        let times: Vec<f64> = (0..430).map(|i| i as f64 / 430e6).collect();
        // several cells per pulse
        let ev: Vec<_> = times.iter().flat_map(|&t| events(&[t, t, t])).collect();
        let w = render(&ev, &tpl(&c), &c, (0.0, 1e-6), 0).unwrap();
        assert_eq!(count_peaks(&w, &DiscriminatorConfig::default()).count, 430);
    }

    #[test]
    fn threshold_plateau() {
        let c = quiet_chain();
        let times: Vec<f64> = (0..50).map(|i| 1e-9 + i as f64 * 7.3e-9).collect();
        let w = render(&events(&times), &tpl(&c), &c, (0.0, 400e-9), 0).unwrap();
        for th in [25.0, 40.0, 60.0, 95.0] {
            let cfg = DiscriminatorConfig {
                threshold: th,
                rearm_level: th.min(20.0),
                ..Default::default()
            };
            assert_eq!(count_peaks(&w, &cfg).count, 50, "threshold {th}");
        }
    }

    #[test]
    fn min_separation_holds_off() {
        let c = quiet_chain();
        let w = render(&events(&[1e-9, 4e-9, 30e-9]), &tpl(&c), &c, (0.0, 40e-9), 0).unwrap();
        let cfg = DiscriminatorConfig {
            min_separation: 10e-9,
            ..Default::default()
        };
        assert_eq!(count_peaks(&w, &cfg).count, 2);
    }

    #[test]
    fn streaming_matches_batch() {
        let c = ChainConfig {
            noise_rms: 12.0,
            ..ChainConfig::default()
        };
        let times: Vec<f64> = (0..200).map(|i| i as f64 * 1.7e-9).collect();
        let w = render(&events(&times), &tpl(&c), &c, (0.0, 400e-9), 3).unwrap();
        let cfg = DiscriminatorConfig::default();
        let batch = count_peaks(&w, &cfg);
        let mut f = PeakFinder::new(&cfg, w.t0, w.sample_period, true);
        for chunk in w.samples.chunks(33) {
            f.feed(chunk);
        }
        assert_eq!(f.finish(), batch);
    }

    #[test]
    fn amplitudes_scale_with_multiplicity() {
        let c = quiet_chain();
        let t = tpl(&c);
        // far enough apart for the slow undershoot of the previous pulse to vanish
        let triggers: Vec<f64> = (0..=10).map(|n| 1e-9 + n as f64 * 400e-9).collect();
        let ev: Vec<_> = triggers
            .iter()
            .enumerate()
            .flat_map(|(n, &t)| std::iter::repeat_n(t, n))
            .map(|time| AvalancheEvent {
                time,
                pixel: 0,
                cause: Cause::Photon,
            })
            .collect();
        let w = render(&ev, &t, &c, (0.0, 4.1e-6), 0).unwrap();
        let a = measure_amplitudes(&w, &triggers, 5e-9).unwrap();
        assert_eq!(a.values[0], 0.0);
        for (n, v) in a.values.iter().enumerate() {
            assert!(
                (v - n as f64 * 110.0).abs() < 1e-6 * 110.0 * n.max(1) as f64,
                "n={n}: {v}"
            );
        }
        assert_eq!(a.overlap_count(), 0);
        let cls = classify_amplitudes(&a.values, 110.0, 0.0).unwrap();
        assert_eq!(cls.counts, vec![1; 11]);
    }

    #[test]
    fn amplitude_overlap_flag() {
        let w = Waveform::zeros(400, 50e-12, 0.0).unwrap();
        let a = measure_amplitudes(&w, &[1e-9, 3e-9, 12e-9], 5e-9).unwrap();
        assert_eq!(a.overlaps, vec![true, false, false]);
        assert_eq!(a.values, vec![0.0; 3]);
        assert!(measure_amplitudes(&w, &[100e-9], 5e-9).is_err());
    }

    #[test]
    fn classify_examples() {
        let c = classify_amplitudes(&[0.0; 5], 110.0, 15.0).unwrap();
        assert_eq!(c.distribution.probs(), &[1.0]);
        let c = classify_amplitudes(&[0.0, 110.0, 110.0, 220.0], 110.0, 15.0).unwrap();
        assert_eq!(c.distribution.probs(), &[0.25, 0.5, 0.25]);
        assert_eq!(c.counts, vec![1, 2, 1]);
        let c = classify_amplitudes(&[-30.0], 110.0, 0.0).unwrap();
        assert_eq!(c.counts, vec![1]);
        assert!(matches!(
            classify_amplitudes(&[0.0], 50.0, 15.0),
            Err(Error::Classification(_))
        ));
    }

    #[test]
    fn wilson_known_values() {
        // 5 of 10 at z = 1.96: 0.2366 .. 0.7634
        let (lo, hi) = wilson_interval(5, 10, WILSON_Z);
        assert!(
            (lo - 0.236_593).abs() < 1e-5 && (hi - 0.763_407).abs() < 1e-5,
            "{lo} {hi}"
        );
        let (lo, hi) = wilson_interval(0, 100, WILSON_Z);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.036_995).abs() < 1e-5, "{hi}");
    }

    #[test]
    fn gain_calibration() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 5.0).unwrap();
        let amps: Vec<f64> = (0..20_000)
            .map(|i| {
                let n = match i % 10 {
                    0..=6 => 0.0,
                    7 | 8 => 1.0,
                    _ => 2.0,
                };
                n * 110.0 + noise.sample(&mut rng)
            })
            .collect();
        let g = calibrate_gain(&amps, 2.0, 40.0).unwrap();
        assert!((g - 110.0).abs() < 1.0, "{g}");
        // a biased pedestal does not move the gain
        let biased: Vec<f64> = amps
            .iter()
            .map(|a| if *a < 55.0 { a + 12.0 } else { *a })
            .collect();
        let g = calibrate_gain(&biased, 2.0, 40.0).unwrap();
        assert!((g - 110.0).abs() < 1.0, "{g}");
        // pedestal and one peak only
        let two: Vec<f64> = amps.iter().copied().filter(|a| *a < 160.0).collect();
        let g = calibrate_gain(&two, 2.0, 40.0).unwrap();
        assert!((g - 110.0).abs() < 1.0, "{g}");
        assert!(calibrate_gain(&[0.0; 100], 2.0, 40.0).is_err());
        let ph = pulse_height_analysis(&amps, 2.0, None, 5.0).unwrap();
        assert_eq!(ph.counts.iter().sum::<u64>(), 20_000);
        assert!((ph.classified.distribution.p(1) - 0.2).abs() < 1e-3);
    }

    #[test]
    fn rate_examples() {
        assert_eq!(
            rate_estimate(0, 1.0).unwrap(),
            RateEstimate {
                rate: 0.0,
                std_err: 0.0
            }
        );
        let r = rate_estimate(50_000, 1.0).unwrap();
        assert_eq!(r.rate, 50e3);
        assert!((r.std_err - 223.6).abs() < 0.1);
        assert!((rate_estimate(430, 1e-6).unwrap().rate - 430e6).abs() < 1e-3);
        assert!(rate_estimate(1, 0.0).is_err());
    }
}
