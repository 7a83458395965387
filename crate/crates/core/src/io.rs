//! File formats.
//!
//! Waveform binary layout, all little-endian:
//!
//! | offset | type | field |
//! |---|---|---|
//! | 0 | `[u8; 8]` | magic `SIPMWF01` |
//! | 8 | `f64` | sample period, s |
//! | 16 | `f64` | time of sample 0, s |
//! | 24 | `u64` | sample count `n` |
//! | 32 | `f32 x n` | samples, mV |
//!
//! CSV files have a single header row and use `,` separators. Floats are
//! written in Rust's shortest round-trip notation, so files are reproducible
//! byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::analog::Waveform;
use crate::device::{AvalancheEvent, Cause};
use crate::discriminate::{Classification, PulseHeightHistogram};
use crate::stats::fit::RatePoint;
use crate::{Error, Result};

pub const WAVEFORM_MAGIC: &[u8; 8] = b"SIPMWF01";

/// Minimal CSV table builder.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        let row: Vec<String> = row.into_iter().map(|s| s.to_string()).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Column index by header name.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Parse a CSV file with a header row; blank lines and `#` comments are skipped.
pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<CsvTable> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV".into()))?;
    let mut table = CsvTable::new(&header.split(',').map(str::trim).collect::<Vec<_>>());
    for (lineno, l) in lines {
        let row: Vec<&str> = l.split(',').map(str::trim).collect();
        if row.len() != table.header.len() {
            return Err(Error::Format(format!(
                "line {}: expected {} fields, found {}",
                lineno + 1,
                table.header.len(),
                row.len()
            )));
        }
        table.push(row);
    }
    Ok(table)
}

fn parse_f64(table: &CsvTable, row: usize, col: usize) -> Result<f64> {
    let cell = &table.rows[row][col];
    cell.parse::<f64>().map_err(|_| {
        Error::Format(format!(
            "row {}: column `{}` is not a number: `{cell}`",
            row + 1,
            table.header[col]
        ))
    })
}

fn require_column(table: &CsvTable, name: &str) -> Result<usize> {
    table
        .column(name)
        .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
}

pub fn write_waveform_binary(w: &Waveform, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_waveform_binary_to(w, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn write_waveform_binary_to(w: &Waveform, out: &mut impl Write) -> Result<()> {
    out.write_all(WAVEFORM_MAGIC)?;
    out.write_all(&w.sample_period.to_le_bytes())?;
    out.write_all(&w.t0.to_le_bytes())?;
    out.write_all(&(w.len() as u64).to_le_bytes())?;
    for &v in &w.samples {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_waveform_binary(path: &Path) -> Result<Waveform> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_waveform_binary_from(&mut r)
}

pub fn read_waveform_binary_from(r: &mut impl Read) -> Result<Waveform> {
    let mut head = [0u8; 32];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("waveform header truncated".into()))?;
    if &head[..8] != WAVEFORM_MAGIC {
        return Err(Error::Format("not a waveform file (bad magic)".into()));
    }
    let f = |a: usize| f64::from_le_bytes(head[a..a + 8].try_into().expect("8 bytes"));
    let sample_period = f(8);
    let t0 = f(16);
    let n = u64::from_le_bytes(head[24..32].try_into().expect("8 bytes"));
    if n > crate::analog::MAX_SAMPLES as u64 {
        return Err(Error::Size {
            what: "waveform samples",
            required: n as usize,
            limit: crate::analog::MAX_SAMPLES,
        });
    }
    let mut payload = vec![0u8; n as usize * 4];
    r.read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("waveform payload truncated, expected {n} samples")))?;
    let samples = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Waveform::new(samples, sample_period, t0).map_err(|e| Error::Format(e.to_string()))
}

pub fn waveform_csv(w: &Waveform) -> String {
    let mut out = String::with_capacity(w.len() * 24 + 20);
    out.push_str("time_s,voltage_mv\n");
    for (i, v) in w.samples.iter().enumerate() {
        let _ = writeln!(out, "{},{}", w.time(i), v);
    }
    out
}

pub fn write_waveform_csv(w: &Waveform, path: &Path) -> Result<()> {
    fs::write(path, waveform_csv(w))?;
    Ok(())
}

/// Read a `time_s,voltage_mv` file; the sample period is taken from the first two rows.
pub fn read_waveform_csv(path: &Path) -> Result<Waveform> {
    let t = read_csv(path)?;
    let (ct, cv) = (
        require_column(&t, "time_s")?,
        require_column(&t, "voltage_mv")?,
    );
    if t.rows.len() < 2 {
        return Err(Error::Format(
            "waveform CSV needs at least two samples".into(),
        ));
    }
    let t0 = parse_f64(&t, 0, ct)?;
    let dt = parse_f64(&t, 1, ct)? - t0;
    let samples = (0..t.rows.len())
        .map(|r| parse_f64(&t, r, cv))
        .collect::<Result<Vec<_>>>()?;
    Waveform::new(samples, dt, t0).map_err(|e| Error::Format(e.to_string()))
}

/// Dispatch on extension: `.csv` is text, anything else is binary.
pub fn read_waveform(path: &Path) -> Result<Waveform> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        read_waveform_csv(path)
    } else {
        read_waveform_binary(path)
    }
}

pub fn events_table(events: &[AvalancheEvent]) -> CsvTable {
    let mut t = CsvTable::new(&["time_s", "pixel", "cause"]);
    for e in events {
        t.push([
            e.time.to_string(),
            e.pixel.to_string(),
            e.cause.as_str().to_string(),
        ]);
    }
    t
}

pub fn read_events_csv(path: &Path) -> Result<Vec<AvalancheEvent>> {
    let t = read_csv(path)?;
    let (ct, cp, cc) = (
        require_column(&t, "time_s")?,
        require_column(&t, "pixel")?,
        require_column(&t, "cause")?,
    );
    (0..t.rows.len())
        .map(|r| {
            let cause = match t.rows[r][cc].as_str() {
                "photon" => Cause::Photon,
                "dark" => Cause::Dark,
                "crosstalk" => Cause::Crosstalk,
                other => {
                    return Err(Error::Format(format!(
                        "row {}: unknown cause `{other}`",
                        r + 1
                    )))
                }
            };
            let pixel = t.rows[r][cp]
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad pixel index", r + 1)))?;
            Ok(AvalancheEvent {
                time: parse_f64(&t, r, ct)?,
                pixel,
                cause,
            })
        })
        .collect()
}

/// Single-column list of times (`time_s`), e.g. trigger times.
pub fn read_times(path: &Path) -> Result<Vec<f64>> {
    let t = read_csv(path)?;
    let c = require_column(&t, "time_s")?;
    (0..t.rows.len()).map(|r| parse_f64(&t, r, c)).collect()
}

pub fn times_table(times: &[f64]) -> CsvTable {
    let mut t = CsvTable::new(&["time_s"]);
    times.iter().for_each(|v| t.push([v]));
    t
}

pub fn histogram_table(h: &PulseHeightHistogram) -> CsvTable {
    let mut t = CsvTable::new(&["bin_low_mv", "bin_high_mv", "count"]);
    for (k, c) in h.counts.iter().enumerate() {
        t.push([
            h.bin_edges[k].to_string(),
            h.bin_edges[k + 1].to_string(),
            c.to_string(),
        ]);
    }
    t
}

pub fn classification_table(c: &Classification) -> CsvTable {
    let mut t = CsvTable::new(&["n", "probability", "ci_low", "ci_high"]);
    for (n, (p, (lo, hi))) in c.distribution.probs().iter().zip(&c.intervals).enumerate() {
        t.push([n.to_string(), p.to_string(), lo.to_string(), hi.to_string()]);
    }
    t
}

/// Rate points for fitting: columns `mu` and `count_rate` (Hz).
pub fn read_rate_points(path: &Path) -> Result<Vec<RatePoint>> {
    let t = read_csv(path)?;
    let (cm, cr) = (require_column(&t, "mu")?, require_column(&t, "count_rate")?);
    (0..t.rows.len())
        .map(|r| {
            Ok(RatePoint {
                mu: parse_f64(&t, r, cm)?,
                rate: parse_f64(&t, r, cr)?,
            })
        })
        .collect()
}

/// Count lines of a text file; used by tests on large outputs.
pub fn line_count(path: &Path) -> Result<usize> {
    Ok(BufReader::new(fs::File::open(path)?).lines().count())
}
