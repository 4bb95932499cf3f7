//! On-disk dataset layout.
//!
//! ```text
//! root/
//!   manifest.tsv          cell_id  batch_id  file
//!   <file>                cycle  t  voltage  current  temperature
//!   <cell_id>.summary     cycle  discharge_capacity  internal_resistance
//!   exclude.txt           optional, one cell_id per line
//! ```
//!
//! All tables are tab-delimited with a header row. The summary file sits next
//! to the cell's time-series file.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{canonicalize_series, mean_charge_current, CellRecord, CycleRecord, DEFAULT_T_MAX};
use crate::error::{Error, Result};
use crate::parallel::{map_items, Parallelism};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const EXCLUDE_FILE: &str = "exclude.txt";

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub t_max: usize,
    /// Exclusion list; `None` uses `root/exclude.txt` when it exists.
    pub exclude: Option<PathBuf>,
    pub parallelism: Parallelism,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            t_max: DEFAULT_T_MAX,
            exclude: None,
            parallelism: Parallelism::default(),
        }
    }
}

/// Why a cell was not ingested.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellRejection {
    pub cell_id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct LoadedDataset {
    /// Sorted by `cell_id`.
    pub cells: Vec<CellRecord>,
    pub rejected: Vec<CellRejection>,
}

struct ManifestRow {
    cell_id: String,
    batch_id: u8,
    file: PathBuf,
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)?;
    Ok(csv::ReaderBuilder::new().delimiter(b'\t').has_headers(true).from_reader(file))
}

fn column_indices(path: &Path, headers: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| Error::format(path, format!("missing column `{name}`")))
        })
        .collect()
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, raw: &str, name: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("line {line}: bad {name} value `{raw}`")))
}

fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let path = root.join(MANIFEST_FILE);
    let mut rdr = reader(&path)?;
    let headers = rdr.headers().map_err(|e| Error::format(&path, e.to_string()))?.clone();
    let cols = column_indices(&path, &headers, &["cell_id", "batch_id", "file"])?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(&path, e.to_string()))?;
        let line = i + 2;
        rows.push(ManifestRow {
            cell_id: rec[cols[0]].trim().to_string(),
            batch_id: parse_field(&path, line, &rec[cols[1]], "batch_id")?,
            file: root.join(rec[cols[2]].trim()),
        });
    }
    Ok(rows)
}

fn read_exclusions(path: &Path) -> Result<HashSet<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

#[derive(Default)]
struct RawCycle {
    voltage: Vec<f64>,
    current: Vec<f64>,
    temperature: Vec<f64>,
}

fn read_series(path: &Path) -> Result<BTreeMap<u32, RawCycle>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let cols = column_indices(path, &headers, &["cycle", "t", "voltage", "current", "temperature"])?;
    let mut out: BTreeMap<u32, RawCycle> = BTreeMap::new();
    let mut last_cycle = 0u32;
    let mut rec = csv::StringRecord::new();
    let mut line = 1;
    while rdr.read_record(&mut rec).map_err(|e| Error::format(path, e.to_string()))? {
        line += 1;
        let cycle: u32 = parse_field(path, line, &rec[cols[0]], "cycle")?;
        if cycle < last_cycle {
            return Err(Error::format(
                path,
                format!("line {line}: non-monotone cycle index {cycle} after {last_cycle}"),
            ));
        }
        last_cycle = cycle;
        // Samples are kept at f32 precision, matching the stored series.
        let sample = |col: usize, name: &str| parse_field::<f32>(path, line, &rec[cols[col]], name).map(f64::from);
        let (v, i, t) = (sample(2, "voltage")?, sample(3, "current")?, sample(4, "temperature")?);
        let entry = out.entry(cycle).or_default();
        entry.voltage.push(v);
        entry.current.push(i);
        entry.temperature.push(t);
    }
    Ok(out)
}

fn read_summary(path: &Path) -> Result<Vec<(u32, f64, f64)>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let cols = column_indices(path, &headers, &["cycle", "discharge_capacity", "internal_resistance"])?;
    let mut out: Vec<(u32, f64, f64)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = i + 2;
        let cycle: u32 = parse_field(path, line, &rec[cols[0]], "cycle")?;
        if let Some(prev) = out.last() {
            if cycle <= prev.0 {
                return Err(Error::format(
                    path,
                    format!("line {line}: non-monotone cycle index {cycle} after {}", prev.0),
                ));
            }
        }
        out.push((
            cycle,
            parse_field(path, line, &rec[cols[1]], "discharge_capacity")?,
            parse_field(path, line, &rec[cols[2]], "internal_resistance")?,
        ));
    }
    Ok(out)
}

fn summary_path(row: &ManifestRow) -> PathBuf {
    let dir = row.file.parent().map(Path::to_path_buf).unwrap_or_default();
    dir.join(format!("{}.summary", row.cell_id))
}

fn load_cell(row: &ManifestRow, t_max: usize) -> Result<CellRecord> {
    let mut series = read_series(&row.file)?;
    let summary = read_summary(&summary_path(row))?;
    let mut cycles = Vec::with_capacity(summary.len());
    for (cycle, capacity, resistance) in summary {
        if cycle == 0 {
            return Err(Error::InvalidInput("cycle index 0 is not allowed".into()));
        }
        let raw = series
            .remove(&cycle)
            .ok_or_else(|| Error::InvalidInput(format!("cycle {cycle} has a summary row but no time-series")))?;
        if cycle == 1 {
            continue;
        }
        if !(capacity > 0.0) {
            return Err(Error::InvalidInput(format!("non-positive discharge capacity at cycle {cycle}")));
        }
        if !(resistance > 0.0) {
            return Err(Error::InvalidInput(format!("non-positive internal resistance at cycle {cycle}")));
        }
        cycles.push(CycleRecord {
            cycle_index: cycle,
            series: canonicalize_series(&raw.voltage, &raw.current, &raw.temperature, t_max)?,
            discharge_capacity: capacity,
            internal_resistance: resistance,
            mean_charge_current: mean_charge_current(&raw.current),
        });
    }
    if let Some(orphan) = series.keys().next() {
        return Err(Error::InvalidInput(format!("cycle {orphan} has time-series but no summary row")));
    }
    CellRecord::new(row.cell_id.clone(), row.batch_id, cycles)
}

/// Ingest every cell listed in `root/manifest.tsv`.
///
/// Bad cells are skipped and reported in [`LoadedDataset::rejected`]; a
/// directory without a manifest is an empty dataset.
pub fn load_dataset(root: impl AsRef<Path>, opts: &LoadOptions) -> Result<LoadedDataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::InvalidInput(format!("{} is not a directory", root.display())));
    }
    if !root.join(MANIFEST_FILE).exists() {
        return Ok(LoadedDataset::default());
    }
    let exclude_path = opts.exclude.clone().unwrap_or_else(|| root.join(EXCLUDE_FILE));
    let excluded = if exclude_path.exists() {
        read_exclusions(&exclude_path)?
    } else {
        HashSet::new()
    };
    let rows: Vec<ManifestRow> = read_manifest(root)?
        .into_iter()
        .filter(|r| !excluded.contains(&r.cell_id))
        .collect();

    let results = map_items(opts.parallelism, &rows, |row| load_cell(row, opts.t_max));
    let mut out = LoadedDataset::default();
    for (row, res) in rows.iter().zip(results) {
        match res {
            Ok(cell) => out.cells.push(cell),
            Err(e) => {
                tracing::warn!(cell_id = %row.cell_id, "rejected cell: {e}");
                out.rejected.push(CellRejection {
                    cell_id: row.cell_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    out.cells.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
    Ok(out)
}

/// Write cells in the layout read by [`load_dataset`]. Only the real
/// (unpadded) samples of each cycle are written.
pub fn export_dataset(cells: &[CellRecord], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    let mut manifest = BufWriter::new(File::create(root.join(MANIFEST_FILE))?);
    writeln!(manifest, "cell_id\tbatch_id\tfile")?;
    for cell in cells {
        let file = format!("{}.tsv", cell.cell_id);
        writeln!(manifest, "{}\t{}\t{}", cell.cell_id, cell.batch_id, file)?;

        let mut series = BufWriter::new(File::create(root.join(&file))?);
        writeln!(series, "cycle\tt\tvoltage\tcurrent\ttemperature")?;
        for c in &cell.cycles {
            let (v, i, t) = c.series.real();
            for j in 0..c.series.length {
                writeln!(series, "{}\t{}\t{}\t{}\t{}", c.cycle_index, j, v[j], i[j], t[j])?;
            }
        }
        series.flush()?;

        let mut summary = BufWriter::new(File::create(root.join(format!("{}.summary", cell.cell_id)))?);
        writeln!(summary, "cycle\tdischarge_capacity\tinternal_resistance")?;
        for c in &cell.cycles {
            writeln!(summary, "{}\t{}\t{}", c.cycle_index, c.discharge_capacity, c.internal_resistance)?;
        }
        summary.flush()?;
    }
    manifest.flush()?;
    Ok(())
}
