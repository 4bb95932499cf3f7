use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{MetricsReport, PcaProjection, PredictionRecord};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.json";
pub const PER_CELL_FILE: &str = "per_cell_mae.tsv";
pub const PCA_FILE: &str = "pca.tsv";
pub const TRAJECTORY_FILE: &str = "trajectories.tsv";

/// One row of the per-cell heatmap table.
#[derive(Clone, Debug, PartialEq)]
pub struct CellMae {
    pub cell_id: String,
    pub method: String,
    pub mae: f64,
}

/// Write `metrics.json`, the per-cell MAE table and, when given, the PCA
/// scatter table into `dir`.
pub fn emit_report(dir: &Path, report: &MetricsReport, method: &str, pca: Option<&PcaProjection>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(report)? + "\n")?;
    let mut cells = String::from("cell_id\tmethod\tmae\n");
    for (id, mae) in &report.per_cell_mae {
        let _ = writeln!(cells, "{id}\t{method}\t{mae}");
    }
    fs::write(dir.join(PER_CELL_FILE), cells)?;
    if let Some(p) = pca {
        let mut s = String::from("pc1\tpc2\tsoh\tcell_id\n");
        for ((c, soh), id) in p.coords.iter().zip(&p.soh).zip(&p.cell_ids) {
            let _ = writeln!(s, "{}\t{}\t{soh}\t{id}", c[0], c[1]);
        }
        fs::write(dir.join(PCA_FILE), s)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Per-anchor forecast data: one row per window and horizon step.
pub fn write_trajectories(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut s = String::from("cell_id\tanchor_cycle\th\tsoh_true\tsoh_pred\n");
    for r in records {
        let _ = writeln!(s, "{}\t{}\t0\t{}\t{}", r.cell_id, r.anchor_cycle, r.soh_true, r.soh_pred);
        if let Some(f) = &r.future_pred {
            for (h, (t, p)) in r.future_true.iter().zip(f).enumerate() {
                let _ = writeln!(s, "{}\t{}\t{}\t{t}\t{p}", r.cell_id, r.anchor_cycle, h + 1);
            }
        }
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::compute_report;

    #[test]
    fn metrics_round_trip_and_tables() {
        let recs: Vec<PredictionRecord> = (0..6)
            .map(|i| PredictionRecord {
                cell_id: format!("c{}", i % 3),
                anchor_cycle: 40 + i,
                soh_true: 0.99 - 0.03 * i as f64,
                soh_pred: 0.98 - 0.031 * i as f64,
                future_true: vec![0.9, 0.89],
                future_pred: Some(vec![0.91, 0.885]),
            })
            .collect();
        let report = compute_report(&recs, &[1, 2]).unwrap();
        let pca = PcaProjection {
            coords: vec![[0.1, -0.2]; 6],
            ratios: [0.7, 0.2],
            soh: recs.iter().map(|r| r.soh_true).collect(),
            cell_ids: recs.iter().map(|r| r.cell_id.clone()).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &report, "wm", Some(&pca)).unwrap();
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), report);
        let cells = fs::read_to_string(dir.path().join(PER_CELL_FILE)).unwrap();
        assert_eq!(cells.lines().count(), 1 + 3);
        let pc = fs::read_to_string(dir.path().join(PCA_FILE)).unwrap();
        assert_eq!(pc.lines().count(), 1 + 6);
        assert!(pc.starts_with("pc1\tpc2\tsoh\tcell_id\n"));
        write_trajectories(&dir.path().join(TRAJECTORY_FILE), &recs).unwrap();
    }
}
