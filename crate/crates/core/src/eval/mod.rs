//! Error metrics per aging stage and horizon, latent PCA and report files.

mod pca;
mod report;

pub use pca::{latent_pca, model_pca, spearman, PcaProjection};
pub use report::{emit_report, read_metrics, write_trajectories, CellMae, METRICS_FILE, PCA_FILE, PER_CELL_FILE, TRAJECTORY_FILE};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{classify_stage, AgingStage, CellRecord, Window};
use crate::error::{Error, Result};
use crate::net::{Model, WindowOutput};
use crate::parallel::Parallelism;

/// Stage 4 is reported only with at least this many samples.
pub const STAGE4_FLOOR: usize = 30;
/// Truth values below this are left out of MAPE.
pub const MAPE_GUARD: f64 = 0.01;
pub const DEFAULT_HORIZONS: [usize; 4] = [5, 10, 20, 50];

/// MAE, RMSE and MAPE (percent) over one group of samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Samples excluded from MAPE by the low-SOH guard.
    pub mape_guard_hits: usize,
}

impl ErrorStats {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let (mut n, mut abs, mut sq, mut pct, mut pct_n, mut hits) = (0usize, 0.0, 0.0, 0.0, 0usize, 0usize);
        for (pred, truth) in pairs {
            let e = pred - truth;
            n += 1;
            abs += e.abs();
            sq += e * e;
            if truth >= MAPE_GUARD {
                pct += e.abs() / truth;
                pct_n += 1;
            } else {
                hits += 1;
            }
        }
        if n == 0 {
            return ErrorStats::default();
        }
        ErrorStats {
            count: n,
            mae: abs / n as f64,
            rmse: (sq / n as f64).sqrt(),
            mape: if pct_n > 0 { 100.0 * pct / pct_n as f64 } else { 0.0 },
            mape_guard_hits: hits,
        }
    }
}

/// One window's prediction paired with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub cell_id: String,
    pub anchor_cycle: u32,
    pub soh_true: f64,
    pub soh_pred: f64,
    pub future_true: Vec<f64>,
    pub future_pred: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn new(w: &Window, out: &WindowOutput) -> Self {
        PredictionRecord {
            cell_id: w.cell_id.to_string(),
            anchor_cycle: w.anchor_cycle,
            soh_true: w.soh_now,
            soh_pred: out.soh_now,
            future_true: w.soh_future.clone(),
            future_pred: out.soh_future.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: ErrorStats,
    /// Stage1–Stage3 always (count 0 when empty); Stage4 only above the floor.
    pub stages: BTreeMap<String, ErrorStats>,
    /// Sample count of every stage, including an omitted Stage4.
    pub stage_counts: BTreeMap<String, usize>,
    /// Trajectory MAE keyed by horizon; empty for models without trajectories.
    pub horizon_mae: BTreeMap<usize, f64>,
    pub per_cell_mae: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn horizon(&self, h: usize) -> Option<f64> {
        self.horizon_mae.get(&h).copied()
    }
}

/// Metrics over current-SOH predictions grouped by true stage, plus pooled
/// trajectory MAE at each requested horizon.
pub fn compute_report(records: &[PredictionRecord], horizons: &[usize]) -> Result<MetricsReport> {
    let overall = ErrorStats::from_pairs(records.iter().map(|r| (r.soh_pred, r.soh_true)));
    let mut stages = BTreeMap::new();
    let mut stage_counts = BTreeMap::new();
    for stage in AgingStage::ALL {
        let stats = ErrorStats::from_pairs(
            records
                .iter()
                .filter(|r| classify_stage(r.soh_true) == stage)
                .map(|r| (r.soh_pred, r.soh_true)),
        );
        stage_counts.insert(stage.to_string(), stats.count);
        if stage != AgingStage::Stage4 || stats.count >= STAGE4_FLOOR {
            stages.insert(stage.to_string(), stats);
        }
    }
    let horizon_mae = if records.iter().all(|r| r.future_pred.is_some()) && !records.is_empty() {
        horizon_mae_of(records, horizons)?
    } else {
        BTreeMap::new()
    };
    let mut per_cell: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = per_cell.entry(r.cell_id.clone()).or_default();
        e.0 += (r.soh_pred - r.soh_true).abs();
        e.1 += 1;
    }
    Ok(MetricsReport {
        overall,
        stages,
        stage_counts,
        horizon_mae,
        per_cell_mae: per_cell.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}

fn horizon_mae_of(records: &[PredictionRecord], horizons: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let max_h = records.iter().map(|r| r.future_true.len()).min().unwrap_or(0);
    let mut out = BTreeMap::new();
    for &h in horizons {
        if h == 0 || h > max_h {
            return Err(Error::Config(format!("horizon {h} is outside 1..={max_h}")));
        }
        let sum: f64 = records
            .iter()
            .map(|r| (r.future_pred.as_ref().expect("checked")[h - 1] - r.future_true[h - 1]).abs())
            .sum();
        out.insert(h, sum / records.len() as f64);
    }
    Ok(out)
}

pub fn predict_records(
    model: &Model,
    cells: &[CellRecord],
    windows: &[&Window],
    par: Parallelism,
) -> Result<Vec<PredictionRecord>> {
    let outs = model.predict(cells, windows, par)?;
    Ok(windows.iter().zip(&outs).map(|(w, o)| PredictionRecord::new(w, o)).collect())
}

pub fn evaluate(
    model: &Model,
    cells: &[CellRecord],
    windows: &[&Window],
    horizons: &[usize],
    par: Parallelism,
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::InvalidInput("no evaluation windows".into()));
    }
    check_horizons(model, horizons)?;
    compute_report(&predict_records(model, cells, windows, par)?, horizons)
}

fn check_horizons(model: &Model, horizons: &[usize]) -> Result<()> {
    let max_h = model.config().horizon;
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > max_h) {
        return Err(Error::Config(format!("horizon {h} is outside 1..={max_h}")));
    }
    Ok(())
}

/// Pooled trajectory MAE per requested horizon.
pub fn horizon_mae(
    model: &Model,
    cells: &[CellRecord],
    windows: &[&Window],
    horizons: &[usize],
    par: Parallelism,
) -> Result<BTreeMap<usize, f64>> {
    if !model.architecture().has_trajectory() {
        return Err(Error::Unsupported("the LSTM baseline produces no trajectory".into()));
    }
    check_horizons(model, horizons)?;
    horizon_mae_of(&predict_records(model, cells, windows, par)?, horizons)
}

/// Early-stopping score: the mean over windows of the current-SOH absolute
/// error averaged with the trajectory MAE (current only for the LSTM).
pub fn validation_mae(model: &Model, cells: &[CellRecord], windows: &[&Window], par: Parallelism) -> Result<f64> {
    let outs = model.predict(cells, windows, par)?;
    let total: f64 = windows
        .iter()
        .zip(&outs)
        .map(|(w, o)| {
            let now = (o.soh_now - w.soh_now).abs();
            match &o.soh_future {
                Some(f) if !f.is_empty() => {
                    let fut = f.iter().zip(&w.soh_future).map(|(a, b)| (a - b).abs()).sum::<f64>() / f.len() as f64;
                    0.5 * (now + fut)
                }
                _ => now,
            }
        })
        .sum();
    Ok(total / windows.len().max(1) as f64)
}

/// Share of consecutive predicted steps that rise by more than `epsilon`.
pub fn increase_fraction(records: &[PredictionRecord], epsilon: f64) -> f64 {
    let (mut up, mut n) = (0usize, 0usize);
    for r in records {
        if let Some(f) = &r.future_pred {
            for p in f.windows(2) {
                n += 1;
                if p[1] - p[0] > epsilon {
                    up += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        up as f64 / n as f64
    }
}
