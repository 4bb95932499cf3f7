//! Horizon sweep: one training run per forecast horizon.

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainData};
use crate::data::{build_all_windows, CellRecord, SplitAssignment, Window};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::net::NetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub horizon: usize,
    pub test_windows: usize,
    /// Current-SOH MAE on the test split.
    pub overall_mae: f64,
    /// Mean trajectory MAE over every step of the horizon.
    pub trajectory_mae: Option<f64>,
    pub best_val_mae: f64,
}

/// Train `cfg.variant` once per horizon in `horizons` with otherwise equal
/// settings and report test-split errors.
pub fn sweep_horizons(
    cells: &[CellRecord],
    split: &SplitAssignment,
    net: &NetConfig,
    cfg: &TrainConfig,
    horizons: &[usize],
) -> Result<Vec<SweepRow>> {
    if horizons.is_empty() {
        return Err(Error::Config("empty horizon set".into()));
    }
    let (_, _, test_idx) = split.indices(cells);
    horizons
        .iter()
        .map(|&h| {
            let net_h = NetConfig {
                horizon: h,
                ..net.clone()
            };
            net_h.validate()?;
            let data = TrainData::from_split(cells, split, &net_h);
            let outcome = train(&data, &net_h, cfg)?;
            let test = build_all_windows(cells, &test_idx, net_h.window, h);
            let refs: Vec<&Window> = test.iter().collect();
            let steps: Vec<usize> = (1..=h).collect();
            let with_traj = outcome.model.architecture().has_trajectory();
            let report = evaluate(
                &outcome.model,
                cells,
                &refs,
                if with_traj { &steps } else { &[] },
                cfg.parallelism,
            )?;
            let trajectory_mae =
                with_traj.then(|| report.horizon_mae.values().sum::<f64>() / report.horizon_mae.len() as f64);
            let best = outcome.history.phases.last().map_or(f64::NAN, |p| p.end_val_mae);
            tracing::info!(horizon = h, mae = report.overall.mae, "sweep run finished");
            Ok(SweepRow {
                horizon: h,
                test_windows: refs.len(),
                overall_mae: report.overall.mae,
                trajectory_mae,
                best_val_mae: best,
            })
        })
        .collect()
}
