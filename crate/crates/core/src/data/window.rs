use std::sync::Arc;

use super::{soh_of, CellRecord, CycleRecord};

/// One training sample: `width` observed cycles ending at the anchor plus
/// the SOH of the next `soh_future.len()` cycles.
///
/// The input series are not copied; [`Window::input_cycles`] borrows them
/// from the owning cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub cell_id: Arc<str>,
    /// Index of the owning cell in the slice the window was built from.
    pub cell_index: usize,
    /// Position (within the cell's retained cycles) of the first input cycle.
    pub start: usize,
    pub width: usize,
    pub anchor_cycle: u32,
    /// Mean charge current at the anchor cycle, A.
    pub action: f64,
    pub soh_now: f64,
    pub soh_future: Vec<f64>,
    pub resistance_last: f64,
    pub resistance_initial: f64,
    /// Voltage at discharge start minus the minimum voltage of the anchor
    /// cycle, V.
    pub voltage_drop: f64,
}

impl Window {
    pub fn horizon(&self) -> usize {
        self.soh_future.len()
    }

    pub fn anchor_pos(&self) -> usize {
        self.start + self.width - 1
    }

    pub fn input_cycles<'a>(&self, cells: &'a [CellRecord]) -> &'a [CycleRecord] {
        &cells[self.cell_index].cycles[self.start..self.start + self.width]
    }
}

/// Ohmic-drop proxy of one cycle: voltage at the first discharge sample minus
/// the minimum voltage over the real samples.
pub(crate) fn observed_voltage_drop(cycle: &CycleRecord) -> f64 {
    let (v, i, _) = cycle.series.real();
    let start = i.iter().position(|&c| c < 0.0).unwrap_or(0);
    let v_start = v[start] as f64;
    let v_min = v.iter().fold(f64::INFINITY, |m, &x| m.min(x as f64));
    (v_start - v_min).max(0.0)
}

/// Every window of one cell. Anchors run over retained positions
/// `width ..= n - horizon - 1` (0-based), giving `max(0, n - width - horizon)`
/// windows. Cells too short for one window yield none.
pub fn build_windows(cell: &CellRecord, cell_index: usize, width: usize, horizon: usize) -> Vec<Window> {
    assert!(width >= 1 && horizon >= 1, "window width and horizon must be positive");
    let n = cell.cycles.len();
    if n < width + horizon + 1 {
        return Vec::new();
    }
    let id: Arc<str> = Arc::from(cell.cell_id.as_str());
    let soh = cell.soh_series();
    (width..n - horizon)
        .map(|anchor| {
            let last = &cell.cycles[anchor];
            Window {
                cell_id: id.clone(),
                cell_index,
                start: anchor + 1 - width,
                width,
                anchor_cycle: last.cycle_index,
                action: last.mean_charge_current,
                soh_now: soh_of(last, cell),
                soh_future: soh[anchor + 1..=anchor + horizon].to_vec(),
                resistance_last: last.internal_resistance,
                resistance_initial: cell.initial_resistance,
                voltage_drop: observed_voltage_drop(last),
            }
        })
        .collect()
}

/// Windows for the given cells (indexed into `cells`), in cell order.
pub fn build_all_windows(cells: &[CellRecord], indices: &[usize], width: usize, horizon: usize) -> Vec<Window> {
    indices
        .iter()
        .flat_map(|&i| build_windows(&cells[i], i, width, horizon))
        .collect()
}
