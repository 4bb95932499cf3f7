//! Cycling data: per-cycle series, cell records, SOH and aging stages.
//!
//! Cells are stored with cycle 1 removed; SOH is the discharge capacity of a
//! cycle divided by the capacity of the first retained cycle (cycle 2 in
//! standard data).

mod io;
mod sampling;
mod split;
mod window;

pub use io::{export_dataset, load_dataset, CellRejection, LoadOptions, LoadedDataset};
pub use sampling::inverse_frequency_weights;
pub use split::{stratified_split, SplitAssignment, SplitSizes};
pub use window::{build_all_windows, build_windows, Window};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Canonical per-cycle series length.
pub const DEFAULT_T_MAX: usize = 1000;

/// Voltage, current and temperature of one cycle, padded or truncated to a
/// fixed length. Samples are kept in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleSeries {
    pub voltage: Vec<f32>,
    pub current: Vec<f32>,
    pub temperature: Vec<f32>,
    /// Number of real samples before zero padding.
    pub length: usize,
}

impl CycleSeries {
    pub fn t_max(&self) -> usize {
        self.voltage.len()
    }

    /// The unpadded prefix of each channel.
    pub fn real(&self) -> (&[f32], &[f32], &[f32]) {
        let n = self.length;
        (&self.voltage[..n], &self.current[..n], &self.temperature[..n])
    }
}

/// Pad with zeros or truncate raw V/I/T samples to exactly `t_max` entries.
pub fn canonicalize_series(
    voltage: &[f64],
    current: &[f64],
    temperature: &[f64],
    t_max: usize,
) -> Result<CycleSeries> {
    if voltage.is_empty() {
        return Err(Error::InvalidInput("empty cycle series".into()));
    }
    if voltage.len() != current.len() || voltage.len() != temperature.len() {
        return Err(Error::InvalidInput(format!(
            "series lengths differ: V={} I={} T={}",
            voltage.len(),
            current.len(),
            temperature.len()
        )));
    }
    if t_max == 0 {
        return Err(Error::Config("t_max must be positive".into()));
    }
    let length = voltage.len().min(t_max);
    let fit = |xs: &[f64]| {
        let mut out = vec![0f32; t_max];
        for (o, &x) in out.iter_mut().zip(&xs[..length]) {
            *o = x as f32;
        }
        out
    };
    Ok(CycleSeries {
        voltage: fit(voltage),
        current: fit(current),
        temperature: fit(temperature),
        length,
    })
}

/// Mean of the strictly positive (charging) current samples, 0 when the
/// cycle has no charge segment.
pub fn mean_charge_current(current: &[f64]) -> f64 {
    let (sum, n) = current
        .iter()
        .filter(|&&c| c > 0.0)
        .fold((0.0, 0usize), |(s, n), &c| (s + c, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One retained cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleRecord {
    pub cycle_index: u32,
    pub series: CycleSeries,
    /// Ah.
    pub discharge_capacity: f64,
    /// Ohm.
    pub internal_resistance: f64,
    /// A, mean of the charge segment.
    pub mean_charge_current: f64,
}

/// A cell's retained life.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRecord {
    pub cell_id: String,
    pub batch_id: u8,
    pub cycles: Vec<CycleRecord>,
    pub reference_capacity: f64,
    pub initial_resistance: f64,
}

impl CellRecord {
    /// Validate the cycle list and derive the reference capacity and R0 from
    /// the first retained cycle. Cycle 1 must already be removed.
    pub fn new(cell_id: impl Into<String>, batch_id: u8, cycles: Vec<CycleRecord>) -> Result<Self> {
        let cell_id = cell_id.into();
        let fail = |reason: String| Err(Error::InvalidInput(format!("cell {cell_id}: {reason}")));
        if cycles.is_empty() {
            return fail("no cycles".into());
        }
        for pair in cycles.windows(2) {
            if pair[1].cycle_index <= pair[0].cycle_index {
                return fail(format!(
                    "cycle indices not strictly increasing ({} then {})",
                    pair[0].cycle_index, pair[1].cycle_index
                ));
            }
        }
        if cycles[0].cycle_index <= 1 {
            return fail("cycle 1 must be dropped before building a cell".into());
        }
        for c in &cycles {
            if !(c.discharge_capacity > 0.0) {
                return fail(format!("non-positive discharge capacity at cycle {}", c.cycle_index));
            }
            if !(c.internal_resistance > 0.0) {
                return fail(format!("non-positive internal resistance at cycle {}", c.cycle_index));
            }
        }
        let reference_capacity = cycles[0].discharge_capacity;
        let initial_resistance = cycles[0].internal_resistance;
        Ok(CellRecord {
            cell_id,
            batch_id,
            cycles,
            reference_capacity,
            initial_resistance,
        })
    }

    pub fn soh_series(&self) -> Vec<f64> {
        self.cycles.iter().map(|c| soh_of(c, self)).collect()
    }

    pub fn min_soh(&self) -> f64 {
        self.soh_series().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }
}

/// Discharge capacity relative to the cell's reference capacity. Values above
/// 1 are kept.
pub fn soh_of(cycle: &CycleRecord, cell: &CellRecord) -> f64 {
    cycle.discharge_capacity / cell.reference_capacity
}

/// Aging stage bands. Each band includes its lower bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgingStage {
    Stage1,
    Stage2,
    Stage3,
    Stage4,
}

impl AgingStage {
    pub const ALL: [AgingStage; 4] = [
        AgingStage::Stage1,
        AgingStage::Stage2,
        AgingStage::Stage3,
        AgingStage::Stage4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AgingStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Stage{}", self.index() + 1)
    }
}

pub fn classify_stage(soh: f64) -> AgingStage {
    if soh >= 0.95 {
        AgingStage::Stage1
    } else if soh >= 0.90 {
        AgingStage::Stage2
    } else if soh >= 0.85 {
        AgingStage::Stage3
    } else {
        AgingStage::Stage4
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// A cell with flat synthetic series and the given capacities (cycles
    /// numbered from 2).
    pub fn cell_from_capacities(id: &str, batch: u8, caps: &[f64]) -> CellRecord {
        let cycles = caps
            .iter()
            .enumerate()
            .map(|(i, &q)| CycleRecord {
                cycle_index: i as u32 + 2,
                series: canonicalize_series(&[3.3, 3.0], &[1.0, -1.0], &[30.0, 30.0], 8).unwrap(),
                discharge_capacity: q,
                internal_resistance: 0.02 / q,
                mean_charge_current: 1.0,
            })
            .collect();
        CellRecord::new(id, batch, cycles).unwrap()
    }
}
