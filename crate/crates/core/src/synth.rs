//! Synthetic LFP-like fleet.
//!
//! SOH fades linearly until a knee and faster afterwards. Internal resistance
//! follows `R(k) = R0 * (1 / SOH(k))^gamma` exactly, so the resistance
//! consistency term has a known zero on clean data. Each cycle carries a short
//! constant-current charge segment (which defines the mean charge current)
//! followed by a constant-current discharge whose plateau voltage sags and
//! whose duration shrinks with SOH.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{canonicalize_series, mean_charge_current, CellRecord, CycleRecord, DEFAULT_T_MAX};
use crate::error::{Error, Result};
use crate::parallel::{map_items, Parallelism};

/// Constant discharge current magnitude, A (4C on a 1.1 Ah cell).
pub const DISCHARGE_CURRENT: f64 = 4.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCellParams {
    pub cell_id: String,
    pub batch_id: u8,
    /// Last cycle index generated; cycles `2..=lifetime_cycles` are retained.
    pub lifetime_cycles: u32,
    pub knee_fraction: f64,
    pub base_fade_rate: f64,
    pub knee_fade_rate: f64,
    pub gamma: f64,
    pub charge_current: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub initial_resistance: f64,
    pub nominal_capacity: f64,
    /// Samples per cycle at full health (charge + discharge + idle tail).
    pub samples_per_cycle: usize,
    pub t_max: usize,
    pub temperature_offset: f64,
}

impl Default for SynthCellParams {
    fn default() -> Self {
        SynthCellParams {
            cell_id: "synth".into(),
            batch_id: 1,
            lifetime_cycles: 300,
            knee_fraction: 0.7,
            base_fade_rate: 2.4e-4,
            knee_fade_rate: 1.6e-3,
            gamma: 0.75,
            charge_current: 4.4,
            noise_sd: 0.0,
            seed: 0,
            initial_resistance: 0.018,
            nominal_capacity: 1.1,
            samples_per_cycle: 200,
            t_max: DEFAULT_T_MAX,
            temperature_offset: 0.0,
        }
    }
}

impl SynthCellParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic cell {}: {m}", self.cell_id)));
        if !(self.base_fade_rate > 0.0 && self.knee_fade_rate > self.base_fade_rate) {
            return bad("need knee_fade_rate > base_fade_rate > 0");
        }
        if !(self.knee_fraction > 0.0 && self.knee_fraction < 1.0) {
            return bad("knee_fraction must lie in (0, 1)");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if self.lifetime_cycles < 2 {
            return bad("lifetime must include cycle 2");
        }
        if self.samples_per_cycle < 10 || self.samples_per_cycle > self.t_max {
            return bad("samples_per_cycle must lie in [10, t_max]");
        }
        if !(self.noise_sd >= 0.0 && self.initial_resistance > 0.0 && self.nominal_capacity > 0.0) {
            return bad("noise, resistance and capacity must be non-negative/positive");
        }
        Ok(())
    }

    pub fn knee_cycle(&self) -> u32 {
        ((self.knee_fraction * self.lifetime_cycles as f64).round() as u32).max(2)
    }

    /// Noise-free SOH at a cycle index.
    pub fn clean_soh(&self, cycle: u32) -> f64 {
        let knee = self.knee_cycle();
        if cycle <= knee {
            1.0 - self.base_fade_rate * (cycle - 2) as f64
        } else {
            1.0 - self.base_fade_rate * (knee - 2) as f64 - self.knee_fade_rate * (cycle - knee) as f64
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn synth_series(p: &SynthCellParams, soh: f64, resistance: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let spc = p.samples_per_cycle as f64;
    let n_charge = (p.samples_per_cycle / 10).max(1);
    let discharge_span = (0.85 * spc * soh).max(2.0);
    let n_discharge = (discharge_span.floor() as usize).max(2);
    let t0 = 30.0 + p.temperature_offset + 3.0 * (1.0 - soh);
    let plateau = 3.30 - 0.35 * (1.0 - soh);
    let jitter: f64 = rng.gen_range(-0.05..0.05);

    let mut v = Vec::with_capacity(n_charge + n_discharge);
    let mut i = Vec::with_capacity(n_charge + n_discharge);
    let mut t = Vec::with_capacity(n_charge + n_discharge);
    for j in 0..n_charge {
        let x = (j as f64 + 0.5) / n_charge as f64;
        v.push(plateau + 0.05 + 0.2 * x + p.charge_current * resistance);
        i.push(p.charge_current);
        t.push(t0 + 0.4 * x + jitter);
    }
    for j in 0..n_discharge {
        let x = (j as f64 + 0.5) / discharge_span;
        let curve = plateau - 0.15 * x - 0.8 * sigmoid((x - 0.92) / 0.025);
        v.push(curve - DISCHARGE_CURRENT * resistance);
        i.push(-DISCHARGE_CURRENT);
        t.push(t0 + 0.4 + 2.5 * x + jitter);
    }
    (v, i, t)
}

/// Generate one cell (cycle 1 is not produced).
pub fn generate_cell(p: &SynthCellParams) -> Result<CellRecord> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = if p.noise_sd > 0.0 {
        Some(Normal::new(0.0, p.noise_sd).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let reference = p.nominal_capacity;
    let mut cycles = Vec::with_capacity(p.lifetime_cycles as usize);
    for k in 2..=p.lifetime_cycles {
        let mut s = p.clean_soh(k);
        if let (Some(dist), true) = (&noise, k > 2) {
            let bound = 3.0 * p.noise_sd;
            s += dist.sample(&mut rng).clamp(-bound, bound);
        }
        let capacity = reference * s.max(1e-3);
        // Use the ratio exactly as ingestion will recompute it.
        let soh = capacity / reference;
        let resistance = p.initial_resistance * (1.0 / soh).powf(p.gamma);
        let (v, i, t) = synth_series(p, soh, resistance, &mut rng);
        let series = canonicalize_series(&v, &i, &t, p.t_max)?;
        let real_current: Vec<f64> = series.real().1.iter().map(|&c| c as f64).collect();
        cycles.push(CycleRecord {
            cycle_index: k,
            mean_charge_current: mean_charge_current(&real_current),
            series,
            discharge_capacity: capacity,
            internal_resistance: resistance,
        });
    }
    CellRecord::new(p.cell_id.clone(), p.batch_id, cycles)
}

/// Ranges from which fleet cells are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetRanges {
    pub lifetime: (u32, u32),
    pub knee_fraction: (f64, f64),
    /// SOH reached at the knee.
    pub knee_soh: (f64, f64),
    /// SOH at the last generated cycle.
    pub end_soh: (f64, f64),
    pub charge_current: (f64, f64),
    pub initial_resistance: (f64, f64),
    pub gamma: f64,
    pub noise_sd: f64,
    pub nominal_capacity: f64,
    pub samples_per_cycle: usize,
    pub t_max: usize,
}

impl Default for FleetRanges {
    fn default() -> Self {
        FleetRanges {
            lifetime: (150, 600),
            knee_fraction: (0.55, 0.8),
            knee_soh: (0.94, 0.965),
            end_soh: (0.78, 0.84),
            charge_current: (3.3, 6.6),
            initial_resistance: (0.016, 0.020),
            gamma: 0.75,
            noise_sd: 0.001,
            nominal_capacity: 1.1,
            samples_per_cycle: 200,
            t_max: DEFAULT_T_MAX,
        }
    }
}

/// Temperature offset of each synthetic manufacturing batch, °C.
fn batch_temperature_offset(batch: u8) -> f64 {
    match batch {
        1 => 0.0,
        2 => 0.8,
        _ => -0.6,
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Parameters for every fleet cell. Faster charging shortens life; batch ids
/// cycle through 1, 2, 3.
pub fn fleet_params(n_cells: usize, ranges: &FleetRanges, seed: u64) -> Result<Vec<SynthCellParams>> {
    if n_cells == 0 {
        return Err(Error::Config("fleet needs at least one cell".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_cells);
    for idx in 0..n_cells {
        let batch_id = (idx % 3 + 1) as u8;
        let current = draw(&mut rng, ranges.charge_current);
        let (c_lo, c_hi) = ranges.charge_current;
        let stress = if c_hi > c_lo { (current - c_lo) / (c_hi - c_lo) } else { 0.5 };
        let (l_lo, l_hi) = (ranges.lifetime.0 as f64, ranges.lifetime.1 as f64);
        let jitter = draw(&mut rng, (-0.1, 0.1)) * (l_hi - l_lo);
        let lifetime = (l_hi - stress * (l_hi - l_lo) + jitter).clamp(l_lo, l_hi).round() as u32;
        let knee_fraction = draw(&mut rng, ranges.knee_fraction);
        let knee_soh = draw(&mut rng, ranges.knee_soh);
        let end_soh = draw(&mut rng, ranges.end_soh).min(knee_soh - 0.01);
        let mut p = SynthCellParams {
            cell_id: format!("cell{idx:03}"),
            batch_id,
            lifetime_cycles: lifetime,
            knee_fraction,
            base_fade_rate: 0.0,
            knee_fade_rate: 0.0,
            gamma: ranges.gamma,
            charge_current: current,
            noise_sd: ranges.noise_sd,
            seed: rng.gen(),
            initial_resistance: draw(&mut rng, ranges.initial_resistance),
            nominal_capacity: ranges.nominal_capacity,
            samples_per_cycle: ranges.samples_per_cycle,
            t_max: ranges.t_max,
            temperature_offset: batch_temperature_offset(batch_id),
        };
        let knee = p.knee_cycle();
        p.base_fade_rate = (1.0 - knee_soh) / (knee.saturating_sub(2).max(1)) as f64;
        p.knee_fade_rate = ((knee_soh - end_soh) / (lifetime.saturating_sub(knee).max(1)) as f64)
            .max(p.base_fade_rate * 1.5);
        out.push(p);
    }
    Ok(out)
}

/// Generate a whole fleet; deterministic for a fixed seed.
pub fn generate_fleet(n_cells: usize, ranges: &FleetRanges, seed: u64) -> Result<Vec<CellRecord>> {
    let params = fleet_params(n_cells, ranges, seed)?;
    map_items(Parallelism::default(), &params, generate_cell).into_iter().collect()
}
