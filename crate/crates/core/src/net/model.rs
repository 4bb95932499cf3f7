//! Complete networks for each architecture and their batched passes.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::NetConfig;
use super::cycle_encoder::{CycleEncoder, CycleEncoderCache, EncoderStats};
use super::dynamics::{Dynamics, StepCache};
use super::layers::{ChannelStats, Mlp, MlpCache};
use super::lstm::{summary_features, Lstm, LstmCache, SUMMARY_FEATURES};
use super::params::{Grads, ParamStore};
use super::window_encoder::{WindowEncoder, WindowEncoderCache};
use crate::data::{CellRecord, CycleSeries, Window};
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::parallel::{map_chunks, map_items, Parallelism};

const CYCLE_CHUNK: usize = 32;
const WINDOW_CHUNK: usize = 4;

/// Network family. The direct-regression and LSTM families have no
/// `dynamics/` parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Encoder + residual rollout + shared head.
    WorldModel,
    /// Encoder + shared head for current SOH + MLP regressing all `H` values.
    Direct,
    /// Summary-feature LSTM; current SOH only.
    Lstm,
}

impl Architecture {
    pub fn has_trajectory(self) -> bool {
        !matches!(self, Architecture::Lstm)
    }
}

/// Latent degradation state `z(k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState(pub Vec<f64>);

/// Operating condition driving the transition: mean charge current divided
/// by [`NetConfig::action_scale`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionVector(pub f64);

impl ActionVector {
    pub fn from_current(amps: f64, cfg: &NetConfig) -> Self {
        ActionVector(amps / cfg.action_scale)
    }
}

/// Model outputs for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowOutput {
    pub soh_now: f64,
    /// `H` future values; `None` for the LSTM.
    pub soh_future: Option<Vec<f64>>,
    /// `z(k)`; `None` for the LSTM.
    pub latent: Option<Vec<f64>>,
}

/// Loss gradient with respect to a window's outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputGrad {
    pub d_now: f64,
    pub d_future: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Trajectory {
    Rollout(Dynamics),
    Direct(Mlp),
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum Network {
    Latent {
        cycle: CycleEncoder,
        window: WindowEncoder,
        head: Mlp,
        trajectory: Trajectory,
    },
    Lstm {
        lstm: Lstm,
        head: Mlp,
    },
}

enum TrajectoryCache {
    Rollout(Vec<StepCache>),
    Direct(MlpCache),
}

/// Summed gradients and loss over a batch, plus normalisation statistics.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub grads: Grads,
    pub loss: LossBreakdown,
    pub stats: Option<EncoderStats>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: NetConfig,
    architecture: Architecture,
    pub params: ParamStore,
    network: Network,
}

impl Model {
    /// Build and initialise a model. Construction order is fixed, so two
    /// architectures built from the same seed share identical encoder and
    /// head weights.
    pub fn new(config: &NetConfig, architecture: Architecture, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let network = match architecture {
            Architecture::WorldModel | Architecture::Direct => {
                let cycle = CycleEncoder::new(&mut params, &mut rng, config);
                let window = WindowEncoder::new(&mut params, &mut rng, config);
                let head = Mlp::new(&mut params, &mut rng, "head", (d, config.mlp_hidden, 1));
                let trajectory = if architecture == Architecture::WorldModel {
                    Trajectory::Rollout(Dynamics::new(&mut params, &mut rng, d, config.mlp_hidden))
                } else {
                    Trajectory::Direct(Mlp::new(
                        &mut params,
                        &mut rng,
                        "direct_head",
                        (d, config.mlp_hidden, config.horizon),
                    ))
                };
                Network::Latent {
                    cycle,
                    window,
                    head,
                    trajectory,
                }
            }
            Architecture::Lstm => {
                let lstm = Lstm::new(
                    &mut params,
                    &mut rng,
                    SUMMARY_FEATURES,
                    config.lstm_hidden,
                    config.lstm_layers,
                );
                let head = Mlp::new(
                    &mut params,
                    &mut rng,
                    "lstm_head",
                    (config.lstm_hidden, config.lstm_hidden, 1),
                );
                Network::Lstm { lstm, head }
            }
        };
        Ok(Model {
            config: config.clone(),
            architecture,
            params,
            network,
        })
    }

    /// Rebuild a model around existing parameters, checking that paths,
    /// shapes and kinds match the census for `config`.
    pub fn from_params(config: &NetConfig, architecture: Architecture, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, architecture, 0)?;
        let expected: Vec<_> = model.params.iter().map(|p| (&p.path, &p.shape, p.kind)).collect();
        let got: Vec<_> = params.iter().map(|p| (&p.path, &p.shape, p.kind)).collect();
        if expected != got {
            let missing: Vec<&str> = expected
                .iter()
                .filter(|e| !got.contains(e))
                .map(|e| e.0.as_str())
                .take(5)
                .collect();
            return Err(Error::PathMismatch(format!(
                "parameter census differs from the {architecture:?} layout (e.g. {missing:?})"
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn cycle_encoder(&self) -> Option<&CycleEncoder> {
        match &self.network {
            Network::Latent { cycle, .. } => Some(cycle),
            Network::Lstm { .. } => None,
        }
    }

    pub fn window_encoder(&self) -> Option<&WindowEncoder> {
        match &self.network {
            Network::Latent { window, .. } => Some(window),
            Network::Lstm { .. } => None,
        }
    }

    /// The shared SOH decoder (the LSTM's own head for that family).
    pub fn head(&self) -> &Mlp {
        match &self.network {
            Network::Latent { head, .. } | Network::Lstm { head, .. } => head,
        }
    }

    pub fn dynamics(&self) -> Option<&Dynamics> {
        match &self.network {
            Network::Latent {
                trajectory: Trajectory::Rollout(d),
                ..
            } => Some(d),
            _ => None,
        }
    }

    pub fn direct_head(&self) -> Option<&Mlp> {
        match &self.network {
            Network::Latent {
                trajectory: Trajectory::Direct(m),
                ..
            } => Some(m),
            _ => None,
        }
    }

    pub fn lstm(&self) -> Option<&Lstm> {
        match &self.network {
            Network::Lstm { lstm, .. } => Some(lstm),
            Network::Latent { .. } => None,
        }
    }

    fn unsupported(&self, what: &str) -> Error {
        Error::Unsupported(format!("{what} is not available for the {:?} architecture", self.architecture))
    }

    fn latent_parts(&self) -> Result<(&CycleEncoder, &WindowEncoder, &Mlp, &Trajectory)> {
        match &self.network {
            Network::Latent {
                cycle,
                window,
                head,
                trajectory,
            } => Ok((cycle, window, head, trajectory)),
            Network::Lstm { .. } => Err(self.unsupported("the latent encoder")),
        }
    }

    fn check_series(&self, s: &CycleSeries) -> Result<()> {
        if s.t_max() != self.config.t_max {
            return Err(Error::Shape(format!(
                "cycle series has {} samples, model expects t_max = {}",
                s.t_max(),
                self.config.t_max
            )));
        }
        Ok(())
    }

    /// Cycle embedding `e(k)` of length `d`.
    pub fn encode_cycle(&self, series: &CycleSeries) -> Result<Vec<f64>> {
        let (cycle, ..) = self.latent_parts()?;
        self.check_series(series)?;
        Ok(cycle.encode(&self.params, series))
    }

    /// Embeddings for many cycles, order preserving.
    pub fn encode_cycles(&self, series: &[&CycleSeries], par: Parallelism) -> Result<Vec<Vec<f64>>> {
        let (cycle, ..) = self.latent_parts()?;
        for s in series {
            self.check_series(s)?;
        }
        let d = self.config.d_model;
        let chunks = map_chunks(par, series, CYCLE_CHUNK, |chunk| {
            cycle.forward(&self.params, &cycle.input_tensor(chunk), chunk.len())
        });
        Ok(chunks.iter().flat_map(|c| c.chunks_exact(d).map(<[f64]>::to_vec)).collect())
    }

    /// Latent state from exactly `W` cycle embeddings.
    pub fn encode_window(&self, embeddings: &[Vec<f64>]) -> Result<LatentState> {
        let (_, window, ..) = self.latent_parts()?;
        let d = self.config.d_model;
        if embeddings.len() != self.config.window || embeddings.iter().any(|e| e.len() != d) {
            return Err(Error::Shape(format!(
                "expected {} embeddings of width {d}",
                self.config.window
            )));
        }
        let flat: Vec<f64> = embeddings.concat();
        Ok(LatentState(window.forward(&self.params, &flat).0))
    }

    pub fn transition(&self, z: &LatentState, u: ActionVector) -> Result<LatentState> {
        let dynamics = self.dynamics().ok_or_else(|| self.unsupported("the latent transition"))?;
        self.check_latent(z)?;
        Ok(LatentState(dynamics.step(&self.params, &z.0, u.0).0))
    }

    pub fn rollout(&self, z0: &LatentState, u: ActionVector, steps: usize) -> Result<Vec<LatentState>> {
        let dynamics = self.dynamics().ok_or_else(|| self.unsupported("rollout"))?;
        self.check_latent(z0)?;
        Ok(dynamics
            .rollout(&self.params, &z0.0, u.0, steps)
            .into_iter()
            .map(LatentState)
            .collect())
    }

    pub fn decode_soh(&self, z: &LatentState) -> Result<f64> {
        let (_, _, head, _) = self.latent_parts()?;
        self.check_latent(z)?;
        Ok(head.forward(&self.params, &z.0, 1)[0])
    }

    fn check_latent(&self, z: &LatentState) -> Result<()> {
        if z.0.len() != self.config.d_model {
            return Err(Error::Shape(format!(
                "latent has {} entries, expected {}",
                z.0.len(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    fn check_window(&self, w: &Window, cells: &[CellRecord]) -> Result<()> {
        if w.width != self.config.window {
            return Err(Error::Shape(format!(
                "window spans {} cycles, model expects {}",
                w.width, self.config.window
            )));
        }
        if self.architecture.has_trajectory() && w.horizon() != self.config.horizon {
            return Err(Error::Shape(format!(
                "window horizon {} differs from model horizon {}",
                w.horizon(),
                self.config.horizon
            )));
        }
        if w.cell_index >= cells.len() || w.start + w.width > cells[w.cell_index].cycles.len() {
            return Err(Error::InvalidInput(format!("window of cell {} is out of range", w.cell_id)));
        }
        Ok(())
    }

    /// Eval-mode outputs for one window.
    pub fn forward_window(&self, cells: &[CellRecord], window: &Window) -> Result<WindowOutput> {
        Ok(self.predict(cells, &[window], Parallelism::Sequential)?.remove(0))
    }

    /// `(ŝ(k), ŝ(k+1..k+H))`; the LSTM cannot produce a trajectory.
    pub fn forward_trajectory(&self, cells: &[CellRecord], window: &Window) -> Result<(f64, Vec<f64>)> {
        if !self.architecture.has_trajectory() {
            return Err(self.unsupported("a multi-step trajectory"));
        }
        let out = self.forward_window(cells, window)?;
        Ok((out.soh_now, out.soh_future.expect("trajectory architecture")))
    }

    fn lstm_inputs(&self, cells: &[CellRecord], w: &Window) -> Vec<Vec<f64>> {
        w.input_cycles(cells)
            .iter()
            .map(|c| summary_features(&c.series, self.config.action_scale).to_vec())
            .collect()
    }

    /// Unique `(cell, position)` input cycles in first-appearance order and
    /// each window's slot list.
    fn unique_cycles(windows: &[&Window]) -> (Vec<(usize, usize)>, Vec<Vec<usize>>) {
        let mut slot_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut uniq = Vec::new();
        let slots = windows
            .iter()
            .map(|w| {
                (w.start..w.start + w.width)
                    .map(|pos| {
                        *slot_of.entry((w.cell_index, pos)).or_insert_with(|| {
                            uniq.push((w.cell_index, pos));
                            uniq.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();
        (uniq, slots)
    }

    fn gather(emb: &[f64], slots: &[usize], d: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(slots.len() * d);
        for &s in slots {
            out.extend_from_slice(&emb[s * d..(s + 1) * d]);
        }
        out
    }

    /// Eval-mode outputs for many windows. Each distinct input cycle is
    /// encoded once.
    pub fn predict(&self, cells: &[CellRecord], windows: &[&Window], par: Parallelism) -> Result<Vec<WindowOutput>> {
        for w in windows {
            self.check_window(w, cells)?;
        }
        match &self.network {
            Network::Lstm { lstm, head } => Ok(map_items(par, windows, |w| {
                let (h, _) = lstm.forward(&self.params, &self.lstm_inputs(cells, w));
                WindowOutput {
                    soh_now: head.forward(&self.params, &h, 1)[0],
                    soh_future: None,
                    latent: None,
                }
            })),
            Network::Latent {
                cycle,
                window,
                head,
                trajectory,
            } => {
                let d = self.config.d_model;
                let (uniq, slots) = Self::unique_cycles(windows);
                let series: Vec<&CycleSeries> = uniq.iter().map(|&(c, p)| &cells[c].cycles[p].series).collect();
                let emb: Vec<f64> = map_chunks(par, &series, CYCLE_CHUNK, |chunk| {
                    cycle.forward(&self.params, &cycle.input_tensor(chunk), chunk.len())
                })
                .concat();
                let jobs: Vec<(&Window, &Vec<usize>)> = windows.iter().copied().zip(&slots).collect();
                Ok(map_items(par, &jobs, |(w, s)| {
                    let (z, _) = window.forward(&self.params, &Self::gather(&emb, s, d));
                    let u = ActionVector::from_current(w.action, &self.config).0;
                    let (now, future) = match trajectory {
                        Trajectory::Rollout(dynamics) => {
                            let mut rows = z.clone();
                            for state in dynamics.rollout(&self.params, &z, u, self.config.horizon) {
                                rows.extend(state);
                            }
                            let out = head.forward(&self.params, &rows, self.config.horizon + 1);
                            (out[0], out[1..].to_vec())
                        }
                        Trajectory::Direct(direct) => (
                            head.forward(&self.params, &z, 1)[0],
                            direct.forward(&self.params, &z, 1),
                        ),
                    };
                    WindowOutput {
                        soh_now: now,
                        soh_future: Some(future),
                        latent: Some(z),
                    }
                }))
            }
        }
    }

    /// Latent states `z(k)` for each window.
    pub fn latents(&self, cells: &[CellRecord], windows: &[&Window], par: Parallelism) -> Result<Vec<LatentState>> {
        if !self.architecture.has_trajectory() {
            return Err(self.unsupported("latent extraction"));
        }
        Ok(self
            .predict(cells, windows, par)?
            .into_iter()
            .map(|o| LatentState(o.latent.expect("latent architecture")))
            .collect())
    }

    /// Training-mode pass over a batch: summed loss and parameter gradients
    /// under `loss_fn`, which maps each window's outputs to its loss and
    /// output gradient. The result does not depend on `par`.
    pub fn batch_gradients<F>(
        &self,
        cells: &[CellRecord],
        windows: &[&Window],
        par: Parallelism,
        loss_fn: &F,
    ) -> Result<BatchGradients>
    where
        F: Fn(&Window, &WindowOutput) -> Result<(LossBreakdown, OutputGrad)> + Sync,
    {
        for w in windows {
            self.check_window(w, cells)?;
        }
        match &self.network {
            Network::Lstm { lstm, head } => {
                let parts = map_chunks(par, windows, WINDOW_CHUNK, |chunk| {
                    let mut grads = Grads::zeros(&self.params);
                    let mut loss = LossBreakdown::default();
                    for w in chunk {
                        let (h, lcache): (Vec<f64>, LstmCache) = lstm.forward(&self.params, &self.lstm_inputs(cells, w));
                        let (out, hcache) = head.forward_cached(&self.params, &h, 1);
                        let output = WindowOutput {
                            soh_now: out[0],
                            soh_future: None,
                            latent: None,
                        };
                        let (l, g) = loss_fn(w, &output)?;
                        loss += l;
                        let dh = head.backward(&self.params, &hcache, &[g.d_now], &mut grads);
                        lstm.backward(&self.params, &lcache, &dh, &mut grads);
                    }
                    Ok((grads, loss))
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                let mut loss = LossBreakdown::default();
                for (_, l) in &parts {
                    loss += *l;
                }
                Ok(BatchGradients {
                    grads: Grads::sum(&self.params, parts.iter().map(|p| &p.0)),
                    loss,
                    stats: None,
                })
            }
            Network::Latent {
                cycle,
                window,
                head,
                trajectory,
            } => {
                let d = self.config.d_model;
                let horizon = self.config.horizon;
                let (uniq, slots) = Self::unique_cycles(windows);
                let series: Vec<&CycleSeries> = uniq.iter().map(|&(c, p)| &cells[c].cycles[p].series).collect();
                let encoded: Vec<(Vec<f64>, CycleEncoderCache, EncoderStats)> =
                    map_chunks(par, &series, CYCLE_CHUNK, |chunk| {
                        cycle.forward_train(&self.params, &cycle.input_tensor(chunk), chunk.len())
                    });
                let emb: Vec<f64> = encoded.iter().flat_map(|e| e.0.iter().copied()).collect();

                let jobs: Vec<(&Window, &Vec<usize>)> = windows.iter().copied().zip(&slots).collect();
                let window_parts = map_chunks(par, &jobs, WINDOW_CHUNK, |chunk| {
                    let mut grads = Grads::zeros(&self.params);
                    let mut loss = LossBreakdown::default();
                    let mut d_embs = Vec::with_capacity(chunk.len());
                    for &(w, s) in chunk {
                        let (z, wcache): (Vec<f64>, WindowEncoderCache) =
                            window.forward(&self.params, &Self::gather(&emb, s, d));
                        let u = ActionVector::from_current(w.action, &self.config).0;
                        let (now, future, hcache, tcache) = match trajectory {
                            Trajectory::Rollout(dynamics) => {
                                let (states, steps) = dynamics.rollout_cached(&self.params, &z, u, horizon);
                                let mut rows = z.clone();
                                for st in &states {
                                    rows.extend_from_slice(st);
                                }
                                let (out, hc) = head.forward_cached(&self.params, &rows, horizon + 1);
                                (out[0], out[1..].to_vec(), hc, TrajectoryCache::Rollout(steps))
                            }
                            Trajectory::Direct(direct) => {
                                let (out, hc) = head.forward_cached(&self.params, &z, 1);
                                let (fut, dc) = direct.forward_cached(&self.params, &z, 1);
                                (out[0], fut, hc, TrajectoryCache::Direct(dc))
                            }
                        };
                        let output = WindowOutput {
                            soh_now: now,
                            soh_future: Some(future),
                            latent: Some(z),
                        };
                        let (l, g) = loss_fn(w, &output)?;
                        loss += l;
                        let mut d_future = g.d_future;
                        d_future.resize(horizon, 0.0);
                        let dz = match tcache {
                            TrajectoryCache::Rollout(steps) => {
                                let mut d_out = Vec::with_capacity(horizon + 1);
                                d_out.push(g.d_now);
                                d_out.extend_from_slice(&d_future);
                                let d_rows = head.backward(&self.params, &hcache, &d_out, &mut grads);
                                let d_states: Vec<Vec<f64>> = d_rows[d..].chunks_exact(d).map(<[f64]>::to_vec).collect();
                                let dyn_ = match trajectory {
                                    Trajectory::Rollout(dy) => dy,
                                    Trajectory::Direct(_) => unreachable!(),
                                };
                                let mut dz = dyn_.rollout_backward(&self.params, &steps, &d_states, &mut grads);
                                for (a, b) in dz.iter_mut().zip(&d_rows[..d]) {
                                    *a += b;
                                }
                                dz
                            }
                            TrajectoryCache::Direct(dc) => {
                                let mut dz = head.backward(&self.params, &hcache, &[g.d_now], &mut grads);
                                let direct = match trajectory {
                                    Trajectory::Direct(m) => m,
                                    Trajectory::Rollout(_) => unreachable!(),
                                };
                                let dz2 = direct.backward(&self.params, &dc, &d_future, &mut grads);
                                for (a, b) in dz.iter_mut().zip(&dz2) {
                                    *a += b;
                                }
                                dz
                            }
                        };
                        d_embs.push(window.backward(&self.params, &wcache, &dz, &mut grads));
                    }
                    Ok((grads, loss, d_embs))
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;

                let mut d_uniq = vec![0.0; uniq.len() * d];
                let mut loss = LossBreakdown::default();
                let mut jobs_iter = jobs.iter();
                for (_, l, d_embs) in &window_parts {
                    loss += *l;
                    for de in d_embs {
                        let (_, s) = jobs_iter.next().expect("one gradient per window");
                        for (row, &slot) in de.chunks_exact(d).zip(s.iter()) {
                            for (a, b) in d_uniq[slot * d..(slot + 1) * d].iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                    }
                }

                let cnn_jobs: Vec<(usize, &CycleEncoderCache)> = {
                    let mut offset = 0;
                    encoded
                        .iter()
                        .map(|(e, c, _)| {
                            let o = offset;
                            offset += e.len() / d;
                            (o, c)
                        })
                        .collect()
                };
                let cnn_grads = map_items(par, &cnn_jobs, |&(offset, cache)| {
                    let mut grads = Grads::zeros(&self.params);
                    let rows = cache_rows(cache);
                    cycle.backward(&self.params, cache, &d_uniq[offset * d..(offset + rows) * d], &mut grads);
                    grads
                });

                let mut stats: EncoderStats = Default::default();
                for (_, _, s) in &encoded {
                    for (acc, part) in stats.iter_mut().zip(s) {
                        acc.merge(part);
                    }
                }
                let grads = Grads::sum(
                    &self.params,
                    window_parts.iter().map(|p| &p.0).chain(cnn_grads.iter()),
                );
                Ok(BatchGradients {
                    grads,
                    loss,
                    stats: Some(stats),
                })
            }
        }
    }

    /// Fold encoder statistics from a training batch into the running buffers.
    pub fn update_norm_stats(&mut self, stats: &[ChannelStats; 3]) {
        if let Network::Latent { cycle, .. } = &self.network {
            cycle.update_running(&mut self.params, stats);
        }
    }
}

fn cache_rows(cache: &CycleEncoderCache) -> usize {
    cache.batch()
}
