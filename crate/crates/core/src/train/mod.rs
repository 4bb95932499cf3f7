//! Training loops: joint training over all cells and the batch-staged
//! protocol with Fisher capture and an EWC anchor between phases.

mod optim;
mod sweep;

pub use optim::{best_index, clip_gradients, early_stop_check, Adam, StopDecision};
pub use sweep::{sweep_horizons, SweepRow};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_all_windows, inverse_frequency_weights, CellRecord, SplitAssignment, Window};
use crate::error::{Error, Result};
use crate::eval::validation_mae;
use crate::loss::{
    estimate_fisher, ewc_gradient, ewc_penalty, window_objective, FisherDiagonal, LossBreakdown, LossFlags,
    LossWeights,
};
use crate::net::{Model, NetConfig, ParamStore, Variant};
use crate::parallel::Parallelism;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub grad_clip_norm: f64,
    /// Fisher is captured after this many epochs of a phase (0 = before the
    /// first update). A phase that ends earlier captures from its best
    /// parameters instead.
    pub fisher_epoch: usize,
    /// Upper bound on the number of mini-batches used for Fisher estimation.
    pub fisher_batches: usize,
    pub seed: u64,
    pub variant: Variant,
    pub loss: LossWeights,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 15,
            grad_clip_norm: 1.0,
            fisher_epoch: 10,
            fisher_batches: 64,
            seed: 0,
            variant: Variant::Piwm,
            loss: LossWeights::default(),
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience ({}) must be below max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.fisher_epoch >= self.max_epochs {
            return Err(Error::Config(format!(
                "fisher_epoch ({}) must be below max_epochs ({})",
                self.fisher_epoch, self.max_epochs
            )));
        }
        if self.batch_size == 0 || self.fisher_batches == 0 {
            return Err(Error::Config("batch_size and fisher_batches must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning_rate and grad_clip_norm must be positive, weight_decay nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn flags(&self) -> LossFlags {
        self.variant.into()
    }
}

/// Cells plus the training and validation windows built from them.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub cells: &'a [CellRecord],
    pub train: Vec<Window>,
    pub val: Vec<Window>,
}

impl<'a> TrainData<'a> {
    pub fn from_split(cells: &'a [CellRecord], split: &SplitAssignment, net: &NetConfig) -> Self {
        let (train, val, _) = split.indices(cells);
        TrainData {
            cells,
            train: build_all_windows(cells, &train, net.window, net.horizon),
            val: build_all_windows(cells, &val, net.window, net.horizon),
        }
    }
}

/// Epoch means of the training objective and related diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based within its phase.
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_mae: f64,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    /// Largest gradient norm actually applied (after clipping).
    pub applied_norm_max: f64,
    /// Epoch-mean `L_EWC / L_data`; zero when EWC is inactive.
    pub ewc_ratio: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseHistory {
    /// Manufacturing batch trained in this phase; `None` for joint training.
    pub batch_id: Option<u8>,
    pub skipped: bool,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub end_val_mae: f64,
    pub ewc_active: bool,
    /// Epoch after which Fisher was captured; `None` when captured from the
    /// restored best parameters at the end of the phase.
    pub fisher_epoch: Option<usize>,
    pub fisher_total: Option<f64>,
    /// Batch ids of every window that contributed a gradient.
    pub sampled_batch_ids: BTreeSet<u8>,
}

impl PhaseHistory {
    fn empty(batch_id: Option<u8>) -> Self {
        PhaseHistory {
            batch_id,
            skipped: false,
            epochs: Vec::new(),
            best_epoch: 0,
            stopped_early: false,
            end_val_mae: f64::NAN,
            ewc_active: false,
            fisher_epoch: None,
            fisher_total: None,
            sampled_batch_ids: BTreeSet::new(),
        }
    }

    /// Mean EWC/data ratio over the phase's epochs.
    pub fn mean_ewc_ratio(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.ewc_ratio).sum::<f64>() / self.epochs.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub variant: Variant,
    pub phases: Vec<PhaseHistory>,
    pub wall_seconds: f64,
}

impl TrainHistory {
    /// Copy with every timing field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.wall_seconds = 0.0;
        for p in &mut h.phases {
            for e in &mut p.epochs {
                e.seconds = 0.0;
            }
        }
        h
    }

    /// Per-epoch log with one row per (phase, epoch).
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "phase\tbatch_id\tepoch\tloss_total\tloss_data\tloss_phys\tloss_ewc\tval_mae\tgrad_norm\tapplied_norm_max\tewc_ratio\tseconds\n",
        );
        for (i, p) in self.phases.iter().enumerate() {
            let batch = p.batch_id.map_or_else(|| "all".to_string(), |b| b.to_string());
            for e in &p.epochs {
                let _ = writeln!(
                    s,
                    "{}\t{batch}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
                    i + 1,
                    e.epoch,
                    e.train.total,
                    e.train.data,
                    e.train.phys,
                    e.train.ewc,
                    e.val_mae,
                    e.grad_norm,
                    e.applied_norm_max,
                    e.ewc_ratio,
                    e.seconds
                );
            }
        }
        s
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
    /// Most recent Fisher capture (batch-staged runs only).
    pub fisher: Option<FisherDiagonal>,
}

/// Train the configured variant with its protocol: batch-staged for the
/// EWC variant, joint otherwise.
pub fn train(data: &TrainData, net: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.variant.batch_staged() {
        train_batch_staged(data, net, cfg)
    } else {
        train_joint(data, net, cfg)
    }
}

pub fn train_joint(data: &TrainData, net: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    let started = Instant::now();
    let mut model = Model::new(net, cfg.variant.architecture(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a4d_504c_4552);
    let train_refs: Vec<&Window> = data.train.iter().collect();
    let mut phase = Phase {
        data,
        cfg,
        windows: &train_refs,
        anchor: None,
        capture_fisher: false,
    };
    let (history, _) = phase.run(&mut model, &mut rng, None)?;
    Ok(TrainOutcome {
        model,
        history: TrainHistory {
            variant: cfg.variant,
            phases: vec![history],
            wall_seconds: started.elapsed().as_secs_f64(),
        },
        fisher: None,
    })
}

/// Phases follow ascending batch id over the batches present in the
/// training cells.
pub fn train_batch_staged(data: &TrainData, net: &NetConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    let started = Instant::now();
    let mut model = Model::new(net, cfg.variant.architecture(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a4d_504c_4552);
    let batches: BTreeSet<u8> = data.cells.iter().map(|c| c.batch_id).collect();
    let mut phases = Vec::new();
    let mut anchor: Option<FisherDiagonal> = None;
    for b in batches {
        let windows: Vec<&Window> = data
            .train
            .iter()
            .filter(|w| data.cells[w.cell_index].batch_id == b)
            .collect();
        if windows.is_empty() {
            tracing::warn!(batch = b, "no training windows for batch; phase skipped");
            let mut h = PhaseHistory::empty(Some(b));
            h.skipped = true;
            phases.push(h);
            continue;
        }
        let mut phase = Phase {
            data,
            cfg,
            windows: &windows,
            anchor: if cfg.variant.ewc() { anchor.as_ref() } else { None },
            capture_fisher: true,
        };
        let (h, fisher) = phase.run(&mut model, &mut rng, Some(b))?;
        tracing::info!(batch = b, epochs = h.epochs.len(), val_mae = h.end_val_mae, "phase finished");
        phases.push(h);
        if fisher.is_some() {
            anchor = fisher;
        }
    }
    Ok(TrainOutcome {
        model,
        history: TrainHistory {
            variant: cfg.variant,
            phases,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
        fisher: anchor,
    })
}

struct Phase<'a, 'd> {
    data: &'a TrainData<'d>,
    cfg: &'a TrainConfig,
    windows: &'a [&'a Window],
    anchor: Option<&'a FisherDiagonal>,
    capture_fisher: bool,
}

impl Phase<'_, '_> {
    fn run(&mut self, model: &mut Model, rng: &mut ChaCha8Rng, batch_id: Option<u8>) -> Result<(PhaseHistory, Option<FisherDiagonal>)> {
        let cfg = self.cfg;
        let par = cfg.parallelism;
        let flags = cfg.flags();
        let cells = self.data.cells;
        let val_refs: Vec<&Window> = self.data.val.iter().collect();
        let owned: Vec<Window> = self.windows.iter().map(|w| (*w).clone()).collect();
        let weights = inverse_frequency_weights(&owned);
        let sampler = WeightedIndex::new(&weights).map_err(|e| Error::InvalidInput(format!("sampling weights: {e}")))?;
        let per_epoch = self.windows.len().div_ceil(cfg.batch_size);

        let mut opt = Adam::new(&model.params, cfg.learning_rate, cfg.weight_decay);
        let mut hist = PhaseHistory::empty(batch_id);
        hist.ewc_active = self.anchor.is_some() && flags.ewc;
        let mut fisher = None;
        if self.capture_fisher && cfg.fisher_epoch == 0 {
            fisher = Some(self.fisher(model, rng)?);
            hist.fisher_epoch = Some(0);
        }
        let mut val_history = Vec::new();
        let mut best_params: Option<ParamStore> = None;

        for epoch in 1..=cfg.max_epochs {
            let t0 = Instant::now();
            let mut sum = LossBreakdown::default();
            let mut norm_sum = 0.0;
            let mut applied_max: f64 = 0.0;
            let mut ratio_num = 0.0;
            let mut ratio_den = 0.0;
            for _ in 0..per_epoch {
                let batch: Vec<&Window> = (0..cfg.batch_size).map(|_| self.windows[sampler.sample(rng)]).collect();
                for w in &batch {
                    hist.sampled_batch_ids.insert(cells[w.cell_index].batch_id);
                }
                let weights = cfg.loss;
                let out = model.batch_gradients(cells, &batch, par, &|w, o| window_objective(w, o, &weights, flags))?;
                let inv = 1.0 / batch.len() as f64;
                let mut grads = out.grads;
                grads.scale(inv);
                let mut loss = out.loss.scaled(inv);
                if let (true, Some(anchor)) = (flags.ewc, self.anchor) {
                    let pen = ewc_penalty(&model.params, anchor)?;
                    let mut g = ewc_gradient(&model.params, anchor)?;
                    g.scale(cfg.loss.lambda_ewc);
                    grads.add_assign(&g);
                    loss.ewc = pen;
                    loss.total += cfg.loss.lambda_ewc * pen;
                }
                let norm = clip_gradients(&mut grads, cfg.grad_clip_norm);
                norm_sum += norm;
                applied_max = applied_max.max(grads.norm());
                opt.step(&mut model.params, &grads);
                if let Some(stats) = &out.stats {
                    model.update_norm_stats(stats);
                }
                ratio_num += loss.ewc;
                ratio_den += loss.data;
                sum += loss;
            }
            let val = if val_refs.is_empty() {
                // Without validation data the last epoch is taken as best.
                -(epoch as f64)
            } else {
                validation_mae(model, cells, &val_refs, par)?
            };
            val_history.push(val);
            let n = per_epoch as f64;
            hist.epochs.push(EpochRecord {
                epoch,
                train: sum.scaled(1.0 / n),
                val_mae: if val_refs.is_empty() { f64::NAN } else { val },
                grad_norm: norm_sum / n,
                applied_norm_max: applied_max,
                ewc_ratio: if ratio_den > 0.0 { ratio_num / ratio_den } else { 0.0 },
                seconds: t0.elapsed().as_secs_f64(),
            });
            tracing::debug!(epoch, loss = sum.total / n, val, "epoch");
            if best_index(&val_history) == Some(epoch - 1) {
                best_params = Some(model.params.clone());
            }
            if self.capture_fisher && epoch == cfg.fisher_epoch {
                fisher = Some(self.fisher(model, rng)?);
                hist.fisher_epoch = Some(epoch);
            }
            if early_stop_check(&val_history, cfg.patience) == StopDecision::Stop && epoch < cfg.max_epochs {
                hist.stopped_early = true;
                break;
            }
        }
        let best = best_index(&val_history).expect("at least one epoch");
        hist.best_epoch = best + 1;
        if let Some(p) = best_params {
            model.params = p;
        }
        hist.end_val_mae = hist.epochs[best].val_mae;
        if self.capture_fisher && fisher.is_none() {
            fisher = Some(self.fisher(model, rng)?);
        }
        hist.fisher_total = fisher.as_ref().map(FisherDiagonal::total);
        Ok((hist, fisher))
    }

    /// Mean squared data-loss gradients over up to `fisher_batches`
    /// mini-batches drawn without replacement.
    fn fisher(&self, model: &Model, rng: &mut ChaCha8Rng) -> Result<FisherDiagonal> {
        let cfg = self.cfg;
        let mut order: Vec<&Window> = self.windows.to_vec();
        order.shuffle(rng);
        let batches: Vec<&[&Window]> = order.chunks(cfg.batch_size).take(cfg.fisher_batches).collect();
        let data_only = LossFlags::default();
        let weights = cfg.loss;
        estimate_fisher(&model.params, batches.len(), |b| {
            let out = model.batch_gradients(self.data.cells, batches[b], cfg.parallelism, &|w, o| {
                window_objective(w, o, &weights, data_only)
            })?;
            let mut g = out.grads;
            g.scale(1.0 / batches[b].len() as f64);
            Ok(g)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 100,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            fisher_epoch: 100,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig {
            variant: Variant::PiwmEwc,
            seed: 9,
            ..TrainConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("variant = \"piwm-ewc\""));
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
