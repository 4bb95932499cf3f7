use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_T_MAX;
use crate::error::{Error, Result};

/// Architecture hyperparameters shared by every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Embedding and latent width `d`.
    pub d_model: usize,
    /// Observed cycles per window `W`.
    pub window: usize,
    /// Forecast horizon `H`.
    pub horizon: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    /// Transformer encoder layers.
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub conv_stride: usize,
    /// Canonical per-cycle series length.
    pub t_max: usize,
    /// Hidden width of the dynamics and decoder MLPs.
    pub mlp_hidden: usize,
    /// Charge current (A) mapped to an action value of 1.
    pub action_scale: f64,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_model: 64,
            window: 30,
            horizon: 80,
            patch_len: 6,
            patch_stride: 3,
            layers: 3,
            heads: 4,
            ff_width: 256,
            conv_channels: [32, 64, 128],
            conv_kernels: [7, 5, 3],
            conv_stride: 2,
            t_max: DEFAULT_T_MAX,
            mlp_hidden: 64,
            action_scale: 8.8,
            lstm_hidden: 64,
            lstm_layers: 2,
        }
    }
}

impl NetConfig {
    /// Number of patch tokens; trailing cycles that do not fill a patch are
    /// dropped.
    pub fn n_tokens(&self) -> usize {
        (self.window - self.patch_len) / self.patch_stride + 1
    }

    /// Time length after each convolution.
    pub fn conv_lengths(&self) -> [usize; 4] {
        let mut lens = [self.t_max, 0, 0, 0];
        for i in 0..3 {
            let l = lens[i];
            let k = self.conv_kernels[i];
            lens[i + 1] = if l < k { 0 } else { (l - k) / self.conv_stride + 1 };
        }
        lens
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("d_model", self.d_model),
            ("window", self.window),
            ("horizon", self.horizon),
            ("patch_len", self.patch_len),
            ("patch_stride", self.patch_stride),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("conv_stride", self.conv_stride),
            ("t_max", self.t_max),
            ("mlp_hidden", self.mlp_hidden),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.window < self.patch_len {
            return bad(format!("window {} shorter than patch_len {}", self.window, self.patch_len));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.conv_channels.iter().chain(&self.conv_kernels).any(|&c| c == 0) {
            return bad("conv channels and kernels must be positive".into());
        }
        if self.conv_lengths()[3] == 0 {
            return bad(format!("t_max {} too short for the convolution stack", self.t_max));
        }
        if !(self.action_scale > 0.0) {
            return bad("action_scale must be positive".into());
        }
        Ok(())
    }

    /// Names of fields whose values differ.
    pub fn differing_fields(&self, other: &NetConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serialises");
        let b = serde_json::to_value(other).expect("config serialises");
        match (a, b) {
            (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
                a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
            }
            _ => Vec::new(),
        }
    }
}
