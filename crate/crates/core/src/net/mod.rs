//! Network blocks, the assembled models and their checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod cycle_encoder;
pub mod dynamics;
pub mod layers;
pub mod lstm;
pub mod model;
pub mod params;
pub mod window_encoder;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use config::NetConfig;
pub use model::{ActionVector, Architecture, BatchGradients, LatentState, Model, OutputGrad, WindowOutput};
pub use params::{Grads, Param, ParamId, ParamKind, ParamStore};

use crate::error::Error;

/// Trained method: an architecture plus the loss terms and schedule used
/// to fit it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// World model with physics terms, trained jointly.
    Piwm,
    /// World model without physics terms.
    Wm,
    /// Same encoder, direct multi-output regression head.
    CnnPatchtst,
    /// World model with physics terms, trained batch by batch with EWC.
    PiwmEwc,
    /// Summary-feature LSTM.
    Lstm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Piwm,
        Variant::Wm,
        Variant::CnnPatchtst,
        Variant::PiwmEwc,
        Variant::Lstm,
    ];

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::Piwm | Variant::Wm | Variant::PiwmEwc => Architecture::WorldModel,
            Variant::CnnPatchtst => Architecture::Direct,
            Variant::Lstm => Architecture::Lstm,
        }
    }

    pub fn physics(self) -> bool {
        matches!(self, Variant::Piwm | Variant::PiwmEwc)
    }

    pub fn ewc(self) -> bool {
        self == Variant::PiwmEwc
    }

    pub fn batch_staged(self) -> bool {
        self == Variant::PiwmEwc
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Piwm => "piwm",
            Variant::Wm => "wm",
            Variant::CnnPatchtst => "cnn-patchtst",
            Variant::PiwmEwc => "piwm-ewc",
            Variant::Lstm => "lstm",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}
