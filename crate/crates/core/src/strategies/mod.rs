//! The four federated strategies as pure round-transition functions.

mod aggregate;
mod client;
mod meta;
mod schedule;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamSet, PartitionTag};

pub use aggregate::{aggregate_weighted, server_round_fedper};
pub use client::{
    client_update_fedavg, client_update_fedavg_with_schedule, client_update_fedmetaper,
    client_update_fedmetaper_with_schedule, client_update_fedper, client_update_fedper_with_schedule,
    client_update_perfedavg, client_update_perfedavg_with_schedule, personalize, PersonalizeScope,
};
pub use meta::{hvp_central, meta_gradient, perfedavg_meta_gradient, GradientFn, NetObjective};
pub use schedule::{MetaSchedule, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    FedPer,
    PerFedAvg,
    FedMetaPer,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::FedAvg, Self::FedPer, Self::PerFedAvg, Self::FedMetaPer];

    pub fn name(self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::FedPer => "fedper",
            Self::PerFedAvg => "perfedavg",
            Self::FedMetaPer => "fedmetaper",
        }
    }

    /// Clients keep their own personalization layers.
    pub fn keeps_personal_layers(self) -> bool {
        matches!(self, Self::FedPer | Self::FedMetaPer)
    }

    /// Partition exchanged with the server in both directions.
    pub fn wire_tag(self) -> PartitionTag {
        if self.keeps_personal_layers() {
            PartitionTag::Base
        } else {
            PartitionTag::Full
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    FullHvp,
    FirstOrder,
}

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub lr_local: f64,
    /// Inner (adaptation) step size of the meta-gradient.
    pub lr_meta: f64,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub hessian_mode: HessianMode,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr_local: 0.05,
            lr_meta: 0.01,
            local_epochs: 2,
            batch_size: 16,
            hessian_mode: HessianMode::FirstOrder,
        }
    }
}

impl Hyper {
    /// Step sizes may be zero (a frozen client); counts must be positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_local >= 0.0 && self.lr_local.is_finite()) {
            return Err(Error::config("hyper.lr_local", "must be finite and >= 0"));
        }
        if !(self.lr_meta >= 0.0 && self.lr_meta.is_finite()) {
            return Err(Error::config("hyper.lr_meta", "must be finite and >= 0"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("hyper.local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hyper.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T> {
    pub client_id: u32,
    pub payload: ParamSet<T>,
    /// Size of the client's training set.
    pub num_samples: usize,
    pub train_loss: f64,
}
