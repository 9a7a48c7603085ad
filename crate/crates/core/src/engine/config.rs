use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{scaled_specs, ClientSpec, Scale, TopologyFixture};
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::strategies::{Hyper, Strategy};
use crate::tensor::ElementType;

/// A named fixture or an explicit client list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Topology {
    Fixture(TopologyFixture),
    Clients(Vec<ClientSpec>),
}

impl Topology {
    /// Client specs after scaling. Explicit lists keep their own skew.
    pub fn client_specs(&self, scale: Scale) -> Result<Vec<ClientSpec>> {
        match self {
            Topology::Fixture(f) => scaled_specs(f.clients(), scale),
            Topology::Clients(list) => {
                let cells: Vec<_> = list.iter().map(|c| (c.fight_count, c.nonfight_count)).collect();
                let scaled = scaled_specs(&cells, scale)?;
                Ok(list
                    .iter()
                    .zip(scaled)
                    .map(|(c, s)| ClientSpec {
                        client_id: c.client_id,
                        fight_count: s.fight_count,
                        nonfight_count: s.nonfight_count,
                        skew: c.skew,
                    })
                    .collect())
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Topology::Fixture(f) => f.name().to_string(),
            Topology::Clients(list) => format!("custom({} clients)", list.len()),
        }
    }
}

fn default_arch() -> Arch {
    Arch::Mini
}
fn default_scale() -> Scale {
    Scale::ONE
}
fn default_rounds() -> u32 {
    20
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_personalize_steps() -> u32 {
    3
}
fn default_element_type() -> ElementType {
    ElementType::F32
}

/// Everything that determines an experiment's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub strategy: Strategy,
    #[serde(default = "default_arch")]
    pub arch: Arch,
    pub topology: Topology,
    #[serde(default = "default_scale")]
    pub scale: Scale,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_personalize_steps")]
    pub eval_personalize_steps: u32,
    #[serde(default = "default_element_type")]
    pub element_type: ElementType,
}

impl ExperimentConfig {
    pub fn new(strategy: Strategy, topology: Topology) -> Self {
        ExperimentConfig {
            seed: 0,
            strategy,
            arch: default_arch(),
            topology,
            scale: default_scale(),
            rounds: default_rounds(),
            hyper: Hyper::default(),
            test_fraction: default_test_fraction(),
            eval_personalize_steps: default_personalize_steps(),
            element_type: default_element_type(),
        }
    }

    /// Parses and validates. Syntax errors stay [`Error::Json`] (with line
    /// and column); type and value errors become [`Error::Config`] naming
    /// the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self = match serde_path_to_error::deserialize(&mut de) {
            Ok(cfg) => cfg,
            Err(e) if e.inner().is_data() => {
                let field = match e.path().to_string() {
                    p if p == "." => "config".to_string(),
                    p => p,
                };
                return Err(Error::config(field, e.into_inner().to_string()));
            }
            Err(e) => return Err(e.into_inner().into()),
        };
        de.end()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must lie strictly between 0 and 1"));
        }
        self.hyper.validate()?;
        let specs = self.topology.client_specs(self.scale)?;
        if specs.is_empty() {
            return Err(Error::config("topology", "needs at least one client"));
        }
        let mut seen = BTreeSet::new();
        for (i, c) in specs.iter().enumerate() {
            if !seen.insert(c.client_id) {
                return Err(Error::config(
                    format!("topology[{i}].client_id"),
                    format!("duplicate client id {}", c.client_id),
                ));
            }
            c.skew
                .validate(&format!("topology[{i}].skew"), self.arch.input_dims())?;
        }
        Ok(())
    }

    /// True when `other` describes the same experiment up to its length.
    pub fn same_experiment(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.rounds = other.rounds;
        a == *other
    }
}
