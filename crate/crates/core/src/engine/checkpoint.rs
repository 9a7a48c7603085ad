//! Round checkpoints: FLPK parameter files plus `manifest.json`.
//!
//! Datasets are not stored; they are regenerated from the config's seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{output, ExperimentConfig, Simulation};
use crate::error::{Error, Result};
use crate::model::{deserialize, serialize};
use crate::model::ParamSet;
use crate::tensor::Element;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SERVER_FILE: &str = "server.flpk";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClient {
    pub client_id: u32,
    /// Personal-layer file, relative to the checkpoint directory.
    pub personal: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub round: u32,
    pub server: String,
    pub clients: Vec<ManifestClient>,
    pub config: ExperimentConfig,
}

fn client_file(client_id: u32) -> String {
    format!("client_{client_id}.personal.flpk")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes the state after `sim.completed` rounds; the manifest goes last.
pub fn save<T: Element>(sim: &Simulation<T>, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(SERVER_FILE), &serialize(&sim.server))?;
    let mut clients = Vec::with_capacity(sim.clients.len());
    for c in &sim.clients {
        let personal = match &c.personal {
            Some(p) => {
                let name = client_file(c.client_id);
                write_atomic(&dir.join(&name), &serialize(p))?;
                Some(name)
            }
            None => None,
        };
        clients.push(ManifestClient {
            client_id: c.client_id,
            personal,
        });
    }
    let manifest = Manifest {
        round: sim.completed,
        server: SERVER_FILE.into(),
        clients,
        config: sim.config.clone(),
    };
    write_atomic(&dir.join(MANIFEST_FILE), output::to_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint {
        path,
        source: Box::new(e.into()),
    })
}

fn read_set<T: Element>(path: PathBuf) -> Result<ParamSet<T>> {
    let bytes = fs::read(&path)?;
    deserialize(&bytes).map_err(|e| Error::CorruptCheckpoint {
        path,
        source: Box::new(e),
    })
}

/// Rebuilds a simulation from `config` and replaces its mutable state with
/// the checkpoint in `dir`. `config` may ask for more rounds than the run
/// that wrote the checkpoint, nothing else may differ.
pub fn restore<T: Element>(config: &ExperimentConfig, dir: &Path) -> Result<Simulation<T>> {
    let manifest = load_manifest(dir)?;
    if !config.same_experiment(&manifest.config) {
        return Err(Error::config("config", "differs from the checkpointed experiment"));
    }
    if manifest.round > config.rounds {
        return Err(Error::config(
            "rounds",
            format!("checkpoint is at round {}, config stops at {}", manifest.round, config.rounds),
        ));
    }
    let mut sim = Simulation::<T>::new(config)?;

    let server_path = dir.join(&manifest.server);
    let server: ParamSet<T> = read_set(server_path.clone())?;
    if !server.same_layout(&sim.server) {
        return Err(Error::CorruptCheckpoint {
            path: server_path,
            source: Box::new(Error::IncompatibleParams("server layout does not match the model".into())),
        });
    }
    sim.server = server;

    if manifest.clients.len() != sim.clients.len() {
        return Err(Error::config("topology", "client count differs from the checkpoint"));
    }
    for (entry, client) in manifest.clients.iter().zip(&mut sim.clients) {
        if entry.client_id != client.client_id {
            return Err(Error::config("topology", "client ids differ from the checkpoint"));
        }
        match (&entry.personal, &mut client.personal) {
            (Some(name), Some(slot)) => {
                let path = dir.join(name);
                if !path.exists() {
                    return Err(Error::MissingState {
                        client_id: entry.client_id,
                        path,
                    });
                }
                let set: ParamSet<T> = read_set(path.clone())?;
                if !set.same_layout(slot) {
                    return Err(Error::CorruptCheckpoint {
                        path,
                        source: Box::new(Error::IncompatibleParams("personal layout does not match".into())),
                    });
                }
                *slot = set;
            }
            (None, None) => {}
            (None, Some(_)) => {
                return Err(Error::MissingState {
                    client_id: entry.client_id,
                    path: dir.join(client_file(entry.client_id)),
                })
            }
            (Some(_), None) => {
                return Err(Error::config("strategy", "checkpoint carries personal layers this strategy lacks"))
            }
        }
    }
    sim.completed = manifest.round;
    Ok(sim)
}
