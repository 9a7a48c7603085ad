//! Experiment orchestration: topology, round loop, wire log, evaluation,
//! results files and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod output;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, Topology};

use crate::data::{generate_clients, train_test_split, ChunkDataset};
use crate::error::{Error, Result};
use crate::model::{build_model, deserialize, load_base, load_personal, serialize, ParamSet, SplitModel};
use crate::nn::{forward, loss_softmax_ce};
use crate::seed::{derive_seed, STREAM_INIT, STREAM_SHUFFLE, STREAM_SPLIT};
use crate::strategies::{
    aggregate_weighted, client_update_fedavg, client_update_fedmetaper, client_update_fedper,
    client_update_perfedavg, personalize, server_round_fedper, ClientUpdate, Hyper,
    PersonalizeScope, Strategy,
};
use crate::tensor::{Element, ElementType};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: u32,
    pub test_loss: f64,
    pub test_acc: f64,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipNotice {
    pub client_id: u32,
    pub reason: String,
}

/// One line of `rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub global_loss: f64,
    pub global_acc: f64,
    pub per_client: Vec<ClientMetrics>,
    pub wire_bytes: u64,
    /// Every tensor name that crossed the boundary this round: per client in
    /// id order, the download followed by the upload.
    pub wire_tensor_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkipNotice>,
}

/// Sample-weighted means of per-client loss and accuracy.
pub fn weighted_metrics(per_client: &[ClientMetrics]) -> (f64, f64) {
    let n: usize = per_client.iter().map(|c| c.n_test).sum();
    if n == 0 {
        return (0.0, 0.0);
    }
    let loss: f64 = per_client.iter().map(|c| c.n_test as f64 * c.test_loss).sum();
    let acc: f64 = per_client.iter().map(|c| c.n_test as f64 * c.test_acc).sum();
    (loss / n as f64, acc / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Server to client.
    Down,
    /// Client to server.
    Up,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTransfer {
    pub round: u32,
    pub client_id: u32,
    pub direction: Direction,
    pub names: Vec<String>,
    pub bytes: usize,
}

/// Per-client simulation state; only the client ever touches `personal`.
#[derive(Debug, Clone)]
pub struct ClientState<T> {
    pub client_id: u32,
    pub personal: Option<ParamSet<T>>,
    pub train: ChunkDataset<T>,
    pub test: ChunkDataset<T>,
    pub rng_seed: u64,
}

impl<T: Element> ClientState<T> {
    fn round_seed(&self, round: u32) -> u64 {
        derive_seed(self.rng_seed, STREAM_SHUFFLE, round as u64)
    }
}

/// The model a client tests with, before any evaluation-time adaptation.
fn client_model<T: Element>(
    template: &SplitModel<T>,
    server: &ParamSet<T>,
    client: &ClientState<T>,
    strategy: Strategy,
) -> Result<SplitModel<T>> {
    if strategy.keeps_personal_layers() {
        let personal = client.personal.as_ref().ok_or_else(|| {
            Error::Protocol(format!("client {} has no personal layers", client.client_id))
        })?;
        load_personal(&load_base(template, server)?, personal)
    } else {
        let mut m = template.clone();
        m.load(server)?;
        Ok(m)
    }
}

/// Mean cross-entropy and argmax accuracy of `model` on `data`.
pub fn test_metrics<T: Element>(model: &SplitModel<T>, data: &ChunkDataset<T>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Split("empty test set".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk)?;
        let (logits, _) = forward(model.specs(), model.params(), &batch)?;
        loss += loss_softmax_ce(&logits, &batch.labels)?.to_f64() * chunk.len() as f64;
        for (row, &label) in logits.data().chunks(2).zip(&batch.labels) {
            let pred = usize::from(row[1].to_f64() > row[0].to_f64());
            correct += usize::from(pred == label);
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Per-client test metrics for the current server state.
pub fn evaluate<T: Element>(
    template: &SplitModel<T>,
    server: &ParamSet<T>,
    clients: &[ClientState<T>],
    strategy: Strategy,
    hyper: &Hyper,
    eval_personalize_steps: u32,
) -> Result<Vec<ClientMetrics>> {
    clients
        .par_iter()
        .map(|c| {
            let mut model = client_model(template, server, c, strategy)?;
            if strategy == Strategy::PerFedAvg {
                model = personalize(&model, &c.train, eval_personalize_steps, hyper.lr_meta, PersonalizeScope::All)?;
            }
            let (test_loss, test_acc) = test_metrics(&model, &c.test)?;
            Ok(ClientMetrics {
                client_id: c.client_id,
                test_loss,
                test_acc,
                n_test: c.test.len(),
            })
        })
        .collect()
}

enum Outcome<T> {
    Updated {
        update: ClientUpdate<T>,
        personal: Option<ParamSet<T>>,
        upload: Vec<u8>,
    },
    Skipped(String),
}

fn client_round<T: Element>(
    template: &SplitModel<T>,
    download: &[u8],
    client: &ClientState<T>,
    strategy: Strategy,
    hyper: &Hyper,
    round: u32,
) -> Result<Outcome<T>> {
    let received: ParamSet<T> = deserialize(download)?;
    let seed = client.round_seed(round);
    let id = client.client_id;
    let result = match strategy {
        Strategy::FedAvg | Strategy::PerFedAvg => {
            let mut model = template.clone();
            model.load(&received)?;
            let update = if strategy == Strategy::FedAvg {
                client_update_fedavg(id, &model, &client.train, hyper, seed)
            } else {
                client_update_perfedavg(id, &model, &client.train, hyper, seed)
            };
            update.map(|u| (u, None))
        }
        Strategy::FedPer | Strategy::FedMetaPer => {
            let personal = client
                .personal
                .as_ref()
                .ok_or_else(|| Error::Protocol(format!("client {id} has no personal layers")))?;
            let model = load_personal(template, personal)?;
            let out = if strategy == Strategy::FedPer {
                client_update_fedper(id, &model, &received, &client.train, hyper, seed)
            } else {
                client_update_fedmetaper(id, &model, &received, &client.train, hyper, seed)
            };
            out.map(|(u, p)| (u, Some(p)))
        }
    };
    let (update, personal) = match result {
        Ok(v) => v,
        Err(Error::ClientSkipped { reason, .. }) => return Ok(Outcome::Skipped(reason)),
        Err(e) => return Err(e),
    };
    if update.payload.tag() != strategy.wire_tag() {
        return Err(Error::Protocol(format!(
            "client {id} produced a {:?} payload, {} sends {:?}",
            update.payload.tag(),
            strategy,
            strategy.wire_tag()
        )));
    }
    if !update.payload.tensors().all(|t| t.all_finite()) {
        return Err(Error::Numeric(format!(
            "client {id} diverged in round {round} (train loss {})",
            update.train_loss
        )));
    }
    let upload = serialize(&update.payload);
    Ok(Outcome::Updated { update, personal, upload })
}

/// Result of one communication round.
#[derive(Debug, Clone)]
pub struct RoundResult<T> {
    pub server: ParamSet<T>,
    pub report: RoundReport,
    pub wire: Vec<WireTransfer>,
}

/// Distribute, update every client (in parallel on the current rayon pool),
/// aggregate in client-id order, evaluate. Client personal state is updated
/// in place. Every payload crosses the boundary as FLPK bytes.
pub fn run_round<T: Element>(
    template: &SplitModel<T>,
    server: &ParamSet<T>,
    clients: &mut [ClientState<T>],
    strategy: Strategy,
    hyper: &Hyper,
    eval_personalize_steps: u32,
    round: u32,
) -> Result<RoundResult<T>> {
    if server.tag() != strategy.wire_tag() {
        return Err(Error::Protocol(format!(
            "{strategy} distributes {:?} parameters, server holds {:?}",
            strategy.wire_tag(),
            server.tag()
        )));
    }
    let download = serialize(server);
    let down_names: Vec<String> = server.names().map(String::from).collect();

    let outcomes: Vec<Outcome<T>> = clients
        .par_iter()
        .map(|c| client_round(template, &download, c, strategy, hyper, round))
        .collect::<Result<_>>()?;

    let mut wire = Vec::new();
    let mut updates = Vec::new();
    let mut skipped = Vec::new();
    for (client, outcome) in clients.iter_mut().zip(outcomes) {
        wire.push(WireTransfer {
            round,
            client_id: client.client_id,
            direction: Direction::Down,
            names: down_names.clone(),
            bytes: download.len(),
        });
        match outcome {
            Outcome::Updated { update, personal, upload } => {
                let payload: ParamSet<T> = deserialize(&upload)?;
                wire.push(WireTransfer {
                    round,
                    client_id: client.client_id,
                    direction: Direction::Up,
                    names: payload.names().map(String::from).collect(),
                    bytes: upload.len(),
                });
                if let Some(p) = personal {
                    client.personal = Some(p);
                }
                updates.push(ClientUpdate { payload, ..update });
            }
            Outcome::Skipped(reason) => skipped.push(SkipNotice {
                client_id: client.client_id,
                reason,
            }),
        }
    }
    if updates.is_empty() {
        return Err(Error::AllClientsSkipped { round });
    }
    let next = if strategy.keeps_personal_layers() {
        server_round_fedper(server, &updates)?
    } else {
        aggregate_weighted(&updates)?
    };

    let per_client = evaluate(template, &next, clients, strategy, hyper, eval_personalize_steps)?;
    let (global_loss, global_acc) = weighted_metrics(&per_client);
    if !global_loss.is_finite() {
        return Err(Error::Numeric(format!("round {round}: test loss is {global_loss}")));
    }
    let report = RoundReport {
        round,
        global_loss,
        global_acc,
        per_client,
        wire_bytes: wire.iter().map(|w| w.bytes as u64).sum(),
        wire_tensor_names: wire.iter().flat_map(|w| w.names.iter().cloned()).collect(),
        skipped,
    };
    Ok(RoundResult { server: next, report, wire })
}

/// Full simulation state between rounds.
#[derive(Debug, Clone)]
pub struct Simulation<T> {
    pub config: ExperimentConfig,
    /// Architecture carrier; its parameter values are never read.
    pub template: SplitModel<T>,
    pub server: ParamSet<T>,
    pub clients: Vec<ClientState<T>>,
    /// Rounds completed so far.
    pub completed: u32,
}

impl<T: Element> Simulation<T> {
    /// Builds data, splits and initial parameters from the config's seed.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if T::TYPE != config.element_type {
            return Err(Error::config(
                "element_type",
                format!("simulation built as {:?}, config asks for {:?}", T::TYPE, config.element_type),
            ));
        }
        let seed = config.seed;
        let dims = config.arch.input_dims();
        let specs = config.topology.client_specs(config.scale)?;
        let datasets = generate_clients::<T>(&specs, dims, seed)?;
        let template: SplitModel<T> = build_model(config.arch, derive_seed(seed, STREAM_INIT, 0));
        let strategy = config.strategy;
        let clients = specs
            .iter()
            .zip(datasets)
            .map(|(spec, ds)| {
                let id = spec.client_id;
                let (train, test) = train_test_split(&ds, config.test_fraction, derive_seed(seed, STREAM_SPLIT, id as u64))
                    .map_err(|e| Error::config(format!("topology[client {id}]"), e.to_string()))?;
                let personal = strategy
                    .keeps_personal_layers()
                    .then(|| build_model::<T>(config.arch, derive_seed(seed, STREAM_INIT, id as u64)).personal());
                Ok(ClientState {
                    client_id: id,
                    personal,
                    train,
                    test,
                    rng_seed: derive_seed(seed, STREAM_SHUFFLE, id as u64),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let server = if strategy.keeps_personal_layers() { template.base() } else { template.full() };
        Ok(Simulation {
            config: config.clone(),
            template,
            server,
            clients,
            completed: 0,
        })
    }

    /// Runs the next round.
    pub fn step(&mut self) -> Result<(RoundReport, Vec<WireTransfer>)> {
        let round = self.completed + 1;
        let result = run_round(
            &self.template,
            &self.server,
            &mut self.clients,
            self.config.strategy,
            &self.config.hyper,
            self.config.eval_personalize_steps,
            round,
        )?;
        self.server = result.server;
        self.completed = round;
        Ok((result.report, result.wire))
    }
}

/// Runtime knobs that never change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Results directory; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for client updates; 0 picks the machine default.
    pub jobs: usize,
    /// Write a checkpoint after every this many rounds.
    pub checkpoint_every: Option<u32>,
    /// Continue from `out_dir/checkpoints` instead of starting fresh.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub strategy: Strategy,
    pub clients: usize,
    pub rounds: u32,
    pub final_round: RoundReport,
    pub config: ExperimentConfig,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    /// Transfers of the rounds run in this invocation.
    pub wire: Vec<WireTransfer>,
    pub summary: Summary,
}

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Reads every report from a `rounds.jsonl`.
pub fn read_rounds(path: &Path) -> Result<Vec<RoundReport>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Runs a whole experiment, dispatching on the configured element type.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    config.validate()?;
    match config.element_type {
        ElementType::F32 => run_typed::<f32>(config, opts),
        ElementType::F64 => run_typed::<f64>(config, opts),
    }
}

fn run_typed<T: Element>(config: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentOutcome> {
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    if let Some(0) = opts.checkpoint_every {
        return Err(Error::config("checkpoint_every", "must be at least 1"));
    }
    let out_dir = opts.out_dir.as_deref();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let (mut sim, mut reports) = if opts.resume {
        let dir = out_dir.ok_or_else(|| Error::config("out_dir", "resume needs a results directory"))?;
        let sim: Simulation<T> = checkpoint::restore(config, &dir.join(CHECKPOINT_DIR))?;
        let mut reports = read_rounds(&dir.join(ROUNDS_FILE))?;
        if reports.len() < sim.completed as usize {
            return Err(Error::config(
                "resume",
                format!("{ROUNDS_FILE} has {} rounds, checkpoint is at {}", reports.len(), sim.completed),
            ));
        }
        reports.truncate(sim.completed as usize);
        (sim, reports)
    } else {
        (Simulation::<T>::new(config)?, Vec::new())
    };

    let mut rounds_file = match out_dir {
        Some(dir) => {
            let mut f = File::create(dir.join(ROUNDS_FILE))?;
            for r in &reports {
                writeln!(f, "{}", output::to_line(r)?)?;
            }
            Some(f)
        }
        None => None,
    };

    let mut wire = Vec::new();
    while sim.completed < config.rounds {
        let (report, transfers) = pool.install(|| sim.step())?;
        if let Some(f) = rounds_file.as_mut() {
            writeln!(f, "{}", output::to_line(&report)?)?;
            f.flush()?;
        }
        reports.push(report);
        wire.extend(transfers);
        if let (Some(dir), Some(every)) = (out_dir, opts.checkpoint_every) {
            if sim.completed % every == 0 {
                checkpoint::save(&sim, &dir.join(CHECKPOINT_DIR))?;
            }
        }
    }

    let summary = Summary {
        experiment: config.topology.label(),
        strategy: config.strategy,
        clients: sim.clients.len(),
        rounds: config.rounds,
        final_round: reports.last().cloned().expect("rounds >= 1"),
        config: config.clone(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        fs::write(dir.join(SUMMARY_FILE), output::to_pretty(&summary)?)?;
    }
    Ok(ExperimentOutcome { reports, wire, summary })
}

/// Gradient check of a named architecture in 64-bit at its seeded
/// initialization, on one generated sample of each class.
pub fn gradcheck_arch(arch: crate::model::Arch, seed: u64) -> Result<crate::nn::GradReport> {
    let model: SplitModel<f64> = build_model(arch, seed);
    let spec = crate::data::ClientSpec {
        client_id: 1,
        fight_count: 1,
        nonfight_count: 1,
        skew: crate::data::Skew::default(),
    };
    let data: ChunkDataset<f64> = crate::data::generate_client_data(
        &spec,
        arch.input_dims(),
        derive_seed(seed, crate::seed::STREAM_DATA, 0),
    )?;
    crate::nn::grad_check(model.specs(), model.params(), &data.full_batch(), 1e-5)
}
