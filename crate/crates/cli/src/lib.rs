//! `flsim` command-line front end. [`execute`] runs one invocation in-process.

mod report;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use flsim_core::data::{generate_clients, ClientSpec, Scale, TopologyFixture};
use flsim_core::engine::{gradcheck_arch, run_experiment, ExperimentConfig, RunOptions};
use flsim_core::model::{serialize, Arch};
use flsim_core::{Element, ElementType, Error};
use serde::{Deserialize, Serialize};

const SEED_ENV: &str = "FLSIM_SEED";
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "flsim", version, about = "Personalized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write rounds.jsonl and summary.json.
    Run(RunArgs),
    /// Finite-difference check of an architecture's gradients (64-bit).
    Gradcheck {
        #[arg(long)]
        arch: Arch,
        #[arg(long)]
        seed: u64,
    },
    /// Print a topology fixture as CSV.
    Partition {
        #[arg(long)]
        table: TopologyFixture,
    },
    /// Generate one FLPK dataset file per client plus index.json.
    MakeData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a results directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: ReportFormat,
    },
}

#[derive(clap::Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["config", "preset"])))]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<TopologyFixture>,
    /// Overrides the config's scale, as a decimal or `p/q`.
    #[arg(long)]
    scale: Option<String>,
    /// Overrides the config's round count.
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for client updates (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u32>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Summary,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Json(_) | Error::Io(_) | Error::Corrupt { .. } => 2,
            Error::CorruptCheckpoint { .. } | Error::MissingState { .. } => 2,
            Error::Numeric(_) | Error::AllClientsSkipped { .. } | Error::Precision(_) => 4,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        // A closed pipe downstream is a normal way for a reader to stop.
        let code = if e.kind() == io::ErrorKind::BrokenPipe { 0 } else { 2 };
        Failure { code, message: format!("cannot write output: {e}") }
    }
}

type CliResult = Result<(), Failure>;

fn preset_text(fixture: TopologyFixture) -> &'static str {
    match fixture {
        TopologyFixture::Table1 => include_str!("../presets/table1.json"),
        TopologyFixture::Table2 => include_str!("../presets/table2.json"),
        TopologyFixture::Table3 => include_str!("../presets/table3.json"),
    }
}

/// `--seed` beats `FLSIM_SEED`, which beats the file.
fn seed_override(flag: Option<u64>) -> Result<Option<u64>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::input(format!("{SEED_ENV}={v:?} is not a u64"))),
        Err(_) => Ok(None),
    }
}

fn cmd_run(args: RunArgs, out: &mut dyn Write) -> CliResult {
    let text = match (&args.config, args.preset) {
        (Some(path), _) => fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?,
        (None, Some(fixture)) => preset_text(fixture).to_string(),
        (None, None) => unreachable!("clap requires a source"),
    };
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(scale) = &args.scale {
        config.scale = Scale::parse(scale)?;
    }
    if let Some(rounds) = args.rounds {
        config.rounds = rounds;
    }
    if let Some(seed) = seed_override(args.seed)? {
        config.seed = seed;
    }
    config.validate()?;
    let opts = RunOptions {
        out_dir: Some(args.out.clone()),
        jobs: args.jobs,
        checkpoint_every: args.checkpoint_every,
        resume: args.resume,
    };
    let outcome = run_experiment(&config, &opts)?;
    let last = &outcome.summary.final_round;
    writeln!(
        out,
        "{} {} rounds={} clients={} accuracy={:.4} loss={:.4} -> {}",
        outcome.summary.experiment,
        config.strategy,
        config.rounds,
        outcome.summary.clients,
        last.global_acc,
        last.global_loss,
        args.out.display()
    )?;
    Ok(())
}

fn cmd_gradcheck(arch: Arch, seed: u64, out: &mut dyn Write) -> CliResult {
    let r = gradcheck_arch(arch, seed)?;
    writeln!(out, "arch={arch} seed={seed} checked={}", r.checked)?;
    writeln!(out, "max_rel_err={:e}", r.max_rel_err)?;
    writeln!(out, "worst_param_index={}", r.worst_param_index)?;
    writeln!(out, "analytic={:e}", r.analytic)?;
    writeln!(out, "numeric={:e}", r.numeric)?;
    writeln!(out, "kinked={} max_rel_err_smooth={:e}", r.kinked, r.max_rel_err_smooth)?;
    if r.max_rel_err < GRADCHECK_TOL {
        writeln!(out, "PASS (< {GRADCHECK_TOL:e})")?;
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: format!("gradient check failed: max_rel_err {:e} >= {GRADCHECK_TOL:e}", r.max_rel_err),
        })
    }
}

fn cmd_partition(table: TopologyFixture, out: &mut dyn Write) -> CliResult {
    writeln!(out, "client,fight,nonfight,total")?;
    for (i, &(fight, nonfight)) in table.clients().iter().enumerate() {
        writeln!(out, "{},{fight},{nonfight},{}", i + 1, fight + nonfight)?;
    }
    Ok(())
}

/// Input of `make-data`: a bare client list or an object with options.
#[derive(Deserialize)]
#[serde(untagged)]
enum DataSpecFile {
    Clients(Vec<ClientSpec>),
    Full(DataSpec),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSpec {
    clients: Vec<ClientSpec>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    dims: Option<[usize; 3]>,
    #[serde(default)]
    arch: Option<Arch>,
    #[serde(default)]
    element_type: Option<ElementType>,
}

#[derive(Serialize)]
struct IndexEntry {
    client_id: u32,
    file: String,
    fight_count: usize,
    nonfight_count: usize,
    total: usize,
    bytes: usize,
    spec_id: String,
}

#[derive(Serialize)]
struct DataIndex {
    seed: u64,
    dims: [usize; 3],
    element_type: ElementType,
    clients: Vec<IndexEntry>,
}

fn write_datasets<T: Element>(spec: &DataSpec, dims: [usize; 3], seed: u64, out: &Path) -> Result<Vec<IndexEntry>, Failure> {
    let sets = generate_clients::<T>(&spec.clients, dims, seed)?;
    let mut entries = Vec::new();
    for (c, ds) in spec.clients.iter().zip(sets) {
        let file = format!("client_{}.flpk", c.client_id);
        let bytes = serialize(&ds.to_param_set());
        fs::write(out.join(&file), &bytes).map_err(Error::from)?;
        let (nonfight, fight) = ds.label_counts();
        entries.push(IndexEntry {
            client_id: c.client_id,
            file,
            fight_count: fight,
            nonfight_count: nonfight,
            total: ds.len(),
            bytes: bytes.len(),
            spec_id: ds.meta.spec_id.clone(),
        });
    }
    Ok(entries)
}

fn cmd_make_data(spec_path: &Path, out: &Path, seed_flag: Option<u64>, stdout: &mut dyn Write) -> CliResult {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec = match serde_json::from_str::<DataSpecFile>(&text) {
        Ok(DataSpecFile::Clients(clients)) => DataSpec {
            clients,
            seed: 0,
            dims: None,
            arch: None,
            element_type: None,
        },
        Ok(DataSpecFile::Full(s)) => s,
        Err(e) if e.is_data() => {
            return Err(Failure { code: 3, message: format!("invalid data spec: {e}") })
        }
        Err(e) => return Err(Failure::input(format!("malformed data spec: {e}"))),
    };
    if spec.clients.is_empty() {
        return Err(Error::config("clients", "needs at least one client").into());
    }
    let mut ids: Vec<u32> = spec.clients.iter().map(|c| c.client_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("clients", "client ids must be unique").into());
    }
    let seed = seed_override(seed_flag)?.unwrap_or(spec.seed);
    let dims = spec.dims.unwrap_or_else(|| spec.arch.unwrap_or(Arch::Mini).input_dims());
    let element_type = spec.element_type.unwrap_or(ElementType::F32);
    fs::create_dir_all(out).map_err(Error::from)?;
    let clients = match element_type {
        ElementType::F32 => write_datasets::<f32>(&spec, dims, seed, out)?,
        ElementType::F64 => write_datasets::<f64>(&spec, dims, seed, out)?,
    };
    let index = DataIndex { seed, dims, element_type, clients };
    let mut json = serde_json::to_string_pretty(&index).map_err(Error::from)?;
    json.push('\n');
    fs::write(out.join("index.json"), json).map_err(Error::from)?;
    writeln!(stdout, "wrote {} dataset files to {}", index.clients.len(), out.display())?;
    Ok(())
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out` and a one-line reason to stderr. Returns the exit status.
pub fn execute<I, A>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args, out),
        Command::Gradcheck { arch, seed } => cmd_gradcheck(arch, seed, out),
        Command::Partition { table } => cmd_partition(table, out),
        Command::MakeData { spec, out: dir, seed } => cmd_make_data(&spec, &dir, seed, out),
        Command::Report { input, format } => report::cmd_report(&input, format, out),
    };
    let result = result.and_then(|()| out.flush().map_err(Failure::from));
    match result {
        Ok(()) => 0,
        Err(f) if f.code == 0 => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
