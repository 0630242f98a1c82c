//! Operator entry points: one subcommand per node role, plus whole-session
//! simulation, the reconstruction attack harness and key generation.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde_json::json;
use splitagg::attack::{run_attack_suite, Trace};
use splitagg::experiment::{
    load_keypair, reseed, save_keypair, score_history, simulate, SimulateOptions,
};
use splitagg::fusion::FusionAlgorithm;
use splitagg::he::keygen;
use splitagg::mesh::{
    model_checksum, run_aggregator, run_attestation_server, run_party, AggregatorOptions,
    PartyOptions, TcpNetwork, TrainerSource,
};
use splitagg::ExperimentConfig;
use thiserror::Error;

#[derive(Parser)]
#[command(name = "splitagg", version, about = "Split, shuffled federated aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Write per-round metrics as JSON lines.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Upload trace to write (simulate) or read (attack).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Derive the synthetic data seed from this number instead of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "info")]
    log_level: String,
}

#[derive(Subcommand)]
enum Command {
    /// Serve attestation for the configured aggregators.
    AttestationServer(#[command(flatten)] Common),
    /// Run one aggregator.
    Aggregator {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: usize,
    },
    /// Run one party.
    Party {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        id: String,
        /// Write the model after every round as JSON.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Run every node in one process over the in-memory transport.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Write the model after every round as JSON.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Replay the reconstruction attack against a recorded trace.
    Attack(#[command(flatten)] Common),
    /// Write a Paillier keypair for the parties to share.
    Keygen {
        #[arg(long, default_value_t = 2048)]
        bits: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "info")]
        log_level: String,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] splitagg::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 config/usage, 3 attestation rejected, 4 protocol or round abort,
    /// 5 peer unreachable or lost, 6 bind failure, 7 other IO.
    fn exit_code(&self) -> u8 {
        use splitagg::Error as E;
        let CliError::Core(e) = self else {
            return 2;
        };
        match e {
            E::InvalidArgument(_) | E::Json(_) => 2,
            E::Rejected(_) => 3,
            E::Protocol(_) | E::Aborted { .. } | E::Crypto(_) => 4,
            E::Timeout(_) | E::Closed | E::PeerLost(_) => 5,
            E::Io(io) => match io.kind() {
                ErrorKind::AddrInUse | ErrorKind::AddrNotAvailable | ErrorKind::PermissionDenied => 6,
                ErrorKind::ConnectionRefused
                | ErrorKind::ConnectionReset
                | ErrorKind::ConnectionAborted
                | ErrorKind::BrokenPipe
                | ErrorKind::UnexpectedEof
                | ErrorKind::TimedOut => 5,
                _ => 7,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn init_logging(level: &str) {
    env_logger::Builder::new().parse_filters(level).init();
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        reseed(&mut cfg, seed);
    }
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| {
        splitagg::Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot write {}: {e}", path.display()),
        ))
        .into()
    })
}

fn write_history(path: &Path, party_id: &str, history: &[Vec<f64>]) -> Result<()> {
    let doc = json!({
        "party_id": party_id,
        "checksum": history.last().map(|m| model_checksum(m)),
        "round_checksums": history.iter().map(|m| model_checksum(m)).collect::<Vec<_>>(),
        "history": history,
    });
    write_file(path, &serde_json::to_string(&doc).map_err(splitagg::Error::from)?)
}

fn to_lines<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(splitagg::Error::from)?);
        out.push('\n');
    }
    Ok(out)
}

fn attestation_server(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let outcome = run_attestation_server(&cfg, &TcpNetwork, Arc::new(AtomicBool::new(false)))?;
    info!(
        "attestation server done: {} attested, {} rejected",
        outcome.attested.len(),
        outcome.rejected.len()
    );
    Ok(())
}

fn aggregator(common: &Common, index: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let outcome = run_aggregator(&cfg, &TcpNetwork, AggregatorOptions::new(index))?;
    info!("{} finished {} rounds", outcome.agg_id, outcome.round_ids.len());
    if let Some(path) = &common.metrics {
        let rows: Vec<_> = outcome
            .round_ids
            .iter()
            .zip(&outcome.round_wall_ms)
            .map(|(r, ms)| json!({"round_id": r, "wall_ms": ms, "agg_id": outcome.agg_id}))
            .collect();
        write_file(path, &to_lines(&rows)?)?;
    }
    Ok(())
}

fn party(common: &Common, id: &str, model_out: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let paillier = if cfg.algorithm == FusionAlgorithm::Paillier {
        // Every party must hold the same key, so it cannot be generated here.
        let path = cfg.paillier.key_file.as_ref().ok_or_else(|| {
            CliError::Usage("paillier parties need paillier.key_file (see `splitagg keygen`)".into())
        })?;
        Some(Arc::new(load_keypair(path)?))
    } else {
        None
    };
    let mut source = TrainerSource::from_config(&cfg, id)?;
    let outcome = run_party(
        &cfg,
        &TcpNetwork,
        id,
        &mut source,
        PartyOptions {
            record_history: true,
            paillier,
            ..PartyOptions::default()
        },
    )?;
    info!(
        "{id} finished {} rounds, model {}",
        outcome.round_ids.len(),
        model_checksum(&outcome.final_model)
    );
    if let Some(path) = &common.metrics {
        let (records, summary) = score_history(&cfg, &outcome.history, &outcome.round_wall_ms)?;
        let mut text = to_lines(&records)?;
        text.push_str(&to_lines(&[summary])?);
        write_file(path, &text)?;
    }
    if let Some(path) = model_out {
        write_history(path, id, &outcome.history)?;
    }
    Ok(())
}

fn simulate_cmd(common: &Common, model_out: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let result = simulate(
        &cfg,
        SimulateOptions {
            record_trace: common.trace.is_some(),
            paillier: None,
        },
    )?;
    let s = &result.summary;
    println!(
        "{} rounds: loss {:.6}, accuracy {:.4}, max oracle deviation {:e}, mean round {:.1} ms",
        s.rounds, s.final_loss, s.final_accuracy, s.max_oracle_deviation, s.mean_round_ms
    );
    if let Some(path) = &common.metrics {
        write_file(path, &result.metrics_json_lines()?)?;
    }
    if let (Some(path), Some(trace)) = (&common.trace, &result.trace) {
        write_file(path, &serde_json::to_string(trace).map_err(splitagg::Error::from)?)?;
    }
    if let Some(path) = model_out {
        write_history(path, &result.session.parties[0].party_id, &result.history)?;
    }
    Ok(())
}

fn attack(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let path = common
        .trace
        .as_ref()
        .ok_or_else(|| CliError::Usage("attack needs --trace".into()))?;
    if cfg.scenarios.is_empty() {
        return Err(CliError::Usage("config lists no attack scenarios".into()));
    }
    let text = fs::read_to_string(path).map_err(|e| {
        splitagg::Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot read trace {}: {e}", path.display()),
        ))
    })?;
    let trace: Trace = serde_json::from_str(&text).map_err(splitagg::Error::from)?;
    let report = run_attack_suite(&trace, &cfg.scenarios)?;
    print!("{}", report.table());
    if let Some(path) = &common.metrics {
        write_file(path, &report.to_json_lines()?)?;
    }
    Ok(())
}

fn keygen_cmd(bits: u64, out: &Path) -> Result<()> {
    let kp = keygen(bits)?;
    save_keypair(&kp, out)?;
    info!("wrote {bits}-bit keypair to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::AttestationServer(c) => {
            init_logging(&c.log_level);
            attestation_server(c)
        }
        Command::Aggregator { common, index } => {
            init_logging(&common.log_level);
            aggregator(common, *index)
        }
        Command::Party { common, id, model_out } => {
            init_logging(&common.log_level);
            party(common, id, model_out.as_deref())
        }
        Command::Simulate { common, model_out } => {
            init_logging(&common.log_level);
            simulate_cmd(common, model_out.as_deref())
        }
        Command::Attack(c) => {
            init_logging(&c.log_level);
            attack(c)
        }
        Command::Keygen { bits, out, log_level } => {
            init_logging(log_level);
            keygen_cmd(*bits, out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("splitagg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
