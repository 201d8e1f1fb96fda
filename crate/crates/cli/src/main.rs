use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use lacp::envelope::KEYSTORE_ENV;
use lacp::harness::{
    attack_loopback, attack_replay, attack_tamper, bench_default, register_transfer,
    txn_fault_run, AttackKind, FaultSpec, TxnSimConfig,
};
use lacp::transaction::ReplayConfig;
use lacp::transport::{spawn_server, StreamTransport};
use lacp::{keygen, AgentIdentity, Client, ClientError, Keystore, Node, NodeConfig};

#[derive(Parser)]
#[command(name = "lacp", version, about = "Signed, framed tool calls between agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct KeyArgs {
    /// Keystore file (JSON map of agent id to hex keys).
    #[arg(long, env = KEYSTORE_ENV)]
    keystore: PathBuf,
    /// This agent's id; its private key must be in the keystore.
    #[arg(long)]
    identity: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a keypair and add it to the keystore, creating the file if needed.
    Keygen(KeyArgs),
    /// Run a tool-server node with the calculator and a demo transfer tool.
    Serve {
        #[arg(long)]
        listen: String,
        #[command(flatten)]
        keys: KeyArgs,
        /// Accepted clock skew, seconds.
        #[arg(long, default_value_t = 300.0)]
        freshness: f64,
        /// How long transaction ids are remembered, seconds.
        #[arg(long, default_value_t = 86_400.0)]
        retention: f64,
    },
    /// Send one ACT and print the verified OBSERVE output.
    Send {
        #[arg(long)]
        connect: String,
        #[command(flatten)]
        keys: KeyArgs,
        /// Agent id of the server.
        #[arg(long)]
        to: String,
        #[arg(long)]
        tool: String,
        /// Tool parameters as an inline JSON object.
        #[arg(long, default_value = "{}")]
        params: String,
    },
    /// Compare the signed pipeline against an unverified echo, in process.
    Bench {
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tamper with or replay a signed transfer.
    Attack {
        #[arg(value_enum)]
        kind: AttackArg,
        /// Target node address; without it the attack runs against an in-process node.
        #[arg(long, requires_all = ["keystore", "identity", "to"])]
        connect: Option<String>,
        #[arg(long, env = KEYSTORE_ENV)]
        keystore: Option<PathBuf>,
        #[arg(long)]
        identity: Option<String>,
        #[arg(long)]
        to: Option<String>,
    },
    /// Run one two-phase-commit transaction under a seeded fault schedule.
    TxnSim {
        #[arg(long, default_value_t = 3)]
        participants: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// e.g. `drop=0.1,dup=0.1,delay=0.3,max-delay=2`, `silence`, `drop-votes-from=1`, `dup-commit`, `refuse=0`
        #[arg(long, default_value = "none")]
        faults: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    Tamper,
    Replay,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Tamper => AttackKind::Tamper,
            AttackArg::Replay => AttackKind::Replay,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_identity(keystore: &Path, id: &str) -> Result<(AgentIdentity, Keystore)> {
    let store = Keystore::load(keystore)?;
    let identity = store
        .get(id)
        .cloned()
        .with_context(|| format!("{id:?} is not in {}", keystore.display()))?;
    if !identity.has_private_key() {
        bail!("keystore holds no private key for {id:?}");
    }
    Ok((identity, store.public_view()))
}

fn write_report(path: &Path, json: &str) -> Result<()> {
    std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Keygen(keys) => {
            let mut store = if keys.keystore.exists() {
                Keystore::load(&keys.keystore)?
            } else {
                Keystore::new()
            };
            let identity = keygen(&keys.identity)?;
            println!("{} {}", keys.identity, hex::encode(identity.public_key_bytes()));
            store.insert(identity)?;
            store.save(&keys.keystore)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve {
            listen,
            keys,
            freshness,
            retention,
        } => {
            let (identity, peers) = load_identity(&keys.keystore, &keys.identity)?;
            let config = NodeConfig {
                replay: ReplayConfig::new(freshness, retention)?,
                ..NodeConfig::default()
            };
            let node = Node::builder(identity, peers).config(config).build()?;
            register_transfer(&node)?;
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            let server = spawn_server(listener, Arc::new(node))?;
            log::info!(
                "serving {} on {} (tools: calculator, transfer)",
                keys.identity,
                server.local_addr()
            );
            server.join();
            Ok(ExitCode::SUCCESS)
        }
        Command::Send {
            connect,
            keys,
            to,
            tool,
            params,
        } => {
            let params: Map<String, Value> =
                serde_json::from_str(&params).context("--params must be a JSON object")?;
            let (identity, peers) = load_identity(&keys.keystore, &keys.identity)?;
            let transport = StreamTransport::connect(&connect)?;
            let mut client = Client::new(transport, identity, peers)?;
            match client.send_act(&to, &tool, params, None) {
                Ok(obs) => {
                    println!("{}", obs.output_text());
                    Ok(ExitCode::SUCCESS)
                }
                Err(ClientError::ServerRejected { status, observe }) => {
                    let detail = observe.map(|o| o.output.to_string()).unwrap_or_default();
                    eprintln!("rejected with {status}: {detail}");
                    Ok(ExitCode::FAILURE)
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Bench { iterations, out } => {
            let report = bench_default(iterations)?;
            println!("{report}");
            if let Some(path) = out {
                write_report(&path, &report.to_json())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Attack {
            kind,
            connect,
            keystore,
            identity,
            to,
        } => {
            let report = match connect {
                None => attack_loopback(kind.into())?,
                Some(addr) => {
                    let keystore = keystore.expect("clap enforces --keystore");
                    let identity = identity.expect("clap enforces --identity");
                    let to = to.expect("clap enforces --to");
                    let (identity, peers) = load_identity(&keystore, &identity)?;
                    let mut client = Client::new(StreamTransport::connect(&addr)?, identity, peers)?;
                    match kind {
                        AttackArg::Tamper => attack_tamper(&mut client, &to)?,
                        AttackArg::Replay => attack_replay(&mut client, &to)?,
                    }
                }
            };
            println!("{report}");
            Ok(if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::TxnSim {
            participants,
            seed,
            faults,
            out,
        } => {
            let faults: FaultSpec = faults.parse()?;
            let report = txn_fault_run(TxnSimConfig::new(participants, seed, faults))?;
            println!("{report}");
            if let Some(path) = out {
                write_report(&path, &report.to_json())?;
            }
            Ok(if report.pass() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
