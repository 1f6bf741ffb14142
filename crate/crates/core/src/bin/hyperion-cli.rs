use std::io::Read as _;
use std::net::UdpSocket;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::{Parser, Subcommand};

use hyperion::client::{
    self, Client, ClientError, Transport, UdpTransport, VirtualTransport, WorkloadSpec,
};
use hyperion::config::Config;
use hyperion::dpu::{builtin_id, Dpu};
use hyperion::ebpf::{assemble, verify, HelperTable, Limits, Program};
use hyperion::kv::{Value, VALUE_SIZE};
use hyperion::pipeline::{self, DumpFormat, DEFAULT_LANE_WIDTH, DEFAULT_SLOT_BUDGET};
use hyperion::{programs, server};

#[derive(Parser)]
#[command(
    name = "hyperion-cli",
    version,
    about = "Client, daemon and compiler for the simulated DPU"
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Daemon address, overriding client.endpoint.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    tenant: Option<u16>,
    #[arg(long, global = true, default_value_t = 1)]
    slot: u16,
    /// Seed for generated workloads and the in-process daemon.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workload spec (TOML) for bench.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the daemon. HYPERION_BIND overrides server.bind.
    Serve,
    /// Verify a program and print its pipeline plan.
    Compile {
        /// Bytecode image, assembly (.s / .asm) or builtin:<name>.
        image: String,
        #[arg(long, default_value_t = DEFAULT_LANE_WIDTH)]
        lanes: usize,
        #[arg(long, default_value_t = DEFAULT_SLOT_BUDGET)]
        budget: u64,
        #[arg(long, default_value = "text")]
        dump: DumpFormat,
        /// Also write the encoded bytecode image here.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    Get {
        key: u64,
    },
    /// Store a value: text padded with zeros to 128 bytes, or --hex.
    Put {
        key: u64,
        value: String,
        #[arg(long)]
        hex: bool,
    },
    Del {
        key: u64,
    },
    /// Closed-loop benchmark described by --spec.
    Bench {
        /// Run against an in-process virtual-time daemon built from --config.
        #[arg(long)]
        local: bool,
        #[arg(long)]
        ops: Option<u64>,
        #[arg(long)]
        concurrency: Option<usize>,
        /// Per-operation CSV trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Upload a program; prints its id.
    LoadProg {
        /// Bytecode image, assembly (.s / .asm) or builtin:<name>.
        image: String,
    },
    /// Create a slot; prints its id.
    CreateSlot {
        /// Program id or built-in name (kv, logfilter, pointer-chase, echo).
        #[arg(long, default_value = "kv")]
        program: String,
        #[arg(long, default_value_t = 1024)]
        blocks: u64,
        #[arg(long, default_value_t = u32::MAX)]
        budget: u32,
    },
    DeleteSlot,
    Stats,
    /// Stream log lines (file or stdin) through a logfilter slot.
    Logfilter {
        file: Option<PathBuf>,
    },
}

/// Error with its exit code.
struct Fail(u8, String);

impl From<ClientError> for Fail {
    fn from(e: ClientError) -> Self {
        Fail(e.exit_code() as u8, e.to_string())
    }
}

impl From<client::BenchError> for Fail {
    fn from(e: client::BenchError) -> Self {
        match e {
            client::BenchError::Client(c) => c.into(),
            other => Fail(2, other.to_string()),
        }
    }
}

fn fail(e: impl std::fmt::Display) -> Fail {
    Fail(2, e.to_string())
}

fn read_program(spec: &str) -> Result<Program, Fail> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return match name {
            "kv" | "kv-get" => Ok(programs::kv_get()),
            "logfilter" => Ok(programs::logfilter()),
            "pointer-chase" => Ok(programs::pointer_chase()),
            "echo" => Ok(programs::echo()),
            _ => Err(fail(format!("unknown built-in `{name}`"))),
        };
    }
    let path = Path::new(spec);
    let bytes = std::fs::read(path).map_err(|e| fail(format!("{spec}: {e}")))?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("program");
    match path.extension().and_then(|e| e.to_str()) {
        Some("s" | "asm") => {
            let text = String::from_utf8(bytes).map_err(fail)?;
            assemble(name, &text).map_err(|e| fail(format!("{spec}: {e}")))
        }
        _ => Program::load_named(name, &bytes).map_err(|e| fail(format!("{spec}: {e}"))),
    }
}

fn compile(
    image: &str,
    lanes: usize,
    budget: u64,
    dump: DumpFormat,
    emit: Option<&Path>,
) -> Result<(), Fail> {
    let program = read_program(image)?;
    let helpers = HelperTable::standard();
    let vp = verify(&program, &helpers, Limits::default())
        .map_err(|e| fail(format!("verifier: {e}")))?;
    let compiled = pipeline::compile(&vp, &helpers, lanes.max(1), budget);
    print!("{}", compiled.dump(&vp, dump));
    if let Some(out) = emit {
        std::fs::write(out, program.encode()).map_err(fail)?;
    }
    if !compiled.cost.fits {
        return Err(fail(format!(
            "{} logic units exceed the budget of {}",
            compiled.cost.logic_units, budget
        )));
    }
    Ok(())
}

fn parse_value(text: &str, hex: bool) -> Result<Value, Fail> {
    let bytes = if hex {
        hex::decode(text).map_err(fail)?
    } else {
        text.as_bytes().to_vec()
    };
    if bytes.len() > VALUE_SIZE {
        return Err(fail(format!(
            "value is {} bytes, limit {VALUE_SIZE}",
            bytes.len()
        )));
    }
    let mut v = [0u8; VALUE_SIZE];
    v[..bytes.len()].copy_from_slice(&bytes);
    Ok(v)
}

fn show_value(v: &Value) -> String {
    let end = v.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
    match std::str::from_utf8(&v[..end]) {
        Ok(s) if s.chars().all(|c| !c.is_control()) => s.to_string(),
        _ => hex::encode(v),
    }
}

fn load_spec(cli: &Cli) -> Result<WorkloadSpec, Fail> {
    let mut spec = match &cli.spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| fail(format!("{}: {e}", p.display())))?;
            WorkloadSpec::from_toml(&text)?
        }
        None => WorkloadSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn run_client<T: Transport>(cli: &Cli, c: &mut Client<T>) -> Result<(), Fail> {
    let slot = cli.slot;
    match &cli.cmd {
        Cmd::Get { key } => match c.get(slot, *key)? {
            (Some(v), _) => println!("{}", show_value(&v)),
            (None, _) => return Err(Fail(1, format!("key {key} not found"))),
        },
        Cmd::Put { key, value, hex } => {
            let replaced = c.put(slot, *key, &parse_value(value, *hex)?)?;
            println!("{}", if replaced { "replaced" } else { "inserted" });
        }
        Cmd::Del { key } => {
            if !c.del(slot, *key)? {
                return Err(Fail(1, format!("key {key} not found")));
            }
            println!("deleted");
        }
        Cmd::LoadProg { image } => {
            let program = read_program(image)?;
            println!("{}", c.load_program(&program.encode())?);
        }
        Cmd::CreateSlot {
            program,
            blocks,
            budget,
        } => {
            let id = match builtin_id(program) {
                Some(id) => id,
                None => program
                    .parse()
                    .map_err(|_| fail(format!("unknown program `{program}`")))?,
            };
            println!("{}", c.create_slot(id, *blocks, *budget)?);
        }
        Cmd::DeleteSlot => c.delete_slot(slot)?,
        Cmd::Stats => {
            let s = c.stats(slot)?;
            println!(
                "requests {}\ntraps    {}\nbusy_ns  {}",
                s.requests, s.traps, s.busy_ns
            );
        }
        Cmd::Logfilter { file } => {
            let mut text = String::new();
            match file {
                Some(p) => text = std::fs::read_to_string(p).map_err(fail)?,
                None => {
                    std::io::stdin()
                        .lock()
                        .read_to_string(&mut text)
                        .map_err(fail)?;
                }
            }
            let lines: Vec<&[u8]> = text.as_bytes().lines_raw();
            let r = client::logfilter_demo(c, slot, &lines)?;
            println!(
                "records {}  matches {}  verified {}",
                r.records, r.matches, r.verified
            );
            if r.verified != r.matches {
                return Err(fail("persisted records did not read back intact"));
            }
        }
        Cmd::Bench {
            ops,
            concurrency,
            trace,
            ..
        } => {
            let mut spec = load_spec(cli)?;
            if let Some(n) = ops {
                spec.op_count = *n;
            }
            if let Some(n) = concurrency {
                spec.concurrency = *n;
            }
            let slots = client::provision(c, &spec)?;
            let report = client::run_bench(c, &spec, &slots, trace.as_deref())?;
            println!("{report}");
        }
        Cmd::Serve | Cmd::Compile { .. } => unreachable!(),
    }
    Ok(())
}

trait LinesRaw {
    fn lines_raw(&self) -> Vec<&[u8]>;
}

impl LinesRaw for [u8] {
    fn lines_raw(&self) -> Vec<&[u8]> {
        self.split(|&b| b == b'\n')
            .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
            .filter(|l| !l.is_empty())
            .collect()
    }
}

fn run(cli: &Cli) -> Result<(), Fail> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(fail)?,
        None => Config::default(),
    };
    match &cli.cmd {
        Cmd::Compile {
            image,
            lanes,
            budget,
            dump,
            emit,
        } => return compile(image, *lanes, *budget, *dump, emit.as_deref()),
        Cmd::Serve => {
            let mut dc = cfg.dpu_config().map_err(fail)?;
            if let Some(seed) = cli.seed {
                dc.seed = seed;
            }
            let mut dpu = Dpu::new(dc).map_err(fail)?;
            let bind = cfg.bind_address();
            let socket = UdpSocket::bind(&bind).map_err(|e| fail(format!("bind {bind}: {e}")))?;
            log::info!("serving on {}", socket.local_addr().map_err(fail)?);
            let stop = AtomicBool::new(false);
            server::serve(&socket, &mut dpu, cfg.run_mode(), &stop).map_err(fail)?;
            return Ok(());
        }
        _ => {}
    }
    let tenant = cli.tenant.unwrap_or(cfg.client.tenant);
    let token = cfg.client_token().map_err(fail)?;
    let local = matches!(cli.cmd, Cmd::Bench { local: true, .. });
    if local {
        let mut dc = cfg.dpu_config().map_err(fail)?;
        if let Some(seed) = cli.seed {
            dc.seed = seed;
        }
        let token = token.unwrap_or([0; 32]);
        if !dc.tenants.iter().any(|(id, _)| *id == tenant) {
            dc.tenants.push((tenant, token));
        }
        let rtt = dc.latency.net_rtt_ns;
        let mut c = Client::new(
            VirtualTransport::new(Dpu::new(dc).map_err(fail)?),
            tenant,
            Some(token),
        );
        c.rtt_ns = rtt;
        c.retries = 0;
        return run_client(cli, &mut c);
    }
    let endpoint = cli
        .endpoint
        .clone()
        .unwrap_or_else(|| cfg.client.endpoint.clone());
    let transport = UdpTransport::connect(&endpoint).map_err(fail)?;
    let mut c = Client::new(transport, tenant, token);
    c.timeout = Duration::from_millis(cfg.client.timeout_ms);
    c.retries = cfg.client.retries;
    c.rtt_ns = cfg.latency_model().map_err(fail)?.net_rtt_ns;
    run_client(cli, &mut c)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("hyperion-cli: {msg}");
            ExitCode::from(code)
        }
    }
}
