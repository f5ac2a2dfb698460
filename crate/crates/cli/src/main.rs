mod image;

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use netsd_bench::{calibrate, run_matrix, write_csv, Anchors, CalibrationError, MatrixConfig, SearchSpace};
use netsd_core::bus::{BusConfig, BusModel};
use netsd_core::{
    Arbiter, Backing, CardConfig, Direction, FatVolume, FaultRequest, FileBacking, HostConfig, HostSession, MemBacking,
    PortId, Testbed, TestbedConfig,
};
use netsd_gateway::config::parse_size;
use netsd_gateway::{Gateway, GatewayConfig};

use crate::image::FileDisk;

#[derive(Parser)]
#[command(
    name = "netsd",
    version,
    about = "Switched SD card testbed: gateway, tools and benchmarks"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the gateway (NBD export and HTTP API).
    Serve(ServeArgs),
    /// Write a freshly formatted FAT image.
    Format(FormatArgs),
    /// Run the throughput matrix.
    Bench(BenchArgs),
    /// Drive the emulated card from the DUT port.
    Dut(DutArgs),
    /// Manage faults on a running gateway.
    Fault(FaultArgs),
}

fn size(s: &str) -> Result<u64, String> {
    parse_size(s).ok_or_else(|| format!("not a size: {s:?}"))
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

#[derive(Args)]
struct ServeArgs {
    /// `key = value` settings file, applied before any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, value_parser = size)]
    capacity: Option<u64>,
    #[arg(long)]
    nbd_port: Option<u16>,
    #[arg(long)]
    http_port: Option<u16>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any other setting, e.g. `--set explicit_pullups=true`. Repeatable.
    #[arg(long = "set", value_parser = key_value)]
    settings: Vec<(String, String)>,
}

impl ServeArgs {
    fn gateway_config(&self) -> Result<GatewayConfig> {
        let mut cfg = match &self.config {
            Some(path) => GatewayConfig::from_file(path)?,
            None => GatewayConfig::default(),
        };
        if let Some(p) = &self.image {
            cfg.image = Some(p.clone());
        }
        if let Some(c) = self.capacity {
            cfg.capacity = c;
        }
        if let Some(p) = self.nbd_port {
            cfg.nbd_listen.set_port(p);
        }
        if let Some(p) = self.http_port {
            cfg.http_listen.set_port(p);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        for (k, v) in &self.settings {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct FormatArgs {
    #[arg(long, value_parser = size, default_value = "64MiB")]
    capacity: u64,
    #[arg(long, default_value = "sd.img")]
    out: PathBuf,
    /// Replace an existing file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Also run the calibration and write its report here.
    #[arg(long)]
    calibration_report: Option<PathBuf>,
    /// Bytes moved per cell.
    #[arg(long, value_parser = size)]
    total: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    retry_limit: Option<u32>,
    /// Run cells on all cores; the CSV is the same.
    #[arg(long)]
    parallel: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    Read,
    Write,
}

impl From<Dir> for Direction {
    fn from(d: Dir) -> Direction {
        match d {
            Dir::Read => Direction::Read,
            Dir::Write => Direction::Write,
        }
    }
}

#[derive(Args)]
struct DutArgs {
    /// Card image; without it the card lives in memory.
    #[arg(long, global = true)]
    image: Option<PathBuf>,
    #[arg(long, value_parser = size, default_value = "64MiB", global = true)]
    capacity: u64,
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    #[arg(long, default_value_t = 64, global = true)]
    retry_limit: u32,
    /// Fit explicit pull-ups on the DUT side (forces 3.3 V signaling).
    #[arg(long, global = true)]
    pullups: bool,
    /// Card plugged in directly instead of through the switch.
    #[arg(long, global = true)]
    direct: bool,
    /// Error-free channel.
    #[arg(long, global = true)]
    noiseless: bool,
    /// Bytes per host command group.
    #[arg(long, value_parser = size, default_value = "64KiB", global = true)]
    chunk: u64,
    #[command(subcommand)]
    action: DutAction,
}

#[derive(Subcommand)]
enum DutAction {
    /// Read blocks to a file or standard output.
    Read {
        #[arg(long)]
        lba: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a file (or standard input), zero-padded to whole blocks.
    Write {
        #[arg(long)]
        lba: u64,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Measure throughput at one block size.
    Bench {
        #[arg(long, value_enum, default_value = "read")]
        direction: Dir,
        #[arg(long, value_parser = size, default_value = "64KiB")]
        block_size: u64,
        #[arg(long, value_parser = size, default_value = "8MiB")]
        total: u64,
    },
}

#[derive(Args)]
struct FaultArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    server: String,
    #[command(subcommand)]
    action: FaultAction,
}

#[derive(Subcommand)]
enum FaultAction {
    /// Schedule a fault given as JSON, or `@file` holding JSON.
    Add {
        request: String,
    },
    List,
    Cancel {
        id: u64,
    },
}

fn serve(args: ServeArgs) -> Result<()> {
    let cfg = args.gateway_config()?;
    let gw = Gateway::start(&cfg).context("starting gateway")?;
    eprintln!("nbd  listening on {}", gw.nbd_addr());
    eprintln!("http listening on {}", gw.http_addr());
    gw.run_until_interrupted()?;
    Ok(())
}

fn format(args: FormatArgs) -> Result<()> {
    if args.out.exists() && !args.force {
        bail!("{} exists; pass --force to replace it", args.out.display());
    }
    if args.capacity == 0 || args.capacity % 512 != 0 {
        bail!("capacity must be a positive multiple of 512");
    }
    let disk =
        FileDisk::create(&args.out, args.capacity).with_context(|| format!("creating {}", args.out.display()))?;
    let mut vol = FatVolume::format(disk)?;
    vol.flush()?;
    println!(
        "{}: {:?}, {} clusters of {} bytes",
        args.out.display(),
        vol.variant(),
        vol.total_clusters(),
        vol.cluster_bytes()
    );
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    if let Some(path) = &args.calibration_report {
        let (report, result) = match calibrate(&Anchors::default(), &SearchSpace::default()) {
            Ok(c) => (c.report(), Ok(())),
            Err(CalibrationError::CalibrationInfeasible(best)) => {
                let e = CalibrationError::CalibrationInfeasible(best.clone());
                (best.report(), Err(e))
            }
        };
        fs::write(path, report).with_context(|| format!("writing {}", path.display()))?;
        info!("calibration report written to {}", path.display());
        result?;
    }
    let d = MatrixConfig::default();
    let m = MatrixConfig {
        total_bytes: args.total.unwrap_or(d.total_bytes),
        seed: args.seed.unwrap_or(d.seed),
        retry_limit: args.retry_limit.unwrap_or(d.retry_limit),
        parallel: args.parallel,
        ..d
    };
    let samples = run_matrix(&m)?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_csv(BufWriter::new(file), &samples)?;
    let gave_up = samples.iter().filter(|s| s.exhausted).count();
    println!("{} cells written to {}", samples.len(), args.out.display());
    if gave_up > 0 {
        eprintln!("warning: {gave_up} cells ran out of retries and are recorded as 0");
    }
    Ok(())
}

fn dut(args: DutArgs) -> Result<()> {
    let backing: Box<dyn Backing> = match &args.image {
        Some(p) => {
            Box::new(FileBacking::open_or_create(p, args.capacity).with_context(|| format!("opening {}", p.display()))?)
        }
        None => Box::new(MemBacking::zeroed(args.capacity)),
    };
    let bus = if args.direct {
        BusConfig::direct()
    } else {
        BusConfig::switched(args.pullups)
    };
    let cfg = TestbedConfig {
        card: CardConfig {
            capacity_bytes: args.capacity,
            ..Default::default()
        },
        bus: if args.noiseless {
            BusModel::noiseless()
        } else {
            BusModel::default()
        },
        port_configs: vec![bus; 2],
        seed: args.seed,
        ..Default::default()
    };
    let mut bed = Testbed::new(cfg, backing)?;
    bed.release();
    let arb = Arbiter::new(bed);
    let host_cfg = HostConfig {
        retry_limit: args.retry_limit,
        ..Default::default()
    };
    let mut host = HostSession::new(arb.clone(), PortId::DUT, host_cfg);
    let mode = host.init()?;
    info!("card initialized in {mode:?}");
    let chunk = usize::try_from(args.chunk)?;
    match args.action {
        DutAction::Read { lba, count, out } => {
            let data = host.read(lba, count, chunk)?;
            match out {
                Some(p) => fs::write(&p, &data).with_context(|| format!("writing {}", p.display()))?,
                None => io::stdout().lock().write_all(&data)?,
            }
        }
        DutAction::Write { lba, input } => {
            let mut data = match input {
                Some(p) => fs::read(&p).with_context(|| format!("reading {}", p.display()))?,
                None => {
                    let mut v = Vec::new();
                    io::stdin().lock().read_to_end(&mut v)?;
                    v
                }
            };
            data.resize(data.len().next_multiple_of(512), 0);
            host.write(lba, &data, chunk)?;
            arb.lock().flush()?;
        }
        DutAction::Bench {
            direction,
            block_size,
            total,
        } => {
            let mbps = host.throughput(direction.into(), total, usize::try_from(block_size)?)?;
            let s = host.stats();
            println!("{mbps:.3} MB/s, {} retries, {} timeouts", s.retries, s.timeouts);
        }
    }
    Ok(())
}

fn fault(args: FaultArgs) -> Result<()> {
    let base = format!("{}/api/v1/faults", args.server.trim_end_matches('/'));
    let client = reqwest::blocking::Client::new();
    let resp = match args.action {
        FaultAction::Add { request } => {
            let text = match request.strip_prefix('@') {
                Some(path) => fs::read_to_string(path).with_context(|| format!("reading {path}"))?,
                None => request,
            };
            let req: FaultRequest = serde_json::from_str(&text).context("fault request")?;
            client.post(&base).json(&req).send()?
        }
        FaultAction::List => client.get(&base).send()?,
        FaultAction::Cancel { id } => client.delete(format!("{base}/{id}")).send()?,
    };
    let status = resp.status();
    let body = resp.text()?;
    if !status.is_success() {
        bail!("{status}: {body}");
    }
    println!("{body}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.cmd {
        Cmd::Serve(a) => serve(a),
        Cmd::Format(a) => format(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Dut(a) => dut(a),
        Cmd::Fault(a) => fault(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
