//! Command-line entry points: scenario runs, a live base station, a live
//! vehicle client, key generation, and trace inspection.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use vanet_core::addressing::AddressPool;
use vanet_core::crypto::FreshnessPolicy;
use vanet_core::domain::{HazardKind, HazardReport, Vec2, VehicleId};
use vanet_core::keyfile::{parse_key_file, render_key_file, KeyRecord};
use vanet_core::net::{obu_join, rsu_serve, ObuJoinOptions, RsuServeOptions, DEFAULT_PORT};
use vanet_core::policy::{PolicyTable, Role};
use vanet_core::rsu::RsuConfig;
use vanet_core::scenario::{parse_config, run as run_scenario};
use vanet_core::trace::{summarize, EventTrace, TraceFilter};

#[derive(Parser)]
#[command(
    name = "vanet",
    version,
    about = "Secure I2V/V2V messaging stack and simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulation commands.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Base-station commands.
    #[command(subcommand)]
    Rsu(RsuCommand),
    /// Vehicle-client commands.
    #[command(subcommand)]
    Obu(ObuCommand),
    /// Generate a fleet key file plus per-node identity files.
    Keygen(KeygenArgs),
    /// Trace tooling.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario config deterministically.
    Run(SimRunArgs),
}

#[derive(Args)]
struct SimRunArgs {
    /// Scenario config (TOML, or JSON starting with '{').
    config: PathBuf,
    /// Trace output path (line-delimited JSON).
    #[arg(long, default_value = "trace.jsonl")]
    trace: PathBuf,
    /// Final registry snapshot output path (JSON).
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Lease statistics CSV output path (lease mode only).
    #[arg(long)]
    lease_csv: Option<PathBuf>,
    /// Audit log output path (line-delimited JSON).
    #[arg(long)]
    audit: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RsuCommand {
    /// Serve the wire protocol as the base station.
    Serve(RsuServeArgs),
}

#[derive(Args)]
struct RsuServeArgs {
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Fleet key file (role id hex per line).
    #[arg(long)]
    keys: PathBuf,
    /// Policy file (role: TYPE, TYPE ... per line).
    #[arg(long)]
    policy: PathBuf,
    /// Freshness tolerance in milliseconds.
    #[arg(long)]
    tau: Option<u64>,
    /// Client expiry timeout in milliseconds.
    #[arg(long)]
    timeout: Option<u64>,
    /// Audit log path; appended and flushed per record.
    #[arg(long, default_value = "audit.jsonl")]
    audit: PathBuf,
    /// Exit after this many seconds (default: run until interrupted).
    #[arg(long)]
    run_secs: Option<u64>,
}

#[derive(Subcommand)]
enum ObuCommand {
    /// Join a live base station as a vehicle.
    Join(ObuJoinArgs),
}

#[derive(Args)]
struct ObuJoinArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Identity key file holding this vehicle's record.
    #[arg(long)]
    identity: PathBuf,
    /// Reported speed in m/s.
    #[arg(long, default_value_t = 0.0)]
    speed: f64,
    /// Beacon this many rounds (1 s apart) and exit; default: run until
    /// interrupted.
    #[arg(long)]
    rounds: Option<u64>,
    /// Report one hazard with this description after registering.
    #[arg(long)]
    hazard: Option<String>,
}

#[derive(Args)]
struct KeygenArgs {
    /// Fleet key file to write; per-node files land next to it.
    #[arg(long)]
    out: PathBuf,
    /// Number of ordinary vehicles.
    #[arg(long, default_value_t = 3)]
    vehicles: u32,
    /// Number of emergency vehicles.
    #[arg(long, default_value_t = 0)]
    emergency: u32,
    /// Deterministic generation seed; omit for OS randomness.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Filter and summarize a trace file.
    Inspect(TraceInspectArgs),
}

#[derive(Args)]
struct TraceInspectArgs {
    file: PathBuf,
    /// Only events mentioning this vehicle.
    #[arg(long)]
    vehicle: Option<String>,
    /// Only events of this kind (e.g. connectivity, EXIT_RSU,
    /// envelope_verdict).
    #[arg(long)]
    kind: Option<String>,
    /// Only events at or after this time.
    #[arg(long)]
    from: Option<u64>,
    /// Only events at or before this time.
    #[arg(long)]
    to: Option<u64>,
    /// Emit a JSON report instead of text.
    #[arg(long)]
    json: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim(SimCommand::Run(args)) => sim_run(args),
        Command::Rsu(RsuCommand::Serve(args)) => rsu_serve_cmd(args),
        Command::Obu(ObuCommand::Join(args)) => obu_join_cmd(args),
        Command::Keygen(args) => keygen(args),
        Command::Trace(TraceCommand::Inspect(args)) => trace_inspect(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn sim_run(args: SimRunArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config = parse_config(&text)?;
    let output = run_scenario(&config)?;
    std::fs::write(&args.trace, output.trace.render_jsonl())
        .with_context(|| format!("writing {}", args.trace.display()))?;
    if let Some(path) = &args.registry {
        std::fs::write(path, serde_json::to_string_pretty(&output.registry)?)?;
    }
    if let Some(path) = &args.audit {
        let mut text = String::new();
        for record in &output.audit {
            text.push_str(&serde_json::to_string(record)?);
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    if let Some(csv) = &output.lease_csv {
        if let Some(path) = &args.lease_csv {
            std::fs::write(path, csv)?;
        }
    }
    let summary = summarize(&output.trace);
    println!(
        "scenario complete: {} events, {} deliveries, {} rejections",
        summary.total_events, summary.deliveries, summary.rejections_total
    );
    println!("final registry ({} clients):", output.registry.len());
    for row in &output.registry {
        println!("  {}", row.display_row());
    }
    Ok(())
}

fn load_policy(path: &Path) -> Result<PolicyTable> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PolicyTable::parse(&text).map_err(Into::into)
}

fn rsu_serve_cmd(args: RsuServeArgs) -> Result<()> {
    let keys_text = std::fs::read_to_string(&args.keys)
        .with_context(|| format!("reading {}", args.keys.display()))?;
    let records = parse_key_file(&keys_text)?;
    let policy = load_policy(&args.policy)?;
    let mut config = RsuConfig::default();
    if let Some(tau) = args.tau {
        config.freshness = FreshnessPolicy::new(tau)?;
    }
    if let Some(timeout) = args.timeout {
        config.client_timeout_ms = timeout;
    }
    // Live stations lease from a private block; in-band assignment is
    // instant, the static-vs-lease latency study lives in the simulator.
    let pool = AddressPool::Lease(vanet_core::addressing::LeasePool::new(
        "10.0.1.1".parse().expect("valid literal"),
        1024,
        600_000,
    ));
    let server = rsu_serve(RsuServeOptions {
        port: args.port,
        records,
        policy,
        config,
        addr_pool: pool,
        audit_path: Some(args.audit.clone()),
    })?;
    println!("rsu listening on {}", server.local_addr());
    println!("audit log: {}", args.audit.display());
    let started = std::time::Instant::now();
    let mut last_shown = usize::MAX;
    loop {
        std::thread::sleep(Duration::from_millis(500));
        let registry = server.registry();
        if registry.len() != last_shown {
            last_shown = registry.len();
            println!("clients connected: {}", registry.len());
            for row in &registry {
                println!("  {}", row.display_row());
            }
        }
        if let Some(secs) = args.run_secs {
            if started.elapsed() >= Duration::from_secs(secs) {
                break;
            }
        }
    }
    let registry = server.shutdown().list_clients();
    println!("shut down with {} clients registered", registry.len());
    Ok(())
}

fn obu_join_cmd(args: ObuJoinArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.identity)
        .with_context(|| format!("reading {}", args.identity.display()))?;
    let records = parse_key_file(&text)?;
    let record = records
        .into_iter()
        .find(|r| r.role != Role::Rsu)
        .context("identity file holds no vehicle record")?;
    let license = format!("LIC-{}", record.id.as_str().to_uppercase());
    let name = record.id.to_string();
    let mut client = obu_join(ObuJoinOptions {
        host: args.host.clone(),
        port: args.port,
        record,
        license,
        name,
        speed_mps: args.speed,
    })?;
    println!(
        "registered as {} with address {}",
        client.vehicle_id(),
        client.address().unwrap_or_default()
    );
    if let Some(description) = &args.hazard {
        let report = HazardReport {
            kind: HazardKind::Other,
            location: Vec2::ZERO,
            severity: 3,
            description: description.clone(),
        };
        client.report_hazard(report)?;
        println!("hazard reported: {description}");
    }
    let mut rounds_done = 0u64;
    let mut seen_hazards = 0usize;
    loop {
        std::thread::sleep(Duration::from_secs(1));
        client.beacon()?;
        rounds_done += 1;
        let count = client.hazard_count();
        if count > seen_hazards {
            seen_hazards = count;
            println!("hazards received: {count}");
        }
        if let Some(rounds) = args.rounds {
            if rounds_done >= rounds {
                break;
            }
        }
    }
    println!("{}", client.hazards_json());
    client.shutdown()?;
    Ok(())
}

fn keygen(args: KeygenArgs) -> Result<()> {
    use rand::SeedableRng;
    let mut rng = match args.seed {
        Some(seed) => rand_chacha::ChaCha20Rng::seed_from_u64(seed),
        None => rand_chacha::ChaCha20Rng::from_entropy(),
    };
    let mut records = vec![KeyRecord::generate(
        Role::Rsu,
        VehicleId::new("rsu"),
        &mut rng,
    )];
    for i in 1..=args.vehicles {
        records.push(KeyRecord::generate(
            Role::Obu,
            VehicleId::new(format!("v{i}")),
            &mut rng,
        ));
    }
    for i in 1..=args.emergency {
        records.push(KeyRecord::generate(
            Role::EmergencyObu,
            VehicleId::new(format!("ev{i}")),
            &mut rng,
        ));
    }
    std::fs::write(&args.out, render_key_file(&records))
        .with_context(|| format!("writing {}", args.out.display()))?;
    let stem = args.out.with_extension("");
    for record in records.iter().filter(|r| r.role != Role::Rsu) {
        let path = PathBuf::from(format!("{}-{}.keys", stem.display(), record.id));
        std::fs::write(&path, render_key_file(std::slice::from_ref(record)))?;
    }
    println!(
        "wrote {} ({} records) and per-vehicle identity files",
        args.out.display(),
        records.len()
    );
    Ok(())
}

fn trace_inspect(args: TraceInspectArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.file)
        .with_context(|| format!("reading {}", args.file.display()))?;
    let trace = EventTrace::parse_jsonl(&text)?;
    let filter = TraceFilter {
        vehicle: args.vehicle.map(VehicleId::new),
        kind: args.kind.clone(),
        from_ms: args.from,
        to_ms: args.to,
    };
    let matched: Vec<_> = trace
        .events()
        .iter()
        .filter(|e| filter.matches(e))
        .cloned()
        .collect();
    let summary = summarize(&trace);
    if args.json {
        let report = serde_json::json!({
            "summary": summary,
            "matched": matched,
        });
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for event in &matched {
            println!("{}", serde_json::to_string(event)?);
        }
        println!("-- summary --");
        println!("events: {}", summary.total_events);
        println!("matched: {}", matched.len());
        println!("deliveries: {}", summary.deliveries);
        println!("rejections: {}", summary.rejections_total);
        for (stage, count) in &summary.rejections_by_stage {
            println!("  rejected at {stage}: {count}");
        }
        for (vehicle, ms) in &summary.time_in_rsu_range_ms {
            println!("time in range {vehicle}: {ms} ms");
        }
    }
    Ok(())
}
