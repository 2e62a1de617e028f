use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use rfio_core::diskserver::{DiskModel, Pool};
use rfio_core::harness::{
    emit_run, emit_sweep, parse_bytes, run_benchmark, run_benchmark_wall, seed_pool, sweep_with, Axis, Pattern,
    PoolFixture, RunSummary, WorkloadSpec, DISK_ADDRESS,
};
use rfio_core::headnode::{Namespace, OpenQueueModel};
use rfio_core::net::{LinkProfile, MIB};
use rfio_core::wire::ReadMode;
use rfio_core::{Error, Result};

/// Benchmarks remote file reads over an emulated network.
#[derive(Parser)]
#[command(name = "bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one workload and write per-client and aggregate CSV files.
    Run(WorkloadArgs),
    /// Run the workload once per value of one parameter.
    Sweep(SweepArgs),
    /// Seed a pool directory with pseudorandom files.
    Seed(SeedArgs),
}

fn bytes(s: &str) -> std::result::Result<u64, String> {
    parse_bytes(s).map_err(|e| e.to_string())
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long, default_value = "normal")]
    mode: ReadMode,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long, default_value = "16M", value_parser = bytes)]
    file_size: u64,
    /// Application read size.
    #[arg(long, default_value = "1M", value_parser = bytes)]
    block_size: u64,
    #[arg(long, default_value = "128K", value_parser = bytes)]
    iobufsize: u64,
    /// `seq` or `skip:READ:SKIPBLOCKS`.
    #[arg(long, default_value = "seq")]
    pattern: Pattern,
    /// Built-in `wan`, `lan` or `ideal`, or a profile from --profile-config.
    #[arg(long, default_value = "wan")]
    net_profile: String,
    /// File of `key = value` link profiles.
    #[arg(long)]
    profile_config: Option<PathBuf>,
    /// Per-connection window.
    #[arg(long, default_value = "1M", value_parser = bytes)]
    window: u64,
    /// Clients start uniformly at random within this many seconds.
    #[arg(long, default_value_t = 1.0)]
    stagger: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Pool directory; a temporary one is seeded when omitted.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Refuse STREAM mode with skip patterns.
    #[arg(long)]
    paper_fidelity: bool,
    /// Run over loopback TCP in real time instead of virtual time.
    #[arg(long)]
    wall_clock: bool,
    /// Headnode open service time in milliseconds.
    #[arg(long)]
    open_service_ms: Option<f64>,
    #[arg(long)]
    open_workers: Option<usize>,
    #[arg(long)]
    open_queue_cap: Option<usize>,
    #[arg(long)]
    disk_seek_ms: Option<f64>,
    /// Disk sequential bandwidth in bytes/s.
    #[arg(long, value_parser = bytes)]
    disk_bandwidth: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[command(flatten)]
    workload: WorkloadArgs,
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value = "16M", value_parser = bytes)]
    file_size: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "pool")]
    pool: PathBuf,
}

fn secs(v: f64, what: &str) -> Result<Duration> {
    Duration::try_from_secs_f64(v).map_err(|_| Error::Config(format!("invalid {what} '{v}'")))
}

fn resolve_profile(args: &WorkloadArgs) -> Result<LinkProfile> {
    if let Some(path) = &args.profile_config {
        let text = fs::read_to_string(path)?;
        return LinkProfile::parse_config(&text)?
            .into_iter()
            .find(|p| p.name == args.net_profile)
            .ok_or_else(|| Error::Config(format!("no profile '{}' in {}", args.net_profile, path.display())));
    }
    LinkProfile::builtin(&args.net_profile, args.window)
        .ok_or_else(|| Error::Config(format!("unknown network profile '{}'", args.net_profile)))
}

impl WorkloadArgs {
    fn spec(&self) -> Result<WorkloadSpec> {
        let mut queue = OpenQueueModel::default();
        if let Some(ms) = self.open_service_ms {
            queue.service_time = secs(ms / 1000.0, "open service time")?;
        }
        if let Some(n) = self.open_workers {
            queue.workers = n;
        }
        if let Some(n) = self.open_queue_cap {
            queue.queue_cap = n;
        }
        let mut disk = DiskModel::default();
        if let Some(ms) = self.disk_seek_ms {
            disk.seek_latency = secs(ms / 1000.0, "seek latency")?;
        }
        if let Some(b) = self.disk_bandwidth {
            disk.sequential_bandwidth = b as f64;
        }
        let spec = WorkloadSpec {
            pattern: self.pattern,
            file_size: self.file_size,
            block_size: self.block_size,
            mode: self.mode,
            clients: self.clients,
            stagger: secs(self.stagger, "stagger")?,
            iobufsize: u32::try_from(self.iobufsize)
                .map_err(|_| Error::Config(format!("iobufsize {} too large", self.iobufsize)))?,
            profile: resolve_profile(self)?,
            window: self.window,
            repetitions: self.repetitions,
            seed: self.seed,
            paper_fidelity: self.paper_fidelity,
            disk,
            queue,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn fixture(&self, count: usize) -> Result<PoolFixture> {
        match &self.pool {
            Some(dir) => PoolFixture::in_dir(dir, count, self.file_size, self.seed),
            None => PoolFixture::temp(count, self.file_size, self.seed),
        }
    }

    fn runner(&self) -> fn(&WorkloadSpec, &PoolFixture) -> Result<RunSummary> {
        if self.wall_clock {
            run_benchmark_wall
        } else {
            run_benchmark
        }
    }
}

fn print_summary(label: &str, s: &RunSummary) {
    println!(
        "{label:>10}  {:<9} clients {:>3}  aggregate {:>8.2} MiB/s  open {:.3}±{:.3} s  waste {:>12} B  errors {}",
        s.spec.mode.name(),
        s.spec.clients,
        s.aggregate_rate / MIB as f64,
        s.mean_open_time,
        s.rms_open_time,
        s.total_waste,
        s.error_count
    );
}

fn print_written(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn transport_failures<'a>(runs: impl IntoIterator<Item = &'a RunSummary>) -> usize {
    runs.into_iter().map(|s| s.transport_failures).sum()
}

fn run(args: &WorkloadArgs) -> Result<usize> {
    let spec = args.spec()?;
    let fixture = args.fixture(spec.clients)?;
    let runner = args.runner();
    let mut summaries = Vec::with_capacity(spec.repetitions);
    for r in 0..spec.repetitions as u64 {
        let s = runner(
            &WorkloadSpec {
                seed: spec.seed + r,
                ..spec.clone()
            },
            &fixture,
        )?;
        print_summary(&format!("rep {r}"), &s);
        summaries.push(s);
    }
    print_written(&emit_run(&summaries, &args.out)?);
    Ok(transport_failures(&summaries))
}

fn sweep(args: &SweepArgs) -> Result<usize> {
    let base = args.workload.spec()?;
    let count = match args.axis {
        Axis::Clients => {
            let mut max = 0;
            for v in &args.values {
                max = max.max(args.axis.apply(&base, v)?.clients);
            }
            max
        }
        _ => base.clients,
    };
    let fixture = args.workload.fixture(count)?;
    let points = sweep_with(&base, args.axis, &args.values, &fixture, args.workload.runner())?;
    for p in &points {
        print_summary(&p.axis_value, &p.summary);
    }
    print_written(&emit_sweep(args.axis, &points, &args.workload.out)?);
    Ok(transport_failures(points.iter().map(|p| &p.summary)))
}

fn seed(args: &SeedArgs) -> Result<()> {
    let pool = Pool::open(&args.pool)?;
    for f in pool.files() {
        pool.remove(&f.path)?;
    }
    let manifest = args.pool.join("namespace.manifest");
    if manifest.exists() {
        fs::remove_file(&manifest)?;
    }
    let namespace = Namespace::open(&manifest)?;
    let entries = seed_pool(&pool, Some(&namespace), args.count, args.file_size, args.seed, DISK_ADDRESS)?;
    for e in &entries {
        println!("{}\t{}\t{:016x}", e.path, e.size, e.checksum);
    }
    println!("seeded {} files into {}", entries.len(), args.pool.display());
    println!("namespace manifest {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Seed(a) => seed(a).map(|_| 0),
    };
    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("bench: {n} client(s) failed after opening");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(2)
        }
    }
}
