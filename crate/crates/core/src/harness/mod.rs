//! Benchmark orchestration: seeding, concurrent client runs, sweeps and
//! CSV output.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::{ClientCounters, RfioClient, DEFAULT_TOKEN};
use crate::diskserver::{DiskStats, SessionStats};
use crate::error::{Error, Result};
use crate::headnode::HeadnodeStats;
use crate::model;
use crate::net::LaneStats;
use crate::runtime::{Clock, Connector};
use crate::wire::ReadMode;

mod report;
mod testbed;
mod wall;
mod workload;

pub use report::{emit_run, emit_sweep, write_aggregate_csv, write_clients_csv, AGGREGATE_COLUMNS, CLIENT_COLUMNS};
pub use testbed::{
    seed_pool, seeded_content, seeded_path, PoolFixture, SimTestbed, TestbedConfig, DISK_ADDRESS, HEADNODE_HOST,
};
pub use wall::run_benchmark_wall;
pub use workload::{parse_bytes, Pattern, WorkloadSpec};

/// Metrics for one benchmark client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub client_id: usize,
    pub mode: ReadMode,
    /// Start time relative to the beginning of the run.
    pub start: Duration,
    pub end: Duration,
    pub open_time: f64,
    pub read_time: f64,
    pub bytes_consumed: u64,
    pub bytes_wire: u64,
    pub rate: f64,
    pub read_requests: u64,
    pub open_error: bool,
    /// Failure after a successful open.
    pub error: Option<String>,
}

impl ClientRecord {
    pub fn waste(&self) -> u64 {
        self.bytes_wire.saturating_sub(self.bytes_consumed)
    }

    pub fn failed(&self) -> bool {
        self.open_error || self.error.is_some()
    }
}

/// Results of one run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub spec: WorkloadSpec,
    pub records: Vec<ClientRecord>,
    /// Sum of the rates of clients that completed without error.
    pub aggregate_rate: f64,
    pub mean_rate: f64,
    /// Over clients whose open succeeded.
    pub mean_open_time: f64,
    pub rms_open_time: f64,
    pub total_waste: u64,
    pub error_count: usize,
    pub open_errors: usize,
    pub transport_failures: usize,
    /// First client start to last client finish.
    pub elapsed: Duration,
    pub disk: DiskStats,
    pub sessions: Vec<SessionStats>,
    pub headnode: HeadnodeStats,
    /// Client→server and server→client counters of the link.
    pub link: Option<(LaneStats, LaneStats)>,
}

impl RunSummary {
    pub fn from_records(spec: WorkloadSpec, records: Vec<ClientRecord>) -> Self {
        let ok: Vec<&ClientRecord> = records.iter().filter(|r| !r.failed()).collect();
        let rates: Vec<f64> = ok.iter().map(|r| r.rate).collect();
        let opens: Vec<f64> = records.iter().filter(|r| !r.open_error).map(|r| r.open_time).collect();
        let first = records.iter().map(|r| r.start).min().unwrap_or_default();
        let last = records.iter().map(|r| r.end).max().unwrap_or_default();
        Self {
            aggregate_rate: rates.iter().sum(),
            mean_rate: model::mean(&rates),
            mean_open_time: model::mean(&opens),
            rms_open_time: model::rms_deviation(&opens),
            total_waste: records.iter().map(|r| r.waste()).sum(),
            error_count: records.iter().filter(|r| r.failed()).count(),
            open_errors: records.iter().filter(|r| r.open_error).count(),
            transport_failures: records.iter().filter(|r| r.error.is_some()).count(),
            elapsed: last.saturating_sub(first),
            disk: DiskStats::default(),
            sessions: Vec::new(),
            headnode: HeadnodeStats::default(),
            link: None,
            spec,
            records,
        }
    }

    pub fn total_consumed(&self) -> u64 {
        self.records.iter().map(|r| r.bytes_consumed).sum()
    }

    pub fn total_wire(&self) -> u64 {
        self.records.iter().map(|r| r.bytes_wire).sum()
    }
}

/// Runs one client's workload: open, the pattern's reads, close.
pub(crate) async fn drive_client<K: Clock, N: Connector>(
    client: &RfioClient<K, N>,
    clock: &K,
    client_id: usize,
    path: &str,
    spec: &WorkloadSpec,
    run_epoch: Duration,
) -> ClientRecord {
    let start = clock.now();
    let mut rec = ClientRecord {
        client_id,
        mode: spec.mode,
        start: start.saturating_sub(run_epoch),
        end: Duration::ZERO,
        open_time: 0.0,
        read_time: 0.0,
        bytes_consumed: 0,
        bytes_wire: 0,
        rate: 0.0,
        read_requests: 0,
        open_error: false,
        error: None,
    };
    let mut handle = match client.open(path).await {
        Ok(h) => h,
        Err(e) => {
            rec.open_error = true;
            rec.open_time = (clock.now() - start).as_secs_f64();
            rec.error = None;
            log::info!("client {client_id}: open failed: {e}");
            rec.end = clock.now().saturating_sub(run_epoch);
            return rec;
        }
    };
    let size = handle.file_size();
    let mut failure = None;
    for (offset, len) in spec.pattern.reads(size, spec.block_size) {
        let step = async {
            handle.seek(offset).await?;
            handle.read(len as usize).await
        };
        if let Err(e) = step.await {
            failure = Some(e.to_string());
            break;
        }
    }
    let c: ClientCounters = handle.close().await;
    rec.open_time = c.open_time.as_secs_f64();
    rec.read_time = c.read_time.as_secs_f64();
    rec.bytes_consumed = c.bytes_consumed;
    rec.bytes_wire = c.bytes_wire;
    rec.read_requests = c.read_requests;
    rec.rate = c.rate();
    rec.error = failure;
    rec.end = clock.now().saturating_sub(run_epoch);
    rec
}

/// Uniform start offsets within the stagger window, from the run seed.
pub fn start_offsets(spec: &WorkloadSpec) -> Vec<Duration> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.clients)
        .map(|_| {
            if spec.stagger.is_zero() {
                Duration::ZERO
            } else {
                spec.stagger.mul_f64(rng.gen::<f64>())
            }
        })
        .collect()
}

fn check_fixture(spec: &WorkloadSpec, fixture: &PoolFixture) -> Result<()> {
    if fixture.entries.len() < spec.clients {
        return Err(Error::Config(format!(
            "pool holds {} files, run needs {}",
            fixture.entries.len(),
            spec.clients
        )));
    }
    if fixture.entries[..spec.clients].iter().any(|e| e.size != spec.file_size) {
        return Err(Error::Config(format!(
            "pool files are not {} bytes; reseed the pool",
            spec.file_size
        )));
    }
    Ok(())
}

/// One repetition of `spec` in virtual time. Each client reads its own
/// file from the fixture.
pub fn run_benchmark(spec: &WorkloadSpec, fixture: &PoolFixture) -> Result<RunSummary> {
    spec.validate()?;
    check_fixture(spec, fixture)?;
    let tb = SimTestbed::for_fixture(
        fixture,
        TestbedConfig {
            profile: spec.profile.clone().with_window(spec.window),
            disk: spec.disk.clone(),
            queue: spec.queue.clone(),
            token: DEFAULT_TOKEN.into(),
        },
    )?;
    let config = tb.client_config(spec.mode, spec.iobufsize, spec.window);
    let slots: Rc<RefCell<Vec<Option<ClientRecord>>>> = Rc::new(RefCell::new(vec![None; spec.clients]));
    for (i, delay) in start_offsets(spec).into_iter().enumerate() {
        let client = tb.client(config.clone())?;
        let clock = tb.sim.clone();
        let path = fixture.entries[i].path.clone();
        let spec = spec.clone();
        let slots = slots.clone();
        tb.sim.spawn(async move {
            clock.sleep(delay).await;
            let rec = drive_client(&client, &clock, i, &path, &spec, Duration::ZERO).await;
            slots.borrow_mut()[i] = Some(rec);
        });
    }
    tb.sim.run();
    let records: Vec<ClientRecord> = std::mem::take(&mut *slots.borrow_mut())
        .into_iter()
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Protocol("simulation stalled before every client finished".into()))?;
    let mut summary = RunSummary::from_records(spec.clone(), records);
    summary.disk = tb.disk_server.disk().stats();
    summary.sessions = tb.disk_server.session_stats();
    summary.headnode = tb.headnode.stats();
    summary.link = tb.net.lane_stats(&tb.profile.name);
    Ok(summary)
}

/// All repetitions of `spec`; repetition `r` uses seed `spec.seed + r`.
pub fn run_repeated(spec: &WorkloadSpec, fixture: &PoolFixture) -> Result<Vec<RunSummary>> {
    (0..spec.repetitions as u64)
        .map(|r| {
            let s = WorkloadSpec {
                seed: spec.seed + r,
                ..spec.clone()
            };
            run_benchmark(&s, fixture)
        })
        .collect()
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Clients,
    Mode,
    IobufSize,
    Window,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Clients => "clients",
            Axis::Mode => "mode",
            Axis::IobufSize => "iobufsize",
            Axis::Window => "window",
        }
    }

    /// `base` with the axis set to `value`.
    pub fn apply(self, base: &WorkloadSpec, value: &str) -> Result<WorkloadSpec> {
        let mut s = base.clone();
        let bad = || Error::Config(format!("invalid {} value '{value}'", self.name()));
        match self {
            Axis::Clients => s.clients = value.trim().parse().map_err(|_| bad())?,
            Axis::Mode => s.mode = value.parse().map_err(|_| bad())?,
            Axis::IobufSize => s.iobufsize = u32::try_from(parse_bytes(value)?).map_err(|_| bad())?,
            Axis::Window => s.window = parse_bytes(value)?,
        }
        s.validate()?;
        Ok(s)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "clients" => Axis::Clients,
            "mode" => Axis::Mode,
            "iobufsize" => Axis::IobufSize,
            "window" => Axis::Window,
            _ => return Err(Error::Config(format!("unknown sweep axis '{s}'"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub axis_value: String,
    pub summary: RunSummary,
}

/// Builds and validates every point's spec before anything runs.
pub fn sweep_specs(base: &WorkloadSpec, axis: Axis, values: &[String]) -> Result<Vec<(String, WorkloadSpec)>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|v| Ok((v.trim().to_string(), axis.apply(base, v)?)))
        .collect()
}

/// One run per value with the base seed, in virtual time.
pub fn sweep(base: &WorkloadSpec, axis: Axis, values: &[String], fixture: &PoolFixture) -> Result<Vec<SweepPoint>> {
    sweep_with(base, axis, values, fixture, run_benchmark)
}

/// [`sweep`] with a caller-chosen runner, e.g. [`run_benchmark_wall`].
pub fn sweep_with(
    base: &WorkloadSpec,
    axis: Axis,
    values: &[String],
    fixture: &PoolFixture,
    run: impl Fn(&WorkloadSpec, &PoolFixture) -> Result<RunSummary>,
) -> Result<Vec<SweepPoint>> {
    let specs = sweep_specs(base, axis, values)?;
    for (_, s) in &specs {
        check_fixture(s, fixture)?;
    }
    specs
        .into_iter()
        .map(|(axis_value, s)| {
            Ok(SweepPoint {
                axis_value,
                summary: run(&s, fixture)?,
            })
        })
        .collect()
}
