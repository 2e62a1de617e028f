use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::diskserver::DiskModel;
use crate::error::{Error, Result};
use crate::headnode::OpenQueueModel;
use crate::net::{LinkProfile, MIB};
use crate::wire::ReadMode;

/// Access pattern each client runs over its file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Sequential,
    /// Read `read_block` bytes, then skip `skip_blocks` blocks of the same
    /// size.
    Skip { read_block: u64, skip_blocks: u64 },
}

impl Pattern {
    /// `(offset, length)` of every read the pattern performs over a file of
    /// `file_size` bytes with reads of `block_size`.
    pub fn reads(&self, file_size: u64, block_size: u64) -> Vec<(u64, u64)> {
        let (len, stride) = match *self {
            Pattern::Sequential => (block_size, block_size),
            Pattern::Skip {
                read_block,
                skip_blocks,
            } => (read_block, read_block * (skip_blocks + 1)),
        };
        (0..file_size).step_by(stride.max(1) as usize).map(|o| (o, len)).collect()
    }

    /// Fraction of the file the pattern reads.
    pub fn read_fraction(&self) -> f64 {
        match *self {
            Pattern::Sequential => 1.0,
            Pattern::Skip { skip_blocks, .. } => 1.0 / (skip_blocks + 1) as f64,
        }
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, Pattern::Skip { .. })
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Sequential => f.write_str("seq"),
            Pattern::Skip {
                read_block,
                skip_blocks,
            } => write!(f, "skip:{read_block}:{skip_blocks}"),
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    /// `seq` or `skip:READ:SKIPBLOCKS`, with READ in bytes (suffixes
    /// accepted, see [`parse_bytes`]).
    fn from_str(s: &str) -> Result<Self> {
        if s == "seq" || s == "sequential" {
            return Ok(Pattern::Sequential);
        }
        let bad = || Error::Config(format!("invalid pattern '{s}', expected seq or skip:READ:SKIPBLOCKS"));
        let rest = s.strip_prefix("skip:").ok_or_else(bad)?;
        let (read, skip) = rest.split_once(':').ok_or_else(bad)?;
        let read_block = parse_bytes(read)?;
        let skip_blocks = skip.parse().map_err(|_| bad())?;
        if read_block == 0 {
            return Err(bad());
        }
        Ok(Pattern::Skip {
            read_block,
            skip_blocks,
        })
    }
}

/// Parses a byte count: a plain integer or one with a `K`, `M` or `G`
/// suffix (binary multiples; `KiB`/`MiB`/`GiB` also accepted). Fractions
/// such as `0.5M` are allowed when they come out whole.
pub fn parse_bytes(s: &str) -> Result<u64> {
    let t = s.trim();
    let bad = || Error::Config(format!("invalid byte count '{s}'"));
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let mult: u64 = match unit.to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kib" => 1 << 10,
        "m" | "mib" => 1 << 20,
        "g" | "gib" => 1 << 30,
        _ => return Err(bad()),
    };
    if let Ok(n) = num.parse::<u64>() {
        return n.checked_mul(mult).ok_or_else(bad);
    }
    let x: f64 = num.parse().map_err(|_| bad())?;
    let v = x * mult as f64;
    if !(v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64) {
        return Err(bad());
    }
    Ok(v as u64)
}

/// One benchmark configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub pattern: Pattern,
    pub file_size: u64,
    pub block_size: u64,
    pub mode: ReadMode,
    pub clients: usize,
    /// Clients start at uniformly random times within this window.
    pub stagger: Duration,
    pub iobufsize: u32,
    pub profile: LinkProfile,
    /// Per-connection window requested by clients.
    pub window: u64,
    pub repetitions: usize,
    pub seed: u64,
    /// Refuse STREAM in skip workloads.
    pub paper_fidelity: bool,
    pub disk: DiskModel,
    pub queue: OpenQueueModel,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::Sequential,
            file_size: 16 * MIB,
            block_size: MIB,
            mode: ReadMode::Normal,
            clients: 1,
            stagger: Duration::from_secs(1),
            iobufsize: 128 * 1024,
            profile: LinkProfile::wan(MIB),
            window: MIB,
            repetitions: 1,
            seed: 1,
            paper_fidelity: false,
            disk: DiskModel::default(),
            queue: OpenQueueModel::default(),
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.clients == 0 {
            return bad("clients must be at least 1");
        }
        if self.block_size == 0 || (self.file_size > 0 && self.block_size > self.file_size) {
            return bad("block size must be positive and no larger than the file");
        }
        if self.iobufsize == 0 || self.window == 0 {
            return bad("iobufsize and window must be positive");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.paper_fidelity && self.pattern.is_skip() && self.mode == ReadMode::Stream {
            return bad("STREAM is excluded from skip workloads under --paper-fidelity");
        }
        self.profile.validate()?;
        self.disk.validate()?;
        self.queue.validate()
    }
}
