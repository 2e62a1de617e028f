//! Network paths: link profiles and the emulated transports that apply them.

use std::fmt;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::model;

pub mod emu;
pub mod tcp;

pub use emu::{EmuConn, EmuConnector, EmuListener, LaneStats, Network};

pub const MIB: u64 = 1024 * 1024;

/// Emulated network path between the client site and a server host.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkProfile {
    pub name: String,
    pub rtt: Duration,
    /// Bytes/s shared by every connection on the link, per direction.
    pub shared_bandwidth: f64,
    /// Default per-connection window in bytes.
    pub per_connection_window: u64,
}

impl LinkProfile {
    pub fn new(name: impl Into<String>, rtt: Duration, shared_bandwidth: f64, window: u64) -> Result<Self> {
        let p = Self {
            name: name.into(),
            rtt,
            shared_bandwidth,
            per_connection_window: window,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shared_bandwidth > 0.0 && self.shared_bandwidth.is_finite()) {
            return Err(Error::Config(format!(
                "profile {}: bandwidth must be positive",
                self.name
            )));
        }
        if self.per_connection_window == 0 {
            return Err(Error::Config(format!(
                "profile {}: window must be positive",
                self.name
            )));
        }
        Ok(())
    }

    /// Inter-site path: 12 ms RTT, ~100 MiB/s shared.
    pub fn wan(window: u64) -> Self {
        Self {
            name: "wan".into(),
            rtt: Duration::from_millis(12),
            shared_bandwidth: (100 * MIB) as f64,
            per_connection_window: window,
        }
    }

    /// Gigabit LAN to a single disk server. The RTT is a nominal value.
    pub fn lan(window: u64) -> Self {
        Self {
            name: "lan".into(),
            rtt: Duration::from_micros(200),
            shared_bandwidth: (119 * MIB) as f64,
            per_connection_window: window,
        }
    }

    /// Zero-latency, effectively unlimited path.
    pub fn ideal() -> Self {
        Self {
            name: "ideal".into(),
            rtt: Duration::ZERO,
            shared_bandwidth: 1e15,
            per_connection_window: u64::MAX / 2,
        }
    }

    /// Looks up a built-in profile by name.
    pub fn builtin(name: &str, window: u64) -> Option<Self> {
        match name {
            "wan" => Some(Self::wan(window)),
            "lan" => Some(Self::lan(window)),
            "ideal" => Some(Self::ideal()),
            _ => None,
        }
    }

    pub fn with_window(mut self, window: u64) -> Self {
        self.per_connection_window = window;
        self
    }

    /// Per-connection ceiling with `active` connections sharing the link.
    pub fn throughput_cap(&self, active: usize) -> f64 {
        self.throughput_cap_with_window(self.per_connection_window, active)
    }

    pub fn throughput_cap_with_window(&self, window: u64, active: usize) -> f64 {
        model::throughput_cap(
            self.shared_bandwidth,
            self.rtt.as_secs_f64(),
            window as f64,
            active,
        )
    }

    /// Parses profiles from `key = value` lines. Each `name` key starts a
    /// new profile; `#` starts a comment.
    ///
    /// ```text
    /// name = wan
    /// rtt_ms = 12
    /// bandwidth_bytes_per_s = 104857600
    /// window_bytes = 1048576
    /// ```
    pub fn parse_config(text: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut cur: Option<Self> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let bad = |what: &str| Error::Config(format!("line {}: invalid {what} '{value}'", lineno + 1));
            if key == "name" {
                if let Some(p) = cur.take() {
                    p.validate()?;
                    out.push(p);
                }
                cur = Some(Self {
                    name: value.to_string(),
                    rtt: Duration::ZERO,
                    shared_bandwidth: 0.0,
                    per_connection_window: MIB,
                });
                continue;
            }
            let p = cur
                .as_mut()
                .ok_or_else(|| Error::Config(format!("line {}: '{key}' before any name", lineno + 1)))?;
            match key {
                "rtt_ms" => {
                    let ms: f64 = value.parse().map_err(|_| bad("rtt_ms"))?;
                    if !(ms >= 0.0 && ms.is_finite()) {
                        return Err(bad("rtt_ms"));
                    }
                    p.rtt = Duration::from_secs_f64(ms / 1000.0);
                }
                "bandwidth_bytes_per_s" => {
                    p.shared_bandwidth = value.parse().map_err(|_| bad("bandwidth_bytes_per_s"))?
                }
                "window_bytes" => {
                    p.per_connection_window = value.parse().map_err(|_| bad("window_bytes"))?
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        if let Some(p) = cur {
            p.validate()?;
            out.push(p);
        }
        Ok(out)
    }
}

impl fmt::Display for LinkProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (rtt {:?}, {:.1} MiB/s, window {} B)",
            self.name,
            self.rtt,
            self.shared_bandwidth / MIB as f64,
            self.per_connection_window
        )
    }
}
