//! Execution abstractions shared by the virtual-time simulator and the
//! wall-clock TCP backend.
//!
//! Servers and the client library are written once as `async` code against
//! [`Clock`], [`Connection`] and [`Connector`]; the backend decides whether
//! time is simulated or real.

use std::future::Future;
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::wire::Message;

pub mod sim;

pub use sim::Sim;

pub trait Clock: Clone + 'static {
    /// Time since the clock's epoch.
    fn now(&self) -> Duration;

    fn sleep(&self, d: Duration) -> impl Future<Output = ()>;

    fn sleep_until(&self, t: Duration) -> impl Future<Output = ()> {
        let d = t.saturating_sub(self.now());
        self.sleep(d)
    }
}

/// A bidirectional, ordered, framed message connection.
pub trait Connection {
    /// Queues `msg` for transmission, waiting while the connection's
    /// buffering limit is exhausted.
    fn send(&mut self, msg: Message) -> impl Future<Output = Result<()>>;

    fn recv(&mut self) -> impl Future<Output = Result<Message>>;

    /// Returns a message only if one has already arrived.
    fn try_recv(&mut self) -> Result<Option<Message>>;

    /// Waits until everything queued by `send` has left this endpoint.
    fn flush(&mut self) -> impl Future<Output = Result<()>>;
}

pub trait Connector {
    type Conn: Connection;

    /// Opens a connection to `addr`. `window` overrides the path's default
    /// per-connection window when given.
    fn connect(&self, addr: &str, window: Option<u64>) -> impl Future<Output = Result<Self::Conn>>;
}

/// Real time, measured from construction. Sleeping blocks the thread, so
/// this clock is meant for thread-per-task execution.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    epoch: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self {
            epoch: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    async fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

pub(crate) fn secs_to_duration(secs: f64) -> Duration {
    if secs <= 0.0 || !secs.is_finite() {
        Duration::ZERO
    } else {
        Duration::from_nanos((secs * 1e9).round() as u64)
    }
}
