//! POSIX-like client: open, read, seek, close in the four read modes.
//!
//! * NORMAL sends one `ReadRequest` per read.
//! * READBUF keeps an `iobufsize` buffer and sends one request per miss.
//! * READAHEAD asks the server to push from the current position on the
//!   control connection. Targets ahead of the push are reached by
//!   consuming it; targets behind it interrupt and restart the push.
//! * STREAM receives the push on a second connection; a seek is sent to
//!   the server at once and restarts the push there.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use log::warn;

use crate::error::{Error, Result};
use crate::headnode::{ticket_token, DEFAULT_BROKER_PORT, DEFAULT_NAMESPACE_PORT};
use crate::model;
use crate::runtime::{Clock, Connection, Connector};
use crate::wire::{Message, ReadMode};

pub const DEFAULT_IOBUFSIZE: u32 = 128 * 1024;
pub const DEFAULT_WINDOW: u64 = 1024 * 1024;
pub const DEFAULT_TOKEN: &str = "rfio-shared-token";

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    /// Host name of the headnode; the ports below are appended.
    pub headnode: String,
    pub namespace_port: u16,
    pub broker_port: u16,
    pub token: String,
    pub mode: ReadMode,
    pub iobufsize: u32,
    /// Per-connection window requested from the network.
    pub emulated_window: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            headnode: "headnode".into(),
            namespace_port: DEFAULT_NAMESPACE_PORT,
            broker_port: DEFAULT_BROKER_PORT,
            token: DEFAULT_TOKEN.into(),
            mode: ReadMode::Normal,
            iobufsize: DEFAULT_IOBUFSIZE,
            emulated_window: DEFAULT_WINDOW,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iobufsize == 0 {
            return Err(Error::Config("iobufsize must be positive".into()));
        }
        if self.emulated_window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        Ok(())
    }

    pub fn namespace_address(&self) -> String {
        format!("{}:{}", self.headnode, self.namespace_port)
    }

    pub fn broker_address(&self) -> String {
        format!("{}:{}", self.headnode, self.broker_port)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientCounters {
    pub open_time: Duration,
    pub read_time: Duration,
    pub bytes_consumed: u64,
    /// `DataChunk` payload bytes received during reads.
    pub bytes_wire: u64,
    pub read_requests: u64,
    /// Set when `close` was called on an already closed handle.
    pub already_closed: bool,
}

impl ClientCounters {
    /// `bytes_consumed / (open_time + read_time)`.
    pub fn rate(&self) -> f64 {
        model::transfer_rate(
            self.bytes_consumed as f64,
            self.open_time.as_secs_f64(),
            self.read_time.as_secs_f64(),
        )
    }

    pub fn waste(&self) -> u64 {
        self.bytes_wire.saturating_sub(self.bytes_consumed)
    }
}

/// Opens files through a headnode.
pub struct RfioClient<K: Clock, N: Connector> {
    clock: K,
    connector: N,
    config: ClientConfig,
    open_errors: AtomicU64,
}

async fn expect_reply<C: Connection>(conn: &mut C) -> Result<Message> {
    match conn.recv().await? {
        Message::ErrorReply { code, detail } => Err(Error::from_reply(code, detail)),
        m => Ok(m),
    }
}

fn unexpected(m: &Message) -> Error {
    Error::Protocol(format!("unexpected {:?}", m.msg_type()))
}

impl<K: Clock, N: Connector> RfioClient<K, N> {
    pub fn new(clock: K, connector: N, config: ClientConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            clock,
            connector,
            config,
            open_errors: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn open_errors(&self) -> u64 {
        self.open_errors.load(Ordering::Relaxed)
    }

    /// Looks up, brokers and opens `path` on its disk server.
    pub async fn open(&self, path: &str) -> Result<ClientHandle<K, N::Conn>> {
        let t0 = self.clock.now();
        match self.open_inner(path, t0).await {
            Ok(h) => Ok(h),
            Err(e) => {
                self.open_errors.fetch_add(1, Ordering::Relaxed);
                Err(e)
            }
        }
    }

    async fn open_inner(&self, path: &str, t0: Duration) -> Result<ClientHandle<K, N::Conn>> {
        let cfg = &self.config;
        let window = Some(cfg.emulated_window);

        let mut ns = self.connector.connect(&cfg.namespace_address(), window).await?;
        ns.send(Message::NsLookup { path: path.into() }).await?;
        let replica = match expect_reply(&mut ns).await? {
            Message::NsLookupReply { replica_address, .. } => replica_address,
            m => return Err(unexpected(&m)),
        };
        drop(ns);

        let open = |token: String| Message::OpenRequest {
            path: path.into(),
            mode: cfg.mode,
            iobufsize: cfg.iobufsize,
            token,
        };
        let mut broker = self.connector.connect(&cfg.broker_address(), window).await?;
        broker.send(open(cfg.token.clone())).await?;
        let handle_id = match expect_reply(&mut broker).await? {
            Message::OpenReply { handle_id, .. } => handle_id,
            m => return Err(unexpected(&m)),
        };
        drop(broker);

        let mut ctrl = self.connector.connect(&replica, window).await?;
        ctrl.send(open(ticket_token(&cfg.token, handle_id))).await?;
        let size = match expect_reply(&mut ctrl).await? {
            Message::OpenReply { handle_id: h, file_size } if h == handle_id => file_size,
            m => return Err(unexpected(&m)),
        };

        let mut data = None;
        let mut run_active = false;
        match cfg.mode {
            ReadMode::ReadAhead => {
                ctrl.send(Message::StreamStart { handle_id, offset: 0 }).await?;
                run_active = true;
            }
            ReadMode::Stream => {
                let mut d = self.connector.connect(&replica, window).await?;
                d.send(Message::StreamStart { handle_id, offset: 0 }).await?;
                data = Some(d);
                run_active = true;
            }
            _ => {}
        }
        let counters = ClientCounters {
            open_time: self.clock.now() - t0,
            ..Default::default()
        };
        Ok(ClientHandle {
            clock: self.clock.clone(),
            mode: cfg.mode,
            iobufsize: cfg.iobufsize as u64,
            handle_id,
            size,
            pos: 0,
            ctrl,
            data,
            buf: Vec::new(),
            buf_start: 0,
            stream_pos: 0,
            run_active,
            markers_to_skip: 0,
            counters,
            closed: false,
        })
    }
}

/// One open file. Not safe for concurrent use.
pub struct ClientHandle<K: Clock, C: Connection> {
    clock: K,
    mode: ReadMode,
    iobufsize: u64,
    handle_id: u64,
    size: u64,
    pos: u64,
    ctrl: C,
    /// STREAM data connection.
    data: Option<C>,
    buf: Vec<u8>,
    buf_start: u64,
    /// Offset of the next pushed chunk.
    stream_pos: u64,
    /// A push has been requested and its end marker not yet seen.
    run_active: bool,
    /// End markers of abandoned pushes still to be skipped.
    markers_to_skip: u32,
    counters: ClientCounters,
    closed: bool,
}

impl<K: Clock, C: Connection> ClientHandle<K, C> {
    pub fn handle_id(&self) -> u64 {
        self.handle_id
    }

    pub fn mode(&self) -> ReadMode {
        self.mode
    }

    pub fn file_size(&self) -> u64 {
        self.size
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn counters(&self) -> &ClientCounters {
        &self.counters
    }

    /// Valid range of the internal buffer.
    pub fn buffered_range(&self) -> std::ops::Range<u64> {
        self.buf_start..self.buf_start + self.buf.len() as u64
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Reads up to `len` bytes at the current position. Returns fewer only
    /// at end of file.
    pub async fn read(&mut self, len: usize) -> Result<Vec<u8>> {
        if self.closed {
            return Err(Error::StaleHandle(self.handle_id));
        }
        if len == 0 {
            return Ok(Vec::new());
        }
        let start = self.clock.now();
        let result = match self.mode {
            ReadMode::Normal => self.read_normal(len).await,
            ReadMode::ReadBuf => self.read_buffered(len).await,
            ReadMode::ReadAhead | ReadMode::Stream => self.read_pushed(len).await,
        };
        self.counters.read_time += self.clock.now() - start;
        let out = result?;
        self.counters.bytes_consumed += out.len() as u64;
        Ok(out)
    }

    /// Moves the logical position. Never waits for the network.
    pub async fn seek(&mut self, offset: u64) -> Result<u64> {
        if self.closed {
            return Err(Error::StaleHandle(self.handle_id));
        }
        if offset > self.size {
            return Err(Error::Range {
                offset,
                size: self.size,
            });
        }
        if self.mode == ReadMode::Stream && offset != self.pos {
            self.ctrl
                .send(Message::SeekRequest {
                    handle_id: self.handle_id,
                    offset,
                })
                .await?;
            if self.run_active {
                self.markers_to_skip += 1;
            }
            self.run_active = true;
            self.stream_pos = offset;
            self.buf.clear();
            self.buf_start = offset;
        }
        self.pos = offset;
        Ok(offset)
    }

    /// Closes the session and returns the final counters. Closing twice is
    /// a no-op that sets `already_closed`.
    pub async fn close(&mut self) -> ClientCounters {
        if self.closed {
            warn!("handle {} closed twice", self.handle_id);
            self.counters.already_closed = true;
            return self.counters.clone();
        }
        self.closed = true;
        let _ = self
            .ctrl
            .send(Message::CloseRequest {
                handle_id: self.handle_id,
            })
            .await;
        let _ = self.ctrl.flush().await;
        self.data = None;
        self.buf = Vec::new();
        self.counters.clone()
    }

    fn remaining(&self, len: usize) -> usize {
        (self.size - self.pos).min(len as u64) as usize
    }

    /// Receives one `DataChunk` from `conn`, counting its payload.
    async fn next_chunk(&mut self, data: bool) -> Result<(u64, Vec<u8>)> {
        let conn = match (data, self.data.as_mut()) {
            (true, Some(d)) => d,
            _ => &mut self.ctrl,
        };
        match conn.recv().await? {
            Message::DataChunk {
                handle_id,
                offset,
                payload,
            } if handle_id == self.handle_id => {
                self.counters.bytes_wire += payload.len() as u64;
                Ok((offset, payload))
            }
            Message::ErrorReply { code, detail } => Err(Error::from_reply(code, detail)),
            m => Err(unexpected(&m)),
        }
    }

    /// Sends one request and collects `min(length, size - offset)` bytes.
    async fn request(&mut self, offset: u64, length: u64) -> Result<Vec<u8>> {
        self.ctrl
            .send(Message::ReadRequest {
                handle_id: self.handle_id,
                offset,
                length,
            })
            .await?;
        self.counters.read_requests += 1;
        let want = (self.size - offset).min(length) as usize;
        let mut out = Vec::with_capacity(want);
        if want == 0 {
            self.next_chunk(false).await?;
            return Ok(out);
        }
        while out.len() < want {
            let (off, payload) = self.next_chunk(false).await?;
            if off != offset + out.len() as u64 || payload.is_empty() || out.len() + payload.len() > want {
                return Err(Error::Protocol(format!("chunk at {off} out of sequence")));
            }
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    async fn read_normal(&mut self, len: usize) -> Result<Vec<u8>> {
        let out = self.request(self.pos, len as u64).await?;
        self.pos += out.len() as u64;
        Ok(out)
    }

    fn copy_from_buffer(&mut self, out: &mut Vec<u8>, want: usize) -> bool {
        let range = self.buffered_range();
        if !range.contains(&self.pos) {
            return false;
        }
        let from = (self.pos - range.start) as usize;
        let n = (self.buf.len() - from).min(want - out.len());
        out.extend_from_slice(&self.buf[from..from + n]);
        self.pos += n as u64;
        true
    }

    async fn read_buffered(&mut self, len: usize) -> Result<Vec<u8>> {
        let want = self.remaining(len);
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.copy_from_buffer(&mut out, want) {
                continue;
            }
            let fill = self.iobufsize.min(self.size - self.pos);
            self.buf = self.request(self.pos, fill).await?;
            self.buf_start = self.pos;
        }
        Ok(out)
    }

    async fn read_pushed(&mut self, len: usize) -> Result<Vec<u8>> {
        let want = self.remaining(len);
        let data = self.mode == ReadMode::Stream;
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.copy_from_buffer(&mut out, want) {
                continue;
            }
            if !(self.run_active && self.stream_pos <= self.pos) {
                self.restart(self.pos).await?;
            }
            let (off, payload) = self.next_chunk(data).await?;
            if self.markers_to_skip > 0 {
                if payload.is_empty() {
                    self.markers_to_skip -= 1;
                }
                continue;
            }
            if payload.is_empty() {
                self.run_active = false;
                continue;
            }
            if off != self.stream_pos {
                return Err(Error::Protocol(format!(
                    "pushed chunk at {off}, expected {}",
                    self.stream_pos
                )));
            }
            self.stream_pos += payload.len() as u64;
            self.buf_start = off;
            self.buf = payload;
        }
        Ok(out)
    }

    /// Abandons the current push, if any, and starts a new one at `offset`.
    async fn restart(&mut self, offset: u64) -> Result<()> {
        let h = self.handle_id;
        if self.mode == ReadMode::Stream {
            self.ctrl.send(Message::SeekRequest { handle_id: h, offset }).await?;
        } else {
            if self.run_active {
                self.ctrl.send(Message::ControlInterrupt { handle_id: h }).await?;
            }
            self.ctrl.send(Message::StreamStart { handle_id: h, offset }).await?;
        }
        if self.run_active {
            self.markers_to_skip += 1;
        }
        self.run_active = true;
        self.stream_pos = offset;
        Ok(())
    }
}
