//! Disk server: pool storage, the disk cost model and per-session serving
//! of the four read modes.
//!
//! Every file read goes through one [`DiskScheduler`] worker, which charges
//! modelled service time (a seek when a session's access is discontiguous,
//! plus transfer at the sequential bandwidth) and serves sessions
//! round-robin. Reads are split into operations of at most
//! [`MAX_CHUNK`] bytes, so the round-robin shares bandwidth at chunk
//! granularity.
//!
//! End of a pushed stream (EOF or interrupt) is signalled by an empty
//! `DataChunk` whose offset is where the push stopped. Each
//! `StreamStart` produces exactly one such marker.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use futures::channel::{mpsc, oneshot};
use futures::StreamExt;
use log::debug;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::headnode::{error_reply, TicketBook};
use crate::runtime::{secs_to_duration, Clock, Connection};
use crate::wire::{Message, ReadMode, MAX_CHUNK};

pub const DEFAULT_DISK_PORT: u16 = 5001;

/// 64-bit content digest: the first eight bytes of SHA-256, big-endian.
#[derive(Default, Clone)]
pub struct Checksum(Sha256);

impl Checksum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finish(self) -> u64 {
        let d = self.0.finalize();
        u64::from_be_bytes(d[..8].try_into().expect("sha256 is 32 bytes"))
    }

    pub fn of(data: &[u8]) -> u64 {
        let mut c = Self::new();
        c.update(data);
        c.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolFile {
    pub path: String,
    pub location: PathBuf,
    pub size: u64,
    pub checksum: u64,
}

/// Flat directory of files named by a hash of their namespace path, with a
/// `pool.manifest` sidecar (`path \t file \t size \t checksum`).
#[derive(Debug)]
pub struct Pool {
    dir: PathBuf,
    files: RwLock<BTreeMap<String, PoolFile>>,
    open: Mutex<HashMap<String, Arc<File>>>,
}

impl Pool {
    pub const MANIFEST: &'static str = "pool.manifest";

    /// Opens a pool directory, creating it if needed.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut files = BTreeMap::new();
        let manifest = dir.join(Self::MANIFEST);
        if manifest.exists() {
            for line in BufReader::new(File::open(&manifest)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let bad = || Error::Config(format!("bad pool manifest record '{line}'"));
                let f: Vec<&str> = line.split('\t').collect();
                let [path, name, size, sum] = f[..] else {
                    return Err(bad());
                };
                files.insert(
                    path.to_string(),
                    PoolFile {
                        path: path.to_string(),
                        location: dir.join(name),
                        size: size.parse().map_err(|_| bad())?,
                        checksum: u64::from_str_radix(sum, 16).map_err(|_| bad())?,
                    },
                );
            }
        }
        Ok(Self {
            dir,
            files: RwLock::new(files),
            open: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// File name used for a namespace path.
    pub fn file_name(path: &str) -> String {
        let d = Sha256::digest(path.as_bytes());
        let hex: String = d[..8].iter().map(|b| format!("{b:02x}")).collect();
        format!("{hex}.dat")
    }

    /// Writes a file of `size` bytes, asking `fill` for content one block
    /// at a time. `fill` receives the block's offset.
    pub fn store_with(&self, path: &str, size: u64, mut fill: impl FnMut(u64, &mut [u8])) -> Result<PoolFile> {
        if self.files.read().expect("pool lock").contains_key(path) {
            return Err(Error::AlreadyExists(path.to_string()));
        }
        let location = self.dir.join(Self::file_name(path));
        let result = (|| {
            let mut out = BufWriter::new(File::create(&location)?);
            let mut sum = Checksum::new();
            let mut block = vec![0u8; 1 << 20];
            let mut off = 0u64;
            while off < size {
                let n = (size - off).min(block.len() as u64) as usize;
                fill(off, &mut block[..n]);
                sum.update(&block[..n]);
                out.write_all(&block[..n])?;
                off += n as u64;
            }
            out.flush()?;
            Ok::<_, Error>(sum.finish())
        })();
        let checksum = match result {
            Ok(c) => c,
            Err(e) => {
                let _ = fs::remove_file(&location);
                return Err(e);
            }
        };
        let pf = PoolFile {
            path: path.to_string(),
            location,
            size,
            checksum,
        };
        self.files.write().expect("pool lock").insert(path.to_string(), pf.clone());
        self.write_manifest()?;
        Ok(pf)
    }

    pub fn store(&self, path: &str, data: &[u8]) -> Result<PoolFile> {
        self.store_with(path, data.len() as u64, |off, buf| {
            let off = off as usize;
            buf.copy_from_slice(&data[off..off + buf.len()]);
        })
    }

    /// Deletes a file and its manifest record.
    pub fn remove(&self, path: &str) -> Result<()> {
        let pf = self.files.write().expect("pool lock").remove(path);
        self.open.lock().expect("pool lock").remove(path);
        if let Some(pf) = pf {
            match fs::remove_file(&pf.location) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
            self.write_manifest()?;
        }
        Ok(())
    }

    fn write_manifest(&self) -> Result<()> {
        let files = self.files.read().expect("pool lock");
        let tmp = self.dir.join(format!("{}.tmp", Self::MANIFEST));
        {
            let mut out = BufWriter::new(File::create(&tmp)?);
            for f in files.values() {
                let name = f.location.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                writeln!(out, "{}\t{}\t{}\t{:016x}", f.path, name, f.size, f.checksum)?;
            }
            out.flush()?;
        }
        fs::rename(tmp, self.dir.join(Self::MANIFEST))?;
        Ok(())
    }

    /// Looks up a file, checking that it is still present on disk.
    pub fn get(&self, path: &str) -> Result<PoolFile> {
        let pf = self
            .files
            .read()
            .expect("pool lock")
            .get(path)
            .cloned()
            .ok_or_else(|| Error::StaleReplica(path.to_string()))?;
        match fs::metadata(&pf.location) {
            Ok(m) if m.len() == pf.size => Ok(pf),
            _ => Err(Error::StaleReplica(path.to_string())),
        }
    }

    pub fn files(&self) -> Vec<PoolFile> {
        self.files.read().expect("pool lock").values().cloned().collect()
    }

    /// Reads up to `len` bytes at `offset`, clamped at end of file.
    pub fn read_at(&self, path: &str, offset: u64, len: usize) -> Result<Vec<u8>> {
        let file = {
            let mut open = self.open.lock().expect("pool lock");
            match open.get(path) {
                Some(f) => f.clone(),
                None => {
                    let pf = self.get(path)?;
                    let f = Arc::new(OpenOptions::new().read(true).open(&pf.location)?);
                    open.insert(path.to_string(), f.clone());
                    f
                }
            }
        };
        let size = file.metadata()?.len();
        let n = size.saturating_sub(offset).min(len as u64) as usize;
        let mut buf = vec![0u8; n];
        file.read_exact_at(&mut buf, offset)?;
        Ok(buf)
    }
}

/// Disk cost model.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskModel {
    /// Charged when an access does not continue where the session's
    /// previous access ended.
    pub seek_latency: Duration,
    /// Aggregate bytes/s.
    pub sequential_bandwidth: f64,
}

impl Default for DiskModel {
    fn default() -> Self {
        Self {
            seek_latency: Duration::from_millis(8),
            sequential_bandwidth: 80.0 * 1024.0 * 1024.0,
        }
    }
}

impl DiskModel {
    pub fn validate(&self) -> Result<()> {
        if self.seek_latency.is_zero() || !(self.sequential_bandwidth > 0.0 && self.sequential_bandwidth.is_finite()) {
            return Err(Error::Config("disk model parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn service_time(&self, seek: bool, len: usize) -> Duration {
        let transfer = secs_to_duration(len as f64 / self.sequential_bandwidth);
        if seek {
            self.seek_latency + transfer
        } else {
            transfer
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiskStats {
    pub ops: u64,
    pub bytes: u64,
    pub seeks: u64,
    /// Modelled disk time consumed.
    pub busy: Duration,
}

struct DiskOp {
    session: u64,
    path: Arc<str>,
    offset: u64,
    len: usize,
    done: oneshot::Sender<Result<Vec<u8>>>,
}

enum DiskRequest {
    Read(DiskOp),
    Forget(u64),
}

/// Handle used by sessions to submit reads to the disk worker.
#[derive(Clone)]
pub struct DiskHandle {
    tx: mpsc::UnboundedSender<DiskRequest>,
    stats: Arc<Mutex<DiskStats>>,
}

impl DiskHandle {
    pub async fn read(&self, session: u64, path: Arc<str>, offset: u64, len: usize) -> Result<Vec<u8>> {
        let (done, rx) = oneshot::channel();
        self.tx
            .unbounded_send(DiskRequest::Read(DiskOp {
                session,
                path,
                offset,
                len,
                done,
            }))
            .map_err(|_| Error::Closed)?;
        rx.await.map_err(|_| Error::Closed)?
    }

    /// Drops per-session seek state.
    pub fn forget(&self, session: u64) {
        let _ = self.tx.unbounded_send(DiskRequest::Forget(session));
    }

    pub fn stats(&self) -> DiskStats {
        self.stats.lock().expect("disk stats lock").clone()
    }
}

/// Single disk worker serving sessions round-robin.
pub struct DiskScheduler<K: Clock> {
    clock: K,
    pool: Arc<Pool>,
    model: DiskModel,
    rx: mpsc::UnboundedReceiver<DiskRequest>,
    stats: Arc<Mutex<DiskStats>>,
}

impl<K: Clock> DiskScheduler<K> {
    pub fn new(clock: K, pool: Arc<Pool>, model: DiskModel) -> Result<(Self, DiskHandle)> {
        model.validate()?;
        let (tx, rx) = mpsc::unbounded();
        let stats = Arc::new(Mutex::new(DiskStats::default()));
        Ok((
            Self {
                clock,
                pool,
                model,
                rx,
                stats: stats.clone(),
            },
            DiskHandle { tx, stats },
        ))
    }

    /// Runs until every [`DiskHandle`] is dropped.
    pub async fn run(mut self) {
        let mut queues: BTreeMap<u64, VecDeque<DiskOp>> = BTreeMap::new();
        let mut last_end: HashMap<u64, u64> = HashMap::new();
        let mut cursor = 0u64;
        let mut closed = false;
        loop {
            while !closed {
                match self.rx.try_recv() {
                    Ok(req) => Self::accept(req, &mut queues, &mut last_end),
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Closed) => closed = true,
                }
            }
            if queues.is_empty() {
                if closed {
                    return;
                }
                match self.rx.next().await {
                    Some(req) => Self::accept(req, &mut queues, &mut last_end),
                    None => closed = true,
                }
                continue;
            }
            let session = *queues
                .range(cursor + 1..)
                .next()
                .or_else(|| queues.iter().next())
                .expect("non-empty")
                .0;
            cursor = session;
            let q = queues.get_mut(&session).expect("queue exists");
            let op = q.pop_front().expect("queue non-empty");
            if q.is_empty() {
                queues.remove(&session);
            }
            if op.done.is_canceled() {
                continue;
            }
            let prev = last_end.get(&op.session).copied().unwrap_or(0);
            let seek = prev != op.offset;
            let result = self.pool.read_at(&op.path, op.offset, op.len);
            let n = result.as_ref().map(|b| b.len()).unwrap_or(0);
            let service = self.model.service_time(seek, n);
            {
                let mut s = self.stats.lock().expect("disk stats lock");
                s.ops += 1;
                s.bytes += n as u64;
                s.seeks += seek as u64;
                s.busy += service;
            }
            self.clock.sleep(service).await;
            last_end.insert(op.session, op.offset + n as u64);
            let _ = op.done.send(result);
        }
    }

    fn accept(req: DiskRequest, queues: &mut BTreeMap<u64, VecDeque<DiskOp>>, last_end: &mut HashMap<u64, u64>) {
        match req {
            DiskRequest::Read(op) => queues.entry(op.session).or_default().push_back(op),
            DiskRequest::Forget(s) => {
                last_end.remove(&s);
            }
        }
    }
}

/// Per-session counters, kept after the session closes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionStats {
    pub handle_id: u64,
    pub path: String,
    pub mode: ReadMode,
    pub iobufsize: u32,
    pub read_requests: u64,
    pub streams_started: u64,
    pub bytes_sent_wire: u64,
    pub closed: bool,
}

enum StreamCmd {
    Seek(u64),
    Interrupt,
}

struct StreamPort {
    cmds: mpsc::UnboundedReceiver<StreamCmd>,
    session: Arc<SessionShared>,
}

struct SessionShared {
    handle_id: u64,
    path: Arc<str>,
    size: u64,
    stats: Mutex<SessionStats>,
}

impl SessionShared {
    fn bump(&self, f: impl FnOnce(&mut SessionStats)) {
        f(&mut self.stats.lock().expect("session lock"));
    }
}

/// Serves file data to clients holding headnode tickets.
pub struct DiskServer<K: Clock> {
    clock: K,
    pool: Arc<Pool>,
    tickets: Arc<TicketBook>,
    disk: DiskHandle,
    sessions: Mutex<BTreeMap<u64, Arc<SessionShared>>>,
    ports: Mutex<HashMap<u64, StreamPort>>,
}

fn marker(handle_id: u64, offset: u64) -> Message {
    Message::DataChunk {
        handle_id,
        offset,
        payload: Vec::new(),
    }
}

impl<K: Clock> DiskServer<K> {
    pub fn new(clock: K, pool: Arc<Pool>, tickets: Arc<TicketBook>, disk: DiskHandle) -> Self {
        Self {
            clock,
            pool,
            tickets,
            disk,
            sessions: Mutex::new(BTreeMap::new()),
            ports: Mutex::new(HashMap::new()),
        }
    }

    pub fn pool(&self) -> &Arc<Pool> {
        &self.pool
    }

    pub fn disk(&self) -> &DiskHandle {
        &self.disk
    }

    pub fn clock(&self) -> &K {
        &self.clock
    }

    /// Counters for every session opened so far.
    pub fn session_stats(&self) -> Vec<SessionStats> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .values()
            .map(|s| s.stats.lock().expect("session lock").clone())
            .collect()
    }

    pub fn session(&self, handle_id: u64) -> Option<SessionStats> {
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(&handle_id)
            .map(|s| s.stats.lock().expect("session lock").clone())
    }

    /// Serves one connection. The first message decides its role: an
    /// `OpenRequest` starts a control session, a `StreamStart` attaches a
    /// data connection to an open stream-mode session.
    pub async fn serve<C: Connection>(&self, mut conn: C) {
        let outcome = match conn.recv().await {
            Ok(Message::OpenRequest {
                path,
                mode,
                iobufsize,
                token,
            }) => self.control_session(&mut conn, &path, mode, iobufsize, &token).await,
            Ok(Message::StreamStart { handle_id, offset }) => self.data_connection(&mut conn, handle_id, offset).await,
            Ok(other) => Err(Error::Protocol(format!(
                "unexpected {:?} as first message",
                other.msg_type()
            ))),
            Err(Error::Closed) => Ok(()),
            Err(e) => Err(e),
        };
        match outcome {
            Ok(()) | Err(Error::Closed) => {}
            Err(e) => {
                debug!("disk connection ended: {e}");
                let _ = conn.send(error_reply(&e)).await;
            }
        }
    }

    fn open_session(&self, path: &str, mode: ReadMode, iobufsize: u32, token: &str) -> Result<Arc<SessionShared>> {
        if iobufsize == 0 {
            return Err(Error::Protocol("iobufsize must be positive".into()));
        }
        let pf = self.pool.get(path)?;
        let ticket = self.tickets.redeem(token, path)?;
        let shared = Arc::new(SessionShared {
            handle_id: ticket.handle_id,
            path: Arc::from(path),
            size: pf.size,
            stats: Mutex::new(SessionStats {
                handle_id: ticket.handle_id,
                path: path.to_string(),
                mode,
                iobufsize,
                read_requests: 0,
                streams_started: 0,
                bytes_sent_wire: 0,
                closed: false,
            }),
        });
        self.sessions
            .lock()
            .expect("sessions lock")
            .insert(ticket.handle_id, shared.clone());
        Ok(shared)
    }

    fn end_session(&self, s: &SessionShared) {
        s.bump(|st| st.closed = true);
        self.ports.lock().expect("ports lock").remove(&s.handle_id);
        self.tickets.release(s.handle_id);
        self.disk.forget(s.handle_id);
    }

    async fn control_session<C: Connection>(
        &self,
        conn: &mut C,
        path: &str,
        mode: ReadMode,
        iobufsize: u32,
        token: &str,
    ) -> Result<()> {
        let s = match self.open_session(path, mode, iobufsize, token) {
            Ok(s) => s,
            Err(e) => {
                conn.send(error_reply(&e)).await?;
                return Ok(());
            }
        };
        conn.send(Message::OpenReply {
            handle_id: s.handle_id,
            file_size: s.size,
        })
        .await?;
        let result = if mode == ReadMode::Stream {
            self.stream_control(conn, &s).await
        } else {
            let chunk = (iobufsize as usize).min(MAX_CHUNK);
            self.request_loop(conn, &s, mode, chunk).await
        };
        self.end_session(&s);
        result
    }

    /// Sends `min(length, size - offset)` bytes as chunks; a zero-length
    /// result is sent as one empty chunk.
    async fn serve_read<C: Connection>(&self, conn: &mut C, s: &SessionShared, offset: u64, length: u64) -> Result<()> {
        let end = offset + length.min(s.size - offset);
        if end == offset {
            return conn.send(marker(s.handle_id, offset)).await;
        }
        let mut off = offset;
        while off < end {
            let n = ((end - off) as usize).min(MAX_CHUNK);
            let payload = self.disk.read(s.handle_id, s.path.clone(), off, n).await?;
            let n = payload.len() as u64;
            if n == 0 {
                return Err(Error::StaleReplica(s.path.to_string()));
            }
            conn.send(Message::DataChunk {
                handle_id: s.handle_id,
                offset: off,
                payload,
            })
            .await?;
            s.bump(|st| st.bytes_sent_wire += n);
            off += n;
        }
        Ok(())
    }

    /// Control loop for NORMAL, READBUF and READAHEAD sessions. A
    /// READAHEAD push runs between requests, one chunk at a time, each
    /// chunk flushed before the next disk read.
    async fn request_loop<C: Connection>(&self, conn: &mut C, s: &SessionShared, mode: ReadMode, chunk: usize) -> Result<()> {
        let h = s.handle_id;
        let mut push: Option<u64> = None;
        loop {
            let msg = match push {
                Some(off) => match conn.try_recv()? {
                    Some(m) => m,
                    None => {
                        if off >= s.size {
                            conn.send(marker(h, s.size)).await?;
                            push = None;
                            continue;
                        }
                        let n = ((s.size - off) as usize).min(chunk);
                        let payload = self.disk.read(h, s.path.clone(), off, n).await?;
                        let n = payload.len() as u64;
                        conn.send(Message::DataChunk {
                            handle_id: h,
                            offset: off,
                            payload,
                        })
                        .await?;
                        conn.flush().await?;
                        s.bump(|st| st.bytes_sent_wire += n);
                        push = Some(off + n);
                        continue;
                    }
                },
                None => conn.recv().await?,
            };
            let target = match &msg {
                Message::ReadRequest { handle_id, .. }
                | Message::SeekRequest { handle_id, .. }
                | Message::StreamStart { handle_id, .. }
                | Message::ControlInterrupt { handle_id }
                | Message::CloseRequest { handle_id } => *handle_id,
                other => {
                    return Err(Error::Protocol(format!(
                        "unexpected {:?} on control connection",
                        other.msg_type()
                    )))
                }
            };
            if target != h {
                conn.send(error_reply(&Error::StaleHandle(target))).await?;
                continue;
            }
            match msg {
                Message::ReadRequest { offset, length, .. } => {
                    if let Some(off) = push.take() {
                        conn.send(marker(h, off)).await?;
                    }
                    s.bump(|st| st.read_requests += 1);
                    if offset > s.size {
                        conn.send(error_reply(&Error::Range { offset, size: s.size })).await?;
                        continue;
                    }
                    self.serve_read(conn, s, offset, length).await?;
                }
                Message::SeekRequest { offset, .. } => {
                    if let Some(off) = push.take() {
                        conn.send(marker(h, off)).await?;
                    }
                    if offset > s.size {
                        conn.send(error_reply(&Error::Range { offset, size: s.size })).await?;
                        continue;
                    }
                    conn.send(Message::SeekRequest { handle_id: h, offset }).await?;
                }
                Message::StreamStart { offset, .. } => {
                    if !mode.is_push() {
                        conn.send(error_reply(&Error::Protocol(format!("{mode} sessions cannot stream"))))
                            .await?;
                    } else if push.is_some() {
                        conn.send(error_reply(&Error::Protocol("stream already active".into())))
                            .await?;
                    } else if offset > s.size {
                        conn.send(error_reply(&Error::Range { offset, size: s.size })).await?;
                    } else {
                        s.bump(|st| st.streams_started += 1);
                        push = Some(offset);
                    }
                }
                Message::ControlInterrupt { .. } => {
                    if let Some(off) = push.take() {
                        conn.send(marker(h, off)).await?;
                    }
                }
                Message::CloseRequest { .. } => return Ok(()),
                _ => unreachable!("filtered above"),
            }
        }
    }

    /// Control side of a STREAM session: forwards seeks and interrupts to
    /// the data connection.
    async fn stream_control<C: Connection>(&self, conn: &mut C, s: &Arc<SessionShared>) -> Result<()> {
        let h = s.handle_id;
        let (tx, rx) = mpsc::unbounded();
        self.ports.lock().expect("ports lock").insert(
            h,
            StreamPort {
                cmds: rx,
                session: s.clone(),
            },
        );
        loop {
            match conn.recv().await? {
                Message::SeekRequest { handle_id, offset } if handle_id == h => {
                    if offset > s.size {
                        conn.send(error_reply(&Error::Range { offset, size: s.size })).await?;
                    } else {
                        let _ = tx.unbounded_send(StreamCmd::Seek(offset));
                    }
                }
                Message::ControlInterrupt { handle_id } if handle_id == h => {
                    let _ = tx.unbounded_send(StreamCmd::Interrupt);
                }
                Message::CloseRequest { handle_id } if handle_id == h => return Ok(()),
                Message::ReadRequest { .. } | Message::StreamStart { .. } => {
                    return Err(Error::Protocol(
                        "stream sessions take data requests on the data connection only".into(),
                    ))
                }
                Message::SeekRequest { handle_id, .. }
                | Message::ControlInterrupt { handle_id }
                | Message::CloseRequest { handle_id } => {
                    conn.send(error_reply(&Error::StaleHandle(handle_id))).await?;
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "unexpected {:?} on control connection",
                        other.msg_type()
                    )))
                }
            }
        }
    }

    /// Data side of a STREAM session. Pushes chunks without waiting for
    /// them to leave, so disk reads overlap transmission.
    async fn data_connection<C: Connection>(&self, conn: &mut C, handle_id: u64, offset: u64) -> Result<()> {
        let Some(StreamPort { mut cmds, session: s }) = self.ports.lock().expect("ports lock").remove(&handle_id) else {
            return Err(Error::StaleHandle(handle_id));
        };
        if offset > s.size {
            return Err(Error::Range { offset, size: s.size });
        }
        let h = s.handle_id;
        s.bump(|st| st.streams_started += 1);
        let mut push = Some(offset);
        loop {
            let cmd = match push {
                Some(off) => match cmds.try_recv() {
                    Ok(c) => Some(c),
                    Err(mpsc::TryRecvError::Closed) => return Ok(()),
                    Err(mpsc::TryRecvError::Empty) => {
                        if off >= s.size {
                            conn.send(marker(h, s.size)).await?;
                            push = None;
                            continue;
                        }
                        let n = ((s.size - off) as usize).min(MAX_CHUNK);
                        let payload = self.disk.read(h, s.path.clone(), off, n).await?;
                        let n = payload.len() as u64;
                        conn.send(Message::DataChunk {
                            handle_id: h,
                            offset: off,
                            payload,
                        })
                        .await?;
                        s.bump(|st| st.bytes_sent_wire += n);
                        push = Some(off + n);
                        continue;
                    }
                },
                None => cmds.next().await,
            };
            match cmd {
                None => return Ok(()),
                Some(StreamCmd::Interrupt) => {
                    if let Some(off) = push.take() {
                        conn.send(marker(h, off)).await?;
                    }
                }
                Some(StreamCmd::Seek(o)) => {
                    if let Some(off) = push.take() {
                        conn.send(marker(h, off)).await?;
                    }
                    s.bump(|st| st.streams_started += 1);
                    push = Some(o);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(off: u64, buf: &mut [u8]) {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = ((off + i as u64) % 253) as u8;
        }
    }

    #[test]
    fn pool_roundtrip_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let pool = Pool::open(dir.path()).unwrap();
        let pf = pool.store_with("/pool/f000", 3 << 20, pattern).unwrap();
        let mut whole = vec![0u8; 3 << 20];
        pattern(0, &mut whole);
        assert_eq!(pf.checksum, Checksum::of(&whole));
        assert_eq!(pool.read_at("/pool/f000", 0, 128 << 10).unwrap(), whole[..128 << 10]);
        let size = 3u64 << 20;
        assert_eq!(pool.read_at("/pool/f000", size - 10, 1 << 20).unwrap().len(), 10);
        assert!(matches!(pool.store("/pool/f000", b"x"), Err(Error::AlreadyExists(_))));
        drop(pool);

        let pool = Pool::open(dir.path()).unwrap();
        assert_eq!(pool.get("/pool/f000").unwrap(), pf);
        fs::remove_file(&pf.location).unwrap();
        assert!(matches!(pool.get("/pool/f000"), Err(Error::StaleReplica(_))));
        pool.remove("/pool/f000").unwrap();
        assert!(pool.files().is_empty());
    }

    #[test]
    fn service_time_charges_seeks() {
        let m = DiskModel::default();
        assert_eq!(m.service_time(false, 80 << 20), Duration::from_secs(1));
        assert_eq!(m.service_time(true, 0), Duration::from_millis(8));
        assert!(DiskModel {
            seek_latency: Duration::ZERO,
            ..m
        }
        .validate()
        .is_err());
    }
}
