//! Namespace and open-brokering service.
//!
//! Two listeners share one [`Headnode`]: the namespace port answers
//! `NsLookup`, the broker port turns an `OpenRequest` into a ticket after a
//! modelled queueing delay. Tickets are redeemed by the disk server through
//! the shared [`TicketBook`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use log::{debug, warn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::runtime::{Clock, Connection};
use crate::wire::Message;

pub const DEFAULT_BROKER_PORT: u16 = 5015;
pub const DEFAULT_NAMESPACE_PORT: u16 = 5010;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamespaceEntry {
    pub path: String,
    pub size: u64,
    pub replica_address: String,
    pub checksum: u64,
}

impl NamespaceEntry {
    /// One manifest record: `path \t size \t replica \t checksum`.
    pub fn to_manifest_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:016x}",
            self.path, self.size, self.replica_address, self.checksum
        )
    }

    pub fn parse_manifest_line(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad manifest record '{line}'"));
        let mut fields = line.split('\t');
        let (Some(path), Some(size), Some(replica), Some(sum), None) = (
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
        ) else {
            return Err(bad());
        };
        Ok(Self {
            path: path.to_string(),
            size: size.parse().map_err(|_| bad())?,
            replica_address: replica.to_string(),
            checksum: u64::from_str_radix(sum, 16).map_err(|_| bad())?,
        })
    }
}

fn check_field(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(Error::Config(format!("invalid {what} '{s}'")));
    }
    Ok(())
}

/// Path → replica map, optionally persisted as an append-only manifest.
#[derive(Debug, Default)]
pub struct Namespace {
    entries: RwLock<BTreeMap<String, NamespaceEntry>>,
    manifest: Option<(PathBuf, Mutex<File>)>,
}

impl Namespace {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a manifest-backed namespace, replaying existing
    /// records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = BTreeMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e = NamespaceEntry::parse_manifest_line(&line)?;
                if entries.insert(e.path.clone(), e.clone()).is_some() {
                    return Err(Error::Config(format!("duplicate path {} in manifest", e.path)));
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            manifest: Some((path.to_path_buf(), Mutex::new(file))),
        })
    }

    pub fn manifest_path(&self) -> Option<&Path> {
        self.manifest.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn register(&self, path: &str, size: u64, replica_address: &str, checksum: u64) -> Result<NamespaceEntry> {
        check_field("path", path)?;
        check_field("replica address", replica_address)?;
        let entry = NamespaceEntry {
            path: path.to_string(),
            size,
            replica_address: replica_address.to_string(),
            checksum,
        };
        let mut entries = self.entries.write().expect("namespace lock");
        if entries.contains_key(path) {
            return Err(Error::AlreadyExists(path.to_string()));
        }
        if let Some((_, file)) = &self.manifest {
            let mut f = file.lock().expect("manifest lock");
            writeln!(f, "{}", entry.to_manifest_line())?;
            f.flush()?;
        }
        entries.insert(path.to_string(), entry.clone());
        Ok(entry)
    }

    pub fn lookup(&self, path: &str) -> Result<NamespaceEntry> {
        self.entries
            .read()
            .expect("namespace lock")
            .get(path)
            .cloned()
            .ok_or_else(|| Error::NotFound(path.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("namespace lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries in path order.
    pub fn entries(&self) -> Vec<NamespaceEntry> {
        self.entries.read().expect("namespace lock").values().cloned().collect()
    }
}

/// Referral binding one client session to a disk-server replica.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenTicket {
    pub handle_id: u64,
    pub path: String,
    pub replica_address: String,
    pub token: String,
    pub issued_at: Duration,
}

/// Session token presented to the disk server for `handle_id`.
///
/// Both the client and the disk server hold the shared secret, so either
/// side can compute it; the headnode's ticket book is what makes it valid.
pub fn ticket_token(secret: &str, handle_id: u64) -> String {
    let mut h = Sha256::new();
    h.update(secret.as_bytes());
    h.update(handle_id.to_be_bytes());
    let digest = h.finalize();
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("{handle_id}:{hex}")
}

#[derive(Debug)]
struct TicketState {
    ticket: OpenTicket,
    redeemed: bool,
}

/// Issued tickets, shared between the headnode and its disk servers.
#[derive(Debug)]
pub struct TicketBook {
    secret: String,
    next: AtomicU64,
    live: Mutex<HashMap<u64, TicketState>>,
}

impl TicketBook {
    pub fn new(secret: impl Into<String>) -> Self {
        Self {
            secret: secret.into(),
            next: AtomicU64::new(1),
            live: Mutex::new(HashMap::new()),
        }
    }

    pub fn secret(&self) -> &str {
        &self.secret
    }

    pub fn issue(&self, entry: &NamespaceEntry, issued_at: Duration) -> OpenTicket {
        let handle_id = self.next.fetch_add(1, Ordering::Relaxed);
        let ticket = OpenTicket {
            handle_id,
            path: entry.path.clone(),
            replica_address: entry.replica_address.clone(),
            token: ticket_token(&self.secret, handle_id),
            issued_at,
        };
        self.live.lock().expect("ticket lock").insert(
            handle_id,
            TicketState {
                ticket: ticket.clone(),
                redeemed: false,
            },
        );
        ticket
    }

    /// Validates a disk-side open. Each ticket can be redeemed once, for
    /// the path it was issued for.
    pub fn redeem(&self, token: &str, path: &str) -> Result<OpenTicket> {
        let handle_id: u64 = token
            .split_once(':')
            .and_then(|(h, _)| h.parse().ok())
            .ok_or(Error::Auth)?;
        if ticket_token(&self.secret, handle_id) != token {
            return Err(Error::Auth);
        }
        let mut live = self.live.lock().expect("ticket lock");
        let state = live.get_mut(&handle_id).ok_or(Error::Auth)?;
        if state.redeemed || state.ticket.path != path {
            return Err(Error::Auth);
        }
        state.redeemed = true;
        Ok(state.ticket.clone())
    }

    /// Forgets a ticket once its session has closed.
    pub fn release(&self, handle_id: u64) {
        self.live.lock().expect("ticket lock").remove(&handle_id);
    }

    pub fn live(&self) -> usize {
        self.live.lock().expect("ticket lock").len()
    }
}

/// Parameters of the serialized open path.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenQueueModel {
    pub service_time: Duration,
    pub workers: usize,
    /// Opens allowed to wait at once; further arrivals are rejected.
    pub queue_cap: usize,
}

impl Default for OpenQueueModel {
    fn default() -> Self {
        Self {
            service_time: Duration::from_millis(50),
            workers: 1,
            queue_cap: 1024,
        }
    }
}

impl OpenQueueModel {
    pub fn validate(&self) -> Result<()> {
        if self.service_time.is_zero() {
            return Err(Error::Config("open service time must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("open queue needs at least one worker".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct QueueState {
    free_at: Vec<Duration>,
    /// Start times of admitted opens, non-decreasing.
    starts: VecDeque<Duration>,
}

/// FIFO queue with `workers` servers of fixed service time.
///
/// Scheduling is computed on arrival, so the delay an open experiences is
/// exact in virtual time and independent of task polling order.
#[derive(Debug)]
pub struct OpenQueue<K: Clock> {
    clock: K,
    model: OpenQueueModel,
    state: Mutex<QueueState>,
    rejected: AtomicU64,
}

impl<K: Clock> OpenQueue<K> {
    pub fn new(clock: K, model: OpenQueueModel) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            state: Mutex::new(QueueState {
                free_at: vec![Duration::ZERO; model.workers],
                starts: VecDeque::new(),
            }),
            clock,
            model,
            rejected: AtomicU64::new(0),
        })
    }

    pub fn model(&self) -> &OpenQueueModel {
        &self.model
    }

    /// Waits out queueing plus service. Returns the total delay.
    pub async fn admit(&self) -> Result<Duration> {
        let now = self.clock.now();
        let finish = {
            let mut st = self.state.lock().expect("queue lock");
            while st.starts.front().is_some_and(|&s| s <= now) {
                st.starts.pop_front();
            }
            if st.starts.len() >= self.model.queue_cap {
                self.rejected.fetch_add(1, Ordering::Relaxed);
                return Err(Error::QueueOverflow(st.starts.len()));
            }
            let (idx, &free) = st
                .free_at
                .iter()
                .enumerate()
                .min_by_key(|&(i, t)| (*t, i))
                .expect("at least one worker");
            let start = now.max(free);
            let finish = start + self.model.service_time;
            st.free_at[idx] = finish;
            if start > now {
                st.starts.push_back(start);
            }
            finish
        };
        self.clock.sleep_until(finish).await;
        Ok(finish - now)
    }

    /// Opens turned away because the queue was full.
    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeadnodeStats {
    pub lookups: u64,
    pub opens: u64,
    pub open_errors: u64,
    pub queue_rejections: u64,
}

/// Namespace plus open broker.
pub struct Headnode<K: Clock> {
    clock: K,
    namespace: Arc<Namespace>,
    tickets: Arc<TicketBook>,
    queue: OpenQueue<K>,
    stats: Mutex<HeadnodeStats>,
}

impl<K: Clock> Headnode<K> {
    pub fn new(clock: K, namespace: Arc<Namespace>, tickets: Arc<TicketBook>, queue: OpenQueueModel) -> Result<Self> {
        Ok(Self {
            queue: OpenQueue::new(clock.clone(), queue)?,
            clock,
            namespace,
            tickets,
            stats: Mutex::new(HeadnodeStats::default()),
        })
    }

    pub fn namespace(&self) -> &Arc<Namespace> {
        &self.namespace
    }

    pub fn tickets(&self) -> &Arc<TicketBook> {
        &self.tickets
    }

    pub fn stats(&self) -> HeadnodeStats {
        let mut s = self.stats.lock().expect("stats lock").clone();
        s.queue_rejections = self.queue.rejected();
        s
    }

    pub fn lookup(&self, path: &str) -> Result<NamespaceEntry> {
        self.stats.lock().expect("stats lock").lookups += 1;
        self.namespace.lookup(path)
    }

    /// Queues an open and issues a ticket once it has been serviced.
    pub async fn broker_open(&self, path: &str, token: &str) -> Result<OpenTicket> {
        let result = self.broker_open_inner(path, token).await;
        let mut s = self.stats.lock().expect("stats lock");
        match &result {
            Ok(_) => s.opens += 1,
            Err(_) => s.open_errors += 1,
        }
        result
    }

    async fn broker_open_inner(&self, path: &str, token: &str) -> Result<OpenTicket> {
        if token != self.tickets.secret() {
            return Err(Error::Auth);
        }
        let entry = self.namespace.lookup(path)?;
        self.queue.admit().await?;
        Ok(self.tickets.issue(&entry, self.clock.now()))
    }

    /// Serves `NsLookup` requests until the peer disconnects.
    pub async fn serve_namespace<C: Connection>(&self, mut conn: C) {
        loop {
            let reply = match conn.recv().await {
                Ok(Message::NsLookup { path }) => match self.lookup(&path) {
                    Ok(e) => Message::NsLookupReply {
                        replica_address: e.replica_address,
                        file_size: e.size,
                        checksum: e.checksum,
                    },
                    Err(e) => error_reply(&e),
                },
                Ok(other) => {
                    let e = Error::Protocol(format!("unexpected {:?} on namespace port", other.msg_type()));
                    let _ = conn.send(error_reply(&e)).await;
                    return;
                }
                Err(Error::Closed) => return,
                Err(e) => {
                    warn!("namespace connection: {e}");
                    let _ = conn.send(error_reply(&e)).await;
                    return;
                }
            };
            if conn.send(reply).await.is_err() {
                return;
            }
        }
    }

    /// Serves `OpenRequest`s until the peer disconnects.
    pub async fn serve_broker<C: Connection>(&self, mut conn: C) {
        loop {
            let reply = match conn.recv().await {
                Ok(Message::OpenRequest { path, token, .. }) => match self.broker_open(&path, &token).await {
                    Ok(t) => {
                        let size = self.namespace.lookup(&path).map(|e| e.size).unwrap_or(0);
                        debug!("open {path} -> handle {}", t.handle_id);
                        Message::OpenReply {
                            handle_id: t.handle_id,
                            file_size: size,
                        }
                    }
                    Err(e) => error_reply(&e),
                },
                Ok(other) => {
                    let e = Error::Protocol(format!("unexpected {:?} on broker port", other.msg_type()));
                    let _ = conn.send(error_reply(&e)).await;
                    return;
                }
                Err(Error::Closed) => return,
                Err(e) => {
                    warn!("broker connection: {e}");
                    let _ = conn.send(error_reply(&e)).await;
                    return;
                }
            };
            if conn.send(reply).await.is_err() {
                return;
            }
        }
    }
}

pub(crate) fn error_reply(e: &Error) -> Message {
    Message::ErrorReply {
        code: e.wire_code(),
        detail: e.wire_detail(),
    }
}
