//! In-process network emulator driven by the virtual-time executor.
//!
//! Every connection is a pair of one-way pipes. A pipe belongs to one
//! direction ("lane") of a link; each lane serializes frames at the link's
//! shared bandwidth, choosing among backlogged pipes by start-time fair
//! queueing on bytes. A pipe may not start frames faster than
//! `window / rtt` (a pacer), and every frame arrives `rtt / 2` after it
//! finishes serializing. Together these give each connection
//! `min(fair share, window / rtt)` in steady state.
//!
//! Unread bytes per pipe are bounded by a buffer of [`PIPE_BUFFER`] bytes;
//! a sender blocks once the receiver falls that far behind.

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::future::{poll_fn, Future};
use std::rc::{Rc, Weak};
use std::task::{Poll, Waker};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::net::LinkProfile;
use crate::runtime::{secs_to_duration, Clock, Connection, Connector, Sim};
use crate::wire::{self, Decoded, Message, MsgType, HEADER_LEN, MAX_CHUNK};

/// Per-pipe buffering: sixteen full data chunks plus their framing.
pub const PIPE_BUFFER: usize = 16 * (MAX_CHUNK + HEADER_LEN + 16);

/// Counters for one direction of a link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LaneStats {
    pub frames: u64,
    pub frame_bytes: u64,
    /// `DataChunk` payload bytes carried.
    pub data_bytes: u64,
    /// Time spent serializing frames.
    pub busy: Duration,
    pub first_start: Option<Duration>,
    pub last_end: Duration,
}

struct Lane {
    bandwidth: f64,
    active: Vec<Rc<RefCell<Pipe>>>,
    vclock: u64,
    waker: Option<Waker>,
    stats: LaneStats,
}

enum LaneStep {
    Transmit(Rc<RefCell<Pipe>>, Vec<u8>),
    WaitUntil(Duration),
}

impl Lane {
    fn select(&mut self, now: Duration) -> Option<LaneStep> {
        self.active.retain(|p| {
            let mut p = p.borrow_mut();
            let keep = !p.queue.is_empty();
            if !keep {
                p.in_lane = false;
            }
            keep
        });
        if self.active.is_empty() {
            return None;
        }
        let mut best: Option<(u64, u64, usize)> = None;
        let mut earliest = Duration::MAX;
        for (i, p) in self.active.iter().enumerate() {
            let p = p.borrow();
            if p.next_allowed > now {
                earliest = earliest.min(p.next_allowed);
                continue;
            }
            let key = (p.tag, p.id);
            if best.is_none_or(|(t, id, _)| key < (t, id)) {
                best = Some((key.0, key.1, i));
            }
        }
        let Some((_, _, idx)) = best else {
            return Some(LaneStep::WaitUntil(earliest));
        };
        let rc = self.active[idx].clone();
        let frame = {
            let mut p = rc.borrow_mut();
            let frame = p.queue.pop_front().expect("active pipe has a frame");
            let len = frame.len() as u64;
            self.vclock = p.tag;
            p.tag += len;
            p.transmitting = true;
            let pace = secs_to_duration(len as f64 * p.pace_secs_per_byte);
            p.next_allowed = p.next_allowed.max(now) + pace;
            frame
        };
        Some(LaneStep::Transmit(rc, frame))
    }
}

struct Pipe {
    id: u64,
    lane: Weak<RefCell<Lane>>,
    queue: VecDeque<Vec<u8>>,
    in_flight: VecDeque<(Duration, Vec<u8>)>,
    transmitting: bool,
    in_lane: bool,
    unread: usize,
    capacity: usize,
    next_allowed: Duration,
    tag: u64,
    one_way: Duration,
    pace_secs_per_byte: f64,
    sender_closed: bool,
    receiver_closed: bool,
    recv_waker: Option<Waker>,
    send_waker: Option<Waker>,
    armed: Option<Duration>,
    sent_bytes: u64,
    delivered_bytes: u64,
}

impl Pipe {
    fn wake_receiver(&mut self) {
        if let Some(w) = self.recv_waker.take() {
            w.wake();
        }
    }

    fn wake_sender(&mut self) {
        if let Some(w) = self.send_waker.take() {
            w.wake();
        }
    }

    fn drained(&self) -> bool {
        self.queue.is_empty() && !self.transmitting
    }
}

struct Link {
    up: Rc<RefCell<Lane>>,
    down: Rc<RefCell<Lane>>,
}

#[derive(Default)]
struct Backlog {
    pending: VecDeque<EmuConn>,
    waker: Option<Waker>,
}

#[derive(Default)]
struct NetInner {
    listeners: BTreeMap<String, Rc<RefCell<Backlog>>>,
    links: BTreeMap<String, Link>,
    next_pipe: u64,
}

/// The emulated network. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Network {
    sim: Sim,
    inner: Rc<RefCell<NetInner>>,
}

impl Network {
    pub fn new(sim: &Sim) -> Self {
        Self {
            sim: sim.clone(),
            inner: Rc::new(RefCell::new(NetInner::default())),
        }
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    /// Registers a service endpoint.
    pub fn listen(&self, addr: &str) -> Result<EmuListener> {
        let mut inner = self.inner.borrow_mut();
        if inner.listeners.contains_key(addr) {
            return Err(Error::AlreadyExists(addr.to_string()));
        }
        let backlog = Rc::new(RefCell::new(Backlog::default()));
        inner.listeners.insert(addr.to_string(), backlog.clone());
        Ok(EmuListener {
            addr: addr.to_string(),
            backlog,
            net: self.clone(),
        })
    }

    fn link(&self, profile: &LinkProfile) -> (Rc<RefCell<Lane>>, Rc<RefCell<Lane>>) {
        let mut inner = self.inner.borrow_mut();
        if let Some(link) = inner.links.get(&profile.name) {
            return (link.up.clone(), link.down.clone());
        }
        let make = || {
            Rc::new(RefCell::new(Lane {
                bandwidth: profile.shared_bandwidth,
                active: Vec::new(),
                vclock: 0,
                waker: None,
                stats: LaneStats::default(),
            }))
        };
        let (up, down) = (make(), make());
        self.sim.spawn(run_lane(self.sim.clone(), up.clone()));
        self.sim.spawn(run_lane(self.sim.clone(), down.clone()));
        inner.links.insert(
            profile.name.clone(),
            Link {
                up: up.clone(),
                down: down.clone(),
            },
        );
        (up, down)
    }

    /// Counters for the client→server (`up`) and server→client (`down`)
    /// directions of the named link.
    pub fn lane_stats(&self, profile_name: &str) -> Option<(LaneStats, LaneStats)> {
        let inner = self.inner.borrow();
        inner
            .links
            .get(profile_name)
            .map(|l| (l.up.borrow().stats.clone(), l.down.borrow().stats.clone()))
    }

    /// Connects to `addr` over `profile`. Completes after one RTT.
    pub async fn connect(&self, addr: &str, profile: &LinkProfile, window: Option<u64>) -> Result<EmuConn> {
        if !self.inner.borrow().listeners.contains_key(addr) {
            return Err(Error::ConnectionRefused(addr.to_string()));
        }
        self.sim.sleep(profile.rtt).await;
        let backlog = self
            .inner
            .borrow()
            .listeners
            .get(addr)
            .cloned()
            .ok_or_else(|| Error::ConnectionRefused(addr.to_string()))?;
        let (up, down) = self.link(profile);
        let window = window.unwrap_or(profile.per_connection_window).max(1);
        let pace = profile.rtt.as_secs_f64() / window as f64;
        let one_way = profile.rtt / 2;
        let new_pipe = |lane: &Rc<RefCell<Lane>>| {
            let mut inner = self.inner.borrow_mut();
            inner.next_pipe += 1;
            Rc::new(RefCell::new(Pipe {
                id: inner.next_pipe,
                lane: Rc::downgrade(lane),
                queue: VecDeque::new(),
                in_flight: VecDeque::new(),
                transmitting: false,
                in_lane: false,
                unread: 0,
                capacity: PIPE_BUFFER,
                next_allowed: Duration::ZERO,
                tag: 0,
                one_way,
                pace_secs_per_byte: pace,
                sender_closed: false,
                receiver_closed: false,
                recv_waker: None,
                send_waker: None,
                armed: None,
                sent_bytes: 0,
                delivered_bytes: 0,
            }))
        };
        let to_server = new_pipe(&up);
        let to_client = new_pipe(&down);
        let server_end = EmuConn {
            sim: self.sim.clone(),
            out: to_client.clone(),
            inp: to_server.clone(),
        };
        let client_end = EmuConn {
            sim: self.sim.clone(),
            out: to_server,
            inp: to_client,
        };
        let mut b = backlog.borrow_mut();
        b.pending.push_back(server_end);
        if let Some(w) = b.waker.take() {
            w.wake();
        }
        Ok(client_end)
    }
}

async fn run_lane(sim: Sim, lane: Rc<RefCell<Lane>>) {
    loop {
        let step = poll_fn(|cx| {
            let mut l = lane.borrow_mut();
            match l.select(sim.now()) {
                Some(step) => Poll::Ready(step),
                None => {
                    l.waker = Some(cx.waker().clone());
                    Poll::Pending
                }
            }
        })
        .await;
        match step {
            LaneStep::WaitUntil(t) => sim.sleep_until(t).await,
            LaneStep::Transmit(pipe, frame) => {
                let start = sim.now();
                let len = frame.len();
                let bandwidth = lane.borrow().bandwidth;
                let d = secs_to_duration(len as f64 / bandwidth);
                sim.sleep(d).await;
                let now = sim.now();
                {
                    let mut l = lane.borrow_mut();
                    let s = &mut l.stats;
                    s.frames += 1;
                    s.frame_bytes += len as u64;
                    s.data_bytes += data_payload_len(&frame);
                    s.busy += d;
                    s.first_start.get_or_insert(start);
                    s.last_end = now;
                }
                let mut p = pipe.borrow_mut();
                p.transmitting = false;
                if !p.receiver_closed {
                    let at = now + p.one_way;
                    p.in_flight.push_back((at, frame));
                    p.wake_receiver();
                }
                if p.queue.is_empty() {
                    p.wake_sender();
                }
            }
        }
    }
}

fn data_payload_len(frame: &[u8]) -> u64 {
    if frame.len() >= HEADER_LEN + 16 && frame[3] == MsgType::DataChunk as u8 {
        (frame.len() - HEADER_LEN - 16) as u64
    } else {
        0
    }
}

/// Accepts connections made to one registered address.
pub struct EmuListener {
    addr: String,
    backlog: Rc<RefCell<Backlog>>,
    net: Network,
}

impl EmuListener {
    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub async fn accept(&self) -> EmuConn {
        poll_fn(|cx| {
            let mut b = self.backlog.borrow_mut();
            match b.pending.pop_front() {
                Some(c) => Poll::Ready(c),
                None => {
                    b.waker = Some(cx.waker().clone());
                    Poll::Pending
                }
            }
        })
        .await
    }
}

impl Drop for EmuListener {
    fn drop(&mut self) {
        self.net.inner.borrow_mut().listeners.remove(&self.addr);
    }
}

/// One end of an emulated connection.
pub struct EmuConn {
    sim: Sim,
    out: Rc<RefCell<Pipe>>,
    inp: Rc<RefCell<Pipe>>,
}

impl EmuConn {
    /// Frame bytes this end has received.
    pub fn delivered_bytes(&self) -> u64 {
        self.inp.borrow().delivered_bytes
    }

    /// Frame bytes this end has handed to the network.
    pub fn sent_bytes(&self) -> u64 {
        self.out.borrow().sent_bytes
    }

    fn poll_frame(&self, waker: Option<&Waker>) -> Poll<Option<Vec<u8>>> {
        let mut p = self.inp.borrow_mut();
        let now = self.sim.now();
        if let Some(&(at, _)) = p.in_flight.front() {
            if at <= now {
                let (_, frame) = p.in_flight.pop_front().expect("front exists");
                p.unread = p.unread.saturating_sub(frame.len());
                p.delivered_bytes += frame.len() as u64;
                p.wake_sender();
                return Poll::Ready(Some(frame));
            }
            if let Some(w) = waker {
                if p.armed != Some(at) {
                    p.armed = Some(at);
                    self.sim.wake_at(at, w.clone());
                }
                p.recv_waker = Some(w.clone());
            }
            return Poll::Pending;
        }
        if p.sender_closed && p.drained() {
            return Poll::Ready(None);
        }
        if let Some(w) = waker {
            p.recv_waker = Some(w.clone());
        }
        Poll::Pending
    }
}

fn decode_whole(frame: &[u8]) -> Result<Message> {
    match wire::decode_frame(frame)? {
        Decoded::Frame { message, consumed } if consumed == frame.len() => Ok(message),
        _ => Err(Error::Protocol("truncated frame on emulated link".into())),
    }
}

impl Connection for EmuConn {
    fn send(&mut self, msg: Message) -> impl Future<Output = Result<()>> {
        let encoded = wire::encode_frame(&msg);
        let mut frame = Some(encoded);
        poll_fn(move |cx| {
            let bytes = match frame.take() {
                None => return Poll::Ready(Ok(())),
                Some(Err(e)) => return Poll::Ready(Err(e.into())),
                Some(Ok(b)) => b,
            };
            let mut p = self.out.borrow_mut();
            if p.receiver_closed || p.sender_closed {
                return Poll::Ready(Err(Error::Closed));
            }
            let len = bytes.len();
            if p.unread != 0 && p.unread + len > p.capacity {
                frame = Some(Ok(bytes));
                p.send_waker = Some(cx.waker().clone());
                return Poll::Pending;
            }
            p.unread += len;
            p.sent_bytes += len as u64;
            p.queue.push_back(bytes);
            if !p.in_lane {
                p.in_lane = true;
                if let Some(lane) = p.lane.upgrade() {
                    let mut l = lane.borrow_mut();
                    p.tag = p.tag.max(l.vclock);
                    drop(p);
                    l.active.push(self.out.clone());
                    if let Some(w) = l.waker.take() {
                        w.wake();
                    }
                }
            }
            Poll::Ready(Ok(()))
        })
    }

    fn recv(&mut self) -> impl Future<Output = Result<Message>> {
        poll_fn(move |cx| match self.poll_frame(Some(cx.waker())) {
            Poll::Ready(Some(frame)) => Poll::Ready(decode_whole(&frame)),
            Poll::Ready(None) => Poll::Ready(Err(Error::Closed)),
            Poll::Pending => Poll::Pending,
        })
    }

    fn try_recv(&mut self) -> Result<Option<Message>> {
        match self.poll_frame(None) {
            Poll::Ready(Some(frame)) => decode_whole(&frame).map(Some),
            Poll::Ready(None) => Err(Error::Closed),
            Poll::Pending => Ok(None),
        }
    }

    fn flush(&mut self) -> impl Future<Output = Result<()>> {
        poll_fn(move |cx| {
            let mut p = self.out.borrow_mut();
            if p.receiver_closed {
                return Poll::Ready(Err(Error::Closed));
            }
            if p.drained() {
                Poll::Ready(Ok(()))
            } else {
                p.send_waker = Some(cx.waker().clone());
                Poll::Pending
            }
        })
    }
}

impl Drop for EmuConn {
    fn drop(&mut self) {
        {
            let mut out = self.out.borrow_mut();
            out.sender_closed = true;
            out.wake_receiver();
        }
        let mut inp = self.inp.borrow_mut();
        inp.receiver_closed = true;
        inp.queue.clear();
        inp.in_flight.clear();
        inp.unread = 0;
        inp.wake_sender();
    }
}

/// Connects over one fixed link profile.
#[derive(Clone)]
pub struct EmuConnector {
    pub net: Network,
    pub profile: LinkProfile,
}

impl Connector for EmuConnector {
    type Conn = EmuConn;

    fn connect(&self, addr: &str, window: Option<u64>) -> impl Future<Output = Result<EmuConn>> {
        let addr = addr.to_string();
        async move { self.net.connect(&addr, &self.profile, window).await }
    }
}
