//! Wall-clock transport over real TCP sockets with link shaping applied at
//! the endpoints.
//!
//! Senders reserve serialization time on a shared per-direction lane and
//! pace themselves to `window / rtt`; receivers hold each frame for
//! `rtt / 2` after it arrives. A reader thread per connection decodes
//! frames so that `try_recv` never blocks.
//!
//! Right after connecting, the client writes its requested window as a
//! big-endian `u64` (zero for the profile default) ahead of any frame.

use std::future::Future;
use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::net::LinkProfile;
use crate::runtime::{Connection, Connector};
use crate::wire::{self, Decoded, Message, HEADER_LEN};

const UP: usize = 0;
const DOWN: usize = 1;

/// Shaping state shared by every connection over one emulated path.
#[derive(Debug)]
pub struct TcpLink {
    profile: LinkProfile,
    lanes: [Mutex<Instant>; 2],
}

impl TcpLink {
    pub fn new(profile: LinkProfile) -> Arc<Self> {
        let now = Instant::now();
        Arc::new(Self {
            profile,
            lanes: [Mutex::new(now), Mutex::new(now)],
        })
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.profile
    }

    /// Reserves the lane for `len` bytes; returns when transmission ends.
    fn reserve(&self, lane: usize, len: usize, not_before: Instant) -> Instant {
        let mut free = self.lanes[lane].lock().expect("lane lock");
        let start = (*free).max(not_before);
        *free = start + Duration::from_secs_f64(len as f64 / self.profile.shared_bandwidth);
        *free
    }
}

type Inbound = (Instant, Result<Message>);

pub struct TcpConn {
    stream: TcpStream,
    inbound: Receiver<Inbound>,
    peeked: Option<Inbound>,
    link: Arc<TcpLink>,
    lane: usize,
    pace_secs_per_byte: f64,
    next_allowed: Instant,
}

fn read_frames(stream: TcpStream, one_way: Duration, tx: mpsc::Sender<Inbound>) {
    let mut r = BufReader::with_capacity(1 << 20, stream);
    let mut buf = vec![0u8; HEADER_LEN];
    loop {
        buf.truncate(HEADER_LEN);
        if r.read_exact(&mut buf).is_err() {
            let _ = tx.send((Instant::now(), Err(Error::Closed)));
            return;
        }
        let total = match wire::peek_frame_len(&buf) {
            Ok(Some(n)) => n,
            Ok(None) => unreachable!("header is complete"),
            Err(e) => {
                let _ = tx.send((Instant::now(), Err(e.into())));
                return;
            }
        };
        buf.resize(total, 0);
        if r.read_exact(&mut buf[HEADER_LEN..]).is_err() {
            let _ = tx.send((Instant::now(), Err(Error::Closed)));
            return;
        }
        let msg = match wire::decode_frame(&buf) {
            Ok(Decoded::Frame { message, .. }) => Ok(message),
            Ok(Decoded::NeedMore) => Err(Error::Protocol("short frame".into())),
            Err(e) => Err(e.into()),
        };
        let stop = msg.is_err();
        if tx.send((Instant::now() + one_way, msg)).is_err() || stop {
            return;
        }
    }
}

impl TcpConn {
    fn new(stream: TcpStream, link: Arc<TcpLink>, lane: usize, window: u64) -> Result<Self> {
        stream.set_nodelay(true)?;
        let (tx, rx) = mpsc::channel();
        let reader = stream.try_clone()?;
        let one_way = link.profile.rtt / 2;
        thread::spawn(move || read_frames(reader, one_way, tx));
        let rtt = link.profile.rtt.as_secs_f64();
        Ok(Self {
            stream,
            inbound: rx,
            peeked: None,
            pace_secs_per_byte: rtt / window.max(1) as f64,
            next_allowed: Instant::now(),
            link,
            lane,
        })
    }

    pub fn peer_addr(&self) -> Result<SocketAddr> {
        Ok(self.stream.peer_addr()?)
    }

    fn take_ready(&mut self, block: bool) -> Result<Option<Message>> {
        let item = match self.peeked.take() {
            Some(i) => i,
            None if block => self.inbound.recv().map_err(|_| Error::Closed)?,
            None => match self.inbound.try_recv() {
                Ok(i) => i,
                Err(TryRecvError::Empty) => return Ok(None),
                Err(TryRecvError::Disconnected) => return Err(Error::Closed),
            },
        };
        let now = Instant::now();
        if item.0 > now {
            if !block {
                self.peeked = Some(item);
                return Ok(None);
            }
            thread::sleep(item.0 - now);
        }
        item.1.map(Some)
    }
}

impl Connection for TcpConn {
    async fn send(&mut self, msg: Message) -> Result<()> {
        let frame = wire::encode_frame(&msg)?;
        let now = Instant::now();
        let start = self.next_allowed.max(now);
        self.next_allowed = start + Duration::from_secs_f64(frame.len() as f64 * self.pace_secs_per_byte);
        let done = self.link.reserve(self.lane, frame.len(), start);
        let now = Instant::now();
        if done > now {
            thread::sleep(done - now);
        }
        self.stream.write_all(&frame).map_err(closed)?;
        Ok(())
    }

    async fn recv(&mut self) -> Result<Message> {
        self.take_ready(true).map(|m| m.expect("blocking receive yields a message"))
    }

    fn try_recv(&mut self) -> Result<Option<Message>> {
        self.take_ready(false)
    }

    async fn flush(&mut self) -> Result<()> {
        self.stream.flush().map_err(closed)
    }
}

impl Drop for TcpConn {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

fn closed(e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted => {
            Error::Closed
        }
        _ => Error::Io(e),
    }
}

/// Client side: dials real addresses through the shaped link.
#[derive(Clone)]
pub struct TcpConnector {
    pub link: Arc<TcpLink>,
}

impl Connector for TcpConnector {
    type Conn = TcpConn;

    fn connect(&self, addr: &str, window: Option<u64>) -> impl Future<Output = Result<TcpConn>> {
        let addr = addr.to_string();
        async move {
            thread::sleep(self.link.profile.rtt);
            let mut stream = TcpStream::connect(&addr).map_err(|e| match e.kind() {
                io::ErrorKind::ConnectionRefused => Error::ConnectionRefused(addr.clone()),
                _ => Error::Io(e),
            })?;
            stream.write_all(&window.unwrap_or(0).to_be_bytes())?;
            let window = window.unwrap_or(self.link.profile.per_connection_window);
            TcpConn::new(stream, self.link.clone(), UP, window)
        }
    }
}

/// Server side listener producing shaped connections.
pub struct TcpServer {
    listener: TcpListener,
    link: Arc<TcpLink>,
}

impl TcpServer {
    pub fn bind(addr: &str, link: Arc<TcpLink>) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            link,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn set_nonblocking(&self, on: bool) -> Result<()> {
        Ok(self.listener.set_nonblocking(on)?)
    }

    /// Accepts one connection. With a non-blocking listener, returns
    /// `Ok(None)` when nothing is pending.
    pub fn accept(&self) -> Result<Option<TcpConn>> {
        let mut stream = match self.listener.accept() {
            Ok((s, _)) => s,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        stream.set_nonblocking(false)?;
        let mut w = [0u8; 8];
        stream.read_exact(&mut w)?;
        let window = match u64::from_be_bytes(w) {
            0 => self.link.profile.per_connection_window,
            n => n,
        };
        TcpConn::new(stream, self.link.clone(), DOWN, window).map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use futures::executor::block_on;

    #[test]
    fn frames_cross_a_shaped_socket() {
        let link = TcpLink::new(LinkProfile::new("t", Duration::from_millis(4), 1e9, 1 << 20).unwrap());
        let server = TcpServer::bind("127.0.0.1:0", link.clone()).unwrap();
        let addr = server.local_addr().unwrap().to_string();
        let t = thread::spawn(move || {
            let mut c = server.accept().unwrap().unwrap();
            block_on(async {
                let m = c.recv().await.unwrap();
                c.send(m).await.unwrap();
                assert!(matches!(c.recv().await, Err(Error::Closed)));
            })
        });
        let connector = TcpConnector { link };
        block_on(async {
            let start = Instant::now();
            let mut c = connector.connect(&addr, None).await.unwrap();
            let msg = Message::ReadRequest {
                handle_id: 1,
                offset: 0,
                length: 131072,
            };
            c.send(msg.clone()).await.unwrap();
            assert_eq!(c.recv().await.unwrap(), msg);
            // connect plus one round trip
            assert!(start.elapsed() >= Duration::from_millis(8));
            assert_eq!(c.try_recv().unwrap(), None);
        });
        t.join().unwrap();
    }

    #[test]
    fn refused_when_nobody_listens() {
        let link = TcpLink::new(LinkProfile::ideal());
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let r = block_on(TcpConnector { link }.connect(&format!("127.0.0.1:{port}"), None));
        assert!(matches!(r, Err(Error::ConnectionRefused(_))));
    }
}
