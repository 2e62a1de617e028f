use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use futures::executor::block_on;

use crate::client::{ClientConfig, RfioClient, DEFAULT_TOKEN};
use crate::diskserver::{DiskScheduler, DiskServer};
use crate::error::{Error, Result};
use crate::headnode::{Headnode, Namespace, TicketBook};
use crate::net::tcp::{TcpConn, TcpConnector, TcpLink, TcpServer};
use crate::runtime::{Clock, WallClock};

use super::{check_fixture, drive_client, start_offsets, ClientRecord, PoolFixture, RunSummary, WorkloadSpec};

fn serve_forever<F>(server: TcpServer, stop: Arc<AtomicBool>, handle: F) -> Result<thread::JoinHandle<()>>
where
    F: Fn(TcpConn) + Send + Sync + Clone + 'static,
{
    server.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match server.accept() {
                Ok(Some(conn)) => {
                    let h = handle.clone();
                    thread::spawn(move || h(conn));
                }
                Ok(None) => thread::sleep(Duration::from_millis(2)),
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    }))
}

/// One repetition of `spec` over loopback TCP in real time. Servers bind
/// ephemeral ports on 127.0.0.1.
pub fn run_benchmark_wall(spec: &WorkloadSpec, fixture: &PoolFixture) -> Result<RunSummary> {
    spec.validate()?;
    check_fixture(spec, fixture)?;
    let clock = WallClock::new();
    let link = TcpLink::new(spec.profile.clone().with_window(spec.window));
    let ns_server = TcpServer::bind("127.0.0.1:0", link.clone())?;
    let broker_server = TcpServer::bind("127.0.0.1:0", link.clone())?;
    let disk_server = TcpServer::bind("127.0.0.1:0", link.clone())?;
    let disk_addr = disk_server.local_addr()?.to_string();

    let namespace = Arc::new(Namespace::in_memory());
    for e in &fixture.entries {
        namespace.register(&e.path, e.size, &disk_addr, e.checksum)?;
    }
    let tickets = Arc::new(TicketBook::new(DEFAULT_TOKEN));
    let headnode = Arc::new(Headnode::new(clock, namespace, tickets.clone(), spec.queue.clone())?);
    let (scheduler, disk) = DiskScheduler::new(clock, fixture.pool.clone(), spec.disk.clone())?;
    let worker = thread::spawn(move || block_on(scheduler.run()));
    let ds = Arc::new(DiskServer::new(clock, fixture.pool.clone(), tickets, disk));

    let config = ClientConfig {
        headnode: "127.0.0.1".into(),
        namespace_port: ns_server.local_addr()?.port(),
        broker_port: broker_server.local_addr()?.port(),
        mode: spec.mode,
        iobufsize: spec.iobufsize,
        emulated_window: spec.window,
        ..ClientConfig::default()
    };

    let stop = Arc::new(AtomicBool::new(false));
    let mut servers = Vec::new();
    let h = headnode.clone();
    servers.push(serve_forever(ns_server, stop.clone(), move |c| block_on(h.serve_namespace(c)))?);
    let h = headnode.clone();
    servers.push(serve_forever(broker_server, stop.clone(), move |c| block_on(h.serve_broker(c)))?);
    let d = ds.clone();
    servers.push(serve_forever(disk_server, stop.clone(), move |c| block_on(d.serve(c)))?);

    let epoch = clock.now();
    let clients: Vec<_> = start_offsets(spec)
        .into_iter()
        .enumerate()
        .map(|(i, delay)| {
            let connector = TcpConnector { link: link.clone() };
            let config = config.clone();
            let path = fixture.entries[i].path.clone();
            let spec = spec.clone();
            thread::spawn(move || -> Result<ClientRecord> {
                thread::sleep(delay);
                let client = RfioClient::new(clock, connector, config)?;
                Ok(block_on(drive_client(&client, &clock, i, &path, &spec, epoch)))
            })
        })
        .collect();
    let mut records = Vec::with_capacity(clients.len());
    for c in clients {
        records.push(c.join().map_err(|_| Error::Protocol("client thread panicked".into()))??);
    }
    stop.store(true, Ordering::Relaxed);
    for s in servers {
        let _ = s.join();
    }
    let mut summary = RunSummary::from_records(spec.clone(), records);
    summary.disk = ds.disk().stats();
    summary.sessions = ds.session_stats();
    summary.headnode = headnode.stats();
    drop(ds);
    drop(headnode);
    // The worker exits once the last connection thread drops its server
    // reference; do not wait for stragglers.
    drop(worker);
    Ok(summary)
}
