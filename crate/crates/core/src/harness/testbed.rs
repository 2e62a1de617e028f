use std::path::Path;
use std::rc::Rc;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use crate::client::{ClientConfig, RfioClient, DEFAULT_TOKEN};
use crate::diskserver::{DiskModel, DiskScheduler, DiskServer, Pool, DEFAULT_DISK_PORT};
use crate::error::Result;
use crate::headnode::{
    Headnode, Namespace, NamespaceEntry, OpenQueueModel, TicketBook, DEFAULT_BROKER_PORT, DEFAULT_NAMESPACE_PORT,
};
use crate::net::{EmuConn, EmuConnector, EmuListener, LinkProfile, Network};
use crate::runtime::Sim;
use crate::wire::ReadMode;

/// Replica address used for the single emulated disk server.
pub const DISK_ADDRESS: &str = "ds1:5001";
pub const HEADNODE_HOST: &str = "headnode";

/// Namespace path of the `index`-th seeded file.
pub fn seeded_path(index: usize) -> String {
    format!("/pool/f{index:03}")
}

/// Deterministic content generator for the `index`-th seeded file. Must be
/// called with contiguous, increasing offsets.
pub fn seeded_content(seed: u64, index: usize) -> impl FnMut(u64, &mut [u8]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    move |_, buf| rng.fill_bytes(buf)
}

/// Writes `count` files of pseudorandom content to `pool` and optionally
/// registers them in `namespace`. On failure every file written by this
/// call is removed again.
pub fn seed_pool(
    pool: &Pool,
    namespace: Option<&Namespace>,
    count: usize,
    file_size: u64,
    seed: u64,
    replica_address: &str,
) -> Result<Vec<NamespaceEntry>> {
    let mut done: Vec<NamespaceEntry> = Vec::with_capacity(count);
    let cleanup = |done: &[NamespaceEntry]| {
        for e in done {
            let _ = pool.remove(&e.path);
        }
    };
    for i in 0..count {
        let path = seeded_path(i);
        let pf = match pool.store_with(&path, file_size, seeded_content(seed, i)) {
            Ok(pf) => pf,
            Err(e) => {
                cleanup(&done);
                return Err(e);
            }
        };
        let entry = NamespaceEntry {
            path: path.clone(),
            size: pf.size,
            replica_address: replica_address.to_string(),
            checksum: pf.checksum,
        };
        done.push(entry.clone());
        if let Some(ns) = namespace {
            if let Err(e) = ns.register(&path, pf.size, replica_address, pf.checksum) {
                cleanup(&done);
                return Err(e);
            }
        }
    }
    Ok(done)
}

/// A seeded pool reused across benchmark runs.
pub struct PoolFixture {
    _dir: Option<TempDir>,
    pub pool: Arc<Pool>,
    pub entries: Vec<NamespaceEntry>,
    pub file_size: u64,
    pub seed: u64,
}

impl PoolFixture {
    /// Seeds `count` files into a fresh temporary directory.
    pub fn temp(count: usize, file_size: u64, seed: u64) -> Result<Self> {
        let dir = TempDir::new()?;
        let mut f = Self::in_dir(dir.path(), count, file_size, seed)?;
        f._dir = Some(dir);
        Ok(f)
    }

    /// Seeds into `dir`, reusing the files of an earlier seeding with the
    /// same size and seed when it covers at least `count` files.
    pub fn in_dir(dir: &Path, count: usize, file_size: u64, seed: u64) -> Result<Self> {
        let pool = Pool::open(dir)?;
        let existing: Vec<_> = (0..count).map_while(|i| pool.get(&seeded_path(i)).ok()).collect();
        let reusable = existing.len() == count
            && existing.iter().all(|f| f.size == file_size)
            && existing.first().is_none_or(|f| {
                let n = file_size.min(4096) as usize;
                let mut want = vec![0u8; n];
                seeded_content(seed, 0)(0, &mut want);
                pool.read_at(&f.path, 0, n).is_ok_and(|got| got == want)
            });
        let entries = if reusable {
            existing
                .into_iter()
                .map(|f| NamespaceEntry {
                    path: f.path,
                    size: f.size,
                    replica_address: DISK_ADDRESS.into(),
                    checksum: f.checksum,
                })
                .collect()
        } else {
            for f in pool.files() {
                pool.remove(&f.path)?;
            }
            seed_pool(&pool, None, count, file_size, seed, DISK_ADDRESS)?
        };
        Ok(Self {
            _dir: None,
            pool: Arc::new(pool),
            entries,
            file_size,
            seed,
        })
    }
}

/// Headnode, disk server and clients on one emulated link, in virtual time.
pub struct SimTestbed {
    pub sim: Sim,
    pub net: Network,
    pub profile: LinkProfile,
    pub headnode: Rc<Headnode<Sim>>,
    pub disk_server: Rc<DiskServer<Sim>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestbedConfig {
    pub profile: LinkProfile,
    pub disk: DiskModel,
    pub queue: OpenQueueModel,
    pub token: String,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            profile: LinkProfile::wan(crate::net::MIB),
            disk: DiskModel::default(),
            queue: OpenQueueModel::default(),
            token: DEFAULT_TOKEN.into(),
        }
    }
}

fn accept_loop<F, Fut>(sim: &Sim, listener: EmuListener, serve: F)
where
    F: Fn(EmuConn) -> Fut + 'static,
    Fut: std::future::Future<Output = ()> + 'static,
{
    let s = sim.clone();
    sim.spawn(async move {
        loop {
            let conn = listener.accept().await;
            s.spawn(serve(conn));
        }
    });
}

impl SimTestbed {
    pub fn new(entries: &[NamespaceEntry], pool: Arc<Pool>, cfg: TestbedConfig) -> Result<Self> {
        let sim = Sim::new();
        let net = Network::new(&sim);
        let namespace = Arc::new(Namespace::in_memory());
        for e in entries {
            namespace.register(&e.path, e.size, &e.replica_address, e.checksum)?;
        }
        let tickets = Arc::new(TicketBook::new(cfg.token.clone()));
        let headnode = Rc::new(Headnode::new(sim.clone(), namespace, tickets.clone(), cfg.queue)?);
        let (scheduler, disk) = DiskScheduler::new(sim.clone(), pool.clone(), cfg.disk)?;
        sim.spawn(scheduler.run());
        let disk_server = Rc::new(DiskServer::new(sim.clone(), pool, tickets, disk));

        let h = headnode.clone();
        accept_loop(&sim, net.listen(&format!("{HEADNODE_HOST}:{DEFAULT_NAMESPACE_PORT}"))?, move |c| {
            let h = h.clone();
            async move { h.serve_namespace(c).await }
        });
        let h = headnode.clone();
        accept_loop(&sim, net.listen(&format!("{HEADNODE_HOST}:{DEFAULT_BROKER_PORT}"))?, move |c| {
            let h = h.clone();
            async move { h.serve_broker(c).await }
        });
        debug_assert!(DISK_ADDRESS.ends_with(&DEFAULT_DISK_PORT.to_string()));
        let d = disk_server.clone();
        accept_loop(&sim, net.listen(DISK_ADDRESS)?, move |c| {
            let d = d.clone();
            async move { d.serve(c).await }
        });
        Ok(Self {
            sim,
            net,
            profile: cfg.profile,
            headnode,
            disk_server,
        })
    }

    /// Testbed over a fixture's pool.
    pub fn for_fixture(fixture: &PoolFixture, cfg: TestbedConfig) -> Result<Self> {
        Self::new(&fixture.entries, fixture.pool.clone(), cfg)
    }

    pub fn client_config(&self, mode: ReadMode, iobufsize: u32, window: u64) -> ClientConfig {
        ClientConfig {
            headnode: HEADNODE_HOST.into(),
            mode,
            iobufsize,
            emulated_window: window,
            ..ClientConfig::default()
        }
    }

    pub fn client(&self, config: ClientConfig) -> Result<RfioClient<Sim, EmuConnector>> {
        RfioClient::new(
            self.sim.clone(),
            EmuConnector {
                net: self.net.clone(),
                profile: self.profile.clone(),
            },
            config,
        )
    }
}

impl Drop for SimTestbed {
    fn drop(&mut self) {
        self.sim.shutdown();
    }
}
