use std::collections::{BTreeMap, HashSet};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;

use rfio_core::error::code;
use rfio_core::headnode::{
    Headnode, Namespace, NamespaceEntry, OpenQueueModel, TicketBook, DEFAULT_BROKER_PORT, DEFAULT_NAMESPACE_PORT,
};
use rfio_core::net::{LinkProfile, Network, MIB};
use rfio_core::runtime::{Clock, Connection, Sim};
use rfio_core::wire::{Message, ReadMode};
use rfio_core::{Error, LinearFit};

const SECRET: &str = "test-secret";

fn headnode(sim: &Sim, model: OpenQueueModel, files: usize) -> Rc<Headnode<Sim>> {
    let ns = Arc::new(Namespace::in_memory());
    for i in 0..files {
        ns.register(&format!("/pool/f{i:03}"), 16 * MIB, "ds1:5001", i as u64).unwrap();
    }
    Rc::new(Headnode::new(sim.clone(), ns, Arc::new(TicketBook::new(SECRET)), model).unwrap())
}

/// Mean latency of `n` opens issued at the same instant.
fn batch_mean(model: &OpenQueueModel, n: usize) -> f64 {
    let sim = Sim::new();
    let hn = headnode(&sim, model.clone(), n);
    let total = Rc::new(std::cell::Cell::new(0.0));
    for i in 0..n {
        let hn = hn.clone();
        let sim2 = sim.clone();
        let total = total.clone();
        sim.spawn(async move {
            let t0 = sim2.now();
            hn.broker_open(&format!("/pool/f{i:03}"), SECRET).await.unwrap();
            total.set(total.get() + (sim2.now() - t0).as_secs_f64());
        });
    }
    sim.run();
    sim.shutdown();
    total.get() / n as f64
}

#[test]
fn hundred_registrations_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("ns.manifest");
    let ns = Namespace::open(&manifest).unwrap();
    for i in 0..100u64 {
        ns.register(&format!("/pool/f{i:03}"), 16 * MIB, "ds1:5001", i * 7919).unwrap();
    }
    assert_eq!(ns.len(), 100);
    let paths: HashSet<String> = ns.entries().into_iter().map(|e| e.path).collect();
    assert_eq!(paths.len(), 100);
    assert!(matches!(
        ns.register("/pool/f000", 1, "ds1:5001", 0),
        Err(Error::AlreadyExists(_))
    ));
    let before = ns.entries();
    drop(ns);

    let text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().count(), 100);
    assert!(text.lines().all(|l| l.split('\t').count() == 4));
    let again = Namespace::open(&manifest).unwrap();
    assert_eq!(again.entries(), before);
    assert_eq!(again.lookup("/pool/f042").unwrap().checksum, 42 * 7919);
}

#[test]
fn corrupt_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("ns.manifest");
    std::fs::write(&manifest, "/pool/a\t10\tds1:5001\n").unwrap();
    assert!(Namespace::open(&manifest).is_err());
}

proptest! {
    #[test]
    fn lookup_agrees_with_a_shadow_map(
        ops in prop::collection::vec(("/[a-c]{1,3}", 0u64..1 << 40, any::<u64>()), 1..60),
        probes in prop::collection::vec("/[a-c]{1,3}", 1..20),
    ) {
        let ns = Namespace::in_memory();
        let mut shadow: BTreeMap<String, NamespaceEntry> = BTreeMap::new();
        for (path, size, sum) in ops {
            let r = ns.register(&path, size, "ds1:5001", sum);
            if shadow.contains_key(&path) {
                prop_assert!(matches!(r, Err(Error::AlreadyExists(_))));
            } else {
                let e = r.unwrap();
                prop_assert_eq!(NamespaceEntry::parse_manifest_line(&e.to_manifest_line()).unwrap(), e.clone());
                shadow.insert(path, e);
            }
        }
        prop_assert_eq!(ns.len(), shadow.len());
        for p in probes.iter().chain(shadow.keys()) {
            match (ns.lookup(p), shadow.get(p)) {
                (Ok(e), Some(want)) => prop_assert_eq!(&e, want),
                (Err(Error::NotFound(_)), None) => {}
                (got, want) => prop_assert!(false, "{p}: {got:?} vs {want:?}"),
            }
        }
    }
}

#[test]
fn open_and_lookup_over_the_wire() {
    let sim = Sim::new();
    let net = Network::new(&sim);
    let hn = headnode(&sim, OpenQueueModel::default(), 2);
    for (port, broker) in [(DEFAULT_NAMESPACE_PORT, false), (DEFAULT_BROKER_PORT, true)] {
        let listener = net.listen(&format!("headnode:{port}")).unwrap();
        let hn = hn.clone();
        let s = sim.clone();
        sim.spawn(async move {
            loop {
                let conn = listener.accept().await;
                let hn = hn.clone();
                s.spawn(async move {
                    if broker {
                        hn.serve_broker(conn).await
                    } else {
                        hn.serve_namespace(conn).await
                    }
                });
            }
        });
    }
    let n = net.clone();
    let s = sim.clone();
    let (replies, open_latency) = sim.block_on(async move {
        let p = LinkProfile::wan(MIB);
        let mut ns = n.connect("headnode:5010", &p, None).await.unwrap();
        let mut out = Vec::new();
        for path in ["/pool/f001", "/pool/nope"] {
            ns.send(Message::NsLookup { path: path.into() }).await.unwrap();
            out.push(ns.recv().await.unwrap());
        }
        let mut b = n.connect("headnode:5015", &p, None).await.unwrap();
        let open = |path: &str, token: &str| Message::OpenRequest {
            path: path.into(),
            mode: ReadMode::Normal,
            iobufsize: 4096,
            token: token.into(),
        };
        let t0 = s.now();
        b.send(open("/pool/f000", SECRET)).await.unwrap();
        out.push(b.recv().await.unwrap());
        let latency = s.now() - t0;
        b.send(open("/pool/f000", "guess")).await.unwrap();
        out.push(b.recv().await.unwrap());
        b.send(open("/pool/nope", SECRET)).await.unwrap();
        out.push(b.recv().await.unwrap());
        b.send(Message::NsLookup { path: "/x".into() }).await.unwrap();
        out.push(b.recv().await.unwrap());
        (out, latency)
    });
    assert_eq!(
        replies[0],
        Message::NsLookupReply {
            replica_address: "ds1:5001".into(),
            file_size: 16 * MIB,
            checksum: 1
        }
    );
    let codes: Vec<Option<u16>> = replies
        .iter()
        .map(|m| match m {
            Message::ErrorReply { code, .. } => Some(*code),
            _ => None,
        })
        .collect();
    assert_eq!(codes[1], Some(code::NOT_FOUND));
    assert!(matches!(replies[2], Message::OpenReply { file_size, .. } if file_size == 16 * MIB));
    assert_eq!(codes[3], Some(code::AUTH));
    assert_eq!(codes[4], Some(code::NOT_FOUND));
    assert_eq!(codes[5], Some(code::PROTOCOL));
    // one round trip plus one service time, plus serialization of two small frames
    let base = Duration::from_millis(12 + 50);
    assert!(open_latency >= base && open_latency < base + Duration::from_micros(10), "{open_latency:?}");
    let st = hn.stats();
    assert_eq!((st.opens, st.open_errors), (1, 2));
    assert_eq!(hn.tickets().live(), 1);
    sim.shutdown();
}

#[test]
fn tickets_have_unique_handles() {
    let sim = Sim::new();
    let hn = headnode(
        &sim,
        OpenQueueModel {
            workers: 4,
            ..OpenQueueModel::default()
        },
        3,
    );
    let h = hn.clone();
    let ids = sim.block_on(async move {
        let mut ids = Vec::new();
        for i in 0..30 {
            ids.push(h.broker_open(&format!("/pool/f{:03}", i % 3), SECRET).await.unwrap().handle_id);
        }
        ids
    });
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), 30);
    assert_eq!(hn.tickets().live(), 30);
    sim.shutdown();
}

#[test]
fn single_open_on_an_idle_queue_costs_one_service() {
    assert!((batch_mean(&OpenQueueModel::default(), 1) - 0.050).abs() < 1e-9);
}

#[test]
fn twenty_simultaneous_opens_average_525_ms() {
    // completions at 50, 100, ..., 1000 ms
    let expected: f64 = (1..=20).map(|k| 0.05 * k as f64).sum::<f64>() / 20.0;
    assert!((expected - 0.525).abs() < 1e-12);
    let mean = batch_mean(&OpenQueueModel::default(), 20);
    assert!((mean - expected).abs() < 1e-6, "mean {mean}");
}

#[test]
fn open_latency_grows_linearly_with_the_batch() {
    let model = OpenQueueModel::default();
    let batches = [1usize, 2, 4, 8, 16, 32];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _rep in 0..5 {
        let means: Vec<f64> = batches.iter().map(|&n| batch_mean(&model, n)).collect();
        assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");
        for (&n, m) in batches.iter().zip(means) {
            xs.push(n as f64);
            ys.push(m);
        }
    }
    let fit = LinearFit::fit(&xs, &ys).unwrap();
    assert!(fit.slope > 0.0);
    assert!(fit.r_squared >= 0.8);
    assert!((fit.slope - 0.025).abs() < 1e-6);
}

#[test]
fn more_workers_shorten_the_wait() {
    let one = batch_mean(&OpenQueueModel::default(), 16);
    let four = batch_mean(
        &OpenQueueModel {
            workers: 4,
            ..OpenQueueModel::default()
        },
        16,
    );
    // four servers: completions at 50, 100, 150, 200 ms, four each
    assert!((four - 0.125).abs() < 1e-6);
    assert!(four < one);
}

#[test]
fn overflowing_opens_are_counted() {
    let sim = Sim::new();
    let hn = headnode(
        &sim,
        OpenQueueModel {
            queue_cap: 3,
            ..OpenQueueModel::default()
        },
        10,
    );
    let results = Rc::new(std::cell::RefCell::new(Vec::new()));
    for i in 0..10 {
        let hn = hn.clone();
        let results = results.clone();
        sim.spawn(async move {
            let r = hn.broker_open(&format!("/pool/f{i:03}"), SECRET).await;
            results.borrow_mut().push(r.is_ok());
        });
    }
    sim.run();
    let ok = results.borrow().iter().filter(|&&b| b).count();
    // one in service and three waiting
    assert_eq!(ok, 4);
    let st = hn.stats();
    assert_eq!(st.queue_rejections, 6);
    assert_eq!(st.open_errors, 6);
    assert_eq!(st.opens, 4);
    sim.shutdown();
}
