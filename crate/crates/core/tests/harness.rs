use std::cell::Cell;
use std::collections::HashSet;
use std::time::Duration;

use rfio_core::diskserver::{DiskModel, Pool};
use rfio_core::harness::{
    emit_run, emit_sweep, run_benchmark, run_benchmark_wall, run_repeated, seed_pool, seeded_path, sweep, sweep_with,
    write_clients_csv, Axis, Pattern, PoolFixture, RunSummary, WorkloadSpec, AGGREGATE_COLUMNS, CLIENT_COLUMNS,
};
use rfio_core::headnode::{Namespace, OpenQueueModel};
use rfio_core::net::{LinkProfile, MIB};
use rfio_core::wire::ReadMode;
use rfio_core::Error;

const KIB: u64 = 1024;

fn values(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn spec(mode: ReadMode, clients: usize, size: u64) -> WorkloadSpec {
    WorkloadSpec {
        mode,
        clients,
        file_size: size,
        block_size: (256 * KIB).min(size.max(1)),
        ..WorkloadSpec::default()
    }
}

fn check_metric_identity(s: &RunSummary) {
    for r in &s.records {
        let elapsed = r.open_time + r.read_time;
        if r.bytes_consumed == 0 {
            assert_eq!(r.rate, 0.0);
        } else {
            let back = r.rate * elapsed;
            assert!((back - r.bytes_consumed as f64).abs() <= 1e-9 * r.bytes_consumed as f64);
        }
    }
    let ok: f64 = s.records.iter().filter(|r| !r.failed()).map(|r| r.rate).sum();
    assert_eq!(s.aggregate_rate, ok);
}

#[test]
fn seeding_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sums = |dir: &std::path::Path, seed| {
        let pool = Pool::open(dir).unwrap();
        seed_pool(&pool, None, 4, 16 * MIB, seed, "ds1:5001")
            .unwrap()
            .into_iter()
            .map(|e| e.checksum)
            .collect::<Vec<_>>()
    };
    let first = sums(a.path(), 77);
    assert_eq!(first, sums(b.path(), 77));
    assert_eq!(first.iter().collect::<HashSet<_>>().len(), 4);
    let c = tempfile::tempdir().unwrap();
    assert_ne!(first, sums(c.path(), 78));
}

#[test]
fn seeding_nothing_is_fine() {
    let dir = tempfile::tempdir().unwrap();
    let pool = Pool::open(dir.path()).unwrap();
    let ns = Namespace::open(dir.path().join("ns")).unwrap();
    assert!(seed_pool(&pool, Some(&ns), 0, MIB, 1, "ds1:5001").unwrap().is_empty());
    assert!(ns.is_empty());
}

#[test]
fn seeding_a_hundred_files_registers_each_once() {
    let dir = tempfile::tempdir().unwrap();
    let pool = Pool::open(dir.path()).unwrap();
    let ns = Namespace::in_memory();
    let entries = seed_pool(&pool, Some(&ns), 100, 64 * KIB, 3, "ds1:5001").unwrap();
    assert_eq!(ns.len(), 100);
    assert_eq!(entries.iter().map(|e| &e.path).collect::<HashSet<_>>().len(), 100);
    assert_eq!(entries.iter().map(|e| e.checksum).collect::<HashSet<_>>().len(), 100);
    for e in &entries {
        assert_eq!(ns.lookup(&e.path).unwrap(), *e);
        assert_eq!(pool.get(&e.path).unwrap().checksum, e.checksum);
    }
}

#[test]
fn failed_seeding_removes_what_it_wrote() {
    let dir = tempfile::tempdir().unwrap();
    let pool = Pool::open(dir.path()).unwrap();
    pool.store(&seeded_path(2), b"already here").unwrap();
    let r = seed_pool(&pool, None, 5, 4 * KIB, 1, "ds1:5001");
    assert!(matches!(r, Err(Error::AlreadyExists(_))));
    let left: Vec<String> = pool.files().into_iter().map(|f| f.path).collect();
    assert_eq!(left, vec![seeded_path(2)]);
}

#[test]
fn fixture_in_a_directory_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let a = PoolFixture::in_dir(dir.path(), 4, 64 * KIB, 9).unwrap();
    let b = PoolFixture::in_dir(dir.path(), 2, 64 * KIB, 9).unwrap();
    assert_eq!(a.entries[..2], b.entries[..]);
    let c = PoolFixture::in_dir(dir.path(), 2, 64 * KIB, 10).unwrap();
    assert_ne!(a.entries[0].checksum, c.entries[0].checksum);
}

#[test]
fn same_seed_same_results() {
    let fx = PoolFixture::temp(4, 2 * MIB, 1).unwrap();
    let s = WorkloadSpec {
        seed: 99,
        ..spec(ReadMode::ReadBuf, 4, 2 * MIB)
    };
    let a = run_benchmark(&s, &fx).unwrap();
    let b = run_benchmark(&s, &fx).unwrap();
    assert_eq!(a.records, b.records);
    let c = run_benchmark(&WorkloadSpec { seed: 100, ..s }, &fx).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn start_times_fall_within_the_stagger_window() {
    let fx = PoolFixture::temp(8, 256 * KIB, 1).unwrap();
    let s = WorkloadSpec {
        stagger: Duration::from_millis(700),
        ..spec(ReadMode::Normal, 8, 256 * KIB)
    };
    let r = run_benchmark(&s, &fx).unwrap();
    assert!(r.records.iter().all(|c| c.start < Duration::from_millis(700)));
    assert!(r.records.iter().map(|c| c.start).collect::<HashSet<_>>().len() > 1);
}

#[test]
fn csv_files_have_the_documented_shape() {
    let fx = PoolFixture::temp(4, MIB, 1).unwrap();
    let run = run_benchmark(&spec(ReadMode::ReadAhead, 4, MIB), &fx).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_run(std::slice::from_ref(&run), dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    let clients = std::fs::read_to_string(dir.path().join("clients.csv")).unwrap();
    let lines: Vec<&str> = clients.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], CLIENT_COLUMNS.join(","));
    assert!(lines[1].starts_with("0,readahead,"));
    let aggregate = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(aggregate.lines().next().unwrap(), AGGREGATE_COLUMNS.join(","));
    assert_eq!(aggregate.lines().count(), 2);

    // re-emitting the same summary is byte-identical
    let again = tempfile::tempdir().unwrap();
    emit_run(std::slice::from_ref(&run), again.path()).unwrap();
    for name in ["clients.csv", "aggregate.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(again.path().join(name)).unwrap()
        );
    }
}

#[test]
fn repetitions_get_their_own_client_files() {
    let fx = PoolFixture::temp(2, 512 * KIB, 1).unwrap();
    let s = WorkloadSpec {
        repetitions: 3,
        ..spec(ReadMode::Normal, 2, 512 * KIB)
    };
    let runs = run_repeated(&s, &fx).unwrap();
    assert_eq!(runs.len(), 3);
    assert_eq!(runs[2].spec.seed, s.seed + 2);
    let dir = tempfile::tempdir().unwrap();
    let files = emit_run(&runs, dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    let agg = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    let labels: Vec<&str> = agg.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["run0", "run1", "run2"]);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let fx = PoolFixture::temp(1, 64 * KIB, 1).unwrap();
    let run = run_benchmark(&spec(ReadMode::Normal, 1, 64 * KIB), &fx).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, b"x").unwrap();
    assert!(emit_run(std::slice::from_ref(&run), &file.join("sub")).is_err());
    assert!(write_clients_csv(&run.records, &dir.path().join("missing/clients.csv")).is_err());
}

#[test]
fn rates_satisfy_the_metric_identity() {
    let fx = PoolFixture::temp(6, 2 * MIB, 1).unwrap();
    for mode in ReadMode::ALL {
        let s = WorkloadSpec {
            pattern: Pattern::Skip {
                read_block: 128 * KIB,
                skip_blocks: 2,
            },
            block_size: 128 * KIB,
            ..spec(mode, 6, 2 * MIB)
        };
        let r = run_benchmark(&s, &fx).unwrap();
        assert_eq!(r.error_count, 0);
        check_metric_identity(&r);
    }
}

#[test]
fn empty_file_gives_zero_rate_and_no_error() {
    let fx = PoolFixture::temp(2, 0, 1).unwrap();
    for mode in ReadMode::ALL {
        let r = run_benchmark(&spec(mode, 2, 0), &fx).unwrap();
        assert_eq!(r.error_count, 0, "{mode}");
        for c in &r.records {
            assert_eq!(c.rate, 0.0);
            assert_eq!(c.bytes_consumed, 0);
            assert!(c.open_time > 0.0);
        }
        assert_eq!(r.aggregate_rate, 0.0);
    }
}

#[test]
fn skip_pattern_consumes_a_tenth() {
    let size = 21 * MIB;
    let fx = PoolFixture::temp(2, size, 1).unwrap();
    for mode in ReadMode::ALL {
        let s = WorkloadSpec {
            pattern: Pattern::Skip {
                read_block: MIB,
                skip_blocks: 9,
            },
            block_size: MIB,
            ..spec(mode, 2, size)
        };
        let r = run_benchmark(&s, &fx).unwrap();
        for c in &r.records {
            let tenth = size / 10;
            assert!(c.bytes_consumed.abs_diff(tenth) <= MIB, "{mode}: {}", c.bytes_consumed);
        }
    }
}

#[test]
fn lan_single_client_reaches_the_disk_rate() {
    let size = 64 * MIB;
    let fx = PoolFixture::temp(1, size, 1).unwrap();
    let s = WorkloadSpec {
        profile: LinkProfile::lan(MIB),
        block_size: 4 * MIB,
        stagger: Duration::ZERO,
        ..spec(ReadMode::Normal, 1, size)
    };
    let r = run_benchmark(&s, &fx).unwrap();
    let disk = DiskModel::default().sequential_bandwidth;
    let link = LinkProfile::lan(MIB);
    let link_cap = (link.shared_bandwidth).min(MIB as f64 / link.rtt.as_secs_f64());
    let cap = disk.min(link_cap);
    let rate = r.records[0].rate;
    assert!((rate / cap - 1.0).abs() <= 0.2, "{:.1} MiB/s", rate / MIB as f64);
}

#[test]
fn aggregate_rate_grows_with_clients_then_levels_off() {
    let fx = PoolFixture::temp(32, 8 * MIB, 1).unwrap();
    let base = WorkloadSpec {
        block_size: MIB,
        ..spec(ReadMode::Stream, 1, 8 * MIB)
    };
    let points = sweep(&base, Axis::Clients, &values(&["1", "2", "4", "8", "16", "32"]), &fx).unwrap();
    let rates: Vec<f64> = points.iter().map(|p| p.summary.aggregate_rate).collect();
    let peak = rates.iter().cloned().fold(0.0, f64::max);
    let at = rates.iter().position(|&r| r == peak).unwrap();
    assert!(at >= 2, "{rates:?}");
    assert!(rates[..=at].windows(2).all(|w| w[1] >= w[0] * 0.98), "{rates:?}");
    // beyond the peak the shared link and disk hold the total roughly flat
    assert!(rates[at..].iter().all(|&r| r >= peak * 0.6), "{rates:?}");
    // staggered clients overlap only partly, so the summed rate can exceed the
    // link; bytes over the whole run cannot
    for p in &points {
        let r = &p.summary.records;
        let first = r.iter().map(|c| c.start).min().unwrap().as_secs_f64();
        let last = r
            .iter()
            .map(|c| c.start.as_secs_f64() + c.open_time + c.read_time)
            .fold(0.0, f64::max);
        let bytes: u64 = r.iter().map(|c| c.bytes_consumed).sum();
        assert!(bytes as f64 / (last - first) <= 100.0 * MIB as f64 * 1.0001);
    }
}

#[test]
fn large_buffers_hurt_skipping_reads() {
    let fx = PoolFixture::temp(8, 21 * MIB, 1).unwrap();
    let base = WorkloadSpec {
        pattern: Pattern::Skip {
            read_block: MIB,
            skip_blocks: 9,
        },
        block_size: MIB,
        ..spec(ReadMode::ReadBuf, 8, 21 * MIB)
    };
    let points = sweep(&base, Axis::IobufSize, &values(&["128K", "1M", "2M", "4M", "8M"]), &fx).unwrap();
    let rates: Vec<f64> = points.iter().map(|p| p.summary.aggregate_rate).collect();
    assert!(rates[1..].windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
    let waste: Vec<u64> = points.iter().map(|p| p.summary.total_waste).collect();
    assert!(waste[1..].windows(2).all(|w| w[1] >= w[0]), "{waste:?}");
}

#[test]
fn open_time_grows_with_load() {
    let fx = PoolFixture::temp(32, 64 * KIB, 1).unwrap();
    let base = WorkloadSpec {
        stagger: Duration::ZERO,
        block_size: 64 * KIB,
        ..spec(ReadMode::Normal, 4, 64 * KIB)
    };
    let four = run_benchmark(&base, &fx).unwrap();
    let thirty_two = run_benchmark(&WorkloadSpec { clients: 32, ..base }, &fx).unwrap();
    assert!(thirty_two.mean_open_time > four.mean_open_time);
    assert!(thirty_two.rms_open_time > 0.0);
}

#[test]
fn sweep_writes_one_aggregate_row_per_point() {
    let fx = PoolFixture::temp(2, MIB, 1).unwrap();
    let base = spec(ReadMode::ReadBuf, 2, MIB);
    let vals = values(&["512K", "1M", "2M", "4M", "8M", "16M"]);
    let points = sweep(&base, Axis::Window, &vals, &fx).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_sweep(Axis::Window, &points, dir.path()).unwrap();
    assert_eq!(files.len(), 7);
    let agg = std::fs::read_to_string(dir.path().join("aggregate_window.csv")).unwrap();
    assert_eq!(agg.lines().count(), 7);
    let keys: Vec<&str> = agg.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, vals.iter().map(String::as_str).collect::<Vec<_>>());
}

#[test]
fn invalid_sweep_values_are_rejected_before_any_run() {
    let fx = PoolFixture::temp(4, MIB, 1).unwrap();
    let base = spec(ReadMode::Normal, 1, MIB);
    for (axis, vals) in [
        (Axis::Clients, values(&["1", "two"])),
        (Axis::Clients, values(&["1", "0"])),
        (Axis::Mode, values(&["normal", "fast"])),
        (Axis::IobufSize, values(&["128K", "-1"])),
        (Axis::Window, values(&["1M", "0"])),
        (Axis::Window, Vec::new()),
    ] {
        let runs = Cell::new(0);
        let r = sweep_with(&base, axis, &vals, &fx, |s, f| {
            runs.set(runs.get() + 1);
            run_benchmark(s, f)
        });
        assert!(matches!(r, Err(Error::Config(_))), "{axis} {vals:?}");
        assert_eq!(runs.get(), 0);
    }
    assert!("speed".parse::<Axis>().is_err());
    // a point needing more files than the pool holds also fails up front
    let runs = Cell::new(0);
    let r = sweep_with(&base, Axis::Clients, &values(&["1", "8"]), &fx, |s, f| {
        runs.set(runs.get() + 1);
        run_benchmark(s, f)
    });
    assert!(r.is_err());
    assert_eq!(runs.get(), 0);
}

#[test]
fn paper_fidelity_excludes_stream_from_skip_runs() {
    let fx = PoolFixture::temp(1, MIB, 1).unwrap();
    let s = WorkloadSpec {
        pattern: Pattern::Skip {
            read_block: 64 * KIB,
            skip_blocks: 3,
        },
        block_size: 64 * KIB,
        paper_fidelity: true,
        ..spec(ReadMode::Stream, 1, MIB)
    };
    assert!(run_benchmark(&s, &fx).is_err());
    assert!(run_benchmark(&WorkloadSpec { paper_fidelity: false, ..s.clone() }, &fx).is_ok());
    let r = sweep(&WorkloadSpec { mode: ReadMode::Normal, ..s }, Axis::Mode, &values(&["normal", "stream"]), &fx);
    assert!(r.is_err());
}

#[test]
fn queue_overflow_is_recorded_not_fatal() {
    let fx = PoolFixture::temp(10, 64 * KIB, 1).unwrap();
    let s = WorkloadSpec {
        stagger: Duration::ZERO,
        block_size: 64 * KIB,
        queue: OpenQueueModel {
            queue_cap: 2,
            ..OpenQueueModel::default()
        },
        ..spec(ReadMode::Normal, 10, 64 * KIB)
    };
    let r = run_benchmark(&s, &fx).unwrap();
    assert_eq!(r.open_errors, 7);
    assert_eq!(r.error_count, 7);
    assert_eq!(r.transport_failures, 0);
    assert_eq!(r.headnode.queue_rejections, 7);
    assert_eq!(r.records.iter().filter(|c| c.bytes_consumed == 64 * KIB).count(), 3);
    let dir = tempfile::tempdir().unwrap();
    emit_run(&[r], dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("clients.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.ends_with(",1")).count(), 7);
}

#[test]
fn pool_must_cover_the_run() {
    let fx = PoolFixture::temp(2, MIB, 1).unwrap();
    assert!(run_benchmark(&spec(ReadMode::Normal, 3, MIB), &fx).is_err());
    assert!(run_benchmark(&spec(ReadMode::Normal, 2, 2 * MIB), &fx).is_err());
}

#[test]
fn wall_clock_run_over_loopback() {
    let fx = PoolFixture::temp(3, MIB, 1).unwrap();
    for mode in ReadMode::ALL {
        let s = WorkloadSpec {
            profile: LinkProfile::new("loop", Duration::from_millis(2), 400.0 * MIB as f64, MIB).unwrap(),
            stagger: Duration::from_millis(20),
            pattern: Pattern::Skip {
                read_block: 128 * KIB,
                skip_blocks: 1,
            },
            block_size: 128 * KIB,
            ..spec(mode, 3, MIB)
        };
        let r = run_benchmark_wall(&s, &fx).unwrap();
        assert_eq!(r.error_count, 0, "{mode}: {:?}", r.records);
        for c in &r.records {
            assert_eq!(c.bytes_consumed, 512 * KIB);
            assert!(c.bytes_wire >= c.bytes_consumed);
            // three connections at least one 2 ms round trip each
            assert!(c.open_time >= 0.006);
        }
        check_metric_identity(&r);
    }
}
