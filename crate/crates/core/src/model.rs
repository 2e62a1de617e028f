//! Closed-form models and summary statistics, generic over [`Scalar`].
//!
//! These are the analytic side of the testbed: the simulator produces
//! measurements, these functions say what the measurements should be.

use crate::scalar::Scalar;

/// Steady per-connection throughput ceiling in bytes/s:
/// `min(shared_bandwidth / active, window / rtt)`.
///
/// A zero RTT removes the window term.
pub fn throughput_cap<T: Scalar>(shared_bandwidth: T, rtt_secs: T, window: T, active: usize) -> T {
    let active = T::of_usize(active.max(1));
    let share = shared_bandwidth / active;
    if rtt_secs <= T::zero() {
        share
    } else {
        share.min(window / rtt_secs)
    }
}

/// `bytes / (open + read)`; zero when no time elapsed or nothing was read.
pub fn transfer_rate<T: Scalar>(bytes: T, open_secs: T, read_secs: T) -> T {
    let elapsed = open_secs + read_secs;
    if elapsed <= T::zero() || bytes <= T::zero() {
        T::zero()
    } else {
        bytes / elapsed
    }
}

/// Mean completion latency of `n` opens arriving together at a FIFO queue
/// with `workers` servers and a fixed service time.
///
/// The i-th request (0-based) completes after `(i / workers + 1)` services;
/// with one worker this reduces to `service * (n + 1) / 2`.
pub fn batch_open_mean<T: Scalar>(service: T, workers: usize, n: usize) -> T {
    if n == 0 {
        return T::zero();
    }
    let workers = workers.max(1);
    let rounds: usize = (0..n).map(|i| i / workers + 1).sum();
    service * T::of_usize(rounds) / T::of_usize(n)
}

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    xs.iter().copied().sum::<T>() / T::of_usize(xs.len())
}

/// Root-mean-square deviation from the mean (population standard deviation).
pub fn rms_deviation<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let m = mean(xs);
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / T::of_usize(xs.len())).sqrt()
}

/// Ordinary least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit<T> {
    pub slope: T,
    pub intercept: T,
    pub r_squared: T,
}

impl<T: Scalar> LinearFit<T> {
    /// Fits `ys` against `xs`. Returns `None` for fewer than two points or
    /// when every x is identical.
    pub fn fit(xs: &[T], ys: &[T]) -> Option<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return None;
        }
        let mx = mean(xs);
        let my = mean(ys);
        let sxx: T = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
        if sxx <= T::zero() {
            return None;
        }
        let sxy: T = xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
        let syy: T = ys.iter().map(|&y| (y - my) * (y - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let r_squared = if syy <= T::zero() {
            T::one()
        } else {
            let sse: T = xs
                .iter()
                .zip(ys)
                .map(|(&x, &y)| {
                    let e = y - (intercept + slope * x);
                    e * e
                })
                .sum();
            T::one() - sse / syy
        };
        Some(Self {
            slope,
            intercept,
            r_squared,
        })
    }

    pub fn predict(&self, x: T) -> T {
        self.intercept + self.slope * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: f64 = 1024.0 * 1024.0;

    #[test]
    fn window_bound_single_connection() {
        let cap = throughput_cap(100.0 * MIB, 0.012, MIB, 1);
        assert!((cap / MIB - 83.333).abs() < 1e-3);
    }

    #[test]
    fn fair_share_bound_many_connections() {
        let cap = throughput_cap(100.0 * MIB, 0.012, MIB, 32);
        assert!((cap / MIB - 3.125).abs() < 1e-12);
        // any window of at least 3.125 MiB/s * 12 ms = 38.4 KiB leaves the share in charge
        let w = 3.125 * MIB * 0.012;
        assert!((w / 1024.0 - 38.4).abs() < 1e-9);
        assert_eq!(throughput_cap(100.0 * MIB, 0.012, w * 1.01, 32), 3.125 * MIB);
    }

    #[test]
    fn small_window_cap() {
        // 64 KiB / 12 ms = 5.333 KiB/ms = 5.208 MiB/s
        let cap = throughput_cap(1000.0 * MIB, 0.012, 64.0 * 1024.0, 1);
        assert!((cap - 65536.0 / 0.012).abs() < 1e-6);
        assert!((cap / MIB - 5.2083).abs() < 1e-3);
        let cap32: f32 = throughput_cap(1000.0 * MIB as f32, 0.012, 65536.0, 1);
        assert!((cap32 as f64 / MIB - 5.2083).abs() < 1e-2);
    }

    #[test]
    fn zero_rtt_ignores_window() {
        assert_eq!(throughput_cap(10.0, 0.0, 1.0, 2), 5.0);
    }

    #[test]
    fn rate_formula() {
        let r = transfer_rate(1024.0 * MIB, 2.0, 14.0);
        assert_eq!(r / MIB, 64.0);
        assert_eq!(transfer_rate(0.0, 0.0, 0.0), 0.0);
        assert_eq!(transfer_rate(0.0, 0.5, 0.0), 0.0);
    }

    #[test]
    fn batch_mean_single_worker() {
        assert!((batch_open_mean(0.05f64, 1, 20) - 0.525).abs() < 1e-12);
        assert!((batch_open_mean(0.05f64, 1, 1) - 0.05).abs() < 1e-12);
        // two workers: completions 1,1,2,2 services
        assert!((batch_open_mean(1.0f64, 2, 4) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [1.0f64, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let fit = LinearFit::fit(&xs, &ys).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(LinearFit::fit(&[1.0f64, 1.0], &[1.0, 2.0]).is_none());
    }

    #[test]
    fn rms_of_constant_is_zero() {
        assert_eq!(rms_deviation(&[2.0f64, 2.0, 2.0]), 0.0);
        assert!((rms_deviation(&[1.0f64, 3.0]) - 1.0).abs() < 1e-12);
    }
}
