//! Cross-correlation coincidence histograms between detector groups A and B.
//!
//! Delay is `τ = t_A − t_B`. Bins are left-closed, `[τ_min + kΔ, τ_min + (k+1)Δ)`
//! with `τ_min = −τ_max`, so a pair at exactly `+τ_max` is outside the histogram.
//! Every (a, b) pair inside the window is counted, not only nearest neighbours.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Error, Result};
use crate::model::AnalyzerSetting;
use crate::timetag::{first_unsorted, TimeTagStream, PS_PER_S};

/// Default coincidence bin width, 4 ns.
pub const DEFAULT_BIN_WIDTH: f64 = 4e-9;
/// Default histogram half-range, 200 ns.
pub const DEFAULT_TAU_MAX: f64 = 200e-9;

/// Tags of stream A handled per parallel shard.
const SHARD_LEN: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceHistogram {
    /// Seconds.
    pub bin_width: f64,
    /// Seconds; equals `−tau_max`.
    pub tau_min: f64,
    /// Seconds.
    pub tau_max: f64,
    pub counts: Vec<u64>,
    /// Effective acquisition time in seconds.
    pub acquisition_time: f64,
    pub singles_a: u64,
    pub singles_b: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<AnalyzerSetting<f64>>,
    /// Analytic mean counts per bin, when the histogram was sampled from a known model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Vec<f64>>,
}

impl CoincidenceHistogram {
    #[inline]
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    #[inline]
    pub fn bin_center(&self, k: usize) -> f64 {
        self.tau_min + (k as f64 + 0.5) * self.bin_width
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.bin_center(k)).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn with_setting(mut self, setting: AnalyzerSetting<f64>) -> Self {
        self.setting = Some(setting);
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param!(self.bin_width > 0.0, "bin_width must be positive");
        let n = (self.tau_max - self.tau_min) / self.bin_width;
        ensure_param!(
            (n - self.counts.len() as f64).abs() < 1e-6 * n.max(1.0),
            "histogram range spans {n} bins but holds {}",
            self.counts.len()
        );
        ensure_param!(
            self.acquisition_time >= 0.0,
            "acquisition_time must be non-negative"
        );
        Ok(())
    }

    /// True when `other` has the same binning.
    pub fn same_binning(&self, other: &Self) -> bool {
        self.counts.len() == other.counts.len()
            && approx_eq(self.bin_width, other.bin_width)
            && approx_eq(self.tau_min, other.tau_min)
            && approx_eq(self.tau_max, other.tau_max)
    }

    /// Merges `factor` adjacent bins into one.
    pub fn rebin(&self, factor: usize) -> Result<Self> {
        ensure_param!(
            factor > 0 && self.counts.len().is_multiple_of(factor),
            "rebin factor {factor} does not divide {} bins",
            self.counts.len()
        );
        let mut out = self.clone();
        out.bin_width = self.bin_width * factor as f64;
        out.counts = self.counts.chunks(factor).map(|c| c.iter().sum()).collect();
        out.expected = self
            .expected
            .as_ref()
            .map(|e| e.chunks(factor).map(|c| c.iter().sum()).collect());
        Ok(out)
    }

    /// Per-bin `(g², σ)` with the singles-product normalization.
    pub fn normalized(&self) -> Result<Vec<(f64, f64)>> {
        normalize_g2(self)
    }
}

fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-30)
}

pub(crate) fn seconds_to_ps(s: f64) -> i64 {
    (s * PS_PER_S).round() as i64
}

/// Integer-picosecond binning derived from seconds.
#[derive(Debug, Clone, Copy)]
struct Binning {
    bin_ps: i64,
    tau_max_ps: i64,
}

impl Binning {
    fn new(bin_width: f64, tau_max: f64) -> Result<Self> {
        ensure_param!(
            bin_width > 0.0 && bin_width.is_finite(),
            "bin_width must be positive"
        );
        ensure_param!(tau_max > 0.0 && tau_max.is_finite(), "tau_max must be positive");
        let bin_ps = seconds_to_ps(bin_width);
        let tau_max_ps = seconds_to_ps(tau_max);
        ensure_param!(bin_ps > 0, "bin_width below 1 ps");
        ensure_param!(
            tau_max_ps % bin_ps == 0,
            "tau_max ({tau_max} s) must be a multiple of bin_width ({bin_width} s)"
        );
        Ok(Self { bin_ps, tau_max_ps })
    }

    fn bins(&self) -> usize {
        (2 * self.tau_max_ps / self.bin_ps) as usize
    }
}

/// Counts pairs for a run of A tags against all of B, starting the window search at `lo`.
fn count_shard(a: &[u64], b: &[u64], binning: Binning, counts: &mut [u64]) {
    let Binning { bin_ps, tau_max_ps } = binning;
    let first = match a.first() {
        Some(&t) => t as i64,
        None => return,
    };
    let mut lo = b.partition_point(|&tb| (tb as i64) <= first - tau_max_ps);
    for &ta in a {
        let ta = ta as i64;
        // first B with τ < τ_max
        while lo < b.len() && (b[lo] as i64) <= ta - tau_max_ps {
            lo += 1;
        }
        for &tb in &b[lo..] {
            let tau = ta - tb as i64;
            if tau < -tau_max_ps {
                break;
            }
            counts[((tau + tau_max_ps) / bin_ps) as usize] += 1;
        }
    }
}

/// Histogram of `t_A − t_B` over raw sorted timestamp slices (picoseconds).
pub fn correlate_timestamps(
    a: &[u64],
    b: &[u64],
    bin_width: f64,
    tau_max: f64,
) -> Result<Vec<u64>> {
    let binning = Binning::new(bin_width, tau_max)?;
    if let Some(index) = first_unsorted(a) {
        return Err(Error::Unsorted { channel: 'A', index });
    }
    if let Some(index) = first_unsorted(b) {
        return Err(Error::Unsorted { channel: 'B', index });
    }
    let nbins = binning.bins();
    let counts = a
        .par_chunks(SHARD_LEN)
        .fold(
            || vec![0u64; nbins],
            |mut acc, shard| {
                count_shard(shard, b, binning, &mut acc);
                acc
            },
        )
        .reduce(
            || vec![0u64; nbins],
            |mut x, y| {
                x.iter_mut().zip(y).for_each(|(u, v)| *u += v);
                x
            },
        );
    Ok(counts)
}

/// Coincidence histogram between two streams.
pub fn cross_correlate(
    stream_a: &TimeTagStream,
    stream_b: &TimeTagStream,
    bin_width: f64,
    tau_max: f64,
) -> Result<CoincidenceHistogram> {
    let counts = correlate_timestamps(stream_a.timestamps(), stream_b.timestamps(), bin_width, tau_max)?;
    Ok(CoincidenceHistogram {
        bin_width,
        tau_min: -tau_max,
        tau_max,
        counts,
        acquisition_time: stream_a.acquisition_time.min(stream_b.acquisition_time),
        singles_a: stream_a.len() as u64,
        singles_b: stream_b.len() as u64,
        setting: None,
        expected: None,
    })
}

/// `g²[k] = counts[k]·T/(N_A·N_B·Δ)` with Poisson `σ[k] = √counts[k]` on the same scale.
///
/// Independent streams give `g² → 1`.
pub fn normalize_g2(hist: &CoincidenceHistogram) -> Result<Vec<(f64, f64)>> {
    if hist.singles_a == 0 || hist.singles_b == 0 {
        return Err(Error::InvalidParameter(
            "cannot normalize a histogram with zero singles".into(),
        ));
    }
    ensure_param!(
        hist.acquisition_time > 0.0,
        "cannot normalize a histogram with zero acquisition time"
    );
    let scale =
        hist.acquisition_time / (hist.singles_a as f64 * hist.singles_b as f64 * hist.bin_width);
    Ok(hist
        .counts
        .iter()
        .map(|&c| (c as f64 * scale, (c as f64).sqrt() * scale))
        .collect())
}

/// Periodic acquisition gate: tags are kept while `t mod period < open_fraction·period`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    /// Seconds.
    pub period: f64,
    pub open_fraction: f64,
}

impl Gate {
    pub fn new(period: f64, open_fraction: f64) -> Result<Self> {
        let g = Self {
            period,
            open_fraction,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param!(
            self.period > 0.0 && seconds_to_ps(self.period) > 0,
            "gate period must be at least 1 ps"
        );
        ensure_param!(
            self.open_fraction > 0.0 && self.open_fraction <= 1.0,
            "gate open fraction must lie in (0, 1]"
        );
        Ok(())
    }

    #[inline]
    pub(crate) fn is_open(&self, t_ps: u64) -> bool {
        let period = seconds_to_ps(self.period) as u64;
        let open = (self.open_fraction * period as f64).round() as u64;
        t_ps % period < open
    }
}

/// Drops tags outside the open part of a periodic gate and scales the
/// stream's acquisition time by `open_fraction`.
pub fn apply_gate(stream: &TimeTagStream, period: f64, open_fraction: f64) -> Result<TimeTagStream> {
    let gate = Gate::new(period, open_fraction)?;
    if open_fraction == 1.0 {
        return Ok(stream.clone());
    }
    let kept: Vec<u64> = stream
        .timestamps()
        .iter()
        .copied()
        .filter(|&t| gate.is_open(t))
        .collect();
    TimeTagStream::new(stream.channel, kept, stream.acquisition_time * open_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timetag::Channel;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const NS: u64 = 1000;

    fn brute(a: &[u64], b: &[u64], bin_ps: i64, tmax_ps: i64) -> Vec<u64> {
        let mut out = vec![0u64; (2 * tmax_ps / bin_ps) as usize];
        for &ta in a {
            for &tb in b {
                let tau = ta as i64 - tb as i64;
                if tau >= -tmax_ps && tau < tmax_ps {
                    out[((tau + tmax_ps) / bin_ps) as usize] += 1;
                }
            }
        }
        out
    }

    fn stream(ch: Channel, ts: Vec<u64>) -> TimeTagStream {
        TimeTagStream::new(ch, ts, 1.0).unwrap()
    }

    #[test]
    fn single_pair_lands_in_negative_bin() {
        let h = cross_correlate(
            &stream(Channel::A, vec![0]),
            &stream(Channel::B, vec![2 * NS]),
            4e-9,
            8e-9,
        )
        .unwrap();
        assert_eq!(h.counts, vec![0, 1, 0, 0]);
        assert!((h.bin_center(1) + 2e-9).abs() < 1e-20);
    }

    #[test]
    fn upper_edge_is_excluded() {
        let h = cross_correlate(
            &stream(Channel::A, vec![0, 10 * NS]),
            &stream(Channel::B, vec![2 * NS]),
            4e-9,
            8e-9,
        )
        .unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.counts[1], 1);
        // τ = −8 ns is inside
        let h = cross_correlate(
            &stream(Channel::A, vec![0]),
            &stream(Channel::B, vec![8 * NS]),
            4e-9,
            8e-9,
        )
        .unwrap();
        assert_eq!(h.counts, vec![1, 0, 0, 0]);
    }

    #[test]
    fn rejects_unsorted_and_bad_binning() {
        assert!(matches!(
            correlate_timestamps(&[5, 1], &[1], 4e-9, 8e-9),
            Err(Error::Unsorted { channel: 'A', index: 1 })
        ));
        assert!(matches!(
            correlate_timestamps(&[1], &[5, 1], 4e-9, 8e-9),
            Err(Error::Unsorted { channel: 'B', .. })
        ));
        assert!(correlate_timestamps(&[1], &[1], 4e-9, 10e-9).is_err());
        assert!(correlate_timestamps(&[1], &[1], 0.0, 8e-9).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_streams() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let na = rng.random_range(0..3000);
            let nb = rng.random_range(0..3000);
            let span = rng.random_range(1_000u64..10_000_000);
            let mut a: Vec<u64> = (0..na).map(|_| rng.random_range(0..span)).collect();
            let mut b: Vec<u64> = (0..nb).map(|_| rng.random_range(0..span)).collect();
            a.sort_unstable();
            b.sort_unstable();
            let got = correlate_timestamps(&a, &b, 4e-9, 200e-9).unwrap();
            assert_eq!(got, brute(&a, &b, 4000, 200_000));
        }
    }

    #[test]
    fn shards_agree_with_sequential() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut a: Vec<u64> = (0..200_000).map(|_| rng.random_range(0..1_000_000_000)).collect();
        let mut b: Vec<u64> = (0..200_000).map(|_| rng.random_range(0..1_000_000_000)).collect();
        a.sort_unstable();
        b.sort_unstable();
        let binning = Binning::new(4e-9, 200e-9).unwrap();
        let mut seq = vec![0u64; binning.bins()];
        count_shard(&a, &b, binning, &mut seq);
        assert_eq!(correlate_timestamps(&a, &b, 4e-9, 200e-9).unwrap(), seq);
    }

    #[test]
    fn normalization() {
        let h = CoincidenceHistogram {
            bin_width: 2.0,
            tau_min: -2.0,
            tau_max: 2.0,
            counts: vec![0, 16],
            acquisition_time: 100.0,
            singles_a: 10,
            singles_b: 5,
            setting: None,
            expected: None,
        };
        let g = normalize_g2(&h).unwrap();
        assert_eq!(g[0], (0.0, 0.0));
        assert!((g[1].0 - 16.0).abs() < 1e-12);
        assert!((g[1].1 - 4.0).abs() < 1e-12);
        let mut zero = h.clone();
        zero.singles_b = 0;
        assert!(normalize_g2(&zero).is_err());
    }

    #[test]
    fn gate_identity_and_exact_selection() {
        let s = stream(Channel::A, vec![0, 3, 5, 9, 10, 14, 15, 19]);
        assert_eq!(apply_gate(&s, 10e-12, 1.0).unwrap(), s);
        let g = apply_gate(&s, 10e-12, 0.5).unwrap();
        assert_eq!(g.timestamps(), &[0, 3, 10, 14]);
        assert_eq!(g.acquisition_time, 0.5);
        assert!(apply_gate(&s, 10e-12, 0.0).is_err());
        assert!(apply_gate(&s, 10e-12, 1.5).is_err());
    }

    #[test]
    fn gate_halves_uniform_tags() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let ts: Vec<u64> = (0..n).map(|_| rng.random_range(0..1_000_000_000_000)).collect();
        let s = TimeTagStream::from_unsorted(Channel::B, ts, 1.0);
        let g = apply_gate(&s, 1e-2, 0.5).unwrap();
        let kept = g.len() as f64;
        assert!((kept - n as f64 / 2.0).abs() < 4.0 * (n as f64 * 0.25).sqrt());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn oracle_and_invariances(
            mut a in proptest::collection::vec(0u64..2_000_000, 0..400),
            mut b in proptest::collection::vec(0u64..2_000_000, 0..400),
            shift in 0u64..1_000_000_000,
        ) {
            a.sort_unstable();
            b.sort_unstable();
            let fine = correlate_timestamps(&a, &b, 2e-9, 100e-9).unwrap();
            prop_assert_eq!(&fine, &brute(&a, &b, 2000, 100_000));

            let sa: Vec<u64> = a.iter().map(|t| t + shift).collect();
            let sb: Vec<u64> = b.iter().map(|t| t + shift).collect();
            prop_assert_eq!(&correlate_timestamps(&sa, &sb, 2e-9, 100e-9).unwrap(), &fine);

            let coarse = correlate_timestamps(&a, &b, 4e-9, 100e-9).unwrap();
            let merged: Vec<u64> = fine.chunks(2).map(|c| c[0] + c[1]).collect();
            prop_assert_eq!(coarse, merged);
        }
    }
}
