//! Monte Carlo generation of time-tag streams and rate-level histograms.
//!
//! Pair events carry the interference statistics: their delay density is
//! `p(τ) ∝ y(τ; φ) = sin²2θ·|γe^{−2iφ} − ψ(τ)|²` on `[−W, W]`, and their rate is
//! `pair_rate·∫y(τ;φ)dτ / ∫(γ² + |ψ(τ)|²)dτ`. The denominator is the
//! analyzer-phase average of the numerator, so `pair_rate` is the mean pair rate
//! over φ and the per-setting totals keep the relative scale the inversion needs.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlate::{seconds_to_ps, CoincidenceHistogram, Gate};
use crate::error::{ensure_param, Error, Result};
use crate::model::{interference_g2, AnalyzerSetting, ReferenceAmplitude, TpwfModel};
use crate::timetag::{Channel, TimeTagStream, PS_PER_S};

/// Smallest accepted inverse-CDF grid.
pub const MIN_GRID_POINTS: usize = 4096;
/// Grid used by [`PairDelaySampler::for_model`].
pub const DEFAULT_GRID_POINTS: usize = 1 << 14;
/// Required ratio of the delay window half-width to the correlation time.
pub const WINDOW_CORR_TIMES: f64 = 10.0;

const DEFAULT_MAX_TAGS: u64 = 400_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Phase-averaged rate of interfering two-photon events, 1/s.
    pub pair_rate: f64,
    /// Uncorrelated background clicks on channel A, 1/s.
    pub singles_rate_a: f64,
    /// Uncorrelated background clicks on channel B, 1/s.
    pub singles_rate_b: f64,
    /// Seconds.
    pub duration: f64,
    /// Gaussian timing jitter per click, seconds.
    #[serde(default)]
    pub jitter_sigma: f64,
    /// Non-paralyzable dead time per channel, seconds.
    #[serde(default)]
    pub dead_time: f64,
    /// Half-width `W` of the pair-delay window, seconds.
    pub tau_window: f64,
    pub seed: u64,
    /// RNG stream index; distinct analyzer settings of one run use distinct streams.
    #[serde(default)]
    pub stream: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<Gate>,
    /// Upper bound on the expected number of generated tags.
    #[serde(default = "default_max_tags")]
    pub max_tags: u64,
}

fn default_max_tags() -> u64 {
    DEFAULT_MAX_TAGS
}

impl SimConfig {
    pub fn new(pair_rate: f64, singles_rate_a: f64, singles_rate_b: f64, duration: f64, tau_window: f64, seed: u64) -> Self {
        Self {
            pair_rate,
            singles_rate_a,
            singles_rate_b,
            duration,
            jitter_sigma: 0.0,
            dead_time: 0.0,
            tau_window,
            seed,
            stream: 0,
            gate: None,
            max_tags: DEFAULT_MAX_TAGS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pair_rate", self.pair_rate),
            ("singles_rate_a", self.singles_rate_a),
            ("singles_rate_b", self.singles_rate_b),
            ("jitter_sigma", self.jitter_sigma),
            ("dead_time", self.dead_time),
        ] {
            ensure_param!(v >= 0.0 && v.is_finite(), "{name} must be finite and non-negative, got {v}");
        }
        ensure_param!(
            self.duration > 0.0 && self.duration.is_finite(),
            "duration must be positive"
        );
        ensure_param!(
            self.duration * PS_PER_S < 9.0e18,
            "duration does not fit in 64-bit picoseconds"
        );
        ensure_param!(self.tau_window > 0.0, "tau_window must be positive");
        if let Some(g) = &self.gate {
            g.validate()?;
        }
        Ok(())
    }

    /// Checks the window against the model's correlation time.
    pub fn validate_for(&self, model: &TpwfModel<f64>) -> Result<()> {
        self.validate()?;
        model.validate()?;
        ensure_param!(
            self.tau_window >= WINDOW_CORR_TIMES * model.corr_time * (1.0 - 1e-12),
            "tau_window {} s is shorter than {WINDOW_CORR_TIMES} correlation times ({} s)",
            self.tau_window,
            model.corr_time
        );
        ensure_param!(
            model.tau_offset.abs() < self.tau_window,
            "tau_offset lies outside the delay window"
        );
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    pub fn with_stream(&self, stream: u64) -> Self {
        Self {
            stream,
            ..self.clone()
        }
    }

    fn gate_fraction(&self) -> f64 {
        self.gate.map_or(1.0, |g| g.open_fraction)
    }
}

/// Inverse-CDF sampler for the pair delay on a dense grid with linear interpolation.
#[derive(Debug, Clone)]
pub struct PairDelaySampler {
    taus: Vec<f64>,
    /// Normalized cumulative mass at each grid node.
    cdf: Vec<f64>,
    /// `∫ y(τ) dτ` over the window, seconds.
    mass: f64,
}

impl PairDelaySampler {
    /// Builds the sampler for an arbitrary biphoton amplitude `psi`.
    pub fn new(
        setting: &AnalyzerSetting<f64>,
        gamma: ReferenceAmplitude<f64>,
        psi: impl Fn(f64) -> Complex64,
        window: f64,
        points: usize,
        kink: Option<f64>,
    ) -> Result<Self> {
        ensure_param!(window > 0.0 && window.is_finite(), "window must be positive");
        ensure_param!(
            points >= MIN_GRID_POINTS,
            "inverse-CDF grid needs at least {MIN_GRID_POINTS} points"
        );
        let step = 2.0 * window / (points - 1) as f64;
        let mut taus: Vec<f64> = (0..points).map(|i| -window + i as f64 * step).collect();
        if let Some(k) = kink.filter(|k| k.abs() < window) {
            let pos = taus.partition_point(|&t| t < k);
            if taus[pos] != k {
                taus.insert(pos, k);
            }
        }
        let weight = setting.port_weight();
        let density: Vec<f64> = taus
            .iter()
            .map(|&t| weight * interference_g2(gamma.get(), psi(t), setting.phi))
            .collect();
        let mut cdf = Vec::with_capacity(taus.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 1..taus.len() {
            acc += 0.5 * (density[i] + density[i - 1]) * (taus[i] - taus[i - 1]);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::Numerical(
                "pair-delay density integrates to zero".into(),
            ));
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        Ok(Self {
            taus,
            cdf,
            mass: acc,
        })
    }

    /// Sampler for the double-exponential model; the window must span ten correlation times.
    pub fn for_model(
        setting: &AnalyzerSetting<f64>,
        model: &TpwfModel<f64>,
        gamma: ReferenceAmplitude<f64>,
        window: f64,
    ) -> Result<Self> {
        model.validate()?;
        ensure_param!(
            window >= WINDOW_CORR_TIMES * model.corr_time * (1.0 - 1e-12),
            "window must span at least {WINDOW_CORR_TIMES} correlation times"
        );
        Self::new(
            setting,
            gamma,
            |t| model.eval(t),
            window,
            DEFAULT_GRID_POINTS,
            Some(model.tau_offset),
        )
    }

    pub fn window(&self) -> f64 {
        *self.taus.last().unwrap()
    }

    /// `∫ y(τ) dτ` over `[−W, W]`.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c <= u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let (t0, t1) = (self.taus[i - 1], self.taus[i]);
        if c1 > c0 {
            t0 + (u - c0) / (c1 - c0) * (t1 - t0)
        } else {
            t0
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }
}

/// Draws a single pair delay. Builds the sampler each call; use
/// [`PairDelaySampler`] directly for repeated draws.
pub fn sample_pair_delay<R: Rng + ?Sized>(
    rng: &mut R,
    setting: &AnalyzerSetting<f64>,
    model: &TpwfModel<f64>,
    gamma: ReferenceAmplitude<f64>,
    window: f64,
) -> Result<f64> {
    Ok(PairDelaySampler::for_model(setting, model, gamma, window)?.sample(rng))
}

/// `∫_{−W}^{W} (γ² + |ψ(τ)|²) dτ` for the double-exponential model.
pub fn phase_averaged_mass(model: &TpwfModel<f64>, gamma: ReferenceAmplitude<f64>, window: f64) -> f64 {
    let half = model.corr_time / 2.0;
    let a2 = model.amplitude * model.amplitude;
    let right = 1.0 - (-(window - model.tau_offset) / half).exp();
    let left = 1.0 - (-(window + model.tau_offset) / half).exp();
    2.0 * window * gamma.get().powi(2) + a2 * half * (right + left)
}

/// Mean rate of pair events for one analyzer setting, 1/s.
pub fn pair_event_rate(
    config: &SimConfig,
    sampler: &PairDelaySampler,
    model: &TpwfModel<f64>,
    gamma: ReferenceAmplitude<f64>,
) -> f64 {
    let avg = phase_averaged_mass(model, gamma, config.tau_window);
    config.pair_rate * sampler.mass() / avg
}

fn poisson_count<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

/// Drops clicks within `dead_time_ps` of the previously kept click.
pub(crate) fn apply_dead_time(sorted: &[u64], dead_time_ps: u64) -> Vec<u64> {
    if dead_time_ps == 0 {
        return sorted.to_vec();
    }
    let mut out = Vec::with_capacity(sorted.len());
    let mut last: Option<u64> = None;
    for &t in sorted {
        if last.is_none_or(|l| t - l >= dead_time_ps) {
            out.push(t);
            last = Some(t);
        }
    }
    out
}

/// Generates the click streams of channels A and B for one analyzer setting.
pub fn generate_stream(
    config: &SimConfig,
    setting: &AnalyzerSetting<f64>,
    model: &TpwfModel<f64>,
    gamma: ReferenceAmplitude<f64>,
) -> Result<(TimeTagStream, TimeTagStream)> {
    config.validate_for(model)?;
    let sampler = PairDelaySampler::for_model(setting, model, gamma, config.tau_window)?;
    let pair_rate = pair_event_rate(config, &sampler, model, gamma);
    let expected = config.duration * (2.0 * pair_rate + config.singles_rate_a + config.singles_rate_b);
    if expected > config.max_tags as f64 {
        return Err(Error::OverBudget {
            expected,
            budget: config.max_tags,
        });
    }

    let mut rng = config.rng();
    let end = (config.duration * PS_PER_S).round();
    let in_range = |t: f64| t >= 0.0 && t < end;

    let n_pairs = poisson_count(&mut rng, pair_rate * config.duration);
    let mut a: Vec<f64> = Vec::with_capacity(n_pairs as usize);
    let mut b: Vec<f64> = Vec::with_capacity(n_pairs as usize);
    for _ in 0..n_pairs {
        let mid = rng.random::<f64>() * config.duration;
        let tau = sampler.sample(&mut rng);
        a.push((mid + 0.5 * tau) * PS_PER_S);
        b.push((mid - 0.5 * tau) * PS_PER_S);
    }
    for (clicks, rate) in [(&mut a, config.singles_rate_a), (&mut b, config.singles_rate_b)] {
        let n = poisson_count(&mut rng, rate * config.duration);
        clicks.extend((0..n).map(|_| rng.random::<f64>() * config.duration * PS_PER_S));
    }
    if config.jitter_sigma > 0.0 {
        let jitter = Normal::new(0.0, config.jitter_sigma * PS_PER_S)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for t in a.iter_mut().chain(b.iter_mut()) {
            *t += jitter.sample(&mut rng);
        }
    }

    let dead_ps = seconds_to_ps(config.dead_time) as u64;
    let finish = |clicks: Vec<f64>, channel: Channel| {
        let mut ts: Vec<u64> = clicks
            .into_iter()
            .map(f64::round)
            .filter(|&t| in_range(t))
            .map(|t| t as u64)
            .collect();
        ts.sort_unstable();
        let mut ts = apply_dead_time(&ts, dead_ps);
        if let Some(g) = &config.gate {
            ts.retain(|&t| g.is_open(t));
        }
        TimeTagStream::new(channel, ts, config.duration * config.gate_fraction())
    };
    Ok((finish(a, Channel::A)?, finish(b, Channel::B)?))
}

/// Generates streams for several settings concurrently, setting `k` on RNG stream `k`.
pub fn generate_settings(
    config: &SimConfig,
    settings: &[AnalyzerSetting<f64>],
    model: &TpwfModel<f64>,
    gamma: ReferenceAmplitude<f64>,
) -> Result<Vec<(TimeTagStream, TimeTagStream)>> {
    settings
        .par_iter()
        .enumerate()
        .map(|(k, s)| generate_stream(&config.with_stream(k as u64), s, model, gamma))
        .collect()
}

/// Analytic mean counts per bin, evaluated at bin centres, including the flat
/// accidental term `R_A·R_B·Δ·T` with `R` the total click rate of each channel.
pub fn expected_histogram(
    config: &SimConfig,
    setting: &AnalyzerSetting<f64>,
    model: &TpwfModel<f64>,
    gamma: ReferenceAmplitude<f64>,
    bin_width: f64,
    tau_max: f64,
) -> Result<CoincidenceHistogram> {
    config.validate_for(model)?;
    ensure_param!(bin_width > 0.0, "bin_width must be positive");
    ensure_param!(tau_max > 0.0, "tau_max must be positive");
    let nbins_f = 2.0 * tau_max / bin_width;
    let nbins = nbins_f.round() as usize;
    ensure_param!(
        nbins > 0 && (nbins_f - nbins as f64).abs() < 1e-6,
        "tau_max must be a multiple of bin_width"
    );
    let sampler = PairDelaySampler::for_model(setting, model, gamma, config.tau_window)?;
    let pair_rate = pair_event_rate(config, &sampler, model, gamma);
    let exposure = config.duration * config.gate_fraction();
    let rate_a = config.singles_rate_a + pair_rate;
    let rate_b = config.singles_rate_b + pair_rate;
    let accidentals = rate_a * rate_b * bin_width * exposure;
    let avg = phase_averaged_mass(model, gamma, config.tau_window);
    let per_unit_y = config.pair_rate * exposure * bin_width / avg;
    let weight = setting.port_weight();

    let tau_min = -tau_max;
    let expected: Vec<f64> = (0..nbins)
        .map(|k| {
            let tau = tau_min + (k as f64 + 0.5) * bin_width;
            let inside = tau.abs() <= config.tau_window;
            let y = if inside {
                weight * interference_g2(gamma.get(), model.eval(tau), setting.phi)
            } else {
                0.0
            };
            per_unit_y * y + accidentals
        })
        .collect();
    Ok(CoincidenceHistogram {
        bin_width,
        tau_min,
        tau_max,
        counts: vec![0; nbins],
        acquisition_time: exposure,
        singles_a: (rate_a * exposure).round() as u64,
        singles_b: (rate_b * exposure).round() as u64,
        setting: Some(*setting),
        expected: Some(expected),
    })
}

/// Histogram with each bin drawn from a Poisson law around its analytic mean.
pub fn rate_level_histogram(
    config: &SimConfig,
    setting: &AnalyzerSetting<f64>,
    model: &TpwfModel<f64>,
    gamma: ReferenceAmplitude<f64>,
    bin_width: f64,
    tau_max: f64,
) -> Result<CoincidenceHistogram> {
    let mut hist = expected_histogram(config, setting, model, gamma, bin_width, tau_max)?;
    let mut rng = config.rng();
    hist.counts = hist
        .expected
        .as_ref()
        .unwrap()
        .iter()
        .map(|&m| poisson_count(&mut rng, m))
        .collect();
    Ok(hist)
}
