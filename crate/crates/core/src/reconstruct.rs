//! Closed-form per-bin inversion of three analyzer-phase histograms.
//!
//! With `y_k = |γe^{−2iφ_k} − ψ|²` at `φ_k = kπ/3` and `ȳ = (y0+y1+y2)/3`:
//!
//! ```text
//! ψ = (ȳ − y0)/(2γ) + i·(y1 − y2)/(2√3·γ)
//! γ = √(ȳ + √(3ȳ² − ⅔(y0² + y1² + y2²))) / √2
//! ```
//!
//! The inner radicand equals `(γ² − |ψ|²)²`; taking the positive root assumes
//! `γ ≥ |ψ|`. A flat background added to every `y_k` cancels in both
//! numerators but not in `γ`.

use serde::{Deserialize, Serialize};

use crate::correlate::CoincidenceHistogram;
use crate::error::{ensure_param, Error, Result};
use crate::io::nullable;
use crate::model::AnalyzerSetting;
use crate::scalar::{lit, Real};

/// Radicands down to `−RADICAND_TOLERANCE·ȳ²` are clamped to zero.
pub const RADICAND_TOLERANCE: f64 = 1e-9;
/// Fewest bins allowed on each side for a wing estimate.
pub const MIN_WING_BINS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootChoice {
    /// `γ² = (ȳ + √D)/2`, valid when `γ ≥ |ψ|`.
    #[default]
    Larger,
    /// `γ² = (ȳ − √D)/2`, for a reference weaker than the biphoton.
    Smaller,
}

/// Why a bin has no estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinFlag {
    NegativeRadicand,
    ZeroGamma,
    ZeroCounts,
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinEstimate<T> {
    pub re_psi: T,
    pub im_psi: T,
    pub gamma: T,
}

/// Inner radicand `ȳ² − ⅔Σ(y_k − ȳ)²`, algebraically `3ȳ² − ⅔Σy_k²`.
#[inline]
pub fn radicand<T: Real>(y: [T; 3]) -> T {
    let mean = (y[0] + y[1] + y[2]) / lit(3.0);
    let d: T = y.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b);
    mean * mean - d * lit(2.0 / 3.0)
}

/// Offset-free numerators `(ȳ − y0, y1 − y2)`, formed from differences only so
/// that a constant added to every `y_k` cancels exactly when the sums are exact.
#[inline]
pub fn numerators<T: Real>(y: [T; 3]) -> (T, T) {
    (((y[1] - y[0]) + (y[2] - y[0])) / lit(3.0), y[1] - y[2])
}

/// Inverts one bin with the larger root.
pub fn reconstruct_bin<T: Real>(y0: T, y1: T, y2: T) -> Result<BinEstimate<T>, BinFlag> {
    reconstruct_bin_with([y0, y1, y2], RootChoice::Larger)
}

pub fn reconstruct_bin_with<T: Real>(y: [T; 3], root: RootChoice) -> Result<BinEstimate<T>, BinFlag> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(BinFlag::NonFinite);
    }
    let mean = (y[0] + y[1] + y[2]) / lit(3.0);
    let mut rad = radicand(y);
    if rad < T::zero() {
        if rad < -lit::<T>(RADICAND_TOLERANCE) * mean * mean {
            return Err(BinFlag::NegativeRadicand);
        }
        rad = T::zero();
    }
    solve(y, mean, rad.sqrt(), root)
}

#[inline]
fn solve<T: Real>(y: [T; 3], mean: T, sqrt_rad: T, root: RootChoice) -> Result<BinEstimate<T>, BinFlag> {
    let outer = match root {
        RootChoice::Larger => mean + sqrt_rad,
        RootChoice::Smaller => mean - sqrt_rad,
    };
    let gamma = (outer.max(T::zero()) / lit(2.0)).sqrt();
    if !(gamma > T::zero()) {
        return Err(BinFlag::ZeroGamma);
    }
    let two_gamma = gamma + gamma;
    let (nr, ni) = numerators(y);
    Ok(BinEstimate {
        re_psi: nr / two_gamma,
        im_psi: ni / (two_gamma * lit(3f64.sqrt())),
        gamma,
    })
}

/// Tolerant solve used for derivatives: negative radicands are clamped.
fn solve_clamped(y: [f64; 3], root: RootChoice) -> Option<[f64; 3]> {
    let mean = (y[0] + y[1] + y[2]) / 3.0;
    let rad = radicand(y).max(0.0);
    solve(y, mean, rad.sqrt(), root)
        .ok()
        .map(|e| [e.re_psi, e.im_psi, e.gamma])
}

/// Central-difference Jacobian of `(Re ψ, Im ψ, γ)` with respect to `(y0, y1, y2)`.
pub fn numerical_jacobian(y: [f64; 3], root: RootChoice) -> Option<[[f64; 3]; 3]> {
    let mean = (y[0] + y[1] + y[2]) / 3.0;
    let h = 1e-6 * mean.abs().max(f64::MIN_POSITIVE);
    let mut jac = [[0.0; 3]; 3];
    for k in 0..3 {
        let mut up = y;
        let mut down = y;
        up[k] += h;
        down[k] -= h;
        let f_up = solve_clamped(up, root)?;
        let f_down = solve_clamped(down, root)?;
        for (row, (u, d)) in jac.iter_mut().zip(f_up.iter().zip(&f_down)) {
            row[k] = (u - d) / (2.0 * h);
        }
    }
    Some(jac)
}

/// Poisson standard deviations `y_k/√counts_k`.
fn poisson_sigmas(y: [f64; 3], counts: [u64; 3]) -> Result<[f64; 3], BinFlag> {
    if counts.contains(&0) {
        return Err(BinFlag::ZeroCounts);
    }
    Ok([0, 1, 2].map(|k| y[k].abs() / (counts[k] as f64).sqrt()))
}

/// Covariance of `(Re ψ, Im ψ, γ)` from first-order propagation of Poisson errors.
pub fn propagate_covariance(
    y: [f64; 3],
    counts: [u64; 3],
    root: RootChoice,
) -> Result<[[f64; 3]; 3], BinFlag> {
    let sig = poisson_sigmas(y, counts)?;
    let jac = numerical_jacobian(y, root).ok_or(BinFlag::ZeroGamma)?;
    Ok(sandwich(&jac, &sig))
}

fn sandwich(jac: &[[f64; 3]; 3], sig: &[f64; 3]) -> [[f64; 3]; 3] {
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            cov[i][j] = (0..3).map(|k| jac[i][k] * jac[j][k] * sig[k] * sig[k]).sum();
        }
    }
    cov
}

/// 1σ uncertainties `(σ_re, σ_im, σ_γ)` for Poisson-distributed `y_k`.
///
/// Zero counts in any setting give infinite sigmas.
pub fn propagate_errors(y: [f64; 3], counts: [u64; 3]) -> (f64, f64, f64) {
    match propagate_covariance(y, counts, RootChoice::Larger) {
        Ok(c) => (c[0][0].sqrt(), c[1][1].sqrt(), c[2][2].sqrt()),
        Err(_) => (f64::INFINITY, f64::INFINITY, f64::INFINITY),
    }
}

/// Three histograms at `φ = 0, π/3, 2π/3` with identical binning.
#[derive(Debug, Clone)]
pub struct PhaseTriple {
    hists: [CoincidenceHistogram; 3],
}

impl PhaseTriple {
    pub fn new(y0: CoincidenceHistogram, y1: CoincidenceHistogram, y2: CoincidenceHistogram) -> Result<Self> {
        let hists = [y0, y1, y2];
        for h in &hists {
            h.validate()?;
        }
        for k in 1..3 {
            if !hists[0].same_binning(&hists[k]) {
                return Err(Error::Mismatch(format!(
                    "histogram {k} binning differs from histogram 0"
                )));
            }
        }
        for (k, h) in hists.iter().enumerate() {
            if let Some(s) = &h.setting {
                let want = AnalyzerSetting::<f64>::reconstruction(k);
                if (s.phi - want.phi).abs() > 1e-9 || (s.theta - want.theta).abs() > 1e-9 {
                    return Err(Error::Mismatch(format!(
                        "histogram {k} was taken at theta={}, phi={}, expected phi={}",
                        s.theta, s.phi, want.phi
                    )));
                }
            }
        }
        Ok(Self { hists })
    }

    pub fn histograms(&self) -> &[CoincidenceHistogram; 3] {
        &self.hists
    }

    pub fn len(&self) -> usize {
        self.hists[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.hists[0].is_empty()
    }

    /// Per-histogram factor turning counts into `y` values.
    pub fn scales(&self, normalization: Normalization) -> Result<[f64; 3]> {
        let h = &self.hists;
        for x in h {
            ensure_param!(x.acquisition_time > 0.0, "histogram has zero acquisition time");
        }
        match normalization {
            Normalization::Counts => Ok([1.0; 3]),
            Normalization::Rate => Ok([0, 1, 2].map(|k| 1.0 / (h[k].acquisition_time * h[k].bin_width))),
            Normalization::PooledSingles => {
                let time: f64 = h.iter().map(|x| x.acquisition_time).sum();
                let ra = h.iter().map(|x| x.singles_a as f64).sum::<f64>() / time;
                let rb = h.iter().map(|x| x.singles_b as f64).sum::<f64>() / time;
                ensure_param!(ra > 0.0 && rb > 0.0, "cannot normalize: zero singles");
                Ok([0, 1, 2].map(|k| 1.0 / (h[k].acquisition_time * h[k].bin_width * ra * rb)))
            }
            Normalization::PerSetting => {
                let mut out = [0.0; 3];
                for (k, x) in h.iter().enumerate() {
                    ensure_param!(
                        x.singles_a > 0 && x.singles_b > 0,
                        "cannot normalize: zero singles in histogram {k}"
                    );
                    out[k] = x.acquisition_time / (x.singles_a as f64 * x.singles_b as f64 * x.bin_width);
                }
                Ok(out)
            }
        }
    }
}

/// How counts are turned into `y_k`. All choices except `PerSetting` apply one
/// common scale to the three settings up to their exposure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Raw counts; only valid for equal exposures.
    Counts,
    /// Coincidence rate density `counts/(T·Δ)`.
    Rate,
    /// `counts/(T·Δ·R̄_A·R̄_B)` with singles rates pooled over the three settings.
    #[default]
    PooledSingles,
    /// `counts·T/(N_A·N_B·Δ)` per histogram.
    PerSetting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    #[default]
    None,
    WingSubtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    #[default]
    PerBin,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub background_mode: BackgroundMode,
    pub gamma_mode: GammaMode,
    pub root_choice: RootChoice,
    pub normalization: Normalization,
    /// Fraction of bins on each side treated as wings.
    pub wing_fraction: f64,
    /// A bin is flagged root-ambiguous when `√D < ambiguity·ȳ`.
    pub ambiguity: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            background_mode: BackgroundMode::None,
            gamma_mode: GammaMode::PerBin,
            root_choice: RootChoice::Larger,
            normalization: Normalization::PooledSingles,
            wing_fraction: 0.2,
            ambiguity: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedBin {
    pub tau: f64,
    pub y: [f64; 3],
    pub counts: [u64; 3],
    #[serde(with = "nullable")]
    pub re_psi: f64,
    #[serde(with = "nullable")]
    pub im_psi: f64,
    #[serde(with = "nullable")]
    pub gamma: f64,
    #[serde(with = "nullable")]
    pub sigma_re: f64,
    #[serde(with = "nullable")]
    pub sigma_im: f64,
    #[serde(with = "nullable")]
    pub sigma_gamma: f64,
    #[serde(with = "nullable")]
    pub cov_re_im: f64,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<BinFlag>,
    #[serde(default)]
    pub root_ambiguous: bool,
}

impl ReconstructedBin {
    pub fn psi(&self) -> num_complex::Complex64 {
        num_complex::Complex64::new(self.re_psi, self.im_psi)
    }

    /// `|ψ|²` as estimated.
    pub fn abs2(&self) -> f64 {
        self.re_psi * self.re_psi + self.im_psi * self.im_psi
    }

    /// `|ψ|²` with the noise bias `σ_re² + σ_im²` removed.
    pub fn abs2_debiased(&self) -> f64 {
        self.abs2() - self.sigma_re * self.sigma_re - self.sigma_im * self.sigma_im
    }

    /// Standard deviation of `|ψ|²` when its true value is `abs2`.
    ///
    /// Second-order Gaussian moment `4|ψ|²·uᵀCu + 2·tr(C²)` over the `(re, im)`
    /// block, with `u` the observed direction of `ψ`.
    pub fn sigma_abs2_at(&self, abs2: f64) -> f64 {
        let (sr2, si2, c) = (self.sigma_re.powi(2), self.sigma_im.powi(2), self.cov_re_im);
        let norm2 = self.abs2();
        let radial = if norm2 > 0.0 {
            (self.re_psi.powi(2) * sr2 + self.im_psi.powi(2) * si2 + 2.0 * self.re_psi * self.im_psi * c) / norm2
        } else {
            0.5 * (sr2 + si2)
        };
        (4.0 * abs2.max(0.0) * radial + 2.0 * (sr2 * sr2 + si2 * si2 + 2.0 * c * c)).sqrt()
    }

    pub fn phase(&self) -> f64 {
        self.im_psi.atan2(self.re_psi)
    }

    /// Linearized standard deviation of `arg ψ`.
    pub fn sigma_phase(&self) -> f64 {
        let a2 = self.abs2();
        let (re, im) = (self.re_psi, self.im_psi);
        let var = (im * im * self.sigma_re.powi(2) + re * re * self.sigma_im.powi(2)
            - 2.0 * re * im * self.cov_re_im)
            / (a2 * a2);
        var.sqrt()
    }

    fn invalid(tau: f64, y: [f64; 3], counts: [u64; 3], flag: BinFlag) -> Self {
        Self {
            tau,
            y,
            counts,
            re_psi: f64::NAN,
            im_psi: f64::NAN,
            gamma: f64::NAN,
            sigma_re: f64::INFINITY,
            sigma_im: f64::INFINITY,
            sigma_gamma: f64::INFINITY,
            cov_re_im: f64::NAN,
            valid: false,
            flag: Some(flag),
            root_ambiguous: false,
        }
    }
}

/// Flat-offset estimate from the regression `ȳ(τ) = W + |γψ(τ)|²/γ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundFit {
    /// Estimated flat offset `B` in `y` units.
    pub level: f64,
    pub sigma: f64,
    /// Asymptotic level `W = γ² + B`.
    pub asymptote: f64,
    /// `γ²` from the regression slope.
    pub gamma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructedTpwf {
    pub bin_width: f64,
    pub options: ReconstructOptions,
    /// Count-to-`y` factors of the three histograms.
    pub scales: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<BackgroundFit>,
    /// Pooled `(γ, σ_γ)` when `gamma_mode` is pooled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled_gamma: Option<(f64, f64)>,
    pub bins: Vec<ReconstructedBin>,
}

impl ReconstructedTpwf {
    pub fn valid_bins(&self) -> impl Iterator<Item = &ReconstructedBin> {
        self.bins.iter().filter(|b| b.valid)
    }

    pub fn invalid_fraction(&self) -> f64 {
        let bad = self.bins.iter().filter(|b| !b.valid).count();
        bad as f64 / self.bins.len().max(1) as f64
    }
}

/// Mean of the outermost `wing_fraction` of `values` on each side, with its standard error.
fn wing_mean(values: &[f64], sigmas: &[f64], wing_fraction: f64) -> Result<(f64, f64)> {
    ensure_param!(
        wing_fraction > 0.0 && wing_fraction <= 0.4,
        "wing_fraction must lie in (0, 0.4], got {wing_fraction}"
    );
    let per_side = (wing_fraction * values.len() as f64).floor() as usize;
    ensure_param!(
        per_side >= MIN_WING_BINS,
        "only {per_side} wing bins per side, need at least {MIN_WING_BINS}"
    );
    let n = values.len();
    let idx = (0..per_side).chain(n - per_side..n);
    let (mut sum, mut var) = (0.0, 0.0);
    for i in idx {
        sum += values[i];
        var += sigmas[i] * sigmas[i];
    }
    let m = 2 * per_side;
    Ok((sum / m as f64, var.sqrt() / m as f64))
}

/// Mean normalized g² over the wing bins, with its standard error.
///
/// Far from the biphoton this level is `γ² + B`; the two parts are not separable
/// from one histogram.
pub fn background_estimate(hist: &CoincidenceHistogram, wing_fraction: f64) -> Result<(f64, f64)> {
    let g2 = crate::correlate::normalize_g2(hist)?;
    let (v, s): (Vec<f64>, Vec<f64>) = g2.into_iter().unzip();
    wing_mean(&v, &s, wing_fraction)
}

/// Estimates the flat offset shared by the three `y` curves.
///
/// The numerators `n = γψ` are offset-free, and `ȳ = W + |n|²/γ²`, so a
/// weighted straight-line fit of `ȳ` against the noise-debiased `|n|²` gives
/// `γ² = 1/slope` and `B = W − γ²`.
pub fn estimate_offset(y: &[[f64; 3]], sigma_y: &[[f64; 3]]) -> Result<BackgroundFit> {
    let mut sw = 0.0;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    let mut used = 0usize;
    for (yk, sk) in y.iter().zip(sigma_y) {
        let mean = (yk[0] + yk[1] + yk[2]) / 3.0;
        let var_mean = (sk[0].powi(2) + sk[1].powi(2) + sk[2].powi(2)) / 9.0;
        if !(var_mean > 0.0) || !mean.is_finite() {
            continue;
        }
        // |n|² = ((ȳ−y0)² + (y1−y2)²/3)/4 and its noise bias
        let a = mean - yk[0];
        let b = (yk[1] - yk[2]) / 3f64.sqrt();
        let var_a = (4.0 * sk[0].powi(2) + sk[1].powi(2) + sk[2].powi(2)) / 9.0;
        let var_b = (sk[1].powi(2) + sk[2].powi(2)) / 3.0;
        let x = (a * a + b * b - var_a - var_b) / 4.0;
        let w = 1.0 / var_mean;
        sw += w;
        sx += w * x;
        sy += w * mean;
        sxx += w * x * x;
        sxy += w * x * mean;
        used += 1;
    }
    if used < 3 {
        return Err(Error::Numerical("too few bins to estimate the background".into()));
    }
    let det = sw * sxx - sx * sx;
    if !(det > 0.0) {
        return Err(Error::Numerical("degenerate background regression".into()));
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    if !(slope > 0.0) {
        return Err(Error::Numerical(
            "background not identifiable: no interference signal above noise".into(),
        ));
    }
    let var_slope = sw / det;
    let var_int = sxx / det;
    let cov = -sx / det;
    let gamma2 = 1.0 / slope;
    // B = W − 1/s
    let d_slope = 1.0 / (slope * slope);
    let var_b = var_int + d_slope * d_slope * var_slope + 2.0 * d_slope * cov;
    Ok(BackgroundFit {
        level: intercept - gamma2,
        sigma: var_b.max(0.0).sqrt(),
        asymptote: intercept,
        gamma2,
    })
}

/// Reconstructs `ψ(τ)` and `γ` bin by bin.
pub fn reconstruct_curve(
    triple: &PhaseTriple,
    background_mode: BackgroundMode,
    gamma_mode: GammaMode,
) -> Result<ReconstructedTpwf> {
    reconstruct_curve_with(
        triple,
        &ReconstructOptions {
            background_mode,
            gamma_mode,
            ..Default::default()
        },
    )
}

pub fn reconstruct_curve_with(triple: &PhaseTriple, opts: &ReconstructOptions) -> Result<ReconstructedTpwf> {
    let scales = triple.scales(opts.normalization)?;
    let hists = triple.histograms();
    let n = triple.len();
    let counts: Vec<[u64; 3]> = (0..n).map(|i| [0, 1, 2].map(|k| hists[k].counts[i])).collect();
    let mut y: Vec<[f64; 3]> = counts
        .iter()
        .map(|c| [0, 1, 2].map(|k| c[k] as f64 * scales[k]))
        .collect();
    let sigma_y: Vec<[f64; 3]> = counts
        .iter()
        .map(|c| [0, 1, 2].map(|k| (c[k] as f64).sqrt() * scales[k]))
        .collect();

    let background = match opts.background_mode {
        BackgroundMode::None => None,
        BackgroundMode::WingSubtract => {
            let fit = estimate_offset(&y, &sigma_y)?;
            for yk in y.iter_mut() {
                yk.iter_mut().for_each(|v| *v -= fit.level);
            }
            Some(fit)
        }
    };

    let mut bins: Vec<ReconstructedBin> = (0..n)
        .map(|i| reconstruct_one(hists[0].bin_center(i), y[i], counts[i], sigma_y[i], opts))
        .collect();

    let invalid = bins.iter().filter(|b| !b.valid).count();
    if n == 0 || 2 * invalid > n {
        return Err(Error::Numerical(format!(
            "{invalid} of {n} bins could not be inverted"
        )));
    }

    let pooled_gamma = match opts.gamma_mode {
        GammaMode::PerBin => None,
        GammaMode::Pooled => {
            let pooled = pool_gamma(&bins)?;
            for (b, s) in bins.iter_mut().zip(&sigma_y) {
                if b.valid {
                    apply_fixed_gamma(b, *s, pooled);
                }
            }
            Some(pooled)
        }
    };

    Ok(ReconstructedTpwf {
        bin_width: hists[0].bin_width,
        options: *opts,
        scales,
        background,
        pooled_gamma,
        bins,
    })
}

fn reconstruct_one(
    tau: f64,
    y: [f64; 3],
    counts: [u64; 3],
    sigma_y: [f64; 3],
    opts: &ReconstructOptions,
) -> ReconstructedBin {
    if counts.contains(&0) {
        return ReconstructedBin::invalid(tau, y, counts, BinFlag::ZeroCounts);
    }
    let est = match reconstruct_bin_with(y, opts.root_choice) {
        Ok(e) => e,
        Err(flag) => return ReconstructedBin::invalid(tau, y, counts, flag),
    };
    let Some(jac) = numerical_jacobian(y, opts.root_choice) else {
        return ReconstructedBin::invalid(tau, y, counts, BinFlag::ZeroGamma);
    };
    let cov = sandwich(&jac, &sigma_y);
    let mean = (y[0] + y[1] + y[2]) / 3.0;
    let root_ambiguous = radicand(y).max(0.0).sqrt() < opts.ambiguity * mean.abs();
    ReconstructedBin {
        tau,
        y,
        counts,
        re_psi: est.re_psi,
        im_psi: est.im_psi,
        gamma: est.gamma,
        sigma_re: cov[0][0].sqrt(),
        sigma_im: cov[1][1].sqrt(),
        sigma_gamma: cov[2][2].sqrt(),
        cov_re_im: cov[0][1],
        valid: true,
        flag: None,
        root_ambiguous,
    }
}

/// Inverse-variance weighted mean of the per-bin γ.
fn pool_gamma(bins: &[ReconstructedBin]) -> Result<(f64, f64)> {
    let (mut sw, mut swg) = (0.0, 0.0);
    for b in bins.iter().filter(|b| b.valid) {
        let w = 1.0 / (b.sigma_gamma * b.sigma_gamma);
        if w.is_finite() && w > 0.0 {
            sw += w;
            swg += w * b.gamma;
        }
    }
    if !(sw > 0.0) {
        return Err(Error::Numerical("no bins with finite gamma uncertainty".into()));
    }
    Ok((swg / sw, 1.0 / sw.sqrt()))
}

/// Re-evaluates the numerators of a bin with a shared γ. The uncertainty of
/// the shared γ is not propagated into the bin.
fn apply_fixed_gamma(b: &mut ReconstructedBin, sigma_y: [f64; 3], (gamma, sigma_gamma): (f64, f64)) {
    let (nr, ni) = numerators(b.y);
    let two_gamma = 2.0 * gamma;
    let sqrt3 = 3f64.sqrt();
    b.re_psi = nr / two_gamma;
    b.im_psi = ni / (two_gamma * sqrt3);
    b.gamma = gamma;
    b.sigma_gamma = sigma_gamma;
    let jre = [-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0].map(|v| v / two_gamma);
    let jim = [0.0, 1.0, -1.0].map(|v| v / (two_gamma * sqrt3));
    let s2 = sigma_y.map(|s| s * s);
    b.sigma_re = (0..3).map(|k| jre[k] * jre[k] * s2[k]).sum::<f64>().sqrt();
    b.sigma_im = (0..3).map(|k| jim[k] * jim[k] * s2[k]).sum::<f64>().sqrt();
    b.cov_re_im = (0..3).map(|k| jre[k] * jim[k] * s2[k]).sum();
}
