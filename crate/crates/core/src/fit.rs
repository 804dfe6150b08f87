//! Model fits to reconstructed wave functions and visibility scans.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::nullable;
use crate::reconstruct::ReconstructedTpwf;

/// Fewest valid bins accepted by [`fit_double_exponential`].
pub const MIN_FIT_BINS: usize = 8;
/// Default amplitude cut for [`fit_constant_phase`], relative to the peak `|ψ|²`.
pub const DEFAULT_PHASE_THRESHOLD: f64 = 0.1;

const MAX_ITERATIONS: usize = 500;
const REWEIGHT_PASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    #[serde(with = "nullable")]
    pub sigma: f64,
    #[serde(default)]
    pub fixed: bool,
}

impl FitParam {
    fn new(name: &str, value: f64, sigma: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            sigma,
            fixed: false,
        }
    }

    fn fixed(name: &str, value: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            sigma: 0.0,
            fixed: true,
        }
    }
}

/// Plot-ready residual record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub x: f64,
    pub data: f64,
    pub model: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<FitParam>,
    /// Quantities computed from the parameters.
    pub derived: Vec<FitParam>,
    pub chi2: f64,
    pub ndof: usize,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
    pub residuals: Vec<Residual>,
}

impl FitResult {
    fn lookup(&self, name: &str) -> Option<&FitParam> {
        self.params
            .iter()
            .chain(&self.derived)
            .find(|p| p.name == name)
    }

    /// Value of a parameter or derived quantity.
    pub fn value(&self, name: &str) -> Option<f64> {
        self.lookup(name).map(|p| p.value)
    }

    pub fn sigma(&self, name: &str) -> Option<f64> {
        self.lookup(name).map(|p| p.sigma)
    }

    pub fn reduced_chi2(&self) -> f64 {
        if self.ndof == 0 {
            f64::NAN
        } else {
            self.chi2 / self.ndof as f64
        }
    }
}

/// `|ψ(τ)|² = A²·exp(−2|τ−τ0|/T_c)` and its gradient in `(A, τ0, T_c)`.
pub fn double_exponential(params: &[f64; 3], tau: f64) -> (f64, [f64; 3]) {
    let [a, t0, tc] = *params;
    let x = tau - t0;
    let e = (-2.0 * x.abs() / tc).exp();
    let m = a * a * e;
    let sign = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    (m, [2.0 * a * e, m * 2.0 * sign / tc, m * 2.0 * x.abs() / (tc * tc)])
}

struct LmOutcome {
    params: Vec<f64>,
    covariance: DMatrix<f64>,
    iterations: usize,
    converged: bool,
    diagnostics: Option<String>,
}

/// Prediction at a point and its gradient with respect to the parameters.
type PointModel<'a> = &'a dyn Fn(&[f64], usize) -> (f64, Vec<f64>);

/// Weighted least squares by Levenberg–Marquardt on parameters rescaled to unit order.
///
/// `model(p, i)` returns the prediction for point `i` and its gradient. Steps for
/// which `admissible` is false are rejected like uphill steps.
fn levenberg_marquardt(
    n_points: usize,
    data: &[f64],
    sigma: &[f64],
    p0: &[f64],
    scale: &[f64],
    model: PointModel,
    admissible: &dyn Fn(&[f64]) -> bool,
) -> LmOutcome {
    let np = p0.len();
    let unscale = |q: &DVector<f64>| -> Vec<f64> { q.iter().zip(scale).map(|(v, s)| v * s).collect() };
    let evaluate = |p: &[f64]| -> (DVector<f64>, DMatrix<f64>, f64) {
        let mut r = DVector::zeros(n_points);
        let mut j = DMatrix::zeros(n_points, np);
        for i in 0..n_points {
            let (m, g) = model(p, i);
            r[i] = (data[i] - m) / sigma[i];
            for k in 0..np {
                j[(i, k)] = g[k] * scale[k] / sigma[i];
            }
        }
        let chi2 = r.norm_squared();
        (r, j, chi2)
    };

    let mut q = DVector::from_iterator(np, p0.iter().zip(scale).map(|(v, s)| v / s));
    let (mut r, mut j, mut chi2) = evaluate(&unscale(&q));
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut diagnostics = None;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let jtj = j.transpose() * &j;
        let grad = j.transpose() * &r;
        if grad.amax() <= 1e-14 * (1.0 + chi2) {
            converged = true;
            break;
        }
        let mut damped = jtj.clone();
        for k in 0..np {
            damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
        }
        let Some(step) = damped.lu().solve(&grad) else {
            lambda *= 10.0;
            continue;
        };
        let q_new = &q + &step;
        let p_new = unscale(&q_new);
        let accepted = if admissible(&p_new) {
            let (r_new, j_new, chi2_new) = evaluate(&p_new);
            if chi2_new.is_finite() && chi2_new <= chi2 {
                let small_gain = chi2 - chi2_new <= 1e-12 * chi2.max(f64::MIN_POSITIVE);
                let small_step = step.amax() <= 1e-12 * (1.0 + q.amax());
                q = q_new;
                r = r_new;
                j = j_new;
                chi2 = chi2_new;
                lambda = (lambda / 10.0).max(1e-12);
                if small_gain || small_step {
                    converged = true;
                    break;
                }
                true
            } else {
                false
            }
        } else {
            false
        };
        if !accepted {
            lambda *= 10.0;
            if lambda > 1e16 {
                diagnostics = Some(format!(
                    "damping diverged after {iterations} iterations at chi2 {chi2}"
                ));
                break;
            }
        }
    }
    if !converged && diagnostics.is_none() {
        diagnostics = Some(format!("iteration budget of {MAX_ITERATIONS} exhausted"));
    }

    let jtj = j.transpose() * &j;
    let cov_q = jtj
        .try_inverse()
        .unwrap_or_else(|| DMatrix::from_element(np, np, f64::NAN));
    let mut covariance = cov_q;
    for a in 0..np {
        for b in 0..np {
            covariance[(a, b)] *= scale[a] * scale[b];
        }
    }
    LmOutcome {
        params: unscale(&q),
        covariance,
        iterations,
        converged,
        diagnostics,
    }
}

/// Options for [`fit_double_exponential_with`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleExpOptions {
    /// Holds `T_c` at this value (seconds) instead of fitting it.
    pub fix_corr_time: Option<f64>,
}

/// Fits `|ψ(τ)|² = A²·exp(−2|τ−τ0|/T_c)` to the valid bins.
///
/// Data are the noise-debiased `|ψ|²` per bin; weights are refreshed from the
/// current model over a few passes so low fluctuations are not over-weighted.
pub fn fit_double_exponential(recon: &ReconstructedTpwf, fix_corr_time: Option<f64>) -> Result<FitResult> {
    fit_double_exponential_with(recon, DoubleExpOptions { fix_corr_time })
}

pub fn fit_double_exponential_with(recon: &ReconstructedTpwf, opts: DoubleExpOptions) -> Result<FitResult> {
    if let Some(tc) = opts.fix_corr_time {
        if !(tc > 0.0 && tc.is_finite()) {
            return Err(Error::InvalidParameter(format!("fixed corr_time must be positive, got {tc}")));
        }
    }
    let bins: Vec<_> = recon
        .valid_bins()
        .filter(|b| b.sigma_re.is_finite() && b.sigma_im.is_finite())
        .collect();
    if bins.len() < MIN_FIT_BINS {
        return Err(Error::InvalidParameter(format!(
            "{} valid bins, need at least {MIN_FIT_BINS}",
            bins.len()
        )));
    }
    let taus: Vec<f64> = bins.iter().map(|b| b.tau).collect();
    let data: Vec<f64> = bins.iter().map(|b| b.abs2_debiased()).collect();

    let (a0, t0, tc0) = initial_guess(&taus, &data);
    let tc0 = opts.fix_corr_time.unwrap_or(tc0);
    let scale_a = a0.max(f64::MIN_POSITIVE);
    let scale_t = tc0;

    let free_tc = opts.fix_corr_time.is_none();
    let full = |p: &[f64]| -> [f64; 3] {
        if free_tc {
            [p[0], p[1], p[2]]
        } else {
            [p[0], p[1], tc0]
        }
    };
    let model = |p: &[f64], i: usize| -> (f64, Vec<f64>) {
        let (m, g) = double_exponential(&full(p), taus[i]);
        (m, if free_tc { g.to_vec() } else { g[..2].to_vec() })
    };
    let admissible = |p: &[f64]| p[0] > 0.0 && (!free_tc || p[2] > 0.0);
    let (mut p, scale): (Vec<f64>, Vec<f64>) = if free_tc {
        (vec![a0, t0, tc0], vec![scale_a, scale_t, scale_t])
    } else {
        (vec![a0, t0], vec![scale_a, scale_t])
    };

    let mut sigma: Vec<f64> = bins
        .iter()
        .zip(&data)
        .map(|(b, &d)| b.sigma_abs2_at(d))
        .collect();
    let mut outcome = None;
    for _ in 0..REWEIGHT_PASSES {
        let fitted = levenberg_marquardt(taus.len(), &data, &sigma, &p, &scale, &model, &admissible);
        p = fitted.params.clone();
        sigma = bins
            .iter()
            .zip(&taus)
            .map(|(b, &t)| b.sigma_abs2_at(double_exponential(&full(&p), t).0))
            .collect();
        outcome = Some(fitted);
    }
    let fitted = outcome.expect("at least one pass");
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Numerical("zero uncertainty on a fitted bin".into()));
    }
    // final chi2 with the refreshed weights
    let chi2 = taus
        .iter()
        .zip(&data)
        .zip(&sigma)
        .map(|((&t, &d), &s)| ((d - double_exponential(&full(&p), t).0) / s).powi(2))
        .sum();

    let sd = |k: usize| fitted.covariance[(k, k)].sqrt();
    let [a, t0, tc] = full(&p);
    let mut params = vec![FitParam::new("amplitude", a, sd(0)), FitParam::new("tau_offset", t0, sd(1))];
    let sigma_tc = if free_tc {
        params.push(FitParam::new("corr_time", tc, sd(2)));
        sd(2)
    } else {
        params.push(FitParam::fixed("corr_time", tc));
        0.0
    };
    let ln2 = std::f64::consts::LN_2;
    let residuals = taus
        .iter()
        .zip(&data)
        .zip(&sigma)
        .map(|((&x, &d), &s)| Residual {
            x,
            data: d,
            model: double_exponential(&full(&p), x).0,
            sigma: s,
        })
        .collect();
    Ok(FitResult {
        params,
        derived: vec![FitParam::new("fwhm", tc * ln2, sigma_tc * ln2)],
        chi2,
        ndof: taus.len() - p.len(),
        converged: fitted.converged,
        iterations: fitted.iterations,
        diagnostics: fitted.diagnostics,
        residuals,
    })
}

/// Second moment of `e^{−2|x|/T}` truncated where it falls to 10% of the peak is `0.2248·T²`.
const TRUNCATED_SECOND_MOMENT: f64 = 0.224_8;

/// Peak amplitude, centroid, and correlation time from the bins above 10% of the peak.
fn initial_guess(taus: &[f64], data: &[f64]) -> (f64, f64, f64) {
    let (k_peak, &peak) = data
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let a0 = peak.max(0.0).sqrt();
    let cut = 0.1 * peak;
    let (mut sw, mut swx) = (0.0, 0.0);
    for (&t, &d) in taus.iter().zip(data) {
        if d > cut {
            sw += d;
            swx += d * t;
        }
    }
    let t0 = if sw > 0.0 { swx / sw } else { taus[k_peak] };
    let mut swxx = 0.0;
    for (&t, &d) in taus.iter().zip(data) {
        if d > cut {
            swxx += d * (t - t0).powi(2);
        }
    }
    let spacing = (taus[taus.len() - 1] - taus[0]).abs() / (taus.len() - 1).max(1) as f64;
    let tc0 = if sw > 0.0 {
        (swxx / sw / TRUNCATED_SECOND_MOMENT).sqrt()
    } else {
        0.0
    };
    (a0, t0, tc0.max(spacing))
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut y = x % two_pi;
    if y > std::f64::consts::PI {
        y -= two_pi;
    } else if y <= -std::f64::consts::PI {
        y += two_pi;
    }
    y
}

/// Inverse-variance weighted circular mean of `arg ψ` over bins with
/// `|ψ|² > weight_threshold·max|ψ|²`.
pub fn fit_constant_phase(recon: &ReconstructedTpwf, weight_threshold: f64) -> Result<FitResult> {
    if !(weight_threshold >= 0.0) {
        return Err(Error::InvalidParameter("weight_threshold must be non-negative".into()));
    }
    let peak = recon
        .valid_bins()
        .map(|b| b.abs2())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let selected: Vec<(f64, f64, f64)> = recon
        .valid_bins()
        .filter(|b| b.abs2() > weight_threshold * peak && b.abs2() > 0.0)
        .map(|b| (b.tau, b.phase(), b.sigma_phase()))
        .filter(|(_, p, s)| p.is_finite() && s.is_finite() && *s > 0.0)
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidParameter(
            "no bins above the phase weight threshold".into(),
        ));
    }
    let (mut sw, mut ss, mut sc) = (0.0, 0.0, 0.0);
    for &(_, p, s) in &selected {
        let w = 1.0 / (s * s);
        sw += w;
        ss += w * p.sin();
        sc += w * p.cos();
    }
    let mean = ss.atan2(sc);
    let sigma = 1.0 / sw.sqrt();
    let chi2 = selected
        .iter()
        .map(|&(_, p, s)| (wrap_angle(p - mean) / s).powi(2))
        .sum();
    let residuals = selected
        .iter()
        .map(|&(x, p, s)| Residual {
            x,
            data: mean + wrap_angle(p - mean),
            model: mean,
            sigma: s,
        })
        .collect();
    Ok(FitResult {
        params: vec![FitParam::new("phase", mean, sigma)],
        derived: vec![],
        chi2,
        ndof: selected.len() - 1,
        converged: true,
        iterations: 1,
        diagnostics: None,
        residuals,
    })
}

/// Weighted linear fit of `A + B_c·cos 2φ + B_s·sin 2φ` to `(φ, g², σ)` points.
///
/// Reports the offset `A`, the harmonic amplitude `B` and phase, the analyzer
/// angles of the maximum and minimum in `[0, π)`, and the visibility `B/A`.
pub fn fit_visibility(points: &[(f64, f64, f64)]) -> Result<FitResult> {
    if points.iter().any(|&(_, _, s)| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter("every point needs a positive sigma".into()));
    }
    let mut distinct: Vec<f64> = points
        .iter()
        .map(|&(phi, _, _)| (2.0 * phi).rem_euclid(std::f64::consts::TAU))
        .collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if distinct.len() < 3 {
        return Err(Error::InvalidParameter(
            "visibility fit needs at least three distinct analyzer phases".into(),
        ));
    }
    let n = points.len();
    let x = DMatrix::from_fn(n, 3, |i, k| {
        let (phi, _, s) = points[i];
        let basis = match k {
            0 => 1.0,
            1 => (2.0 * phi).cos(),
            _ => (2.0 * phi).sin(),
        };
        basis / s
    });
    let y = DVector::from_fn(n, |i, _| points[i].1 / points[i].2);
    let xtx = x.transpose() * &x;
    let cov = xtx
        .clone()
        .try_inverse()
        .filter(|c| c.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numerical("degenerate visibility design matrix".into()))?;
    let beta = &cov * (x.transpose() * &y);
    let resid = &y - &x * &beta;
    let chi2 = resid.norm_squared();

    let (a, bc, bs) = (beta[0], beta[1], beta[2]);
    let amp = bc.hypot(bs);
    let harmonic = bs.atan2(bc);
    let var_amp = if amp > 0.0 {
        (bc * bc * cov[(1, 1)] + bs * bs * cov[(2, 2)] + 2.0 * bc * bs * cov[(1, 2)]) / (amp * amp)
    } else {
        cov[(1, 1)].max(cov[(2, 2)])
    };
    let var_harm = if amp > 0.0 {
        (bs * bs * cov[(1, 1)] + bc * bc * cov[(2, 2)] - 2.0 * bc * bs * cov[(1, 2)]) / amp.powi(4)
    } else {
        f64::INFINITY
    };
    let pi = std::f64::consts::PI;
    let phi_max = (harmonic / 2.0).rem_euclid(pi);
    let phi_min = (phi_max + pi / 2.0).rem_euclid(pi);
    let vis = amp / a;
    let cov_amp_a = if amp > 0.0 {
        (bc * cov[(1, 0)] + bs * cov[(2, 0)]) / amp
    } else {
        0.0
    };
    let var_vis = vis
        * vis
        * (var_amp / (amp * amp) + cov[(0, 0)] / (a * a) - 2.0 * cov_amp_a / (amp * a));
    let residuals = points
        .iter()
        .map(|&(phi, g, s)| Residual {
            x: phi,
            data: g,
            model: a + bc * (2.0 * phi).cos() + bs * (2.0 * phi).sin(),
            sigma: s,
        })
        .collect();
    Ok(FitResult {
        params: vec![
            FitParam::new("offset", a, cov[(0, 0)].sqrt()),
            FitParam::new("cos_amplitude", bc, cov[(1, 1)].sqrt()),
            FitParam::new("sin_amplitude", bs, cov[(2, 2)].sqrt()),
        ],
        derived: vec![
            FitParam::new("amplitude", amp, var_amp.sqrt()),
            FitParam::new("harmonic_phase", harmonic, var_harm.sqrt()),
            FitParam::new("phi_max", phi_max, var_harm.sqrt() / 2.0),
            FitParam::new("phi_min", phi_min, var_harm.sqrt() / 2.0),
            FitParam::new("visibility", vis, var_vis.max(0.0).sqrt()),
        ],
        chi2,
        ndof: n - 3,
        converged: true,
        iterations: 1,
        diagnostics: None,
        residuals,
    })
}
