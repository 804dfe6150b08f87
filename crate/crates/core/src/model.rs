//! Forward model of two-photon interference between a biphoton and a coherent reference.
//!
//! The biphoton amplitude is a double exponential with a constant phase,
//! `ψ(τ) = A·exp(−|τ−τ0|/T_c)·exp(iφ0)`. Mixing it with the two-photon component
//! of a coherent reference through a polarization analyzer gives a coincidence
//! rate `y(φ) = |γ·e^{−2iφ} − ψ|² + B` at the balanced polar angle `θ = π/4`.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_param, Result};
use crate::scalar::{lit, Real};

/// Parametric two-photon wave function of a single-mode biphoton.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpwfModel<T> {
    /// Peak modulus `A`.
    pub amplitude: T,
    /// 1/e decay time `T_c` of the amplitude envelope, seconds.
    pub corr_time: T,
    /// Centre of the envelope `τ0`, seconds.
    pub tau_offset: T,
    /// Constant phase `φ0`, radians.
    pub phase: T,
}

impl<T: Real> TpwfModel<T> {
    pub fn new(amplitude: T, corr_time: T, tau_offset: T, phase: T) -> Result<Self> {
        let model = Self {
            amplitude,
            corr_time,
            tau_offset,
            phase,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_param!(
            self.amplitude > T::zero() && self.amplitude.is_finite(),
            "amplitude must be positive, got {:?}",
            self.amplitude
        );
        ensure_param!(
            self.corr_time > T::zero() && self.corr_time.is_finite(),
            "corr_time must be positive, got {:?}",
            self.corr_time
        );
        ensure_param!(
            self.tau_offset.is_finite() && self.phase.is_finite(),
            "tau_offset and phase must be finite"
        );
        Ok(())
    }

    /// Real envelope `A·exp(−|τ−τ0|/T_c)`.
    #[inline]
    pub fn envelope(&self, tau: T) -> T {
        self.amplitude * (-(tau - self.tau_offset).abs() / self.corr_time).exp()
    }

    #[inline]
    pub fn eval(&self, tau: T) -> Complex<T> {
        Complex::from_polar(self.envelope(tau), self.phase)
    }

    /// `|ψ(τ)|²`.
    #[inline]
    pub fn intensity(&self, tau: T) -> T {
        let e = self.envelope(tau);
        e * e
    }

    /// Full width at half maximum of `|ψ|²`, which is `T_c·ln 2`.
    pub fn intensity_fwhm(&self) -> T {
        self.corr_time * T::LN_2()
    }
}

/// Evaluates `ψ(τ)`.
#[inline]
pub fn tpwf_eval<T: Real>(model: &TpwfModel<T>, tau: T) -> Complex<T> {
    model.eval(tau)
}

/// Polarization analyzer angles on the Bloch sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSetting<T> {
    /// Polar angle θ in `[0, π/2]`.
    pub theta: T,
    /// Azimuthal angle φ in `[0, π)`.
    pub phi: T,
}

impl<T: Real> AnalyzerSetting<T> {
    pub fn new(theta: T, phi: T) -> Result<Self> {
        ensure_param!(
            theta >= T::zero() && theta <= T::FRAC_PI_2(),
            "theta must lie in [0, pi/2], got {theta:?}"
        );
        ensure_param!(
            phi >= T::zero() && phi < T::PI(),
            "phi must lie in [0, pi), got {phi:?}"
        );
        Ok(Self { theta, phi })
    }

    /// Balanced analyzer (`θ = π/4`) at azimuth `phi`, which is reduced modulo π.
    pub fn balanced(phi: T) -> Self {
        let pi = T::PI();
        let mut phi = phi % pi;
        if phi < T::zero() {
            phi = phi + pi;
        }
        if phi >= pi {
            phi = T::zero();
        }
        Self {
            theta: T::FRAC_PI_4(),
            phi,
        }
    }

    /// The k-th reconstruction setting, `φ = kπ/3` for `k ∈ {0, 1, 2}`.
    pub fn reconstruction(k: usize) -> Self {
        assert!(k < 3, "reconstruction settings are k = 0, 1, 2");
        Self::balanced(T::PI() * lit::<T>(k as f64) / lit(3.0))
    }

    /// Weight of the two-photon interference port, `sin²(2θ)`; unity at `θ = π/4`.
    #[inline]
    pub fn port_weight(&self) -> T {
        let s = (self.theta + self.theta).sin();
        s * s
    }
}

/// Real, non-negative reference amplitude γ.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceAmplitude<T>(T);

impl<T: Real> ReferenceAmplitude<T> {
    pub fn new(gamma: T) -> Result<Self> {
        ensure_param!(
            gamma >= T::zero() && gamma.is_finite(),
            "gamma must be finite and non-negative, got {gamma:?}"
        );
        Ok(Self(gamma))
    }

    #[inline]
    pub fn get(self) -> T {
        self.0
    }
}

/// Two-photon amplitude at the detector pair for the global state.
///
/// Only the reference pair term and the biphoton term survive; the one-photon
/// cross terms vanish for vacuum-driven down-conversion and have no input here.
pub fn forward_two_photon_amplitude<T: Real>(
    setting: &AnalyzerSetting<T>,
    gamma: ReferenceAmplitude<T>,
    psi: Complex<T>,
) -> Complex<T> {
    let mix = setting.theta.cos() * setting.theta.sin();
    let rot = Complex::from_polar(T::one(), setting.phi);
    (rot.conj() * gamma.get() - rot * psi) * mix
}

/// `|γ·e^{−2iφ} − ψ|²` for an arbitrary azimuth.
#[inline]
pub fn interference_g2<T: Real>(gamma: T, psi: Complex<T>, phi: T) -> T {
    let two_phi = phi + phi;
    let re = gamma * two_phi.cos() - psi.re;
    let im = -gamma * two_phi.sin() - psi.im;
    re * re + im * im
}

/// Coincidence rate for an analyzer setting, normalized so that the balanced
/// prefactor is one: `sin²(2θ)·|γe^{−2iφ} − ψ|² + background`.
///
/// Panics if `background` is negative.
pub fn forward_g2<T: Real>(
    setting: &AnalyzerSetting<T>,
    gamma: ReferenceAmplitude<T>,
    psi: Complex<T>,
    background: T,
) -> T {
    assert!(background >= T::zero(), "background must be non-negative");
    setting.port_weight() * interference_g2(gamma.get(), psi, setting.phi) + background
}

/// Amplitude 1/e decay time for a Lorentzian line of FWHM `fwhm_hz`: `1/(πΔν)`.
pub fn corr_time_from_bandwidth<T: Real>(fwhm_hz: T) -> Result<T> {
    ensure_param!(
        fwhm_hz > T::zero() && fwhm_hz.is_finite(),
        "bandwidth must be positive, got {fwhm_hz:?}"
    );
    Ok(T::one() / (T::PI() * fwhm_hz))
}

/// FWHM of `|ψ(τ)|²` for a Lorentzian line of FWHM `fwhm_hz`: `ln 2/(πΔν)`.
pub fn bandwidth_to_intensity_fwhm<T: Real>(fwhm_hz: T) -> Result<T> {
    Ok(corr_time_from_bandwidth(fwhm_hz)? * T::LN_2())
}

/// Coincidence rate at zero delay versus analyzer azimuth.
pub fn visibility_curve<T: Real>(
    gamma: ReferenceAmplitude<T>,
    psi0: Complex<T>,
    phis: &[T],
) -> Vec<(T, T)> {
    phis.iter()
        .map(|&phi| (phi, interference_g2(gamma.get(), psi0, phi)))
        .collect()
}
