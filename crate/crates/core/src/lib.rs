//! Interferometric reconstruction of biphoton temporal wave functions.
//!
//! A biphoton `ψ(τ)` is mixed with the two-photon component of a coherent
//! reference `γ` on a polarization analyzer. Coincidence histograms recorded at
//! three analyzer phases `φ = 0, π/3, 2π/3` determine `Re ψ`, `Im ψ` and `γ` in
//! closed form, bin by bin.
//!
//! Pipeline: [`simulate`] → [`correlate`] → [`reconstruct`] → [`fit`], with the
//! forward physics in [`model`] and file formats in [`timetag`] and [`io`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlate;
pub mod error;
pub mod fit;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod reconstruct;
pub mod scalar;
pub mod simulate;
pub mod stats;
pub mod timetag;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision aliases.
pub type Tpwf = model::TpwfModel<f64>;
pub type Setting = model::AnalyzerSetting<f64>;
pub type Gamma = model::ReferenceAmplitude<f64>;
