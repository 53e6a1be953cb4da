//! Uplink spectral efficiency of dense multicell massive MIMO networks.
//!
//! The crate has two halves that answer the same question two ways:
//!
//! * [`analytic`] evaluates closed-form use-and-then-forget (UatF) spectral
//!   efficiency, normalized mean-square error bounds, asymptotic limits and
//!   pilot-reuse optimization for channel-inversion power control over a
//!   Poisson field of base stations with multi-slope path loss.
//! * [`montecarlo`] estimates the same quantities (and the exact-combining
//!   ones the closed forms cannot reach) by simulating network realizations:
//!   Poisson deployment, correlated Rayleigh fading, pilot contamination,
//!   MMSE channel estimation and MR/ZF/S-MMSE/M-MMSE combining.
//!
//! Supporting modules: [`specfun`] (incomplete gamma, Lambert W, Gauss-Legendre
//! quadrature), [`geometry`] (deployment sampling on a torus), [`propagation`]
//! (path loss and spatial correlation models), [`uplink`] (pilots, power
//! control, MMSE estimation), [`combining`] (receive combiners and SINR).

pub mod analytic;
pub mod combining;
pub mod montecarlo;
pub mod error;
pub mod geometry;
pub mod propagation;
pub mod specfun;
pub mod uplink;

pub use error::{Error, Result};
