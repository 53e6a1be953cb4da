//! Special functions and quadrature underpinning the analytic expressions.
//!
//! Everything here is deterministic pure math: the non-regularized upper
//! incomplete gamma function, the principal Lambert W branch, and cached
//! Gauss-Legendre rules used to integrate the oscillatory one-ring
//! correlation integrand.

mod gamma;
mod lambert;
mod quad;

pub use gamma::{ln_gamma, upper_incomplete_gamma};
pub use lambert::lambert_w0;
pub use quad::{
    gauss_legendre, integrate, integrate_oscillatory, oscillatory_order, QuadratureRule,
};
