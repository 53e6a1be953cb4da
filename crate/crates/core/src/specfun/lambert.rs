//! Principal branch of the Lambert W function.
//!
//! `lambert_w0(v)` solves w e^w = v for v ≥ -1/e. Seeds: a branch-point
//! series near -1/e, the identity-ish regime near 0, and the log-log
//! asymptote for large v; Halley iteration then converges in a handful of
//! steps (quadratic-plus), well under the documented iteration cap.

use crate::error::{Error, Result};

const MAX_HALLEY: usize = 12;

/// Lambert W, principal branch. Errors for v < -1/e (up to rounding slack).
pub fn lambert_w0(v: f64) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::domain(format!("lambert_w0: non-finite input {v}")));
    }
    let min_v = -(-1.0f64).exp(); // -1/e
    if v < min_v - 1e-12 {
        return Err(Error::domain(format!(
            "lambert_w0: input {v} below branch point -1/e"
        )));
    }
    if v == 0.0 {
        return Ok(0.0);
    }
    if v <= min_v {
        return Ok(-1.0);
    }

    let mut w = initial_guess(v);
    for _ in 0..MAX_HALLEY {
        let ew = w.exp();
        let f = w * ew - v;
        if f.abs() <= 1e-13 * v.abs().max(1.0) {
            return Ok(w);
        }
        // Halley step on f(w) = w e^w - v.
        let fp = ew * (w + 1.0);
        let fpp = ew * (w + 2.0);
        let denom = fp - 0.5 * f * fpp / fp;
        w -= f / denom;
        if w < -1.0 {
            w = -1.0 + 1e-12; // stay on the principal branch
        }
    }
    let residual = (w * w.exp() - v).abs();
    if residual <= 1e-9 * v.abs().max(1.0) {
        Ok(w) // near the branch point the residual stalls but w is accurate
    } else {
        Err(Error::numerical(format!(
            "lambert_w0: Halley iteration failed to converge for v={v} (residual {residual})"
        )))
    }
}

fn initial_guess(v: f64) -> f64 {
    if v < -0.25 {
        // Branch-point expansion around v = -1/e.
        let p = (2.0 * (std::f64::consts::E * v + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 * p * p * p / 72.0
    } else if v < std::f64::consts::E {
        // Padé-ish seed accurate near 0 and acceptable up to e.
        let lv = (1.0 + v).ln();
        lv * (1.0 - lv.ln_1p() / (2.0 + lv))
    } else {
        // Asymptotic seed W ≈ ln v - ln ln v + ln ln v / ln v.
        let l1 = v.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    }
}
