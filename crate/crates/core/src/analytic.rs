//! Closed-form network-level results: interference moments of the Poisson
//! deployment, the channel-estimation quality factor and its NMSE bound,
//! use-and-then-forget (UatF) SINR/SE expressions for maximum-ratio and
//! zero-forcing combining, their large-antenna limits, the optimal pilot
//! reuse factor, and the antenna-count threshold beyond which pilot
//! contamination dominates.
//!
//! Everything here is deterministic; Monte Carlo counterparts live in the
//! simulation modules and are cross-checked against these formulas in the
//! integration suite.

use crate::error::{Error, Result};
use crate::propagation::{MultiSlopeModel, Slope};
use crate::specfun::{lambert_w0, upper_incomplete_gamma};

/// Combining schemes with closed-form UatF expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UatfScheme {
    MaximumRatio,
    ZeroForcing,
}

/// First and second moments of the interference-to-signal path-gain ratio
/// seen by the typical base station, `E{Σ_{l≠j} (β_j/β_serving)^κ}` for
/// κ = 1, 2, under the independent-serving-distance model of the network
/// average. Dimensionless; both grow with density.
#[derive(Debug, Clone, Copy)]
pub struct MomentPair {
    pub mu1: f64,
    pub mu2: f64,
    pub lambda_per_km2: f64,
}

impl MomentPair {
    pub fn compute(model: &MultiSlopeModel, lambda_per_km2: f64) -> Result<Self> {
        Ok(Self {
            mu1: mu_kappa(model, lambda_per_km2, 1.0)?,
            mu2: mu_kappa(model, lambda_per_km2, 2.0)?,
            lambda_per_km2,
        })
    }
}

/// `Γ(a, lo) − Γ(a, hi)` (non-regularized), treating an infinite upper
/// argument as the exact limit 0.
fn gamma_diff(a: f64, x_lo: f64, x_hi: f64) -> Result<f64> {
    let top = upper_incomplete_gamma(a, x_lo)?;
    let bot = if x_hi.is_finite() {
        upper_incomplete_gamma(a, x_hi)?
    } else {
        0.0
    };
    Ok(top - bot)
}

/// Constant collecting the power-law boundary terms of every region beyond
/// region `n`, in metre units; zero for the outermost region.
fn tail_coefficient(slopes: &[Slope], n: usize, kappa: f64) -> f64 {
    let sn = &slopes[n];
    let mut b = 0.0;
    for si in &slopes[n + 1..] {
        let ka_i = kappa * si.alpha;
        let ratio = (si.upsilon / sn.upsilon).powf(kappa);
        let lo = si.r_lo_m.powf(2.0 - ka_i);
        let hi = if si.r_hi_m.is_finite() {
            si.r_hi_m.powf(2.0 - ka_i)
        } else {
            // Outermost region: convergence requires κα > 2, so the
            // power vanishes at infinity.
            0.0
        };
        b += ratio * (lo - hi) / (ka_i - 2.0);
    }
    let ka_n = kappa * sn.alpha;
    if sn.r_hi_m.is_finite() {
        b -= sn.r_hi_m.powf(2.0 - ka_n) / (ka_n - 2.0);
    }
    b
}

/// κ-th moment of the interference-to-signal path-gain ratio summed over
/// all interfering cells, for a Poisson deployment of density
/// `lambda_per_km2` under the path-loss `model`.
///
/// Evaluated region by region via upper incomplete gamma functions; the
/// serving-distance law contributes `exp(−πλ t²)` weights and the region
/// boundaries contribute power-law constants. Fails with a domain error at
/// the poles `κ·α_n = 2` and whenever the far-field exponent satisfies
/// `κ·α_N ≤ 2` (the sum over an infinite network then diverges).
pub fn mu_kappa(model: &MultiSlopeModel, lambda_per_km2: f64, kappa: f64) -> Result<f64> {
    if !lambda_per_km2.is_finite() || lambda_per_km2 <= 0.0 {
        return Err(Error::validation(format!(
            "density must be positive and finite, got {lambda_per_km2}"
        )));
    }
    if !kappa.is_finite() || kappa <= 0.0 {
        return Err(Error::validation(format!(
            "moment order must be positive and finite, got {kappa}"
        )));
    }
    let slopes: Vec<Slope> = model.slopes().collect();
    for s in &slopes {
        if (kappa * s.alpha - 2.0).abs() < 1e-12 {
            return Err(Error::domain(format!(
                "moment of order {kappa} has a pole at path-loss exponent {}; \
                 perturb the exponent",
                s.alpha
            )));
        }
    }
    let far = slopes.last().expect("at least one region");
    if kappa * far.alpha < 2.0 {
        return Err(Error::domain(format!(
            "far-field exponent {} is too shallow: the order-{kappa} \
             interference moment diverges",
            far.alpha
        )));
    }

    // Work in metres: the model radii are metric and only the product λ·r²
    // appears, so convert the density once.
    let pi_lambda = std::f64::consts::PI * lambda_per_km2 / 1.0e6;
    let mut total = 0.0;
    for (n, sn) in slopes.iter().enumerate() {
        let ka = kappa * sn.alpha;
        let x_lo = pi_lambda * sn.r_lo_m * sn.r_lo_m;
        let x_hi = if sn.r_hi_m.is_finite() {
            pi_lambda * sn.r_hi_m * sn.r_hi_m
        } else {
            f64::INFINITY
        };
        total += 2.0 * gamma_diff(2.0, x_lo, x_hi)? / (ka - 2.0);
        let b = tail_coefficient(&slopes, n, kappa);
        if b != 0.0 {
            total += 2.0
                * pi_lambda.powf(1.0 - ka / 2.0)
                * b
                * gamma_diff(1.0 + ka / 2.0, x_lo, x_hi)?;
        }
    }
    Ok(total)
}

/// Ratio of total received pilot energy (desired user, pilot-sharing
/// interferers, noise) to the desired user's share; always ≥ 1. Drives both
/// the estimation NMSE bound and the closed-form SINRs.
pub fn pilot_power_ratio(mu1: f64, zeta: f64, tau_p: f64, snr_tr: f64) -> f64 {
    1.0 + mu1 / zeta + 1.0 / (tau_p * snr_tr)
}

/// Upper bound on the normalized channel-estimation error for uncorrelated
/// antennas, `1 − 1/A` with `A` the pilot power ratio. Lies in `[0, 1)`.
pub fn nmse_upper_bound_value(mu1: f64, zeta: f64, tau_p: f64, snr_tr: f64) -> f64 {
    1.0 - 1.0 / pilot_power_ratio(mu1, zeta, tau_p, snr_tr)
}

/// [`nmse_upper_bound_value`] with the first interference moment computed
/// from the deployment model.
pub fn nmse_upper_bound(
    model: &MultiSlopeModel,
    lambda_per_km2: f64,
    zeta: f64,
    tau_p: f64,
    snr_tr: f64,
) -> Result<f64> {
    let mu1 = mu_kappa(model, lambda_per_km2, 1.0)?;
    Ok(nmse_upper_bound_value(mu1, zeta, tau_p, snr_tr))
}

/// Design point for the closed-form UatF expressions. SNRs are linear
/// (not dB); `zeta` may be fractional here even though the simulator only
/// accepts integers.
#[derive(Debug, Clone)]
pub struct UatfInputs {
    pub m_antennas: usize,
    pub k_users: usize,
    /// Pilot reuse factor; the pilot book has `zeta * k_users` sequences.
    pub zeta: f64,
    /// Data SNR of a cell-edge-normalized user over the noise floor.
    pub snr0: f64,
    /// Pilot SNR of the same user.
    pub snr_tr: f64,
    /// Coherence block length in samples.
    pub tau_c: f64,
    pub moments: MomentPair,
}

impl UatfInputs {
    pub fn tau_p(&self) -> f64 {
        self.zeta * self.k_users as f64
    }

    /// Fraction of the coherence block left for data.
    pub fn prelog(&self) -> f64 {
        1.0 - self.tau_p() / self.tau_c
    }

    pub fn pilot_ratio(&self) -> f64 {
        pilot_power_ratio(self.moments.mu1, self.zeta, self.tau_p(), self.snr_tr)
    }

    pub fn with_moments(&self, moments: MomentPair) -> Self {
        Self {
            moments,
            ..self.clone()
        }
    }

    fn validate(&self, scheme: UatfScheme, m: f64) -> Result<()> {
        if self.k_users == 0 {
            return Err(Error::validation("need at least one user per cell"));
        }
        if !(m.is_finite() && m >= 1.0) {
            return Err(Error::validation(format!(
                "antenna count must be at least 1, got {m}"
            )));
        }
        if scheme == UatfScheme::ZeroForcing && m <= self.k_users as f64 {
            return Err(Error::validation(format!(
                "zero-forcing needs more antennas than users, got M={m}, K={}",
                self.k_users
            )));
        }
        if !self.zeta.is_finite() || self.zeta <= 0.0 {
            return Err(Error::validation(format!(
                "pilot reuse factor must be positive, got {}",
                self.zeta
            )));
        }
        if !(self.snr0 > 0.0 && self.snr0.is_finite())
            || !(self.snr_tr > 0.0 && self.snr_tr.is_finite())
        {
            return Err(Error::validation(format!(
                "SNRs must be positive and finite, got snr0={}, snr_tr={}",
                self.snr0, self.snr_tr
            )));
        }
        if !(self.tau_c > 0.0) || self.tau_p() > self.tau_c * (1.0 + 1e-12) {
            return Err(Error::validation(format!(
                "pilot overhead {} exceeds the coherence block {}",
                self.tau_p(),
                self.tau_c
            )));
        }
        if !(self.moments.mu1 >= 0.0 && self.moments.mu2 >= 0.0) {
            return Err(Error::validation("interference moments must be nonnegative"));
        }
        Ok(())
    }
}

/// The four denominator contributions of the closed-form UatF SINR, in the
/// scheme's own normalization.
#[derive(Debug, Clone, Copy)]
pub struct SinrTerms {
    pub noise: f64,
    pub intra_cell: f64,
    pub inter_cell: f64,
    pub contamination: f64,
}

impl SinrTerms {
    pub fn total(&self) -> f64 {
        self.noise + self.intra_cell + self.inter_cell + self.contamination
    }

    pub fn sinr(&self) -> f64 {
        1.0 / self.total()
    }
}

/// Denominator terms at a possibly fractional antenna count `m`; used by the
/// dominance-threshold identity, which is stated for real-valued `M`.
pub fn uatf_sinr_terms_at(scheme: UatfScheme, m: f64, inputs: &UatfInputs) -> Result<SinrTerms> {
    inputs.validate(scheme, m)?;
    let k = inputs.k_users as f64;
    let a = inputs.pilot_ratio();
    let mu1 = inputs.moments.mu1;
    let contamination = inputs.moments.mu2 / inputs.zeta;
    let terms = match scheme {
        UatfScheme::MaximumRatio => SinrTerms {
            noise: a / (m * inputs.snr0),
            intra_cell: (k / m) * a,
            inter_cell: (k / m) * (a * mu1 + contamination),
            contamination,
        },
        UatfScheme::ZeroForcing => SinrTerms {
            noise: a / ((m - k) * inputs.snr0),
            intra_cell: (k / (m - k)) * (a - 1.0),
            inter_cell: (k / (m - k)) * a * mu1,
            contamination,
        },
    };
    Ok(terms)
}

pub fn uatf_sinr_terms(scheme: UatfScheme, inputs: &UatfInputs) -> Result<SinrTerms> {
    uatf_sinr_terms_at(scheme, inputs.m_antennas as f64, inputs)
}

/// Closed-form effective SINR of the UatF spectral-efficiency bound for the
/// network-average user.
pub fn uatf_sinr(scheme: UatfScheme, inputs: &UatfInputs) -> Result<f64> {
    Ok(uatf_sinr_terms(scheme, inputs)?.sinr())
}

/// UatF spectral efficiency in bit/s/Hz per user: pilot-overhead prelog
/// times `log2(1 + SINR)`.
pub fn uatf_se(scheme: UatfScheme, inputs: &UatfInputs) -> Result<f64> {
    let sinr = uatf_sinr(scheme, inputs)?;
    Ok(inputs.prelog().max(0.0) * (1.0 + sinr).log2())
}

/// Spectral efficiency in the infinite-antenna limit, where only pilot
/// contamination survives: prelog times `log2(1 + ζ/μ2)`.
pub fn asymptotic_rate(
    model: &MultiSlopeModel,
    lambda_per_km2: f64,
    zeta: f64,
    k_users: usize,
    tau_c: f64,
) -> Result<f64> {
    if !zeta.is_finite() || zeta <= 0.0 {
        return Err(Error::validation(format!(
            "pilot reuse factor must be positive, got {zeta}"
        )));
    }
    if k_users == 0 {
        return Err(Error::validation("need at least one user per cell"));
    }
    let tau_p = zeta * k_users as f64;
    if !(tau_c > 0.0) || tau_p > tau_c * (1.0 + 1e-12) {
        return Err(Error::validation(format!(
            "pilot overhead {tau_p} exceeds the coherence block {tau_c}"
        )));
    }
    let mu2 = mu_kappa(model, lambda_per_km2, 2.0)?;
    let prelog = (1.0 - tau_p / tau_c).max(0.0);
    Ok(prelog * (1.0 + zeta / mu2).log2())
}

/// Pilot reuse factor maximizing the infinite-antenna rate, via the
/// principal Lambert W branch: `ζ* = μ2 (ν / W(ν e) − 1)` with
/// `ν = 1 + τ_c/(μ2 K)`.
pub fn optimal_zeta_asymptotic(
    model: &MultiSlopeModel,
    lambda_per_km2: f64,
    k_users: usize,
    tau_c: f64,
) -> Result<f64> {
    if k_users == 0 {
        return Err(Error::validation("need at least one user per cell"));
    }
    if !(tau_c > 0.0 && tau_c.is_finite()) {
        return Err(Error::validation(format!(
            "coherence block must be positive and finite, got {tau_c}"
        )));
    }
    let mu2 = mu_kappa(model, lambda_per_km2, 2.0)?;
    if mu2 <= 0.0 {
        return Err(Error::numerical(format!(
            "second interference moment {mu2} is not positive"
        )));
    }
    let nu = 1.0 + tau_c / (mu2 * k_users as f64);
    let w = lambert_w0(nu * std::f64::consts::E)?;
    Ok(mu2 * (nu / w - 1.0))
}

/// Smallest (real-valued) antenna count at which pilot contamination
/// overtakes the combined intra- plus inter-cell interference in the UatF
/// denominator.
pub fn dominance_threshold(
    scheme: UatfScheme,
    model: &MultiSlopeModel,
    lambda_per_km2: f64,
    zeta: f64,
    k_users: usize,
    tau_p: f64,
    snr_tr: f64,
) -> Result<f64> {
    if k_users == 0 {
        return Err(Error::validation("need at least one user per cell"));
    }
    if !zeta.is_finite() || zeta <= 0.0 {
        return Err(Error::validation(format!(
            "pilot reuse factor must be positive, got {zeta}"
        )));
    }
    let moments = MomentPair::compute(model, lambda_per_km2)?;
    let a = pilot_power_ratio(moments.mu1, zeta, tau_p, snr_tr);
    let k = k_users as f64;
    let common = 1.0 + zeta * a * (1.0 + moments.mu1) / moments.mu2;
    Ok(match scheme {
        UatfScheme::MaximumRatio => k * common,
        UatfScheme::ZeroForcing => k * (common - zeta / moments.mu2),
    })
}

/// Signed derivative of the closed-form SINR with respect to density,
/// central finite difference with relative step 1e-3. The moments are
/// recomputed at the perturbed densities; the moments stored in `inputs`
/// are ignored.
pub fn sinr_slope(
    scheme: UatfScheme,
    model: &MultiSlopeModel,
    lambda_per_km2: f64,
    inputs: &UatfInputs,
) -> Result<f64> {
    if !lambda_per_km2.is_finite() || lambda_per_km2 <= 0.0 {
        return Err(Error::validation(format!(
            "density must be positive and finite, got {lambda_per_km2}"
        )));
    }
    let h = lambda_per_km2 * 1e-3;
    let hi = uatf_sinr(
        scheme,
        &inputs.with_moments(MomentPair::compute(model, lambda_per_km2 + h)?),
    )?;
    let lo = uatf_sinr(
        scheme,
        &inputs.with_moments(MomentPair::compute(model, lambda_per_km2 - h)?),
    )?;
    Ok((hi - lo) / (2.0 * h))
}

/// Absolute SINR reduction rates `(|d SINR/dλ|` for maximum ratio,
/// zero forcing)` at the given density.
pub fn sinr_reduction_rates(
    model: &MultiSlopeModel,
    lambda_per_km2: f64,
    inputs: &UatfInputs,
) -> Result<(f64, f64)> {
    let mr = sinr_slope(UatfScheme::MaximumRatio, model, lambda_per_km2, inputs)?;
    let zf = sinr_slope(UatfScheme::ZeroForcing, model, lambda_per_km2, inputs)?;
    Ok((mr.abs(), zf.abs()))
}
