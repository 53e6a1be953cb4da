//! Large-scale propagation: multi-slope path loss and one-ring spatial
//! correlation for uniform linear arrays.
//!
//! Distances are carried in meters here. Geometry works in kilometers (cell
//! layouts are naturally km-scale), so every conversion between the two goes
//! through [`MultiSlopeModel::path_gain_km`] — a single, visible seam instead
//! of scattered `* 1000.0` factors.
//!
//! Correlation matrices factor as `beta * T(aoa, spread)` where the unit-gain
//! Toeplitz part depends only on the angle geometry. The simulator exploits
//! that through [`unit_one_ring`], a process-wide cache of unit-gain parts
//! keyed by antenna count, spread, and quantized angle-of-arrival, each
//! carrying an eigenvalue-compressed square-root factor for fast channel
//! synthesis and low-rank linear algebra.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use ndarray::Array2;
use ndarray_linalg::{Eigh, UPLO};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::specfun::{gauss_legendre, oscillatory_order};

/// Number of quantization bins for the angle-of-arrival cache. At 2048 bins
/// the angular step is 0.18 degrees, far below any angular spread we model;
/// synthesis and estimation both read the same cache, so the quantization is
/// self-consistent and does not bias estimator statistics.
const AOA_BINS: usize = 2048;

/// Relative eigenvalue cutoff for square-root factor compression. Eigenvalues
/// below `cutoff * max_eigenvalue` carry no statistical weight and are
/// dropped; small negative rounding residues are clipped to zero so the
/// factor always exists.
const EIG_RELATIVE_CUTOFF: f64 = 1e-12;

/// Piecewise power-law path loss: `beta(d) = upsilon_n * d^(-alpha_n)` on the
/// n-th distance region, continuous across breakpoints by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSlopeModel {
    /// Region boundaries r_1..r_{N-1} in meters (r_0 = 0 and r_N = infinity
    /// are implicit).
    breakpoints_m: Vec<f64>,
    /// Path loss exponents alpha_1..alpha_N, non-decreasing.
    exponents: Vec<f64>,
    /// Region coefficients; only upsilon_1 is free, the rest follow from
    /// continuity: upsilon_{n+1} = upsilon_n * r_n^(alpha_{n+1} - alpha_n).
    upsilons: Vec<f64>,
    /// Gains are never evaluated below this distance.
    d_min_m: f64,
}

/// One region of a [`MultiSlopeModel`], as consumed by the closed-form
/// interference moments.
#[derive(Debug, Clone, Copy)]
pub struct Slope {
    /// Inner boundary in meters (0 for the first region).
    pub r_lo_m: f64,
    /// Outer boundary in meters (`f64::INFINITY` for the last region).
    pub r_hi_m: f64,
    /// Path loss exponent on this region.
    pub alpha: f64,
    /// Coefficient on this region.
    pub upsilon: f64,
}

impl MultiSlopeModel {
    /// Minimum evaluation distance in meters shared by every model.
    pub const D_MIN_M: f64 = 1.0;

    /// Build a model from the free coefficient of the first region, the
    /// breakpoint distances in meters, and one exponent per region.
    pub fn new(upsilon1: f64, breakpoints_m: &[f64], exponents: &[f64]) -> Result<Self> {
        if exponents.is_empty() {
            return Err(Error::validation("path loss model needs at least one region"));
        }
        if breakpoints_m.len() + 1 != exponents.len() {
            return Err(Error::validation(format!(
                "expected one exponent per region: {} breakpoints need {} exponents, got {}",
                breakpoints_m.len(),
                breakpoints_m.len() + 1,
                exponents.len()
            )));
        }
        if !(upsilon1.is_finite() && upsilon1 > 0.0) {
            return Err(Error::validation(format!(
                "reference coefficient must be positive and finite, got {upsilon1}"
            )));
        }
        let mut prev = Self::D_MIN_M;
        for &r in breakpoints_m {
            if !(r.is_finite() && r > prev) {
                return Err(Error::validation(format!(
                    "breakpoints must be finite, above {prev} m, and strictly increasing"
                )));
            }
            prev = r;
        }
        let mut prev = 0.0;
        for &a in exponents {
            if !(a.is_finite() && a > 0.0 && a >= prev) {
                return Err(Error::validation(
                    "exponents must be positive, finite, and non-decreasing",
                ));
            }
            prev = a;
        }
        let mut upsilons = vec![upsilon1];
        for (n, &r) in breakpoints_m.iter().enumerate() {
            let step = exponents[n + 1] - exponents[n];
            upsilons.push(upsilons[n] * r.powf(step));
        }
        Ok(Self {
            breakpoints_m: breakpoints_m.to_vec(),
            exponents: exponents.to_vec(),
            upsilons,
            d_min_m: Self::D_MIN_M,
        })
    }

    /// Single-region model `beta(d) = upsilon * d^(-alpha)`.
    pub fn single_slope(upsilon: f64, alpha: f64) -> Result<Self> {
        Self::new(upsilon, &[], &[alpha])
    }

    /// Dual-slope reference model (simplified ITU-R UMi): 100 m breakpoint,
    /// near-field exponent 2.1, far-field exponent 4, meter-based reference
    /// coefficient 8.3e-4. This is the default in shipped run configs.
    pub fn dual_slope_reference() -> Self {
        Self::new(8.3e-4, &[100.0], &[2.1, 4.0]).expect("reference parameters are valid")
    }

    /// Average channel gain at `d_m` meters.
    pub fn path_gain_m(&self, d_m: f64) -> Result<f64> {
        if !d_m.is_finite() || d_m < self.d_min_m {
            return Err(Error::domain(format!(
                "path gain requested at {d_m} m, below the {} m floor",
                self.d_min_m
            )));
        }
        let n = self.region_of(d_m);
        Ok(self.upsilons[n] * d_m.powf(-self.exponents[n]))
    }

    /// Average channel gain at `d_km` kilometers.
    pub fn path_gain_km(&self, d_km: f64) -> Result<f64> {
        self.path_gain_m(d_km * 1000.0)
    }

    fn region_of(&self, d_m: f64) -> usize {
        self.breakpoints_m.iter().take_while(|&&r| d_m >= r).count()
    }

    /// Number of power-law regions.
    pub fn num_regions(&self) -> usize {
        self.exponents.len()
    }

    /// Regions in order of increasing distance.
    pub fn slopes(&self) -> impl Iterator<Item = Slope> + '_ {
        (0..self.num_regions()).map(move |n| Slope {
            r_lo_m: if n == 0 { 0.0 } else { self.breakpoints_m[n - 1] },
            r_hi_m: self
                .breakpoints_m
                .get(n)
                .copied()
                .unwrap_or(f64::INFINITY),
            alpha: self.exponents[n],
            upsilon: self.upsilons[n],
        })
    }

    /// Exponent of the outermost region; controls whether interference
    /// moments converge.
    pub fn far_field_alpha(&self) -> f64 {
        *self.exponents.last().expect("at least one region")
    }

    /// Minimum evaluation distance in meters.
    pub fn d_min_m(&self) -> f64 {
        self.d_min_m
    }
}

/// Spatial correlation of the channel between one UE and an M-antenna
/// half-wavelength uniform linear array.
///
/// Hermitian Toeplitz and positive semidefinite; the diagonal equals the
/// average gain `beta`, so `trace / M == beta`.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    entries: Array2<Complex64>,
    beta: f64,
    aoa: f64,
    angular_spread: f64,
}

impl CorrelationMatrix {
    /// Full matrix, row-major `M x M`.
    pub fn entries(&self) -> &Array2<Complex64> {
        &self.entries
    }

    /// Average per-antenna gain (`trace / M`).
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Angle-of-arrival in radians.
    pub fn aoa(&self) -> f64 {
        self.aoa
    }

    /// Angular spread half-width in radians (0 means a pure steering-vector
    /// rank-1 matrix).
    pub fn angular_spread(&self) -> f64 {
        self.angular_spread
    }

    /// Number of antennas.
    pub fn m_antennas(&self) -> usize {
        self.entries.nrows()
    }
}

fn check_one_ring_args(m_antennas: usize, beta: f64, aoa: f64, spread: f64) -> Result<()> {
    if m_antennas == 0 {
        return Err(Error::validation("antenna count must be at least 1"));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::domain(format!(
            "average gain must be positive and finite, got {beta}"
        )));
    }
    if !aoa.is_finite() {
        return Err(Error::domain(format!("angle of arrival must be finite, got {aoa}")));
    }
    if !(spread.is_finite() && (0.0..=PI).contains(&spread)) {
        return Err(Error::domain(format!(
            "angular spread must lie in [0, pi], got {spread}"
        )));
    }
    Ok(())
}

/// Steering vector of a half-wavelength ULA: `a_m = exp(j pi m sin(aoa))`.
fn steering_vector(m_antennas: usize, aoa: f64) -> Vec<Complex64> {
    let step = Complex64::new(0.0, PI * aoa.sin()).exp();
    let mut a = Vec::with_capacity(m_antennas);
    let mut cur = Complex64::new(1.0, 0.0);
    for _ in 0..m_antennas {
        a.push(cur);
        cur *= step;
    }
    a
}

/// First column of the unit-gain one-ring matrix: `g[k]` is the mean phase
/// shift between antennas `k` apart, averaged over scatterer angles uniform
/// on `[aoa - spread, aoa + spread]`.
///
/// All lags share one quadrature rule: with `u_t = exp(j pi sin(aoa + x_t))`
/// at node `x_t`, lag `k` accumulates `w_t * u_t^k`, so the whole vector
/// costs one complex exponential per node.
fn one_ring_generator(m_antennas: usize, aoa: f64, spread: f64) -> Result<Vec<Complex64>> {
    if spread == 0.0 {
        return Ok(steering_vector(m_antennas, aoa));
    }
    let worst_rate = PI * (m_antennas as f64 - 1.0);
    let rule = gauss_legendre(oscillatory_order(worst_rate, spread)?)?;
    let mut g = vec![Complex64::ZERO; m_antennas];
    for (&x, &w) in rule.nodes().iter().zip(rule.weights()) {
        // Node mapped from [-1, 1] to [-spread, spread]; the 1/(2 spread)
        // normalization and the half-width Jacobian reduce to w/2.
        let u = Complex64::new(0.0, PI * (aoa + spread * x).sin()).exp();
        let scale = 0.5 * w;
        let mut power = Complex64::new(scale, 0.0);
        for slot in g.iter_mut() {
            *slot += power;
            power *= u;
        }
    }
    Ok(g)
}

/// Materialize a Hermitian Toeplitz matrix from its first column, scaled.
///
/// Sums of Toeplitz matrices are Toeplitz, so callers that accumulate many
/// correlation matrices (e.g. pilot-observation covariances) can add the
/// length-`M` generators and materialize once.
pub fn toeplitz_from_generator(g: &[Complex64], scale: f64) -> Array2<Complex64> {
    let m = g.len();
    Array2::from_shape_fn((m, m), |(r, c)| {
        let v = if r >= c { g[r - c] } else { g[c - r].conj() };
        v * scale
    })
}

/// One-ring correlation matrix for a UE at angle `aoa` with scatterers spread
/// uniformly over `[aoa - spread, aoa + spread]`.
///
/// `spread == 0` degenerates to the rank-1 steering-vector matrix
/// `beta * a(aoa) a(aoa)^H`.
pub fn one_ring(
    m_antennas: usize,
    beta: f64,
    aoa: f64,
    spread: f64,
) -> Result<CorrelationMatrix> {
    check_one_ring_args(m_antennas, beta, aoa, spread)?;
    let g = one_ring_generator(m_antennas, aoa, spread)?;
    let entries = if spread == 0.0 {
        // g holds the steering vector itself; form the rank-1 outer product.
        Array2::from_shape_fn((m_antennas, m_antennas), |(r, c)| g[r] * g[c].conj() * beta)
    } else {
        toeplitz_from_generator(&g, beta)
    };
    Ok(CorrelationMatrix {
        entries,
        beta,
        aoa,
        angular_spread: spread,
    })
}

/// Correlation matrix of uncorrelated fading: `beta * I`.
pub fn uncorrelated(m_antennas: usize, beta: f64) -> Result<CorrelationMatrix> {
    check_one_ring_args(m_antennas, beta, 0.0, 0.0)?;
    Ok(CorrelationMatrix {
        entries: Array2::from_diag_elem(m_antennas, Complex64::new(beta, 0.0)),
        beta,
        aoa: 0.0,
        angular_spread: 0.0,
    })
}

/// Cached unit-gain (`beta = 1`) one-ring correlation, carrying both the
/// Toeplitz generator and a compressed square-root factor.
#[derive(Debug)]
pub struct UnitOneRing {
    /// First column of the unit Toeplitz matrix.
    generator: Vec<Complex64>,
    /// `M x r` factor with `F F^H` equal to the matrix up to the eigenvalue
    /// cutoff; `r` is the effective rank (1 when `spread == 0`).
    factor: Array2<Complex64>,
    /// Angle actually used after quantization.
    aoa: f64,
}

impl UnitOneRing {
    pub fn generator(&self) -> &[Complex64] {
        &self.generator
    }

    pub fn factor(&self) -> &Array2<Complex64> {
        &self.factor
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn aoa(&self) -> f64 {
        self.aoa
    }

    pub fn m_antennas(&self) -> usize {
        self.generator.len()
    }

    /// Materialize the unit matrix scaled by `beta`.
    pub fn to_matrix(&self, beta: f64) -> Array2<Complex64> {
        if self.rank() == 1 && self.factor.nrows() > 0 {
            let a = self.factor.column(0);
            Array2::from_shape_fn((self.m_antennas(), self.m_antennas()), |(r, c)| {
                a[r] * a[c].conj() * beta
            })
        } else {
            toeplitz_from_generator(&self.generator, beta)
        }
    }

    /// Multiply the unit matrix into a vector without materializing it:
    /// `out = T(g) * x`.
    pub fn mul_vector(&self, x: &[Complex64]) -> Vec<Complex64> {
        let m = self.m_antennas();
        debug_assert_eq!(x.len(), m);
        let g = &self.generator;
        let mut out = vec![Complex64::ZERO; m];
        for (r, slot) in out.iter_mut().enumerate() {
            let mut acc = Complex64::ZERO;
            for (c, &xc) in x.iter().enumerate() {
                let t = if r >= c { g[r - c] } else { g[c - r].conj() };
                acc += t * xc;
            }
            *slot = acc;
        }
        out
    }
}

fn factor_from_generator(g: &[Complex64], spread: f64) -> Result<Array2<Complex64>> {
    let m = g.len();
    if spread == 0.0 {
        // Rank-1 by construction: the generator is the steering vector.
        return Ok(Array2::from_shape_fn((m, 1), |(r, _)| g[r]));
    }
    let dense = toeplitz_from_generator(g, 1.0);
    let (vals, vecs) = dense
        .eigh(UPLO::Lower)
        .map_err(|e| Error::numerical(format!("correlation eigendecomposition failed: {e}")))?;
    let max = vals.iter().cloned().fold(0.0f64, f64::max);
    if !(max.is_finite() && max > 0.0) {
        return Err(Error::numerical(
            "correlation matrix has no positive eigenvalues",
        ));
    }
    // Quadrature assembles the matrix as a positive combination of rank-1
    // terms, so true eigenvalues are nonnegative; anything below the cutoff
    // (including rounding-induced negatives) is dropped.
    let kept: Vec<usize> = (0..m)
        .filter(|&i| vals[i] > EIG_RELATIVE_CUTOFF * max)
        .collect();
    let mut factor = Array2::zeros((m, kept.len()));
    for (col, &i) in kept.iter().enumerate() {
        let scale = vals[i].sqrt();
        for r in 0..m {
            // LAPACK sees the row-major array as its column-major transpose,
            // i.e. the conjugate of a Hermitian matrix, so the returned
            // eigenvectors come back conjugated.
            factor[(r, col)] = vecs[(r, i)].conj() * scale;
        }
    }
    Ok(factor)
}

type UnitCacheKey = (usize, u64, i64);

/// Fetch the unit-gain one-ring structure for the given geometry, quantizing
/// the angle-of-arrival to [`AOA_BINS`] bins when `spread > 0` so repeated
/// geometry draws share eigendecompositions. Zero-spread matrices are rank-1
/// and cheap, so they are built exactly at the requested angle, uncached.
pub fn unit_one_ring(m_antennas: usize, aoa: f64, spread: f64) -> Result<Arc<UnitOneRing>> {
    check_one_ring_args(m_antennas, 1.0, aoa, spread)?;
    if spread == 0.0 {
        let g = steering_vector(m_antennas, aoa);
        let factor = factor_from_generator(&g, 0.0)?;
        return Ok(Arc::new(UnitOneRing {
            generator: g,
            factor,
            aoa,
        }));
    }

    let bin = quantize_aoa(aoa);
    let key: UnitCacheKey = (m_antennas, spread.to_bits(), bin);
    static CACHE: OnceLock<RwLock<HashMap<UnitCacheKey, Arc<UnitOneRing>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| RwLock::new(HashMap::new()));
    if let Some(hit) = cache.read().expect("correlation cache poisoned").get(&key) {
        return Ok(Arc::clone(hit));
    }
    let aoa_q = bin_center(bin);
    let g = one_ring_generator(m_antennas, aoa_q, spread)?;
    let factor = factor_from_generator(&g, spread)?;
    let entry = Arc::new(UnitOneRing {
        generator: g,
        factor,
        aoa: aoa_q,
    });
    let mut guard = cache.write().expect("correlation cache poisoned");
    Ok(Arc::clone(guard.entry(key).or_insert(entry)))
}

fn quantize_aoa(aoa: f64) -> i64 {
    let step = 2.0 * PI / AOA_BINS as f64;
    let bin = (aoa / step).round() as i64;
    bin.rem_euclid(AOA_BINS as i64)
}

fn bin_center(bin: i64) -> f64 {
    let step = 2.0 * PI / AOA_BINS as f64;
    let mut a = bin as f64 * step;
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}
