//! Receive combining at the typical base station: maximum-ratio,
//! zero-forcing, and MMSE combiners, the instantaneous uplink SINR they
//! achieve, and a coherent/non-coherent decomposition of the interference
//! they admit.
//!
//! A [`CombinerWorkspace`] captures everything combining needs that does not
//! depend on fading: the residual interference covariance seen by a receiver
//! that estimates every user in the window, and its single-cell counterpart
//! that treats other cells as pure noise. Both are fixed by positions,
//! powers, and pilot allocation, so one workspace serves every fading redraw
//! of a realization. Per redraw the combiners themselves cost one weighted
//! Gram accumulation and a Hermitian solve.
//!
//! The SINR evaluation follows the receiver's conditional view: every
//! estimated channel enters explicitly, and only the estimation errors enter
//! through the residual covariance.

use ndarray::{s, Array2, ArrayView1};
use ndarray_linalg::{Factorize, FactorizeC, InverseC, Solve, SolveC, UPLO};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::default_window_side_km;
use crate::geometry::NetworkRealization;
use crate::uplink::{
    allocate_pilots, ChannelEstimator, EstimationOutput, EstimationScenario, PowerProfile,
};

/// Linear receive combining strategy applied at the typical base station.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CombiningScheme {
    /// Match each user's own channel estimate.
    MaximumRatio,
    /// Cancel own-cell interference exactly on the estimates.
    ZeroForcing,
    /// MMSE against own-cell estimates only; other cells enter as noise
    /// through their average correlation.
    SingleCellMmse,
    /// MMSE against every cell's estimates; provably optimal for the
    /// instantaneous SINR within the simulated window.
    MulticellMmse,
}

impl CombiningScheme {
    /// Every scheme, in the order results tables usually list them.
    pub const ALL: [CombiningScheme; 4] = [
        CombiningScheme::MaximumRatio,
        CombiningScheme::ZeroForcing,
        CombiningScheme::SingleCellMmse,
        CombiningScheme::MulticellMmse,
    ];

    /// Short stable identifier used in reports and configuration files.
    pub fn label(&self) -> &'static str {
        match self {
            CombiningScheme::MaximumRatio => "mr",
            CombiningScheme::ZeroForcing => "zf",
            CombiningScheme::SingleCellMmse => "s-mmse",
            CombiningScheme::MulticellMmse => "m-mmse",
        }
    }
}

impl std::fmt::Display for CombiningScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for CombiningScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mr" => Ok(CombiningScheme::MaximumRatio),
            "zf" => Ok(CombiningScheme::ZeroForcing),
            "s-mmse" => Ok(CombiningScheme::SingleCellMmse),
            "m-mmse" => Ok(CombiningScheme::MulticellMmse),
            other => Err(Error::validation(format!(
                "unknown combining scheme {other:?}; expected one of mr, zf, s-mmse, m-mmse"
            ))),
        }
    }
}

/// One combining vector per own-cell user, stored as the columns of an
/// `M x K` matrix.
#[derive(Clone, Debug)]
pub struct CombinerSet {
    scheme: CombiningScheme,
    vectors: Array2<Complex64>,
}

impl CombinerSet {
    pub fn scheme(&self) -> CombiningScheme {
        self.scheme
    }

    /// The combining vector for own-cell user `k`.
    pub fn column(&self, k: usize) -> ArrayView1<'_, Complex64> {
        self.vectors.column(k)
    }

    pub fn vectors(&self) -> &Array2<Complex64> {
        &self.vectors
    }

    pub fn m_antennas(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn k_users(&self) -> usize {
        self.vectors.ncols()
    }

    /// Rescale every column to unit norm. The SINR is invariant to this, but
    /// quadratic forms like interference powers then come out relative to
    /// the per-antenna noise floor.
    pub fn unit_normalized(mut self) -> Result<CombinerSet> {
        for mut col in self.vectors.columns_mut() {
            let norm = col.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::numerical(
                    "cannot normalize a zero or non-finite combining vector",
                ));
            }
            let inv = 1.0 / norm;
            col.map_inplace(|x| *x = *x * inv);
        }
        Ok(self)
    }
}

/// Fading-independent inputs to combining for one realization.
///
/// `residual` is the covariance of everything the multicell receiver cannot
/// resolve: every user's estimation error plus noise. `single_cell_residual`
/// is its own-cell-only counterpart, where other cells contribute their
/// average correlation because a single-cell receiver never estimates them.
#[derive(Clone, Debug)]
pub struct CombinerWorkspace {
    residual: Array2<Complex64>,
    single_cell_residual: Array2<Complex64>,
}

impl CombinerWorkspace {
    pub fn new(estimator: &ChannelEstimator) -> Result<Self> {
        Ok(CombinerWorkspace {
            residual: estimator.residual_covariance()?,
            single_cell_residual: estimator.single_cell_residual_covariance()?,
        })
    }

    pub fn residual(&self) -> &Array2<Complex64> {
        &self.residual
    }

    pub fn single_cell_residual(&self) -> &Array2<Complex64> {
        &self.single_cell_residual
    }
}

/// Build the typical cell's combining vectors from one estimation output.
///
/// Maximum ratio copies the own-cell estimates. Zero forcing applies the
/// pseudo-inverse of the own-cell estimate matrix (requiring `K <= M` and
/// linearly independent estimates). The MMSE schemes solve a regularized
/// Hermitian system per user: the single-cell variant regularizes with the
/// own-cell estimate Gram plus the single-cell residual covariance, the
/// multicell variant with every cell's estimate Gram plus the full residual
/// covariance — making each column the SINR-optimal combiner for its user.
pub fn build_combiner(
    scheme: CombiningScheme,
    estimator: &ChannelEstimator,
    estimates: &EstimationOutput,
    workspace: &CombinerWorkspace,
) -> Result<CombinerSet> {
    let m = estimator.m_antennas();
    let k = estimator.k_users();
    if estimates.estimates().dim() != (estimator.num_ues(), m) {
        return Err(Error::validation(format!(
            "estimation output of shape {:?} does not match an estimator with {} cells, {} users, {} antennas",
            estimates.estimates().dim(),
            estimator.num_cells(),
            k,
            m
        )));
    }
    let typical = estimator.typical_cell();
    let own = estimates
        .estimates()
        .slice(s![typical * k..(typical + 1) * k, ..]);

    let vectors = match scheme {
        CombiningScheme::MaximumRatio => own.t().to_owned(),
        CombiningScheme::ZeroForcing => {
            if k > m {
                return Err(Error::validation(format!(
                    "zero forcing needs at least as many antennas as users, got {m} antennas for {k} users"
                )));
            }
            // V = H (H^H H)^{-1}, so V^H H = I on the estimates. Estimates
            // are stored as rows, hence the Gram is conj(E) E^T.
            let gram = own.mapv(|x| x.conj()).dot(&own.t());
            let gram_inv = gram
                .factorizec(UPLO::Lower)
                .and_then(|f| f.invc())
                .map_err(|_| {
                    Error::numerical(
                        "zero forcing failed: user channel estimates are linearly dependent",
                    )
                })?;
            own.t().dot(&gram_inv)
        }
        CombiningScheme::SingleCellMmse | CombiningScheme::MulticellMmse => {
            let (base, own_cell_only) = match scheme {
                CombiningScheme::SingleCellMmse => (workspace.single_cell_residual(), true),
                _ => (workspace.residual(), false),
            };
            if base.dim() != (m, m) {
                return Err(Error::validation(format!(
                    "workspace covariance of shape {:?} does not match {m} antennas",
                    base.dim()
                )));
            }
            let scaled = power_scaled_rows(estimator, estimates, own_cell_only);
            let mut b = scaled.t().dot(&scaled.mapv(|x| x.conj()));
            b.scaled_add(Complex64::ONE, base);
            let mut rhs = Array2::zeros((m, k));
            for i in 0..k {
                let p = estimator.data_power(estimator.typical_cell(), i);
                rhs.column_mut(i).assign(&own.row(i).mapv(|x| x * p));
            }
            solve_hermitian(&b, &rhs)?
        }
    };
    Ok(CombinerSet { scheme, vectors })
}

/// Estimate rows scaled by the square root of their user's data power, so
/// the Gram of the result is the power-weighted sum of estimate outer
/// products.
fn power_scaled_rows(
    estimator: &ChannelEstimator,
    estimates: &EstimationOutput,
    own_cell_only: bool,
) -> Array2<Complex64> {
    let k = estimator.k_users();
    let cells: Vec<usize> = if own_cell_only {
        vec![estimator.typical_cell()]
    } else {
        (0..estimator.num_cells()).collect()
    };
    let mut scaled = Array2::zeros((cells.len() * k, estimator.m_antennas()));
    for (r, &cell) in cells.iter().enumerate() {
        for i in 0..k {
            let w = estimator.data_power(cell, i).sqrt();
            scaled
                .row_mut(r * k + i)
                .assign(&estimates.estimate(cell, i).mapv(|x| x * w));
        }
    }
    scaled
}

/// Solve `B X = RHS` for Hermitian positive-definite `B`. The Cholesky route
/// is tried first; if the matrix is too close to indefinite for it, a
/// pivoted factorization gets a second chance before erroring.
fn solve_hermitian(b: &Array2<Complex64>, rhs: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let mut out = Array2::zeros(rhs.dim());
    match b.factorizec(UPLO::Lower) {
        Ok(chol) => {
            for (c, col) in rhs.columns().into_iter().enumerate() {
                let mut x = col.to_owned();
                chol.solvec_inplace(&mut x)
                    .map_err(|e| Error::numerical(format!("combining solve failed: {e}")))?;
                out.column_mut(c).assign(&x);
            }
        }
        Err(_) => {
            let lu = b
                .factorize()
                .map_err(|e| Error::numerical(format!("combining factorization failed: {e}")))?;
            for (c, col) in rhs.columns().into_iter().enumerate() {
                let x = lu
                    .solve(&col.to_owned())
                    .map_err(|e| Error::numerical(format!("combining solve failed: {e}")))?;
                out.column_mut(c).assign(&x);
            }
        }
    }
    Ok(out)
}

/// One user's instantaneous SINR, split into the powers that compose it.
///
/// All powers are conditional on the drawn estimates: `signal` is the own
/// user through the combiner, `intra` the own cell's other users, `inter`
/// other cells' users on pilots different from user `k`'s, `coherent` other
/// cells' users sharing user `k`'s pilot, `residual` the quadratic form of
/// everything unresolved beyond noise, and `noise` is `sigma^2` times the
/// squared combiner norm. `sinr` is `signal` over the sum of the other five,
/// exactly as composed.
#[derive(Clone, Copy, Debug)]
pub struct SinrSample {
    pub signal: f64,
    pub intra: f64,
    pub inter: f64,
    pub coherent: f64,
    pub residual: f64,
    pub noise: f64,
    pub sinr: f64,
}

impl SinrSample {
    /// Total interference power: everything in the SINR denominator except
    /// noise.
    pub fn interference(&self) -> f64 {
        self.intra + self.inter + self.coherent + self.residual
    }
}

/// Evaluate the instantaneous SINR of own-cell user `k` under combining
/// vector `v`, given the estimates of one fading draw and the residual
/// covariance of the realization.
pub fn instantaneous_sinr(
    estimator: &ChannelEstimator,
    estimates: &EstimationOutput,
    residual: &Array2<Complex64>,
    k: usize,
    v: ArrayView1<'_, Complex64>,
) -> Result<SinrSample> {
    let m = estimator.m_antennas();
    let k_users = estimator.k_users();
    if k >= k_users {
        return Err(Error::validation(format!(
            "user index {k} out of range for {k_users} users"
        )));
    }
    if v.len() != m {
        return Err(Error::validation(format!(
            "combining vector of length {} does not match {m} antennas",
            v.len()
        )));
    }
    if estimates.estimates().dim() != (estimator.num_ues(), m) {
        return Err(Error::validation(
            "estimation output does not match the estimator layout",
        ));
    }
    if residual.dim() != (m, m) {
        return Err(Error::validation(format!(
            "residual covariance of shape {:?} does not match {m} antennas",
            residual.dim()
        )));
    }
    let norm2: f64 = v.iter().map(|x| x.norm_sqr()).sum();
    if !norm2.is_finite() || norm2 == 0.0 {
        return Err(Error::validation(
            "combining vector must be finite and nonzero",
        ));
    }

    // products[r] = v^H h_r for every estimated channel, in one pass.
    let v_conj = v.mapv(|x| x.conj());
    let products = estimates.estimates().dot(&v_conj);
    let zv = residual.dot(&v);
    let vzv: f64 = v.iter().zip(zv.iter()).map(|(a, b)| (a.conj() * b).re).sum();
    let noise = estimator.sigma2() * norm2;
    // v^H (Z - sigma^2 I) v is nonnegative in exact arithmetic; clip the
    // rounding residue.
    let residual_power = (vzv - noise).max(0.0);

    let typical = estimator.typical_cell();
    let mut signal = 0.0;
    let mut intra = 0.0;
    let mut inter = 0.0;
    let mut coherent = 0.0;
    for cell in 0..estimator.num_cells() {
        let shares = estimator.shares_with_typical(cell);
        for i in 0..k_users {
            let power = estimator.data_power(cell, i) * products[cell * k_users + i].norm_sqr();
            if cell == typical {
                if i == k {
                    signal = power;
                } else {
                    intra += power;
                }
            } else if i == k && shares {
                coherent += power;
            } else {
                inter += power;
            }
        }
    }
    let denominator = intra + inter + coherent + residual_power + noise;
    Ok(SinrSample {
        signal,
        intra,
        inter,
        coherent,
        residual: residual_power,
        noise,
        sinr: signal / denominator,
    })
}

/// Average interference powers split by whether they add coherently across
/// fading, in linear scale relative to the noise floor (`sigma^2 = 1` under
/// statistical channel inversion and unit-norm combiners).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterferenceDecomposition {
    /// Average coherent interference per own-cell user: same-pilot users of
    /// other cells, through the squared magnitude of the fading-averaged
    /// combiner response.
    pub coherent_per_user: f64,
    /// Average remaining interference per own-cell user.
    pub non_coherent_per_user: f64,
    pub k_users: usize,
    /// Network realizations that contributed.
    pub position_trials: usize,
    /// Fading redraws averaged within each realization.
    pub fading_redraws: usize,
    /// Realizations skipped for numerical reasons.
    pub failures: usize,
}

impl InterferenceDecomposition {
    pub fn coherent_per_user_db(&self) -> f64 {
        ratio_db(self.coherent_per_user)
    }

    pub fn non_coherent_per_user_db(&self) -> f64 {
        ratio_db(self.non_coherent_per_user)
    }

    /// Coherent interference summed over the typical cell's users.
    pub fn coherent_cell_db(&self) -> f64 {
        ratio_db(self.coherent_per_user * self.k_users as f64)
    }

    /// Non-coherent interference summed over the typical cell's users.
    pub fn non_coherent_cell_db(&self) -> f64 {
        ratio_db(self.non_coherent_per_user * self.k_users as f64)
    }
}

/// Linear power ratio in decibels; zero and negative inputs report as
/// negative infinity.
pub(crate) fn ratio_db(x: f64) -> f64 {
    if x <= 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * x.log10()
    }
}

/// Split the typical cell's average interference into coherent and
/// non-coherent parts under the given combining scheme.
///
/// Each position trial freezes a network, pilot allocation, and powers, then
/// averages over `fading_redraws` channel draws with unit-norm combiners.
/// The coherent part needs the squared magnitude of a fading average, which
/// is estimated without finite-sample bias from the paired sums
/// `(|sum x|^2 - sum |x|^2) / (n (n-1))`. Trials parallelize over counter
/// streams of the master seed and reduce in index order, so results are
/// independent of scheduling.
pub fn interference_decomposition(
    scheme: CombiningScheme,
    scenario: &EstimationScenario,
    position_trials: usize,
    fading_redraws: usize,
    seed: u64,
) -> Result<InterferenceDecomposition> {
    if fading_redraws < 2 {
        return Err(Error::validation(
            "the coherent-power estimator needs at least 2 fading redraws per realization",
        ));
    }
    if position_trials == 0 || position_trials * fading_redraws < 1000 {
        return Err(Error::validation(format!(
            "need at least 1000 samples in total, got {position_trials} trials x {fading_redraws} redraws"
        )));
    }
    let window = scenario
        .window_side_km
        .unwrap_or_else(|| default_window_side_km(scenario.lambda_per_km2));
    let outcomes: Vec<Result<(f64, f64)>> = (0..position_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            decomposition_trial(scheme, scenario, window, fading_redraws, &mut rng)
        })
        .collect();

    let mut coherent_cells = Vec::with_capacity(position_trials);
    let mut total_cells = Vec::with_capacity(position_trials);
    let mut failures = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok((coherent, total)) => {
                coherent_cells.push(coherent);
                total_cells.push(total);
            }
            Err(Error::Numerical(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if failures * 100 > position_trials {
        return Err(Error::numerical(format!(
            "{failures} of {position_trials} trials failed numerically"
        )));
    }
    let n = coherent_cells.len() as f64;
    let coherent_cell = coherent_cells.iter().sum::<f64>() / n;
    let total_cell = total_cells.iter().sum::<f64>() / n;
    let k = scenario.k_users as f64;
    Ok(InterferenceDecomposition {
        coherent_per_user: coherent_cell / k,
        non_coherent_per_user: (total_cell - coherent_cell) / k,
        k_users: scenario.k_users,
        position_trials: coherent_cells.len(),
        fading_redraws,
        failures,
    })
}

fn decomposition_trial<R: Rng + ?Sized>(
    scheme: CombiningScheme,
    scenario: &EstimationScenario,
    window: f64,
    redraws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let net =
        NetworkRealization::sample_with(scenario.lambda_per_km2, scenario.k_users, window, rng)?;
    let alloc = allocate_pilots(&net, scenario.zeta, rng)?;
    let powers = PowerProfile::channel_inversion(
        &net,
        &scenario.model,
        scenario.snr0_db,
        scenario.snr_tr_db,
    )?;
    let estimator = ChannelEstimator::new(
        &net,
        &scenario.model,
        scenario.correlation,
        scenario.m_antennas,
        &alloc,
        &powers,
    )?;
    let workspace = CombinerWorkspace::new(&estimator)?;
    accumulate_interference(scheme, &estimator, &workspace, redraws, rng)
}

/// Fading average of one realization: returns the cell-summed
/// `(coherent, total)` interference powers under unit-norm combiners.
fn accumulate_interference<R: Rng + ?Sized>(
    scheme: CombiningScheme,
    estimator: &ChannelEstimator,
    workspace: &CombinerWorkspace,
    redraws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let k_users = estimator.k_users();
    let typical = estimator.typical_cell();
    // Only same-block cells can add coherently; cross-block estimates are
    // uncorrelated with the combiner across fading.
    let others: Vec<usize> = estimator
        .sharing_cells()
        .iter()
        .copied()
        .filter(|&cell| cell != typical)
        .collect();
    let mut totals = vec![0.0; k_users];
    let mut sums = vec![Complex64::ZERO; k_users * others.len()];
    let mut squares = vec![0.0; k_users * others.len()];
    for _ in 0..redraws {
        let draw = estimator.draw_channels(rng);
        let obs = estimator.synthesize_observation(&draw, rng);
        let out = estimator.estimate(&obs)?;
        let set = build_combiner(scheme, estimator, &out, workspace)?.unit_normalized()?;
        for k in 0..k_users {
            let v = set.column(k);
            let sample = instantaneous_sinr(estimator, &out, workspace.residual(), k, v)?;
            totals[k] += sample.interference();
            for (o, &cell) in others.iter().enumerate() {
                let h = out.estimate(cell, k);
                let x: Complex64 = v.iter().zip(h.iter()).map(|(a, b)| a.conj() * b).sum();
                sums[k * others.len() + o] += x;
                squares[k * others.len() + o] += x.norm_sqr();
            }
        }
    }
    let n = redraws as f64;
    let mut coherent_cell = 0.0;
    for k in 0..k_users {
        for (o, &cell) in others.iter().enumerate() {
            let idx = k * others.len() + o;
            let mean_sq = (sums[idx].norm_sqr() - squares[idx]) / (n * (n - 1.0));
            coherent_cell += estimator.data_power(cell, k) * mean_sq;
        }
    }
    let total_cell = totals.iter().sum::<f64>() / n;
    Ok((coherent_cell, total_cell))
}
