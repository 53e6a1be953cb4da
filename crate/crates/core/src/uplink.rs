//! Uplink pilot processing: pilot-reuse bookkeeping, statistical
//! channel-inversion power control, despreaded pilot observations, and
//! multicell MMSE channel estimation.
//!
//! Everything is viewed from the typical base station. The pilot book holds
//! `zeta * K` orthogonal sequences split into `zeta` blocks of `K`; each cell
//! picks a block, so the station observes every cell of the window on some
//! pilot dimension and estimates every user's channel — cells on the same
//! block contaminate each other, cells on different blocks are estimated
//! interference-free. A realization fixes positions, block assignments, and
//! powers; the estimator then precomputes one pilot-observation covariance
//! `Q` per (block, pilot) pair (with its Cholesky factor) so that repeated
//! fading draws only pay for linear solves. Channel estimation error
//! statistics are available in exact conditional form — no fading averaging
//! is needed to measure NMSE.
//!
//! Correlation matrices enter in two shapes: `beta * I` for isotropic fading
//! and `beta * T` for the one-ring model, where the unit-gain part `T` is
//! Hermitian Toeplitz and comes from the process-wide cache in
//! [`crate::propagation`]. Sums of such matrices are assembled as length-`M`
//! Toeplitz generators and materialized once, and the eigenvalue-compressed
//! square-root factors give low-rank paths for channel synthesis, estimation,
//! and trace computations.

use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, OwnedRepr};
use ndarray_linalg::{
    CholeskyFactorized, Diag, FactorizeC, InverseC, SolveC, SolveTriangular, UPLO,
};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{default_window_side_km, NetworkRealization};
use crate::propagation::{toeplitz_from_generator, unit_one_ring, MultiSlopeModel, UnitOneRing};

/// Condition-number ceiling for pilot-observation covariances. The bound
/// used is `tr(Q)/sigma^2 >= lambda_max/lambda_min`, conservative but free;
/// realistic operating points sit many orders of magnitude below it.
const CONDITION_LIMIT: f64 = 1e14;

/// 95% two-sided normal quantile, used for confidence half-widths.
const CI_FACTOR: f64 = 1.959_963_984_540_054;

/// Spatial correlation model applied to every link in a scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChannelCorrelation {
    /// Local scattering on an angular interval of half-width `spread`
    /// radians around each link's angle of arrival. A zero spread collapses
    /// to the rank-1 steering-vector matrix.
    OneRing { spread: f64 },
    /// Isotropic fading, `R = beta * I`.
    Uncorrelated,
}

/// Pilot-block assignment for one realization, viewed from the typical cell.
///
/// Each cell picks one of the `zeta` blocks of the pilot book and gives its
/// users the block's `K` sequences aligned user by user. Cells on the same
/// block as the typical cell contaminate its estimates (aligned user by
/// user); cells on other blocks are observed on orthogonal pilot dimensions.
/// Blocks are drawn uniformly per cell, so any given cell lands on the
/// typical cell's block with probability `1/zeta`.
#[derive(Clone, Debug)]
pub struct PilotAllocation {
    zeta: u32,
    k_users: usize,
    tau_p: usize,
    typical: usize,
    group: Vec<u32>,
}

impl PilotAllocation {
    /// Build an explicit block assignment, mainly for controlled scenarios.
    pub fn from_groups(
        zeta: u32,
        k_users: usize,
        typical: usize,
        group: Vec<u32>,
    ) -> Result<Self> {
        if zeta < 1 {
            return Err(Error::validation("pilot reuse factor must be at least 1"));
        }
        if k_users == 0 {
            return Err(Error::validation("each cell must hold at least one user"));
        }
        if typical >= group.len() {
            return Err(Error::validation(format!(
                "typical cell index {typical} out of range for {} cells",
                group.len()
            )));
        }
        if let Some(cell) = group.iter().position(|&g| g >= zeta) {
            return Err(Error::validation(format!(
                "cell {cell} uses pilot block {} but only {zeta} blocks exist",
                group[cell]
            )));
        }
        Ok(Self {
            zeta,
            k_users,
            tau_p: zeta as usize * k_users,
            typical,
            group,
        })
    }

    /// Build from sharing indicators relative to the typical cell: sharers
    /// join the typical cell's block, the others spread round-robin over the
    /// remaining blocks (so a non-sharing cell needs `zeta >= 2`).
    pub fn from_sharing(
        zeta: u32,
        k_users: usize,
        typical: usize,
        sharing: Vec<bool>,
    ) -> Result<Self> {
        if zeta < 1 {
            return Err(Error::validation("pilot reuse factor must be at least 1"));
        }
        if typical >= sharing.len() {
            return Err(Error::validation(format!(
                "typical cell index {typical} out of range for {} cells",
                sharing.len()
            )));
        }
        if !sharing[typical] {
            return Err(Error::validation(
                "the typical cell always shares its own pilots",
            ));
        }
        let mut group = Vec::with_capacity(sharing.len());
        let mut spill = 0u32;
        for &s in &sharing {
            if s {
                group.push(0);
            } else {
                if zeta < 2 {
                    return Err(Error::validation(
                        "reuse factor 1 has a single pilot block, so every cell shares it",
                    ));
                }
                group.push(1 + spill % (zeta - 1));
                spill += 1;
            }
        }
        Self::from_groups(zeta, k_users, typical, group)
    }

    pub fn zeta(&self) -> u32 {
        self.zeta
    }

    pub fn k_users(&self) -> usize {
        self.k_users
    }

    /// Pilot sequence length `zeta * K`.
    pub fn tau_p(&self) -> usize {
        self.tau_p
    }

    pub fn typical_cell(&self) -> usize {
        self.typical
    }

    pub fn num_cells(&self) -> usize {
        self.group.len()
    }

    /// Pilot block used by `cell`.
    pub fn group(&self, cell: usize) -> u32 {
        self.group[cell]
    }

    /// Pilot block per cell.
    pub fn groups(&self) -> &[u32] {
        &self.group
    }

    pub fn shares_with_typical(&self, cell: usize) -> bool {
        self.group[cell] == self.group[self.typical]
    }

    /// Cells on the typical cell's pilot block, ascending, including the
    /// typical cell itself.
    pub fn sharing_cells(&self) -> impl Iterator<Item = usize> + '_ {
        let g = self.group[self.typical];
        self.group
            .iter()
            .enumerate()
            .filter_map(move |(l, &gl)| (gl == g).then_some(l))
    }

    pub fn num_sharing(&self) -> usize {
        let g = self.group[self.typical];
        self.group.iter().filter(|&&gl| gl == g).count()
    }
}

/// Draw the pilot-block assignment for one realization. The typical cell
/// takes block 0 (the labels are exchangeable); every other cell draws its
/// block uniformly at random.
pub fn allocate_pilots<R: Rng + ?Sized>(
    net: &NetworkRealization,
    zeta: u32,
    rng: &mut R,
) -> Result<PilotAllocation> {
    if zeta < 1 {
        return Err(Error::validation("pilot reuse factor must be at least 1"));
    }
    let typical = net.typical_bs();
    let group: Vec<u32> = (0..net.num_bs())
        .map(|l| {
            if l == typical {
                0
            } else {
                rng.random_range(0..zeta)
            }
        })
        .collect();
    PilotAllocation::from_groups(zeta, net.k_users(), typical, group)
}

/// Per-user transmit powers under statistical channel inversion: every user
/// sets `p = rho0 / beta_serving` (data) and `p_pilot = rho_tr /
/// beta_serving`, so the average received power at the serving base station
/// is `rho0` (or `rho_tr`) for everyone. Noise power is normalized to 1, so
/// the design powers equal the design SNRs.
#[derive(Clone, Debug)]
pub struct PowerProfile {
    rho0: f64,
    rho_tr: f64,
    sigma2: f64,
    data: Vec<f64>,
    pilot: Vec<f64>,
}

impl PowerProfile {
    /// Channel-inversion powers from design SNRs in dB. The pilot SNR must
    /// strictly exceed the data SNR.
    pub fn channel_inversion(
        net: &NetworkRealization,
        model: &MultiSlopeModel,
        snr0_db: f64,
        snr_tr_db: f64,
    ) -> Result<Self> {
        if !snr0_db.is_finite() || !snr_tr_db.is_finite() {
            return Err(Error::validation("design SNRs must be finite"));
        }
        if snr_tr_db <= snr0_db {
            return Err(Error::validation(format!(
                "pilot SNR ({snr_tr_db} dB) must exceed data SNR ({snr0_db} dB)"
            )));
        }
        let rho0 = 10f64.powf(snr0_db / 10.0);
        let rho_tr = 10f64.powf(snr_tr_db / 10.0);
        let n = net.num_ues();
        let mut data = Vec::with_capacity(n);
        let mut pilot = Vec::with_capacity(n);
        for l in 0..net.num_bs() {
            for i in 0..net.k_users() {
                let beta = model.path_gain_km(net.serving_distance_km(l, i))?;
                data.push(rho0 / beta);
                pilot.push(rho_tr / beta);
            }
        }
        Ok(Self {
            rho0,
            rho_tr,
            sigma2: 1.0,
            data,
            pilot,
        })
    }

    /// Explicit powers for synthetic scenarios (no inversion invariant).
    pub fn from_powers(
        rho0: f64,
        rho_tr: f64,
        sigma2: f64,
        data: Vec<f64>,
        pilot: Vec<f64>,
    ) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::validation("noise power must be positive"));
        }
        if data.len() != pilot.len() {
            return Err(Error::validation(
                "data and pilot power lists must have equal length",
            ));
        }
        if data
            .iter()
            .chain(pilot.iter())
            .any(|&p| !p.is_finite() || p < 0.0)
        {
            return Err(Error::validation(
                "transmit powers must be finite and nonnegative",
            ));
        }
        Ok(Self {
            rho0,
            rho_tr,
            sigma2,
            data,
            pilot,
        })
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn rho_tr(&self) -> f64 {
        self.rho_tr
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn num_ues(&self) -> usize {
        self.data.len()
    }

    /// Data power of the user at flat index `l * K + i`.
    pub fn data_power(&self, ue: usize) -> f64 {
        self.data[ue]
    }

    /// Pilot power of the user at flat index `l * K + i`.
    pub fn pilot_power(&self, ue: usize) -> f64 {
        self.pilot[ue]
    }
}

/// Unit-gain correlation structure of one link (the `beta` scale is kept
/// separately).
enum UnitCorr {
    Ring(Arc<UnitOneRing>),
    Identity,
}

impl UnitCorr {
    /// Add `w` times this unit matrix's Toeplitz generator to `acc`.
    fn add_generator(&self, acc: &mut [Complex64], w: f64) {
        match self {
            UnitCorr::Ring(ring) => {
                for (slot, g) in acc.iter_mut().zip(ring.generator()) {
                    *slot += g * w;
                }
            }
            UnitCorr::Identity => acc[0] += w,
        }
    }

    fn to_matrix(&self, m: usize, beta: f64) -> Array2<Complex64> {
        match self {
            UnitCorr::Ring(ring) => ring.to_matrix(beta),
            UnitCorr::Identity => Array2::from_diag_elem(m, Complex64::new(beta, 0.0)),
        }
    }

    /// `scale * T * z` using the compressed factor where one exists.
    fn apply_scaled(&self, z: &Array1<Complex64>, scale: f64) -> Array1<Complex64> {
        match self {
            UnitCorr::Ring(ring) => {
                let f = ring.factor();
                let (m, r) = f.dim();
                let mut inner = vec![Complex64::ZERO; r];
                for (row, &zr) in z.iter().enumerate() {
                    for (col, slot) in inner.iter_mut().enumerate() {
                        *slot += f[(row, col)].conj() * zr;
                    }
                }
                let mut out = Array1::zeros(m);
                for row in 0..m {
                    let mut acc = Complex64::ZERO;
                    for (col, &v) in inner.iter().enumerate() {
                        acc += f[(row, col)] * v;
                    }
                    out[row] = acc * scale;
                }
                out
            }
            UnitCorr::Identity => z.mapv(|v| v * scale),
        }
    }

    /// Sample `amplitude * T^{1/2} * z` with `z` standard complex Gaussian.
    fn draw<R: Rng + ?Sized>(&self, m: usize, amplitude: f64, rng: &mut R) -> Array1<Complex64> {
        match self {
            UnitCorr::Ring(ring) => {
                let f = ring.factor();
                let r = f.ncols();
                let z: Vec<Complex64> = (0..r).map(|_| standard_complex(rng)).collect();
                let mut out = Array1::zeros(m);
                for row in 0..m {
                    let mut acc = Complex64::ZERO;
                    for (col, &v) in z.iter().enumerate() {
                        acc += f[(row, col)] * v;
                    }
                    out[row] = acc * amplitude;
                }
                out
            }
            UnitCorr::Identity => {
                Array1::from_iter((0..m).map(|_| standard_complex(rng) * amplitude))
            }
        }
    }
}

/// Sample from the standard circularly symmetric complex Gaussian
/// (unit variance split evenly across the real and imaginary parts).
pub(crate) fn standard_complex<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * FRAC_1_SQRT_2
}

/// One pilot's observation covariance and its Cholesky factorization.
struct PilotQ {
    matrix: Array2<Complex64>,
    chol: CholeskyFactorized<OwnedRepr<Complex64>>,
}

/// Channel realizations from every user in the window to the typical base
/// station. Row `cell * K + i` holds the channel of user `i` in cell `cell`.
#[derive(Clone, Debug)]
pub struct FadingDraw {
    channels: Array2<Complex64>,
    k_users: usize,
}

impl FadingDraw {
    pub fn channel(&self, cell: usize, i: usize) -> ArrayView1<'_, Complex64> {
        self.channels.row(cell * self.k_users + i)
    }

    pub fn channels(&self) -> &Array2<Complex64> {
        &self.channels
    }
}

/// MMSE channel estimates for every user in the window, in the same row
/// layout as [`FadingDraw`].
#[derive(Clone, Debug)]
pub struct EstimationOutput {
    estimates: Array2<Complex64>,
    k_users: usize,
}

impl EstimationOutput {
    pub fn estimate(&self, cell: usize, i: usize) -> ArrayView1<'_, Complex64> {
        self.estimates.row(cell * self.k_users + i)
    }

    pub fn estimates(&self) -> &Array2<Complex64> {
        &self.estimates
    }
}

/// Multicell MMSE channel estimator at the typical base station for one
/// network, pilot-block, and power realization. Estimates every user in the
/// window on its cell's pilot block.
pub struct ChannelEstimator {
    m_antennas: usize,
    k_users: usize,
    typical: usize,
    tau_p: usize,
    sigma2: f64,
    /// Pilot block per cell.
    group: Vec<u32>,
    /// Cells per pilot block, ascending within each block.
    members: Vec<Vec<usize>>,
    /// Cells on the typical cell's block, ascending; includes the typical
    /// cell.
    sharing: Vec<usize>,
    /// Unit correlation per user (all cells), flat index `l * K + i`.
    corr: Vec<UnitCorr>,
    /// Average channel gain to the typical base station per user.
    beta: Vec<f64>,
    data_power: Vec<f64>,
    pilot_power: Vec<f64>,
    /// One factored observation covariance per pilot sequence, flat index
    /// `block * K + i`.
    q: Vec<PilotQ>,
}

impl std::fmt::Debug for ChannelEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChannelEstimator")
            .field("m_antennas", &self.m_antennas)
            .field("k_users", &self.k_users)
            .field("num_cells", &self.num_cells())
            .field("typical", &self.typical)
            .field("tau_p", &self.tau_p)
            .field("num_sharing", &self.sharing.len())
            .finish_non_exhaustive()
    }
}

impl ChannelEstimator {
    pub fn new(
        net: &NetworkRealization,
        model: &MultiSlopeModel,
        correlation: ChannelCorrelation,
        m_antennas: usize,
        alloc: &PilotAllocation,
        powers: &PowerProfile,
    ) -> Result<Self> {
        if m_antennas == 0 {
            return Err(Error::validation("need at least one antenna"));
        }
        if alloc.num_cells() != net.num_bs()
            || alloc.k_users() != net.k_users()
            || alloc.typical_cell() != net.typical_bs()
        {
            return Err(Error::validation(
                "pilot allocation does not match the network realization",
            ));
        }
        if powers.num_ues() != net.num_ues() {
            return Err(Error::validation(
                "power profile does not match the network realization",
            ));
        }
        let typical = net.typical_bs();
        let k = net.k_users();
        let tau_p = alloc.tau_p();
        let sigma2 = powers.sigma2();

        let mut corr = Vec::with_capacity(net.num_ues());
        let mut beta = Vec::with_capacity(net.num_ues());
        for l in 0..net.num_bs() {
            for i in 0..k {
                beta.push(model.path_gain_km(net.distance_km(l, i, typical))?);
                corr.push(match correlation {
                    ChannelCorrelation::OneRing { spread } => {
                        UnitCorr::Ring(unit_one_ring(m_antennas, net.aoa(l, i, typical), spread)?)
                    }
                    ChannelCorrelation::Uncorrelated => UnitCorr::Identity,
                });
            }
        }

        let group: Vec<u32> = alloc.groups().to_vec();
        let sharing: Vec<usize> = alloc.sharing_cells().collect();
        let mut members = vec![Vec::new(); alloc.zeta() as usize];
        for (l, &g) in group.iter().enumerate() {
            members[g as usize].push(l);
        }

        let mut q = Vec::with_capacity(members.len() * k);
        for (g, cells) in members.iter().enumerate() {
            for i in 0..k {
                let mut gen = vec![Complex64::ZERO; m_antennas];
                for &l in cells {
                    let u = l * k + i;
                    let w = tau_p as f64 * powers.pilot_power(u) * beta[u];
                    corr[u].add_generator(&mut gen, w);
                }
                gen[0] += sigma2;
                let trace = m_antennas as f64 * gen[0].re;
                if !(trace.is_finite() && trace / sigma2 <= CONDITION_LIMIT) {
                    return Err(Error::numerical(format!(
                        "pilot covariance for block {g}, pilot {i} is too \
                         ill-conditioned (bound {:.3e})",
                        trace / sigma2
                    )));
                }
                let matrix = toeplitz_from_generator(&gen, 1.0);
                let chol = matrix.factorizec(UPLO::Lower).map_err(|e| {
                    Error::numerical(format!("pilot covariance factorization failed: {e}"))
                })?;
                q.push(PilotQ { matrix, chol });
            }
        }

        Ok(Self {
            m_antennas,
            k_users: k,
            typical,
            tau_p,
            sigma2,
            group,
            members,
            sharing,
            corr,
            beta,
            data_power: powers.data.clone(),
            pilot_power: powers.pilot.clone(),
            q,
        })
    }

    pub fn m_antennas(&self) -> usize {
        self.m_antennas
    }

    pub fn k_users(&self) -> usize {
        self.k_users
    }

    pub fn num_ues(&self) -> usize {
        self.beta.len()
    }

    pub fn num_cells(&self) -> usize {
        self.beta.len() / self.k_users
    }

    pub fn typical_cell(&self) -> usize {
        self.typical
    }

    pub fn tau_p(&self) -> usize {
        self.tau_p
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Pilot block used by `cell`.
    pub fn group(&self, cell: usize) -> u32 {
        self.group[cell]
    }

    pub fn shares_with_typical(&self, cell: usize) -> bool {
        self.group[cell] == self.group[self.typical]
    }

    /// Cells on the typical cell's pilot block, ascending, including the
    /// typical cell.
    pub fn sharing_cells(&self) -> &[usize] {
        &self.sharing
    }

    pub fn num_sharing(&self) -> usize {
        self.sharing.len()
    }

    fn flat(&self, cell: usize, i: usize) -> usize {
        cell * self.k_users + i
    }

    /// Flat index of the pilot sequence used by user `i` of `cell`.
    fn q_index(&self, cell: usize, i: usize) -> usize {
        self.group[cell] as usize * self.k_users + i
    }

    pub fn data_power(&self, cell: usize, i: usize) -> f64 {
        self.data_power[self.flat(cell, i)]
    }

    pub fn pilot_power(&self, cell: usize, i: usize) -> f64 {
        self.pilot_power[self.flat(cell, i)]
    }

    /// Average channel gain from user `(cell, i)` to the typical base
    /// station.
    pub fn channel_gain(&self, cell: usize, i: usize) -> f64 {
        self.beta[self.flat(cell, i)]
    }

    /// Correlation matrix of the channel from user `(cell, i)` to the
    /// typical base station.
    pub fn correlation_matrix(&self, cell: usize, i: usize) -> Array2<Complex64> {
        let u = self.flat(cell, i);
        self.corr[u].to_matrix(self.m_antennas, self.beta[u])
    }

    /// Observation covariance (divided by `tau_p`) for the pilot sequence of
    /// user `i` in `cell`'s block.
    pub fn q_matrix(&self, cell: usize, i: usize) -> &Array2<Complex64> {
        &self.q[self.q_index(cell, i)].matrix
    }

    /// Draw channels from every user in the window to the typical base
    /// station.
    pub fn draw_channels<R: Rng + ?Sized>(&self, rng: &mut R) -> FadingDraw {
        let m = self.m_antennas;
        let mut channels = Array2::zeros((self.num_ues(), m));
        for u in 0..self.num_ues() {
            let h = self.corr[u].draw(m, self.beta[u].sqrt(), rng);
            channels.row_mut(u).assign(&h);
        }
        FadingDraw {
            channels,
            k_users: self.k_users,
        }
    }

    /// Despreaded pilot observations, one `M`-vector per pilot sequence in
    /// block-major order (row `block * K + i`): the sum of the block's
    /// users' channels weighted by `tau_p * sqrt(pilot power)`, plus noise
    /// of covariance `tau_p * sigma^2 * I`.
    pub fn synthesize_observation<R: Rng + ?Sized>(
        &self,
        draw: &FadingDraw,
        rng: &mut R,
    ) -> Array2<Complex64> {
        let m = self.m_antennas;
        let tau = self.tau_p as f64;
        let noise_amp = (tau * self.sigma2).sqrt();
        let mut obs = Array2::zeros((self.tau_p, m));
        for (g, cells) in self.members.iter().enumerate() {
            for i in 0..self.k_users {
                let mut row = obs.row_mut(g * self.k_users + i);
                for &l in cells {
                    let w = tau * self.pilot_power[self.flat(l, i)].sqrt();
                    let h = draw.channel(l, i);
                    for (slot_out, &hv) in row.iter_mut().zip(h.iter()) {
                        *slot_out += hv * w;
                    }
                }
                for slot_out in row.iter_mut() {
                    *slot_out += standard_complex(rng) * noise_amp;
                }
            }
        }
        obs
    }

    /// MMSE estimate of every user's channel from the despreaded
    /// observations: `sqrt(pilot power) * R * Q^{-1} * y / tau_p` with the
    /// `Q` of the user's pilot sequence, evaluated as one Cholesky solve per
    /// sequence plus a low-rank product per user.
    pub fn estimate(&self, obs: &Array2<Complex64>) -> Result<EstimationOutput> {
        if obs.dim() != (self.tau_p, self.m_antennas) {
            return Err(Error::validation(format!(
                "expected a {} x {} observation array, got {} x {}",
                self.tau_p,
                self.m_antennas,
                obs.nrows(),
                obs.ncols()
            )));
        }
        let mut estimates = Array2::zeros((self.num_ues(), self.m_antennas));
        for (g, cells) in self.members.iter().enumerate() {
            if cells.is_empty() {
                continue;
            }
            for i in 0..self.k_users {
                // The tau_p factors cancel between E{h y^H} and E{y y^H}^{-1}:
                // the filter applied to y is sqrt(p) R (tau_p Q)^{-1} tau_p.
                let qi = g * self.k_users + i;
                let mut z = obs.row(qi).to_owned();
                self.q[qi].chol.solvec_inplace(&mut z).map_err(|e| {
                    Error::numerical(format!("pilot covariance solve failed: {e}"))
                })?;
                for &l in cells {
                    let u = self.flat(l, i);
                    let scale = self.pilot_power[u].sqrt() * self.beta[u];
                    let h_hat = self.corr[u].apply_scaled(&z, scale);
                    estimates.row_mut(u).assign(&h_hat);
                }
            }
        }
        Ok(EstimationOutput {
            estimates,
            k_users: self.k_users,
        })
    }

    /// `L^{-1} * rhs` where the pilot sequence's `Q = L L^H`. Every
    /// sandwiched product `A Q^{-1} B` is computed as `(L^{-1} A)^H (L^{-1}
    /// B)`, which costs one triangular solve per side and keeps Hermitian
    /// results Hermitian positive semidefinite by construction.
    fn half_solve(&self, qi: usize, rhs: &Array2<Complex64>) -> Result<Array2<Complex64>> {
        self.q[qi]
            .chol
            .factor
            .solve_triangular(UPLO::Lower, Diag::NonUnit, rhs)
            .map_err(|e| Error::numerical(format!("pilot covariance solve failed: {e}")))
    }

    /// Estimation-error covariance `C = R - p_pilot * tau_p * R Q^{-1} R`
    /// of user `i` in `cell`.
    pub fn error_covariance(&self, cell: usize, i: usize) -> Result<Array2<Complex64>> {
        let u = self.flat(cell, i);
        let r = self.corr[u].to_matrix(self.m_antennas, self.beta[u]);
        let g = self.half_solve(self.q_index(cell, i), &r)?;
        let w = self.pilot_power[u] * self.tau_p as f64;
        let mut c = conj_transpose(&g).dot(&g);
        c.zip_mut_with(&r, |cv, &rv| *cv = rv - *cv * w);
        hermitianize(&mut c);
        Ok(c)
    }

    /// Cross-correlation of two users' channel estimates on pilot `i`:
    /// `sqrt(p_a p_b) * tau_p * R_a Q^{-1} R_b` when the cells are on the
    /// same pilot block (`cell_a == cell_b` gives the estimate's own
    /// covariance), and zero otherwise — estimates from different blocks
    /// come from independent observations.
    pub fn estimate_cross_correlation(
        &self,
        cell_a: usize,
        cell_b: usize,
        i: usize,
    ) -> Result<Array2<Complex64>> {
        if self.group[cell_a] != self.group[cell_b] {
            return Ok(Array2::zeros((self.m_antennas, self.m_antennas)));
        }
        let qi = self.q_index(cell_a, i);
        let ua = self.flat(cell_a, i);
        let ub = self.flat(cell_b, i);
        let ra = self.corr[ua].to_matrix(self.m_antennas, self.beta[ua]);
        let rb = self.corr[ub].to_matrix(self.m_antennas, self.beta[ub]);
        let ga = self.half_solve(qi, &ra)?;
        let gb = self.half_solve(qi, &rb)?;
        let w = (self.pilot_power[ua] * self.pilot_power[ub]).sqrt() * self.tau_p as f64;
        let mut phi = conj_transpose(&ga).dot(&gb);
        phi.mapv_inplace(|v| v * w);
        Ok(phi)
    }

    /// Exact conditional NMSE `tr(C)/tr(R)` for user `i` of the typical
    /// cell, without materializing `C`.
    pub fn nmse_exact(&self, i: usize) -> Result<f64> {
        let u = self.flat(self.typical, i);
        let qi = self.q_index(self.typical, i);
        let beta = self.beta[u];
        let m = self.m_antennas;
        // tr(R Q^{-1} R) with R = beta * T; low-rank T = F F^H gives
        // beta^2 * tr((F^H Q^{-1} F)(F^H F)) with F^H Q^{-1} F = G^H G.
        let (trace_r, trace_rqr) = match &self.corr[u] {
            UnitCorr::Ring(ring) => {
                let f = ring.factor();
                let g = self.half_solve(qi, f)?;
                let h = conj_transpose(&g).dot(&g);
                let w = conj_transpose(f).dot(f);
                let tr: Complex64 = h.dot(&w).diag().sum();
                let trace_r = beta * m as f64 * ring.generator()[0].re;
                (trace_r, beta * beta * tr.re)
            }
            UnitCorr::Identity => {
                // tr(Q^{-1}) is the squared Frobenius norm of L^{-1}.
                let eye = Array2::from_diag_elem(m, Complex64::ONE);
                let g = self.half_solve(qi, &eye)?;
                let acc: f64 = g.iter().map(|v| v.norm_sqr()).sum();
                (beta * m as f64, beta * beta * acc)
            }
        };
        Ok(1.0 - self.pilot_power[u] * self.tau_p as f64 * trace_rqr / trace_r)
    }

    /// Covariance of everything the typical base station cannot resolve
    /// coherently: noise plus every user's estimation error, since every
    /// user in the window is estimated on its block. Fixed per realization.
    pub fn residual_covariance(&self) -> Result<Array2<Complex64>> {
        let m = self.m_antennas;
        let tau = self.tau_p as f64;
        // Statistical part: sigma^2 I plus the data-weighted correlation of
        // every user in the window; all Toeplitz, assembled by generator.
        let mut gen = vec![Complex64::ZERO; m];
        for u in 0..self.num_ues() {
            self.corr[u].add_generator(&mut gen, self.data_power[u] * self.beta[u]);
        }
        gen[0] += self.sigma2;
        let mut z = toeplitz_from_generator(&gen, 1.0);
        // Remove the coherently estimated part of every user:
        // tau_p * p * p_pilot * R Q^{-1} R, through the compressed factors.
        let mut scalar = vec![0.0; self.q.len()];
        for (g, cells) in self.members.iter().enumerate() {
            for &l in cells {
                for i in 0..self.k_users {
                    let u = self.flat(l, i);
                    let qi = g * self.k_users + i;
                    let w =
                        tau * self.data_power[u] * self.pilot_power[u] * self.beta[u] * self.beta[u];
                    match &self.corr[u] {
                        UnitCorr::Identity => scalar[qi] += w,
                        UnitCorr::Ring(ring) => {
                            let f = ring.factor();
                            let gh = self.half_solve(qi, f)?;
                            let h = conj_transpose(&gh).dot(&gh);
                            let t = f.dot(&h);
                            let s = t.dot(&conj_transpose(f));
                            z.scaled_add(Complex64::new(-w, 0.0), &s);
                        }
                    }
                }
            }
        }
        for (qi, &w) in scalar.iter().enumerate() {
            if w > 0.0 {
                let q_inv = self.q[qi].chol.invc().map_err(|e| {
                    Error::numerical(format!("pilot covariance inversion failed: {e}"))
                })?;
                z.scaled_add(Complex64::new(-w, 0.0), &q_inv);
            }
        }
        hermitianize(&mut z);
        Ok(z)
    }

    /// Residual covariance as a single-cell receiver sees it: such a
    /// receiver ignores every estimate outside its own cell, so other cells'
    /// users enter with their full correlation and own-cell users with their
    /// estimation-error covariance.
    pub fn single_cell_residual_covariance(&self) -> Result<Array2<Complex64>> {
        let m = self.m_antennas;
        let mut gen = vec![Complex64::ZERO; m];
        for l in 0..self.num_cells() {
            if l == self.typical {
                continue;
            }
            for i in 0..self.k_users {
                let u = self.flat(l, i);
                self.corr[u].add_generator(&mut gen, self.data_power[u] * self.beta[u]);
            }
        }
        gen[0] += self.sigma2;
        let mut z = toeplitz_from_generator(&gen, 1.0);
        for i in 0..self.k_users {
            let c = self.error_covariance(self.typical, i)?;
            let p = Complex64::from(self.data_power(self.typical, i));
            z.scaled_add(p, &c);
        }
        hermitianize(&mut z);
        Ok(z)
    }
}

fn conj_transpose(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (rows, cols) = a.dim();
    Array2::from_shape_fn((cols, rows), |(r, c)| a[(c, r)].conj())
}

fn hermitianize(a: &mut Array2<Complex64>) {
    let n = a.nrows();
    for r in 0..n {
        a[(r, r)] = Complex64::new(a[(r, r)].re, 0.0);
        for c in (r + 1)..n {
            let avg = (a[(r, c)] + a[(c, r)].conj()) * 0.5;
            a[(r, c)] = avg;
            a[(c, r)] = avg.conj();
        }
    }
}

/// Everything needed to draw independent estimation realizations.
#[derive(Clone, Debug)]
pub struct EstimationScenario {
    pub lambda_per_km2: f64,
    pub k_users: usize,
    pub m_antennas: usize,
    pub zeta: u32,
    pub snr0_db: f64,
    pub snr_tr_db: f64,
    pub correlation: ChannelCorrelation,
    pub model: MultiSlopeModel,
    /// Simulation window override; defaults to
    /// [`default_window_side_km`] when absent.
    pub window_side_km: Option<f64>,
}

/// Monte Carlo NMSE over network and pilot-sharing realizations.
#[derive(Clone, Copy, Debug)]
pub struct NmseEstimate {
    pub mean: f64,
    pub ci_half_width: f64,
    /// Realizations that contributed to the mean.
    pub trials: usize,
    /// Realizations skipped for numerical reasons.
    pub failures: usize,
}

/// Estimate the average NMSE of the typical cell's users.
///
/// Each trial draws a network and a pilot allocation from its own counter
/// stream of the master seed (so results do not depend on scheduling),
/// computes the exact conditional NMSE averaged over the typical cell's
/// users, and the trials are then reduced in index order. Trials that fail
/// numerically are skipped; more than 1% of them is an error.
pub fn nmse_montecarlo(
    scenario: &EstimationScenario,
    trials: usize,
    seed: u64,
) -> Result<NmseEstimate> {
    if trials < 100 {
        return Err(Error::validation(format!(
            "need at least 100 trials for a meaningful confidence interval, got {trials}"
        )));
    }
    let window = scenario
        .window_side_km
        .unwrap_or_else(|| default_window_side_km(scenario.lambda_per_km2));
    let outcomes: Vec<Result<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            nmse_trial(scenario, window, &mut rng)
        })
        .collect();

    let mut values = Vec::with_capacity(trials);
    let mut failures = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(v) => values.push(v),
            Err(Error::Numerical(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if failures * 100 > trials {
        return Err(Error::numerical(format!(
            "{failures} of {trials} trials failed numerically"
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(NmseEstimate {
        mean,
        ci_half_width: CI_FACTOR * (var / n).sqrt(),
        trials: values.len(),
        failures,
    })
}

fn nmse_trial<R: Rng + ?Sized>(
    scenario: &EstimationScenario,
    window: f64,
    rng: &mut R,
) -> Result<f64> {
    let net =
        NetworkRealization::sample_with(scenario.lambda_per_km2, scenario.k_users, window, rng)?;
    let alloc = allocate_pilots(&net, scenario.zeta, rng)?;
    let powers = PowerProfile::channel_inversion(
        &net,
        &scenario.model,
        scenario.snr0_db,
        scenario.snr_tr_db,
    )?;
    let est = ChannelEstimator::new(
        &net,
        &scenario.model,
        scenario.correlation,
        scenario.m_antennas,
        &alloc,
        &powers,
    )?;
    let mut acc = 0.0;
    for i in 0..net.k_users() {
        acc += est.nmse_exact(i)?;
    }
    Ok(acc / net.k_users() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray_linalg::Eigh;

    fn reference_model() -> MultiSlopeModel {
        MultiSlopeModel::dual_slope_reference()
    }

    /// Two hand-placed cells with two users each; the typical cell is the
    /// first one (0.1 km from the window center vs 0.7 km).
    fn two_cell_net() -> NetworkRealization {
        NetworkRealization::from_positions(
            2.0,
            vec![[0.9, 1.0], [1.7, 1.0]],
            vec![[0.8, 1.0], [1.0, 1.1], [1.6, 1.0], [1.75, 0.9]],
            2,
        )
        .expect("hand-placed two-cell layout should validate")
    }

    fn estimator_for(
        net: &NetworkRealization,
        correlation: ChannelCorrelation,
        m: usize,
        zeta: u32,
        groups: Vec<u32>,
    ) -> (ChannelEstimator, PowerProfile, PilotAllocation) {
        let model = reference_model();
        let alloc = PilotAllocation::from_groups(zeta, net.k_users(), net.typical_bs(), groups)
            .expect("explicit block assignment should validate");
        let powers = PowerProfile::channel_inversion(net, &model, 5.0, 15.0)
            .expect("channel inversion should succeed on a valid layout");
        let est = ChannelEstimator::new(net, &model, correlation, m, &alloc, &powers)
            .expect("estimator construction should succeed");
        (est, powers, alloc)
    }

    fn frobenius(a: &Array2<Complex64>) -> f64 {
        a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    fn real_trace(a: &Array2<Complex64>) -> f64 {
        a.diag().iter().map(|v| v.re).sum()
    }

    #[test]
    fn universal_reuse_shares_every_cell() {
        let net = NetworkRealization::sample(100.0, 1, 1.0, 7).expect("sampling should succeed");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let alloc = allocate_pilots(&net, 1, &mut rng).expect("allocation should succeed");
        assert_eq!(
            alloc.num_sharing(),
            net.num_bs(),
            "reuse factor 1 must make every cell share the typical cell's pilots"
        );
        assert_eq!(alloc.tau_p(), net.k_users(), "tau_p must equal zeta * K");
    }

    #[test]
    fn bernoulli_sharing_matches_its_rate() {
        let net = NetworkRealization::sample(100.0, 1, 1.0, 7).expect("sampling should succeed");
        let typical = net.typical_bs();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zeta = 4u32;
        let draws = 10_000usize;
        let mut shared = 0usize;
        let mut others = 0usize;
        for _ in 0..draws {
            let alloc = allocate_pilots(&net, zeta, &mut rng).expect("allocation should succeed");
            assert!(
                alloc.shares_with_typical(typical),
                "the typical cell must always share its own pilots"
            );
            for l in 0..net.num_bs() {
                if l == typical {
                    continue;
                }
                others += 1;
                if alloc.shares_with_typical(l) {
                    shared += 1;
                }
            }
        }
        let p = 1.0 / f64::from(zeta);
        let mean = shared as f64 / others as f64;
        let three_sigma = 3.0 * (p * (1.0 - p) / others as f64).sqrt();
        assert!(
            (mean - p).abs() <= three_sigma,
            "empirical sharing rate {mean:.5} should be within {three_sigma:.5} of {p}"
        );
    }

    #[test]
    fn explicit_sharing_validates_its_invariants() {
        let err = PilotAllocation::from_sharing(1, 2, 0, vec![false, true])
            .expect_err("a non-sharing typical cell must be rejected");
        assert!(matches!(err, Error::Validation(_)));
        let err = PilotAllocation::from_sharing(0, 2, 0, vec![true, true])
            .expect_err("zeta = 0 must be rejected");
        assert!(matches!(err, Error::Validation(_)));
        let err = PilotAllocation::from_sharing(2, 2, 5, vec![true, true])
            .expect_err("an out-of-range typical index must be rejected");
        assert!(matches!(err, Error::Validation(_)));
        let err = PilotAllocation::from_sharing(1, 2, 0, vec![true, false])
            .expect_err("a single pilot block cannot host a non-sharing cell");
        assert!(matches!(err, Error::Validation(_)));
        let err = PilotAllocation::from_groups(2, 2, 0, vec![0, 2])
            .expect_err("a block index beyond zeta must be rejected");
        assert!(matches!(err, Error::Validation(_)));

        let alloc = PilotAllocation::from_sharing(3, 2, 1, vec![false, true, false, true, false])
            .expect("a consistent sharing pattern should validate");
        assert_eq!(alloc.group(1), 0, "sharers sit on the typical cell's block");
        assert_eq!(alloc.group(3), 0, "sharers sit on the typical cell's block");
        assert!(
            (0..alloc.num_cells()).all(|l| alloc.shares_with_typical(l) == (alloc.group(l) == 0)),
            "sharing must mean being on the typical cell's block"
        );
        assert!(
            [alloc.group(0), alloc.group(2), alloc.group(4)]
                .iter()
                .all(|&g| g >= 1 && g < 3),
            "non-sharers must land on the other blocks"
        );
        assert_eq!(
            alloc.sharing_cells().collect::<Vec<_>>(),
            vec![1, 3],
            "sharing cells enumerate the typical block in ascending order"
        );
    }

    #[test]
    fn channel_inversion_equalizes_received_power() {
        let net = NetworkRealization::sample(100.0, 2, 1.0, 11).expect("sampling should succeed");
        let model = reference_model();
        let powers = PowerProfile::channel_inversion(&net, &model, 5.0, 15.0)
            .expect("channel inversion should succeed");
        assert!((powers.rho0() - 10f64.powf(0.5)).abs() < 1e-12);
        assert!((powers.rho_tr() - 10f64.powf(1.5)).abs() < 1e-12);
        for l in 0..net.num_bs() {
            for i in 0..net.k_users() {
                let u = net.ue_index(l, i);
                let beta = model
                    .path_gain_km(net.serving_distance_km(l, i))
                    .expect("serving gain should evaluate");
                assert!(
                    (powers.data_power(u) * beta / powers.rho0() - 1.0).abs() < 1e-14,
                    "data power must invert the serving gain exactly"
                );
                assert!(
                    (powers.pilot_power(u) * beta / powers.rho_tr() - 1.0).abs() < 1e-14,
                    "pilot power must invert the serving gain exactly"
                );
                assert!(
                    powers.pilot_power(u) > powers.data_power(u),
                    "pilot power must exceed data power"
                );
            }
        }
        let err = PowerProfile::channel_inversion(&net, &model, 5.0, 5.0)
            .expect_err("equal design SNRs must be rejected");
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn observation_covariance_separates_pilot_blocks() {
        let net = two_cell_net();
        let spread = 10f64.to_radians();
        let (est, _powers, _alloc) = estimator_for(
            &net,
            ChannelCorrelation::OneRing { spread },
            4,
            2,
            vec![0, 1],
        );
        let m = est.m_antennas();
        let k = est.k_users();
        let tau = est.tau_p() as f64;
        let pilot = 0usize;
        let other = 1 - net.typical_bs();

        // Expected covariances assembled by hand: each block's row sees only
        // its own cell's user correlation plus despread noise.
        let expected_for = |cell: usize| {
            let mut e = est.correlation_matrix(cell, pilot);
            e.mapv_inplace(|v| v * (tau * tau * est.pilot_power(cell, pilot)));
            for d in 0..m {
                e[(d, d)] += Complex64::from(tau * est.sigma2());
            }
            e
        };
        let expected_typical = expected_for(net.typical_bs());
        let expected_other = expected_for(other);
        let row_typical = est.group(net.typical_bs()) as usize * k + pilot;
        let row_other = est.group(other) as usize * k + pilot;
        assert_ne!(
            row_typical, row_other,
            "the two cells must despread onto different observation rows"
        );

        let draws = 10_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mean = Array1::<Complex64>::zeros(m);
        let mut cov_typical = Array2::<Complex64>::zeros((m, m));
        let mut cov_other = Array2::<Complex64>::zeros((m, m));
        let mut cov_cross = Array2::<Complex64>::zeros((m, m));
        for _ in 0..draws {
            let fading = est.draw_channels(&mut rng);
            let obs = est.synthesize_observation(&fading, &mut rng);
            let y = obs.row(row_typical);
            let w = obs.row(row_other);
            for a in 0..m {
                mean[a] += y[a];
                for b in 0..m {
                    cov_typical[(a, b)] += y[a] * y[b].conj();
                    cov_other[(a, b)] += w[a] * w[b].conj();
                    cov_cross[(a, b)] += y[a] * w[b].conj();
                }
            }
        }
        mean.mapv_inplace(|v| v / draws as f64);
        for cov in [&mut cov_typical, &mut cov_other, &mut cov_cross] {
            cov.mapv_inplace(|v| v / draws as f64);
        }

        let trace = real_trace(&expected_typical);
        let mean_norm = mean.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(
            mean_norm <= 3.0 * (trace / draws as f64).sqrt(),
            "observation mean norm {mean_norm:.4e} should vanish within three standard errors"
        );
        for (cov, expected, label) in [
            (&cov_typical, &expected_typical, "typical block"),
            (&cov_other, &expected_other, "other block"),
        ] {
            let diff = cov - expected;
            let err = frobenius(&diff);
            let budget = 3.0 * real_trace(expected) / (draws as f64).sqrt();
            assert!(
                err <= budget,
                "{label} sample covariance error {err:.4e} exceeds the {budget:.4e} budget"
            );
        }
        let cross_budget =
            3.0 * (real_trace(&expected_typical) * real_trace(&expected_other)).sqrt()
                / (draws as f64).sqrt();
        assert!(
            frobenius(&cov_cross) <= cross_budget,
            "rows of different blocks must be uncorrelated \
             ({:.4e} vs budget {cross_budget:.4e})",
            frobenius(&cov_cross)
        );
    }

    #[test]
    fn zero_pilot_power_leaves_only_noise() {
        let net = two_cell_net();
        let model = reference_model();
        let alloc = PilotAllocation::from_groups(2, 2, net.typical_bs(), vec![0, 1])
            .expect("block assignment should validate");
        let powers = PowerProfile::from_powers(
            1.0,
            1.0,
            1.0,
            vec![1.0; net.num_ues()],
            vec![0.0; net.num_ues()],
        )
        .expect("explicit powers should validate");
        let m = 4usize;
        let est = ChannelEstimator::new(
            &net,
            &model,
            ChannelCorrelation::Uncorrelated,
            m,
            &alloc,
            &powers,
        )
        .expect("estimator construction should succeed");
        let tau = est.tau_p() as f64;

        let draws = 10_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cov = Array2::<Complex64>::zeros((m, m));
        for _ in 0..draws {
            let fading = est.draw_channels(&mut rng);
            let obs = est.synthesize_observation(&fading, &mut rng);
            let est_out = est.estimate(&obs).expect("estimation should succeed");
            assert_eq!(
                est_out
                    .estimates()
                    .iter()
                    .map(|v| v.norm_sqr())
                    .sum::<f64>(),
                0.0,
                "zero pilot power must produce exactly zero estimates"
            );
            let y = obs.row(0);
            for a in 0..m {
                for b in 0..m {
                    cov[(a, b)] += y[a] * y[b].conj();
                }
            }
        }
        cov.mapv_inplace(|v| v / draws as f64);
        let mut expected = Array2::<Complex64>::zeros((m, m));
        for d in 0..m {
            expected[(d, d)] = Complex64::from(tau);
        }
        let diff = &cov - &expected;
        assert!(
            frobenius(&diff) <= 3.0 * tau * m as f64 / (draws as f64).sqrt(),
            "with no pilot energy the observation must be pure noise of covariance tau_p * I"
        );
    }

    #[test]
    fn single_shared_cell_estimate_matches_scalar_filter() {
        let net = two_cell_net();
        let (est, powers, _alloc) =
            estimator_for(&net, ChannelCorrelation::Uncorrelated, 8, 2, vec![0, 1]);
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fading = est.draw_channels(&mut rng);
        let obs = est.synthesize_observation(&fading, &mut rng);
        let out = est.estimate(&obs).expect("estimation should succeed");

        let tau = est.tau_p() as f64;
        let snr_tr = powers.rho_tr();
        for k in 0..net.k_users() {
            let u = net.ue_index(net.typical_bs(), k);
            let beta = model
                .path_gain_km(net.serving_distance_km(net.typical_bs(), k))
                .expect("serving gain should evaluate");
            // Direct filter: sqrt(p) * beta / (tau_p * p * beta + sigma^2).
            let coef = powers.pilot_power(u).sqrt() * beta
                / (tau * powers.pilot_power(u) * beta + est.sigma2());
            // Scalar special case of the estimator: with isotropic fading and
            // inverted pilot power the gain reduces to
            // sqrt(beta * rho_tr) / (tau_p * rho_tr + 1).
            let closed = (beta * snr_tr).sqrt() / (tau * snr_tr + 1.0);
            assert!(
                (coef / closed - 1.0).abs() < 1e-12,
                "the two scalar filter forms must agree"
            );
            let h_hat = out.estimate(net.typical_bs(), k);
            for (a, &hv) in h_hat.iter().enumerate() {
                let direct = obs[(k, a)] * coef;
                assert!(
                    (hv - direct).norm() <= 1e-10 * direct.norm().max(1e-30),
                    "matrix estimator must reduce to the scalar filter, user {k} antenna {a}"
                );
            }
        }
    }

    #[test]
    fn high_pilot_power_recovers_the_channel() {
        let net = two_cell_net();
        let model = reference_model();
        let alloc = PilotAllocation::from_groups(2, 2, net.typical_bs(), vec![0, 1])
            .expect("block assignment should validate");
        let powers = PowerProfile::channel_inversion(&net, &model, 5.0, 80.0)
            .expect("channel inversion should succeed");
        let est = ChannelEstimator::new(
            &net,
            &model,
            ChannelCorrelation::Uncorrelated,
            8,
            &alloc,
            &powers,
        )
        .expect("estimator construction should succeed");
        for k in 0..net.k_users() {
            let nmse = est.nmse_exact(k).expect("NMSE should evaluate");
            assert!(
                nmse >= 0.0 && nmse <= 1e-8,
                "at 80 dB pilot SNR the conditional NMSE should be negligible, got {nmse:.3e}"
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fading = est.draw_channels(&mut rng);
        let obs = est.synthesize_observation(&fading, &mut rng);
        let out = est.estimate(&obs).expect("estimation should succeed");
        for k in 0..net.k_users() {
            let h = fading.channel(net.typical_bs(), k);
            let h_hat = out.estimate(net.typical_bs(), k);
            let err: f64 = h
                .iter()
                .zip(h_hat.iter())
                .map(|(&a, &b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            let norm: f64 = h.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!(
                err <= 1e-3 * norm,
                "estimate should recover the channel at overwhelming pilot SNR \
                 (relative error {:.3e})",
                err / norm
            );
        }
    }

    #[test]
    fn estimate_statistics_match_their_covariances() {
        let net = two_cell_net();
        let spread = 20f64.to_radians();
        let (est, _powers, _alloc) = estimator_for(
            &net,
            ChannelCorrelation::OneRing { spread },
            4,
            1,
            vec![0, 0],
        );
        let m = est.m_antennas();
        let k = 0usize;
        let cell = net.typical_bs();
        let phi = est
            .estimate_cross_correlation(net.typical_bs(), net.typical_bs(), k)
            .expect("estimate covariance should evaluate");
        let c = est
            .error_covariance(net.typical_bs(), k)
            .expect("error covariance should evaluate");

        let draws = 10_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cov_hat = Array2::<Complex64>::zeros((m, m));
        let mut cross = Array2::<Complex64>::zeros((m, m));
        for _ in 0..draws {
            let fading = est.draw_channels(&mut rng);
            let obs = est.synthesize_observation(&fading, &mut rng);
            let out = est.estimate(&obs).expect("estimation should succeed");
            let h = fading.channel(cell, k);
            let h_hat = out.estimate(cell, k);
            for a in 0..m {
                let tilde_a = h[a] - h_hat[a];
                for b in 0..m {
                    cov_hat[(a, b)] += h_hat[a] * h_hat[b].conj();
                    cross[(a, b)] += tilde_a * h_hat[b].conj();
                }
            }
        }
        cov_hat.mapv_inplace(|v| v / draws as f64);
        cross.mapv_inplace(|v| v / draws as f64);

        let diff = &cov_hat - &phi;
        let budget = 3.0 * real_trace(&phi) / (draws as f64).sqrt();
        assert!(
            frobenius(&diff) <= budget,
            "sample covariance of estimates should match the closed form \
             ({:.4e} vs budget {budget:.4e})",
            frobenius(&diff)
        );
        let ortho_budget = 3.0 * (real_trace(&c) * real_trace(&phi) / draws as f64).sqrt();
        assert!(
            frobenius(&cross) <= ortho_budget,
            "estimation error must be uncorrelated with the estimate \
             ({:.4e} vs budget {ortho_budget:.4e})",
            frobenius(&cross)
        );
    }

    #[test]
    fn error_covariance_is_hermitian_psd_and_bounded() {
        let net = two_cell_net();
        let spread = 10f64.to_radians();
        let (est, _powers, _alloc) = estimator_for(
            &net,
            ChannelCorrelation::OneRing { spread },
            6,
            1,
            vec![0, 0],
        );
        for k in 0..net.k_users() {
            let c = est
                .error_covariance(net.typical_bs(), k)
                .expect("error covariance should evaluate");
            let r = est.correlation_matrix(net.typical_bs(), k);
            for a in 0..6 {
                for b in 0..6 {
                    assert!(
                        (c[(a, b)] - c[(b, a)].conj()).norm() < 1e-15,
                        "error covariance must be Hermitian"
                    );
                }
            }
            let (vals, _) = c.eigh(UPLO::Lower).expect("eigendecomposition should succeed");
            let floor = -1e-10 * real_trace(&r);
            assert!(
                vals.iter().all(|&v| v >= floor),
                "error covariance must be positive semidefinite (min eigenvalue {:.3e})",
                vals.iter().cloned().fold(f64::INFINITY, f64::min)
            );
            assert!(
                real_trace(&c) <= real_trace(&r) * (1.0 + 1e-12),
                "estimation cannot increase uncertainty"
            );
            let nmse = est.nmse_exact(k).expect("NMSE should evaluate");
            let direct = real_trace(&c) / real_trace(&r);
            assert!(
                (nmse - direct).abs() < 1e-9,
                "factored NMSE {nmse:.12} must agree with the dense-trace route {direct:.12}"
            );
        }
    }

    #[test]
    fn estimator_rejects_mismatched_inputs() {
        let net = two_cell_net();
        let model = reference_model();
        let alloc = PilotAllocation::from_sharing(1, 2, net.typical_bs(), vec![true, true])
            .expect("sharing pattern should validate");
        let powers = PowerProfile::channel_inversion(&net, &model, 5.0, 15.0)
            .expect("channel inversion should succeed");
        let err = ChannelEstimator::new(
            &net,
            &model,
            ChannelCorrelation::Uncorrelated,
            0,
            &alloc,
            &powers,
        )
        .expect_err("zero antennas must be rejected");
        assert!(matches!(err, Error::Validation(_)));

        let bad_alloc = PilotAllocation::from_sharing(1, 3, 0, vec![true, true])
            .expect("pattern itself is fine");
        let err = ChannelEstimator::new(
            &net,
            &model,
            ChannelCorrelation::Uncorrelated,
            4,
            &bad_alloc,
            &powers,
        )
        .expect_err("user-count mismatch must be rejected");
        assert!(matches!(err, Error::Validation(_)));

        let bad_powers =
            PowerProfile::from_powers(1.0, 2.0, 1.0, vec![1.0; 3], vec![1.0; 3]).unwrap();
        let err = ChannelEstimator::new(
            &net,
            &model,
            ChannelCorrelation::Uncorrelated,
            4,
            &alloc,
            &bad_powers,
        )
        .expect_err("power-length mismatch must be rejected");
        assert!(matches!(err, Error::Validation(_)));

        let (est, ..) = estimator_for(&net, ChannelCorrelation::Uncorrelated, 4, 1, vec![0, 0]);
        let err = est
            .estimate(&Array2::zeros((2, 5)))
            .expect_err("wrong observation shape must be rejected");
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn cross_block_estimates_are_uncorrelated() {
        let net = two_cell_net();
        let spread = 15f64.to_radians();
        let (est, ..) = estimator_for(
            &net,
            ChannelCorrelation::OneRing { spread },
            4,
            2,
            vec![0, 1],
        );
        let m = est.m_antennas();
        let other = 1 - net.typical_bs();
        let phi = est
            .estimate_cross_correlation(net.typical_bs(), other, 0)
            .expect("cross-correlation should evaluate");
        assert!(
            phi.iter().all(|v| *v == Complex64::ZERO),
            "estimates on different pilot blocks must have zero cross-correlation"
        );

        let draws = 5_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cross = Array2::<Complex64>::zeros((m, m));
        for _ in 0..draws {
            let fading = est.draw_channels(&mut rng);
            let obs = est.synthesize_observation(&fading, &mut rng);
            let out = est.estimate(&obs).expect("estimation should succeed");
            let a = out.estimate(net.typical_bs(), 0);
            let b = out.estimate(other, 0);
            for r in 0..m {
                for c in 0..m {
                    cross[(r, c)] += a[r] * b[c].conj();
                }
            }
        }
        cross.mapv_inplace(|v| v / draws as f64);
        let ta = real_trace(
            &est.estimate_cross_correlation(net.typical_bs(), net.typical_bs(), 0)
                .expect("estimate covariance should evaluate"),
        );
        let tb = real_trace(
            &est.estimate_cross_correlation(other, other, 0)
                .expect("estimate covariance should evaluate"),
        );
        let budget = 3.0 * (ta * tb / draws as f64).sqrt();
        assert!(
            frobenius(&cross) <= budget,
            "sample cross-correlation across blocks should vanish \
             ({:.4e} vs budget {budget:.4e})",
            frobenius(&cross)
        );
    }

    #[test]
    fn nmse_matches_direct_scalar_formula() {
        let net = NetworkRealization::sample(100.0, 3, 1.0, 13).expect("sampling should succeed");
        let model = reference_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let alloc = allocate_pilots(&net, 1, &mut rng).expect("allocation should succeed");
        let powers = PowerProfile::channel_inversion(&net, &model, 5.0, 15.0)
            .expect("channel inversion should succeed");
        let est = ChannelEstimator::new(
            &net,
            &model,
            ChannelCorrelation::Uncorrelated,
            16,
            &alloc,
            &powers,
        )
        .expect("estimator construction should succeed");

        let tau = alloc.tau_p() as f64;
        let j = net.typical_bs();
        for k in 0..net.k_users() {
            // Independent scalar route: NMSE = 1 - tau_p p beta / q with
            // q = tau_p * sum of sharing pilot powers times their gains + 1.
            let mut q = powers.sigma2();
            for l in alloc.sharing_cells() {
                let u = net.ue_index(l, k);
                let beta = model
                    .path_gain_km(net.distance_km(l, k, j))
                    .expect("gain should evaluate");
                q += tau * powers.pilot_power(u) * beta;
            }
            let u = net.ue_index(j, k);
            let beta = model
                .path_gain_km(net.distance_km(j, k, j))
                .expect("gain should evaluate");
            let oracle = 1.0 - tau * powers.pilot_power(u) * beta / q;
            let nmse = est.nmse_exact(k).expect("NMSE should evaluate");
            assert!(
                (nmse - oracle).abs() < 1e-10,
                "matrix-path NMSE {nmse:.14} must match the scalar oracle {oracle:.14}"
            );
            assert!(
                (-1e-12..=1.0 + 1e-12).contains(&nmse),
                "NMSE must lie in [0, 1]"
            );
        }
    }

    #[test]
    fn residual_covariance_matches_direct_assembly() {
        let net = two_cell_net();
        for correlation in [
            ChannelCorrelation::OneRing {
                spread: 10f64.to_radians(),
            },
            ChannelCorrelation::Uncorrelated,
        ] {
            for (zeta, groups) in [(1u32, vec![0u32, 0]), (2, vec![0, 1])] {
                let (est, _powers, _alloc) =
                    estimator_for(&net, correlation, 6, zeta, groups);
                let m = est.m_antennas();
                let z = est
                    .residual_covariance()
                    .expect("residual covariance should evaluate");

                // Direct assembly through the dense error-covariance route:
                // sigma^2 I plus every user's data-power-weighted error
                // covariance, each computed against its own block's
                // observation covariance.
                let mut direct = Array2::<Complex64>::zeros((m, m));
                for d in 0..m {
                    direct[(d, d)] = Complex64::from(est.sigma2());
                }
                for l in 0..est.num_cells() {
                    for i in 0..est.k_users() {
                        let c = est
                            .error_covariance(l, i)
                            .expect("error covariance should evaluate");
                        direct.scaled_add(Complex64::from(est.data_power(l, i)), &c);
                    }
                }
                let diff = &z - &direct;
                assert!(
                    frobenius(&diff) <= 1e-8 * frobenius(&direct),
                    "factored residual covariance must match the dense assembly"
                );
                let (vals, _) = z.eigh(UPLO::Lower).expect("eigendecomposition should succeed");
                assert!(
                    vals.iter().all(|&v| v >= est.sigma2() * (1.0 - 1e-9)),
                    "residual covariance cannot drop below the noise floor"
                );
            }
        }
    }

    #[test]
    fn single_cell_residual_keeps_other_cells_whole() {
        let net = two_cell_net();
        let spread = 10f64.to_radians();
        let (est, _powers, _alloc) = estimator_for(
            &net,
            ChannelCorrelation::OneRing { spread },
            6,
            1,
            vec![0, 0],
        );
        let m = est.m_antennas();
        let z = est
            .single_cell_residual_covariance()
            .expect("single-cell residual should evaluate");
        let mut direct = Array2::<Complex64>::zeros((m, m));
        for d in 0..m {
            direct[(d, d)] = Complex64::from(est.sigma2());
        }
        let other = 1 - est.typical_cell();
        for i in 0..est.k_users() {
            let r = est.correlation_matrix(other, i);
            direct.scaled_add(Complex64::from(est.data_power(other, i)), &r);
            let c = est
                .error_covariance(est.typical_cell(), i)
                .expect("error covariance should evaluate");
            direct.scaled_add(Complex64::from(est.data_power(est.typical_cell(), i)), &c);
        }
        let diff = &z - &direct;
        assert!(
            frobenius(&diff) <= 1e-10 * frobenius(&direct),
            "single-cell residual must treat other cells' users statistically"
        );
        let (vals, _) = z.eigh(UPLO::Lower).expect("eigendecomposition should succeed");
        assert!(
            vals.iter().all(|&v| v >= est.sigma2() * (1.0 - 1e-9)),
            "residual covariance cannot drop below the noise floor"
        );
    }

    #[test]
    fn nmse_montecarlo_orders_correlation_models() {
        let base = EstimationScenario {
            lambda_per_km2: 50.0,
            k_users: 4,
            m_antennas: 24,
            zeta: 2,
            snr0_db: 5.0,
            snr_tr_db: 15.0,
            correlation: ChannelCorrelation::Uncorrelated,
            model: reference_model(),
            window_side_km: None,
        };
        let trials = 120;
        let run = |correlation| {
            let scenario = EstimationScenario {
                correlation,
                ..base.clone()
            };
            nmse_montecarlo(&scenario, trials, 17).expect("NMSE Monte Carlo should succeed")
        };
        let narrow = run(ChannelCorrelation::OneRing {
            spread: 5f64.to_radians(),
        });
        let wide = run(ChannelCorrelation::OneRing {
            spread: 10f64.to_radians(),
        });
        let iso = run(ChannelCorrelation::Uncorrelated);
        for e in [&narrow, &wide, &iso] {
            assert_eq!(e.failures, 0, "no trial should fail at these sizes");
            assert_eq!(e.trials, trials);
            assert!(e.mean > 0.0 && e.mean < 1.0, "NMSE mean must be interior");
            assert!(e.ci_half_width > 0.0);
        }
        assert!(
            narrow.mean <= wide.mean + narrow.ci_half_width + wide.ci_half_width,
            "narrower scattering must not estimate worse: {:.4} vs {:.4}",
            narrow.mean,
            wide.mean
        );
        assert!(
            wide.mean <= iso.mean + wide.ci_half_width + iso.ci_half_width,
            "correlated fading must not estimate worse than isotropic: {:.4} vs {:.4}",
            wide.mean,
            iso.mean
        );
    }

    #[test]
    fn nmse_montecarlo_validates_trial_count() {
        let scenario = EstimationScenario {
            lambda_per_km2: 50.0,
            k_users: 2,
            m_antennas: 8,
            zeta: 1,
            snr0_db: 5.0,
            snr_tr_db: 15.0,
            correlation: ChannelCorrelation::Uncorrelated,
            model: reference_model(),
            window_side_km: None,
        };
        let err = nmse_montecarlo(&scenario, 99, 1).expect_err("too few trials must be rejected");
        assert!(matches!(err, Error::Validation(_)));
    }
}
