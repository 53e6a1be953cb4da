//! End-to-end Monte Carlo estimation: network draws feed pilot allocation,
//! power control, channel estimation, and combining, and come back out as
//! spectral-efficiency records with confidence intervals.
//!
//! Determinism is a contract here. Every trial runs on its own counter
//! stream of the scenario's master seed, derived from the scenario and trial
//! indices alone, and trial results are reduced in index order. Results are
//! therefore identical across thread counts and across repeated runs — and
//! because combiner construction consumes no randomness, different combining
//! schemes evaluated under the same seed see the *same* networks and fading,
//! which keeps scheme comparisons tightly paired.

use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::combining::{
    build_combiner, instantaneous_sinr, ratio_db, CombinerWorkspace, CombiningScheme,
};
use crate::error::{Error, Result};
use crate::geometry::{default_window_side_km, NetworkRealization};
use crate::propagation::MultiSlopeModel;
use crate::uplink::{
    allocate_pilots, ChannelCorrelation, ChannelEstimator, EstimationScenario, PowerProfile,
};

/// 95% two-sided normal quantile, used for confidence half-widths.
const CI_FACTOR: f64 = 1.959_963_984_540_054;

/// One simulated operating point: deployment density, array size, pilot
/// reuse, correlation model, power control, coherence block, and the
/// sampling budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    /// Base-station density per km^2.
    pub lambda_per_km2: f64,
    pub m_antennas: usize,
    pub k_users: usize,
    /// Pilot reuse factor; the pilot block spans `zeta * k_users` samples.
    pub zeta: u32,
    /// Angular spread in degrees for locally scattered channels; `None`
    /// selects isotropic (uncorrelated) fading.
    pub delta_deg: Option<f64>,
    pub snr0_db: f64,
    pub snr_tr_db: f64,
    /// Coherence block length in samples.
    pub tau_c: usize,
    pub model: MultiSlopeModel,
    /// Independent network/pilot draws.
    pub trials: usize,
    /// Fading redraws per network draw.
    pub fading_redraws: usize,
    pub master_seed: u64,
    /// Simulation window override; defaults to a density-dependent side
    /// that keeps the expected cell count constant.
    pub window_side_km: Option<f64>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_per_km2.is_finite() || self.lambda_per_km2 <= 0.0 {
            return Err(Error::validation(format!(
                "density must be positive and finite, got {}",
                self.lambda_per_km2
            )));
        }
        if self.m_antennas == 0 || self.k_users == 0 || self.zeta == 0 {
            return Err(Error::validation(
                "antennas, users per cell, and pilot reuse must all be at least 1",
            ));
        }
        if !self.snr0_db.is_finite() || !self.snr_tr_db.is_finite() {
            return Err(Error::validation("SNR targets must be finite"));
        }
        if let Some(delta) = self.delta_deg {
            if !delta.is_finite() || delta < 0.0 {
                return Err(Error::validation(format!(
                    "angular spread must be nonnegative and finite, got {delta}"
                )));
            }
        }
        if self.tau_p() > self.tau_c {
            return Err(Error::validation(format!(
                "pilot block of {} samples does not fit the coherence block of {}",
                self.tau_p(),
                self.tau_c
            )));
        }
        if self.trials == 0 {
            return Err(Error::validation("need at least one trial"));
        }
        if self.fading_redraws < 2 {
            return Err(Error::validation(
                "need at least 2 fading redraws per trial to estimate fading averages",
            ));
        }
        if let Some(side) = self.window_side_km {
            if !side.is_finite() || side <= 0.0 {
                return Err(Error::validation(format!(
                    "window side must be positive and finite, got {side}"
                )));
            }
        }
        Ok(())
    }

    /// Pilot block length `zeta * k_users`.
    pub fn tau_p(&self) -> usize {
        self.zeta as usize * self.k_users
    }

    /// Fraction of the coherence block left for data.
    pub fn prelog(&self) -> f64 {
        1.0 - self.tau_p() as f64 / self.tau_c as f64
    }

    pub fn correlation(&self) -> ChannelCorrelation {
        match self.delta_deg {
            Some(delta) => ChannelCorrelation::OneRing {
                spread: delta.to_radians(),
            },
            None => ChannelCorrelation::Uncorrelated,
        }
    }

    fn window_side(&self) -> f64 {
        self.window_side_km
            .unwrap_or_else(|| default_window_side_km(self.lambda_per_km2))
    }

    /// The estimation-only view of this scenario, for NMSE runs and
    /// interference decompositions that manage their own sampling budgets.
    pub fn estimation(&self) -> EstimationScenario {
        EstimationScenario {
            lambda_per_km2: self.lambda_per_km2,
            k_users: self.k_users,
            m_antennas: self.m_antennas,
            zeta: self.zeta,
            snr0_db: self.snr0_db,
            snr_tr_db: self.snr_tr_db,
            correlation: self.correlation(),
            model: self.model.clone(),
            window_side_km: Some(self.window_side()),
        }
    }
}

/// One (scenario, scheme) result row.
///
/// `ase_per_km2` is `lambda * K * se_per_ue` by construction. The
/// interference powers are per own-cell user under unit-norm combiners,
/// linear relative to the noise floor. `wall_time_s` is informational and
/// never part of serialized output, which must be reproducible.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub scenario: Scenario,
    pub scheme: CombiningScheme,
    /// Spectral efficiency per user in bit/s/Hz, prelog included.
    pub se_per_ue: f64,
    pub se_ci_half_width: f64,
    /// Area spectral efficiency in bit/s/Hz/km^2.
    pub ase_per_km2: f64,
    /// Average exact estimation NMSE of the typical cell's users.
    pub nmse: f64,
    pub coherent_per_user: f64,
    pub non_coherent_per_user: f64,
    /// Trials that contributed (failures excluded).
    pub trials: usize,
    pub failures: usize,
    pub wall_time_s: f64,
}

impl ResultRecord {
    pub fn coherent_per_user_db(&self) -> f64 {
        ratio_db(self.coherent_per_user)
    }

    pub fn non_coherent_per_user_db(&self) -> f64 {
        ratio_db(self.non_coherent_per_user)
    }

    pub fn coherent_cell_db(&self) -> f64 {
        ratio_db(self.coherent_per_user * self.scenario.k_users as f64)
    }

    pub fn non_coherent_cell_db(&self) -> f64 {
        ratio_db(self.non_coherent_per_user * self.scenario.k_users as f64)
    }

    /// Equality up to the informational wall time, for reproducibility
    /// checks.
    pub fn same_results(&self, other: &ResultRecord) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.wall_time_s = 0.0;
        b.wall_time_s = 0.0;
        a == b
    }
}

/// Estimate the conditional-bound spectral efficiency under one combining
/// scheme. Equivalent to the matching entry of [`estimate_se_multi`].
pub fn estimate_se(scenario: &Scenario, scheme: CombiningScheme) -> Result<ResultRecord> {
    let mut records = estimate_se_with_index(scenario, &[scheme], 0)?;
    Ok(records.pop().expect("one scheme in, one record out"))
}

/// Estimate the conditional-bound spectral efficiency for several combining
/// schemes over the *same* network and fading draws.
///
/// Per trial: draw a network, pilots, and powers; per fading redraw,
/// estimate channels once and evaluate every scheme's combiner on the same
/// estimates; average `log2(1 + SINR)` over redraws and own-cell users and
/// scale by the prelog. The trial mean is one confidence-interval sample.
/// Interference decompositions accumulate alongside at negligible cost.
pub fn estimate_se_multi(
    scenario: &Scenario,
    schemes: &[CombiningScheme],
) -> Result<Vec<ResultRecord>> {
    estimate_se_with_index(scenario, schemes, 0)
}

fn estimate_se_with_index(
    scenario: &Scenario,
    schemes: &[CombiningScheme],
    scenario_index: usize,
) -> Result<Vec<ResultRecord>> {
    scenario.validate()?;
    if schemes.is_empty() {
        return Err(Error::validation("need at least one combining scheme"));
    }
    let start = Instant::now();
    let window = scenario.window_side();
    let outcomes: Vec<Result<TrialStats>> = (0..scenario.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(scenario.master_seed, scenario_index, t);
            se_trial(scenario, schemes, window, &mut rng)
        })
        .collect();

    let mut stats = Vec::with_capacity(scenario.trials);
    let mut failures = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(s) => stats.push(s),
            Err(Error::Numerical(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if failures * 100 > scenario.trials {
        return Err(Error::numerical(format!(
            "{failures} of {} trials failed numerically",
            scenario.trials
        )));
    }
    let n = stats.len() as f64;
    let nmse = stats.iter().map(|s| s.nmse).sum::<f64>() / n;
    let wall_time_s = start.elapsed().as_secs_f64();
    let k = scenario.k_users as f64;
    let mut records = Vec::with_capacity(schemes.len());
    for (si, &scheme) in schemes.iter().enumerate() {
        let se_samples: Vec<f64> = stats.iter().map(|s| s.se[si]).collect();
        let se = se_samples.iter().sum::<f64>() / n;
        let ci = if stats.len() > 1 {
            let var = se_samples.iter().map(|v| (v - se).powi(2)).sum::<f64>() / (n - 1.0);
            CI_FACTOR * (var / n).sqrt()
        } else {
            f64::NAN
        };
        let coherent_cell = stats.iter().map(|s| s.coherent_cell[si]).sum::<f64>() / n;
        let total_cell = stats.iter().map(|s| s.total_cell[si]).sum::<f64>() / n;
        records.push(ResultRecord {
            scenario: scenario.clone(),
            scheme,
            se_per_ue: se,
            se_ci_half_width: ci,
            ase_per_km2: scenario.lambda_per_km2 * k * se,
            nmse,
            coherent_per_user: coherent_cell / k,
            non_coherent_per_user: (total_cell - coherent_cell) / k,
            trials: stats.len(),
            failures,
            wall_time_s,
        });
    }
    Ok(records)
}

fn trial_rng(master_seed: u64, scenario_index: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((scenario_index as u64) << 32) | (trial as u64 + 1));
    rng
}

struct TrialStats {
    /// Prelogged per-user spectral efficiency, one entry per scheme.
    se: Vec<f64>,
    nmse: f64,
    /// Cell-summed coherent interference (unit-norm combiners), per scheme.
    coherent_cell: Vec<f64>,
    /// Cell-summed total interference (unit-norm combiners), per scheme.
    total_cell: Vec<f64>,
}

fn se_trial<R: Rng + ?Sized>(
    scenario: &Scenario,
    schemes: &[CombiningScheme],
    window: f64,
    rng: &mut R,
) -> Result<TrialStats> {
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
        scenario.correlation(),
        scenario.m_antennas,
        &alloc,
        &powers,
    )?;
    let workspace = CombinerWorkspace::new(&estimator)?;

    let k_users = estimator.k_users();
    let typical = estimator.typical_cell();
    let sigma2 = estimator.sigma2();
    let others: Vec<usize> = estimator
        .sharing_cells()
        .iter()
        .copied()
        .filter(|&cell| cell != typical)
        .collect();

    let mut nmse = 0.0;
    for i in 0..k_users {
        nmse += estimator.nmse_exact(i)?;
    }
    nmse /= k_users as f64;

    let redraws = scenario.fading_redraws;
    let mut se_acc = vec![0.0; schemes.len()];
    let mut totals = vec![0.0; schemes.len() * k_users];
    let mut sums = vec![Complex64::ZERO; schemes.len() * k_users * others.len()];
    let mut squares = vec![0.0; schemes.len() * k_users * others.len()];
    for _ in 0..redraws {
        let draw = estimator.draw_channels(rng);
        let obs = estimator.synthesize_observation(&draw, rng);
        let out = estimator.estimate(&obs)?;
        for (si, &scheme) in schemes.iter().enumerate() {
            let set = build_combiner(scheme, &estimator, &out, &workspace)?;
            for k in 0..k_users {
                let v = set.column(k);
                let sample = instantaneous_sinr(&estimator, &out, workspace.residual(), k, v)?;
                se_acc[si] += (1.0 + sample.sinr).log2();
                // Rescale the interference figures to a unit-norm combiner.
                let norm2 = sample.noise / sigma2;
                totals[si * k_users + k] += sample.interference() / norm2;
                let inv_norm = 1.0 / norm2.sqrt();
                for (o, &cell) in others.iter().enumerate() {
                    let h = out.estimate(cell, k);
                    let x: Complex64 = v
                        .iter()
                        .zip(h.iter())
                        .map(|(a, b)| a.conj() * b * inv_norm)
                        .sum();
                    let idx = (si * k_users + k) * others.len() + o;
                    sums[idx] += x;
                    squares[idx] += x.norm_sqr();
                }
            }
        }
    }

    let n = redraws as f64;
    let prelog = scenario.prelog();
    let mut se = Vec::with_capacity(schemes.len());
    let mut coherent_cell = vec![0.0; schemes.len()];
    let mut total_cell = vec![0.0; schemes.len()];
    for si in 0..schemes.len() {
        se.push(prelog * se_acc[si] / (n * k_users as f64));
        for k in 0..k_users {
            total_cell[si] += totals[si * k_users + k] / n;
            for (o, &cell) in others.iter().enumerate() {
                let idx = (si * k_users + k) * others.len() + o;
                let mean_sq = (sums[idx].norm_sqr() - squares[idx]) / (n * (n - 1.0));
                coherent_cell[si] += estimator.data_power(cell, k) * mean_sq;
            }
        }
    }
    Ok(TrialStats {
        se,
        nmse,
        coherent_cell,
        total_cell,
    })
}

/// Estimate the use-and-then-forget spectral efficiency by simulation, for
/// maximum-ratio or zero-forcing combining in isotropic fading.
///
/// Per trial the network, pilots, and powers are frozen and the fading
/// moments of the bound — the mean combiner response to the served user's
/// true channel, the mean squared responses to every pilot-sharing user, and
/// the mean squared combiner norm — are estimated over fading redraws.
/// Cells outside the typical pilot block contribute their exact conditional
/// moment `sum p beta` times the mean squared norm. The per-trial bound then
/// averages as `log2(1 + SINR)` across own-cell users.
pub fn estimate_uatf_se(scenario: &Scenario, scheme: CombiningScheme) -> Result<ResultRecord> {
    scenario.validate()?;
    if !matches!(
        scheme,
        CombiningScheme::MaximumRatio | CombiningScheme::ZeroForcing
    ) {
        return Err(Error::validation(
            "the use-and-then-forget estimator supports maximum-ratio and zero-forcing only",
        ));
    }
    if scenario.delta_deg.is_some() {
        return Err(Error::validation(
            "the use-and-then-forget estimator requires isotropic (uncorrelated) fading",
        ));
    }
    let start = Instant::now();
    let window = scenario.window_side();
    let outcomes: Vec<Result<(f64, f64)>> = (0..scenario.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(scenario.master_seed, 0, t);
            uatf_trial(scenario, scheme, window, &mut rng)
        })
        .collect();

    let mut se_samples = Vec::with_capacity(scenario.trials);
    let mut nmse_samples = Vec::with_capacity(scenario.trials);
    let mut failures = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok((se, nmse)) => {
                se_samples.push(se);
                nmse_samples.push(nmse);
            }
            Err(Error::Numerical(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    if failures * 100 > scenario.trials {
        return Err(Error::numerical(format!(
            "{failures} of {} trials failed numerically",
            scenario.trials
        )));
    }
    let n = se_samples.len() as f64;
    let se = se_samples.iter().sum::<f64>() / n;
    let ci = if se_samples.len() > 1 {
        let var = se_samples.iter().map(|v| (v - se).powi(2)).sum::<f64>() / (n - 1.0);
        CI_FACTOR * (var / n).sqrt()
    } else {
        f64::NAN
    };
    Ok(ResultRecord {
        scenario: scenario.clone(),
        scheme,
        se_per_ue: se,
        se_ci_half_width: ci,
        ase_per_km2: scenario.lambda_per_km2 * scenario.k_users as f64 * se,
        nmse: nmse_samples.iter().sum::<f64>() / n,
        // This estimator works from true-channel moments; it does not
        // measure the estimate-based interference split.
        coherent_per_user: f64::NAN,
        non_coherent_per_user: f64::NAN,
        trials: se_samples.len(),
        failures,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn uatf_trial<R: Rng + ?Sized>(
    scenario: &Scenario,
    scheme: CombiningScheme,
    window: f64,
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
        scenario.correlation(),
        scenario.m_antennas,
        &alloc,
        &powers,
    )?;
    let workspace = CombinerWorkspace::new(&estimator)?;
    let k_users = estimator.k_users();
    let typical_cell = estimator.typical_cell();
    let sigma2 = estimator.sigma2();

    let mut nmse = 0.0;
    for i in 0..k_users {
        nmse += estimator.nmse_exact(i)?;
    }
    nmse /= k_users as f64;

    // Exact fading moment of every cell outside the typical pilot block:
    // their channels are independent of the combiner, so each contributes
    // its power-weighted average gain times E{||v||^2}.
    let mut unshared_gain = 0.0;
    for cell in 0..estimator.num_cells() {
        if estimator.shares_with_typical(cell) {
            continue;
        }
        for i in 0..k_users {
            unshared_gain += estimator.data_power(cell, i) * estimator.channel_gain(cell, i);
        }
    }

    let redraws = scenario.fading_redraws;
    let sharing = estimator.sharing_cells();
    let mut own_sum = vec![Complex64::ZERO; k_users];
    let mut own_square = vec![0.0; k_users];
    let mut cross_mean = vec![0.0; k_users];
    let mut norm2_mean = vec![0.0; k_users];
    for _ in 0..redraws {
        let draw = estimator.draw_channels(rng);
        let obs = estimator.synthesize_observation(&draw, rng);
        let out = estimator.estimate(&obs)?;
        let set = build_combiner(scheme, &estimator, &out, &workspace)?;
        for k in 0..k_users {
            let v = set.column(k);
            norm2_mean[k] += v.iter().map(|x| x.norm_sqr()).sum::<f64>();
            for &cell in sharing {
                for i in 0..k_users {
                    let h = draw.channel(cell, i);
                    let x: Complex64 = v.iter().zip(h.iter()).map(|(a, b)| a.conj() * b).sum();
                    if cell == typical_cell && i == k {
                        own_sum[k] += x;
                        own_square[k] += x.norm_sqr();
                    }
                    cross_mean[k] += estimator.data_power(cell, i) * x.norm_sqr();
                }
            }
        }
    }

    let n = redraws as f64;
    let mut se_acc = 0.0;
    for k in 0..k_users {
        let p = estimator.data_power(typical_cell, k);
        // Unbiased |E{v^H h}|^2, with the served user's own squared response
        // already counted inside the cross sum.
        let coherent = p * (own_sum[k].norm_sqr() - own_square[k]) / (n * (n - 1.0));
        let cross = cross_mean[k] / n;
        let norm2 = norm2_mean[k] / n;
        let denominator = cross - coherent + (unshared_gain + sigma2) * norm2;
        if !(denominator > 0.0) {
            return Err(Error::numerical(format!(
                "nonpositive interference-plus-noise moment {denominator}"
            )));
        }
        se_acc += (1.0 + coherent / denominator).log2();
    }
    Ok((scenario.prelog() * se_acc / k_users as f64, nmse))
}

/// Outcome of a scenario grid: successful records in grid-major order
/// (schemes innermost), plus the scenarios that failed numerically.
#[derive(Clone, Debug)]
pub struct SweepReport {
    pub records: Vec<ResultRecord>,
    pub failures: Vec<SweepFailure>,
}

/// A scenario that had to be abandoned mid-sweep.
#[derive(Clone, Debug)]
pub struct SweepFailure {
    pub scenario_index: usize,
    pub message: String,
}

/// Run every scenario of a grid under every scheme.
///
/// All scenarios are validated before any work starts. Numerical scenario
/// failures are recorded and skipped so the rest of the grid still
/// completes; each scenario seeds its trials from its own master seed and
/// grid position, so records do not depend on which other scenarios ran.
pub fn sweep(scenarios: &[Scenario], schemes: &[CombiningScheme]) -> Result<SweepReport> {
    if scenarios.is_empty() {
        return Err(Error::validation("scenario grid is empty"));
    }
    if schemes.is_empty() {
        return Err(Error::validation("need at least one combining scheme"));
    }
    for (i, scenario) in scenarios.iter().enumerate() {
        scenario
            .validate()
            .map_err(|e| Error::validation(format!("scenario {i}: {e}")))?;
    }
    let mut records = Vec::with_capacity(scenarios.len() * schemes.len());
    let mut failures = Vec::new();
    for (i, scenario) in scenarios.iter().enumerate() {
        match estimate_se_with_index(scenario, schemes, i) {
            Ok(mut batch) => records.append(&mut batch),
            Err(Error::Numerical(msg)) => failures.push(SweepFailure {
                scenario_index: i,
                message: msg,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(SweepReport { records, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scenario() -> Scenario {
        Scenario {
            lambda_per_km2: 30.0,
            m_antennas: 6,
            k_users: 2,
            zeta: 1,
            delta_deg: None,
            snr0_db: 5.0,
            snr_tr_db: 15.0,
            tau_c: 200,
            model: MultiSlopeModel::dual_slope_reference(),
            trials: 4,
            fading_redraws: 3,
            master_seed: 99,
            window_side_km: Some(1.5),
        }
    }

    #[test]
    fn scenario_validation_catches_bad_inputs() {
        let mut s = small_scenario();
        s.zeta = 101;
        assert!(
            matches!(s.validate(), Err(Error::Validation(_))),
            "pilot block longer than the coherence block should be rejected"
        );
        let mut s = small_scenario();
        s.trials = 0;
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        let mut s = small_scenario();
        s.fading_redraws = 1;
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        let mut s = small_scenario();
        s.delta_deg = Some(f64::NAN);
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        let mut s = small_scenario();
        s.lambda_per_km2 = -3.0;
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        assert!(small_scenario().validate().is_ok());
    }

    #[test]
    fn pilot_saturated_block_yields_zero_se() {
        let mut scenario = small_scenario();
        scenario.tau_c = scenario.tau_p();
        let record = estimate_se(&scenario, CombiningScheme::MaximumRatio)
            .expect("estimation should succeed");
        assert_eq!(
            record.se_per_ue, 0.0,
            "no data samples should mean zero spectral efficiency"
        );
        assert_eq!(record.ase_per_km2, 0.0);
        assert!(
            record.nmse > 0.0 && record.nmse < 1.0,
            "estimation quality is unaffected by the prelog, got {}",
            record.nmse
        );
    }

    #[test]
    fn ase_identity_and_db_accessors_hold() {
        let scenario = small_scenario();
        let record =
            estimate_se(&scenario, CombiningScheme::ZeroForcing).expect("estimation should run");
        assert_eq!(
            record.ase_per_km2,
            scenario.lambda_per_km2 * scenario.k_users as f64 * record.se_per_ue,
            "area spectral efficiency must be density times users times per-user SE"
        );
        assert!(record.se_per_ue > 0.0, "nontrivial scenario should have positive SE");
        assert!(record.se_ci_half_width.is_finite());
        let gap = record.coherent_cell_db() - record.coherent_per_user_db();
        assert!(
            (gap - 10.0 * 2f64.log10()).abs() < 1e-9,
            "cell and per-user interference differ by 10 log10(K), got {gap}"
        );
    }

    #[test]
    fn single_point_sweep_matches_the_direct_estimate() {
        let scenario = small_scenario();
        let schemes = [CombiningScheme::MaximumRatio, CombiningScheme::MulticellMmse];
        let report = sweep(&[scenario.clone()], &schemes).expect("sweep should run");
        assert!(report.failures.is_empty());
        assert_eq!(report.records.len(), 2);
        let direct = estimate_se_multi(&scenario, &schemes).expect("direct estimate should run");
        for (swept, direct) in report.records.iter().zip(direct.iter()) {
            assert!(
                swept.same_results(direct),
                "a one-point sweep must reproduce the direct estimate exactly"
            );
        }
    }

    #[test]
    fn results_are_independent_of_thread_count() {
        let scenario = small_scenario();
        let schemes = [CombiningScheme::MaximumRatio, CombiningScheme::ZeroForcing];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool should build");
            pool.install(|| estimate_se_multi(&scenario, &schemes).expect("estimate should run"))
        };
        let serial = run(1);
        let parallel = run(2);
        for (a, b) in serial.iter().zip(parallel.iter()) {
            assert!(
                a.same_results(b),
                "records must not depend on the thread count: {a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn schemes_share_the_random_tape() {
        // The multi-scheme runner and repeated single-scheme runs must see
        // identical draws, so their records agree bit for bit.
        let scenario = small_scenario();
        let multi = estimate_se_multi(
            &scenario,
            &[CombiningScheme::MaximumRatio, CombiningScheme::SingleCellMmse],
        )
        .expect("multi estimate should run");
        let single = estimate_se(&scenario, CombiningScheme::SingleCellMmse)
            .expect("single estimate should run");
        assert!(
            multi[1].same_results(&single),
            "scheme order must not change the draws a scheme sees"
        );
    }

    #[test]
    fn uatf_bound_stays_below_the_conditional_bound() {
        let mut scenario = small_scenario();
        scenario.m_antennas = 8;
        scenario.trials = 30;
        scenario.fading_redraws = 30;
        for scheme in [CombiningScheme::MaximumRatio, CombiningScheme::ZeroForcing] {
            let loose = estimate_uatf_se(&scenario, scheme).expect("bound should estimate");
            let tight = estimate_se(&scenario, scheme).expect("bound should estimate");
            let slack = 2.0 * (loose.se_ci_half_width + tight.se_ci_half_width);
            assert!(
                loose.se_per_ue <= tight.se_per_ue + slack,
                "{}: forgetting the estimates cannot help: {} vs {}",
                scheme.label(),
                loose.se_per_ue,
                tight.se_per_ue
            );
            assert!(loose.se_per_ue > 0.0);
        }
    }

    #[test]
    fn uatf_estimator_rejects_unsupported_inputs() {
        let scenario = small_scenario();
        let err = estimate_uatf_se(&scenario, CombiningScheme::MulticellMmse)
            .expect_err("MMSE schemes have no moment closed form to validate");
        assert!(matches!(err, Error::Validation(_)));
        let mut correlated = small_scenario();
        correlated.delta_deg = Some(10.0);
        let err = estimate_uatf_se(&correlated, CombiningScheme::MaximumRatio)
            .expect_err("correlated fading is out of scope for this estimator");
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn sweep_validates_before_running() {
        let good = small_scenario();
        let mut bad = small_scenario();
        bad.trials = 0;
        let err = sweep(
            &[good, bad],
            &[CombiningScheme::MaximumRatio],
        )
        .expect_err("any invalid scenario should fail the whole sweep upfront");
        assert!(matches!(err, Error::Validation(_)));
        let err = sweep(&[], &[CombiningScheme::MaximumRatio])
            .expect_err("an empty grid should be rejected");
        assert!(matches!(err, Error::Validation(_)));
    }
}
