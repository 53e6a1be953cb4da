//! Subcommand implementations. Each command validates its inputs fully
//! before creating the output file, so a bad grid never leaves an empty or
//! truncated artifact behind.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use densemimo::analytic::{
    asymptotic_rate, dominance_threshold, nmse_upper_bound_value, optimal_zeta_asymptotic,
    uatf_se, uatf_sinr, MomentPair, UatfInputs, UatfScheme,
};
use densemimo::combining::{
    build_combiner, instantaneous_sinr, CombinerWorkspace, CombiningScheme,
};
use densemimo::geometry::NetworkRealization;
use densemimo::montecarlo::{estimate_se, sweep, Scenario};
use densemimo::propagation::MultiSlopeModel;
use densemimo::specfun::{lambert_w0, upper_incomplete_gamma};
use densemimo::uplink::{
    allocate_pilots, ChannelCorrelation, ChannelEstimator, PowerProfile,
};
use densemimo::{Error, Result};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AnalyticConfig, RunConfig, FORMAT_VERSION};
use crate::report::{
    model_echo, write_analytic_rows, write_metadata, write_simulation_rows, AnalyticRow,
};

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub trials: Option<usize>,
}

/// Effective output target: the `--out` flag wins over the config file, and
/// `-` (or nothing at all) selects stdout.
fn output_target<'a>(config: &'a RunConfig, overrides: &'a Overrides) -> Option<&'a Path> {
    overrides
        .out
        .as_deref()
        .or(config.out.as_deref())
        .filter(|p| p.as_os_str() != "-")
}

fn write_output<F>(target: Option<&Path>, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    match target {
        Some(path) => {
            let file = File::create(path)?;
            let mut w = BufWriter::new(file);
            body(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            body(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Closed-form sweep over a density and reuse-factor grid.
pub fn cmd_analytic(config: &RunConfig, overrides: &Overrides) -> Result<()> {
    let section = config
        .analytic
        .as_ref()
        .ok_or_else(|| Error::validation("the config has no [analytic] section"))?;
    let model = config.model.build()?;
    let rows = analytic_rows(section, &model)?;

    let metadata = [
        ("format_version", FORMAT_VERSION.to_string()),
        ("tool_version", TOOL_VERSION.to_string()),
        ("m_antennas", section.m_antennas.to_string()),
        ("k_users", section.k_users.to_string()),
        ("tau_c", section.tau_c.to_string()),
        ("snr0_db", section.snr0_db.to_string()),
        ("snr_tr_db", section.snr_tr_db.to_string()),
        ("model", model_echo(&model)),
    ];
    write_output(output_target(config, overrides), |w| {
        write_metadata(w, "densemimo analytic sweep", &metadata)?;
        write_analytic_rows(w, &rows)
    })?;
    if let Some(path) = output_target(config, overrides) {
        eprintln!("wrote {} rows to {}", rows.len(), path.display());
    }
    Ok(())
}

fn analytic_rows(section: &AnalyticConfig, model: &MultiSlopeModel) -> Result<Vec<AnalyticRow>> {
    let lambdas = section.lambda.values("lambda")?;
    let zetas = section.zeta.values("zeta")?;
    if section.m_antennas <= section.k_users {
        return Err(Error::validation(format!(
            "the zero-forcing columns need more antennas than users, got M={}, K={}",
            section.m_antennas, section.k_users
        )));
    }
    let snr0 = db_to_linear(section.snr0_db);
    let snr_tr = db_to_linear(section.snr_tr_db);

    let mut rows = Vec::with_capacity(lambdas.len() * zetas.len());
    for &lambda in &lambdas {
        let moments = MomentPair::compute(model, lambda)?;
        let zeta_opt = optimal_zeta_asymptotic(model, lambda, section.k_users, section.tau_c)?;
        for &zeta in &zetas {
            let inputs = UatfInputs {
                m_antennas: section.m_antennas,
                k_users: section.k_users,
                zeta,
                snr0,
                snr_tr,
                tau_c: section.tau_c,
                moments,
            };
            let tau_p = inputs.tau_p();
            rows.push(AnalyticRow {
                lambda,
                zeta,
                mu1: moments.mu1,
                mu2: moments.mu2,
                a: inputs.pilot_ratio(),
                nmse_bound: nmse_upper_bound_value(moments.mu1, zeta, tau_p, snr_tr),
                sinr_mr: uatf_sinr(UatfScheme::MaximumRatio, &inputs)?,
                sinr_zf: uatf_sinr(UatfScheme::ZeroForcing, &inputs)?,
                se_mr: uatf_se(UatfScheme::MaximumRatio, &inputs)?,
                se_zf: uatf_se(UatfScheme::ZeroForcing, &inputs)?,
                rate_inf: asymptotic_rate(model, lambda, zeta, section.k_users, section.tau_c)?,
                zeta_opt,
                m_threshold_mr: dominance_threshold(
                    UatfScheme::MaximumRatio,
                    model,
                    lambda,
                    zeta,
                    section.k_users,
                    tau_p,
                    snr_tr,
                )?,
                m_threshold_zf: dominance_threshold(
                    UatfScheme::ZeroForcing,
                    model,
                    lambda,
                    zeta,
                    section.k_users,
                    tau_p,
                    snr_tr,
                )?,
            });
        }
    }
    Ok(rows)
}

/// Monte Carlo sweep over the configured grid. Scenario failures do not
/// abort the sweep: the surviving rows are still written, each failure is
/// reported on stderr, and the command exits with a numerical error.
pub fn cmd_simulate(config: &RunConfig, overrides: &Overrides) -> Result<()> {
    let section = config
        .simulate
        .as_ref()
        .ok_or_else(|| Error::validation("the config has no [simulate] section"))?;
    let model = config.model.build()?;
    let seed = overrides.seed.unwrap_or(config.master_seed);
    let scenarios = section.scenarios(&model, seed, overrides.trials)?;
    let schemes = section.schemes()?;
    let trials = overrides.trials.unwrap_or(section.trials);

    eprintln!(
        "running {} scenarios x {} schemes ({} trials each)",
        scenarios.len(),
        schemes.len(),
        trials
    );
    let report = sweep(&scenarios, &schemes)?;

    let scheme_list = schemes
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let window = section
        .window_side_km
        .map(|w| w.to_string())
        .unwrap_or_else(|| "auto".to_string());
    let metadata = [
        ("format_version", FORMAT_VERSION.to_string()),
        ("tool_version", TOOL_VERSION.to_string()),
        ("master_seed", seed.to_string()),
        ("trials", trials.to_string()),
        ("fading_redraws", section.fading_redraws.to_string()),
        ("tau_c", section.tau_c.to_string()),
        ("snr0_db", section.snr0_db.to_string()),
        ("snr_tr_db", section.snr_tr_db.to_string()),
        ("m_antennas", section.m_antennas.to_string()),
        ("k_users", section.k_users.to_string()),
        ("schemes", scheme_list),
        ("window_side_km", window),
        ("model", model_echo(&model)),
    ];
    write_output(output_target(config, overrides), |w| {
        write_metadata(w, "densemimo simulation sweep", &metadata)?;
        write_simulation_rows(w, &report.records)
    })?;
    if let Some(path) = output_target(config, overrides) {
        eprintln!("wrote {} rows to {}", report.records.len(), path.display());
    }

    if report.failures.is_empty() {
        Ok(())
    } else {
        for failure in &report.failures {
            eprintln!(
                "scenario {} failed: {}",
                failure.scenario_index, failure.message
            );
        }
        Err(Error::numerical(format!(
            "{} of {} scenarios failed",
            report.failures.len(),
            scenarios.len()
        )))
    }
}

/// Fast numerical invariant checks with a fixed seed. Prints one line per
/// check and fails with a numerical error naming the broken invariants.
pub fn cmd_selftest(w: &mut dyn Write) -> Result<()> {
    type Check = (&'static str, fn() -> Result<String>);
    let checks: [Check; 7] = [
        ("gamma-recurrence", check_gamma_recurrence),
        ("lambert-identity", check_lambert_identity),
        ("moment-monotonicity", check_moment_monotonicity),
        ("covariance-factorizations", check_covariance_factorizations),
        ("zero-forcing-identity", check_zero_forcing_identity),
        ("mmse-optimality", check_mmse_optimality),
        ("ase-identity", check_ase_identity),
    ];

    let mut failed = Vec::new();
    for (name, check) in checks {
        match check() {
            Ok(detail) => writeln!(w, "ok   {name}: {detail}")?,
            Err(e) => {
                writeln!(w, "FAIL {name}: {e}")?;
                failed.push(name);
            }
        }
    }
    writeln!(
        w,
        "selftest: {} checks, {} failed",
        checks.len(),
        failed.len()
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "selftest failed: {}",
            failed.join(", ")
        )))
    }
}

/// `Gamma(a+1, x) = a Gamma(a, x) + x^a e^{-x}` on a spread of arguments.
fn check_gamma_recurrence() -> Result<String> {
    let mut worst = 0.0f64;
    for (a, x) in [(0.5, 0.3), (1.7, 2.0), (3.2, 0.9), (2.5, 7.5), (0.9, 12.0)] {
        let lhs = upper_incomplete_gamma(a + 1.0, x)?;
        let rhs = a * upper_incomplete_gamma(a, x)? + x.powf(a) * (-x).exp();
        let rel = (lhs - rhs).abs() / rhs.abs();
        if rel > 1e-12 {
            return Err(Error::numerical(format!(
                "recurrence violated at a={a}, x={x}: {lhs} vs {rhs} (rel {rel:.2e})"
            )));
        }
        worst = worst.max(rel);
    }
    Ok(format!("5 argument pairs, worst relative error {worst:.2e}"))
}

/// `W(x) e^{W(x)} = x` on the principal branch.
fn check_lambert_identity() -> Result<String> {
    let mut worst = 0.0f64;
    for x in [0.05, 0.5, 1.0, std::f64::consts::E, 40.0, 1e3, 1e8] {
        let w = lambert_w0(x)?;
        let rel = (w * w.exp() - x).abs() / x;
        if rel > 1e-12 {
            return Err(Error::numerical(format!(
                "W({x}) = {w} fails the defining identity (rel {rel:.2e})"
            )));
        }
        worst = worst.max(rel);
    }
    Ok(format!("7 points, worst relative error {worst:.2e}"))
}

/// Both interference moments grow with density.
fn check_moment_monotonicity() -> Result<String> {
    let model = MultiSlopeModel::dual_slope_reference();
    let pairs: Vec<MomentPair> = [1.0, 10.0, 100.0]
        .iter()
        .map(|&l| MomentPair::compute(&model, l))
        .collect::<Result<_>>()?;
    for pair in pairs.windows(2) {
        if pair[1].mu1 < pair[0].mu1 || pair[1].mu2 < pair[0].mu2 {
            return Err(Error::numerical(format!(
                "moments decreased from density {} to {}",
                pair[0].lambda_per_km2, pair[1].lambda_per_km2
            )));
        }
    }
    Ok(format!(
        "mu1 {:.3} -> {:.3} -> {:.3} nondecreasing, mu2 likewise",
        pairs[0].mu1, pairs[1].mu1, pairs[2].mu1
    ))
}

/// A deterministic correlated scenario used by the structural checks.
fn selftest_estimator() -> Result<(ChannelEstimator, ChaCha8Rng)> {
    let model = MultiSlopeModel::dual_slope_reference();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let net = NetworkRealization::sample_with(60.0, 2, 1.0, &mut rng)?;
    let alloc = allocate_pilots(&net, 1, &mut rng)?;
    let powers = PowerProfile::channel_inversion(&net, &model, 5.0, 15.0)?;
    let correlation = ChannelCorrelation::OneRing {
        spread: 10f64.to_radians(),
    };
    let estimator = ChannelEstimator::new(&net, &model, correlation, 8, &alloc, &powers)?;
    Ok((estimator, rng))
}

/// Every covariance the pipeline factorizes must be positive definite:
/// estimator construction Cholesky-factorizes one pilot Gram per user, and
/// the MMSE combiners factorize their regularized interference matrices.
fn check_covariance_factorizations() -> Result<String> {
    let (estimator, mut rng) = selftest_estimator()?;
    let workspace = CombinerWorkspace::new(&estimator)?;
    let draw = estimator.draw_channels(&mut rng);
    let obs = estimator.synthesize_observation(&draw, &mut rng);
    let estimates = estimator.estimate(&obs)?;
    build_combiner(
        CombiningScheme::SingleCellMmse,
        &estimator,
        &estimates,
        &workspace,
    )?;
    build_combiner(
        CombiningScheme::MulticellMmse,
        &estimator,
        &estimates,
        &workspace,
    )?;
    Ok(format!(
        "pilot grams for {} users and both MMSE systems factorized",
        estimator.num_ues()
    ))
}

/// The zero-forcing combiner inverts the own-cell estimates: `V^H Hhat = I`.
fn check_zero_forcing_identity() -> Result<String> {
    let (estimator, mut rng) = selftest_estimator()?;
    let workspace = CombinerWorkspace::new(&estimator)?;
    let draw = estimator.draw_channels(&mut rng);
    let obs = estimator.synthesize_observation(&draw, &mut rng);
    let estimates = estimator.estimate(&obs)?;
    let set = build_combiner(
        CombiningScheme::ZeroForcing,
        &estimator,
        &estimates,
        &workspace,
    )?;
    let cell = estimator.typical_cell();
    let k_users = estimator.k_users();
    let mut worst = 0.0f64;
    for k in 0..k_users {
        let v = set.column(k);
        for i in 0..k_users {
            let h = estimates.estimate(cell, i);
            let dot: Complex64 = v.iter().zip(h.iter()).map(|(a, b)| a.conj() * b).sum();
            let target = if i == k { 1.0 } else { 0.0 };
            let err = (dot - target).norm();
            if err > 1e-8 {
                return Err(Error::numerical(format!(
                    "V^H Hhat[{k},{i}] = {dot} is {err:.2e} from {target}"
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!(
        "{k_users}x{k_users} identity reproduced, worst deviation {worst:.2e}"
    ))
}

/// Multicell MMSE attains the largest instantaneous SINR of all four
/// schemes on every user of several fresh draws.
fn check_mmse_optimality() -> Result<String> {
    let (estimator, mut rng) = selftest_estimator()?;
    let workspace = CombinerWorkspace::new(&estimator)?;
    let draws = 10;
    for d in 0..draws {
        let draw = estimator.draw_channels(&mut rng);
        let obs = estimator.synthesize_observation(&draw, &mut rng);
        let estimates = estimator.estimate(&obs)?;
        let mut best = vec![f64::NEG_INFINITY; estimator.k_users()];
        let mut mmse = vec![0.0; estimator.k_users()];
        for scheme in CombiningScheme::ALL {
            let set = build_combiner(scheme, &estimator, &estimates, &workspace)?;
            for k in 0..estimator.k_users() {
                let sample = instantaneous_sinr(
                    &estimator,
                    &estimates,
                    workspace.residual(),
                    k,
                    set.column(k),
                )?;
                if scheme == CombiningScheme::MulticellMmse {
                    mmse[k] = sample.sinr;
                } else {
                    best[k] = best[k].max(sample.sinr);
                }
            }
        }
        for k in 0..estimator.k_users() {
            if mmse[k] < best[k] * (1.0 - 1e-9) {
                return Err(Error::numerical(format!(
                    "draw {d}, user {k}: multicell MMSE SINR {} below {}",
                    mmse[k], best[k]
                )));
            }
        }
    }
    Ok(format!("optimal on every user of {draws} draws"))
}

/// Area spectral efficiency equals density times users times per-user SE.
fn check_ase_identity() -> Result<String> {
    let scenario = Scenario {
        lambda_per_km2: 60.0,
        m_antennas: 4,
        k_users: 2,
        zeta: 1,
        delta_deg: None,
        snr0_db: 5.0,
        snr_tr_db: 15.0,
        tau_c: 200,
        model: MultiSlopeModel::dual_slope_reference(),
        trials: 2,
        fading_redraws: 2,
        master_seed: 5,
        window_side_km: Some(1.0),
    };
    let record = estimate_se(&scenario, CombiningScheme::MaximumRatio)?;
    let expected = scenario.lambda_per_km2 * scenario.k_users as f64 * record.se_per_ue;
    if record.ase_per_km2 != expected {
        return Err(Error::numerical(format!(
            "ASE {} differs from lambda * K * SE = {}",
            record.ase_per_km2, expected
        )));
    }
    Ok(format!(
        "ASE {:.2} = 60 * 2 * {:.4} bit/s/Hz/km^2",
        record.ase_per_km2, record.se_per_ue
    ))
}
