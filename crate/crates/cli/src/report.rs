//! CSV output: `#`-prefixed metadata lines, one header row, one data row
//! per result. Floats use Rust's shortest round-trip formatting, so a fixed
//! input always serializes to identical bytes.

use std::io::{self, Write};

use densemimo::montecarlo::ResultRecord;
use densemimo::propagation::MultiSlopeModel;

pub const SIMULATE_COLUMNS: &str = "lambda,zeta,delta_deg,scheme,m_antennas,k_users,snr0_db,\
snr_tr_db,tau_c,fading_redraws,se_per_ue,se_ci_half_width,ase_per_km2,nmse,\
coherent_per_user_db,non_coherent_per_user_db,trials,failures";

pub const ANALYTIC_COLUMNS: &str = "lambda,zeta,mu1,mu2,A,nmse_bound,sinr_mr,sinr_zf,\
se_mr,se_zf,rate_inf,zeta_opt,m_threshold_mr,m_threshold_zf";

/// One row of the closed-form sweep, in column order.
#[derive(Debug, Clone)]
pub struct AnalyticRow {
    pub lambda: f64,
    pub zeta: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// Pilot-to-data received-power ratio of the typical user.
    pub a: f64,
    pub nmse_bound: f64,
    pub sinr_mr: f64,
    pub sinr_zf: f64,
    pub se_mr: f64,
    pub se_zf: f64,
    /// Spectral efficiency in the infinite-antenna limit.
    pub rate_inf: f64,
    /// Reuse factor maximizing the infinite-antenna rate.
    pub zeta_opt: f64,
    pub m_threshold_mr: f64,
    pub m_threshold_zf: f64,
}

/// Write the title line and `# key = value` metadata lines.
pub fn write_metadata(
    w: &mut dyn Write,
    title: &str,
    pairs: &[(&str, String)],
) -> io::Result<()> {
    writeln!(w, "# {title}")?;
    for (key, value) in pairs {
        writeln!(w, "# {key} = {value}")?;
    }
    Ok(())
}

pub fn write_simulation_rows(w: &mut dyn Write, records: &[ResultRecord]) -> io::Result<()> {
    writeln!(w, "{SIMULATE_COLUMNS}")?;
    for r in records {
        let s = &r.scenario;
        let delta = s.delta_deg.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.lambda_per_km2,
            s.zeta,
            delta,
            r.scheme,
            s.m_antennas,
            s.k_users,
            s.snr0_db,
            s.snr_tr_db,
            s.tau_c,
            s.fading_redraws,
            r.se_per_ue,
            r.se_ci_half_width,
            r.ase_per_km2,
            r.nmse,
            r.coherent_per_user_db(),
            r.non_coherent_per_user_db(),
            r.trials,
            r.failures
        )?;
    }
    Ok(())
}

pub fn write_analytic_rows(w: &mut dyn Write, rows: &[AnalyticRow]) -> io::Result<()> {
    writeln!(w, "{ANALYTIC_COLUMNS}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.lambda,
            r.zeta,
            r.mu1,
            r.mu2,
            r.a,
            r.nmse_bound,
            r.sinr_mr,
            r.sinr_zf,
            r.se_mr,
            r.se_zf,
            r.rate_inf,
            r.zeta_opt,
            r.m_threshold_mr,
            r.m_threshold_zf
        )?;
    }
    Ok(())
}

/// Compact single-line description of a path-loss model for the metadata
/// header: each region as `[lo, hi) m: upsilon * d^-alpha`.
pub fn model_echo(model: &MultiSlopeModel) -> String {
    let regions: Vec<String> = model
        .slopes()
        .map(|s| {
            let hi = if s.r_hi_m.is_finite() {
                format!("{}", s.r_hi_m)
            } else {
                "inf".to_string()
            };
            format!("[{}, {}) m: {} * d^-{}", s.r_lo_m, hi, s.upsilon, s.alpha)
        })
        .collect();
    regions.join("; ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn the_model_echo_lists_every_region() {
        let model = MultiSlopeModel::dual_slope_reference();
        let echo = model_echo(&model);
        assert!(
            echo.contains("[0, 100) m") && echo.contains("[100, inf) m"),
            "echo should show both regions: {echo}"
        );
        assert!(
            echo.contains("d^-2.1") && echo.contains("d^-4"),
            "echo should show both exponents: {echo}"
        );
    }

    #[test]
    fn analytic_rows_match_the_advertised_columns() {
        let row = AnalyticRow {
            lambda: 10.0,
            zeta: 4.0,
            mu1: 0.5,
            mu2: 0.25,
            a: 2.0,
            nmse_bound: 0.1,
            sinr_mr: 3.0,
            sinr_zf: 5.0,
            se_mr: 1.5,
            se_zf: 2.0,
            rate_inf: 4.0,
            zeta_opt: 5.2,
            m_threshold_mr: 60.0,
            m_threshold_zf: 40.0,
        };
        let mut buf = Vec::new();
        write_analytic_rows(&mut buf, &[row]).expect("write to memory");
        let text = String::from_utf8(buf).expect("utf-8");
        let mut lines = text.lines();
        let header = lines.next().expect("header row");
        let data = lines.next().expect("data row");
        assert_eq!(
            header.split(',').count(),
            data.split(',').count(),
            "every column needs a value"
        );
        assert_eq!(data, "10,4,0.5,0.25,2,0.1,3,5,1.5,2,4,5.2,60,40");
    }
}
