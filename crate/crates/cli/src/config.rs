//! Run configuration: one TOML file with a shared `[model]` block and
//! optional `[analytic]` / `[simulate]` sections; the subcommand picks the
//! section it needs.
//!
//! Unknown keys are rejected everywhere so a typo cannot silently fall back
//! to a default. Grids are either explicit lists (`lambda = [10, 50]`) or
//! ranges (`lambda = { start = 1, stop = 100, count = 25 }`).

use std::path::{Path, PathBuf};

use densemimo::combining::CombiningScheme;
use densemimo::montecarlo::Scenario;
use densemimo::propagation::MultiSlopeModel;
use densemimo::{Error, Result};
use serde::Deserialize;

/// CSV schema version stamped into every output header. Bumped whenever a
/// column or metadata line changes meaning.
pub const FORMAT_VERSION: u32 = 1;

/// Top-level run configuration.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the deterministic run; `--seed` overrides it.
    #[serde(default)]
    pub master_seed: u64,
    /// Output path; stdout when neither this nor `--out` is given.
    pub out: Option<PathBuf>,
    /// Expected CSV schema version; rejected when it disagrees with the
    /// version this build writes.
    pub format_version: Option<u32>,
    #[serde(default)]
    pub model: ModelConfig,
    pub analytic: Option<AnalyticConfig>,
    pub simulate: Option<SimulateConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
        if let Some(v) = config.format_version {
            if v != FORMAT_VERSION {
                return Err(Error::validation(format!(
                    "config expects format_version {v}, but this build writes version {FORMAT_VERSION}"
                )));
            }
        }
        Ok(config)
    }
}

/// Path-loss model selector. The parameter fields are optional so that the
/// table stays flat; [`ModelConfig::build`] checks that exactly the fields
/// belonging to `kind` are present.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Coefficient for `kind = "single-slope"`.
    pub upsilon: Option<f64>,
    /// Exponent for `kind = "single-slope"`.
    pub alpha: Option<f64>,
    /// First-region coefficient for `kind = "multi-slope"`.
    pub upsilon1: Option<f64>,
    /// Region boundaries in meters for `kind = "multi-slope"`.
    pub breakpoints_m: Option<Vec<f64>>,
    /// Per-region exponents for `kind = "multi-slope"`.
    pub exponents: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// The library's built-in dual-slope profile.
    DualSlopeReference,
    SingleSlope,
    MultiSlope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::DualSlopeReference,
            upsilon: None,
            alpha: None,
            upsilon1: None,
            breakpoints_m: None,
            exponents: None,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<MultiSlopeModel> {
        let stray = |field: &str, kind: &str| {
            Error::validation(format!("`model.{field}` does not apply to kind = \"{kind}\""))
        };
        let missing = |field: &str, kind: &str| {
            Error::validation(format!("kind = \"{kind}\" requires `model.{field}`"))
        };
        match self.kind {
            ModelKind::DualSlopeReference => {
                for (name, given) in [
                    ("upsilon", self.upsilon.is_some()),
                    ("alpha", self.alpha.is_some()),
                    ("upsilon1", self.upsilon1.is_some()),
                    ("breakpoints_m", self.breakpoints_m.is_some()),
                    ("exponents", self.exponents.is_some()),
                ] {
                    if given {
                        return Err(stray(name, "dual-slope-reference"));
                    }
                }
                Ok(MultiSlopeModel::dual_slope_reference())
            }
            ModelKind::SingleSlope => {
                for (name, given) in [
                    ("upsilon1", self.upsilon1.is_some()),
                    ("breakpoints_m", self.breakpoints_m.is_some()),
                    ("exponents", self.exponents.is_some()),
                ] {
                    if given {
                        return Err(stray(name, "single-slope"));
                    }
                }
                let upsilon = self.upsilon.ok_or_else(|| missing("upsilon", "single-slope"))?;
                let alpha = self.alpha.ok_or_else(|| missing("alpha", "single-slope"))?;
                MultiSlopeModel::single_slope(upsilon, alpha)
            }
            ModelKind::MultiSlope => {
                for (name, given) in [
                    ("upsilon", self.upsilon.is_some()),
                    ("alpha", self.alpha.is_some()),
                ] {
                    if given {
                        return Err(stray(name, "multi-slope"));
                    }
                }
                let upsilon1 = self
                    .upsilon1
                    .ok_or_else(|| missing("upsilon1", "multi-slope"))?;
                let breakpoints = self
                    .breakpoints_m
                    .as_deref()
                    .ok_or_else(|| missing("breakpoints_m", "multi-slope"))?;
                let exponents = self
                    .exponents
                    .as_deref()
                    .ok_or_else(|| missing("exponents", "multi-slope"))?;
                MultiSlopeModel::new(upsilon1, breakpoints, exponents)
            }
        }
    }
}

/// A sweep axis: an explicit list of values or an inclusive linear range.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Range(RangeGrid),
}

/// `count` equally spaced values from `start` to `stop` inclusive.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeGrid {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl Grid {
    /// Expand to concrete values, rejecting empty or non-finite grids.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let values = match self {
            Grid::List(v) => v.clone(),
            Grid::Range(r) => {
                if !r.start.is_finite() || !r.stop.is_finite() {
                    return Err(Error::validation(format!(
                        "{name} range endpoints must be finite"
                    )));
                }
                if r.count == 0 {
                    return Err(Error::validation(format!("{name} range has count = 0")));
                }
                if r.count == 1 {
                    vec![r.start]
                } else {
                    let step = (r.stop - r.start) / (r.count - 1) as f64;
                    (0..r.count).map(|i| r.start + step * i as f64).collect()
                }
            }
        };
        if values.is_empty() {
            return Err(Error::validation(format!("{name} grid is empty")));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "{name} grid contains a non-finite value ({bad})"
            )));
        }
        Ok(values)
    }
}

/// Grid for the closed-form sweep. Unlike the simulator, the pilot reuse
/// factor may be fractional here.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticConfig {
    /// Base-station densities per km^2.
    pub lambda: Grid,
    /// Pilot reuse factors.
    pub zeta: Grid,
    pub m_antennas: usize,
    pub k_users: usize,
    /// Coherence block length in samples.
    pub tau_c: f64,
    pub snr0_db: f64,
    pub snr_tr_db: f64,
}

/// Grid for the Monte Carlo sweep. Scenario order is densities outermost,
/// then reuse factors, then correlation settings (angular spreads in listed
/// order, the uncorrelated point last), so related rows stay adjacent.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Base-station densities per km^2.
    pub lambda: Grid,
    /// Pilot reuse factors (integers; the pilot book has `zeta * k_users`
    /// sequences).
    pub zeta: Vec<u32>,
    pub m_antennas: usize,
    pub k_users: usize,
    /// Angular spreads in degrees for correlated-fading points.
    pub delta_deg: Option<Vec<f64>>,
    /// Append an uncorrelated-fading point to the correlation sweep.
    /// Defaults to true when `delta_deg` is absent, false otherwise.
    pub include_uncorrelated: Option<bool>,
    pub snr0_db: f64,
    pub snr_tr_db: f64,
    /// Coherence block length in samples.
    pub tau_c: usize,
    /// Network realizations per scenario; `--trials` overrides.
    pub trials: usize,
    /// Fading redraws per realization.
    pub fading_redraws: usize,
    /// Combining schemes to evaluate; all four when absent.
    pub schemes: Option<Vec<String>>,
    /// Simulation window side; chosen from the density when absent.
    pub window_side_km: Option<f64>,
}

impl SimulateConfig {
    /// Correlation settings in sweep order: `Some(spread)` per listed
    /// angular spread, then `None` for the uncorrelated point if included.
    pub fn correlations(&self) -> Vec<Option<f64>> {
        let mut out: Vec<Option<f64>> = self
            .delta_deg
            .clone()
            .unwrap_or_default()
            .into_iter()
            .map(Some)
            .collect();
        if self.include_uncorrelated.unwrap_or(self.delta_deg.is_none()) {
            out.push(None);
        }
        out
    }

    pub fn schemes(&self) -> Result<Vec<CombiningScheme>> {
        match &self.schemes {
            None => Ok(CombiningScheme::ALL.to_vec()),
            Some(labels) => {
                if labels.is_empty() {
                    return Err(Error::validation("scheme list is empty"));
                }
                labels.iter().map(|s| s.parse()).collect()
            }
        }
    }

    /// Expand the grid into scenarios. Both overrides come from the command
    /// line; invariants of the individual scenarios are checked by the sweep
    /// before any work starts.
    pub fn scenarios(
        &self,
        model: &MultiSlopeModel,
        master_seed: u64,
        trials_override: Option<usize>,
    ) -> Result<Vec<Scenario>> {
        let lambdas = Grid::values(&self.lambda, "lambda")?;
        if self.zeta.is_empty() {
            return Err(Error::validation("zeta grid is empty"));
        }
        let correlations = self.correlations();
        if correlations.is_empty() {
            return Err(Error::validation(
                "no correlation settings: delta_deg is empty and include_uncorrelated is false",
            ));
        }
        let trials = trials_override.unwrap_or(self.trials);
        let mut out = Vec::with_capacity(lambdas.len() * self.zeta.len() * correlations.len());
        for &lambda in &lambdas {
            for &zeta in &self.zeta {
                for &delta in &correlations {
                    out.push(Scenario {
                        lambda_per_km2: lambda,
                        m_antennas: self.m_antennas,
                        k_users: self.k_users,
                        zeta,
                        delta_deg: delta,
                        snr0_db: self.snr0_db,
                        snr_tr_db: self.snr_tr_db,
                        tau_c: self.tau_c,
                        model: model.clone(),
                        trials,
                        fading_redraws: self.fading_redraws,
                        master_seed,
                        window_side_km: self.window_side_km,
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str::<RunConfig>(text).map_err(|e| Error::validation(e.to_string()))
    }

    #[test]
    fn minimal_simulate_config_parses() {
        let config = parse(
            r#"
            master_seed = 7

            [simulate]
            lambda = [10.0, 50.0]
            zeta = [4]
            m_antennas = 100
            k_users = 10
            delta_deg = [5.0, 10.0]
            snr0_db = 5.0
            snr_tr_db = 15.0
            tau_c = 400
            trials = 10
            fading_redraws = 4
            "#,
        )
        .expect("config should parse");
        let section = config.simulate.as_ref().expect("simulate section");
        assert_eq!(config.master_seed, 7, "seed should come from the file");
        assert_eq!(
            section.correlations(),
            vec![Some(5.0), Some(10.0)],
            "explicit spreads should not pull in the uncorrelated point"
        );
        let model = config.model.build().expect("default model");
        let scenarios = section.scenarios(&model, 7, None).expect("grid expansion");
        assert_eq!(scenarios.len(), 4, "2 densities x 1 zeta x 2 spreads");
        assert_eq!(scenarios[0].lambda_per_km2, 10.0);
        assert_eq!(scenarios[0].delta_deg, Some(5.0));
        assert_eq!(scenarios[1].delta_deg, Some(10.0));
        assert_eq!(scenarios[2].lambda_per_km2, 50.0, "density is the outer axis");
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            "banana = 1\n[simulate]\nlambda = [10.0]",
            "[simulate]\nbanana = 1",
            "[analytic]\nbanana = 1",
            "[model]\nkind = \"single-slope\"\nbanana = 1",
        ] {
            let err = parse(text).expect_err("unknown key should fail");
            assert!(
                err.to_string().contains("unknown field")
                    || err.to_string().contains("banana"),
                "error should point at the stray key: {err}"
            );
        }
    }

    #[test]
    fn range_grids_expand_inclusively() {
        let grid = Grid::Range(RangeGrid {
            start: 1.0,
            stop: 3.0,
            count: 5,
        });
        assert_eq!(
            grid.values("lambda").expect("valid grid"),
            vec![1.0, 1.5, 2.0, 2.5, 3.0]
        );
        let single = Grid::Range(RangeGrid {
            start: 2.0,
            stop: 9.0,
            count: 1,
        });
        assert_eq!(single.values("x").expect("count 1"), vec![2.0]);
        let empty = Grid::List(vec![]);
        assert!(empty.values("x").is_err(), "empty list must be rejected");
        let zero = Grid::Range(RangeGrid {
            start: 0.0,
            stop: 1.0,
            count: 0,
        });
        assert!(zero.values("x").is_err(), "count 0 must be rejected");
    }

    #[test]
    fn range_grid_rejects_stray_keys() {
        let err = parse(
            r#"
            [analytic]
            lambda = { start = 1.0, stop = 2.0, count = 3, stops = 9 }
            zeta = [1.0]
            m_antennas = 10
            k_users = 2
            tau_c = 200.0
            snr0_db = 5.0
            snr_tr_db = 15.0
            "#,
        )
        .expect_err("typo inside a range grid should fail");
        assert!(
            err.to_string().contains("lambda"),
            "error should locate the bad grid: {err}"
        );
    }

    #[test]
    fn model_parameters_must_match_the_kind() {
        let missing = ModelConfig {
            kind: ModelKind::SingleSlope,
            ..ModelConfig::default()
        };
        assert!(missing.build().is_err(), "single-slope needs parameters");

        let stray = ModelConfig {
            kind: ModelKind::DualSlopeReference,
            alpha: Some(4.0),
            ..ModelConfig::default()
        };
        assert!(stray.build().is_err(), "reference model takes no parameters");

        let good = ModelConfig {
            kind: ModelKind::SingleSlope,
            upsilon: Some(1.0),
            alpha: Some(4.0),
            ..ModelConfig::default()
        };
        good.build().expect("complete single-slope model");
    }

    #[test]
    fn format_version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "format_version = 999\n").expect("write config");
        let err = RunConfig::load(&path).expect_err("future version should fail");
        assert!(
            err.to_string().contains("format_version"),
            "error should mention the version: {err}"
        );
    }

    #[test]
    fn default_correlation_is_the_uncorrelated_point() {
        let config = parse(
            r#"
            [simulate]
            lambda = [10.0]
            zeta = [1]
            m_antennas = 10
            k_users = 2
            snr0_db = 5.0
            snr_tr_db = 15.0
            tau_c = 200
            trials = 2
            fading_redraws = 2
            "#,
        )
        .expect("config should parse");
        let section = config.simulate.expect("simulate section");
        assert_eq!(section.correlations(), vec![None]);
        assert_eq!(
            section.schemes().expect("default schemes"),
            CombiningScheme::ALL.to_vec()
        );
    }
}
