//! TOML run configuration. Every command-line flag has a key here; flags win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub schema_version: Option<u32>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: Option<bool>,
    pub verify: Option<bool>,
    pub layout: Option<String>,
    pub strategy: Option<String>,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub derive: DeriveSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// `isoflop` or `truth`.
    pub kind: Option<String>,
    #[serde(default)]
    pub surface: SurfaceSection,
    #[serde(default)]
    pub family: FamilySection,
    #[serde(default)]
    pub truth: TruthSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSection {
    pub e_floor: Option<f64>,
    pub amp_n: Option<f64>,
    pub exp_n: Option<f64>,
    pub amp_d: Option<f64>,
    pub exp_d: Option<f64>,
    pub kappa: Option<f64>,
    pub noise_sigma: Option<f64>,
    #[serde(default)]
    pub overrides: BTreeMap<String, OverrideSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideSection {
    pub amp_n: Option<f64>,
    pub exp_n: Option<f64>,
    pub amp_d: Option<f64>,
    pub exp_d: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySection {
    pub budgets: Option<Vec<f64>>,
    /// `[lo_exponent, hi_exponent, count]`, an alternative to `budgets`.
    pub budget_decades: Option<(f64, f64, usize)>,
    pub n_per_budget: Option<usize>,
    pub span_decades: Option<f64>,
    pub leads: Option<Vec<u32>>,
    pub max_lead_hours: Option<u32>,
    pub channels: Option<Vec<String>>,
    pub n_ics: Option<usize>,
    pub ic_stride_hours: Option<u32>,
    pub horizon_growth: Option<f64>,
    pub horizon_flatten: Option<f64>,
    #[serde(default)]
    pub concave_cells: Vec<CellSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSection {
    pub lead_hours: u32,
    pub channel: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    pub kind: Option<String>,
    pub decay_factor: Option<f64>,
    pub n_lat: Option<usize>,
    pub n_lon: Option<usize>,
    pub hours: Option<i64>,
    pub channels: Option<Vec<String>>,
    pub static_inputs: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub model: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub run_id: Option<String>,
    pub ic_stride_hours: Option<u32>,
    pub max_lead_hours: Option<u32>,
    pub strict: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeriveSection {
    pub metrics: Option<PathBuf>,
    pub run_id: Option<String>,
    pub smooth: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub runs: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub covariates: Option<Vec<String>>,
    pub leads: Option<Vec<u32>>,
    pub channels: Option<Vec<String>>,
    pub kappa: Option<f64>,
    pub alloc_lead: Option<u32>,
    pub alloc_channel: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub bundle: Option<PathBuf>,
}

impl FileConfig {
    /// Parses and version-checks a config; relative paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg =
            Self::parse(&text).map_err(|m| CliError::Config(format!("{}: {m}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: FileConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        match cfg.schema_version {
            Some(CONFIG_VERSION) => Ok(cfg),
            Some(v) => Err(format!(
                "key `schema_version`: unsupported version {v} (expected {CONFIG_VERSION})"
            )),
            None => Err(format!(
                "missing key `schema_version` (set it to {CONFIG_VERSION})"
            )),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.out);
        fix(&mut self.rollout.model);
        fix(&mut self.rollout.truth);
        fix(&mut self.derive.metrics);
        fix(&mut self.fit.runs);
        fix(&mut self.fit.metrics);
        fix(&mut self.report.bundle);
    }
}
