//! Report artifacts: atomic file writes, SVG figures paired with CSVs, and
//! bundle manifests.

pub mod svg;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldio::sha256_hex;
use crate::grid::{ChannelSchema, POOLED};
use crate::metrics::ErrorGrowthCurve;
use crate::rollout::LeadMean;
use crate::scaling::SweepResult;

pub use svg::{Figure, Heatmap, LineChart, Panels};

pub const BUNDLE_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

pub fn digest_file(path: &Path, label: &str) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: label.to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Everything needed to say where a bundle came from. Contains no
/// timestamps so identical inputs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub settings: serde_json::Value,
    pub notes: Vec<String>,
}

impl BundleManifest {
    pub fn new(command: &str, settings: serde_json::Value) -> Self {
        BundleManifest {
            schema_version: BUNDLE_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            settings,
            notes: Vec::new(),
        }
    }

    /// Hashes every regular file in `dir` (except the manifest itself) into
    /// `outputs`, sorted by name.
    pub fn record_outputs(&mut self, dir: &Path, manifest_name: &str) -> Result<()> {
        let mut names: Vec<String> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != manifest_name && !n.starts_with('.'))
            .collect();
        names.sort();
        self.outputs = names
            .iter()
            .map(|n| digest_file(&dir.join(n), n))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn write_figure(dir: &Path, stem: &str, fig: &Figure) -> Result<[PathBuf; 2]> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let svg_path = dir.join(format!("{stem}.svg"));
    write_atomic(&csv_path, fig.to_csv()?.as_bytes())?;
    write_atomic(&svg_path, fig.render(stem).as_bytes())?;
    Ok([csv_path, svg_path])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairCheck {
    pub stem: String,
    pub ok: bool,
    pub reason: Option<String>,
}

/// Checks that every SVG in `dir` has a CSV and re-renders identically from it.
pub fn verify_pairs(dir: &Path) -> Result<Vec<PairCheck>> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter_map(|n| n.strip_suffix(".svg").map(str::to_string))
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let csv_path = dir.join(format!("{stem}.csv"));
        let svg_path = dir.join(format!("{stem}.svg"));
        let check = |reason: Option<String>| PairCheck {
            stem: stem.clone(),
            ok: reason.is_none(),
            reason,
        };
        let Ok(csv) = fs::read_to_string(&csv_path) else {
            out.push(check(Some("missing paired csv".into())));
            continue;
        };
        let svg = fs::read_to_string(&svg_path).map_err(|e| Error::io(&svg_path, e))?;
        match Figure::from_csv(&stem, &csv) {
            Err(e) => out.push(check(Some(e.to_string()))),
            Ok(fig) if fig.render(&stem) != svg => {
                out.push(check(Some("re-rendered svg differs".into())))
            }
            Ok(_) => out.push(check(None)),
        }
    }
    Ok(out)
}

fn unit_of(schema: &ChannelSchema, channel: &str) -> String {
    if channel == POOLED {
        return "pooled (normalized)".into();
    }
    schema
        .index_of(channel)
        .map_or_else(|| "unknown".into(), |i| schema.entries()[i].unit.clone())
}

/// Lead × channel heatmaps of r² and slope per covariate, plus pooled
/// r²/slope-vs-lead curves across covariates.
pub fn fit_figures(result: &SweepResult) -> Vec<(String, Figure)> {
    let mut out = Vec::new();
    for &cov in &result.covariates {
        for metric in ["r2", "slope"] {
            let values = result
                .leads
                .iter()
                .flat_map(|&l| result.channels.iter().map(move |c| (l, c)))
                .map(|(l, c)| {
                    let fit = result.cell(cov, l, c).and_then(|cell| cell.fit.as_ref());
                    match (metric, fit) {
                        ("r2", Some(f)) => f.r2.unwrap_or(f64::NAN),
                        (_, Some(f)) => f.slope,
                        _ => f64::NAN,
                    }
                })
                .collect();
            let heat = Heatmap {
                leads: result.leads.clone(),
                channels: result.channels.clone(),
                values,
            };
            out.push((
                format!("heatmap_{metric}_{}", cov.as_str()),
                Figure::Heatmap(heat),
            ));
        }
    }
    if result.channels.iter().any(|c| c == POOLED) {
        for metric in ["r2", "slope"] {
            let values = result
                .leads
                .iter()
                .flat_map(|&l| result.covariates.iter().map(move |&cov| (l, cov)))
                .map(
                    |(l, cov)| match result.cell(cov, l, POOLED).and_then(|c| c.fit.as_ref()) {
                        Some(f) if metric == "r2" => f.r2.unwrap_or(f64::NAN),
                        Some(f) => f.slope,
                        None => f64::NAN,
                    },
                )
                .collect();
            let lines = LineChart {
                leads: result.leads.clone(),
                series: result
                    .covariates
                    .iter()
                    .map(|c| c.as_str().to_string())
                    .collect(),
                values,
            };
            out.push((format!("curve_{metric}_pooled"), Figure::Lines(lines)));
        }
    }
    out
}

/// `covariate,lead_hours,channel,code,detail` for every failed cell.
pub fn failures_csv(result: &SweepResult) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["covariate", "lead_hours", "channel", "code", "detail"])?;
    for c in result.failures() {
        let f = c.failure.as_ref().expect("filtered on failure");
        w.write_record([
            c.covariate.as_str(),
            &c.lead_hours.to_string(),
            &c.channel,
            f.code(),
            &f.detail(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

/// Mean RMSE against lead for one run, one panel per unit.
pub fn rmse_panels(means: &[LeadMean], run_id: &str, schema: &ChannelSchema) -> Panels {
    let mut rows: Vec<(String, String, u32, f64)> = means
        .iter()
        .filter(|m| m.run_id == run_id)
        .map(|m| {
            (
                m.channel.clone(),
                unit_of(schema, &m.channel),
                m.lead_hours,
                m.mean_rmse,
            )
        })
        .collect();
    sort_panel_rows(&mut rows, schema);
    Panels { rows }
}

/// Error-growth curves, one panel per unit.
pub fn growth_panels(curves: &[ErrorGrowthCurve], schema: &ChannelSchema) -> Panels {
    let mut rows: Vec<(String, String, u32, f64)> = curves
        .iter()
        .flat_map(|c| {
            let unit = unit_of(schema, &c.channel);
            c.lead_hours
                .iter()
                .zip(&c.d_rmse_dt)
                .map(move |(&l, &d)| (c.channel.clone(), unit.clone(), l, d))
        })
        .collect();
    sort_panel_rows(&mut rows, schema);
    Panels { rows }
}

// schema order, unknown channels by name, pooled last
fn sort_panel_rows(rows: &mut [(String, String, u32, f64)], schema: &ChannelSchema) {
    let key = |c: &str| match (c == POOLED, schema.index_of(c)) {
        (true, _) => (2, usize::MAX),
        (false, Some(i)) => (0, i),
        (false, None) => (1, 0),
    };
    rows.sort_by(|a, b| {
        key(&a.0)
            .cmp(&key(&b.0))
            .then_with(|| a.0.cmp(&b.0))
            .then(a.2.cmp(&b.2))
    });
}
