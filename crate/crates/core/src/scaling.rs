//! Two-stage IsoFLOP scaling analysis.
//!
//! Stage 1 fits a quadratic in `(ln N, ln ε)` within each compute budget and
//! takes its vertex as the compute-optimal model size. Stage 2 regresses
//! `ln ε*` on the log of a covariate (parameters, data or compute) across
//! budgets. Natural logarithms throughout; the base only affects intercepts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::rollout::{reduce_over_ics, LeadMean};

/// `C = κ·N·D` with the usual forward+backward convention.
pub const DEFAULT_KAPPA: f64 = 6.0;
pub const FIT_REPORT_VERSION: u32 = 1;
/// Relative spread allowed between the compute of runs sharing a budget.
pub const BUDGET_TOLERANCE: f64 = 0.01;
pub const DEFAULT_SUM_TOLERANCE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPoint {
    pub run_id: String,
    pub n_params: f64,
    pub d_samples: f64,
    pub c_flops: f64,
    pub budget_id: String,
}

pub const RUNS_HEADER: [&str; 5] = ["run_id", "n_params", "d_samples", "c_flops", "budget_id"];

pub fn write_runs_csv<W: Write>(out: W, runs: &[RunPoint]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    if runs.is_empty() {
        w.write_record(RUNS_HEADER)?;
    }
    for r in runs {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<runs csv>", e))?;
    Ok(())
}

pub fn read_runs_csv<R: Read>(input: R) -> Result<Vec<RunPoint>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != RUNS_HEADER {
        return Err(Error::InvalidConfig(format!(
            "runs.csv header must be `{}`, got `{}`",
            RUNS_HEADER.join(","),
            headers.join(",")
        )));
    }
    let mut out: Vec<RunPoint> = Vec::new();
    for (i, row) in rdr.deserialize::<RunPoint>().enumerate() {
        let r = row?;
        let line = i + 2;
        for (name, v) in [
            ("n_params", r.n_params),
            ("d_samples", r.d_samples),
            ("c_flops", r.c_flops),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "runs.csv row {line}: {name} = {v} must be positive"
                )));
            }
        }
        if out.iter().any(|o| o.run_id == r.run_id) {
            return Err(Error::InvalidConfig(format!(
                "runs.csv row {line}: duplicate run_id `{}`",
                r.run_id
            )));
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    Params,
    Data,
    Compute,
}

impl Covariate {
    pub const ALL: [Covariate; 3] = [Covariate::Params, Covariate::Data, Covariate::Compute];

    pub fn as_str(self) -> &'static str {
        match self {
            Covariate::Params => "params",
            Covariate::Data => "data",
            Covariate::Compute => "compute",
        }
    }

    fn of(self, o: &IsoflopOptimum) -> f64 {
        match self {
            Covariate::Params => o.n_star,
            Covariate::Data => o.d_star,
            Covariate::Compute => o.c_flops,
        }
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Covariate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Covariate::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!("unknown covariate `{s}` (params|data|compute)"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoflopOptimum {
    pub budget_id: String,
    pub c_flops: f64,
    pub n_star: f64,
    pub d_star: f64,
    pub eps_star: f64,
    /// Coefficient of `(ln N)²`.
    pub curvature: f64,
    /// Vertex outside the swept `N` range; reported, not clamped.
    pub extrapolated: bool,
}

fn log_positive(v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v.ln())
    } else {
        Err(Error::NonPositive { value: v })
    }
}

/// Stage 1: least-squares quadratic `y = q·x² + r·x + s` on
/// `(x, y) = (ln N, ln ε)`; vertex `x* = −r / 2q`, `d* = C / (κ·n*)`.
pub fn fit_isoflop_optimum(
    budget_id: &str,
    c_flops: f64,
    points: &[(f64, f64)],
    kappa: f64,
) -> Result<IsoflopOptimum> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "kappa {kappa} must be positive"
        )));
    }
    log_positive(c_flops)?;
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|&(n, e)| Ok((log_positive(n)?, log_positive(e)?)))
        .collect::<Result<_>>()?;
    let mut distinct: Vec<f64> = xy.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: distinct.len(),
        });
    }
    // centred and scaled abscissa keeps the normal matrix well conditioned
    let k = xy.len() as f64;
    let mean = xy.iter().map(|p| p.0).sum::<f64>() / k;
    let sd = (xy.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / k).sqrt();
    let design = DMatrix::from_fn(xy.len(), 3, |i, j| {
        let u = (xy[i].0 - mean) / sd;
        u.powi(2 - j as i32)
    });
    let rhs = DVector::from_iterator(xy.len(), xy.iter().map(|p| p.1));
    let coef = design
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::InvalidConfig(format!("quadratic solve failed: {e}")))?;
    let (qu, ru, su) = (coef[0], coef[1], coef[2]);
    let scale = qu.abs().max(ru.abs()).max(su.abs()).max(1.0);
    if qu <= 1e-10 * scale {
        return Err(Error::NoInteriorMinimum {
            curvature: qu / (sd * sd),
        });
    }
    let u_star = -ru / (2.0 * qu);
    let x_star = mean + sd * u_star;
    let y_star = su - ru * ru / (4.0 * qu);
    let n_star = x_star.exp();
    Ok(IsoflopOptimum {
        budget_id: budget_id.to_string(),
        c_flops,
        n_star,
        d_star: c_flops / (kappa * n_star),
        eps_star: y_star.exp(),
        curvature: qu / (sd * sd),
        extrapolated: x_star < distinct[0] || x_star > distinct[distinct.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// `a` in `ln ε = a + b·ln s`.
    pub intercept: f64,
    pub slope: f64,
    /// `None` when the observed `ln ε` has no variance.
    pub r2: Option<f64>,
    pub n_points: usize,
}

impl PowerLawFit {
    pub fn r2_degenerate(&self) -> bool {
        self.r2.is_none()
    }
}

/// Stage 2: ordinary least squares on `(ln s, ln ε)` with
/// `R² = 1 − Σ(y − ŷ)² / Σ(y − ȳ)²`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|&(s, e)| Ok((log_positive(s)?, log_positive(e)?)))
        .collect::<Result<_>>()?;
    let k = xy.len() as f64;
    let xm = xy.iter().map(|p| p.0).sum::<f64>() / k;
    let ym = xy.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = xy.iter().map(|p| (p.0 - xm).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    let x_scale = xy.iter().map(|p| p.0.abs()).fold(1.0, f64::max);
    if sxx <= (1e-12 * x_scale).powi(2) * k {
        return Err(Error::ZeroCovariateVariance);
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let ss_tot: f64 = xy.iter().map(|p| (p.1 - ym).powi(2)).sum();
    let ss_res: f64 = xy
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let y_scale = xy.iter().map(|p| p.1.abs()).fold(1.0, f64::max);
    let r2 = (ss_tot > (1e-12 * y_scale).powi(2) * k).then(|| 1.0 - ss_res / ss_tot);
    Ok(PowerLawFit {
        intercept,
        slope,
        r2,
        n_points: xy.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationFit {
    /// Slope of `ln n*` against `ln C`.
    pub alpha: f64,
    /// Slope of `ln d*` against `ln C`.
    pub beta: f64,
    pub alpha_plus_beta: f64,
    /// `|α + β − 1| ≤ tolerance`.
    pub consistent: bool,
    pub tolerance: f64,
    pub n_budgets: usize,
}

/// Compute-optimal allocation exponents across budgets. Because `d*` is
/// derived as `C/(κ·n*)`, `α + β = 1` holds by construction; the check
/// guards against inconsistent inputs rather than testing the data.
pub fn fit_allocation(optima: &[IsoflopOptimum], tolerance: f64) -> Result<AllocationFit> {
    if optima.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: optima.len(),
        });
    }
    let n: Vec<(f64, f64)> = optima.iter().map(|o| (o.c_flops, o.n_star)).collect();
    let d: Vec<(f64, f64)> = optima.iter().map(|o| (o.c_flops, o.d_star)).collect();
    let alpha = fit_power_law(&n)?.slope;
    let beta = fit_power_law(&d)?.slope;
    let sum = alpha + beta;
    if !(alpha.is_finite() && beta.is_finite()) {
        return Err(Error::NonFinite {
            what: "allocation exponent",
            index: 0,
        });
    }
    Ok(AllocationFit {
        alpha,
        beta,
        alpha_plus_beta: sum,
        consistent: (sum - 1.0).abs() <= tolerance,
        tolerance,
        n_budgets: optima.len(),
    })
}

/// Why a sweep cell has no fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "kebab-case")]
pub enum FailureCode {
    Stage1TooFewPoints { budget_id: String, got: usize },
    Stage1NoInteriorMinimum { budget_id: String, curvature: f64 },
    Stage1Invalid { budget_id: String, detail: String },
    Stage2TooFewBudgets { got: usize },
    Stage2ZeroVariance,
    Stage2Invalid { detail: String },
}

impl FailureCode {
    pub fn code(&self) -> &'static str {
        match self {
            FailureCode::Stage1TooFewPoints { .. } => "stage1-too-few-points",
            FailureCode::Stage1NoInteriorMinimum { .. } => "stage1-no-interior-minimum",
            FailureCode::Stage1Invalid { .. } => "stage1-invalid",
            FailureCode::Stage2TooFewBudgets { .. } => "stage2-too-few-budgets",
            FailureCode::Stage2ZeroVariance => "stage2-zero-variance",
            FailureCode::Stage2Invalid { .. } => "stage2-invalid",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            FailureCode::Stage1TooFewPoints { budget_id, got } => {
                format!("budget {budget_id}: {got} distinct N")
            }
            FailureCode::Stage1NoInteriorMinimum {
                budget_id,
                curvature,
            } => {
                format!("budget {budget_id}: curvature {curvature:e}")
            }
            FailureCode::Stage1Invalid { budget_id, detail } => {
                format!("budget {budget_id}: {detail}")
            }
            FailureCode::Stage2TooFewBudgets { got } => format!("{got} budgets"),
            FailureCode::Stage2ZeroVariance => "no spread in covariate".into(),
            FailureCode::Stage2Invalid { detail } => detail.clone(),
        }
    }
}

fn stage1_failure(budget_id: &str, e: Error) -> FailureCode {
    let budget_id = budget_id.to_string();
    match e {
        Error::TooFewPoints { got, .. } => FailureCode::Stage1TooFewPoints { budget_id, got },
        Error::NoInteriorMinimum { curvature } => FailureCode::Stage1NoInteriorMinimum {
            budget_id,
            curvature,
        },
        other => FailureCode::Stage1Invalid {
            budget_id,
            detail: other.to_string(),
        },
    }
}

fn stage2_failure(e: Error) -> FailureCode {
    match e {
        Error::TooFewPoints { got, .. } => FailureCode::Stage2TooFewBudgets { got },
        Error::ZeroCovariateVariance => FailureCode::Stage2ZeroVariance,
        other => FailureCode::Stage2Invalid {
            detail: other.to_string(),
        },
    }
}

/// Stage-1 result for one (lead, channel) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Cell {
    pub lead_hours: u32,
    pub channel: String,
    pub optima: Vec<IsoflopOptimum>,
    pub failure: Option<FailureCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub covariate: Covariate,
    pub lead_hours: u32,
    pub channel: String,
    pub fit: Option<PowerLawFit>,
    pub failure: Option<FailureCode>,
    /// e.g. `extrapolated:<budget>`, `r2-degenerate`.
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub covariates: Vec<Covariate>,
    /// `None` selects every lead present.
    pub leads: Option<Vec<u32>>,
    /// `None` selects every channel present, in first-appearance order.
    pub channels: Option<Vec<String>>,
    pub kappa: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            covariates: Covariate::ALL.to_vec(),
            leads: None,
            channels: None,
            kappa: DEFAULT_KAPPA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub covariates: Vec<Covariate>,
    pub leads: Vec<u32>,
    pub channels: Vec<String>,
    /// Lead-major, channel-minor.
    pub stage1: Vec<Stage1Cell>,
    /// Covariate-major, then lead, then channel.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, covariate: Covariate, lead: u32, channel: &str) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.covariate == covariate && c.lead_hours == lead && c.channel == channel)
    }

    pub fn stage1_cell(&self, lead: u32, channel: &str) -> Option<&Stage1Cell> {
        self.stage1
            .iter()
            .find(|c| c.lead_hours == lead && c.channel == channel)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.failure.is_some())
    }
}

/// Budgets in increasing compute, each with its member runs.
pub fn group_budgets(runs: &[RunPoint]) -> Result<Vec<(String, f64, Vec<&RunPoint>)>> {
    let mut by_id: BTreeMap<&str, Vec<&RunPoint>> = BTreeMap::new();
    for r in runs {
        by_id.entry(&r.budget_id).or_default().push(r);
    }
    let mut out = Vec::with_capacity(by_id.len());
    for (id, members) in by_id {
        let c = members.iter().map(|r| r.c_flops).sum::<f64>() / members.len() as f64;
        if let Some(r) = members
            .iter()
            .find(|r| (r.c_flops - c).abs() > BUDGET_TOLERANCE * c)
        {
            return Err(Error::InvalidConfig(format!(
                "run `{}` has C = {} but budget `{id}` averages {c}",
                r.run_id, r.c_flops
            )));
        }
        out.push((id.to_string(), c, members));
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Checks every metric references a known run and every run has metrics.
/// Row numbers are 1-based file lines (header = line 1).
pub fn join_check(runs: &[RunPoint], records: &[MetricRecord]) -> Result<()> {
    let known: HashMap<&str, usize> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| (r.run_id.as_str(), i))
        .collect();
    let mut seen = vec![false; runs.len()];
    for (i, rec) in records.iter().enumerate() {
        match known.get(rec.run_id.as_str()) {
            Some(&k) => seen[k] = true,
            None => {
                return Err(Error::Join(format!(
                    "metrics.csv row {}: run_id `{}` not in runs.csv",
                    i + 2,
                    rec.run_id
                )));
            }
        }
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(Error::Join(format!(
            "runs.csv row {}: run `{}` has no metrics",
            k + 2,
            runs[k].run_id
        )));
    }
    Ok(())
}

fn first_appearance<T: Clone + PartialEq>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for it in items {
        if !out.contains(&it) {
            out.push(it);
        }
    }
    out
}

/// Full two-stage sweep over (lead, channel) cells for each covariate.
pub fn sweep(
    runs: &[RunPoint],
    records: &[MetricRecord],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    join_check(runs, records)?;
    let means = reduce_over_ics(records)?;
    let budgets = group_budgets(runs)?;
    let leads = match &cfg.leads {
        Some(l) => l.clone(),
        None => {
            let mut l = first_appearance(records.iter().map(|r| r.lead_hours));
            l.sort_unstable();
            l
        }
    };
    let channels = match &cfg.channels {
        Some(c) => c.clone(),
        None => first_appearance(records.iter().map(|r| r.channel.clone())),
    };
    let lookup: HashMap<(&str, u32, &str), f64> = means
        .iter()
        .map(|m: &LeadMean| {
            (
                (m.run_id.as_str(), m.lead_hours, m.channel.as_str()),
                m.mean_rmse,
            )
        })
        .collect();
    for &lead in &leads {
        if !means.iter().any(|m| m.lead_hours == lead) {
            return Err(Error::InvalidConfig(format!(
                "lead {lead} h not present in metrics"
            )));
        }
    }
    for ch in &channels {
        if !means.iter().any(|m| &m.channel == ch) {
            return Err(Error::InvalidConfig(format!(
                "channel `{ch}` not present in metrics"
            )));
        }
    }

    let grid: Vec<(u32, &String)> = leads
        .iter()
        .flat_map(|&l| channels.iter().map(move |c| (l, c)))
        .collect();
    let stage1: Vec<Stage1Cell> = grid
        .par_iter()
        .map(|&(lead, channel)| {
            let mut optima = Vec::with_capacity(budgets.len());
            for (id, c, members) in &budgets {
                let pts: Vec<(f64, f64)> = members
                    .iter()
                    .filter_map(|r| {
                        lookup
                            .get(&(r.run_id.as_str(), lead, channel.as_str()))
                            .map(|&e| (r.n_params, e))
                    })
                    .collect();
                match fit_isoflop_optimum(id, *c, &pts, cfg.kappa) {
                    Ok(o) => optima.push(o),
                    Err(e) => {
                        return Stage1Cell {
                            lead_hours: lead,
                            channel: channel.clone(),
                            optima,
                            failure: Some(stage1_failure(id, e)),
                        };
                    }
                }
            }
            Stage1Cell {
                lead_hours: lead,
                channel: channel.clone(),
                optima,
                failure: None,
            }
        })
        .collect();

    let mut cells = Vec::with_capacity(cfg.covariates.len() * stage1.len());
    for &cov in &cfg.covariates {
        for s1 in &stage1 {
            let mut cell = SweepCell {
                covariate: cov,
                lead_hours: s1.lead_hours,
                channel: s1.channel.clone(),
                fit: None,
                failure: s1.failure.clone(),
                flags: s1
                    .optima
                    .iter()
                    .filter(|o| o.extrapolated)
                    .map(|o| format!("extrapolated:{}", o.budget_id))
                    .collect(),
            };
            if cell.failure.is_none() {
                let pts: Vec<(f64, f64)> =
                    s1.optima.iter().map(|o| (cov.of(o), o.eps_star)).collect();
                match fit_power_law(&pts) {
                    Ok(f) => {
                        if f.r2_degenerate() {
                            cell.flags.push("r2-degenerate".into());
                        }
                        cell.fit = Some(f);
                    }
                    Err(e) => cell.failure = Some(stage2_failure(e)),
                }
            }
            cells.push(cell);
        }
    }
    Ok(SweepResult {
        covariates: cfg.covariates.clone(),
        leads,
        channels,
        stage1,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub r2: Option<f64>,
    pub n_points: usize,
    pub flags: Vec<String>,
    pub failure: Option<FailureCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub log_base: String,
    pub kappa: f64,
    /// covariate → lead → channel → cell.
    pub covariates: BTreeMap<String, BTreeMap<u32, BTreeMap<String, CellReport>>>,
    pub allocation_lead_hours: Option<u32>,
    pub allocation_channel: Option<String>,
    pub allocation: Option<AllocationFit>,
    pub allocation_failure: Option<String>,
    pub optima: Vec<IsoflopOptimum>,
}

impl FitReport {
    /// Builds the report; the allocation fit uses the stage-1 optima of
    /// `(alloc_lead, alloc_channel)` when that cell succeeded.
    pub fn build(result: &SweepResult, kappa: f64, alloc_lead: u32, alloc_channel: &str) -> Self {
        let mut covariates: BTreeMap<String, BTreeMap<u32, BTreeMap<String, CellReport>>> =
            BTreeMap::new();
        for c in &result.cells {
            let r = CellReport {
                a: c.fit.as_ref().map(|f| f.intercept),
                b: c.fit.as_ref().map(|f| f.slope),
                r2: c.fit.as_ref().and_then(|f| f.r2),
                n_points: c.fit.as_ref().map_or(0, |f| f.n_points),
                flags: c.flags.clone(),
                failure: c.failure.clone(),
            };
            covariates
                .entry(c.covariate.as_str().to_string())
                .or_default()
                .entry(c.lead_hours)
                .or_default()
                .insert(c.channel.clone(), r);
        }
        let s1 = result.stage1_cell(alloc_lead, alloc_channel);
        let (allocation, allocation_failure, optima) = match s1 {
            None => (
                None,
                Some(format!(
                    "no cell at lead {alloc_lead} h, channel `{alloc_channel}`"
                )),
                Vec::new(),
            ),
            Some(cell) => match &cell.failure {
                Some(f) => (
                    None,
                    Some(format!("{}: {}", f.code(), f.detail())),
                    cell.optima.clone(),
                ),
                None => match fit_allocation(&cell.optima, DEFAULT_SUM_TOLERANCE) {
                    Ok(a) => (Some(a), None, cell.optima.clone()),
                    Err(e) => (None, Some(e.to_string()), cell.optima.clone()),
                },
            },
        };
        FitReport {
            schema_version: FIT_REPORT_VERSION,
            log_base: "e".into(),
            kappa,
            covariates,
            allocation_lead_hours: s1.map(|_| alloc_lead),
            allocation_channel: s1.map(|_| alloc_channel.to_string()),
            allocation,
            allocation_failure,
            optima,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn from_logs(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
        pts.iter().map(|&(x, y)| (x.exp(), y.exp())).collect()
    }

    #[test]
    fn symmetric_triple_vertex() {
        let o = fit_isoflop_optimum(
            "b",
            1e6,
            &from_logs(&[(1.0, 2.0), (2.0, 1.0), (3.0, 2.0)]),
            6.0,
        )
        .unwrap();
        assert_relative_eq!(o.n_star.ln(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(o.eps_star.ln(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(o.curvature, 1.0, epsilon = 1e-12);
        assert!(!o.extrapolated);
        assert_relative_eq!(o.d_star, 1e6 / (6.0 * o.n_star), max_relative = 1e-15);
    }

    #[test]
    fn exact_parabola_vertex() {
        let pts: Vec<(f64, f64)> = [0.0, 1.0, 3.0, 4.0]
            .iter()
            .map(|&x: &f64| (x, (x - 2.0).powi(2) + 1.0))
            .collect();
        let o = fit_isoflop_optimum("b", 1.0, &from_logs(&pts), 6.0).unwrap();
        assert!((o.n_star.ln() - 2.0).abs() < 1e-10);
        assert!((o.eps_star.ln() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn stage1_errors() {
        let line = from_logs(&[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0), (3.0, 4.0)]);
        assert!(matches!(
            fit_isoflop_optimum("b", 1.0, &line, 6.0),
            Err(Error::NoInteriorMinimum { .. })
        ));
        let concave = from_logs(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]);
        assert!(matches!(
            fit_isoflop_optimum("b", 1.0, &concave, 6.0),
            Err(Error::NoInteriorMinimum { .. })
        ));
        let dup = from_logs(&[(0.0, 1.0), (0.0, 2.0), (1.0, 3.0), (1.0, 1.0)]);
        assert!(matches!(
            fit_isoflop_optimum("b", 1.0, &dup, 6.0),
            Err(Error::TooFewPoints { got: 2, .. })
        ));
        assert!(matches!(
            fit_isoflop_optimum("b", 1.0, &[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)], 6.0),
            Err(Error::NonPositive { .. })
        ));
    }

    #[test]
    fn extrapolated_vertex_flagged() {
        let pts: Vec<(f64, f64)> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&x: &f64| (x, (x - 5.0).powi(2)))
            .collect();
        let o = fit_isoflop_optimum("b", 1.0, &from_logs(&pts), 6.0).unwrap();
        assert!(o.extrapolated);
        assert!((o.n_star.ln() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn exact_power_law() {
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&s: &f64| (s, 3f64.exp() * s.powf(-0.5)))
            .collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.intercept - 3.0).abs() < 1e-10);
        assert!((f.slope + 0.5).abs() < 1e-10);
        assert!((f.r2.unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn flat_data_is_degenerate_not_perfect() {
        let e = std::f64::consts::E;
        let f = fit_power_law(&[(1.0, e), (e, e), (e * e, e)]).unwrap();
        assert_eq!(f.slope, 0.0);
        assert!(f.r2.is_none());
        assert!(matches!(
            fit_power_law(&[(2.0, 1.0), (2.0, 2.0), (2.0, 3.0)]),
            Err(Error::ZeroCovariateVariance)
        ));
        assert!(matches!(
            fit_power_law(&[(1.0, 1.0), (2.0, 2.0)]),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn hand_dataset_matches_normal_equations() {
        // frozen from an independent normal-equations solve in (ln s, ln ε)
        let f = fit_power_law(&[(1.0, 1.0), (10.0, 2.0), (100.0, 8.0)]).unwrap();
        assert_relative_eq!(f.intercept, -0.115_524_530_093_324_06, max_relative = 1e-12);
        assert_relative_eq!(f.slope, 0.451_544_993_495_971_66, max_relative = 1e-12);
        assert_relative_eq!(f.r2.unwrap(), 27.0 / 28.0, max_relative = 1e-12);
    }

    fn optimum(c: f64, n: f64) -> IsoflopOptimum {
        IsoflopOptimum {
            budget_id: format!("{c}"),
            c_flops: c,
            n_star: n,
            d_star: c / (6.0 * n),
            eps_star: 1.0,
            curvature: 1.0,
            extrapolated: false,
        }
    }

    #[test]
    fn allocation_from_constructed_optima() {
        let opt: Vec<IsoflopOptimum> = [1e18, 1e19, 1e20, 1e21]
            .iter()
            .map(|&c: &f64| optimum(c, 0.01 * c.powf(0.7)))
            .collect();
        let a = fit_allocation(&opt, 0.03).unwrap();
        assert!((a.alpha - 0.7).abs() < 1e-10);
        assert!((a.beta - 0.3).abs() < 1e-10);
        assert!(a.consistent);
        assert!(matches!(
            fit_allocation(&opt[..2], 0.03),
            Err(Error::TooFewPoints { got: 2, .. })
        ));
    }

    #[test]
    fn runs_csv_round_trip_and_validation() {
        let runs = vec![
            RunPoint {
                run_id: "r0".into(),
                n_params: 1e6,
                d_samples: 2e9,
                c_flops: 1.2e16,
                budget_id: "c0".into(),
            },
            RunPoint {
                run_id: "r1".into(),
                n_params: 2e6,
                d_samples: 1e9,
                c_flops: 1.2e16,
                budget_id: "c0".into(),
            },
        ];
        let mut buf = Vec::new();
        write_runs_csv(&mut buf, &runs).unwrap();
        assert_eq!(read_runs_csv(&buf[..]).unwrap(), runs);
        let bad = "run_id,n_params,d_samples,c_flops,budget_id\nr0,1,1,1,b\nr1,0,1,1,b\n";
        let err = read_runs_csv(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        let dup = "run_id,n_params,d_samples,c_flops,budget_id\nr0,1,1,1,b\nr0,2,1,1,b\n";
        assert!(read_runs_csv(dup.as_bytes()).is_err());
    }

    #[test]
    fn budget_spread_checked() {
        let mk = |id: &str, c: f64| RunPoint {
            run_id: id.into(),
            n_params: 1.0,
            d_samples: 1.0,
            c_flops: c,
            budget_id: "b".into(),
        };
        assert!(group_budgets(&[mk("a", 100.0), mk("b", 100.5)]).is_ok());
        assert!(group_budgets(&[mk("a", 100.0), mk("b", 103.0)]).is_err());
    }

    #[test]
    fn join_reports_row_numbers() {
        let runs = vec![RunPoint {
            run_id: "r0".into(),
            n_params: 1.0,
            d_samples: 1.0,
            c_flops: 6.0,
            budget_id: "b".into(),
        }];
        let rec = |id: &str| MetricRecord {
            run_id: id.into(),
            ic_timestamp: 0,
            lead_hours: 6,
            channel: "t2m".into(),
            rmse: 1.0,
        };
        let err = join_check(&runs, &[rec("r0"), rec("zz")])
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("metrics.csv row 3") && err.contains("zz"),
            "{err}"
        );
        let err = join_check(&runs, &[]).unwrap_err().to_string();
        assert!(err.contains("runs.csv row 2"), "{err}");
    }

    proptest! {
        #[test]
        fn exact_power_law_any_parameters(a in -5.0f64..5.0, b in -2.0f64..2.0, s0 in 0.1f64..10.0, ratio in 1.5f64..20.0) {
            prop_assume!(b.abs() > 1e-3);
            let pts: Vec<(f64, f64)> = (0..5).map(|i| {
                let s = s0 * ratio.powi(i);
                (s, a.exp() * s.powf(b))
            }).collect();
            let f = fit_power_law(&pts).unwrap();
            prop_assert!((f.r2.unwrap() - 1.0).abs() < 1e-10);
            prop_assert!((f.slope - b).abs() < 1e-10);
        }

        #[test]
        fn scale_invariance(
            pts in proptest::collection::vec((0.1f64..1e3, 0.1f64..10.0), 4..9),
            ke in 0.01f64..100.0, ks in 0.01f64..100.0,
        ) {
            let Ok(base) = fit_power_law(&pts) else { return Ok(()) };
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(s, e)| (s * ks, e * ke)).collect();
            let f = fit_power_law(&scaled).unwrap();
            prop_assert!((f.slope - base.slope).abs() < 1e-10 * base.slope.abs().max(1.0));
            if let (Some(r0), Some(r1)) = (base.r2, f.r2) {
                prop_assert!((r0 - r1).abs() < 1e-10);
            }
        }

        #[test]
        fn vertex_order_invariant(
            q in 0.1f64..3.0, x0 in -2.0f64..2.0, y0 in -1.0f64..1.0,
            noise in proptest::collection::vec(-0.05f64..0.05, 6),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut pts: Vec<(f64, f64)> = (0..6).map(|i| {
                let x = -2.5 + i as f64;
                ((x).exp(), (q * (x - x0).powi(2) + y0 + noise[i]).exp())
            }).collect();
            let a = fit_isoflop_optimum("b", 1.0, &pts, 6.0).unwrap();
            pts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = fit_isoflop_optimum("b", 1.0, &pts, 6.0).unwrap();
            prop_assert!((a.n_star.ln() - b.n_star.ln()).abs() < 1e-10);
        }
    }
}
