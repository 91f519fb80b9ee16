//! Forecast error metrics.
//!
//! Per-channel scores are latitude-weighted; the pooled score is spatially
//! unweighted, mirroring the channel-uniform MSE training loss. Static input
//! channels are never scored.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldState, POOLED, STEP_HOURS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub ic_timestamp: i64,
    pub lead_hours: u32,
    pub channel: String,
    pub rmse: f64,
}

impl MetricRecord {
    pub fn is_pooled(&self) -> bool {
        self.channel == POOLED
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.lead_hours % STEP_HOURS != 0 {
            return Err(format!(
                "lead {} h is not a multiple of {STEP_HOURS} h",
                self.lead_hours
            ));
        }
        if !self.rmse.is_finite() || self.rmse < 0.0 {
            return Err(format!(
                "rmse {} must be finite and non-negative",
                self.rmse
            ));
        }
        Ok(())
    }
}

fn check_pair(pred: &FieldState, truth: &FieldState) -> Result<()> {
    pred.same_layout(truth)?;
    // FieldState guarantees finiteness on construction.
    Ok(())
}

/// Weighted RMSE of one `n_lat × n_lon` slab given per-row weights.
pub fn weighted_slab_rmse(pred: &[f64], truth: &[f64], row_weights: &[f64]) -> Result<f64> {
    let n_lat = row_weights.len();
    if n_lat == 0 || pred.len() != truth.len() || pred.len() % n_lat != 0 {
        return Err(Error::Mismatch(
            "slab sizes disagree with weight rows".into(),
        ));
    }
    let n_lon = pred.len() / n_lat;
    let mut acc = 0.0;
    for (j, &w) in row_weights.iter().enumerate() {
        let row = j * n_lon..(j + 1) * n_lon;
        let s: f64 = pred[row.clone()]
            .iter()
            .zip(&truth[row])
            .map(|(p, t)| {
                let d = p - t;
                d * d
            })
            .sum();
        acc += w * s;
    }
    let v = (acc / pred.len() as f64).sqrt();
    if !v.is_finite() {
        return Err(Error::NonFinite {
            what: "weighted rmse",
            index: 0,
        });
    }
    Ok(v)
}

/// Latitude-weighted RMSE for every forecast channel, in schema order.
pub fn area_weighted_rmse(pred: &FieldState, truth: &FieldState) -> Result<Vec<f64>> {
    check_pair(pred, truth)?;
    let weights = pred.grid().latitude_weights();
    pred.schema()
        .forecast_indices()
        .into_iter()
        .map(|c| weighted_slab_rmse(pred.channel(c), truth.channel(c), &weights))
        .collect()
}

/// Channel-uniform, spatially unweighted MSE over all forecast channels.
pub fn mse_loss(pred: &FieldState, truth: &FieldState) -> Result<f64> {
    check_pair(pred, truth)?;
    let channels = pred.schema().forecast_indices();
    let n = pred.grid().points();
    let mut acc = 0.0;
    for &c in &channels {
        acc += pred
            .channel(c)
            .iter()
            .zip(truth.channel(c))
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
    }
    Ok(acc / (channels.len() * n) as f64)
}

pub fn pooled_rmse(pred: &FieldState, truth: &FieldState) -> Result<f64> {
    Ok(mse_loss(pred, truth)?.sqrt())
}

/// `d(RMSE)/dt` along lead time, in error units per hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorGrowthCurve {
    pub channel: String,
    pub lead_hours: Vec<u32>,
    pub d_rmse_dt: Vec<f64>,
}

/// Central differences at interior leads, one-sided at both ends. Callers
/// average RMSE across ICs before differentiating.
pub fn error_growth(channel: &str, series: &[(u32, f64)]) -> Result<ErrorGrowthCurve> {
    if series.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: series.len(),
        });
    }
    if let Some(w) = series.windows(2).find(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidConfig(format!(
            "leads must be strictly increasing (saw {} then {})",
            w[0].0, w[1].0
        )));
    }
    let n = series.len();
    let t = |i: usize| series[i].0 as f64;
    let y = |i: usize| series[i].1;
    let d = (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            (y(b) - y(a)) / (t(b) - t(a))
        })
        .collect();
    Ok(ErrorGrowthCurve {
        channel: channel.to_string(),
        lead_hours: series.iter().map(|p| p.0).collect(),
        d_rmse_dt: d,
    })
}

impl ErrorGrowthCurve {
    /// Centred moving average with a window of `window` points, shrinking at
    /// the ends. `window <= 1` is the identity.
    pub fn smoothed(&self, window: usize) -> ErrorGrowthCurve {
        if window <= 1 {
            return self.clone();
        }
        let n = self.d_rmse_dt.len();
        let half = window / 2;
        let d = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + window - half).min(n);
                self.d_rmse_dt[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        ErrorGrowthCurve {
            channel: self.channel.clone(),
            lead_hours: self.lead_hours.clone(),
            d_rmse_dt: d,
        }
    }
}

pub const METRICS_HEADER: [&str; 5] = ["run_id", "ic_timestamp", "lead_hours", "channel", "rmse"];

pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    if records.is_empty() {
        w.write_record(METRICS_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::InvalidConfig(format!(
            "metrics.csv header must be `{}`, got `{}`",
            METRICS_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<MetricRecord>().enumerate() {
        let rec = row?;
        rec.validate()
            .map_err(|m| Error::InvalidConfig(format!("metrics.csv row {}: {m}", i + 2)))?;
        out.push(rec);
    }
    Ok(out)
}
