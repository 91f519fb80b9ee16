//! Grid geometry, channel schema, field storage and normalization.
//!
//! Fields are stored channel-major, then latitude, then longitude. Longitude is
//! always periodic; latitude never is.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pressure levels (hPa) of the canonical 71-channel schema, top of the stack first.
pub const PRESSURE_LEVELS_HPA: [u32; 13] = [
    50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000,
];

/// Model time step in hours.
pub const STEP_HOURS: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatOrder {
    /// North to south (90 → −90), the ERA5 convention.
    Descending,
    Ascending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct GridSpec {
    lat_values: Vec<f64>,
    lon_values: Vec<f64>,
    lat_order: LatOrder,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    n_lat: usize,
    n_lon: usize,
    lat_order: LatOrder,
    lat_values: Vec<f64>,
    lon_values: Vec<f64>,
    periodic_lon: bool,
}

impl TryFrom<GridRepr> for GridSpec {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        if r.lat_values.len() != r.n_lat || r.lon_values.len() != r.n_lon {
            return Err(Error::InvalidGrid(
                "declared sizes disagree with coordinate arrays".into(),
            ));
        }
        if !r.periodic_lon {
            return Err(Error::InvalidGrid("longitude must be periodic".into()));
        }
        let grid = GridSpec::new(r.lat_values, r.lon_values)?;
        if grid.lat_order != r.lat_order {
            return Err(Error::InvalidGrid(
                "declared latitude order disagrees with values".into(),
            ));
        }
        Ok(grid)
    }
}

impl From<GridSpec> for GridRepr {
    fn from(g: GridSpec) -> Self {
        GridRepr {
            n_lat: g.n_lat(),
            n_lon: g.n_lon(),
            lat_order: g.lat_order,
            lat_values: g.lat_values,
            lon_values: g.lon_values,
            periodic_lon: true,
        }
    }
}

impl GridSpec {
    pub fn new(lat_values: Vec<f64>, lon_values: Vec<f64>) -> Result<Self> {
        if lat_values.len() < 2 || lon_values.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 rows and 2 columns, got {}x{}",
                lat_values.len(),
                lon_values.len()
            )));
        }
        if let Some(bad) = lat_values.iter().find(|v| !v.is_finite() || v.abs() > 90.0) {
            return Err(Error::InvalidGrid(format!(
                "latitude {bad} outside [-90, 90]"
            )));
        }
        let lat_order = if lat_values.windows(2).all(|w| w[1] < w[0]) {
            LatOrder::Descending
        } else if lat_values.windows(2).all(|w| w[1] > w[0]) {
            LatOrder::Ascending
        } else {
            return Err(Error::InvalidGrid(
                "latitudes must be strictly monotone".into(),
            ));
        };
        if let Some(bad) = lon_values
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v >= 360.0)
        {
            return Err(Error::InvalidGrid(format!(
                "longitude {bad} outside [0, 360)"
            )));
        }
        let step = lon_values[1] - lon_values[0];
        if step <= 0.0 {
            return Err(Error::InvalidGrid("longitudes must increase".into()));
        }
        for w in lon_values.windows(2) {
            if ((w[1] - w[0]) - step).abs() > 1e-9 * step.max(1.0) {
                return Err(Error::InvalidGrid(
                    "longitudes must be equally spaced".into(),
                ));
            }
        }
        Ok(GridSpec {
            lat_values,
            lon_values,
            lat_order,
        })
    }

    /// Equiangular grid with both poles included (the 0.25° ERA5 layout at
    /// `n_lat = 721, n_lon = 1440`).
    pub fn equiangular(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat < 2 || n_lon < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2x2, got {n_lat}x{n_lon}"
            )));
        }
        let dlat = 180.0 / (n_lat - 1) as f64;
        let lat = (0..n_lat).map(|j| 90.0 - dlat * j as f64).collect();
        let dlon = 360.0 / n_lon as f64;
        let lon = (0..n_lon).map(|k| dlon * k as f64).collect();
        GridSpec::new(lat, lon)
    }

    /// Equiangular cell-centred grid that excludes the poles; useful for small
    /// desk-scale grids where zero-weight pole rows would waste a row.
    pub fn cell_centered(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat < 2 || n_lon < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2x2, got {n_lat}x{n_lon}"
            )));
        }
        let dlat = 180.0 / n_lat as f64;
        let lat = (0..n_lat).map(|j| 90.0 - dlat * (j as f64 + 0.5)).collect();
        let dlon = 360.0 / n_lon as f64;
        let lon = (0..n_lon).map(|k| dlon * k as f64).collect();
        GridSpec::new(lat, lon)
    }

    pub fn n_lat(&self) -> usize {
        self.lat_values.len()
    }

    pub fn n_lon(&self) -> usize {
        self.lon_values.len()
    }

    pub fn lat_values(&self) -> &[f64] {
        &self.lat_values
    }

    pub fn lon_values(&self) -> &[f64] {
        &self.lon_values
    }

    pub fn lat_order(&self) -> LatOrder {
        self.lat_order
    }

    pub fn periodic_lon(&self) -> bool {
        true
    }

    pub fn points(&self) -> usize {
        self.n_lat() * self.n_lon()
    }

    pub fn latitude_weights(&self) -> Vec<f64> {
        // validated on construction
        latitude_weights(&self.lat_values).expect("grid latitudes validated")
    }
}

/// Per-row area weights `w_j ∝ max(cos(lat_j), 0)` scaled to mean 1.
///
/// Operates on raw latitude values so degenerate layouts (e.g. a band of
/// identical equatorial rows) can be weighted too.
pub fn latitude_weights(lat_values: &[f64]) -> Result<Vec<f64>> {
    if lat_values.is_empty() {
        return Err(Error::InvalidGrid("no latitude rows".into()));
    }
    if let Some(bad) = lat_values.iter().find(|v| !v.is_finite() || v.abs() > 90.0) {
        return Err(Error::InvalidGrid(format!(
            "latitude {bad} outside [-90, 90]"
        )));
    }
    let raw: Vec<f64> = lat_values
        .iter()
        .map(|lat| {
            // cos(±90°) evaluates to ~6e-17; poles get exactly zero.
            if lat.abs() == 90.0 {
                0.0
            } else {
                lat.to_radians().cos().max(0.0)
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidGrid("all latitude weights vanish".into()));
    }
    let scale = raw.len() as f64 / total;
    Ok(raw.into_iter().map(|w| w * scale).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Surface,
    PressureLevel,
    /// Time-invariant input (land–sea mask, orography, cos-lat). Fed to the
    /// model, never predicted and never scored.
    Static,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub name: String,
    pub unit: String,
    pub kind: ChannelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_hpa: Option<u32>,
}

impl ChannelEntry {
    pub fn surface(name: &str, unit: &str) -> Self {
        ChannelEntry {
            name: name.into(),
            unit: unit.into(),
            kind: ChannelKind::Surface,
            level_hpa: None,
        }
    }

    pub fn level(var: &str, unit: &str, level: u32) -> Self {
        ChannelEntry {
            name: format!("{var}{level}"),
            unit: unit.into(),
            kind: ChannelKind::PressureLevel,
            level_hpa: Some(level),
        }
    }

    pub fn fixed(name: &str, unit: &str) -> Self {
        ChannelEntry {
            name: name.into(),
            unit: unit.into(),
            kind: ChannelKind::Static,
            level_hpa: None,
        }
    }

    pub fn is_forecast(&self) -> bool {
        self.kind != ChannelKind::Static
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct ChannelSchema {
    entries: Vec<ChannelEntry>,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    total: usize,
    entries: Vec<ChannelEntry>,
}

impl TryFrom<SchemaRepr> for ChannelSchema {
    type Error = Error;

    fn try_from(r: SchemaRepr) -> Result<Self> {
        if r.total != r.entries.len() {
            return Err(Error::InvalidSchema(format!(
                "total {} disagrees with {} entries",
                r.total,
                r.entries.len()
            )));
        }
        ChannelSchema::new(r.entries)
    }
}

impl From<ChannelSchema> for SchemaRepr {
    fn from(s: ChannelSchema) -> Self {
        SchemaRepr {
            total: s.entries.len(),
            entries: s.entries,
        }
    }
}

/// Name reserved for the all-channel pooled metric.
pub const POOLED: &str = "__pooled__";

impl ChannelSchema {
    pub fn new(entries: Vec<ChannelEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidSchema("empty schema".into()));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.name.is_empty() || e.name == POOLED {
                return Err(Error::InvalidSchema(format!(
                    "reserved or empty channel name `{}`",
                    e.name
                )));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate channel `{}`",
                    e.name
                )));
            }
            match (e.kind, e.level_hpa) {
                (ChannelKind::PressureLevel, Some(l)) if PRESSURE_LEVELS_HPA.contains(&l) => {}
                (ChannelKind::PressureLevel, l) => {
                    return Err(Error::InvalidSchema(format!(
                        "pressure-level channel `{}` has level {l:?} outside the supported list",
                        e.name
                    )))
                }
                (_, Some(_)) => {
                    return Err(Error::InvalidSchema(format!(
                        "non-level channel `{}` carries a level",
                        e.name
                    )))
                }
                _ => {}
            }
        }
        if !entries.iter().any(ChannelEntry::is_forecast) {
            return Err(Error::InvalidSchema(
                "schema has no forecast channels".into(),
            ));
        }
        Ok(ChannelSchema { entries })
    }

    pub fn entries(&self) -> &[ChannelEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.entries.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Indices of predicted (non-static) channels, in schema order.
    pub fn forecast_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].is_forecast())
            .collect()
    }

    pub fn n_forecast(&self) -> usize {
        self.entries.iter().filter(|e| e.is_forecast()).count()
    }

    /// Keep only the named channels, in the given order.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        let entries = names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .map(|i| self.entries[i].clone())
                    .ok_or_else(|| Error::InvalidSchema(format!("unknown channel `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        ChannelSchema::new(entries)
    }

    /// Appends land–sea mask, orography and cos-latitude as static inputs.
    pub fn with_static_inputs(&self) -> Result<Self> {
        let mut entries = self.entries.clone();
        entries.push(ChannelEntry::fixed("lsm", "1"));
        entries.push(ChannelEntry::fixed("orography", "m"));
        entries.push(ChannelEntry::fixed("coslat", "1"));
        ChannelSchema::new(entries)
    }
}

/// The 71-channel ERA5 schema: six surface fields, then u, v, z, t, q at the
/// 13 pressure levels (variable-major, level-minor).
pub fn canonical_schema() -> ChannelSchema {
    let mut entries = vec![
        ChannelEntry::surface("TCWV", "kg/m²"),
        ChannelEntry::surface("u10m", "m/s"),
        ChannelEntry::surface("v10m", "m/s"),
        ChannelEntry::surface("t2m", "K"),
        ChannelEntry::surface("sp", "Pa"),
        ChannelEntry::surface("msl", "Pa"),
    ];
    for (var, unit) in [
        ("u", "m/s"),
        ("v", "m/s"),
        ("z", "m²/s²"),
        ("t", "K"),
        ("q", "kg/kg"),
    ] {
        for level in PRESSURE_LEVELS_HPA {
            entries.push(ChannelEntry::level(var, unit, level));
        }
    }
    ChannelSchema::new(entries).expect("canonical schema is valid")
}

/// One atmospheric snapshot: `channels × n_lat × n_lon` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    schema: Arc<ChannelSchema>,
    grid: Arc<GridSpec>,
    values: Vec<f64>,
    timestamp: i64,
}

impl FieldState {
    pub fn new(
        schema: Arc<ChannelSchema>,
        grid: Arc<GridSpec>,
        values: Vec<f64>,
        timestamp: i64,
    ) -> Result<Self> {
        let expected = schema.total() * grid.points();
        if values.len() != expected {
            return Err(Error::Mismatch(format!(
                "field has {} values, schema × grid needs {expected}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "field",
                index,
            });
        }
        Ok(FieldState {
            schema,
            grid,
            values,
            timestamp,
        })
    }

    pub fn zeros(schema: Arc<ChannelSchema>, grid: Arc<GridSpec>, timestamp: i64) -> Self {
        let n = schema.total() * grid.points();
        FieldState {
            schema,
            grid,
            values: vec![0.0; n],
            timestamp,
        }
    }

    pub fn from_fn(
        schema: Arc<ChannelSchema>,
        grid: Arc<GridSpec>,
        timestamp: i64,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let (c, h, w) = (schema.total(), grid.n_lat(), grid.n_lon());
        let mut values = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for j in 0..h {
                for k in 0..w {
                    values.push(f(ci, j, k));
                }
            }
        }
        FieldState::new(schema, grid, values, timestamp)
    }

    pub fn schema(&self) -> &Arc<ChannelSchema> {
        &self.schema
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn with_timestamp(mut self, timestamp: i64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.points();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, j: usize, k: usize) -> f64 {
        self.values[(c * self.grid.n_lat() + j) * self.grid.n_lon() + k]
    }

    /// Same schema and grid, new values. Fails if any value is non-finite.
    pub fn with_values(&self, values: Vec<f64>, timestamp: i64) -> Result<Self> {
        FieldState::new(self.schema.clone(), self.grid.clone(), values, timestamp)
    }

    pub fn same_layout(&self, other: &FieldState) -> Result<()> {
        if self.schema != other.schema && *self.schema != *other.schema {
            return Err(Error::Mismatch("channel schemas differ".into()));
        }
        if self.grid != other.grid && *self.grid != *other.grid {
            return Err(Error::Mismatch("grids differ".into()));
        }
        Ok(())
    }
}

/// Per-channel mean and standard deviation in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(schema: &ChannelSchema, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let stats = NormStats {
            channels: schema.entries().iter().map(|e| e.name.clone()).collect(),
            mean,
            std,
        };
        stats.validate(schema)?;
        Ok(stats)
    }

    /// Pooled per-channel statistics over a set of snapshots. Channels whose
    /// spread falls below `min_std` are assigned `min_std`.
    pub fn from_states(states: &[FieldState], min_std: f64) -> Result<Self> {
        let first = states
            .first()
            .ok_or(Error::TooFewPoints { needed: 1, got: 0 })?;
        let schema = first.schema().clone();
        let n = first.grid().points();
        let mut mean = vec![0.0; schema.total()];
        let mut std = vec![0.0; schema.total()];
        for s in states {
            first.same_layout(s)?;
        }
        let count = (n * states.len()) as f64;
        for c in 0..schema.total() {
            let m = states.iter().flat_map(|s| s.channel(c)).sum::<f64>() / count;
            let v = states
                .iter()
                .flat_map(|s| s.channel(c))
                .map(|x| (x - m).powi(2))
                .sum::<f64>()
                / count;
            mean[c] = m;
            std[c] = v.sqrt().max(min_std);
        }
        NormStats::new(&schema, mean, std)
    }

    fn validate(&self, schema: &ChannelSchema) -> Result<()> {
        let names: Vec<&str> = schema.entries().iter().map(|e| e.name.as_str()).collect();
        if self.channels.len() != names.len()
            || self.mean.len() != names.len()
            || self.std.len() != names.len()
            || self.channels.iter().zip(&names).any(|(a, b)| a != b)
        {
            return Err(Error::Mismatch(
                "normalization stats do not match the field schema".into(),
            ));
        }
        for (name, &s) in self.channels.iter().zip(&self.std) {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::ZeroStd {
                    channel: name.clone(),
                    std: s,
                });
            }
        }
        Ok(())
    }

    pub fn normalize(&self, state: &FieldState) -> Result<FieldState> {
        self.apply(state, |x, m, s| (x - m) / s)
    }

    pub fn denormalize(&self, state: &FieldState) -> Result<FieldState> {
        self.apply(state, |x, m, s| x * s + m)
    }

    fn apply(&self, state: &FieldState, f: impl Fn(f64, f64, f64) -> f64) -> Result<FieldState> {
        self.validate(state.schema())?;
        let n = state.grid().points();
        let values = state
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = i / n;
                f(x, self.mean[c], self.std[c])
            })
            .collect();
        state.with_values(values, state.timestamp())
    }
}
