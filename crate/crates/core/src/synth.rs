//! Synthetic ground truth: additive power-law loss surfaces, IsoFLOP run
//! families with per-(lead, channel) errors, and truth trajectories.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fieldio::encode_payload;
use crate::grid::{ChannelSchema, FieldState, GridSpec, POOLED, STEP_HOURS};
use crate::metrics::MetricRecord;
use crate::rollout::TruthSource;
use crate::scaling::RunPoint;

pub const GENERATOR_VERSION: u32 = 1;

/// `(A, a, B, b)` replacing the base surface for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelOverride {
    pub amp_n: f64,
    pub exp_n: f64,
    pub amp_d: f64,
    pub exp_d: f64,
}

/// `ε(N, D) = E + A/N^a + B/D^b`, optionally times log-normal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub e_floor: f64,
    pub amp_n: f64,
    pub exp_n: f64,
    pub amp_d: f64,
    pub exp_d: f64,
    pub kappa: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub per_channel_overrides: BTreeMap<String, ChannelOverride>,
}

impl SurfaceSpec {
    pub fn chinchilla(a: f64, b: f64) -> Self {
        SurfaceSpec {
            e_floor: 0.0,
            amp_n: 400.0,
            exp_n: a,
            amp_d: 400.0,
            exp_d: b,
            kappa: 6.0,
            noise_sigma: 0.0,
            per_channel_overrides: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "surface {name} = {v} must be positive"
                )))
            }
        };
        pos("amp_n", self.amp_n)?;
        pos("exp_n", self.exp_n)?;
        pos("amp_d", self.amp_d)?;
        pos("exp_d", self.exp_d)?;
        pos("kappa", self.kappa)?;
        if !(self.e_floor.is_finite() && self.e_floor >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "surface e_floor = {} must be >= 0",
                self.e_floor
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma = {} must be >= 0",
                self.noise_sigma
            )));
        }
        for (ch, o) in &self.per_channel_overrides {
            for (name, v) in [
                ("amp_n", o.amp_n),
                ("exp_n", o.exp_n),
                ("amp_d", o.amp_d),
                ("exp_d", o.exp_d),
            ] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "override {ch}.{name} = {v} must be positive"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The base surface with `channel`'s override applied, if any.
    pub fn for_channel(&self, channel: &str) -> SurfaceSpec {
        let mut s = self.clone();
        s.per_channel_overrides.clear();
        if let Some(o) = self.per_channel_overrides.get(channel) {
            s.amp_n = o.amp_n;
            s.exp_n = o.exp_n;
            s.amp_d = o.amp_d;
            s.exp_d = o.exp_d;
        }
        s
    }

    /// Compute-optimal size on the noiseless surface:
    /// `N* = (a·A / (b·B·κ^b))^(1/(a+b)) · C^(b/(a+b))`.
    pub fn optimal_n(&self, c_flops: f64) -> f64 {
        let (a, b) = (self.exp_n, self.exp_d);
        (a * self.amp_n / (b * self.amp_d * self.kappa.powf(b))).powf(1.0 / (a + b))
            * c_flops.powf(b / (a + b))
    }

    fn noiseless(&self, n: f64, d: f64) -> f64 {
        self.e_floor + self.amp_n / n.powf(self.exp_n) + self.amp_d / d.powf(self.exp_d)
    }
}

/// Noiseless surface value. Requires `N, D > 0`.
pub fn surface_loss(spec: &SurfaceSpec, n: f64, d: f64) -> Result<f64> {
    if !(n > 0.0 && d > 0.0) {
        return Err(Error::NonPositive { value: n.min(d) });
    }
    Ok(spec.noiseless(n, d))
}

/// Surface value times `exp(σ·g)`, `g` a standard normal drawn from `rng`.
pub fn surface_loss_noisy<R: Rng>(spec: &SurfaceSpec, n: f64, d: f64, rng: &mut R) -> Result<f64> {
    let base = surface_loss(spec, n, d)?;
    if spec.noise_sigma == 0.0 {
        return Ok(base);
    }
    let g: f64 = rng.sample(StandardNormal);
    Ok(base * (spec.noise_sigma * g).exp())
}

/// Per-lead reshaping of a surface value:
/// `ε_lead = G(lead) · ε^φ(lead)` with `φ = 1 − flatten·lead/max_lead` and
/// `G = 1 + growth·lead/24`. Since `φ` scales `ln ε`, stage-2 slopes shrink
/// by `φ` toward long leads while stage-1 vertices stay put.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonModulation {
    pub growth: f64,
    pub flatten: f64,
}

impl Default for HorizonModulation {
    fn default() -> Self {
        HorizonModulation {
            growth: 0.25,
            flatten: 0.5,
        }
    }
}

impl HorizonModulation {
    pub const NONE: HorizonModulation = HorizonModulation {
        growth: 0.0,
        flatten: 0.0,
    };

    pub fn exponent(&self, lead: u32, max_lead: u32) -> f64 {
        1.0 - self.flatten * lead as f64 / max_lead as f64
    }

    pub fn gain(&self, lead: u32) -> f64 {
        1.0 + self.growth * lead as f64 / 24.0
    }

    pub fn apply(&self, eps: f64, lead: u32, max_lead: u32) -> f64 {
        self.gain(lead) * eps.powf(self.exponent(lead, max_lead))
    }
}

/// A (lead, channel) cell whose errors are mirrored through the budget optimum
/// so that stage 1 sees a concave profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRef {
    pub lead_hours: u32,
    pub channel: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    /// Increasing compute budgets.
    pub budgets: Vec<f64>,
    pub n_per_budget: usize,
    /// The `N` sweep spans `N*·10^(±span_decades)`.
    pub span_decades: f64,
    pub leads: Vec<u32>,
    /// Forecast channels; the pooled channel is always added.
    pub channels: Vec<String>,
    pub n_ics: usize,
    pub ic_stride_hours: u32,
    pub horizon: HorizonModulation,
    #[serde(default)]
    pub concave_cells: Vec<CellRef>,
    pub seed: u64,
}

impl FamilyConfig {
    /// Budgets `10^lo … 10^hi` (`count` of them, log-spaced).
    pub fn log_budgets(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        (0..count)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (count.max(2) - 1) as f64))
            .collect()
    }

    pub fn new(budgets: Vec<f64>, n_per_budget: usize, channels: &[&str]) -> Self {
        FamilyConfig {
            budgets,
            n_per_budget,
            span_decades: 1.0,
            leads: (1..=40).map(|k| k * STEP_HOURS).collect(),
            channels: channels.iter().map(|c| c.to_string()).collect(),
            n_ics: 1,
            ic_stride_hours: 12,
            horizon: HorizonModulation::default(),
            concave_cells: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.budgets.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidConfig("budgets must be positive".into()));
        }
        if self.budgets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(
                "budgets must be strictly increasing".into(),
            ));
        }
        if self.n_per_budget < 3 {
            return Err(Error::InvalidConfig(format!(
                "n_per_budget = {} must be >= 3",
                self.n_per_budget
            )));
        }
        if !(self.span_decades.is_finite() && self.span_decades > 0.0) {
            return Err(Error::InvalidConfig("span_decades must be positive".into()));
        }
        if self.leads.is_empty() || self.leads.iter().any(|l| *l == 0 || l % STEP_HOURS != 0) {
            return Err(Error::InvalidConfig(format!(
                "leads must be positive multiples of {STEP_HOURS} h"
            )));
        }
        if self.leads.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(
                "leads must be strictly increasing".into(),
            ));
        }
        if self.channels.iter().any(|c| c == POOLED || c.is_empty()) || self.channels.is_empty() {
            return Err(Error::InvalidConfig(
                "channels must be non-empty forecast channel names".into(),
            ));
        }
        if self.n_ics == 0 || self.ic_stride_hours == 0 {
            return Err(Error::InvalidConfig(
                "n_ics and ic_stride_hours must be positive".into(),
            ));
        }
        let h = self.horizon;
        if !(h.growth.is_finite()
            && h.growth >= 0.0
            && h.flatten.is_finite()
            && (0.0..1.0).contains(&h.flatten))
        {
            return Err(Error::InvalidConfig(
                "horizon growth must be >= 0 and flatten in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Analytic optimum of one budget on the base surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticOptimum {
    pub budget_id: String,
    pub c_flops: f64,
    pub n_star: f64,
    pub d_star: f64,
    pub eps_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub generator_version: u32,
    pub kind: String,
    pub seed: u64,
    pub surface: SurfaceSpec,
    pub family: FamilyConfig,
    pub horizon_model: String,
    pub noise_model: String,
    pub draw_order: String,
    pub analytic_optima: Vec<AnalyticOptimum>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub runs: Vec<RunPoint>,
    pub records: Vec<MetricRecord>,
    pub manifest: GeneratorManifest,
}

/// Generates an IsoFLOP family: for each budget a geometric `N` sweep centred
/// on the analytic `N*`, `D = C/(κN)`, and a metric record for every
/// (run, IC, lead, channel) including the pooled channel (base surface).
///
/// Noise draws come from one ChaCha8 stream in run, IC, lead, channel order.
pub fn make_isoflop_family(spec: &SurfaceSpec, cfg: &FamilyConfig) -> Result<SynthDataset> {
    spec.validate()?;
    cfg.validate()?;
    let max_lead = *cfg.leads.last().expect("validated non-empty");
    let mut channels = cfg.channels.clone();
    channels.push(POOLED.to_string());
    let specs: Vec<SurfaceSpec> = channels.iter().map(|c| spec.for_channel(c)).collect();
    let k = cfg.n_per_budget;

    let mut runs = Vec::with_capacity(cfg.budgets.len() * k);
    let mut analytic = Vec::with_capacity(cfg.budgets.len());
    for (bi, &c) in cfg.budgets.iter().enumerate() {
        let budget_id = format!("c{bi:02}");
        let n_star = spec.optimal_n(c);
        let d_star = c / (spec.kappa * n_star);
        analytic.push(AnalyticOptimum {
            budget_id: budget_id.clone(),
            c_flops: c,
            n_star,
            d_star,
            eps_star: spec.noiseless(n_star, d_star),
        });
        for ni in 0..k {
            let exponent = cfg.span_decades * (2.0 * ni as f64 / (k - 1) as f64 - 1.0);
            let n = n_star * 10f64.powf(exponent);
            let d = c / (spec.kappa * n);
            if !(d >= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "budget {c:e} too small: run with N = {n:e} gets D = {d:e} < 1 sample"
                )));
            }
            runs.push(RunPoint {
                run_id: format!("{budget_id}_n{ni:02}"),
                n_params: n,
                d_samples: d,
                c_flops: c,
                budget_id: budget_id.clone(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(runs.len() * cfg.n_ics * cfg.leads.len() * channels.len());
    for run in &runs {
        for ic in 0..cfg.n_ics {
            let ic_timestamp = (ic as u32 * cfg.ic_stride_hours) as i64;
            for &lead in &cfg.leads {
                for (ch, s) in channels.iter().zip(&specs) {
                    let base = surface_loss_noisy(s, run.n_params, run.d_samples, &mut rng)?;
                    let mut eps = cfg.horizon.apply(base, lead, max_lead);
                    if cfg
                        .concave_cells
                        .iter()
                        .any(|cell| cell.lead_hours == lead && &cell.channel == ch)
                    {
                        let n_opt = s.optimal_n(run.c_flops);
                        let opt = s.noiseless(n_opt, run.c_flops / (s.kappa * n_opt));
                        let opt = cfg.horizon.apply(opt, lead, max_lead);
                        eps = opt * opt / eps;
                    }
                    records.push(MetricRecord {
                        run_id: run.run_id.clone(),
                        ic_timestamp,
                        lead_hours: lead,
                        channel: ch.clone(),
                        rmse: eps,
                    });
                }
            }
        }
    }

    let manifest = GeneratorManifest {
        generator_version: GENERATOR_VERSION,
        kind: "isoflop-family".into(),
        seed: cfg.seed,
        surface: spec.clone(),
        family: cfg.clone(),
        horizon_model: format!(
            "eps_lead = (1 + growth*lead/24) * eps^(1 - flatten*lead/{max_lead}); growth = {}, flatten = {}",
            cfg.horizon.growth, cfg.horizon.flatten
        ),
        noise_model: "eps * exp(noise_sigma * g), g ~ N(0, 1)".into(),
        draw_order: "ChaCha8(seed); runs in order, then IC, lead, channel (pooled last)".into(),
        analytic_optima: analytic,
    };
    Ok(SynthDataset {
        runs,
        records,
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TruthKind {
    Constant,
    /// Multiplies forecast channels by `factor` every 6 h.
    Decaying {
        factor: f64,
    },
    /// Moves forecast channels one cell east every 6 h.
    Advecting,
}

impl FromStr for TruthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(TruthKind::Constant),
            "decaying" => Ok(TruthKind::Decaying { factor: 0.9 }),
            "advecting" => Ok(TruthKind::Advecting),
            other => Err(Error::InvalidConfig(format!(
                "unknown truth kind `{other}` (constant|decaying|advecting)"
            ))),
        }
    }
}

impl fmt::Display for TruthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruthKind::Constant => f.write_str("constant"),
            TruthKind::Decaying { .. } => f.write_str("decaying"),
            TruthKind::Advecting => f.write_str("advecting"),
        }
    }
}

/// Analytic truth trajectory over `[0, hours]` at 6 h spacing.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    kind: TruthKind,
    seed: u64,
    hours: i64,
    base: FieldState,
}

/// Seeded smooth pattern: a few zonal waves per channel under a `cos(lat)`
/// envelope plus a channel offset. Static channels get a fixed profile.
pub fn seeded_pattern(schema: Arc<ChannelSchema>, grid: Arc<GridSpec>, seed: u64) -> FieldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[(f64, f64); 3]> = (0..schema.total())
        .map(|_| {
            std::array::from_fn(|_| {
                (
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * std::f64::consts::TAU,
                )
            })
        })
        .collect();
    let offsets: Vec<f64> = (0..schema.total())
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let lat = grid.lat_values().to_vec();
    let n_lon = grid.n_lon() as f64;
    FieldState::from_fn(schema, grid, 0, |c, j, k| {
        let envelope = lat[j].to_radians().cos();
        let x = std::f64::consts::TAU * k as f64 / n_lon;
        let w: f64 = waves[c]
            .iter()
            .enumerate()
            .map(|(m, (amp, ph))| amp * ((m + 1) as f64 * x + ph).cos())
            .sum();
        offsets[c] + envelope * w
    })
    .expect("finite pattern")
}

/// Builds a deterministic truth source.
pub fn synth_truth(
    grid: Arc<GridSpec>,
    schema: Arc<ChannelSchema>,
    kind: TruthKind,
    seed: u64,
    hours: i64,
) -> Result<SyntheticTruth> {
    if hours < 0 || hours % STEP_HOURS as i64 != 0 {
        return Err(Error::InvalidConfig(format!(
            "truth span {hours} h must be a non-negative multiple of {STEP_HOURS}"
        )));
    }
    if let TruthKind::Decaying { factor } = kind {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "decay factor {factor} must be positive"
            )));
        }
    }
    let base = seeded_pattern(schema, grid, seed);
    Ok(SyntheticTruth {
        kind,
        seed,
        hours,
        base,
    })
}

impl SyntheticTruth {
    pub fn kind(&self) -> TruthKind {
        self.kind
    }

    pub fn initial(&self) -> &FieldState {
        &self.base
    }

    /// All states in the window, oldest first.
    pub fn states(&self) -> Result<Vec<FieldState>> {
        (0..=self.hours / STEP_HOURS as i64)
            .map(|k| self.state_at(k * STEP_HOURS as i64))
            .collect()
    }
}

impl TruthSource for SyntheticTruth {
    fn window(&self) -> (i64, i64) {
        (0, self.hours)
    }

    fn state_at(&self, timestamp: i64) -> Result<FieldState> {
        if timestamp < 0 || timestamp > self.hours || timestamp % STEP_HOURS as i64 != 0 {
            return Err(Error::MissingTruth { timestamp });
        }
        let steps = timestamp / STEP_HOURS as i64;
        let base = &self.base;
        let forecast: Vec<bool> = base
            .schema()
            .entries()
            .iter()
            .map(|e| e.is_forecast())
            .collect();
        let n_lon = base.grid().n_lon();
        let state = match self.kind {
            TruthKind::Constant => base.clone().with_timestamp(timestamp),
            TruthKind::Decaying { factor } => {
                let f = factor.powi(steps as i32);
                FieldState::from_fn(
                    base.schema().clone(),
                    base.grid().clone(),
                    timestamp,
                    |c, j, k| {
                        if forecast[c] {
                            base.get(c, j, k) * f
                        } else {
                            base.get(c, j, k)
                        }
                    },
                )?
            }
            TruthKind::Advecting => {
                let s = (steps as usize) % n_lon;
                FieldState::from_fn(
                    base.schema().clone(),
                    base.grid().clone(),
                    timestamp,
                    |c, j, k| {
                        if forecast[c] {
                            base.get(c, j, (k + n_lon - s) % n_lon)
                        } else {
                            base.get(c, j, k)
                        }
                    },
                )?
            }
        };
        Ok(state)
    }

    fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.kind)?);
        h.update(self.seed.to_le_bytes());
        h.update(self.hours.to_le_bytes());
        h.update(encode_payload(self.base.values()));
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::{EastwardAdvection, LinearSurrogate};
    use crate::grid::canonical_schema;
    use crate::metrics::area_weighted_rmse;
    use crate::rollout::{run_rollout, RolloutConfig};

    #[test]
    fn surface_examples() {
        let mut s = SurfaceSpec::chinchilla(0.5, 0.5);
        s.e_floor = 2.0;
        s.amp_n = 100.0;
        s.amp_d = 200.0;
        assert_eq!(surface_loss(&s, 100.0, 400.0).unwrap(), 22.0);
        assert!((surface_loss(&s, 1e300, 1e300).unwrap() - 2.0).abs() < 1e-12);
        assert!(surface_loss(&s, 0.0, 1.0).is_err());
        s.noise_sigma = 0.0;
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            surface_loss_noisy(&s, 5.0, 7.0, &mut r1).unwrap(),
            surface_loss_noisy(&s, 5.0, 7.0, &mut r2).unwrap()
        );
    }

    #[test]
    fn analytic_optimum_matches_grid_search() {
        for (a, b) in [(0.5, 0.5), (0.3, 0.6), (0.7, 0.4)] {
            let mut s = SurfaceSpec::chinchilla(a, b);
            s.amp_d = 1234.0;
            let c = 1e20;
            // brute force over ln N on a fine grid
            let n_ref = s.optimal_n(c);
            let (mut best, mut best_n) = (f64::INFINITY, 0.0);
            for i in 0..=200_000 {
                let n = n_ref * 10f64.powf(-3.0 + 6.0 * i as f64 / 200_000.0);
                let e = surface_loss(&s, n, c / (s.kappa * n)).unwrap();
                if e < best {
                    best = e;
                    best_n = n;
                }
            }
            assert!(
                (best_n / n_ref - 1.0).abs() < 1e-3,
                "a={a} b={b}: grid {best_n:e} vs formula {n_ref:e}"
            );
        }
    }

    #[test]
    fn family_counts_and_layout() {
        let cfg = FamilyConfig {
            leads: vec![6, 12],
            ..FamilyConfig::new(
                FamilyConfig::log_budgets(18.0, 21.0, 4),
                3,
                &["t2m", "z500"],
            )
        };
        let ds = make_isoflop_family(&SurfaceSpec::chinchilla(0.5, 0.5), &cfg).unwrap();
        assert_eq!(ds.runs.len(), 12);
        assert_eq!(ds.records.len(), 12 * 2 * 3);
        assert_eq!(ds.records[2].channel, POOLED);
        for r in &ds.runs {
            assert!((r.c_flops - 6.0 * r.n_params * r.d_samples).abs() <= 1e-9 * r.c_flops);
        }
        // the middle run of each budget sits on the analytic optimum
        for (b, o) in ds.manifest.analytic_optima.iter().enumerate() {
            assert!((ds.runs[3 * b + 1].n_params / o.n_star - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn family_rejects_bad_config() {
        let spec = SurfaceSpec::chinchilla(0.5, 0.5);
        let cfg = FamilyConfig::new(vec![1e20, 1e19], 3, &["t2m"]);
        assert!(make_isoflop_family(&spec, &cfg).is_err());
        let cfg = FamilyConfig::new(vec![1e19, 1e20], 2, &["t2m"]);
        assert!(make_isoflop_family(&spec, &cfg).is_err());
        let cfg = FamilyConfig::new(vec![10.0, 100.0, 1000.0], 3, &["t2m"]);
        assert!(make_isoflop_family(&spec, &cfg)
            .unwrap_err()
            .to_string()
            .contains("too small"));
    }

    #[test]
    fn family_is_bit_deterministic_with_noise() {
        let mut spec = SurfaceSpec::chinchilla(0.5, 0.5);
        spec.noise_sigma = 0.05;
        let cfg = FamilyConfig {
            seed: 9,
            ..FamilyConfig::new(FamilyConfig::log_budgets(18.0, 20.0, 3), 5, &["t2m"])
        };
        let a = make_isoflop_family(&spec, &cfg).unwrap();
        let b = make_isoflop_family(&spec, &cfg).unwrap();
        assert_eq!(a, b);
        let c = make_isoflop_family(&spec, &FamilyConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn horizon_modulation_shape() {
        let h = HorizonModulation {
            growth: 0.5,
            flatten: 0.5,
        };
        assert_eq!(h.exponent(240, 240), 0.5);
        assert_eq!(h.gain(24), 1.5);
        assert_eq!(HorizonModulation::NONE.apply(3.5, 120, 240), 3.5);
    }

    fn layout() -> (Arc<ChannelSchema>, Arc<GridSpec>) {
        (
            Arc::new(canonical_schema().subset(&["t2m", "z500"]).unwrap()),
            Arc::new(GridSpec::cell_centered(6, 12).unwrap()),
        )
    }

    #[test]
    fn truth_kinds() {
        let (s, g) = layout();
        let c = synth_truth(g.clone(), s.clone(), TruthKind::Constant, 3, 48).unwrap();
        assert_eq!(
            c.state_at(0).unwrap().values(),
            c.state_at(48).unwrap().values()
        );
        assert!(matches!(
            c.state_at(54),
            Err(Error::MissingTruth { timestamp: 54 })
        ));
        assert!("spiral".parse::<TruthKind>().is_err());
        let a = synth_truth(g, s, TruthKind::Advecting, 3, 72).unwrap();
        let x0 = a.state_at(0).unwrap();
        let x12 = a.state_at(72).unwrap();
        // 12 steps on a 12-column grid wrap around exactly
        assert_eq!(x0.values(), x12.values());
        assert_eq!(a.state_at(6).unwrap().get(1, 2, 5), x0.get(1, 2, 4));
    }

    #[test]
    fn advecting_truth_with_roll_model_scores_zero() {
        let (s, g) = layout();
        let truth = synth_truth(g, s, TruthKind::Advecting, 11, 264).unwrap();
        let out = run_rollout(&EastwardAdvection, &truth, &RolloutConfig::default())
            .unwrap()
            .strict()
            .unwrap();
        assert!(out.iter().all(|r| r.rmse == 0.0));
    }

    #[test]
    fn decaying_truth_vs_identity_closed_form() {
        let (s, g) = layout();
        let truth = synth_truth(g, s, TruthKind::Decaying { factor: 0.9 }, 5, 240).unwrap();
        let x0 = truth.initial().clone();
        let zero = FieldState::zeros(x0.schema().clone(), x0.grid().clone(), 0);
        let profile = area_weighted_rmse(&x0, &zero).unwrap();
        let out = run_rollout(
            &LinearSurrogate::persistence(2),
            &truth,
            &RolloutConfig::default(),
        )
        .unwrap()
        .strict()
        .unwrap();
        for r in out.iter().filter(|r| r.channel != POOLED) {
            let c = if r.channel == "t2m" { 0 } else { 1 };
            let expect = (1.0 - 0.9f64.powi((r.lead_hours / 6) as i32)).abs() * profile[c];
            assert!(
                (r.rmse - expect).abs() <= 1e-9 * expect,
                "{r:?} vs {expect}"
            );
        }
    }

    #[test]
    fn truth_checksum_tracks_seed() {
        let (s, g) = layout();
        let a = synth_truth(g.clone(), s.clone(), TruthKind::Constant, 1, 24).unwrap();
        let b = synth_truth(g.clone(), s.clone(), TruthKind::Constant, 1, 24).unwrap();
        let c = synth_truth(g, s, TruthKind::Constant, 2, 24).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
    }
}
