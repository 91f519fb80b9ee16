//! Autoregressive rollout evaluation.
//!
//! From each initial condition the model is stepped recursively, its own
//! prediction fed back as the next input, and every lead is scored against
//! truth per channel (latitude-weighted) and pooled.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fieldio::{encode_payload, read_field_shared, read_header, write_field};
use crate::forecaster::OneStepModel;
use crate::grid::{ChannelSchema, FieldState, GridSpec, POOLED, STEP_HOURS};
use crate::metrics::{area_weighted_rmse, pooled_rmse, MetricRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub run_id: String,
    pub ic_stride_hours: u32,
    pub max_lead_hours: u32,
    pub step_hours: u32,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            run_id: "run".into(),
            ic_stride_hours: 12,
            max_lead_hours: 240,
            step_hours: STEP_HOURS,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_hours != STEP_HOURS {
            return Err(Error::InvalidConfig(format!(
                "step must be {STEP_HOURS} h, got {}",
                self.step_hours
            )));
        }
        if self.ic_stride_hours == 0 || self.ic_stride_hours % self.step_hours != 0 {
            return Err(Error::InvalidConfig(format!(
                "IC stride {} h is not a positive multiple of the {} h step",
                self.ic_stride_hours, self.step_hours
            )));
        }
        if self.max_lead_hours == 0 || self.max_lead_hours % self.step_hours != 0 {
            return Err(Error::InvalidConfig(format!(
                "max lead {} h is not a positive multiple of the {} h step",
                self.max_lead_hours, self.step_hours
            )));
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '"']) {
            return Err(Error::InvalidConfig(format!(
                "run id `{}` must be non-empty plain text",
                self.run_id
            )));
        }
        Ok(())
    }

    /// `step, 2·step, …, max_lead`.
    pub fn leads(&self) -> Vec<u32> {
        (1..=self.max_lead_hours / self.step_hours)
            .map(|k| k * self.step_hours)
            .collect()
    }
}

/// Time-indexed truth states. Implementations must tolerate concurrent reads.
pub trait TruthSource: Send + Sync {
    /// First and last available timestamps, inclusive.
    fn window(&self) -> (i64, i64);

    fn state_at(&self, timestamp: i64) -> Result<FieldState>;

    /// Content fingerprint recorded in run manifests.
    fn checksum(&self) -> Result<String>;
}

/// Truth held in memory, keyed by timestamp.
#[derive(Debug, Clone, Default)]
pub struct MemoryTruth {
    states: BTreeMap<i64, FieldState>,
}

impl MemoryTruth {
    pub fn new(states: impl IntoIterator<Item = FieldState>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut first: Option<FieldState> = None;
        for s in states {
            if let Some(f) = &first {
                f.same_layout(&s)?;
            } else {
                first = Some(s.clone());
            }
            map.insert(s.timestamp(), s);
        }
        if map.is_empty() {
            return Err(Error::InvalidConfig(
                "truth source needs at least one state".into(),
            ));
        }
        Ok(MemoryTruth { states: map })
    }
}

impl TruthSource for MemoryTruth {
    fn window(&self) -> (i64, i64) {
        let first = *self.states.keys().next().expect("non-empty");
        let last = *self.states.keys().next_back().expect("non-empty");
        (first, last)
    }

    fn state_at(&self, timestamp: i64) -> Result<FieldState> {
        self.states
            .get(&timestamp)
            .cloned()
            .ok_or(Error::MissingTruth { timestamp })
    }

    fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (t, s) in &self.states {
            h.update(t.to_le_bytes());
            h.update(encode_payload(s.values()));
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Truth stored as one field file pair per timestamp in a directory.
#[derive(Debug, Clone)]
pub struct DirTruth {
    index: BTreeMap<i64, (PathBuf, String)>,
    schema: Arc<ChannelSchema>,
    grid: Arc<GridSpec>,
}

impl DirTruth {
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut stems: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .map(|p| p.with_extension(""))
            .collect();
        stems.sort();
        let mut index = BTreeMap::new();
        let mut layout: Option<(Arc<ChannelSchema>, Arc<GridSpec>)> = None;
        for stem in stems {
            let header = read_header(&stem)?;
            match &layout {
                None => {
                    layout = Some((
                        Arc::new(header.schema.clone()),
                        Arc::new(header.grid.clone()),
                    ))
                }
                Some((s, g)) if **s != header.schema || **g != header.grid => {
                    return Err(Error::Mismatch(format!(
                        "{} differs in schema or grid",
                        stem.display()
                    )));
                }
                Some(_) => {}
            }
            if index
                .insert(header.timestamp, (stem.clone(), header.sha256))
                .is_some()
            {
                return Err(Error::InvalidConfig(format!(
                    "duplicate truth timestamp {}",
                    header.timestamp
                )));
            }
        }
        let Some((schema, grid)) = layout else {
            return Err(Error::InvalidConfig(format!(
                "no truth fields in {}",
                dir.display()
            )));
        };
        Ok(DirTruth {
            index,
            schema,
            grid,
        })
    }

    pub fn schema(&self) -> &Arc<ChannelSchema> {
        &self.schema
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }
}

impl TruthSource for DirTruth {
    fn window(&self) -> (i64, i64) {
        (
            *self.index.keys().next().expect("non-empty"),
            *self.index.keys().next_back().expect("non-empty"),
        )
    }

    fn state_at(&self, timestamp: i64) -> Result<FieldState> {
        let (stem, _) = self
            .index
            .get(&timestamp)
            .ok_or(Error::MissingTruth { timestamp })?;
        read_field_shared(stem, Some(&self.schema), Some(&self.grid))
    }

    fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (t, (_, sha)) in &self.index {
            h.update(t.to_le_bytes());
            h.update(sha.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Writes `truth_<index>` field pairs for every state.
pub fn write_truth_dir(dir: &Path, states: &[FieldState]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in states.iter().enumerate() {
        write_field(&dir.join(format!("truth_{i:05}")), s)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergedIc {
    pub ic_timestamp: i64,
    pub lead_hours: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutput {
    /// Sorted by IC, lead, then schema channel order with the pooled score last.
    pub records: Vec<MetricRecord>,
    pub ics: Vec<i64>,
    pub dropped_ics: Vec<i64>,
    /// ICs whose rollout produced a non-finite state or score; their records
    /// stop before the first bad lead.
    pub diverged: Vec<DivergedIc>,
}

impl RolloutOutput {
    /// Fails on the first diverged IC.
    pub fn strict(self) -> Result<Vec<MetricRecord>> {
        match self.diverged.first() {
            Some(d) => Err(Error::Diverged {
                ic_timestamp: d.ic_timestamp,
                lead_hours: d.lead_hours,
            }),
            None => Ok(self.records),
        }
    }
}

fn ic_timestamps(window: (i64, i64), cfg: &RolloutConfig) -> Result<(Vec<i64>, Vec<i64>)> {
    let (first, last) = window;
    let stride = cfg.ic_stride_hours as i64;
    let span = cfg.max_lead_hours as i64;
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut t = first;
    while t <= last {
        if t + span <= last {
            kept.push(t);
        } else {
            dropped.push(t);
        }
        t += stride;
    }
    if kept.is_empty() {
        return Err(Error::MissingTruth {
            timestamp: first + span,
        });
    }
    if !dropped.is_empty() {
        warn!(
            "dropping {} IC(s) from {} h on: their {} h lead runs past the truth window ending at {last} h",
            dropped.len(),
            dropped[0],
            cfg.max_lead_hours
        );
    }
    Ok((kept, dropped))
}

struct IcOutcome {
    records: Vec<MetricRecord>,
    diverged: Option<DivergedIc>,
}

fn roll_one(
    model: &dyn OneStepModel,
    ic: FieldState,
    truth: &dyn TruthSource,
    cfg: &RolloutConfig,
    names: &[String],
) -> Result<IcOutcome> {
    let ic_t = ic.timestamp();
    let mut state = ic;
    let mut records = Vec::with_capacity(cfg.leads().len() * (names.len() + 1));
    for lead in cfg.leads() {
        state = match model.step(&state) {
            Ok(s) => s,
            Err(Error::NonFinite { .. }) => {
                return Ok(IcOutcome {
                    records,
                    diverged: Some(DivergedIc {
                        ic_timestamp: ic_t,
                        lead_hours: lead,
                    }),
                });
            }
            Err(e) => return Err(e),
        };
        let target = truth.state_at(ic_t + lead as i64)?;
        let scores = area_weighted_rmse(&state, &target)
            .and_then(|c| Ok((c, pooled_rmse(&state, &target)?)));
        let (per_channel, pooled) = match scores {
            Ok((c, p)) if p.is_finite() => (c, p),
            Ok(_) | Err(Error::NonFinite { .. }) => {
                return Ok(IcOutcome {
                    records,
                    diverged: Some(DivergedIc {
                        ic_timestamp: ic_t,
                        lead_hours: lead,
                    }),
                });
            }
            Err(e) => return Err(e),
        };
        let record = |channel: &str, rmse: f64| MetricRecord {
            run_id: cfg.run_id.clone(),
            ic_timestamp: ic_t,
            lead_hours: lead,
            channel: channel.to_string(),
            rmse,
        };
        records.extend(names.iter().zip(per_channel).map(|(n, r)| record(n, r)));
        records.push(record(POOLED, pooled));
    }
    Ok(IcOutcome {
        records,
        diverged: None,
    })
}

/// Rollout with initial conditions taken from `truth` itself.
pub fn run_rollout(
    model: &dyn OneStepModel,
    truth: &dyn TruthSource,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput> {
    run_rollout_from(model, truth, truth, cfg)
}

/// Rollout starting from `initial.state_at(ic)` and scored against `truth`.
/// ICs follow the truth window at the configured stride; ICs are processed
/// concurrently and results assembled in IC order.
pub fn run_rollout_from(
    model: &dyn OneStepModel,
    initial: &dyn TruthSource,
    truth: &dyn TruthSource,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput> {
    cfg.validate()?;
    let (ics, dropped_ics) = ic_timestamps(truth.window(), cfg)?;
    let probe = initial.state_at(ics[0])?;
    let schema = probe.schema().clone();
    let names: Vec<String> = schema
        .forecast_indices()
        .iter()
        .map(|&c| schema.entries()[c].name.clone())
        .collect();

    let outcomes: Vec<Result<IcOutcome>> = ics
        .par_iter()
        .map(|&t| {
            let ic = initial.state_at(t)?;
            roll_one(model, ic, truth, cfg, &names)
        })
        .collect();

    let mut records = Vec::new();
    let mut diverged = Vec::new();
    for o in outcomes {
        let o = o?;
        records.extend(o.records);
        diverged.extend(o.diverged);
    }
    Ok(RolloutOutput {
        records,
        ics,
        dropped_ics,
        diverged,
    })
}

/// Mean RMSE over ICs for one (run, lead, channel) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadMean {
    pub run_id: String,
    pub lead_hours: u32,
    pub channel: String,
    pub mean_rmse: f64,
    pub count: usize,
}

type CellKey = (String, u32, bool, String);

fn key(run_id: &str, lead: u32, channel: &str) -> CellKey {
    (
        run_id.to_string(),
        lead,
        channel == POOLED,
        channel.to_string(),
    )
}

fn finish(acc: BTreeMap<CellKey, (f64, usize)>) -> Vec<LeadMean> {
    acc.into_iter()
        .map(
            |((run_id, lead_hours, _, channel), (sum, count))| LeadMean {
                run_id,
                lead_hours,
                channel,
                mean_rmse: sum / count as f64,
                count,
            },
        )
        .collect()
}

/// Arithmetic mean over ICs per (run, lead, channel). Output is ordered by
/// run, lead, then channel name with the pooled score last.
pub fn reduce_over_ics(records: &[MetricRecord]) -> Result<Vec<LeadMean>> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("no metric records to reduce".into()));
    }
    let mut acc: BTreeMap<CellKey, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc
            .entry(key(&r.run_id, r.lead_hours, &r.channel))
            .or_default();
        e.0 += r.rmse;
        e.1 += 1;
    }
    Ok(finish(acc))
}

/// Merges partial reductions, weighting each mean by its IC count.
pub fn merge_reductions(parts: &[Vec<LeadMean>]) -> Result<Vec<LeadMean>> {
    let mut acc: BTreeMap<CellKey, (f64, usize)> = BTreeMap::new();
    for m in parts.iter().flatten() {
        let e = acc
            .entry(key(&m.run_id, m.lead_hours, &m.channel))
            .or_default();
        e.0 += m.mean_rmse * m.count as f64;
        e.1 += m.count;
    }
    if acc.is_empty() {
        return Err(Error::InvalidConfig("no reductions to merge".into()));
    }
    Ok(finish(acc))
}

/// `(lead, mean)` series for one run and channel, ordered by lead.
pub fn lead_series(means: &[LeadMean], run_id: &str, channel: &str) -> Vec<(u32, f64)> {
    let mut s: Vec<(u32, f64)> = means
        .iter()
        .filter(|m| m.run_id == run_id && m.channel == channel)
        .map(|m| (m.lead_hours, m.mean_rmse))
        .collect();
    s.sort_by_key(|p| p.0);
    s
}

/// Run manifest written beside `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config: RolloutConfig,
    pub model_name: String,
    pub model_params: usize,
    pub model_config: serde_json::Value,
    pub truth_checksum: String,
    pub ics: Vec<i64>,
    pub dropped_ics: Vec<i64>,
    pub diverged: Vec<DivergedIc>,
    pub decomposition: Option<serde_json::Value>,
}

/// Count of records per IC, used by callers checking the rectangular shape.
pub fn records_per_ic(records: &[MetricRecord]) -> HashMap<i64, usize> {
    let mut m = HashMap::new();
    for r in records {
        *m.entry(r.ic_timestamp).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::LinearSurrogate;
    use crate::grid::canonical_schema;
    use proptest::prelude::*;

    fn layout() -> (Arc<ChannelSchema>, Arc<GridSpec>) {
        (
            Arc::new(canonical_schema().subset(&["t2m", "z500", "u850"]).unwrap()),
            Arc::new(GridSpec::cell_centered(4, 8).unwrap()),
        )
    }

    fn constant_truth(value: f64, hours: i64) -> MemoryTruth {
        let (s, g) = layout();
        MemoryTruth::new(
            (0..=hours / 6).map(|k| {
                FieldState::from_fn(s.clone(), g.clone(), 6 * k, |_, _, _| value).unwrap()
            }),
        )
        .unwrap()
    }

    #[test]
    fn default_config_has_forty_leads() {
        let c = RolloutConfig::default();
        c.validate().unwrap();
        let leads = c.leads();
        assert_eq!(leads.len(), 40);
        assert_eq!((leads[0], leads[39]), (6, 240));
        assert!(RolloutConfig {
            ic_stride_hours: 9,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(RolloutConfig { step_hours: 3, ..c }.validate().is_err());
    }

    #[test]
    fn identity_on_constant_truth_scores_zero() {
        let truth = constant_truth(2.5, 264);
        let out = run_rollout(
            &LinearSurrogate::persistence(3),
            &truth,
            &RolloutConfig::default(),
        )
        .unwrap();
        // ICs at 0, 12, 24 fit a 240 h rollout inside 264 h
        assert_eq!(out.ics, vec![0, 12, 24]);
        assert_eq!(out.dropped_ics.len(), 20);
        assert_eq!(out.records.len(), 3 * 40 * 4);
        assert!(out.records.iter().all(|r| r.rmse == 0.0));
        assert_eq!(out.records[3].channel, POOLED);
        assert_eq!(out.records[0].channel, "t2m");
    }

    #[test]
    fn contraction_closed_form() {
        let zero = constant_truth(0.0, 240);
        let one = constant_truth(1.0, 240);
        let model = LinearSurrogate::new(0.5, vec![0.0; 3]).unwrap();
        let out = run_rollout_from(&model, &one, &zero, &RolloutConfig::default())
            .unwrap()
            .strict()
            .unwrap();
        assert_eq!(out.len(), 40 * 4);
        for r in &out {
            let expect = 0.5f64.powi((r.lead_hours / 6) as i32);
            assert!((r.rmse - expect).abs() <= 1e-9 * expect, "{r:?}");
        }
    }

    #[test]
    fn drift_closed_form() {
        let truth = constant_truth(1.0, 240);
        let d = 0.125;
        let model = LinearSurrogate::new(1.0, vec![d, -d, d]).unwrap();
        let out = run_rollout(&model, &truth, &RolloutConfig::default())
            .unwrap()
            .strict()
            .unwrap();
        for r in &out {
            let expect = (r.lead_hours / 6) as f64 * d;
            assert!((r.rmse - expect).abs() <= 1e-9 * expect);
        }
    }

    #[test]
    fn truth_too_short_names_timestamp() {
        let truth = constant_truth(0.0, 120);
        let err = run_rollout(
            &LinearSurrogate::persistence(3),
            &truth,
            &RolloutConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingTruth { timestamp: 240 }));
    }

    #[test]
    fn gap_in_truth_is_missing_data() {
        let (s, g) = layout();
        let states = (0..=40)
            .filter(|&k| k != 17)
            .map(|k| FieldState::zeros(s.clone(), g.clone(), 6 * k));
        let truth = MemoryTruth::new(states).unwrap();
        let err = run_rollout(
            &LinearSurrogate::persistence(3),
            &truth,
            &RolloutConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingTruth { timestamp: 102 }));
    }

    struct Exploding;

    impl OneStepModel for Exploding {
        fn step(&self, state: &FieldState) -> Result<FieldState> {
            let v: Vec<f64> = state.values().iter().map(|x| x * 1e100).collect();
            state.with_values(v, state.timestamp() + 6)
        }
        fn param_count(&self) -> usize {
            0
        }
        fn name(&self) -> &str {
            "exploding"
        }
    }

    #[test]
    fn divergence_stops_only_that_ic() {
        let truth = constant_truth(1.0, 252);
        let out = run_rollout(&Exploding, &truth, &RolloutConfig::default()).unwrap();
        assert_eq!(
            out.diverged,
            vec![
                DivergedIc {
                    ic_timestamp: 0,
                    lead_hours: 12
                },
                DivergedIc {
                    ic_timestamp: 12,
                    lead_hours: 12
                }
            ]
        );
        assert_eq!(out.records.len(), 2 * 4);
        assert!(matches!(
            out.strict(),
            Err(Error::Diverged {
                ic_timestamp: 0,
                lead_hours: 12
            })
        ));
    }

    #[test]
    fn directory_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (s, g) = layout();
        let states: Vec<FieldState> = (0..=41)
            .map(|k| {
                FieldState::from_fn(s.clone(), g.clone(), 6 * k, |c, j, _| (c + j) as f64).unwrap()
            })
            .collect();
        write_truth_dir(dir.path(), &states).unwrap();
        let disk = DirTruth::open(dir.path()).unwrap();
        let mem = MemoryTruth::new(states).unwrap();
        assert_eq!(disk.window(), (0, 246));
        assert_eq!(
            disk.state_at(30).unwrap().values(),
            mem.state_at(30).unwrap().values()
        );
        let cfg = RolloutConfig::default();
        let a = run_rollout(&LinearSurrogate::persistence(3), &disk, &cfg).unwrap();
        let b = run_rollout(&LinearSurrogate::persistence(3), &mem, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            disk.state_at(7),
            Err(Error::MissingTruth { timestamp: 7 })
        ));
    }

    fn rec(ic: i64, lead: u32, ch: &str, rmse: f64) -> MetricRecord {
        MetricRecord {
            run_id: "r".into(),
            ic_timestamp: ic,
            lead_hours: lead,
            channel: ch.into(),
            rmse,
        }
    }

    #[test]
    fn reduction_examples() {
        let one = vec![rec(0, 6, "t2m", 1.5)];
        assert_eq!(reduce_over_ics(&one).unwrap()[0].mean_rmse, 1.5);
        let two = vec![rec(0, 6, "t2m", 1.0), rec(12, 6, "t2m", 3.0)];
        let m = reduce_over_ics(&two).unwrap();
        assert_eq!((m[0].mean_rmse, m[0].count), (2.0, 2));
        assert!(reduce_over_ics(&[]).is_err());
    }

    proptest! {
        #[test]
        fn partition_merge_matches_one_shot(
            vals in proptest::collection::vec(0.0f64..10.0, 24),
            split in 1usize..23,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let chans = ["t2m", "z500", POOLED];
            let mut recs: Vec<MetricRecord> = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| rec((i / 6) as i64 * 12, 6 * (1 + (i % 2) as u32), chans[i % 3], v))
                .collect();
            let whole = reduce_over_ics(&recs).unwrap();
            recs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = reduce_over_ics(&recs).unwrap();
            let merged = merge_reductions(&[
                reduce_over_ics(&recs[..split]).unwrap(),
                reduce_over_ics(&recs[split..]).unwrap(),
            ]).unwrap();
            prop_assert_eq!(whole.len(), merged.len());
            for ((a, b), c) in whole.iter().zip(&merged).zip(&shuffled) {
                prop_assert_eq!((&a.channel, a.lead_hours, a.count), (&b.channel, b.lead_hours, b.count));
                prop_assert!((a.mean_rmse - b.mean_rmse).abs() <= 1e-12 * a.mean_rmse.max(1.0));
                prop_assert!((a.mean_rmse - c.mean_rmse).abs() <= 1e-12 * a.mean_rmse.max(1.0));
            }
        }
    }
}
