use std::sync::Arc;

use rollscale::grid::{canonical_schema, GridSpec, STEP_HOURS};
use rollscale::metrics::write_metrics_csv;
use rollscale::report::{write_atomic, BundleManifest};
use rollscale::rollout::{write_truth_dir, DirTruth, TruthSource};
use rollscale::scaling::{write_runs_csv, DEFAULT_KAPPA};
use rollscale::synth::{
    make_isoflop_family, synth_truth, CellRef, ChannelOverride, FamilyConfig, HorizonModulation,
    SurfaceSpec, TruthKind,
};
use serde_json::json;

use super::{write_json, Context, MANIFEST};
use crate::config::{FamilySection, SurfaceSection};
use crate::error::{CliError, CliResult};
use crate::SynthArgs;

pub fn run(ctx: &Context, args: &SynthArgs) -> CliResult<()> {
    let kind = args
        .kind
        .clone()
        .or_else(|| ctx.file.synth.kind.clone())
        .unwrap_or_else(|| "isoflop".into());
    match kind.as_str() {
        "isoflop" => isoflop(ctx),
        "truth" => truth(ctx),
        other => Err(CliError::Usage(format!(
            "unknown synth kind `{other}` (isoflop|truth)"
        ))),
    }
}

/// Resolves the surface; the returned note is set when kappa fell back to
/// its default.
pub fn surface_from(s: &SurfaceSection) -> (SurfaceSpec, Option<String>) {
    let base = SurfaceSpec::chinchilla(0.5, 0.5);
    let note = s
        .kappa
        .is_none()
        .then(|| format!("kappa not set; using default {DEFAULT_KAPPA}"));
    let spec = SurfaceSpec {
        e_floor: s.e_floor.unwrap_or(base.e_floor),
        amp_n: s.amp_n.unwrap_or(base.amp_n),
        exp_n: s.exp_n.unwrap_or(base.exp_n),
        amp_d: s.amp_d.unwrap_or(base.amp_d),
        exp_d: s.exp_d.unwrap_or(base.exp_d),
        kappa: s.kappa.unwrap_or(DEFAULT_KAPPA),
        noise_sigma: s.noise_sigma.unwrap_or(0.0),
        per_channel_overrides: Default::default(),
    };
    let overrides = s
        .overrides
        .iter()
        .map(|(ch, o)| {
            let ov = ChannelOverride {
                amp_n: o.amp_n.unwrap_or(spec.amp_n),
                exp_n: o.exp_n.unwrap_or(spec.exp_n),
                amp_d: o.amp_d.unwrap_or(spec.amp_d),
                exp_d: o.exp_d.unwrap_or(spec.exp_d),
            };
            (ch.clone(), ov)
        })
        .collect();
    (
        SurfaceSpec {
            per_channel_overrides: overrides,
            ..spec
        },
        note,
    )
}

pub fn family_from(f: &FamilySection, seed: u64) -> CliResult<FamilyConfig> {
    let budgets = match (&f.budgets, f.budget_decades) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "[synth.family]: set `budgets` or `budget_decades`, not both".into(),
            ))
        }
        (Some(b), None) => b.clone(),
        (None, Some((lo, hi, n))) => FamilyConfig::log_budgets(lo, hi, n),
        (None, None) => FamilyConfig::log_budgets(18.0, 21.0, 5),
    };
    let default_channels = ["t2m", "z500"];
    let channels: Vec<&str> = match &f.channels {
        Some(c) => c.iter().map(String::as_str).collect(),
        None => default_channels.to_vec(),
    };
    let mut cfg = FamilyConfig::new(budgets, f.n_per_budget.unwrap_or(7), &channels);
    if let Some(s) = f.span_decades {
        cfg.span_decades = s;
    }
    match (&f.leads, f.max_lead_hours) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "[synth.family]: set `leads` or `max_lead_hours`, not both".into(),
            ))
        }
        (Some(l), None) => cfg.leads = l.clone(),
        (None, Some(m)) => cfg.leads = (1..=m / STEP_HOURS).map(|k| k * STEP_HOURS).collect(),
        (None, None) => {}
    }
    if let Some(n) = f.n_ics {
        cfg.n_ics = n;
    }
    if let Some(s) = f.ic_stride_hours {
        cfg.ic_stride_hours = s;
    }
    let d = HorizonModulation::default();
    cfg.horizon = HorizonModulation {
        growth: f.horizon_growth.unwrap_or(d.growth),
        flatten: f.horizon_flatten.unwrap_or(d.flatten),
    };
    cfg.concave_cells = f
        .concave_cells
        .iter()
        .map(|c| CellRef {
            lead_hours: c.lead_hours,
            channel: c.channel.clone(),
        })
        .collect();
    cfg.seed = seed;
    Ok(cfg)
}

fn isoflop(ctx: &Context) -> CliResult<()> {
    let seed = ctx.seed.unwrap_or(0);
    let (spec, note) = surface_from(&ctx.file.synth.surface);
    if let Some(n) = &note {
        log::info!("{n}");
    }
    let family = family_from(&ctx.file.synth.family, seed)?;
    let data = make_isoflop_family(&spec, &family)?;
    let out = ctx.prepare_out()?;

    let mut buf = Vec::new();
    write_runs_csv(&mut buf, &data.runs)?;
    write_atomic(&out.join("runs.csv"), &buf)?;
    buf.clear();
    write_metrics_csv(&mut buf, &data.records)?;
    write_atomic(&out.join("metrics.csv"), &buf)?;
    write_json(&out.join("generator_manifest.json"), &data.manifest)?;

    let mut m = BundleManifest::new("synth", json!({ "kind": "isoflop", "seed": seed }));
    m.notes.extend(note);
    m.record_outputs(&out, MANIFEST)?;
    m.write(&out.join(MANIFEST))?;
    log::info!(
        "wrote {} runs and {} metric rows to {}",
        data.runs.len(),
        data.records.len(),
        out.display()
    );
    Ok(())
}

fn truth(ctx: &Context) -> CliResult<()> {
    let t = &ctx.file.synth.truth;
    let seed = ctx.seed.unwrap_or(0);
    let kind = match t
        .kind
        .as_deref()
        .unwrap_or("constant")
        .parse::<TruthKind>()?
    {
        TruthKind::Decaying { factor } => TruthKind::Decaying {
            factor: t.decay_factor.unwrap_or(factor),
        },
        k => k,
    };
    let grid = Arc::new(GridSpec::cell_centered(
        t.n_lat.unwrap_or(8),
        t.n_lon.unwrap_or(16),
    )?);
    let names: Vec<&str> = match &t.channels {
        Some(c) => c.iter().map(String::as_str).collect(),
        None => vec!["t2m", "u10m", "z500"],
    };
    let mut schema = canonical_schema().subset(&names)?;
    if t.static_inputs.unwrap_or(false) {
        schema = schema.with_static_inputs()?;
    }
    let hours = t.hours.unwrap_or(480);
    let source = synth_truth(grid.clone(), Arc::new(schema), kind, seed, hours)?;
    let out = ctx.prepare_out()?;
    let truth_dir = out.join("truth");
    write_truth_dir(&truth_dir, &source.states()?)?;
    let checksum = DirTruth::open(&truth_dir)?.checksum()?;

    let settings = json!({
        "kind": "truth",
        "truth_kind": kind,
        "seed": seed,
        "hours": hours,
        "grid": [grid.n_lat(), grid.n_lon()],
        "channels": names,
        "truth_checksum": checksum,
    });
    let mut m = BundleManifest::new("synth", settings);
    m.record_outputs(&out, MANIFEST)?;
    m.write(&out.join(MANIFEST))?;
    log::info!(
        "wrote {} truth states to {}",
        hours / STEP_HOURS as i64 + 1,
        truth_dir.display()
    );
    Ok(())
}
