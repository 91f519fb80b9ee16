use std::path::Path;
use std::sync::Mutex;

use rollscale::decomp::{
    comm_volume, decomposed_forward, max_relative_deviation, DecompLayout, ShiftStrategy,
};
use rollscale::forecaster::{
    EastwardAdvection, LinearSurrogate, OneStepModel, SwinConfig, SwinModel,
};
use rollscale::grid::FieldState;
use rollscale::metrics::write_metrics_csv;
use rollscale::report::{digest_file, write_atomic, BundleManifest};
use rollscale::rollout::{run_rollout, DirTruth, RolloutConfig, RunManifest, TruthSource};
use serde::Deserialize;
use serde_json::json;

use super::{label, require, write_json, Context, MANIFEST};
use crate::error::{CliError, CliResult};
use crate::RolloutArgs;

/// Relative deviation allowed between decomposed and sequential passes.
pub const VERIFY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Drift {
    Uniform(f64),
    PerChannel(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Swin(SwinConfig),
    Linear { rho: f64, drift: Drift },
    Persistence,
    Advection,
}

pub fn load_model_spec(path: &Path) -> CliResult<(ModelSpec, serde_json::Value)> {
    let text = std::fs::read_to_string(path).map_err(|e| rollscale::Error::io(path, e))?;
    let value: serde_json::Value = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    let spec = serde_json::from_value(value.clone())
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((spec, value))
}

/// Routes every step through the simulated ranks; with `verify` each step is
/// also run sequentially and the worst deviation is kept.
struct Decomposed {
    model: SwinModel,
    layout: DecompLayout,
    strategy: ShiftStrategy,
    verify: bool,
    worst: Mutex<f64>,
}

impl OneStepModel for Decomposed {
    fn step(&self, state: &FieldState) -> rollscale::Result<FieldState> {
        let (out, _) = decomposed_forward(&self.model, state, self.layout, self.strategy)?;
        if self.verify {
            let reference = self.model.forward(state)?;
            let dev = max_relative_deviation(out.values(), reference.values());
            let mut w = self.worst.lock().expect("poisoned");
            *w = w.max(dev);
        }
        Ok(out)
    }

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn name(&self) -> &str {
        "swin"
    }
}

fn build(
    spec: &ModelSpec,
    truth: &DirTruth,
    seed: Option<u64>,
) -> CliResult<Box<dyn OneStepModel>> {
    let n_forecast = truth.schema().n_forecast();
    Ok(match spec {
        ModelSpec::Swin(cfg) => {
            let mut cfg = cfg.clone();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Box::new(SwinModel::new(
                cfg,
                truth.schema().clone(),
                truth.grid().clone(),
            )?)
        }
        ModelSpec::Linear { rho, drift } => {
            let drift = match drift {
                Drift::Uniform(d) => vec![*d; n_forecast],
                Drift::PerChannel(v) => v.clone(),
            };
            Box::new(LinearSurrogate::new(*rho, drift)?)
        }
        ModelSpec::Persistence => Box::new(LinearSurrogate::persistence(n_forecast)),
        ModelSpec::Advection => Box::new(EastwardAdvection),
    })
}

pub fn run(ctx: &Context, args: &RolloutArgs) -> CliResult<()> {
    let sec = &ctx.file.rollout;
    let model_path = require(args.model.clone().or_else(|| sec.model.clone()), "--model")?;
    let truth_path = require(args.truth.clone().or_else(|| sec.truth.clone()), "--truth")?;
    let d = RolloutConfig::default();
    let cfg = RolloutConfig {
        run_id: args
            .run_id
            .clone()
            .or_else(|| sec.run_id.clone())
            .unwrap_or(d.run_id),
        ic_stride_hours: args
            .ic_stride_hours
            .or(sec.ic_stride_hours)
            .unwrap_or(d.ic_stride_hours),
        max_lead_hours: args
            .max_lead_hours
            .or(sec.max_lead_hours)
            .unwrap_or(d.max_lead_hours),
        step_hours: d.step_hours,
    };
    let strict = args.strict || sec.strict.unwrap_or(false);
    if ctx.verify && ctx.layout.is_none() {
        return Err(CliError::Usage(
            "--verify needs a decomposition layout (--layout dp,sp1,sp2,tp)".into(),
        ));
    }

    let (spec, spec_value) = load_model_spec(&model_path)?;
    let truth = DirTruth::open(&truth_path)?;
    let out = ctx.prepare_out()?;

    let decomposed = match ctx.layout {
        None => None,
        Some(layout) => {
            let ModelSpec::Swin(c) = &spec else {
                return Err(CliError::Usage(
                    "a decomposition layout needs a `swin` model".into(),
                ));
            };
            let mut c = c.clone();
            if let Some(s) = ctx.seed {
                c.seed = s;
            }
            let model = SwinModel::new(c, truth.schema().clone(), truth.grid().clone())?;
            Some(Decomposed {
                model,
                layout,
                strategy: ctx.strategy,
                verify: ctx.verify,
                worst: Mutex::new(0.0),
            })
        }
    };
    let plain;
    let model: &dyn OneStepModel = match &decomposed {
        Some(d) => d,
        None => {
            plain = build(&spec, &truth, ctx.seed)?;
            plain.as_ref()
        }
    };

    let output = run_rollout(model, &truth, &cfg)?;
    for d in &output.diverged {
        log::warn!(
            "IC {} h diverged at lead {} h",
            d.ic_timestamp,
            d.lead_hours
        );
    }
    if strict {
        if let Some(d) = output.diverged.first() {
            return Err(rollscale::Error::Diverged {
                ic_timestamp: d.ic_timestamp,
                lead_hours: d.lead_hours,
            }
            .into());
        }
    }

    let mut decomposition = None;
    if let Some(d) = &decomposed {
        // one pass from the first IC gives a deterministic trace to inspect
        let first = truth.state_at(output.ics[0])?;
        let (_, trace) = decomposed_forward(&d.model, &first, d.layout, d.strategy)?;
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf)?;
        write_atomic(&out.join("comm_trace.jsonl"), &buf)?;
        let worst = *d.worst.lock().expect("poisoned");
        let mut info = json!({
            "layout": d.layout,
            "strategy": d.strategy.to_string(),
            "world_size": d.layout.world_size(),
            "comm_volume_first_step": comm_volume(&trace),
            "comm_events_first_step": trace.events.len(),
        });
        if d.verify {
            log::info!("max relative deviation (decomposed vs sequential) = {worst:e}");
            info["max_relative_deviation"] = json!(worst);
            info["verify_tolerance"] = json!(VERIFY_TOLERANCE);
        }
        decomposition = Some(info);
    }

    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &output.records)?;
    write_atomic(&out.join("metrics.csv"), &buf)?;
    let run_manifest = RunManifest {
        schema_version: 1,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        model_name: model.name().to_string(),
        model_params: model.param_count(),
        model_config: spec_value,
        truth_checksum: truth.checksum()?,
        ics: output.ics.clone(),
        dropped_ics: output.dropped_ics.clone(),
        diverged: output.diverged.clone(),
        decomposition: decomposition.clone(),
    };
    write_json(&out.join("run_manifest.json"), &run_manifest)?;

    let mut m = BundleManifest::new("rollout", json!({ "run_id": cfg.run_id, "strict": strict }));
    m.inputs
        .push(digest_file(&model_path, &label(&model_path))?);
    m.notes.push(format!(
        "truth {} checksum {}",
        label(&truth_path),
        run_manifest.truth_checksum
    ));
    m.record_outputs(&out, MANIFEST)?;
    m.write(&out.join(MANIFEST))?;
    log::info!(
        "{} ICs, {} records, {} diverged -> {}",
        output.ics.len(),
        output.records.len(),
        output.diverged.len(),
        out.display()
    );

    if let Some(info) = &decomposition {
        if let Some(worst) = info.get("max_relative_deviation").and_then(|v| v.as_f64()) {
            if !(worst < VERIFY_TOLERANCE) {
                return Err(CliError::Verify(format!(
                    "decomposed forward deviates from sequential by {worst:e} (tolerance {VERIFY_TOLERANCE:e})"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_specs_parse() {
        let s: ModelSpec =
            serde_json::from_str(r#"{"kind":"linear","rho":0.5,"drift":0.1}"#).unwrap();
        assert_eq!(
            s,
            ModelSpec::Linear {
                rho: 0.5,
                drift: Drift::Uniform(0.1)
            }
        );
        let s: ModelSpec =
            serde_json::from_str(r#"{"kind":"linear","rho":1,"drift":[0.1,0.2]}"#).unwrap();
        assert!(matches!(
            s,
            ModelSpec::Linear {
                drift: Drift::PerChannel(_),
                ..
            }
        ));
        let s: ModelSpec = serde_json::from_str(
            r#"{"kind":"swin","patch":[2,2],"embed_dim":8,"depth":2,"heads":2,"window":[2,2],"mlp_ratio":2.0,"seed":42}"#,
        )
        .unwrap();
        assert_eq!(s, ModelSpec::Swin(SwinConfig::tiny(42)));
        assert!(serde_json::from_str::<ModelSpec>(r#"{"kind":"persistence"}"#).is_ok());
        assert!(serde_json::from_str::<ModelSpec>(r#"{"kind":"cnn"}"#).is_err());
    }
}
