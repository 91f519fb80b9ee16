use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use rollscale::grid::{canonical_schema, POOLED};
use rollscale::metrics::{error_growth, read_metrics_csv, MetricRecord};
use rollscale::report::{
    digest_file, failures_csv, fit_figures, growth_panels, rmse_panels, verify_pairs, write_atomic,
    write_figure, BundleManifest, Figure,
};
use rollscale::rollout::{lead_series, reduce_over_ics};
use rollscale::scaling::{read_runs_csv, sweep, Covariate, FitReport, SweepConfig, DEFAULT_KAPPA};
use serde_json::json;

use super::{file_token, label, require, write_json, Context, MANIFEST};
use crate::error::{CliError, CliResult};
use crate::{DeriveArgs, FitArgs, ReportArgs};

fn read_metrics(path: &Path) -> CliResult<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| rollscale::Error::io(path, e))?;
    Ok(read_metrics_csv(f)?)
}

pub fn derive(ctx: &Context, args: &DeriveArgs) -> CliResult<()> {
    let sec = &ctx.file.derive;
    let metrics_path = require(
        args.metrics.clone().or_else(|| sec.metrics.clone()),
        "--metrics",
    )?;
    let only = args.run_id.clone().or_else(|| sec.run_id.clone());
    let smooth = args.smooth.or(sec.smooth).unwrap_or(1);

    let mut records = read_metrics(&metrics_path)?;
    if let Some(id) = &only {
        records.retain(|r| &r.run_id == id);
        if records.is_empty() {
            return Err(rollscale::Error::InvalidConfig(format!(
                "run `{id}` not found in metrics"
            ))
            .into());
        }
    }
    let means = reduce_over_ics(&records)?;
    let mut runs: Vec<&str> = Vec::new();
    for r in &records {
        if !runs.contains(&r.run_id.as_str()) {
            runs.push(&r.run_id);
        }
    }
    let schema = canonical_schema();
    let mut figures = Vec::new();
    for run in &runs {
        let mut channels: Vec<&str> = Vec::new();
        for m in means.iter().filter(|m| m.run_id == *run) {
            if !channels.contains(&m.channel.as_str()) {
                channels.push(&m.channel);
            }
        }
        let mut curves = Vec::with_capacity(channels.len());
        for ch in channels {
            let series = lead_series(&means, run, ch);
            if series.len() < 2 {
                return Err(rollscale::Error::InvalidConfig(format!(
                    "run `{run}`, channel `{ch}` has a single lead; error growth needs at least two"
                ))
                .into());
            }
            curves.push(error_growth(ch, &series)?.smoothed(smooth));
        }
        let token = file_token(run);
        figures.push((
            format!("panels_rmse_{token}"),
            Figure::Panels(rmse_panels(&means, run, &schema)),
        ));
        figures.push((
            format!("panels_growth_{token}"),
            Figure::Panels(growth_panels(&curves, &schema)),
        ));
    }

    let out = ctx.prepare_out()?;
    for (stem, fig) in &figures {
        write_figure(&out, stem, fig)?;
    }
    let mut m = BundleManifest::new("derive", json!({ "run_id": only, "smooth": smooth }));
    m.inputs
        .push(digest_file(&metrics_path, &label(&metrics_path))?);
    m.record_outputs(&out, MANIFEST)?;
    m.write(&out.join(MANIFEST))?;
    log::info!(
        "derived error growth for {} run(s) -> {}",
        runs.len(),
        out.display()
    );
    Ok(())
}

pub fn fit(ctx: &Context, args: &FitArgs) -> CliResult<()> {
    let sec = &ctx.file.fit;
    let runs_path = require(args.runs.clone().or_else(|| sec.runs.clone()), "--runs")?;
    let metrics_path = require(
        args.metrics.clone().or_else(|| sec.metrics.clone()),
        "--metrics",
    )?;
    let covariates: Vec<Covariate> = match args.covariate.clone().or_else(|| sec.covariates.clone())
    {
        Some(list) => list
            .iter()
            .map(|c| c.trim().parse())
            .collect::<rollscale::Result<_>>()?,
        None => Covariate::ALL.to_vec(),
    };
    if covariates.is_empty() {
        return Err(CliError::Usage("no covariates selected".into()));
    }
    let mut notes = Vec::new();
    let kappa = match args.kappa.or(sec.kappa) {
        Some(k) => k,
        None => {
            let n = format!("kappa not set; using default {DEFAULT_KAPPA}");
            log::info!("{n}");
            notes.push(n);
            DEFAULT_KAPPA
        }
    };
    let cfg = SweepConfig {
        covariates,
        leads: args.leads.clone().or_else(|| sec.leads.clone()),
        channels: args.channels.clone().or_else(|| sec.channels.clone()),
        kappa,
    };

    let runs =
        read_runs_csv(File::open(&runs_path).map_err(|e| rollscale::Error::io(&runs_path, e))?)?;
    let records = read_metrics(&metrics_path)?;
    let result = sweep(&runs, &records, &cfg)?;

    let alloc_lead = args
        .alloc_lead
        .or(sec.alloc_lead)
        .unwrap_or(result.leads[0]);
    let alloc_channel = args
        .alloc_channel
        .clone()
        .or_else(|| sec.alloc_channel.clone())
        .unwrap_or_else(|| {
            if result.channels.iter().any(|c| c == POOLED) {
                POOLED.to_string()
            } else {
                result.channels[0].clone()
            }
        });
    let report = FitReport::build(&result, kappa, alloc_lead, &alloc_channel);

    let out = ctx.prepare_out()?;
    write_json(&out.join("fit_report.json"), &report)?;
    for (stem, fig) in fit_figures(&result) {
        write_figure(&out, &stem, &fig)?;
    }
    write_atomic(&out.join("failures.csv"), failures_csv(&result)?.as_bytes())?;

    let settings = json!({
        "covariates": result.covariates,
        "leads": result.leads,
        "channels": result.channels,
        "kappa": kappa,
        "alloc_lead": alloc_lead,
        "alloc_channel": alloc_channel,
    });
    let mut m = BundleManifest::new("fit", settings);
    m.inputs.push(digest_file(&runs_path, &label(&runs_path))?);
    m.inputs
        .push(digest_file(&metrics_path, &label(&metrics_path))?);
    m.notes = notes;
    m.record_outputs(&out, MANIFEST)?;
    m.write(&out.join(MANIFEST))?;

    let n_fail = result.failures().count();
    if n_fail > 0 {
        log::warn!("{n_fail} cell(s) failed; see failures.csv");
    }
    match (&report.allocation, &report.allocation_failure) {
        (Some(a), _) => log::info!(
            "allocation at {alloc_lead} h / {alloc_channel}: alpha = {:.4}, beta = {:.4}, alpha+beta = {:.4}{}",
            a.alpha,
            a.beta,
            a.alpha_plus_beta,
            if a.consistent { "" } else { " (outside tolerance)" }
        ),
        (None, Some(f)) => log::warn!("allocation fit failed: {f}"),
        (None, None) => {}
    }
    log::info!("fit bundle -> {}", out.display());
    Ok(())
}

pub fn report(ctx: &Context, args: &ReportArgs) -> CliResult<()> {
    let dir = args
        .bundle
        .clone()
        .or_else(|| ctx.file.report.bundle.clone())
        .or_else(|| ctx.out.clone())
        .ok_or_else(|| CliError::Usage("missing --bundle".into()))?;
    let mut problems = Vec::new();

    let checks = verify_pairs(&dir)?;
    for c in checks.iter().filter(|c| !c.ok) {
        problems.push(format!(
            "{}: {}",
            c.stem,
            c.reason.as_deref().unwrap_or("mismatch")
        ));
    }
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| rollscale::Error::io(&manifest_path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text).map_err(rollscale::Error::from)?;
    for o in &manifest.outputs {
        match digest_file(&dir.join(&o.path), &o.path) {
            Ok(d) if d.sha256 == o.sha256 => {}
            Ok(_) => problems.push(format!("{}: checksum differs from manifest", o.path)),
            Err(_) => problems.push(format!("{}: listed in manifest but missing", o.path)),
        }
    }
    for i in &manifest.inputs {
        match digest_file(Path::new(&i.path), &i.path) {
            Ok(d) if d.sha256 == i.sha256 => {}
            Ok(_) => problems.push(format!("input {}: checksum differs from manifest", i.path)),
            Err(_) => log::warn!("input {} is not available; skipping its checksum", i.path),
        }
    }

    let mut text = String::new();
    writeln!(text, "bundle: {}", dir.display()).ok();
    writeln!(
        text,
        "command: {} (tool {})",
        manifest.command, manifest.tool_version
    )
    .ok();
    writeln!(
        text,
        "figures: {} paired, {} problem(s)",
        checks.len(),
        problems.len()
    )
    .ok();
    writeln!(
        text,
        "note: pooled RMSE is unweighted over all channels and grid points"
    )
    .ok();
    let fit_path = dir.join("fit_report.json");
    if fit_path.exists() {
        let raw =
            std::fs::read_to_string(&fit_path).map_err(|e| rollscale::Error::io(&fit_path, e))?;
        let rep: FitReport = serde_json::from_str(&raw).map_err(rollscale::Error::from)?;
        fit_summary(&rep, &mut text);
    }
    for p in &problems {
        writeln!(text, "problem: {p}").ok();
    }
    if problems.is_empty() {
        writeln!(text, "status: ok").ok();
    }
    // a closed pipe downstream is not an error worth reporting
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(format!(
            "{} problem(s) in {}",
            problems.len(),
            dir.display()
        )))
    }
}

fn fit_summary(rep: &FitReport, s: &mut String) {
    s.push_str("\n| covariate | lead (h) | slope | r2 |\n|---|---|---|---|\n");
    for (cov, leads) in &rep.covariates {
        for (lead, channels) in leads {
            if let Some(c) = channels.get(POOLED) {
                let slope = c.b.map_or("failed".to_string(), |b| format!("{b:.4}"));
                let r2 = c.r2.map_or("n/a".to_string(), |r| format!("{r:.6}"));
                writeln!(s, "| {cov} | {lead} | {slope} | {r2} |").ok();
            }
        }
    }
    if let Some(a) = &rep.allocation {
        writeln!(
            s,
            "\nallocation: alpha = {:.4}, beta = {:.4}, alpha+beta = {:.4} over {} budgets",
            a.alpha, a.beta, a.alpha_plus_beta, a.n_budgets
        )
        .ok();
    }
}
