pub mod analysis;
pub mod rollout;
pub mod synth;

use std::path::{Path, PathBuf};

use rollscale::decomp::{DecompLayout, ShiftStrategy};
use rollscale::report::write_atomic;
use serde::Serialize;

use crate::config::FileConfig;
use crate::error::{CliError, CliResult};
use crate::GlobalArgs;

pub const MANIFEST: &str = "manifest.json";

/// Global settings after merging flags over the config file.
pub struct Context {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
    pub verify: bool,
    pub layout: Option<DecompLayout>,
    pub strategy: ShiftStrategy,
    pub file: FileConfig,
}

impl Context {
    pub fn new(g: &GlobalArgs, file: FileConfig) -> CliResult<Self> {
        let split = [g.dp, g.sp1, g.sp2, g.tp];
        let layout = match (&g.layout, split.iter().any(Option::is_some)) {
            (Some(_), true) => {
                return Err(CliError::Usage(
                    "give either --layout or --dp/--sp1/--sp2/--tp, not both".into(),
                ))
            }
            (Some(text), false) => Some(DecompLayout::parse(text)?),
            (None, true) => {
                let text = split.map(|v| v.unwrap_or(1).to_string()).join(",");
                Some(DecompLayout::parse(&text)?)
            }
            (None, false) => file
                .layout
                .as_deref()
                .map(DecompLayout::parse)
                .transpose()?,
        };
        let strategy = g
            .strategy
            .as_deref()
            .or(file.strategy.as_deref())
            .map(str::parse::<ShiftStrategy>)
            .transpose()?
            .unwrap_or(ShiftStrategy::Halo);
        Ok(Context {
            seed: g.seed.or(file.seed),
            out: g.out.clone().or_else(|| file.out.clone()),
            force: g.force || file.force.unwrap_or(false),
            verify: g.verify || file.verify.unwrap_or(false),
            layout,
            strategy,
            file,
        })
    }

    /// Output directory, created if needed; refuses a non-empty one unless
    /// `--force` was given.
    pub fn prepare_out(&self) -> CliResult<PathBuf> {
        let out = self
            .out
            .clone()
            .ok_or_else(|| CliError::Usage("--out (or `out` in the config) is required".into()))?;
        if out.exists() {
            let non_empty = std::fs::read_dir(&out)
                .map_err(|e| rollscale::Error::io(&out, e))?
                .next()
                .is_some();
            if non_empty && !self.force {
                return Err(CliError::Usage(format!(
                    "output directory {} is not empty (pass --force to write into it)",
                    out.display()
                )));
            }
        }
        std::fs::create_dir_all(&out).map_err(|e| rollscale::Error::io(&out, e))?;
        Ok(out)
    }
}

pub fn require(value: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    value.ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(rollscale::Error::from)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// File-name-safe form of a run id.
pub fn file_token(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// Display form of an input path for manifests.
pub fn label(p: &Path) -> String {
    p.display().to_string()
}
