//! One-step forecasters `x(t + 6 h) = f(x(t))` with a single-step input history.

mod swin;
mod tensor;

pub(crate) use swin::seam_segments;
pub use swin::{
    gelu, rms_norm, BlockWeights, Linear, SwinConfig, SwinModel, SwinWeights, WindowTokens, RMS_EPS,
};
pub(crate) use tensor::wrap_shift;
pub use tensor::{cyclic_shift, PatchTensor};

use crate::decomp::DecompLayout;
use crate::error::{Error, Result};
use crate::grid::{FieldState, STEP_HOURS};

/// Advances a state by one 6 h step. Implementations are immutable after
/// construction, so one model may serve concurrent rollouts.
pub trait OneStepModel: Send + Sync {
    /// Output keeps schema and grid; timestamp advances by 6 h.
    fn step(&self, state: &FieldState) -> Result<FieldState>;

    fn param_count(&self) -> usize;

    fn name(&self) -> &str;
}

/// `x ↦ ρ·x + drift` per forecast channel. Static channels pass through.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    rho: f64,
    drift: Vec<f64>,
}

impl LinearSurrogate {
    /// `drift` has one entry per forecast channel.
    pub fn new(rho: f64, drift: Vec<f64>) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "contraction factor {rho} outside (0, 1]"
            )));
        }
        if drift.is_empty() || drift.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidConfig(
                "drift must be a non-empty list of finite values".into(),
            ));
        }
        Ok(LinearSurrogate { rho, drift })
    }

    pub fn persistence(channels: usize) -> Self {
        LinearSurrogate {
            rho: 1.0,
            drift: vec![0.0; channels],
        }
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }
}

impl OneStepModel for LinearSurrogate {
    fn step(&self, state: &FieldState) -> Result<FieldState> {
        let forecast = state.schema().forecast_indices();
        if forecast.len() != self.drift.len() {
            return Err(Error::Mismatch(format!(
                "surrogate has {} drifts, state has {} forecast channels",
                self.drift.len(),
                forecast.len()
            )));
        }
        let n = state.grid().points();
        let mut values = state.values().to_vec();
        for (&c, &d) in forecast.iter().zip(&self.drift) {
            for v in &mut values[c * n..(c + 1) * n] {
                *v = self.rho * *v + d;
            }
        }
        state.with_values(values, state.timestamp() + STEP_HOURS as i64)
    }

    fn param_count(&self) -> usize {
        self.drift.len() + 1
    }

    fn name(&self) -> &str {
        "linear"
    }
}

/// Moves every forecast channel one grid cell east per step (periodic).
/// Matches the `advecting` synthetic truth exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EastwardAdvection;

impl OneStepModel for EastwardAdvection {
    fn step(&self, state: &FieldState) -> Result<FieldState> {
        let (h, w) = (state.grid().n_lat(), state.grid().n_lon());
        let mut values = state.values().to_vec();
        for c in state.schema().forecast_indices() {
            for j in 0..h {
                for k in 0..w {
                    values[(c * h + j) * w + (k + 1) % w] = state.get(c, j, k);
                }
            }
        }
        state.with_values(values, state.timestamp() + STEP_HOURS as i64)
    }

    fn param_count(&self) -> usize {
        0
    }

    fn name(&self) -> &str {
        "advection"
    }
}

/// Stored activations per token, per block, in units of `E`: norm, q, k, v,
/// attention output, projection, norm, two MLP tensors at `mlp_ratio·E`,
/// MLP output. Evaluates to 16 at `mlp_ratio = 4`.
pub fn kappa_act(cfg: &SwinConfig) -> f64 {
    8.0 + 2.0 * cfg.mlp_ratio
}

/// Activation elements held per spatial worker:
/// `B · ⌈H_p/sp1⌉ · ⌈W_p/sp2⌉ · E · depth · κ_act`.
pub fn activation_footprint_with(
    cfg: &SwinConfig,
    batch: usize,
    patch_grid: (usize, usize),
    layout: &DecompLayout,
    kappa_act: f64,
) -> f64 {
    let hl = patch_grid.0.div_ceil(layout.sp1);
    let wl = patch_grid.1.div_ceil(layout.sp2);
    (batch * hl * wl * cfg.embed_dim * cfg.depth) as f64 * kappa_act
}

pub fn activation_footprint(
    cfg: &SwinConfig,
    batch: usize,
    patch_grid: (usize, usize),
    layout: &DecompLayout,
) -> f64 {
    activation_footprint_with(cfg, batch, patch_grid, layout, kappa_act(cfg))
}
