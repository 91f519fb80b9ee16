use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    distributed_roll, halo_exchange, sharded_attention, sharded_mlp, CommTrace, DecompLayout,
    Decomposition, LocalTensor,
};
use crate::error::{Error, Result};
use crate::forecaster::{
    rms_norm, seam_segments, BlockWeights, PatchTensor, SwinConfig, SwinModel, WindowTokens,
};
use crate::grid::{FieldState, STEP_HOURS};

/// How shifted-window blocks obtain tokens owned by neighbouring ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftStrategy {
    /// Exchange a half-window halo, evaluate every overlapping shifted window
    /// locally and keep the owned tokens.
    Halo,
    /// Roll the global tensor across ranks, attend in local windows, roll back.
    Roll,
}

impl FromStr for ShiftStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "halo" => Ok(ShiftStrategy::Halo),
            "roll" => Ok(ShiftStrategy::Roll),
            other => Err(Error::InvalidConfig(format!(
                "unknown shift strategy `{other}` (halo|roll)"
            ))),
        }
    }
}

impl fmt::Display for ShiftStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftStrategy::Halo => "halo",
            ShiftStrategy::Roll => "roll",
        })
    }
}

/// `max |a − b| / max |b|`.
pub fn max_relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

struct Ctx<'a> {
    cfg: &'a SwinConfig,
    decomp: &'a Decomposition,
    trace: CommTrace,
}

impl Ctx<'_> {
    fn attend(
        &mut self,
        block: &BlockWeights,
        spatial: usize,
        tokens: &[f64],
        segments: &[Option<u8>],
    ) -> Result<Vec<f64>> {
        let base = self.decomp.global_rank(spatial);
        let (out, t) = sharded_attention(
            block,
            self.cfg,
            WindowTokens { tokens, segments },
            self.decomp.layout.tp,
            base,
        )?;
        self.trace.extend(t);
        Ok(out)
    }

    /// Windows aligned to each rank's subdomain in (possibly shifted)
    /// coordinates.
    fn local_windows(
        &mut self,
        block: &BlockWeights,
        hs: &[LocalTensor],
        shift_h: usize,
    ) -> Result<Vec<LocalTensor>> {
        let [wh, ww] = self.cfg.window;
        let hp = self.decomp.patch_grid.0;
        let mut out = Vec::with_capacity(hs.len());
        for local in hs {
            let s = local.sub;
            let mut attn = PatchTensor::zeros(s.rows, s.cols, self.cfg.embed_dim);
            for mr in 0..s.rows / wh {
                let segments = seam_segments(self.cfg, (s.r0 + mr * wh) / wh, shift_h, hp);
                for mc in 0..s.cols / ww {
                    let tokens = local.data.block(mr * wh, mc * ww, wh, ww);
                    let o = self.attend(block, s.rank, &tokens.data, &segments)?;
                    attn.set_block(
                        mr * wh,
                        mc * ww,
                        &PatchTensor::from_vec(wh, ww, self.cfg.embed_dim, o)?,
                    );
                }
            }
            out.push(LocalTensor { sub: s, data: attn });
        }
        Ok(out)
    }

    fn roll_windows(
        &mut self,
        block: &BlockWeights,
        hs: &[LocalTensor],
        shift: (usize, usize),
    ) -> Result<Vec<LocalTensor>> {
        let (sh, sw) = (shift.0 as i64, shift.1 as i64);
        let (shifted, t) = distributed_roll(hs, (-sh, -sw), self.decomp)?;
        self.trace.extend(t);
        let attn = self.local_windows(block, &shifted, shift.0)?;
        let (back, t) = distributed_roll(&attn, (sh, sw), self.decomp)?;
        self.trace.extend(t);
        Ok(back)
    }

    fn halo_windows(
        &mut self,
        block: &BlockWeights,
        hs: &[LocalTensor],
        shift: (usize, usize),
    ) -> Result<Vec<LocalTensor>> {
        let [wh, ww] = self.cfg.window;
        let (hh, hw) = DecompLayout::halo_for_shift(self.cfg.window, shift);
        let mut with_halo = self.decomp.clone();
        with_halo.layout = with_halo.layout.with_halo(hh, hw);
        let (halos, t) = halo_exchange(hs, &with_halo)?;
        self.trace.extend(t);
        let e = self.cfg.embed_dim;
        let mut out = Vec::with_capacity(halos.len());
        for h in &halos {
            let s = h.sub;
            let mut attn = PatchTensor::zeros(s.rows, s.cols, e);
            // window origins sit at ≡ shift (mod win); with halo = win − shift
            // the first overlapping window starts at extended index 0
            let n_r = s.rows / wh + usize::from(shift.0 > 0);
            let n_c = s.cols / ww + usize::from(shift.1 > 0);
            for mr in 0..n_r {
                let segments: Vec<Option<u8>> = (0..wh * ww)
                    .map(|t| h.valid_rows[mr * wh + t / ww].then_some(0))
                    .collect();
                for mc in 0..n_c {
                    let tokens = h.data.block(mr * wh, mc * ww, wh, ww);
                    let o = self.attend(block, s.rank, &tokens.data, &segments)?;
                    for t in 0..wh * ww {
                        let (er, ec) = (mr * wh + t / ww, mc * ww + t % ww);
                        let (Some(a), Some(b)) = (er.checked_sub(hh), ec.checked_sub(hw)) else {
                            continue;
                        };
                        if a < s.rows && b < s.cols {
                            attn.token_mut(a, b).copy_from_slice(&o[t * e..(t + 1) * e]);
                        }
                    }
                }
            }
            out.push(LocalTensor { sub: s, data: attn });
        }
        Ok(out)
    }
}

/// One forward pass of `model` (on an already-normalised state) executed on
/// the simulated ranks of `layout`. Returns the predicted state and every
/// inter-rank message.
pub fn decomposed_forward(
    model: &SwinModel,
    state: &FieldState,
    layout: DecompLayout,
    strategy: ShiftStrategy,
) -> Result<(FieldState, CommTrace)> {
    model.check_input(state)?;
    let cfg = model.config();
    let weights = model.weights();
    let patch_grid = model.patch_grid();
    let decomp = Decomposition::new(patch_grid, cfg.window, layout)?;
    if cfg.heads % layout.tp != 0 {
        return Err(Error::Indivisible {
            dim: "tp",
            detail: format!("{} heads over {} shards", cfg.heads, layout.tp),
        });
    }
    let e = cfg.embed_dim;
    let [ph, pw] = cfg.patch;

    let mut buf = vec![0.0; state.schema().total() * ph * pw];
    let mut xs: Vec<LocalTensor> = decomp
        .subs
        .iter()
        .map(|s| {
            let mut data = PatchTensor::zeros(s.rows, s.cols, e);
            for a in 0..s.rows {
                for b in 0..s.cols {
                    weights.gather_patch(cfg, state, s.r0 + a, s.c0 + b, &mut buf);
                    weights.embed.forward(&buf, data.token_mut(a, b));
                }
            }
            LocalTensor { sub: *s, data }
        })
        .collect();

    let mut ctx = Ctx {
        cfg,
        decomp: &decomp,
        trace: CommTrace::default(),
    };
    for (index, block) in weights.blocks.iter().enumerate() {
        let shift = cfg.shift_for(index, patch_grid);
        let hs: Vec<LocalTensor> = xs
            .iter()
            .map(|x| {
                let mut data = PatchTensor::zeros(x.data.h, x.data.w, e);
                for (src, dst) in x.data.data.chunks(e).zip(data.data.chunks_mut(e)) {
                    rms_norm(src, &block.norm1, dst);
                }
                LocalTensor { sub: x.sub, data }
            })
            .collect();
        let attn = match (shift, strategy) {
            ((0, 0), _) => ctx.local_windows(block, &hs, 0)?,
            (_, ShiftStrategy::Roll) => ctx.roll_windows(block, &hs, shift)?,
            (_, ShiftStrategy::Halo) => ctx.halo_windows(block, &hs, shift)?,
        };
        for (x, a) in xs.iter_mut().zip(&attn) {
            for (xv, av) in x.data.data.iter_mut().zip(&a.data.data) {
                *xv += av;
            }
            let mut normed = vec![0.0; x.data.data.len()];
            for (src, dst) in x.data.data.chunks(e).zip(normed.chunks_mut(e)) {
                rms_norm(src, &block.norm2, dst);
            }
            let (m, t) = sharded_mlp(
                block,
                cfg,
                &normed,
                layout.tp,
                decomp.global_rank(x.sub.rank),
            )?;
            ctx.trace.extend(t);
            for (xv, mv) in x.data.data.iter_mut().zip(&m) {
                *xv += mv;
            }
        }
    }

    let mut values = state.values().to_vec();
    let forecast = state.schema().forecast_indices();
    for x in &xs {
        for a in 0..x.sub.rows {
            for b in 0..x.sub.cols {
                weights.unembed_patch(
                    cfg,
                    x.data.token(a, b),
                    x.sub.r0 + a,
                    x.sub.c0 + b,
                    &forecast,
                    state.grid(),
                    &mut values,
                );
            }
        }
    }
    let out = state.with_values(values, state.timestamp() + STEP_HOURS as i64)?;
    Ok((out, ctx.trace))
}
