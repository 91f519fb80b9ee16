//! Forward-only shifted-window transformer on latitude–longitude fields.
//!
//! patch embed → `depth` × [RMSNorm → windowed MSA → residual → RMSNorm → MLP
//! → residual] → patch unembed. Odd blocks shift the window partition by half
//! a window. Windows wrap east–west; rows that wrap across the north/south
//! seam are masked from each other.
//!
//! Weights come from a ChaCha8 stream seeded with `SwinConfig::seed`, drawn in
//! a fixed order (see [`SwinWeights::generate`]), so a config reproduces its
//! model bit-for-bit.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{cyclic_shift, PatchTensor};
use super::OneStepModel;
use crate::error::{Error, Result};
use crate::grid::{ChannelSchema, FieldState, GridSpec, NormStats, STEP_HOURS};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwinConfig {
    /// `(p_h, p_w)` grid cells per patch.
    pub patch: [usize; 2],
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// `(win_h, win_w)` in patches.
    pub window: [usize; 2],
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl SwinConfig {
    pub fn tiny(seed: u64) -> Self {
        SwinConfig {
            patch: [2, 2],
            embed_dim: 8,
            depth: 2,
            heads: 2,
            window: [2, 2],
            mlp_ratio: 2.0,
            seed,
        }
    }

    pub fn patch_grid(&self, grid: &GridSpec) -> Result<(usize, usize)> {
        let [ph, pw] = self.patch;
        if ph == 0 || pw == 0 {
            return Err(Error::InvalidConfig("patch size must be positive".into()));
        }
        if grid.n_lat() % ph != 0 || grid.n_lon() % pw != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch {ph}x{pw} does not tile a {}x{} grid",
                grid.n_lat(),
                grid.n_lon()
            )));
        }
        Ok((grid.n_lat() / ph, grid.n_lon() / pw))
    }

    pub fn validate(&self, grid: &GridSpec) -> Result<(usize, usize)> {
        let (hp, wp) = self.patch_grid(grid)?;
        let [wh, ww] = self.window;
        if wh == 0 || ww == 0 || hp % wh != 0 || wp % ww != 0 {
            return Err(Error::InvalidConfig(format!(
                "window {wh}x{ww} does not tile the {hp}x{wp} patch grid"
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || !self.mlp_ratio.is_finite() {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok((hp, wp))
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Half-window shift used by odd blocks; zero along a dimension the window
    /// already spans.
    pub fn shift_for(&self, block: usize, patch_grid: (usize, usize)) -> (usize, usize) {
        if block % 2 == 0 {
            return (0, 0);
        }
        let [wh, ww] = self.window;
        let sh = if wh < patch_grid.0 { wh / 2 } else { 0 };
        let sw = if ww < patch_grid.1 { ww / 2 } else { 0 };
        (sh, sw)
    }
}

/// Dense layer, `weight` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    #[inline]
    pub fn apply_row(&self, o: usize, x: &[f64]) -> f64 {
        self.bias[o] + dot(self.row(o), x)
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            *y = self.apply_row(o, x);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1: Vec<f64>,
    /// Rows `[0, E)` queries, `[E, 2E)` keys, `[2E, 3E)` values; head `h`
    /// owns rows `h·d .. (h+1)·d` inside each third.
    pub qkv: Linear,
    /// Per-head temperature applied to cosine attention logits.
    pub logit_scale: Vec<f64>,
    /// `heads × (2·win_h − 1)·(2·win_w − 1)` relative position bias.
    pub rel_bias: Vec<f64>,
    pub proj: Linear,
    pub norm2: Vec<f64>,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwinWeights {
    pub embed: Linear,
    pub blocks: Vec<BlockWeights>,
    pub unembed: Linear,
    pub param_count: usize,
}

struct Draw {
    rng: ChaCha8Rng,
    count: usize,
}

impl Draw {
    fn uniform(&mut self, n: usize, scale: f64, offset: f64) -> Vec<f64> {
        self.count += n;
        (0..n)
            .map(|_| offset + scale * (2.0 * self.rng.random::<f64>() - 1.0))
            .collect()
    }

    fn linear(&mut self, in_dim: usize, out_dim: usize) -> Linear {
        let weight = self.uniform(in_dim * out_dim, 1.0 / (in_dim as f64).sqrt(), 0.0);
        let bias = self.uniform(out_dim, 0.02, 0.0);
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }
}

impl SwinWeights {
    /// Draw order: embed (W, b); per block norm1, qkv (W, b), logit_scale,
    /// rel_bias, proj (W, b), norm2, fc1 (W, b), fc2 (W, b); unembed (W, b).
    /// Matrices ~ U(±1/√fan_in), biases ~ U(±0.02), norm gains ~ 1 + U(±0.1),
    /// temperatures ~ 10 + U(±1), relative biases ~ U(±0.02).
    pub fn generate(cfg: &SwinConfig, in_channels: usize, out_channels: usize) -> Self {
        let mut d = Draw {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            count: 0,
        };
        let [ph, pw] = cfg.patch;
        let e = cfg.embed_dim;
        let [wh, ww] = cfg.window;
        let table = (2 * wh - 1) * (2 * ww - 1);
        let embed = d.linear(in_channels * ph * pw, e);
        let blocks = (0..cfg.depth)
            .map(|_| BlockWeights {
                norm1: d.uniform(e, 0.1, 1.0),
                qkv: d.linear(e, 3 * e),
                logit_scale: d.uniform(cfg.heads, 1.0, 10.0),
                rel_bias: d.uniform(cfg.heads * table, 0.02, 0.0),
                proj: d.linear(e, e),
                norm2: d.uniform(e, 0.1, 1.0),
                fc1: d.linear(e, cfg.hidden_dim()),
                fc2: d.linear(cfg.hidden_dim(), e),
            })
            .collect();
        let unembed = d.linear(e, out_channels * ph * pw);
        SwinWeights {
            embed,
            blocks,
            unembed,
            param_count: d.count,
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rms_norm(x: &[f64], gain: &[f64], out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// One attention window. Token `t` sits at `(t / win_w, t % win_w)`. Tokens
/// attend only within their segment; `None` marks a token that is not part of
/// the field (an invalid halo cell) and is skipped entirely.
pub struct WindowTokens<'a> {
    pub tokens: &'a [f64],
    pub segments: &'a [Option<u8>],
}

impl BlockWeights {
    fn rel_index(win: [usize; 2], q: usize, k: usize) -> usize {
        let [wh, ww] = win;
        let (qr, qc) = (q / ww, q % ww);
        let (kr, kc) = (k / ww, k % ww);
        let dr = qr + wh - 1 - kr;
        let dc = qc + ww - 1 - kc;
        dr * (2 * ww - 1) + dc
    }

    /// Accumulates the output projection of heads in `heads` into `out`
    /// (`n_tok × E`, expected zeroed by the caller). The projection bias is
    /// not added; tensor-parallel shards sum their partials first.
    pub fn attention_partial(
        &self,
        cfg: &SwinConfig,
        win: WindowTokens<'_>,
        heads: Range<usize>,
        out: &mut [f64],
    ) {
        let e = cfg.embed_dim;
        let d = cfg.head_dim();
        let n = win.segments.len();
        let table = (2 * cfg.window[0] - 1) * (2 * cfg.window[1] - 1);
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        let mut logits = vec![0.0; n];
        let mut head_out = vec![0.0; d];
        for h in heads {
            for t in 0..n {
                if win.segments[t].is_none() {
                    continue;
                }
                let x = &win.tokens[t * e..(t + 1) * e];
                for i in 0..d {
                    q[t * d + i] = self.qkv.apply_row(h * d + i, x);
                    k[t * d + i] = self.qkv.apply_row(e + h * d + i, x);
                    v[t * d + i] = self.qkv.apply_row(2 * e + h * d + i, x);
                }
                l2_normalize(&mut q[t * d..(t + 1) * d]);
                l2_normalize(&mut k[t * d..(t + 1) * d]);
            }
            let scale = self.logit_scale[h];
            let bias = &self.rel_bias[h * table..(h + 1) * table];
            for tq in 0..n {
                let Some(seg) = win.segments[tq] else {
                    continue;
                };
                let qv = &q[tq * d..(tq + 1) * d];
                let mut max = f64::NEG_INFINITY;
                for tk in 0..n {
                    if win.segments[tk] != Some(seg) {
                        logits[tk] = f64::NEG_INFINITY;
                        continue;
                    }
                    let l = scale * dot(qv, &k[tk * d..(tk + 1) * d])
                        + bias[Self::rel_index(cfg.window, tq, tk)];
                    logits[tk] = l;
                    max = max.max(l);
                }
                let mut denom = 0.0;
                for l in logits.iter_mut() {
                    *l = if l.is_finite() { (*l - max).exp() } else { 0.0 };
                    denom += *l;
                }
                head_out.iter_mut().for_each(|x| *x = 0.0);
                for tk in 0..n {
                    let p = logits[tk] / denom;
                    if p == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        head_out[i] += p * v[tk * d + i];
                    }
                }
                let o = &mut out[tq * e..(tq + 1) * e];
                for (j, oj) in o.iter_mut().enumerate() {
                    let row = &self.proj.row(j)[h * d..(h + 1) * d];
                    *oj += dot(row, &head_out);
                }
            }
        }
    }

    /// Hidden units in `units` of the MLP, projected back to `E` without the
    /// output bias; accumulated into `out`.
    pub fn mlp_partial(&self, x: &[f64], units: Range<usize>, out: &mut [f64]) {
        let acts: Vec<f64> = units
            .clone()
            .map(|u| gelu(self.fc1.apply_row(u, x)))
            .collect();
        for (j, oj) in out.iter_mut().enumerate() {
            let row = &self.fc2.row(j)[units.clone()];
            *oj += dot(row, &acts);
        }
    }
}

/// Segment labels for a window in shifted coordinates: rows whose source row
/// wrapped past the southern edge form their own segment.
pub(crate) fn seam_segments(
    cfg: &SwinConfig,
    win_row: usize,
    shift_h: usize,
    hp: usize,
) -> Vec<Option<u8>> {
    let [wh, ww] = cfg.window;
    (0..wh * ww)
        .map(|t| {
            let r = win_row * wh + t / ww;
            Some(u8::from(shift_h > 0 && r + shift_h >= hp))
        })
        .collect()
}

impl SwinWeights {
    pub fn embed(&self, cfg: &SwinConfig, state: &FieldState, hp: usize, wp: usize) -> PatchTensor {
        let [ph, pw] = cfg.patch;
        let c_in = state.schema().total();
        let mut out = PatchTensor::zeros(hp, wp, cfg.embed_dim);
        let mut buf = vec![0.0; c_in * ph * pw];
        for pi in 0..hp {
            for pj in 0..wp {
                self.gather_patch(cfg, state, pi, pj, &mut buf);
                self.embed.forward(&buf, out.token_mut(pi, pj));
            }
        }
        out
    }

    pub(crate) fn gather_patch(
        &self,
        cfg: &SwinConfig,
        state: &FieldState,
        pi: usize,
        pj: usize,
        buf: &mut [f64],
    ) {
        let [ph, pw] = cfg.patch;
        let c_in = state.schema().total();
        for c in 0..c_in {
            for dy in 0..ph {
                for dx in 0..pw {
                    buf[(c * ph + dy) * pw + dx] = state.get(c, pi * ph + dy, pj * pw + dx);
                }
            }
        }
    }

    /// Writes the unembedded patch `(pi, pj)` into the forecast channels of
    /// `values` (full `C × n_lat × n_lon` layout).
    pub(crate) fn unembed_patch(
        &self,
        cfg: &SwinConfig,
        token: &[f64],
        pi: usize,
        pj: usize,
        forecast: &[usize],
        grid: &GridSpec,
        values: &mut [f64],
    ) {
        let [ph, pw] = cfg.patch;
        let (h, w) = (grid.n_lat(), grid.n_lon());
        for (oc, &c) in forecast.iter().enumerate() {
            for dy in 0..ph {
                for dx in 0..pw {
                    let o = (oc * ph + dy) * pw + dx;
                    let (j, k) = (pi * ph + dy, pj * pw + dx);
                    values[(c * h + j) * w + k] = self.unembed.apply_row(o, token);
                }
            }
        }
    }

    pub fn block_forward(&self, cfg: &SwinConfig, index: usize, x: &mut PatchTensor) -> Result<()> {
        let b = &self.blocks[index];
        let (hp, wp, e) = (x.h, x.w, x.e);
        let (sh, sw) = cfg.shift_for(index, (hp, wp));
        let mut h = PatchTensor::zeros(hp, wp, e);
        for t in 0..hp * wp {
            rms_norm(
                &x.data[t * e..(t + 1) * e],
                &b.norm1,
                &mut h.data[t * e..(t + 1) * e],
            );
        }
        let hs = cyclic_shift(&h, (-(sh as i64), -(sw as i64)))?;
        let [wh, ww] = cfg.window;
        let mut attn = PatchTensor::zeros(hp, wp, e);
        for wi in 0..hp / wh {
            let segments = seam_segments(cfg, wi, sh, hp);
            for wj in 0..wp / ww {
                let tokens = hs.block(wi * wh, wj * ww, wh, ww);
                let mut out = PatchTensor::zeros(wh, ww, e);
                b.attention_partial(
                    cfg,
                    WindowTokens {
                        tokens: &tokens.data,
                        segments: &segments,
                    },
                    0..cfg.heads,
                    &mut out.data,
                );
                for t in 0..wh * ww {
                    for (o, bias) in out.data[t * e..(t + 1) * e].iter_mut().zip(&b.proj.bias) {
                        *o += bias;
                    }
                }
                attn.set_block(wi * wh, wj * ww, &out);
            }
        }
        let attn = cyclic_shift(&attn, (sh as i64, sw as i64))?;
        for (xv, a) in x.data.iter_mut().zip(&attn.data) {
            *xv += a;
        }
        let mut n2 = vec![0.0; e];
        let mut m = vec![0.0; e];
        let hidden = cfg.hidden_dim();
        for t in 0..hp * wp {
            let tok = &mut x.data[t * e..(t + 1) * e];
            rms_norm(tok, &b.norm2, &mut n2);
            m.iter_mut().for_each(|v| *v = 0.0);
            b.mlp_partial(&n2, 0..hidden, &mut m);
            for ((xv, mv), bias) in tok.iter_mut().zip(&m).zip(&b.fc2.bias) {
                *xv += mv + bias;
            }
        }
        Ok(())
    }
}

/// Seeded shifted-window forecaster.
#[derive(Debug, Clone)]
pub struct SwinModel {
    cfg: SwinConfig,
    schema: Arc<ChannelSchema>,
    grid: Arc<GridSpec>,
    weights: SwinWeights,
    patch_grid: (usize, usize),
    norm: Option<NormStats>,
}

impl SwinModel {
    pub fn new(cfg: SwinConfig, schema: Arc<ChannelSchema>, grid: Arc<GridSpec>) -> Result<Self> {
        let patch_grid = cfg.validate(&grid)?;
        let weights = SwinWeights::generate(&cfg, schema.total(), schema.n_forecast());
        Ok(SwinModel {
            cfg,
            schema,
            grid,
            weights,
            patch_grid,
            norm: None,
        })
    }

    /// Steps in normalized space: `denorm(forward(norm(x)))`.
    pub fn with_norm(mut self, stats: NormStats) -> Result<Self> {
        let probe = FieldState::zeros(self.schema.clone(), self.grid.clone(), 0);
        stats.normalize(&probe)?;
        self.norm = Some(stats);
        Ok(self)
    }

    pub fn config(&self) -> &SwinConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &SwinWeights {
        &self.weights
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        self.patch_grid
    }

    pub fn schema(&self) -> &Arc<ChannelSchema> {
        &self.schema
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub(crate) fn check_input(&self, state: &FieldState) -> Result<()> {
        if **state.schema() != *self.schema || **state.grid() != *self.grid {
            return Err(Error::Mismatch(
                "input layout differs from the model's schema/grid".into(),
            ));
        }
        Ok(())
    }

    /// Latent tokens after patch embedding and all blocks.
    pub fn encode(&self, state: &FieldState) -> Result<PatchTensor> {
        self.check_input(state)?;
        let (hp, wp) = self.patch_grid;
        let mut x = self.weights.embed(&self.cfg, state, hp, wp);
        for i in 0..self.cfg.depth {
            self.weights.block_forward(&self.cfg, i, &mut x)?;
        }
        Ok(x)
    }

    /// Maps latent tokens back to a field; static channels are copied from
    /// `input`.
    pub fn decode(&self, latent: &PatchTensor, input: &FieldState) -> Result<FieldState> {
        let mut values = input.values().to_vec();
        let forecast = self.schema.forecast_indices();
        for pi in 0..latent.h {
            for pj in 0..latent.w {
                self.weights.unembed_patch(
                    &self.cfg,
                    latent.token(pi, pj),
                    pi,
                    pj,
                    &forecast,
                    &self.grid,
                    &mut values,
                );
            }
        }
        input.with_values(values, input.timestamp() + STEP_HOURS as i64)
    }

    /// One forward pass on an already-normalized state.
    pub fn forward(&self, state: &FieldState) -> Result<FieldState> {
        let latent = self.encode(state)?;
        self.decode(&latent, state)
    }
}

impl OneStepModel for SwinModel {
    fn step(&self, state: &FieldState) -> Result<FieldState> {
        match &self.norm {
            None => self.forward(state),
            Some(stats) => {
                let out = self.forward(&stats.normalize(state)?)?;
                stats.denormalize(&out)
            }
        }
    }

    fn param_count(&self) -> usize {
        self.weights.param_count
    }

    fn name(&self) -> &str {
        "swin"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::canonical_schema;

    fn layout(n_lat: usize, n_lon: usize) -> (Arc<ChannelSchema>, Arc<GridSpec>) {
        (
            Arc::new(canonical_schema().subset(&["t2m", "z500"]).unwrap()),
            Arc::new(GridSpec::cell_centered(n_lat, n_lon).unwrap()),
        )
    }

    fn field(s: &Arc<ChannelSchema>, g: &Arc<GridSpec>, seed: u64) -> FieldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FieldState::from_fn(s.clone(), g.clone(), 0, |_, _, _| {
            rng.random::<f64>() * 2.0 - 1.0
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let g = GridSpec::cell_centered(8, 16).unwrap();
        assert_eq!(SwinConfig::tiny(1).validate(&g).unwrap(), (4, 8));
        let mut c = SwinConfig::tiny(1);
        c.patch = [3, 2];
        assert!(c.validate(&g).is_err());
        let mut c = SwinConfig::tiny(1);
        c.window = [3, 2];
        assert!(c.validate(&g).is_err());
        let mut c = SwinConfig::tiny(1);
        c.heads = 3;
        assert!(c.validate(&g).is_err());
    }

    #[test]
    fn param_count_matches_generated_scalars() {
        let cfg = SwinConfig::tiny(3);
        let w = SwinWeights::generate(&cfg, 2, 2);
        let lin = |l: &Linear| l.weight.len() + l.bias.len();
        let mut n = lin(&w.embed) + lin(&w.unembed);
        for b in &w.blocks {
            n += b.norm1.len()
                + lin(&b.qkv)
                + b.logit_scale.len()
                + b.rel_bias.len()
                + lin(&b.proj)
                + b.norm2.len()
                + lin(&b.fc1)
                + lin(&b.fc2);
        }
        assert_eq!(w.param_count, n);
        // embed 8·8+8, per block 8+(8·24+24)+2+2·9+(64+8)+8+(8·16+16)+(16·8+8), unembed 8·8+8
        assert_eq!(n, 72 + 2 * 604 + 72);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let (s, g) = layout(8, 16);
        let x = field(&s, &g, 9);
        let a = SwinModel::new(SwinConfig::tiny(42), s.clone(), g.clone())
            .unwrap()
            .forward(&x)
            .unwrap();
        let b = SwinModel::new(SwinConfig::tiny(42), s.clone(), g.clone())
            .unwrap()
            .forward(&x)
            .unwrap();
        let c = SwinModel::new(SwinConfig::tiny(43), s, g)
            .unwrap()
            .forward(&x)
            .unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
        assert_eq!(a.timestamp(), 6);
    }

    #[test]
    fn static_channels_pass_through() {
        let s = Arc::new(
            canonical_schema()
                .subset(&["t2m"])
                .unwrap()
                .with_static_inputs()
                .unwrap(),
        );
        let g = Arc::new(GridSpec::cell_centered(8, 16).unwrap());
        let m = SwinModel::new(SwinConfig::tiny(5), s.clone(), g.clone()).unwrap();
        assert_eq!(m.weights().unembed.out_dim, 4);
        let x = field(&s, &g, 1);
        let y = m.step(&x).unwrap();
        for c in 1..4 {
            assert_eq!(y.channel(c), x.channel(c));
        }
        assert_ne!(y.channel(0), x.channel(0));
    }

    #[test]
    fn rejects_foreign_layout() {
        let (s, g) = layout(8, 16);
        let m = SwinModel::new(SwinConfig::tiny(5), s.clone(), g).unwrap();
        let other = FieldState::zeros(s, Arc::new(GridSpec::cell_centered(8, 8).unwrap()), 0);
        assert!(m.forward(&other).is_err());
    }

    #[test]
    fn east_west_roll_equivariance_without_shift() {
        // depth 1 → only the unshifted block; rolling by a whole window in
        // longitude must roll the output identically.
        let (s, g) = layout(8, 16);
        let mut cfg = SwinConfig::tiny(11);
        cfg.depth = 1;
        let m = SwinModel::new(cfg, s.clone(), g.clone()).unwrap();
        let x = field(&s, &g, 2);
        let cells = 2 * 2; // window width (2 patches) × patch width (2 cells)
        let roll = |f: &FieldState| {
            FieldState::from_fn(s.clone(), g.clone(), f.timestamp(), |c, j, k| {
                f.get(c, j, (k + 16 - cells) % 16)
            })
            .unwrap()
        };
        let y = m.forward(&x).unwrap();
        let y_rolled = m.forward(&roll(&x)).unwrap();
        let expect = roll(&y);
        assert_eq!(y_rolled.values(), expect.values());
    }

    #[test]
    fn window_permutation_equivariance_without_shift() {
        let (s, g) = layout(8, 16);
        let mut cfg = SwinConfig::tiny(17);
        cfg.depth = 1;
        let m = SwinModel::new(cfg, s.clone(), g.clone()).unwrap();
        let x = field(&s, &g, 4);
        // swap window (0,0) and window (1,3): 4x4-cell blocks at (0,0) and (4,12)
        let swap = |f: &FieldState| {
            FieldState::from_fn(s.clone(), g.clone(), f.timestamp(), |c, j, k| {
                let (bj, bk) = (j / 4, k / 4);
                let (sj, sk) = match (bj, bk) {
                    (0, 0) => (1, 3),
                    (1, 3) => (0, 0),
                    other => other,
                };
                f.get(c, sj * 4 + j % 4, sk * 4 + k % 4)
            })
            .unwrap()
        };
        let y = m.forward(&x).unwrap();
        assert_eq!(m.forward(&swap(&x)).unwrap().values(), swap(&y).values());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }
}
