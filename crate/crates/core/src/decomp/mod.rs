//! Single-process simulation of the hybrid data/spatial/tensor-parallel layout.
//!
//! Ranks are in-process workers that talk through a [`Mailbox`] with per-pair
//! FIFO ordering. Every inter-rank message is logged as a [`CommEvent`];
//! copies a rank makes to itself (periodic self-wrap) are local and unlogged.
//!
//! Global rank numbering nests TP inside SP inside DP:
//! `rank = ((d·sp1 + i)·sp2 + j)·tp + t`. Spatial traffic is simulated for
//! replica 0 and TP shard 0; other replicas repeat the same pattern.

mod forward;
mod halo;
mod roll;
mod shard;

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use forward::{decomposed_forward, max_relative_deviation, ShiftStrategy};
pub use halo::{halo_exchange, HaloTensor};
pub use roll::distributed_roll;
pub use shard::{sharded_attention, sharded_mlp};

use crate::error::{Error, Result};
use crate::forecaster::PatchTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompLayout {
    pub dp: usize,
    pub sp1: usize,
    pub sp2: usize,
    pub tp: usize,
    /// Halo widths in patches.
    pub halo_h: usize,
    pub halo_w: usize,
}

impl DecompLayout {
    pub fn new(dp: usize, sp1: usize, sp2: usize, tp: usize) -> Self {
        DecompLayout {
            dp,
            sp1,
            sp2,
            tp,
            halo_h: 0,
            halo_w: 0,
        }
    }

    pub fn with_halo(mut self, halo_h: usize, halo_w: usize) -> Self {
        self.halo_h = halo_h;
        self.halo_w = halo_w;
        self
    }

    /// Parses `dp,sp1,sp2,tp`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<usize> = text
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidConfig(format!("layout `{text}`: {e}")))?;
        let [dp, sp1, sp2, tp] = parts[..] else {
            return Err(Error::InvalidConfig(format!(
                "layout `{text}` must be dp,sp1,sp2,tp"
            )));
        };
        let l = DecompLayout::new(dp, sp1, sp2, tp);
        l.check_positive()?;
        Ok(l)
    }

    fn check_positive(&self) -> Result<()> {
        if self.dp == 0 || self.sp1 == 0 || self.sp2 == 0 || self.tp == 0 {
            return Err(Error::InvalidConfig(format!(
                "layout counts must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn spatial_ranks(&self) -> usize {
        self.sp1 * self.sp2
    }

    pub fn world_size(&self) -> usize {
        self.dp * self.sp1 * self.sp2 * self.tp
    }

    pub fn global_rank(&self, d: usize, i: usize, j: usize, t: usize) -> usize {
        ((d * self.sp1 + i) * self.sp2 + j) * self.tp + t
    }

    /// Halo needed to evaluate shifted windows locally: `win − shift` along
    /// each shifted dimension (half a window for even windows), zero otherwise.
    pub fn halo_for_shift(window: [usize; 2], shift: (usize, usize)) -> (usize, usize) {
        let h = if shift.0 > 0 { window[0] - shift.0 } else { 0 };
        let w = if shift.1 > 0 { window[1] - shift.1 } else { 0 };
        (h, w)
    }
}

/// A rank's rectangle of the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subdomain {
    /// Spatial rank index, row-major with SP1 outer.
    pub rank: usize,
    pub row: usize,
    pub col: usize,
    pub r0: usize,
    pub c0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Subdomain {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r0 + self.rows && c >= self.c0 && c < self.c0 + self.cols
    }
}

/// Splits the patch grid into `sp1 × sp2` equal rectangles of whole windows.
pub fn partition(
    patch_grid: (usize, usize),
    window: [usize; 2],
    layout: &DecompLayout,
) -> Result<Vec<Subdomain>> {
    layout.check_positive()?;
    let (hp, wp) = patch_grid;
    let [wh, ww] = window;
    if wh == 0 || ww == 0 || hp % wh != 0 || wp % ww != 0 {
        return Err(Error::Indivisible {
            dim: "window",
            detail: format!("window {wh}x{ww} does not tile the {hp}x{wp} patch grid"),
        });
    }
    if hp % layout.sp1 != 0 || (hp / layout.sp1) % wh != 0 {
        return Err(Error::Indivisible {
            dim: "sp1 (latitude)",
            detail: format!(
                "{hp} patch rows cannot split into {} whole-window bands of height {wh}",
                layout.sp1
            ),
        });
    }
    if wp % layout.sp2 != 0 || (wp / layout.sp2) % ww != 0 {
        return Err(Error::Indivisible {
            dim: "sp2 (longitude)",
            detail: format!(
                "{wp} patch columns cannot split into {} whole-window bands of width {ww}",
                layout.sp2
            ),
        });
    }
    let (rows, cols) = (hp / layout.sp1, wp / layout.sp2);
    let mut out = Vec::with_capacity(layout.spatial_ranks());
    for i in 0..layout.sp1 {
        for j in 0..layout.sp2 {
            out.push(Subdomain {
                rank: i * layout.sp2 + j,
                row: i,
                col: j,
                r0: i * rows,
                c0: j * cols,
                rows,
                cols,
            });
        }
    }
    Ok(out)
}

/// Patch grid, window and layout with the resulting partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub patch_grid: (usize, usize),
    pub window: [usize; 2],
    pub layout: DecompLayout,
    pub subs: Vec<Subdomain>,
}

impl Decomposition {
    pub fn new(
        patch_grid: (usize, usize),
        window: [usize; 2],
        layout: DecompLayout,
    ) -> Result<Self> {
        let subs = partition(patch_grid, window, &layout)?;
        Ok(Decomposition {
            patch_grid,
            window,
            layout,
            subs,
        })
    }

    pub fn global_rank(&self, spatial: usize) -> usize {
        let s = &self.subs[spatial];
        self.layout.global_rank(0, s.row, s.col, 0)
    }

    pub fn rank_at(&self, i: usize, j: usize) -> usize {
        i * self.layout.sp2 + j
    }

    /// Spatial rank owning global patch `(r, c)`.
    pub fn owner(&self, r: usize, c: usize) -> usize {
        let s = &self.subs[0];
        self.rank_at(r / s.rows, c / s.cols)
    }

    pub fn scatter(&self, global: &PatchTensor) -> Vec<LocalTensor> {
        self.subs
            .iter()
            .map(|s| LocalTensor {
                sub: *s,
                data: global.block(s.r0, s.c0, s.rows, s.cols),
            })
            .collect()
    }

    pub fn gather(&self, locals: &[LocalTensor]) -> PatchTensor {
        let e = locals.first().map_or(0, |l| l.data.e);
        let mut out = PatchTensor::zeros(self.patch_grid.0, self.patch_grid.1, e);
        for l in locals {
            out.set_block(l.sub.r0, l.sub.c0, &l.data);
        }
        out
    }
}

/// A rank's interior tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTensor {
    pub sub: Subdomain,
    pub data: PatchTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommKind {
    Halo,
    Roll,
    AllreducePartial,
    AllreduceGrad,
}

impl CommKind {
    pub const ALL: [CommKind; 4] = [
        CommKind::Halo,
        CommKind::Roll,
        CommKind::AllreducePartial,
        CommKind::AllreduceGrad,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub kind: CommKind,
    pub src_rank: usize,
    pub dst_rank: usize,
    pub element_count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTrace {
    pub events: Vec<CommEvent>,
}

impl CommTrace {
    pub fn push(&mut self, kind: CommKind, src_rank: usize, dst_rank: usize, element_count: usize) {
        self.events.push(CommEvent {
            kind,
            src_rank,
            dst_rank,
            element_count: element_count as u64,
        });
    }

    pub fn extend(&mut self, other: CommTrace) {
        self.events.extend(other.events);
    }

    pub fn count(&self, kind: CommKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")
                .map_err(|err| Error::io("<trace>", err))?;
        }
        Ok(())
    }
}

/// Exact element totals per event kind; every kind is present.
pub fn comm_volume(trace: &CommTrace) -> BTreeMap<CommKind, u64> {
    let mut totals: BTreeMap<CommKind, u64> = CommKind::ALL.iter().map(|&k| (k, 0)).collect();
    for e in &trace.events {
        *totals.entry(e.kind).or_default() += e.element_count;
    }
    totals
}

/// Data-parallel gradient synchronisation for one step: a ring over the `dp`
/// replicas' lead ranks, each passing the full `n_params` gradient on.
pub fn gradient_sync(layout: &DecompLayout, n_params: usize) -> CommTrace {
    let mut trace = CommTrace::default();
    if layout.dp > 1 {
        for d in 0..layout.dp {
            let src = layout.global_rank(d, 0, 0, 0);
            let dst = layout.global_rank((d + 1) % layout.dp, 0, 0, 0);
            trace.push(CommKind::AllreduceGrad, src, dst, n_params);
        }
    }
    trace
}

/// In-process message channel. Messages between one (src, dst) pair arrive
/// in send order; a tag guards against mismatched receives.
#[derive(Debug, Default)]
pub(crate) struct Mailbox {
    queues: BTreeMap<(usize, usize), VecDeque<(u32, Vec<f64>)>>,
    pub trace: CommTrace,
}

impl Mailbox {
    /// `src`/`dst` are spatial ranks; the trace records `global(src)`.
    pub fn send(
        &mut self,
        kind: CommKind,
        src: usize,
        dst: usize,
        global: (usize, usize),
        tag: u32,
        payload: Vec<f64>,
        elems: usize,
    ) {
        if src != dst {
            self.trace.push(kind, global.0, global.1, elems);
        }
        self.queues
            .entry((src, dst))
            .or_default()
            .push_back((tag, payload));
    }

    pub fn recv(&mut self, src: usize, dst: usize, tag: u32) -> Vec<f64> {
        let (got, payload) = self
            .queues
            .get_mut(&(src, dst))
            .and_then(VecDeque::pop_front)
            .expect("message posted before receive");
        assert_eq!(got, tag, "out-of-order message from {src} to {dst}");
        payload
    }

    pub fn is_drained(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }
}
