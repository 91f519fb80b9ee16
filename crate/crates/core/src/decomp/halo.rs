use super::{CommKind, Decomposition, LocalTensor, Mailbox, Subdomain};
use crate::error::{Error, Result};
use crate::forecaster::PatchTensor;

/// A rank's interior surrounded by `halo = (hh, hw)` neighbour rows/columns.
/// Rows beyond the poles are zero and flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct HaloTensor {
    pub sub: Subdomain,
    pub halo: (usize, usize),
    pub data: PatchTensor,
    pub valid_rows: Vec<bool>,
}

impl HaloTensor {
    pub fn interior(&self) -> PatchTensor {
        self.data
            .block(self.halo.0, self.halo.1, self.sub.rows, self.sub.cols)
    }
}

const DIRECTIONS: [(i64, i64); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Source rectangle `(r0, rows)` within a neighbour's interior for the part of
/// the receiver's halo that lies in direction `d` of the receiver.
fn span(d: i64, interior: usize, halo: usize) -> (usize, usize) {
    match d {
        -1 => (interior - halo, halo),
        0 => (0, interior),
        _ => (0, halo),
    }
}

/// Destination offset in the receiver's extended tensor.
fn dest(d: i64, interior: usize, halo: usize) -> usize {
    match d {
        -1 => 0,
        0 => halo,
        _ => halo + interior,
    }
}

/// Exchanges halos of width `(layout.halo_h, layout.halo_w)` among the spatial
/// ranks. Longitude is periodic; latitude is not.
pub fn halo_exchange(
    locals: &[LocalTensor],
    decomp: &Decomposition,
) -> Result<(Vec<HaloTensor>, super::CommTrace)> {
    let (hh, hw) = (decomp.layout.halo_h, decomp.layout.halo_w);
    let (sp1, sp2) = (decomp.layout.sp1 as i64, decomp.layout.sp2 as i64);
    let s0 = decomp.subs[0];
    if hh > s0.rows {
        return Err(Error::HaloTooWide {
            dim: "latitude",
            halo: hh,
            interior: s0.rows,
        });
    }
    if hw > s0.cols {
        return Err(Error::HaloTooWide {
            dim: "longitude",
            halo: hw,
            interior: s0.cols,
        });
    }
    if locals.len() != decomp.subs.len() {
        return Err(Error::Mismatch(format!(
            "{} local tensors for {} ranks",
            locals.len(),
            decomp.subs.len()
        )));
    }
    let e = locals[0].data.e;
    let active = |d: (i64, i64)| (d.0 == 0 || hh > 0) && (d.1 == 0 || hw > 0);
    let neighbour = |sub: &Subdomain, d: (i64, i64)| -> Option<usize> {
        let i = sub.row as i64 + d.0;
        if !(0..sp1).contains(&i) {
            return None;
        }
        let j = (sub.col as i64 + d.1).rem_euclid(sp2);
        Some(decomp.rank_at(i as usize, j as usize))
    };

    let mut mail = Mailbox::default();
    for (tag, &d) in DIRECTIONS.iter().enumerate() {
        if !active(d) {
            continue;
        }
        for src in locals {
            // the receiver sees `src` in direction d, so it sits at -d from src
            let Some(dst) = neighbour(&src.sub, (-d.0, -d.1)) else {
                continue;
            };
            let (r0, nr) = span(d.0, src.sub.rows, hh);
            let (c0, nc) = span(d.1, src.sub.cols, hw);
            let payload = src.data.block(r0, c0, nr, nc).data;
            let n = payload.len();
            let global = (decomp.global_rank(src.sub.rank), decomp.global_rank(dst));
            mail.send(
                CommKind::Halo,
                src.sub.rank,
                dst,
                global,
                tag as u32,
                payload,
                n,
            );
        }
    }

    let mut out = Vec::with_capacity(locals.len());
    for local in locals {
        let sub = local.sub;
        let mut data = PatchTensor::zeros(sub.rows + 2 * hh, sub.cols + 2 * hw, e);
        data.set_block(hh, hw, &local.data);
        let mut valid_rows = vec![true; sub.rows + 2 * hh];
        if neighbour(&sub, (-1, 0)).is_none() {
            valid_rows[..hh].iter_mut().for_each(|v| *v = false);
        }
        if neighbour(&sub, (1, 0)).is_none() {
            valid_rows[hh + sub.rows..]
                .iter_mut()
                .for_each(|v| *v = false);
        }
        for (tag, &d) in DIRECTIONS.iter().enumerate() {
            if !active(d) {
                continue;
            }
            let Some(src) = neighbour(&sub, d) else {
                continue;
            };
            let payload = mail.recv(src, sub.rank, tag as u32);
            let (_, nr) = span(d.0, sub.rows, hh);
            let (_, nc) = span(d.1, sub.cols, hw);
            let piece = PatchTensor::from_vec(nr, nc, e, payload)?;
            data.set_block(dest(d.0, sub.rows, hh), dest(d.1, sub.cols, hw), &piece);
        }
        out.push(HaloTensor {
            sub,
            halo: (hh, hw),
            data,
            valid_rows,
        });
    }
    debug_assert!(mail.is_drained());
    Ok((out, mail.trace))
}
