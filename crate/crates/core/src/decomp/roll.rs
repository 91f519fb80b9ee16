use std::collections::BTreeMap;

use super::{CommKind, CommTrace, Decomposition, LocalTensor, Mailbox};
use crate::error::{Error, Result};
use crate::forecaster::{wrap_shift, PatchTensor};

/// Global cyclic roll of a decomposed tensor (same semantics as
/// [`crate::forecaster::cyclic_shift`]) realised as point-to-point messages.
pub fn distributed_roll(
    locals: &[LocalTensor],
    shift: (i64, i64),
    decomp: &Decomposition,
) -> Result<(Vec<LocalTensor>, CommTrace)> {
    let (hp, wp) = decomp.patch_grid;
    let (s_h, s_w) = shift;
    let (Some(dh), Some(dw)) = (wrap_shift(s_h, hp), wrap_shift(s_w, wp)) else {
        return Err(Error::ShiftOutOfRange {
            s_h,
            s_w,
            h: hp,
            w: wp,
        });
    };
    if locals.len() != decomp.subs.len() {
        return Err(Error::Mismatch(format!(
            "{} local tensors for {} ranks",
            locals.len(),
            decomp.subs.len()
        )));
    }
    let e = locals[0].data.e;

    // per (src, dst): destination-local cells in row-major order with their
    // source-local coordinates
    let mut plan: BTreeMap<(usize, usize), Vec<((usize, usize), (usize, usize))>> = BTreeMap::new();
    for sub in &decomp.subs {
        for a in 0..sub.rows {
            for b in 0..sub.cols {
                let r = (sub.r0 + a + hp - dh) % hp;
                let c = (sub.c0 + b + wp - dw) % wp;
                let src = decomp.owner(r, c);
                let s = &decomp.subs[src];
                plan.entry((src, sub.rank))
                    .or_default()
                    .push(((r - s.r0, c - s.c0), (a, b)));
            }
        }
    }

    let mut mail = Mailbox::default();
    for (&(src, dst), cells) in &plan {
        let from = &locals[src].data;
        let payload: Vec<f64> = cells
            .iter()
            .flat_map(|&((r, c), _)| from.token(r, c).iter().copied())
            .collect();
        let n = payload.len();
        let global = (decomp.global_rank(src), decomp.global_rank(dst));
        mail.send(CommKind::Roll, src, dst, global, 0, payload, n);
    }

    let mut out: Vec<LocalTensor> = decomp
        .subs
        .iter()
        .map(|s| LocalTensor {
            sub: *s,
            data: PatchTensor::zeros(s.rows, s.cols, e),
        })
        .collect();
    for (&(src, dst), cells) in &plan {
        let payload = mail.recv(src, dst, 0);
        for (t, &(_, (a, b))) in cells.iter().enumerate() {
            out[dst]
                .data
                .token_mut(a, b)
                .copy_from_slice(&payload[t * e..(t + 1) * e]);
        }
    }
    debug_assert!(mail.is_drained());
    Ok((out, mail.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::DecompLayout;
    use crate::forecaster::cyclic_shift;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matches_global_roll(
            sp in prop_oneof![Just((1usize, 1usize)), Just((2, 1)), Just((1, 2)), Just((2, 2)), Just((2, 4))],
            s_h in -3i64..4, s_w in -7i64..8,
            vals in proptest::collection::vec(-1.0f64..1.0, 4 * 8 * 2),
        ) {
            let d = Decomposition::new((4, 8), [2, 2], DecompLayout::new(1, sp.0, sp.1, 1)).unwrap();
            let g = PatchTensor::from_vec(4, 8, 2, vals).unwrap();
            let (rolled, _) = distributed_roll(&d.scatter(&g), (s_h, s_w), &d).unwrap();
            prop_assert_eq!(d.gather(&rolled), cyclic_shift(&g, (s_h, s_w)).unwrap());
        }
    }

    #[test]
    fn single_rank_roll_sends_nothing() {
        let d = Decomposition::new((4, 8), [2, 2], DecompLayout::new(1, 1, 1, 1)).unwrap();
        let g = PatchTensor::zeros(4, 8, 3);
        let (_, trace) = distributed_roll(&d.scatter(&g), (1, 1), &d).unwrap();
        assert!(trace.events.is_empty());
    }

    #[test]
    fn subdomain_width_roll_swaps_neighbours() {
        let d = Decomposition::new((4, 8), [2, 2], DecompLayout::new(1, 1, 2, 1)).unwrap();
        let g = PatchTensor::from_vec(4, 8, 1, (0..32).map(f64::from).collect()).unwrap();
        let locals = d.scatter(&g);
        let (rolled, trace) = distributed_roll(&locals, (0, 4), &d).unwrap();
        assert_eq!(rolled[0].data, locals[1].data);
        assert_eq!(rolled[1].data, locals[0].data);
        assert_eq!(trace.events.len(), 2);
        assert!(trace.events.iter().all(|e| e.element_count == 16));
    }

    #[test]
    fn zero_shift_is_silent_identity() {
        let d = Decomposition::new((4, 8), [2, 2], DecompLayout::new(1, 2, 2, 1)).unwrap();
        let g = PatchTensor::from_vec(4, 8, 1, (0..32).map(f64::from).collect()).unwrap();
        let (rolled, trace) = distributed_roll(&d.scatter(&g), (0, 0), &d).unwrap();
        assert_eq!(d.gather(&rolled), g);
        assert!(trace.events.is_empty());
    }

    #[test]
    fn half_window_roll_volume() {
        // 1x2 ranks of 4x4, shift one column: each rank ships one 4-token column
        let d = Decomposition::new((4, 8), [2, 2], DecompLayout::new(1, 1, 2, 1)).unwrap();
        let g = PatchTensor::zeros(4, 8, 3);
        let (_, trace) = distributed_roll(&d.scatter(&g), (0, 1), &d).unwrap();
        assert_eq!(trace.events.len(), 2);
        assert!(trace.events.iter().all(|e| e.element_count == 4 * 3));
    }
}
