use super::{CommKind, CommTrace};
use crate::error::{Error, Result};
use crate::forecaster::{BlockWeights, SwinConfig, WindowTokens};

fn chunk(n: usize, tp: usize, t: usize) -> std::ops::Range<usize> {
    n * t / tp..n * (t + 1) / tp
}

/// Reduce-then-broadcast among the `tp` shards: partials are summed in shard
/// order on shard 0 and the result handed back.
fn reduce(partials: Vec<Vec<f64>>, base_rank: usize, trace: &mut CommTrace) -> Vec<f64> {
    let mut it = partials.into_iter();
    let mut acc = it.next().expect("at least one shard");
    for (t, p) in it.enumerate() {
        trace.push(
            CommKind::AllreducePartial,
            base_rank + t + 1,
            base_rank,
            p.len(),
        );
        for (a, v) in acc.iter_mut().zip(&p) {
            *a += v;
        }
    }
    acc
}

fn broadcast(len: usize, tp: usize, base_rank: usize, trace: &mut CommTrace) {
    for t in 1..tp {
        trace.push(CommKind::AllreducePartial, base_rank, base_rank + t, len);
    }
}

/// Window attention with heads split evenly over `tp` shards. Each shard
/// evaluates its heads; partial projections are summed in shard order and the
/// projection bias added once. `base_rank` is the global rank of shard 0.
pub fn sharded_attention(
    block: &BlockWeights,
    cfg: &SwinConfig,
    win: WindowTokens<'_>,
    tp: usize,
    base_rank: usize,
) -> Result<(Vec<f64>, CommTrace)> {
    if tp == 0 || cfg.heads % tp != 0 {
        return Err(Error::Indivisible {
            dim: "tp",
            detail: format!("{} heads over {tp} shards", cfg.heads),
        });
    }
    let len = win.segments.len() * cfg.embed_dim;
    let partials: Vec<Vec<f64>> = (0..tp)
        .map(|t| {
            let mut out = vec![0.0; len];
            block.attention_partial(
                cfg,
                WindowTokens {
                    tokens: win.tokens,
                    segments: win.segments,
                },
                chunk(cfg.heads, tp, t),
                &mut out,
            );
            out
        })
        .collect();
    let mut trace = CommTrace::default();
    let mut out = reduce(partials, base_rank, &mut trace);
    broadcast(len, tp, base_rank, &mut trace);
    for tok in out.chunks_mut(cfg.embed_dim) {
        for (o, b) in tok.iter_mut().zip(&block.proj.bias) {
            *o += b;
        }
    }
    Ok((out, trace))
}

/// MLP over a batch of normalised tokens (`n × E`) with hidden units split
/// over `tp` shards. Returns the MLP output including the output bias.
pub fn sharded_mlp(
    block: &BlockWeights,
    cfg: &SwinConfig,
    tokens: &[f64],
    tp: usize,
    base_rank: usize,
) -> Result<(Vec<f64>, CommTrace)> {
    let hidden = cfg.hidden_dim();
    if tp == 0 || tp > hidden {
        return Err(Error::Indivisible {
            dim: "tp",
            detail: format!("{hidden} hidden units over {tp} shards"),
        });
    }
    let e = cfg.embed_dim;
    let partials: Vec<Vec<f64>> = (0..tp)
        .map(|t| {
            let mut out = vec![0.0; tokens.len()];
            for (x, o) in tokens.chunks(e).zip(out.chunks_mut(e)) {
                block.mlp_partial(x, chunk(hidden, tp, t), o);
            }
            out
        })
        .collect();
    let mut trace = CommTrace::default();
    let mut out = reduce(partials, base_rank, &mut trace);
    broadcast(tokens.len(), tp, base_rank, &mut trace);
    for tok in out.chunks_mut(e) {
        for (o, b) in tok.iter_mut().zip(&block.fc2.bias) {
            *o += b;
        }
    }
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::SwinWeights;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(heads: usize) -> (SwinConfig, SwinWeights, Vec<f64>) {
        let mut cfg = SwinConfig::tiny(7);
        cfg.heads = heads;
        let w = SwinWeights::generate(&cfg, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = (0..4 * cfg.embed_dim)
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        (cfg, w, tokens)
    }

    #[test]
    fn head_split_matches_unsharded() {
        let (cfg, w, tokens) = setup(4);
        let seg = vec![Some(0u8), Some(0), Some(1), Some(1)];
        let win = || WindowTokens {
            tokens: &tokens,
            segments: &seg,
        };
        let (one, t1) = sharded_attention(&w.blocks[0], &cfg, win(), 1, 0).unwrap();
        assert!(t1.events.is_empty());
        for tp in [2, 4] {
            let (many, trace) = sharded_attention(&w.blocks[0], &cfg, win(), tp, 10).unwrap();
            let dev = one
                .iter()
                .zip(&many)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-13, "tp={tp} dev={dev}");
            assert_eq!(trace.events.len(), 2 * (tp - 1));
            assert!(trace
                .events
                .iter()
                .all(|e| e.element_count == 32 && e.src_rank >= 10));
        }
        assert!(sharded_attention(&w.blocks[0], &cfg, win(), 3, 0).is_err());
    }

    #[test]
    fn hidden_split_matches_unsharded() {
        let (cfg, w, tokens) = setup(2);
        let (one, _) = sharded_mlp(&w.blocks[1], &cfg, &tokens, 1, 0).unwrap();
        let (three, trace) = sharded_mlp(&w.blocks[1], &cfg, &tokens, 3, 0).unwrap();
        let dev = one
            .iter()
            .zip(&three)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-13);
        assert_eq!(trace.events.len(), 4);
    }
}
