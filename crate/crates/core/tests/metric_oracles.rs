use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rollscale::grid::{latitude_weights, ChannelEntry, ChannelSchema, FieldState, GridSpec};
use rollscale::metrics::{
    area_weighted_rmse, error_growth, mse_loss, pooled_rmse, weighted_slab_rmse,
};

// sqrt((w0·2 + w1·8) / 4) with w = (1 ± 1/√3), evaluated in closed form
const TWO_ROW_EXAMPLE: f64 = 1.4484737523867377;

fn schema(n: usize) -> Arc<ChannelSchema> {
    let names = ["t2m", "u10m", "v10m", "sp", "msl", "TCWV"];
    Arc::new(
        ChannelSchema::new(
            names[..n]
                .iter()
                .map(|c| ChannelEntry::surface(c, "1"))
                .collect(),
        )
        .unwrap(),
    )
}

struct Instance {
    lat: Vec<f64>,
    pred: FieldState,
    truth: FieldState,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (
        rng.random_range(1..=5usize),
        rng.random_range(2..=6usize),
        rng.random_range(2..=7usize),
    );
    let mut lat: Vec<f64> = (0..h).map(|_| rng.random_range(-89.0..89.0)).collect();
    lat.sort_by(|a, b| b.partial_cmp(a).unwrap());
    lat.dedup();
    while lat.len() < h {
        lat.push(lat.last().unwrap() - 0.5);
    }
    let lon = (0..w).map(|k| 360.0 * k as f64 / w as f64).collect();
    let grid = Arc::new(GridSpec::new(lat.clone(), lon).unwrap());
    let s = schema(c);
    let pred = FieldState::from_fn(s.clone(), grid.clone(), 0, |_, _, _| {
        rng.random_range(-5.0..5.0)
    })
    .unwrap();
    let truth = FieldState::from_fn(s, grid, 0, |_, _, _| rng.random_range(-5.0..5.0)).unwrap();
    Instance { lat, pred, truth }
}

fn flat_area_rmse(inst: &Instance) -> Vec<f64> {
    let (h, w) = (inst.pred.grid().n_lat(), inst.pred.grid().n_lon());
    let cos: Vec<f64> = inst.lat.iter().map(|l| l.to_radians().cos()).collect();
    let mean = cos.iter().sum::<f64>() / h as f64;
    (0..inst.pred.schema().total())
        .map(|c| {
            let mut s = 0.0;
            for j in 0..h {
                for k in 0..w {
                    let d = inst.pred.get(c, j, k) - inst.truth.get(c, j, k);
                    s += cos[j] / mean * d * d;
                }
            }
            (s / (h * w) as f64).sqrt()
        })
        .collect()
}

fn flat_pooled(inst: &Instance) -> f64 {
    let v = inst.pred.values();
    let t = inst.truth.values();
    let mut s = 0.0;
    for i in 0..v.len() {
        s += (v[i] - t[i]).powi(2);
    }
    (s / v.len() as f64).sqrt()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn fifty_random_instances_match_flat_loops() {
    for seed in 0..50 {
        let inst = random_instance(seed);
        let got = area_weighted_rmse(&inst.pred, &inst.truth).unwrap();
        for (g, o) in got.iter().zip(flat_area_rmse(&inst)) {
            assert!(rel(*g, o) <= 1e-12, "seed {seed}: {g} vs {o}");
        }
        let p = pooled_rmse(&inst.pred, &inst.truth).unwrap();
        assert!(rel(p, flat_pooled(&inst)) <= 1e-12, "seed {seed}");
        assert!(rel(mse_loss(&inst.pred, &inst.truth).unwrap(), p * p) <= 1e-12);
    }
}

#[test]
fn two_row_cos_weighted_example() {
    let grid = Arc::new(GridSpec::new(vec![30.0, -60.0], vec![0.0, 180.0]).unwrap());
    let s = schema(1);
    let truth = FieldState::zeros(s.clone(), grid.clone(), 0);
    let pred = FieldState::from_fn(s, grid, 0, |_, j, _| [1.0, 2.0][j]).unwrap();
    let got = area_weighted_rmse(&pred, &truth).unwrap()[0];
    assert!((got - TWO_ROW_EXAMPLE).abs() < 1e-12);
    assert!((got - 1.44846).abs() < 1e-4);
}

#[test]
fn uniform_weights_reduce_to_plain_rmse() {
    // an all-equator band has unit weights; grids must be monotone, so the
    // weights go straight to the slab kernel
    let w = latitude_weights(&[0.0; 3]).unwrap();
    assert_eq!(w, vec![1.0; 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let pred: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let truth: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut sq = 0.0;
        for i in 0..12 {
            sq += (pred[i] - truth[i]).powi(2);
        }
        let got = weighted_slab_rmse(&pred, &truth, &w).unwrap();
        assert!(rel(got, (sq / 12.0).sqrt()) <= 1e-12);
    }
}

fn central_difference_oracle(series: &[(u32, f64)]) -> Vec<f64> {
    let n = series.len();
    let mut out = vec![0.0; n];
    out[0] = (series[1].1 - series[0].1) / (series[1].0 as f64 - series[0].0 as f64);
    out[n - 1] =
        (series[n - 1].1 - series[n - 2].1) / (series[n - 1].0 as f64 - series[n - 2].0 as f64);
    for i in 1..n - 1 {
        out[i] =
            (series[i + 1].1 - series[i - 1].1) / (series[i + 1].0 as f64 - series[i - 1].0 as f64);
    }
    out
}

proptest! {
    #[test]
    fn growth_is_exact_on_affine_series(a in -10.0f64..10.0, b in -1.0f64..1.0, n in 2usize..41) {
        let s: Vec<(u32, f64)> = (1..=n as u32).map(|k| (6 * k, a + b * (6 * k) as f64)).collect();
        let g = error_growth("x", &s).unwrap();
        for d in g.d_rmse_dt {
            prop_assert!((d - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn growth_matches_central_difference_on_smooth_series(
        amp in 0.1f64..5.0, freq in 0.001f64..0.05, phase in 0.0f64..6.28, n in 3usize..41,
    ) {
        let s: Vec<(u32, f64)> =
            (1..=n as u32).map(|k| (6 * k, amp * ((6 * k) as f64 * freq + phase).sin() + 0.01 * (6 * k) as f64)).collect();
        let g = error_growth("x", &s).unwrap();
        for (d, o) in g.d_rmse_dt.iter().zip(central_difference_oracle(&s)) {
            prop_assert!((d - o).abs() <= 1e-10 * o.abs().max(1.0));
        }
    }

    #[test]
    fn channel_permutation_invariance(seed in 0u64..1000) {
        let inst = random_instance(seed);
        let c = inst.pred.schema().total();
        let perm: Vec<usize> = (0..c).rev().collect();
        let permuted = |f: &FieldState| {
            let entries: Vec<ChannelEntry> = perm.iter().map(|&i| f.schema().entries()[i].clone()).collect();
            let vals: Vec<f64> = perm.iter().flat_map(|&i| f.channel(i).to_vec()).collect();
            FieldState::new(Arc::new(ChannelSchema::new(entries).unwrap()), f.grid().clone(), vals, 0).unwrap()
        };
        let (p2, t2) = (permuted(&inst.pred), permuted(&inst.truth));
        let a = area_weighted_rmse(&inst.pred, &inst.truth).unwrap();
        let b = area_weighted_rmse(&p2, &t2).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(b[k], a[i]);
        }
        prop_assert!(rel(pooled_rmse(&p2, &t2).unwrap(), pooled_rmse(&inst.pred, &inst.truth).unwrap()) < 1e-14);
    }
}
