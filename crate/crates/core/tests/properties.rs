use std::sync::Arc;

use ensgraph::gnn::{DeepSetHead, GatLayer, GatLayerConfig, GnnStack};
use ensgraph::graph::{build_topology, geodesic_km, EdgeIndex, Topology, DEFAULT_EPS};
use ensgraph::metrics::{crps_ensemble, crps_gaussian};
use ensgraph::stats::{bh_correct, dm_test, normalized_importances, DmVariance, ImportanceResult};
use ensgraph::tensor::{Activation, ParamStore, Tape, Tensor};
use ensgraph::Station;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stations_from(coords: &[(f64, f64)]) -> Vec<Station> {
    coords
        .iter()
        .enumerate()
        .map(|(i, &(lat, lon))| Station { id: i as i64 + 1, lat, lon, alt: 0.0, orog: 0.0 })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn coords() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((45.0..46.5f64, 5.0..7.0f64), 1..7)
}

fn edge_set(e: &EdgeIndex) -> Vec<(usize, usize, u64)> {
    let mut v: Vec<_> = (0..e.len()).map(|k| (e.src[k], e.dst[k], e.attr[k].to_bits())).collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crps_translation_and_scale(mu in -20.0..20.0f64, sigma in 0.05..10.0f64, y in -20.0..20.0f64, c in -50.0..50.0f64, k in 0.1..10.0f64) {
        let base = crps_gaussian(mu, sigma, y).unwrap();
        prop_assert!(base >= 0.0);
        let shifted = crps_gaussian(mu + c, sigma, y + c).unwrap();
        prop_assert!((shifted - base).abs() <= 1e-9 * (1.0 + base));
        let scaled = crps_gaussian(k * mu, k * sigma, k * y).unwrap();
        prop_assert!((scaled - k * base).abs() <= 1e-9 * (1.0 + k * base));
    }

    #[test]
    fn crps_ensemble_of_identical_members_is_absolute_error(m in -30.0..30.0f64, y in -30.0..30.0f64, n in 1usize..20) {
        prop_assert_eq!(crps_ensemble(&vec![m; n], y).unwrap(), (m - y).abs());
    }

    #[test]
    fn softplus_is_strictly_positive(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let y = Activation::Softplus.apply(x);
        prop_assert!(y > 0.0, "softplus({x}) = {y}");
    }

    #[test]
    fn dm_is_antisymmetric(pairs in prop::collection::vec((0.0..5.0f64, 0.0..5.0f64), 2..60)) {
        let (f, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        for v in [DmVariance::Raw, DmVariance::Demeaned] {
            let a = dm_test(&f, &g, v).unwrap();
            let b = dm_test(&g, &f, v).unwrap();
            prop_assert_eq!(a.t, -b.t);
            prop_assert_eq!(a.p, b.p);
        }
    }

    #[test]
    fn bh_rejections_grow_with_alpha(ps in prop::collection::vec(0.0..=1.0f64, 1..40), a in 0.001..0.5f64, b in 0.001..0.5f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r_lo = bh_correct(&ps, lo).unwrap();
        let r_hi = bh_correct(&ps, hi).unwrap();
        prop_assert!(r_lo.n_rejected() <= r_hi.n_rejected());
        for (x, y) in r_lo.rejected.iter().zip(&r_hi.rejected) {
            prop_assert!(!x || *y);
        }
    }

    #[test]
    fn normalized_importances_sum_to_one(imps in prop::collection::vec(-1.0..1.0f64, 1..12)) {
        let results: Vec<ImportanceResult> = imps
            .iter()
            .enumerate()
            .map(|(i, &v)| ImportanceResult { feature: format!("f{i}"), imp_mean: v, imp_std: 0.0, repetitions: 1 })
            .collect();
        let n = normalized_importances(&results);
        if imps.iter().any(|&v| v > 0.0) {
            prop_assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(n.iter().all(|&v| v == 0.0));
        }
        prop_assert!(n.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn edges_are_closed_under_reversal(c in coords(), nm in 1usize..4, d_max in 10.0..300.0f64) {
        let st = stations_from(&c);
        let e = build_topology(&st, nm, d_max, DEFAULT_EPS, Topology::Full).unwrap();
        let set = edge_set(&e);
        for &(s, d, a) in &set {
            prop_assert!(set.binary_search(&(d, s, a)).is_ok());
        }
        for v in 0..st.len() * nm {
            prop_assert!(set.binary_search(&(v, v, DEFAULT_EPS.to_bits())).is_ok(), "missing self-loop");
        }
    }

    #[test]
    fn station_reordering_relabels_edges(c in coords(), nm in 1usize..4, d_max in 10.0..300.0f64, seed in any::<u64>()) {
        let st = stations_from(&c);
        let mut perm: Vec<usize> = (0..st.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let reordered: Vec<Station> = perm.iter().map(|&i| st[i].clone()).collect();
        // node (s, n) of the reordered graph is node (perm[s], n) of the original
        let relabel = |v: usize| perm[v / nm] * nm + v % nm;
        let a = build_topology(&st, nm, d_max, DEFAULT_EPS, Topology::Full).unwrap();
        let b = build_topology(&reordered, nm, d_max, DEFAULT_EPS, Topology::Full).unwrap();
        let mut mapped: Vec<_> = edge_set(&b).into_iter().map(|(s, d, w)| (relabel(s), relabel(d), w)).collect();
        mapped.sort();
        prop_assert_eq!(mapped, edge_set(&a));
    }

    #[test]
    fn distance_threshold_limits(c in coords(), nm in 1usize..4) {
        let st = stations_from(&c);
        let ns = st.len();
        let far = build_topology(&st, nm, 1e5, DEFAULT_EPS, Topology::Full).unwrap();
        prop_assert_eq!(far.len(), (ns * nm) * (ns * nm));
        let min_gap = (0..ns)
            .flat_map(|i| (0..ns).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| geodesic_km((st[i].lat, st[i].lon), (st[j].lat, st[j].lon)))
            .fold(f64::INFINITY, f64::min);
        let tiny = (min_gap / 2.0).min(1e-3);
        if tiny > 0.0 {
            let near = build_topology(&st, nm, tiny, DEFAULT_EPS, Topology::Full).unwrap();
            prop_assert_eq!(near.len(), ns * nm * nm);
        }
    }

    #[test]
    fn attention_weights_sum_to_one(n in 1usize..9, density in 0.0..1.0f64, heads in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for d in 0..n {
            edges.push((d, d, DEFAULT_EPS));
            for s in 0..n {
                if s != d && rng.random::<f64>() < density {
                    edges.push((s, d, rng.random_range(0.0..1.0)));
                }
            }
        }
        let e = Arc::new(EdgeIndex::from_edges(n, edges).unwrap());
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "l", GatLayerConfig::new(3, 4, heads).unwrap(), &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-30.0..30.0)).collect()).unwrap());
        let (_, att) = layer.forward_with_attention(&mut tape, &store, &e, x).unwrap();
        let w = tape.attention_weights(att).unwrap();
        prop_assert_eq!(w.shape(), [e.len(), heads]);
        for v in 0..n {
            for h in 0..heads {
                let s: f64 = e.incoming(v).map(|k| w.get(k, h)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12, "node {v} head {h}: {s}");
            }
        }
    }

    #[test]
    fn deep_set_is_permutation_invariant_bitwise(ns in 1usize..4, nm in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = DeepSetHead::new(&mut store, 5, 6, &mut rng);
        let h = random_matrix(&mut rng, ns * nm, 5);
        let mut rows = Vec::with_capacity(ns * nm);
        for s in 0..ns {
            let mut p: Vec<usize> = (0..nm).collect();
            rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
            rows.extend(p.into_iter().map(|n| s * nm + n));
        }
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let v = tape.input(x);
            let out = head.forward(&mut tape, &store, v, nm).unwrap();
            tape.value(out).clone()
        };
        let a = run(h.clone());
        let b = run(h.gather_rows(&rows));
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn gnn_stack_is_equivariant_under_relabelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let ns = rng.random_range(2..6);
        let nm = rng.random_range(1..4);
        let c: Vec<(f64, f64)> = (0..ns).map(|_| (rng.random_range(45.0..45.8), rng.random_range(5.0..6.0))).collect();
        let st = stations_from(&c);
        let mut perm: Vec<usize> = (0..ns).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let reordered: Vec<Station> = perm.iter().map(|&i| st[i].clone()).collect();
        let node_map: Vec<usize> = (0..ns * nm).map(|v| perm[v / nm] * nm + v % nm).collect();

        let mut store = ParamStore::new();
        let stack = GnnStack::new(&mut store, 4, 8, 2, 2, &mut rng).unwrap();
        let x = random_matrix(&mut rng, ns * nm, 4);
        let run = |stations: &[Station], x: Tensor| {
            let e = Arc::new(build_topology(stations, nm, 60.0, DEFAULT_EPS, Topology::Full).unwrap());
            let mut tape = Tape::new();
            let v = tape.input(x);
            let out = stack.forward(&mut tape, &store, &e, v).unwrap();
            tape.value(out).clone()
        };
        let a = run(&st, x.clone());
        let b = run(&reordered, x.gather_rows(&node_map));
        let expect = a.gather_rows(&node_map);
        for (p, q) in b.data().iter().zip(expect.data()) {
            assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()), "{p} vs {q}");
        }
    }
}

/// Path graph A - B - C (one member each): influence of C's input on A's output.
fn path_influence(n_blocks: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let edges = vec![(0, 0, 1e-6), (1, 1, 1e-6), (2, 2, 1e-6), (0, 1, 0.5), (1, 0, 0.5), (1, 2, 0.5), (2, 1, 0.5)];
    let e = Arc::new(EdgeIndex::from_edges(3, edges).unwrap());
    let mut store = ParamStore::new();
    let stack = GnnStack::new(&mut store, 3, 6, 2, n_blocks, &mut rng).unwrap();
    let x = random_matrix(&mut rng, 3, 3);
    let run = |x: Tensor| {
        let mut tape = Tape::new();
        let v = tape.input(x);
        let out = stack.forward(&mut tape, &store, &e, v).unwrap();
        tape.value(out).row(0).to_vec()
    };
    let base = run(x.clone());
    let mut bumped = x;
    for c in 0..3 {
        bumped.set(2, c, bumped.get(2, c) + 0.5);
    }
    run(bumped).iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn two_blocks_reach_two_hops_one_block_does_not() {
    assert_eq!(path_influence(1), 0.0);
    assert!(path_influence(2) > 1e-6);
}
