mod common;

use flashar_core::decode::{argmax, decode_diagonal, decode_raster, CfgConfig, SamplerConfig};
use flashar_core::grid::{diagonal_partition, predecessors, Coord, MaskKind, MaskSpec, OrderKind, OrderMapping};
use flashar_core::model::{fuse_logits, Condition};
use proptest::prelude::*;

fn dims(max: usize) -> impl Strategy<Value = (usize, usize)> {
    (1..=max, 1..=max)
}

proptest! {
    #[test]
    fn partition_covers_grid_once((h, w) in dims(32)) {
        let s = diagonal_partition(h, w).unwrap();
        prop_assert_eq!(s.num_diagonals(), h + w - 1);
        let mut seen = vec![0u8; h * w];
        for (t, d) in s.diagonals().iter().enumerate() {
            prop_assert!(!d.is_empty());
            for pair in d.windows(2) {
                prop_assert!(pair[0].row < pair[1].row);
            }
            for c in d {
                prop_assert_eq!(c.row + c.col, t);
                seen[c.row * w + c.col] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        let widths = s.widths();
        prop_assert_eq!(widths.iter().sum::<usize>(), h * w);
        prop_assert_eq!(widths.iter().copied().max().unwrap(), h.min(w));
    }

    #[test]
    fn diagonal_order_respects_predecessors((h, w) in dims(16)) {
        let m = OrderMapping::new(OrderKind::Diagonal, h, w).unwrap();
        for &c in m.coords() {
            let pre = predecessors(c);
            for p in [pre.horizontal, pre.vertical].into_iter().flatten() {
                prop_assert!(m.position_of(p) < m.position_of(c));
            }
        }
    }

    #[test]
    fn orders_round_trip((h, w) in dims(12), seed in any::<u64>()) {
        let grid = common::random_grid(&mut common::rng(seed), h, w, 7);
        for kind in [OrderKind::Raster, OrderKind::Diagonal] {
            let m = OrderMapping::new(kind, h, w).unwrap();
            let seq = m.reorder(&grid).unwrap();
            prop_assert_eq!(m.restore(&seq, 7).unwrap(), grid.clone());
        }
    }

    #[test]
    fn mask_predicates((h, w) in dims(6), prefix in 1usize..3) {
        for kind in [MaskKind::RasterCausal, MaskKind::DiagonalCausal] {
            let m = MaskSpec::new(kind, prefix, h, w).unwrap();
            let n = m.seq_len();
            for q in 0..n {
                prop_assert!(m.allows(q, q).unwrap());
                for k in 0..n {
                    let allowed = m.allows(q, k).unwrap();
                    let expected = match (m.coord(q), m.coord(k)) {
                        (_, None) => k <= q,
                        (None, Some(_)) => false,
                        (Some(a), Some(b)) => match kind {
                            MaskKind::RasterCausal => k <= q,
                            MaskKind::DiagonalCausal => k == q || b.diagonal() < a.diagonal(),
                        },
                    };
                    prop_assert_eq!(allowed, expected, "{:?} q={} k={}", kind, q, k);
                }
            }
            for p in 0..h {
                for c in 0..w {
                    let at = Coord::new(p, c);
                    let pre = predecessors(at);
                    for x in [pre.horizontal, pre.vertical].into_iter().flatten() {
                        prop_assert!(m.allows(m.position(at), m.position(x)).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn gate_is_convex_combination(
        g in 0.0f64..=1.0,
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..20),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let z = fuse_logits(g, &a, &b).unwrap();
        for i in 0..a.len() {
            let expected = g * a[i] + (1.0 - g) * b[i];
            prop_assert!((z[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            prop_assert!(z[i] <= a[i].max(b[i]) + 1e-12 && z[i] >= a[i].min(b[i]) - 1e-12);
        }
        prop_assert_eq!(fuse_logits(1.0, &a, &b).unwrap(), a.clone());
        prop_assert_eq!(fuse_logits(0.0, &a, &b).unwrap(), b.clone());
        prop_assert_eq!(fuse_logits(g, &a, &a).unwrap().iter().zip(&a).filter(|(x, y)| (*x - *y).abs() > 1e-12).count(), 0);
    }

    #[test]
    fn shared_argmax_survives_fusion(
        g in 0.0f64..=1.0,
        k in 0usize..8,
        a in prop::collection::vec(-10.0f64..10.0, 8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let lift = |mut v: Vec<f64>| {
            let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            v[k] = top + 0.5;
            v
        };
        let (a, b) = (lift(a), lift(b));
        prop_assert_eq!(argmax(&fuse_logits(g, &a, &b).unwrap()), k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gate_stays_open_interval(seed in any::<u64>()) {
        let cfg = common::tiny_config(2, 2, seed);
        let m = common::random_dual::<f64>(&cfg, 2, seed);
        let mut r = common::rng(seed);
        for _ in 0..20 {
            let hh = common::random_tensor::<f64>(&mut r, &[8], 5.0);
            let hv = common::random_tensor::<f64>(&mut r, &[8], 5.0);
            let g = m.compute_gate(hh.data(), hv.data()).unwrap();
            prop_assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn incremental_matches_full((h, w) in dims(6), seed in any::<u64>()) {
        let (raster, diag) = common::cache_equivalence(h, w, seed);
        prop_assert!(raster.holds(1e-4), "raster {:?}", raster);
        prop_assert!(diag.holds(1e-4), "diagonal {:?}", diag);
    }

    #[test]
    fn decode_traces_follow_schedule((h, w) in dims(7), seed in any::<u64>()) {
        let cfg = common::tiny_config(h, w, seed);
        let dual = common::random_dual::<f32>(&cfg, 2, seed);
        let sampler = SamplerConfig { seed, ..Default::default() };
        let cfg_on = CfgConfig::default();
        let d = decode_diagonal(&dual, Condition::Class(0), &sampler, &cfg_on).unwrap();
        prop_assert_eq!(d.trace.steps, h + w - 1);
        prop_assert_eq!(d.trace.invocations, h + w - 1);
        prop_assert_eq!(&d.trace.widths, &diagonal_partition(h, w).unwrap().widths());
        prop_assert_eq!(d.trace.step_times.len(), h + w - 1);
        let r = decode_raster(&dual.horizontal_backbone(), Condition::Class(0), &sampler, &cfg_on).unwrap();
        prop_assert_eq!(r.trace.steps, h * w);
        prop_assert_eq!(r.trace.invocations, h * w);
        prop_assert!(r.trace.widths.iter().all(|&x| x == 1));
    }
}
