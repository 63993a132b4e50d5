use proptest::prelude::*;
use selftof::maps::DepthMap;
use selftof::scale::{median_of_median_scaling_mms, median_scaling_ms, mms_scale, ms_scale};
use selftof::tofsim::{fit_zones, inject_sparsity, ZoneGrid, ZoneLayout};

fn depth_strategy() -> impl Strategy<Value = DepthMap<f64>> {
    (8usize..40, 8usize..40).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.2f64..9.0, w * h).prop_map(move |v| DepthMap::new(w, h, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn footprints_partition_the_image(rows in 1usize..9, cols in 1usize..9, extra_h in 0usize..30, extra_w in 0usize..30) {
        let (h, w) = (rows + extra_h, cols + extra_w);
        let layout = ZoneLayout::new(rows, cols, h, w).unwrap();
        let mut hits = vec![0u8; w * h];
        for f in layout.footprints() {
            for p in f.pixels(w) {
                hits[p] += 1;
            }
        }
        prop_assert!(hits.iter().all(|&c| c == 1));
    }

    #[test]
    fn constant_depth_gives_exact_moments(c in 0.1f64..20.0, w in 8usize..50, h in 8usize..50) {
        let g = fit_zones(&DepthMap::constant(w, h, c), 8, 8).unwrap();
        prop_assert!(g.valid.iter().all(|&v| v));
        prop_assert!(g.mean.iter().all(|&m| m == c));
        prop_assert!(g.std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn zone_means_lie_within_footprint_range(d in depth_strategy()) {
        let g = fit_zones(&d, 4, 4).unwrap();
        let layout = g.layout();
        for z in 0..16 {
            let vals: Vec<f64> = layout.footprint(z).pixels(d.width).map(|i| d.values[i]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g.mean[z] >= lo && g.mean[z] <= hi);
            prop_assert!(g.std[z] >= 0.0 && g.std[z] <= hi - lo);
        }
    }

    #[test]
    fn sparsity_drops_the_requested_count(d in depth_strategy(), ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let g = fit_zones(&d, 8, 8).unwrap();
        let s = inject_sparsity(&g, ratio, seed).unwrap();
        let expected = g.valid_count() - ((ratio * g.valid_count() as f64) + 1e-9).floor() as usize;
        prop_assert_eq!(s.valid_count(), expected);
        for z in 0..64 {
            prop_assert!(!s.valid[z] || g.valid[z]);
            if s.valid[z] {
                prop_assert_eq!(s.mean[z], g.mean[z]);
            }
        }
        prop_assert_eq!(inject_sparsity(&g, ratio, seed).unwrap(), s);
    }

    #[test]
    fn json_round_trip(d in depth_strategy(), seed in any::<u64>()) {
        let g = inject_sparsity(&fit_zones(&d, 8, 8).unwrap(), 0.3, seed).unwrap();
        prop_assert_eq!(ZoneGrid::from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn scale_recovery_is_equivariant(d in depth_strategy(), k in -3i32..4) {
        let grid = fit_zones(&d.scaled(1.7), 8, 8).unwrap();
        let f = 2f64.powi(k);
        let scaled = d.scaled(f);
        prop_assert_eq!(ms_scale(&scaled, &grid).unwrap(), ms_scale(&d, &grid).unwrap() / f);
        prop_assert_eq!(mms_scale(&scaled, &grid).unwrap(), mms_scale(&d, &grid).unwrap() / f);
        prop_assert_eq!(median_scaling_ms(&scaled, &grid).unwrap().0, median_scaling_ms(&d, &grid).unwrap().0);
        prop_assert_eq!(
            median_of_median_scaling_mms(&scaled, &grid).unwrap().0,
            median_of_median_scaling_mms(&d, &grid).unwrap().0
        );
    }
}
