use depthprompt_core::propagation::reference::propagate_reference;
use depthprompt_core::{
    compute_metrics, fit_scale, mask_range, normalize_affinity, propagate_with, sample_grid, sample_lines,
    sample_random, AffinityField, DepthRaster, EvalWindow, Execution, LineBand, MetricAccumulator,
    PropagationConfig, RangeWindow, SparseDepth,
};
use proptest::prelude::*;

fn raster(max_side: usize) -> impl Strategy<Value = DepthRaster> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop_oneof![1 => Just(0.0f32), 4 => 0.1f32..20.0], h * w)
            .prop_map(move |v| DepthRaster::new(h, w, v).unwrap())
    })
}

fn affinity(h: usize, w: usize, stencil: usize) -> impl Strategy<Value = AffinityField> {
    prop::collection::vec(-1.0f32..1.0, stencil * stencil * h * w)
        .prop_map(move |raw| normalize_affinity(&AffinityField::new(h, w, stencil, raw).unwrap()).unwrap())
}

fn propagation_case() -> impl Strategy<Value = (DepthRaster, SparseDepth, AffinityField, PropagationConfig)> {
    (1usize..=12, 1usize..=12, prop_oneof![Just(3usize), Just(5), Just(7)]).prop_flat_map(|(h, w, c)| {
        (
            prop::collection::vec(0.5f32..10.0, h * w),
            prop::collection::vec(prop_oneof![3 => Just(0.0f32), 1 => 0.5f32..10.0], h * w),
            affinity(h, w, c),
            0usize..8,
            any::<bool>(),
        )
            .prop_map(move |(d0, seeds, field, n_steps, seed_reinjection)| {
                (
                    DepthRaster::new(h, w, d0).unwrap(),
                    SparseDepth::from_raster(DepthRaster::new(h, w, seeds).unwrap()),
                    field,
                    PropagationConfig {
                        n_steps,
                        seed_reinjection,
                        ..Default::default()
                    },
                )
            })
    })
}

fn bits(r: &DepthRaster) -> Vec<u32> {
    r.values().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 128,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn random_sampler_keeps_a_subset_of_the_requested_size(gt in raster(16), seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let n = (gt.valid_count() as f64 * frac) as usize;
        let s = sample_random(&gt, n, seed).unwrap();
        prop_assert_eq!(s.valid_count(), n);
        for (i, &v) in s.values().iter().enumerate() {
            prop_assert!(v == 0.0 || v == gt.values()[i]);
        }
        prop_assert!(sample_random(&gt, gt.valid_count() + 1, seed).is_err());
    }

    #[test]
    fn grid_phases_partition_the_valid_pixels(gt in raster(16), stride in 1usize..5) {
        let mut total = 0;
        for py in 0..stride {
            for px in 0..stride {
                total += sample_grid(&gt, stride, (py, px)).unwrap().valid_count();
            }
        }
        prop_assert_eq!(total, gt.valid_count());
    }

    #[test]
    fn lines_stay_in_the_band(gt in raster(16), n in 1usize..6, seed in any::<u64>()) {
        let band = LineBand::LOWER_HALF;
        let (lo, hi) = band.rows(gt.height());
        if let Ok(s) = sample_lines(&gt, n, band, seed) {
            for i in s.valid_indices() {
                let row = i / gt.width();
                prop_assert!(row >= lo && row < hi);
            }
        }
    }

    #[test]
    fn range_mask_keeps_only_the_window(gt in raster(16), a in 0.0f64..20.0, b in 0.0f64..20.0) {
        let window = RangeWindow::new(a.min(b), a.max(b)).unwrap();
        let masked = mask_range(&gt, window).unwrap();
        for (&m, &g) in masked.values().iter().zip(gt.values()) {
            let inside = g > 0.0 && window.contains(g as f64);
            prop_assert_eq!(m, if inside { g } else { 0.0 });
        }
    }

    #[test]
    fn scale_fit_is_equivariant(rel in raster(12), c in 0.1f64..10.0) {
        prop_assume!(rel.valid_count() > 0);
        let sparse = SparseDepth::from_raster(rel.clone());
        let scaled = SparseDepth::from_raster(
            DepthRaster::new(rel.height(), rel.width(), rel.values().iter().map(|&v| (c * v as f64) as f32).collect()).unwrap(),
        );
        let base = fit_scale(&rel, &sparse).unwrap();
        let fit = fit_scale(&rel, &scaled).unwrap();
        prop_assert!((base.p_hat - 1.0).abs() < 1e-12);
        prop_assert!((fit.p_hat - c).abs() < 1e-6 * c);
    }

    #[test]
    fn fast_propagation_matches_the_reference_loop((d0, seeds, field, cfg) in propagation_case()) {
        let oracle = propagate_reference(&d0, &seeds, &field, &cfg).unwrap();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let fast = propagate_with(&d0, &seeds, &field, &cfg, exec).unwrap();
            prop_assert_eq!(bits(&fast), bits(&oracle));
        }
    }

    #[test]
    fn propagation_commutes_with_transposition((d0, seeds, field, cfg) in propagation_case()) {
        let direct = propagate_with(&d0, &seeds, &field, &cfg, Execution::Sequential).unwrap();
        let swapped = propagate_with(&d0.transpose(), &seeds.transpose(), &field.transpose(), &cfg, Execution::Sequential).unwrap();
        // the stencil visits neighbours in a different order, so only rounding may differ
        for (a, b) in swapped.transpose().values().iter().zip(direct.values()) {
            prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn pooled_metrics_equal_one_big_raster(whole in raster(10), cut in 0.0f64..1.0) {
        // split the rows in two and pool the halves
        let (h, w) = whole.shape();
        let k = ((h as f64 * cut) as usize).min(h);
        let top = DepthRaster::new(k, w, whole.values()[..k * w].to_vec());
        let bottom = DepthRaster::new(h - k, w, whole.values()[k * w..].to_vec()).unwrap();
        let window = EvalWindow::default();
        let mut acc = MetricAccumulator::new();
        if let Ok(top) = &top {
            acc.add(&DepthRaster::filled(k, w, 3.0), top, window).unwrap();
        }
        acc.add(&DepthRaster::filled(h - k, w, 3.0), &bottom, window).unwrap();
        match compute_metrics(&DepthRaster::filled(h, w, 3.0), &whole, window) {
            Ok(expected) => {
                let pooled = acc.report().unwrap();
                prop_assert_eq!(pooled.n_valid, expected.n_valid);
                prop_assert!((pooled.rmse - expected.rmse).abs() < 1e-12);
                prop_assert!((pooled.mae - expected.mae).abs() < 1e-12);
                prop_assert_eq!(pooled.delta1, expected.delta1);
            }
            Err(_) => prop_assert!(acc.report().is_err()),
        }
    }
}
