//! Property tests for the structural invariants.

use proptest::prelude::*;
use relvox_core::attribution::{split_multiplicative, SplitVariant};
use relvox_core::eval::{invert_voxels, quantile_mask, QuantileMask};
use relvox_core::stats::auc;
use relvox_core::train::Sample;
use relvox_core::Tensor;

fn unit_volume(n: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(0.0f32..=1.0, n * n * n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Inversion is an involution (to one rounding step: 1 - v is not a
    /// bijection on f32, there are more floats near 0 than near 1) and keeps
    /// voxels inside [0, 1].
    #[test]
    fn inversion_involution(data in unit_volume(4), mask_bits in proptest::collection::vec(any::<bool>(), 64)) {
        let vol = Tensor::new(vec![1, 4, 4, 4], data).unwrap();
        let sample = Sample::new(0, 0, vec![vol], vec![true; 64], 40.0, 3.0).unwrap();
        let count = mask_bits.iter().filter(|&&b| b).count();
        let qm = QuantileMask { mask: mask_bits, quantile: 0.5, scenario_id: 1, voxel_count: count, empty_flagged: count == 0 };
        let once = invert_voxels(&sample, &[&qm]).unwrap();
        prop_assert!(once.volumes[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        let twice = invert_voxels(&once, &[&qm]).unwrap();
        for (a, b) in twice.volumes[0].data().iter().zip(sample.volumes[0].data()) {
            prop_assert!((a - b).abs() <= f32::EPSILON, "{} vs {}", a, b);
        }
    }

    /// Quantile masks are nested as q grows and never leave the brain or
    /// touch non-positive relevance.
    #[test]
    fn quantile_mask_nesting(
        map in proptest::collection::vec(-1.0f32..=1.0, 64),
        brain in proptest::collection::vec(any::<bool>(), 64),
        q1 in 0.0f64..=1.0,
        q2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let t = Tensor::new(vec![1, 4, 4, 4], map.clone()).unwrap();
        let a = quantile_mask(&t, &brain, lo, 1).unwrap();
        let b = quantile_mask(&t, &brain, hi, 1).unwrap();
        for i in 0..64 {
            prop_assert!(!a.mask[i] || b.mask[i]);
            prop_assert!(!b.mask[i] || (brain[i] && map[i] > 0.0));
        }
    }

    /// The multiplicative split telescopes back to the incoming relevance.
    #[test]
    fn split_sums_to_input(
        s in proptest::collection::vec(-5.0f64..5.0, 1..6),
        g_seed in proptest::collection::vec(-5.0f64..5.0, 1..6),
        r_seed in proptest::collection::vec(-2.0f64..2.0, 1..6),
        variant in prop_oneof![Just(SplitVariant::Proposed), Just(SplitVariant::LrpAll)],
    ) {
        let n = s.len();
        let g: Vec<f64> = (0..n).map(|i| g_seed[i % g_seed.len()]).collect();
        let r: Vec<f64> = (0..n).map(|i| r_seed[i % r_seed.len()]).collect();
        let (rs, rg) = split_multiplicative(&s, &g, &r, variant, 1e-12).unwrap();
        for i in 0..n {
            prop_assert!((rs[i] + rg[i] - r[i]).abs() <= 1e-9);
        }
    }

    /// Strictly monotone transforms leave the AUC unchanged exactly.
    #[test]
    fn auc_monotone_invariance(
        scores in proptest::collection::vec(-10.0f64..10.0, 6..40),
        flips in proptest::collection::vec(any::<bool>(), 6..40),
    ) {
        let n = scores.len().min(flips.len());
        let scores = &scores[..n];
        let mut labels = flips[..n].to_vec();
        if labels.iter().all(|&l| l) { labels[0] = false; }
        if !labels.iter().any(|&l| l) { labels[0] = true; }
        let base = auc(scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|&s| (s / 4.0).exp() + 0.1 * s).collect();
        prop_assert_eq!(base, auc(&transformed, &labels).unwrap());
    }
}
