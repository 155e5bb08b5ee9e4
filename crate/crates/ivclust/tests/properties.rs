//! Randomized invariants: structural identities that must hold on any
//! well-posed design, checked over generated instances.

mod common;

use common::lcg_matrix;
use ivclust::{
    ar_statistic, clj_test, clmi_statistic, cluster_ar_test, critical_value, kernel_matrix,
    montecarlo, ClusterBlocks, ClusteredDesign, KernelChoice, VarianceEstimator,
};
use ndarray::{arr1, Axis};
use proptest::prelude::*;

/// Build a design from LCG draws; `None` when the draw happens to be
/// degenerate for the requested kernel (rank-deficient Z, unit-leverage
/// cluster), which the properties simply skip.
fn gen_design(seed: u32, sizes: &[usize], k: usize, l: usize) -> Option<ClusteredDesign> {
    let mut s = seed.max(1);
    let blocks = ClusterBlocks::from_sizes(sizes).ok()?;
    let n = blocks.n();
    let y = lcg_matrix(n, 1, &mut s).column(0).to_owned();
    let x = lcg_matrix(n, 1, &mut s);
    let z = lcg_matrix(n, k, &mut s);
    let w = (l > 0).then(|| lcg_matrix(n, l, &mut s));
    ClusteredDesign::new(y, x, z, w, blocks).ok()
}

fn sizes_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=5, 3..=6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kernels_are_symmetric_with_exactly_zero_diagonal_blocks(
        seed in 1u32..u32::MAX,
        sizes in sizes_strategy(),
        k in 1usize..=3,
        l in 0usize..=2,
        which in 0usize..3,
    ) {
        let choice = [
            KernelChoice::PlainClusterJackknife,
            KernelChoice::SymmetricClusterJackknife,
            KernelChoice::ManyControls,
        ][which];
        let design = match gen_design(seed, &sizes, k, l) {
            Some(d) => d,
            None => return Ok(()),
        };
        let kern = match kernel_matrix(&design, choice) {
            Ok(k) => k,
            // High-leverage or collinear draws are legitimate rejections,
            // not property failures.
            Err(_) => return Ok(()),
        };
        let n = design.n();
        let scale = kern.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..n {
            for j in 0..n {
                prop_assert!((kern[(i, j)] - kern[(j, i)]).abs() <= 1e-10 * scale);
            }
        }
        for (_, r) in design.blocks().iter() {
            for i in r.clone() {
                for j in r.clone() {
                    prop_assert_eq!(kern[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn rejection_flags_cohere_with_p_values(
        seed in 1u32..u32::MAX,
        sizes in sizes_strategy(),
        k in 1usize..=2,
        beta in -1.5f64..1.5,
        alpha in 0.01f64..0.3,
    ) {
        let design = match gen_design(seed, &sizes, k, 0) {
            Some(d) => d,
            None => return Ok(()),
        };
        let b = arr1(&[beta]);
        if let Ok(out) = clj_test(
            &design,
            &b.view(),
            alpha,
            KernelChoice::PlainClusterJackknife,
            VarianceEstimator::Plain,
        ) {
            prop_assert_eq!(out.reject, out.p_value < alpha);
            prop_assert!((0.0..=1.0).contains(&out.p_value));
        }
        if let Ok(out) = cluster_ar_test(&design, &b.view(), alpha) {
            prop_assert_eq!(out.reject, out.p_value < alpha);
        }
    }

    #[test]
    fn statistics_are_scale_equivariant(
        seed in 1u32..u32::MAX,
        sizes in sizes_strategy(),
        beta in -1.0f64..1.0,
        scale in 0.2f64..5.0,
    ) {
        let design = match gen_design(seed, &sizes, 2, 0) {
            Some(d) => d,
            None => return Ok(()),
        };
        let scaled = ClusteredDesign::new(
            design.y() * scale,
            design.x() * scale,
            design.z().clone(),
            None,
            design.blocks().clone(),
        ).unwrap();
        let b = arr1(&[beta]);
        let base = clj_test(
            &design, &b.view(), 0.05,
            KernelChoice::PlainClusterJackknife, VarianceEstimator::Plain,
        );
        let resc = clj_test(
            &scaled, &b.view(), 0.05,
            KernelChoice::PlainClusterJackknife, VarianceEstimator::Plain,
        );
        if let (Ok(a), Ok(c)) = (base, resc) {
            if a.statistic.is_finite() && c.statistic.is_finite() {
                prop_assert!((a.statistic - c.statistic).abs()
                    <= 1e-8 * a.statistic.abs().max(1.0));
                prop_assert_eq!(a.reject, c.reject);
            }
        }
    }

    #[test]
    fn outcome_shift_moves_the_hypothesis(
        seed in 1u32..u32::MAX,
        sizes in sizes_strategy(),
        beta in -1.0f64..1.0,
        delta in -2.0f64..2.0,
    ) {
        // Replacing y by y + X d leaves the residuals at beta + d equal to
        // the original residuals at beta, so the AR statistic carries over.
        let design = match gen_design(seed, &sizes, 2, 0) {
            Some(d) => d,
            None => return Ok(()),
        };
        let shifted = ClusteredDesign::new(
            design.y() + &design.x().column(0).mapv(|v| v * delta),
            design.x().clone(),
            design.z().clone(),
            None,
            design.blocks().clone(),
        ).unwrap();
        let at = arr1(&[beta]);
        let at_shift = arr1(&[beta + delta]);
        let a = ar_statistic(&design, &at.view(), KernelChoice::PlainClusterJackknife).unwrap();
        let b = ar_statistic(&shifted, &at_shift.view(), KernelChoice::PlainClusterJackknife).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
    }

    #[test]
    fn cluster_order_does_not_matter(
        seed in 1u32..u32::MAX,
        sizes in sizes_strategy(),
        beta in -1.0f64..1.0,
        rot in 1usize..5,
    ) {
        let design = match gen_design(seed, &sizes, 1, 0) {
            Some(d) => d,
            None => return Ok(()),
        };
        let g = design.g();
        let order: Vec<usize> = (0..g).map(|i| (i + rot) % g).collect();
        // Rebuild the design with clusters in rotated order.
        let mut rows = Vec::new();
        for &gi in &order {
            rows.extend(design.blocks().range(gi));
        }
        let new_sizes: Vec<usize> = order.iter().map(|&gi| design.blocks().size(gi)).collect();
        let y = design.y().select(Axis(0), &rows);
        let x = design.x().select(Axis(0), &rows);
        let z = design.z().select(Axis(0), &rows);
        let permuted = ClusteredDesign::new(
            y, x, z, None, ClusterBlocks::from_sizes(&new_sizes).unwrap(),
        ).unwrap();

        let b = arr1(&[beta]);
        let base_ar = ar_statistic(&design, &b.view(), KernelChoice::PlainClusterJackknife).unwrap();
        let perm_ar = ar_statistic(&permuted, &b.view(), KernelChoice::PlainClusterJackknife).unwrap();
        prop_assert!((base_ar - perm_ar).abs() <= 1e-9 * base_ar.abs().max(1.0));

        match (clmi_statistic(&design, &b.view()), clmi_statistic(&permuted, &b.view())) {
            (Ok((s1, v1)), Ok((s2, v2))) => {
                prop_assert!((s1 - s2).abs() <= 1e-8 * s1.abs().max(1.0));
                prop_assert!((v1 - v2).abs() <= 1e-8 * v1.abs().max(1.0));
            }
            // Degenerate draws may fail on both orderings; that is consistent.
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "ordering changed failure mode: {a:?} vs {b:?}"),
        }
    }

    #[test]
    fn generated_cluster_sizes_partition_n(
        n in 2usize..400,
        g in 2usize..50,
        gamma in 0.0f64..8.0,
    ) {
        prop_assume!(n >= g);
        let sizes = montecarlo::cluster_sizes(n, g, gamma).unwrap();
        prop_assert_eq!(sizes.len(), g);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().all(|&s| s >= 1));
        if gamma == 0.0 {
            let mn = sizes.iter().min().unwrap();
            let mx = sizes.iter().max().unwrap();
            prop_assert!(mx - mn <= 1);
        }
        // The exponential profile is weakly increasing over the regular
        // clusters before reconciliation.
        let pre = montecarlo::cluster_sizes_pre_adjust(n, g, gamma).unwrap();
        for w in pre[..g - 1].windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn critical_values_shrink_as_alpha_grows(
        k in 1usize..200,
        a1 in 0.01f64..0.5,
        bump in 0.01f64..0.4,
    ) {
        let a2 = a1 + bump;
        prop_assert!(critical_value(k, a1) > critical_value(k, a2));
    }

    #[test]
    fn plain_ar_variance_is_nonnegative(
        seed in 1u32..u32::MAX,
        sizes in sizes_strategy(),
        beta in -2.0f64..2.0,
    ) {
        let design = match gen_design(seed, &sizes, 2, 0) {
            Some(d) => d,
            None => return Ok(()),
        };
        let b = arr1(&[beta]);
        let bundle = ivclust::variance_bundle(
            &design, &b.view(),
            KernelChoice::PlainClusterJackknife, VarianceEstimator::Plain,
        ).unwrap();
        prop_assert!(bundle.v_ar >= 0.0);
        prop_assert!(!bundle.clamped);
        // Symmetry of the symmetrized score variance is exact.
        let p = bundle.v_s.nrows();
        for i in 0..p {
            for j in 0..p {
                prop_assert_eq!(bundle.v_s[(i, j)], bundle.v_s[(j, i)]);
            }
        }
    }
}
