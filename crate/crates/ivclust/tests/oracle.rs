//! Every statistic the crate computes, checked against values from an
//! independent dense implementation of the same displays on a frozen
//! dataset (see `common/fixture.rs`). Inputs are exact dyadic rationals,
//! so both pipelines consume identical floats and tight relative
//! tolerances are meaningful.

mod common;

use common::fixture as fx;
use common::{assert_close, fixture_beta, fixture_design};
use ivclust::blocks::many_controls_kernel;
use ivclust::{
    ar_statistic, clc_estimators, cluster_ar_test, cluster_moment_projection, clmi_statistic,
    first_stage_f, kernel_matrix, score_statistic, validate, variance_bundle, FFlavor,
    KernelChoice, VarianceEstimator,
};

const REL: f64 = 1e-9;

fn kernel_cases() -> [(KernelChoice, [f64; 8], &'static str); 3] {
    [
        (
            KernelChoice::PlainClusterJackknife,
            [
                fx::PLAIN_AR,
                fx::PLAIN_S,
                fx::PLAIN_VAR,
                fx::PLAIN_VS,
                fx::PLAIN_C,
                fx::PLAIN_VAR_CF,
                fx::PLAIN_VS_CF,
                fx::PLAIN_C_CF,
            ],
            "plain",
        ),
        (
            KernelChoice::SymmetricClusterJackknife,
            [
                fx::SYM_AR,
                fx::SYM_S,
                fx::SYM_VAR,
                fx::SYM_VS,
                fx::SYM_C,
                fx::SYM_VAR_CF,
                fx::SYM_VS_CF,
                fx::SYM_C_CF,
            ],
            "symmetric",
        ),
        (
            KernelChoice::ManyControls,
            [
                fx::MC_AR,
                fx::MC_S,
                fx::MC_VAR,
                fx::MC_VS,
                fx::MC_C,
                fx::MC_VAR_CF,
                fx::MC_VS_CF,
                fx::MC_C_CF,
            ],
            "many-controls",
        ),
    ]
}

#[test]
fn statistics_match_reference_for_all_kernels() {
    let design = fixture_design(true);
    let beta = fixture_beta();
    for (choice, want, name) in kernel_cases() {
        let [ar, s, var, vs, c, var_cf, vs_cf, c_cf] = want;
        let got_ar = ar_statistic(&design, &beta.view(), choice).unwrap();
        assert_close(got_ar, ar, REL, &format!("{name} AR"));
        let got_s = score_statistic(&design, &beta.view(), choice).unwrap();
        assert_close(got_s[0], s, REL, &format!("{name} score"));

        let plain = variance_bundle(&design, &beta.view(), choice, VarianceEstimator::Plain)
            .unwrap();
        assert_close(plain.v_ar, var, REL, &format!("{name} V_AR"));
        assert_close(plain.v_s[(0, 0)], vs, REL, &format!("{name} V_S"));
        assert_close(plain.c[0], c, REL, &format!("{name} C"));
        assert!(!plain.clamped);

        let cf = variance_bundle(&design, &beta.view(), choice, VarianceEstimator::CrossFit)
            .unwrap();
        assert_close(cf.v_ar_raw, var_cf, REL, &format!("{name} V_AR cross-fit"));
        assert_close(cf.v_s[(0, 0)], vs_cf, REL, &format!("{name} V_S cross-fit"));
        assert_close(cf.c[0], c_cf, REL, &format!("{name} C cross-fit"));
        // The symmetric-kernel cross-fit variance happens to be negative on
        // this dataset, exercising the clamp-and-flag policy.
        if var_cf < 0.0 {
            assert!(cf.clamped, "{name}: negative raw variance must clamp");
            assert_eq!(cf.v_ar, 0.0);
        } else {
            assert!(!cf.clamped);
            assert_close(cf.v_ar, var_cf, REL, &format!("{name} clamped V_AR"));
        }
    }
}

#[test]
fn symmetric_cross_fit_is_negative_here() {
    // Guard the guard: the fixture was chosen so this path is exercised.
    let frozen = fx::SYM_VAR_CF;
    assert!(frozen < 0.0, "fixture no longer exercises the negative-variance path");
}

#[test]
fn kernel_entries_match_reference() {
    let design = fixture_design(true);
    for (choice, want, name) in [
        (KernelChoice::PlainClusterJackknife, fx::KERNEL_PLAIN_0_5, "plain"),
        (KernelChoice::SymmetricClusterJackknife, fx::KERNEL_SYM_0_5, "symmetric"),
        (KernelChoice::ManyControls, fx::KERNEL_MC_0_5, "many-controls"),
    ] {
        let k = kernel_matrix(&design, choice).unwrap();
        assert_close(k[(0, 5)], want, REL, &format!("{name} kernel (0,5)"));
        // Diagonal cluster blocks are exactly zero by construction.
        let blocks = design.blocks();
        for (_, r) in blocks.iter() {
            for i in r.clone() {
                for j in r.clone() {
                    assert_eq!(k[(i, j)], 0.0, "{name} diagonal block ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn many_controls_solve_residual_is_rounding_level() {
    let design = fixture_design(true);
    let mc = many_controls_kernel(
        &design.z().view(),
        &design.w().unwrap().view(),
        design.blocks(),
    )
    .unwrap();
    // The reference run left 1.4e-16; anything at rounding scale passes.
    assert!(
        mc.pre_zero_residual <= 1e-12,
        "pre-zeroing residual {}",
        mc.pre_zero_residual
    );
}

#[test]
fn many_instrument_statistics_match_reference() {
    let design = fixture_design(true);
    let beta = fixture_beta();
    let (stat, vhat) = clmi_statistic(&design, &beta.view()).unwrap();
    assert_close(stat, fx::CLMI_STAT, REL, "CLMI statistic");
    assert_close(vhat, fx::CLMI_VAR, REL, "CLMI variance");
    let outcome = cluster_ar_test(&design, &beta.view(), 0.05).unwrap();
    assert_close(outcome.statistic, fx::CLUSTER_AR_STAT, REL, "cluster AR");
}

#[test]
fn clc_estimators_match_reference() {
    let design = fixture_design(true);
    let beta = fixture_beta();
    let clc = clc_estimators(&design, &beta.view()).unwrap();
    assert_close(clc.phi1, fx::CLC_PHI1, REL, "phi1");
    assert_close(clc.phi12, fx::CLC_PHI12, REL, "phi12");
    assert_close(clc.phi13, fx::CLC_PHI13, REL, "phi13");
    assert_close(clc.psi, fx::CLC_PSI, REL, "psi");
    assert_close(clc.upsilon, fx::CLC_UPSILON, REL, "upsilon");
    // phi1 is the plain AR variance estimator under another name.
    assert_close(clc.phi1, fx::PLAIN_VAR, REL, "phi1 == plain V_AR");
}

#[test]
fn first_stage_diagnostics_match_reference() {
    let design = fixture_design(true);
    for (flavor, want, name) in [
        (FFlavor::Homoskedastic, fx::F_HOMOSKEDASTIC, "homoskedastic F"),
        (FFlavor::Robust, fx::F_ROBUST, "robust F"),
        (FFlavor::Effective, fx::F_EFFECTIVE, "effective F"),
    ] {
        let got = first_stage_f(&design, flavor).unwrap();
        assert!(!got.infinite);
        assert_close(got.value, want, REL, name);
    }
}

#[test]
fn leverage_diagnostics_match_reference() {
    let design = fixture_design(true);
    let report = validate(&design).unwrap();
    assert_close(
        report.max_cluster_leverage,
        fx::MAX_LEVERAGE,
        REL,
        "max cluster leverage",
    );
    assert!(report.z_full_rank);
    assert_eq!(report.w_full_rank, Some(true));
    assert!(report.k_lt_g);
    assert!(report.few_clusters);

    let beta = fixture_beta();
    let proj = cluster_moment_projection(&design, &beta.view()).unwrap();
    assert_eq!(proj.k, fx::K);
    assert!(proj.max_diag > 0.0 && proj.max_diag <= 1.0 + 1e-12);
}

#[test]
fn controls_do_not_enter_plain_or_symmetric_statistics() {
    // The plain and symmetric kernels depend only on Z, so carrying raw
    // controls or dropping them entirely must not change the statistics.
    let with_w = fixture_design(true);
    let without_w = fixture_design(false);
    let beta = fixture_beta();
    for choice in [
        KernelChoice::PlainClusterJackknife,
        KernelChoice::SymmetricClusterJackknife,
    ] {
        let a = ar_statistic(&with_w, &beta.view(), choice).unwrap();
        let b = ar_statistic(&without_w, &beta.view(), choice).unwrap();
        assert_eq!(a, b);
    }
}
