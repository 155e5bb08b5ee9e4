//! Shared helpers for the integration tests.
#![allow(dead_code)]

pub mod fixture;

use ivclust::{ClusterBlocks, ClusteredDesign};
use ndarray::{Array1, Array2};

/// The frozen reference dataset, optionally carrying its control columns.
pub fn fixture_design(with_controls: bool) -> ClusteredDesign {
    let blocks = ClusterBlocks::from_sizes(&fixture::SIZES).unwrap();
    let y = Array1::from_vec(fixture::Y.to_vec());
    let x = Array2::from_shape_vec((fixture::N, 1), fixture::X.to_vec()).unwrap();
    let z = Array2::from_shape_vec((fixture::N, fixture::K), fixture::Z.to_vec()).unwrap();
    let w = with_controls
        .then(|| Array2::from_shape_vec((fixture::N, fixture::L), fixture::W.to_vec()).unwrap());
    ClusteredDesign::new(y, x, z, w, blocks).unwrap()
}

/// The hypothesized coefficient the reference values were computed at.
pub fn fixture_beta() -> Array1<f64> {
    ndarray::arr1(&[fixture::BETA])
}

/// Relative closeness with an absolute floor, for comparing two double
/// precision pipelines on identical inputs.
pub fn assert_close(got: f64, want: f64, rel: f64, what: &str) {
    let tol = rel * want.abs().max(1e-3);
    assert!(
        (got - want).abs() <= tol,
        "{what}: got {got}, want {want} (tol {tol})"
    );
}

/// Deterministic 16-bit LCG matrix in [-1, 1), matching the fixture
/// generator's stream.
pub fn lcg_matrix(rows: usize, cols: usize, seed: &mut u32) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        *seed = seed.wrapping_mul(25173).wrapping_add(13849) % 65536;
        f64::from(*seed) / 65536.0 * 2.0 - 1.0
    })
}
