mod common;

use common::*;
use hsdeq::convergence::{epsilon_corrected, epsilon_paper, map_lipschitz, operator_spectrum};
use hsdeq::degrade::{make_kernel, KernelKind};
use hsdeq::denoiser::{ConvLayer, DenoiserModel};
use hsdeq::HqsContext;
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spectrum_matches_dense_eigenvalues(
        h in 3usize..8,
        w in 3usize..8,
        raw in prop::collection::vec(0.0f64..1.0, 9),
    ) {
        let kernel = make_kernel(KernelKind::Custom { size: 3, weights: raw.iter().map(|v| v + 1e-3).collect() }).unwrap();
        let spec = operator_spectrum(&kernel, h, w).unwrap();
        let hm = cbc_matrix(&kernel, h, w);
        let mut dense: Vec<f64> = (hm.transpose() * &hm).symmetric_eigen().eigenvalues.iter().copied().collect();
        let mut fast = spec.eigenvalues.clone();
        dense.sort_by(f64::total_cmp);
        fast.sort_by(f64::total_cmp);
        for (a, b) in fast.iter().zip(&dense) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        prop_assert!((spec.l - dense[0]).abs() < 1e-10);
    }
}

/// Center weight `a`, the rest spread over the four neighbours; on an even
/// grid the smallest `|H̃|²` is `(2a − 1)²`.
fn plus_kernel(a: f64) -> hsdeq::BlurKernel {
    let s = (1.0 - a) / 4.0;
    make_kernel(KernelKind::Custom {
        size: 3,
        weights: vec![0.0, s, 0.0, s, a, s, 0.0, s, 0.0],
    })
    .unwrap()
}

fn scaled_identity(bands: usize, s: f64) -> DenoiserModel {
    let mut layer = ConvLayer::identity(bands);
    let k: Vec<f64> = layer.kernel().iter().map(|v| v * s).collect();
    layer.set_kernel(&k);
    DenoiserModel::new(vec![layer], false).unwrap()
}

/// Exact operator norm of the HQS map for `f(x) = μx`.
fn dense_map_norm(kernel: &hsdeq::BlurKernel, h: usize, w: usize, b: f64, mu: f64) -> f64 {
    let hm = cbc_matrix(kernel, h, w);
    let n = h * w;
    let m = (hm.transpose() * &hm + DMatrix::identity(n, n) * b).try_inverse().unwrap() * (b * mu);
    largest_singular_value(&m)
}

#[test]
fn corrected_factor_is_the_exact_norm_for_a_scaled_identity_prior() {
    let kernel = plus_kernel(0.9);
    let (h, w) = (6, 6);
    let l = operator_spectrum(&kernel, h, w).unwrap().l;
    assert!((l - 0.64).abs() < 1e-12);
    for (b, mu) in [(0.1, 1.0), (1.0, 0.8), (4.0, 0.5)] {
        let exact = dense_map_norm(&kernel, h, w, b, mu);
        assert!((exact - epsilon_corrected(b, mu, l)).abs() < 1e-10);
    }
    // Where b + L > 1 the squared denominator understates the factor.
    let (b, mu) = (1.0, 1.0);
    assert!(dense_map_norm(&kernel, h, w, b, mu) > epsilon_paper(b, mu, l) + 0.2);
}

#[test]
fn empirical_map_lipschitz_respects_the_corrected_bound() {
    let kernel = plus_kernel(0.8);
    let (h, w, d) = (6, 6, 2);
    let l = operator_spectrum(&kernel, h, w).unwrap().l;
    let y = random_cube(h, w, d, 1);
    for (b, seed) in [(0.05, 2), (0.5, 3), (3.0, 4)] {
        let ctx = HqsContext::new(&y, &kernel, b).unwrap();
        let model = tiny_model(d, 4, true, seed, 0.5);
        let mut capped = model.with_sn_grid(h, w);
        capped.set_layer_caps(0.9);
        capped.spectral_normalize(100);
        let mu_bound = 0.81;
        let empirical = map_lipschitz(&ctx, &capped, 40, seed).unwrap();
        assert!(empirical <= epsilon_corrected(b, mu_bound, l) * (1.0 + 1e-9), "b={b}: {empirical}");

        let linear = scaled_identity(d, 0.9);
        let e = map_lipschitz(&HqsContext::new(&y, &kernel, b).unwrap(), &linear, 40, seed).unwrap();
        assert!(e <= epsilon_corrected(b, 0.9, l) * (1.0 + 1e-9));
    }
}
