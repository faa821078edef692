mod common;

use common::*;
use hsdeq::degrade::{make_kernel, KernelKind};
use hsdeq::denoiser::{ConvLayer, DenoiserModel};
use hsdeq::fixedpoint::{solve_hqs, FixedPointConfig};
use hsdeq::training::{deq_loss_grad, du_loss_grad, pretrain_loss_grad};
use hsdeq::{BlurKernel, HqsContext, SpectralCube};
use nalgebra::{DMatrix, DVector};

const H: usize = 5;
const W: usize = 6;
const D: usize = 3;
const STEP: f64 = 1e-6;

fn skew_kernel() -> BlurKernel {
    make_kernel(KernelKind::Custom {
        size: 3,
        weights: vec![0.05, 0.1, 0.0, 0.2, 0.3, 0.15, 0.0, 0.1, 0.1],
    })
    .unwrap()
}

fn probe(model: &DenoiserModel, params: &[f64]) -> DenoiserModel {
    let mut m = model.clone();
    m.set_params(params).unwrap();
    m
}

/// Model whose every layer is measured (σ̂ stored) but not rescaled, so the
/// forward pass divides by σ̂ and the normalization branch of the backward
/// pass is exercised.
fn normalized_model(seed: u64) -> DenoiserModel {
    let mut model = tiny_model(D, 5, true, seed, 0.5);
    for layer in model.layers_mut() {
        layer.set_cap(0.4);
        layer.power_iteration(30, H, W);
        assert!(layer.scale() < 1.0);
    }
    model
}

/// Each layer is held at spectral norm 0.7 by a strictly active normalization,
/// away from the `σ̂ = cap` switch where the scale is not differentiable.
fn contractive_model(seed: u64) -> DenoiserModel {
    let mut model = tiny_model(D, 5, true, seed, 0.5);
    for layer in model.layers_mut() {
        layer.set_cap(0.7);
        layer.power_iteration(30, H, W);
        assert!(layer.scale() < 0.99);
    }
    model
}

#[test]
fn input_vjp_matches_finite_differences() {
    let model = tiny_model(D, 5, true, 3, 0.5);
    let x = random_cube(H, W, D, 1);
    let c = x.with_data(random_vec(x.len(), 2, 1.0)).unwrap();
    let analytic = model.vjp_input(&x, &c).unwrap();
    let numeric = fd_gradient(x.as_slice(), STEP, |v| model.forward(&with_data(&x, v)).unwrap().dot(&c));
    assert_grad_close(analytic.as_slice(), &numeric, 1e-5, "dx");
}

#[test]
fn param_vjp_matches_finite_differences() {
    let model = tiny_model(D, 5, true, 4, 0.5);
    let x = random_cube(H, W, D, 5);
    let c = x.with_data(random_vec(x.len(), 6, 1.0)).unwrap();
    let analytic = model.vjp_params(&x, &c).unwrap().flatten();
    let numeric = fd_gradient(&model.params(), STEP, |p| probe(&model, p).forward(&x).unwrap().dot(&c));
    assert_grad_close(&analytic, &numeric, 1e-5, "dtheta");
}

#[test]
fn param_vjp_through_spectral_normalization_matches_finite_differences() {
    let model = normalized_model(7);
    let x = random_cube(H, W, D, 8);
    let c = x.with_data(random_vec(x.len(), 9, 1.0)).unwrap();
    let analytic = model.vjp_params(&x, &c).unwrap().flatten();
    let numeric = fd_gradient(&model.params(), STEP, |p| probe(&model, p).forward(&x).unwrap().dot(&c));
    assert_grad_close(&analytic, &numeric, 1e-5, "dtheta with normalization");
}

#[test]
fn linear_layer_agrees_with_dense_operator_and_its_transpose() {
    let layer = ConvLayer::new(D, D, random_vec(D * D * 9, 10, 1.0), vec![0.0; D]).unwrap();
    let dense = conv_matrix(D, D, layer.kernel(), H, W);
    let model = DenoiserModel::new(vec![layer], false).unwrap();
    let x = random_cube(H, W, D, 11);
    let fx = model.forward(&x).unwrap();
    let expect = &dense * to_vector(&x);
    assert!(rel_err(fx.as_slice(), expect.as_slice()) < 1e-12);

    let u = x.with_data(random_vec(x.len(), 12, 1.0)).unwrap();
    let vjp = model.vjp_input(&x, &u).unwrap();
    let expect_t = dense.transpose() * to_vector(&u);
    assert!(rel_err(vjp.as_slice(), expect_t.as_slice()) < 1e-12);
    let lhs = u.dot(&fx);
    let rhs = vjp.dot(&x);
    assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn relu_network_satisfies_jvp_vjp_adjoint_identity() {
    let model = tiny_model(D, 5, true, 13, 0.5);
    let x = random_cube(H, W, D, 14);
    let v = random_vec(x.len(), 15, 1.0);
    let u = x.with_data(random_vec(x.len(), 16, 1.0)).unwrap();
    let eps = 1e-7;
    let up = model.forward(&with_data(&x, &x.as_slice().iter().zip(&v).map(|(a, b)| a + eps * b).collect::<Vec<_>>())).unwrap();
    let down = model.forward(&with_data(&x, &x.as_slice().iter().zip(&v).map(|(a, b)| a - eps * b).collect::<Vec<_>>())).unwrap();
    let jv: Vec<f64> = up.as_slice().iter().zip(down.as_slice()).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let lhs: f64 = u.as_slice().iter().zip(&jv).map(|(a, b)| a * b).sum();
    let jtu = model.vjp_input(&x, &u).unwrap();
    let rhs: f64 = jtu.as_slice().iter().zip(&v).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
}

#[test]
fn pretraining_gradient_matches_finite_differences() {
    let model = normalized_model(17);
    let clean = random_cube(H, W, D, 18);
    let noisy = clean
        .with_data(clean.as_slice().iter().zip(random_vec(clean.len(), 19, 0.05)).map(|(a, b)| a + b).collect())
        .unwrap();
    let (_, analytic) = pretrain_loss_grad(&model, &clean, &noisy).unwrap();
    let numeric = fd_gradient(&model.params(), STEP, |p| pretrain_loss_grad(&probe(&model, p), &clean, &noisy).unwrap().0);
    assert_grad_close(&analytic, &numeric, 1e-5, "pretrain");
}

fn blurred_pair(seed: u64) -> (SpectralCube, SpectralCube) {
    let clean = random_cube(H, W, D, seed);
    let y = hsdeq::degrade::blur(&clean, &skew_kernel()).unwrap();
    let y = y
        .with_data(y.as_slice().iter().zip(random_vec(y.len(), seed + 1, 0.01)).map(|(a, b)| a + b).collect())
        .unwrap();
    (clean, y)
}

#[test]
fn unrolled_gradient_matches_finite_differences() {
    let model = normalized_model(20);
    let (clean, y) = blurred_pair(21);
    let kernel = skew_kernel();
    let b = 0.3;
    let (_, analytic, grad_b) = du_loss_grad(&model, b, &kernel, &clean, &y, 3).unwrap();
    let numeric = fd_gradient(&model.params(), STEP, |p| {
        du_loss_grad(&probe(&model, p), b, &kernel, &clean, &y, 3).unwrap().0
    });
    assert_grad_close(&analytic, &numeric, 1e-5, "unrolled dtheta");
    let nb = fd_gradient(&[b], STEP, |v| du_loss_grad(&model, v[0], &kernel, &clean, &y, 3).unwrap().0);
    assert_grad_close(&[grad_b], &nb, 1e-5, "unrolled db");
}

fn tight() -> FixedPointConfig {
    FixedPointConfig::anderson(5, 500, 1e-14)
}

fn deq_loss(model: &DenoiserModel, b: f64, kernel: &BlurKernel, clean: &SpectralCube, y: &SpectralCube) -> f64 {
    let ctx = HqsContext::new(y, kernel, b).unwrap();
    let (x, trace) = solve_hqs(&ctx, model, y, &tight()).unwrap();
    assert!(trace.converged);
    0.5 * x.as_slice().iter().zip(clean.as_slice()).map(|(a, c)| (a - c).powi(2)).sum::<f64>()
}

#[test]
fn implicit_gradient_matches_finite_differences() {
    let model = contractive_model(22);
    let (clean, y) = blurred_pair(23);
    let kernel = skew_kernel();
    let b = 0.4;
    let g = deq_loss_grad(&model, b, &kernel, &clean, &y, &tight(), &tight()).unwrap();
    assert!(g.forward.converged && g.backward_converged);
    let numeric = fd_gradient(&model.params(), STEP, |p| deq_loss(&probe(&model, p), b, &kernel, &clean, &y));
    assert_grad_close(&g.params, &numeric, 1e-4, "implicit dtheta");
    let nb = fd_gradient(&[b], STEP, |v| deq_loss(&model, v[0], &kernel, &clean, &y));
    assert_grad_close(&[g.b], &nb, 1e-4, "implicit db");
}

/// Affine denoiser `f(x) = Mx + c` from one bias-carrying linear layer.
fn affine_model(scale: f64, seed: u64) -> (DenoiserModel, DMatrix<f64>, DVector<f64>) {
    let mut kernel = random_vec(D * D * 9, seed, 0.005);
    for i in 0..D {
        kernel[((i * D + i) * 3 + 1) * 3 + 1] += scale;
    }
    let bias = random_vec(D, seed + 1, 0.1);
    let m = conv_matrix(D, D, &kernel, H, W);
    let c = DVector::from_fn(D * H * W, |p, _| bias[p / (H * W)]);
    let layer = ConvLayer::new(D, D, kernel, bias).unwrap();
    (DenoiserModel::new(vec![layer], false).unwrap(), m, c)
}

#[test]
fn affine_denoiser_fixed_point_and_gradients_match_dense_closed_form() {
    let (model, m, c) = affine_model(0.8, 24);
    let (clean, y) = blurred_pair(25);
    let kernel = skew_kernel();
    let b = 0.5;
    let n = D * H * W;
    let hm = cbc_matrix_bands(&kernel, H, W, D);
    let reg_inv = (hm.transpose() * &hm + DMatrix::identity(n, n) * b).try_inverse().unwrap();
    let a = &reg_inv * b;
    let r0 = &reg_inv * hm.transpose() * to_vector(&y);
    let lhs = DMatrix::identity(n, n) - &a * &m;
    let lu = lhs.clone().lu();
    let x_star = lu.solve(&(&a * &c + &r0)).unwrap();

    let g = deq_loss_grad(&model, b, &kernel, &clean, &y, &tight(), &tight()).unwrap();
    assert!(rel_err(g.x_star.as_slice(), x_star.as_slice()) < 1e-8);

    let resid = &x_star - to_vector(&clean);
    let fx = &m * &x_star + &c;
    let dx_db = lu.solve(&(&reg_inv * (fx - &x_star))).unwrap();
    let grad_b = resid.dot(&dx_db);
    assert!((g.b - grad_b).abs() <= 1e-8 * grad_b.abs(), "{} vs {grad_b}", g.b);

    // ∂L/∂θ = (∂f/∂θ)ᵀ Aᵀ (I − AM)⁻ᵀ (x⋆ − x).
    let w = a.transpose() * lhs.transpose().lu().solve(&resid).unwrap();
    let expect = model.vjp_params(&g.x_star, &g.x_star.with_data(w.as_slice().to_vec()).unwrap()).unwrap().flatten();
    assert!(rel_err(&g.params, &expect) < 1e-8);
}

#[test]
fn unrolled_gradient_approaches_implicit_gradient() {
    let (model, m, _) = affine_model(0.97, 26);
    let (clean, y) = blurred_pair(27);
    let kernel = skew_kernel();
    let b = 2.0;
    let n = D * H * W;
    let hm = cbc_matrix_bands(&kernel, H, W, D);
    let a = (hm.transpose() * &hm + DMatrix::identity(n, n) * b).try_inverse().unwrap() * b;
    let rate = largest_singular_value(&(a * m));
    assert!(rate > 0.9 && rate < 1.0, "{rate}");
    let implicit = deq_loss_grad(&model, b, &kernel, &clean, &y, &tight(), &tight()).unwrap();
    let mut full = implicit.params.clone();
    full.push(implicit.b);
    let mut angles = Vec::new();
    for k in [50, 100, 200] {
        let (_, mut p, gb) = du_loss_grad(&model, b, &kernel, &clean, &y, k).unwrap();
        p.push(gb);
        angles.push(cosine(&p, &full).clamp(-1.0, 1.0).acos());
        if k == 200 {
            assert!(cosine(&p, &full) >= 0.99);
        }
    }
    assert!(angles[0] > angles[1] && angles[1] > angles[2], "{angles:?}");
}
