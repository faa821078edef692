//! Independent dense oracles and finite-difference helpers shared by the
//! integration suites. Nothing here calls into the FFT or convolution code
//! under test.

#![allow(dead_code)]

use hsdeq::degrade::BlurKernel;
use hsdeq::denoiser::{ConvLayer, DenoiserModel};
use hsdeq::{rng, SpectralCube};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn random_cube(h: usize, w: usize, d: usize, seed: u64) -> SpectralCube {
    let mut rng = rng::stream(seed, &[0xc0be]);
    SpectralCube::from_fn(h, w, d, |_, _, _| rng.random::<f64>())
}

pub fn random_vec(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[0x7ec]);
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

pub fn to_vector(x: &SpectralCube) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Single-band blur matrix: `y[p] = Σ_q hs[p − q] x[q]` where `hs` is the
/// kernel embedded in an `h x w` zero array with its center rolled to (0, 0).
pub fn cbc_matrix(kernel: &BlurKernel, h: usize, w: usize) -> DMatrix<f64> {
    let k = kernel.size();
    let c = k / 2;
    let mut hs = vec![0.0; h * w];
    for i in 0..k {
        for j in 0..k {
            hs[((i + h - c) % h) * w + (j + w - c) % w] += kernel.weights()[i * k + j];
        }
    }
    DMatrix::from_fn(h * w, h * w, |p, q| {
        let (pr, pc) = (p / w, p % w);
        let (qr, qc) = (q / w, q % w);
        hs[((pr + h - qr) % h) * w + (pc + w - qc) % w]
    })
}

/// The blur matrix acting on all `d` bands of a band-major cube.
pub fn cbc_matrix_bands(kernel: &BlurKernel, h: usize, w: usize, d: usize) -> DMatrix<f64> {
    let one = cbc_matrix(kernel, h, w);
    let n = h * w;
    let mut full = DMatrix::zeros(n * d, n * d);
    for b in 0..d {
        full.view_mut((b * n, b * n), (n, n)).copy_from(&one);
    }
    full
}

/// Dense solve of `(HᵀH + bI) x = Hᵀy + b z`.
pub fn dense_data_consistency(hm: &DMatrix<f64>, y: &DVector<f64>, z: &DVector<f64>, b: f64) -> DVector<f64> {
    let n = hm.ncols();
    let a = hm.transpose() * hm + DMatrix::identity(n, n) * b;
    let rhs = hm.transpose() * y + z * b;
    a.lu().solve(&rhs).expect("nonsingular for b > 0")
}

/// Dense matrix of one layer's linear part (scale 1) on an `h x w` grid:
/// `out[o](r,c) += k[o][i][a][b] · x[i](r + a − 1, c + b − 1)` modulo the grid.
pub fn conv_matrix(cin: usize, cout: usize, kernel: &[f64], h: usize, w: usize) -> DMatrix<f64> {
    let n = h * w;
    let mut m = DMatrix::zeros(cout * n, cin * n);
    for o in 0..cout {
        for i in 0..cin {
            for a in 0..3 {
                for b in 0..3 {
                    let k = kernel[((o * cin + i) * 3 + a) * 3 + b];
                    for r in 0..h {
                        for c in 0..w {
                            let rr = (r + a + h - 1) % h;
                            let cc = (c + b + w - 1) % w;
                            m[(o * n + r * w + c, i * n + rr * w + cc)] += k;
                        }
                    }
                }
            }
        }
    }
    m
}

pub fn largest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

/// Layer with kernel and bias drawn uniformly from `±scale`.
pub fn random_layer(cin: usize, cout: usize, seed: u64, scale: f64) -> ConvLayer {
    ConvLayer::new(
        cin,
        cout,
        random_vec(cin * cout * 9, seed, scale),
        random_vec(cout, seed ^ 0xb1a5, 0.1 * scale),
    )
    .unwrap()
}

/// Two-layer `channels -> hidden -> channels` model.
pub fn tiny_model(channels: usize, hidden: usize, relu: bool, seed: u64, scale: f64) -> DenoiserModel {
    DenoiserModel::new(
        vec![
            random_layer(channels, hidden, seed, scale),
            random_layer(hidden, channels, seed + 1, scale),
        ],
        relu,
    )
    .unwrap()
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn fd_gradient<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Component-wise comparison with a floor so near-zero entries are judged
/// against the gradient's overall scale.
pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], rel: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let tol = rel * n.abs().max(1e-3 * scale);
        assert!(
            (a - n).abs() <= tol,
            "{what}[{i}]: analytic {a:e} vs finite difference {n:e}"
        );
    }
}

pub fn with_data(x: &SpectralCube, data: &[f64]) -> SpectralCube {
    x.with_data(data.to_vec()).unwrap()
}
