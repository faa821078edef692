//! 3x3 multi-channel convolution with circular padding and its adjoints.
//!
//! Kernels are laid out `[out][in][3][3]`; activations are channel-major
//! stacks of `h x w` planes. The forward map is a cross-correlation:
//! `y[o](r, c) = bias[o] + Σ_i Σ_{a,b} k[o][i][a][b] · x[i](r + a - 1, c + b - 1)`
//! with indices taken modulo the grid.

pub(crate) const TAPS: usize = 9;

/// `(h + 2) x (w + 2)` circularly padded copy of every plane.
fn pad(x: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; channels * ph * pw];
    for ch in 0..channels {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ph * pw..(ch + 1) * ph * pw];
        for pr in 0..ph {
            let r = (pr + h - 1) % h;
            let row = &src[r * w..(r + 1) * w];
            let drow = &mut dst[pr * pw..(pr + 1) * pw];
            drow[0] = row[w - 1];
            drow[1..=w].copy_from_slice(row);
            drow[w + 1] = row[0];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl Geometry {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// `y = scale · (k ⋆ x) + bias`.
pub(crate) fn forward(g: Geometry, kernel: &[f64], scale: f64, bias: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let Geometry { cin, cout, h, w } = g;
    let pw = w + 2;
    let xp = pad(x, cin, h, w);
    let plane = g.plane();
    let mut y = vec![0.0; cout * plane];
    for o in 0..cout {
        let yo = &mut y[o * plane..(o + 1) * plane];
        if let Some(bias) = bias {
            yo.iter_mut().for_each(|v| *v = bias[o]);
        }
        for i in 0..cin {
            let xi = &xp[i * (h + 2) * pw..(i + 1) * (h + 2) * pw];
            for a in 0..3 {
                for b in 0..3 {
                    let k = scale * kernel[(o * cin + i) * TAPS + a * 3 + b];
                    if k == 0.0 {
                        continue;
                    }
                    for r in 0..h {
                        let src = &xi[(r + a) * pw + b..(r + a) * pw + b + w];
                        let dst = &mut yo[r * w..(r + 1) * w];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of the linear part with respect to the input: `scale · kᵀ ⋆ gy`.
pub(crate) fn adjoint(g: Geometry, kernel: &[f64], scale: f64, gy: &[f64]) -> Vec<f64> {
    let Geometry { cin, cout, h, w } = g;
    let pw = w + 2;
    let gp = pad(gy, cout, h, w);
    let plane = g.plane();
    let mut gx = vec![0.0; cin * plane];
    for i in 0..cin {
        let gxi = &mut gx[i * plane..(i + 1) * plane];
        for o in 0..cout {
            let go = &gp[o * (h + 2) * pw..(o + 1) * (h + 2) * pw];
            for a in 0..3 {
                for b in 0..3 {
                    let k = scale * kernel[(o * cin + i) * TAPS + a * 3 + b];
                    if k == 0.0 {
                        continue;
                    }
                    let (ra, cb) = (2 - a, 2 - b);
                    for r in 0..h {
                        let src = &go[(r + ra) * pw + cb..(r + ra) * pw + cb + w];
                        let dst = &mut gxi[r * w..(r + 1) * w];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += k * s);
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of `⟨gy, k ⋆ x⟩` with respect to `k`.
pub(crate) fn kernel_grad(g: Geometry, gy: &[f64], x: &[f64]) -> Vec<f64> {
    let Geometry { cin, cout, h, w } = g;
    let pw = w + 2;
    let xp = pad(x, cin, h, w);
    let plane = g.plane();
    let mut gk = vec![0.0; cout * cin * TAPS];
    for o in 0..cout {
        let go = &gy[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let xi = &xp[i * (h + 2) * pw..(i + 1) * (h + 2) * pw];
            for a in 0..3 {
                for b in 0..3 {
                    let mut acc = 0.0;
                    for r in 0..h {
                        let src = &xi[(r + a) * pw + b..(r + a) * pw + b + w];
                        let gr = &go[r * w..(r + 1) * w];
                        acc += gr.iter().zip(src).map(|(p, q)| p * q).sum::<f64>();
                    }
                    gk[(o * cin + i) * TAPS + a * 3 + b] = acc;
                }
            }
        }
    }
    gk
}

/// Per-output-channel spatial sums (the bias adjoint).
pub(crate) fn bias_grad(cout: usize, plane: usize, gy: &[f64]) -> Vec<f64> {
    (0..cout)
        .map(|o| gy[o * plane..(o + 1) * plane].iter().sum())
        .collect()
}

/// Exact operator norm of the linear part on the grid, and a real input of
/// unit norm attaining it. Circular convolution is block-diagonalized by the
/// 2-D DFT, so the norm is the largest singular value of the `cout x cin`
/// symbol `K̂(ω) = Σ_{a,b} k[·][·][a][b] · exp(i(ω_r(a−1) + ω_c(b−1)))`
/// over all grid frequencies.
pub(crate) fn spectral_norm(g: Geometry, kernel: &[f64]) -> (f64, Vec<f64>) {
    use nalgebra::DMatrix;
    use num_complex::Complex64;
    use std::f64::consts::TAU;

    let Geometry { cin, cout, h, w } = g;
    let mut best = (-1.0, 0, 0, Vec::new());
    for fr in 0..h {
        for fc in 0..w {
            let (tr, tc) = (TAU * fr as f64 / h as f64, TAU * fc as f64 / w as f64);
            let phase: Vec<Complex64> = (0..TAPS)
                .map(|t| Complex64::from_polar(1.0, tr * (t / 3) as f64 - tr + tc * (t % 3) as f64 - tc))
                .collect();
            let symbol = DMatrix::from_fn(cout, cin, |o, i| {
                let k = &kernel[(o * cin + i) * TAPS..(o * cin + i + 1) * TAPS];
                k.iter().zip(&phase).map(|(kv, p)| p * *kv).sum::<Complex64>()
            });
            let svd = symbol.svd(false, true);
            let (idx, &sigma) = svd
                .singular_values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty symbol");
            if sigma > best.0 {
                let vt = svd.v_t.expect("requested");
                let v: Vec<Complex64> = (0..cin).map(|i| vt[(idx, i)].conj()).collect();
                best = (sigma, fr, fc, v);
            }
        }
    }
    let (sigma, fr, fc, vhat) = best;
    let (tr, tc) = (TAU * fr as f64 / h as f64, TAU * fc as f64 / w as f64);
    let wave = |take_re: bool| -> Vec<f64> {
        let mut x = Vec::with_capacity(cin * h * w);
        for vi in &vhat {
            for r in 0..h {
                for c in 0..w {
                    let z = Complex64::from_polar(1.0, tr * r as f64 + tc * c as f64) * vi;
                    x.push(if take_re { z.re } else { z.im });
                }
            }
        }
        x
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (re, im) = (wave(true), wave(false));
    let mut v = if norm(&re) >= norm(&im) { re } else { im };
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    (sigma, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, &[]);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn naive_circular_correlation_matches() {
        let g = Geometry { cin: 2, cout: 3, h: 5, w: 4 };
        let k = random(g.cout * g.cin * TAPS, 1);
        let bias = random(g.cout, 2);
        let x = random(g.cin * g.plane(), 3);
        let y = forward(g, &k, 0.7, Some(&bias), &x);
        for o in 0..g.cout {
            for r in 0..g.h {
                for c in 0..g.w {
                    let mut acc = bias[o];
                    for i in 0..g.cin {
                        for a in 0..3 {
                            for b in 0..3 {
                                let rr = (r + g.h + a - 1) % g.h;
                                let cc = (c + g.w + b - 1) % g.w;
                                acc += 0.7 * k[(o * g.cin + i) * TAPS + a * 3 + b]
                                    * x[i * g.plane() + rr * g.w + cc];
                            }
                        }
                    }
                    assert!((acc - y[o * g.plane() + r * g.w + c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adjoint_identities() {
        let g = Geometry { cin: 3, cout: 2, h: 6, w: 7 };
        let k = random(g.cout * g.cin * TAPS, 4);
        let x = random(g.cin * g.plane(), 5);
        let gy = random(g.cout * g.plane(), 6);
        let lhs = dot(&forward(g, &k, 1.3, None, &x), &gy);
        assert!((lhs - dot(&x, &adjoint(g, &k, 1.3, &gy))).abs() < 1e-10);
        assert!((lhs - 1.3 * dot(&k, &kernel_grad(g, &gy, &x))).abs() < 1e-10);
    }

    #[test]
    fn symbol_norm_is_attained() {
        let g = Geometry { cin: 3, cout: 2, h: 6, w: 5 };
        let k = random(2 * 3 * TAPS, 21);
        let (sigma, v) = spectral_norm(g, &k);
        let av = forward(g, &k, 1.0, None, &v);
        assert!((dot(&av, &av).sqrt() - sigma).abs() < 1e-10 * sigma);
        // No random direction exceeds it.
        for seed in 0..20 {
            let mut x = random(3 * 30, 100 + seed);
            let n = dot(&x, &x).sqrt();
            x.iter_mut().for_each(|v| *v /= n);
            let ax = forward(g, &k, 1.0, None, &x);
            assert!(dot(&ax, &ax).sqrt() <= sigma * (1.0 + 1e-12));
        }
    }

    #[test]
    fn tiny_grids_wrap() {
        // 1x1 and 2x2 grids alias several taps onto the same pixel.
        for &(h, w) in &[(1, 1), (2, 2), (1, 3)] {
            let g = Geometry { cin: 1, cout: 1, h, w };
            let k = random(TAPS, 7);
            let x = random(g.plane(), 8);
            let gy = random(g.plane(), 9);
            let lhs = dot(&forward(g, &k, 1.0, None, &x), &gy);
            assert!((lhs - dot(&x, &adjoint(g, &k, 1.0, &gy))).abs() < 1e-12);
        }
    }
}
