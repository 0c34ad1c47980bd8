//! Real 2D Fourier transforms over stacks of `h x w` planes.
//!
//! Convention: the forward transform is unnormalized, the inverse carries
//! the full `1/(h*w)` factor. Half spectra have `w/2 + 1` columns and are
//! stored as interleaved `(re, im)` pairs, i.e. a trailing axis of extent 2.
//!
//! The inverse treats its input as a real-linear function of every stored
//! component: imaginary parts of the DC column (and of the Nyquist column for
//! even widths) are ignored, matching the usual c2r behavior. Gradients of
//! both directions are the exact adjoints of those real-linear maps.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::tensor::Element;

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Per-column weight of the c2r sum: columns with no Hermitian partner count
/// once, the rest twice.
fn column_weight(k: usize, w: usize) -> usize {
    if k == 0 || (w.is_multiple_of(2) && k == w / 2) {
        1
    } else {
        2
    }
}

struct Plans<T: Element> {
    row_fwd: std::sync::Arc<dyn rustfft::Fft<T>>,
    row_inv: std::sync::Arc<dyn rustfft::Fft<T>>,
    col_fwd: std::sync::Arc<dyn rustfft::Fft<T>>,
    col_inv: std::sync::Arc<dyn rustfft::Fft<T>>,
}

impl<T: Element> Plans<T> {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::<T>::new();
        Plans {
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }
}

/// Applies a length-`h` transform to every column of an `h x wf` complex grid.
fn columns<T: Element>(grid: &mut [Complex<T>], h: usize, wf: usize, fft: &dyn rustfft::Fft<T>) {
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for k in 0..wf {
        for r in 0..h {
            col[r] = grid[r * wf + k];
        }
        fft.process(&mut col);
        for r in 0..h {
            grid[r * wf + k] = col[r];
        }
    }
}

/// `planes` real planes of `h x w` -> half spectra `(planes, h, w/2+1, 2)`.
pub fn rfft2<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let wf = half_width(w);
    let plans = Plans::<T>::new(h, w);
    let mut out = vec![T::zero(); planes * h * wf * 2];
    let mut row = vec![Complex::new(T::zero(), T::zero()); w];
    let mut grid = vec![Complex::new(T::zero(), T::zero()); h * wf];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                row[c] = Complex::new(src[r * w + c], T::zero());
            }
            plans.row_fwd.process(&mut row);
            grid[r * wf..(r + 1) * wf].copy_from_slice(&row[..wf]);
        }
        columns(&mut grid, h, wf, plans.col_fwd.as_ref());
        let dst = &mut out[p * h * wf * 2..(p + 1) * h * wf * 2];
        for (i, z) in grid.iter().enumerate() {
            dst[2 * i] = z.re;
            dst[2 * i + 1] = z.im;
        }
    }
    out
}

/// Half spectra `(planes, h, w/2+1, 2)` -> real planes `h x w`.
pub fn irfft2<T: Element>(spec: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let wf = half_width(w);
    let plans = Plans::<T>::new(h, w);
    let scale = T::of_f64(1.0 / (h * w) as f64);
    let mut out = vec![T::zero(); planes * h * w];
    let mut grid = vec![Complex::new(T::zero(), T::zero()); h * wf];
    let mut row = vec![Complex::new(T::zero(), T::zero()); w];
    for p in 0..planes {
        let src = &spec[p * h * wf * 2..(p + 1) * h * wf * 2];
        for (i, z) in grid.iter_mut().enumerate() {
            *z = Complex::new(src[2 * i], src[2 * i + 1]);
        }
        columns(&mut grid, h, wf, plans.col_inv.as_ref());
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            row.fill(Complex::new(T::zero(), T::zero()));
            for k in 0..wf {
                let y = grid[r * wf + k];
                if column_weight(k, w) == 1 {
                    row[k] = Complex::new(y.re, T::zero());
                } else {
                    row[k] = y;
                    row[w - k] = y.conj();
                }
            }
            plans.row_inv.process(&mut row);
            for c in 0..w {
                dst[r * w + c] = row[c].re * scale;
            }
        }
    }
    out
}

/// Adjoint of [`rfft2`]: maps an upstream gradient on the half spectrum to a
/// gradient on the real input.
pub fn rfft2_adjoint<T: Element>(grad: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let wf = half_width(w);
    let plans = Plans::<T>::new(h, w);
    let mut out = vec![T::zero(); planes * h * w];
    let mut grid = vec![Complex::new(T::zero(), T::zero()); h * wf];
    let mut row = vec![Complex::new(T::zero(), T::zero()); w];
    for p in 0..planes {
        let src = &grad[p * h * wf * 2..(p + 1) * h * wf * 2];
        for (i, z) in grid.iter_mut().enumerate() {
            *z = Complex::new(src[2 * i], src[2 * i + 1]);
        }
        columns(&mut grid, h, wf, plans.col_inv.as_ref());
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            row.fill(Complex::new(T::zero(), T::zero()));
            row[..wf].copy_from_slice(&grid[r * wf..(r + 1) * wf]);
            plans.row_inv.process(&mut row);
            for c in 0..w {
                dst[r * w + c] = row[c].re;
            }
        }
    }
    out
}

/// Adjoint of [`irfft2`]: `(c_k / (h*w)) * rfft2(grad)` with `c_k` the column
/// weight.
pub fn irfft2_adjoint<T: Element>(grad: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let wf = half_width(w);
    let mut spec = rfft2(grad, planes, h, w);
    let inv = 1.0 / (h * w) as f64;
    for (i, pair) in spec.chunks_exact_mut(2).enumerate() {
        let k = i % wf;
        let s = T::of_f64(column_weight(k, w) as f64 * inv);
        pair[0] = pair[0] * s;
        pair[1] = pair[1] * s;
    }
    spec
}

/// Full complex 2D DFT power `|X|^2` of one real `h x w` plane, in natural
/// (unshifted) frequency order.
pub fn power_spectrum(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let row_fwd = planner.plan_fft_forward(w);
    let col_fwd = planner.plan_fft_forward(h);
    let mut grid: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for r in 0..h {
        row_fwd.process(&mut grid[r * w..(r + 1) * w]);
    }
    columns(&mut grid, h, w, col_fwd.as_ref());
    grid.iter().map(|z| z.norm_sqr()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Direct DFT over the full grid.
    fn naive_dft(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); h * w];
        for k1 in 0..h {
            for k2 in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for n1 in 0..h {
                    for n2 in 0..w {
                        let t = -2.0 * PI * ((k1 * n1) as f64 / h as f64 + (k2 * n2) as f64 / w as f64);
                        re += x[n1 * w + n2] * t.cos();
                        im += x[n1 * w + n2] * t.sin();
                    }
                }
                out[k1 * w + k2] = (re, im);
            }
        }
        out
    }

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn half_spectrum_matches_naive_dft() {
        for &(h, w) in &[(4, 6), (5, 3), (3, 8), (1, 5)] {
            let x = sample(h * w, 11);
            let fast = rfft2(&x, 1, h, w);
            let full = naive_dft(&x, h, w);
            let wf = half_width(w);
            for k1 in 0..h {
                for k2 in 0..wf {
                    let i = k1 * wf + k2;
                    let (re, im) = full[k1 * w + k2];
                    assert!((fast[2 * i] - re).abs() < 1e-10);
                    assert!((fast[2 * i + 1] - im).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        for &(h, w) in &[(4, 6), (5, 7), (8, 8), (1, 1), (2, 1)] {
            let x = sample(2 * h * w, 5);
            let back = irfft2(&rfft2(&x, 2, h, w), 2, h, w);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// <A x, g> == <x, A^T g> for both transforms.
    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        for &(h, w) in &[(4, 6), (3, 5), (2, 2)] {
            let wf = half_width(w);
            let x = sample(h * w, 1);
            let g = sample(h * wf * 2, 2);
            let ax = rfft2(&x, 1, h, w);
            let lhs: f64 = ax.iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&rfft2_adjoint(&g, 1, h, w)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "rfft2 adjoint {lhs} vs {rhs}");

            let y = sample(h * w, 3);
            let s = sample(h * wf * 2, 4);
            let is = irfft2(&s, 1, h, w);
            let lhs: f64 = is.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = s.iter().zip(&irfft2_adjoint(&y, 1, h, w)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "irfft2 adjoint {lhs} vs {rhs}");
        }
    }

    #[test]
    fn power_spectrum_of_constant() {
        let p = power_spectrum(&[2.0; 12], 3, 4);
        assert!((p[0] - 24.0f64.powi(2)).abs() < 1e-9);
        assert!(p[1..].iter().all(|&v| v < 1e-18));
    }
}
