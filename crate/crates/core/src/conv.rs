//! Direct stride-1 2D convolution with "same" zero padding.
//!
//! Cross-correlation semantics: `out[n,o,y,x] = b[o] + sum_{i,ky,kx}
//! w[o,i,ky,kx] * in[n, g*cin_g + i, y+ky-p, x+kx-p]` with `p = k/2`.
//! Output planes are computed independently, so splitting work across rayon
//! threads does not change the reduction order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], groups: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::Conv(format!(
                "expected rank-4 input and weight, got {input:?} and {weight:?}"
            )));
        }
        let (batch, cin, height, width) = (input[0], input[1], input[2], input[3]);
        let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Conv(format!(
                "channels cin={cin} cout={cout} not divisible by groups={groups}"
            )));
        }
        if cin / groups != cin_g {
            return Err(Error::Conv(format!(
                "weight expects {cin_g} input channels per group, input provides {}",
                cin / groups
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Conv(format!(
                "even kernel size {kh}x{kw} is unsupported"
            )));
        }
        Ok(ConvGeom {
            batch,
            cin,
            cout,
            height,
            width,
            kh,
            kw,
            groups,
        })
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    /// Multiply-accumulates for one forward call.
    pub fn macs(&self) -> u64 {
        (self.batch * self.cout * self.cin_per_group() * self.kh * self.kw * self.plane()) as u64
    }
}

#[inline]
fn axpy<T: Element>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc = acc + a * b;
    }
    acc
}

/// Valid row/column span for a kernel offset `d` over extent `n`: output
/// indices `lo..hi` read input indices `lo+d..hi+d`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// Accumulates `w * shift(src, dy, dx)` into `dst` (both `h x w` planes).
#[inline]
fn shifted_axpy<T: Element>(w: T, src: &[T], dst: &mut [T], dy: isize, dx: isize, h: usize, wd: usize) {
    let (y0, y1) = span(dy, h);
    let (x0, x1) = span(dx, wd);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let s = &src[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
        axpy(w, s, &mut dst[y * wd + x0..y * wd + x1]);
    }
}

#[inline]
fn shifted_dot<T: Element>(g: &[T], src: &[T], dy: isize, dx: isize, h: usize, wd: usize) -> T {
    let (y0, y1) = span(dy, h);
    let (x0, x1) = span(dx, wd);
    let mut acc = T::zero();
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let s = &src[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
        acc = acc + dot(&g[y * wd + x0..y * wd + x1], s);
    }
    acc
}

pub fn conv2d_forward<T: Element>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.plane();
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let ksize = g.kh * g.kw;
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let mut out = vec![T::zero(); g.batch * g.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (n, o) = (idx / g.cout, idx % g.cout);
        if let Some(b) = bias {
            dst.fill(b[o]);
        }
        let group = o / cout_g;
        for i in 0..cin_g {
            let ci = group * cin_g + i;
            let src = &input[(n * g.cin + ci) * plane..(n * g.cin + ci + 1) * plane];
            let wbase = (o * cin_g + i) * ksize;
            if g.is_pointwise() {
                axpy(weight[wbase], src, dst);
                continue;
            }
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let w = weight[wbase + ky * g.kw + kx];
                    shifted_axpy(w, src, dst, ky as isize - ph, kx as isize - pw, g.height, g.width);
                }
            }
        }
    });
    out
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.plane();
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let ksize = g.kh * g.kw;
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);

    let d_input = need_input.then(|| {
        let mut d = vec![T::zero(); g.batch * g.cin * plane];
        d.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
            let (n, ci) = (idx / g.cin, idx % g.cin);
            let group = ci / cin_g;
            let i = ci % cin_g;
            for oo in 0..cout_g {
                let o = group * cout_g + oo;
                let src = &grad_out[(n * g.cout + o) * plane..(n * g.cout + o + 1) * plane];
                let wbase = (o * cin_g + i) * ksize;
                if g.is_pointwise() {
                    axpy(weight[wbase], src, dst);
                    continue;
                }
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let w = weight[wbase + ky * g.kw + kx];
                        // input (y+dy) received w*g(y)  =>  d_in(y') += w*g(y'-dy)
                        shifted_axpy(w, src, dst, ph - ky as isize, pw - kx as isize, g.height, g.width);
                    }
                }
            }
        });
        d
    });

    let d_weight = need_weight.then(|| {
        let mut d = vec![T::zero(); g.cout * cin_g * ksize];
        d.par_chunks_mut(cin_g * ksize).enumerate().for_each(|(o, dst)| {
            let group = o / cout_g;
            for n in 0..g.batch {
                let go = &grad_out[(n * g.cout + o) * plane..(n * g.cout + o + 1) * plane];
                for i in 0..cin_g {
                    let ci = group * cin_g + i;
                    let src = &input[(n * g.cin + ci) * plane..(n * g.cin + ci + 1) * plane];
                    if g.is_pointwise() {
                        dst[i] = dst[i] + dot(go, src);
                        continue;
                    }
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let k = i * ksize + ky * g.kw + kx;
                            dst[k] = dst[k]
                                + shifted_dot(go, src, ky as isize - ph, kx as isize - pw, g.height, g.width);
                        }
                    }
                }
            }
        });
        d
    });

    let d_bias = need_bias.then(|| {
        let mut d = vec![T::zero(); g.cout];
        for n in 0..g.batch {
            for (o, slot) in d.iter_mut().enumerate() {
                let go = &grad_out[(n * g.cout + o) * plane..(n * g.cout + o + 1) * plane];
                *slot = *slot + go.iter().copied().sum::<T>();
            }
        }
        d
    });

    (d_input, d_weight, d_bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nested-loop reference with explicit bounds checks.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
        let (h, wd) = (g.height as isize, g.width as isize);
        let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
        let mut out = vec![0.0; g.batch * g.cout * g.plane()];
        for n in 0..g.batch {
            for o in 0..g.cout {
                let grp = o / g.cout_per_group();
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.map_or(0.0, |b| b[o]);
                        for i in 0..g.cin_per_group() {
                            let ci = grp * g.cin_per_group() + i;
                            for ky in 0..g.kh as isize {
                                for kx in 0..g.kw as isize {
                                    let (sy, sx) = (y + ky - ph, xx + kx - pw);
                                    if sy < 0 || sx < 0 || sy >= h || sx >= wd {
                                        continue;
                                    }
                                    let xv = x[((n * g.cin + ci) as isize * h + sy) as usize * g.width + sx as usize];
                                    let wv = w[((o * g.cin_per_group() + i) * g.kh + ky as usize) * g.kw + kx as usize];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((n * g.cout + o) * g.height + y as usize) * g.width + xx as usize] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn matches_naive_reference() {
        let mut s = 3;
        for &(cin, cout, k, groups, h, w) in &[
            (3, 4, 3, 1, 5, 6),
            (4, 4, 5, 4, 7, 4),
            (6, 4, 1, 2, 3, 3),
            (2, 2, 9, 2, 4, 4),
        ] {
            let g = ConvGeom::new(&[2, cin, h, w], &[cout, cin / groups, k, k], groups).unwrap();
            let x: Vec<f64> = (0..2 * cin * h * w).map(|_| lcg(&mut s)).collect();
            let wt: Vec<f64> = (0..cout * (cin / groups) * k * k).map(|_| lcg(&mut s)).collect();
            let b: Vec<f64> = (0..cout).map(|_| lcg(&mut s)).collect();
            let fast = conv2d_forward(&g, &x, &wt, Some(&b));
            let slow = naive(&g, &x, &wt, Some(&b));
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_ones_center_is_nine() {
        let g = ConvGeom::new(&[1, 1, 3, 3], &[1, 1, 3, 3], 1).unwrap();
        let out = conv2d_forward(&g, &[1.0f64; 9], &[1.0; 9], None);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(ConvGeom::new(&[1, 3, 4, 4], &[4, 3, 2, 2], 1).is_err());
        assert!(ConvGeom::new(&[1, 3, 4, 4], &[3, 1, 3, 3], 2).is_err());
        assert!(ConvGeom::new(&[1, 4, 4, 4], &[4, 2, 3, 3], 1).is_err());
    }
}
