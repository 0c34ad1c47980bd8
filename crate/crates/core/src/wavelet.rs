//! Orthonormal 2D Haar analysis and synthesis.
//!
//! Each non-overlapping 2x2 block `[[a, b], [c, d]]` maps to
//!
//! ```text
//! LL = (a + b + c + d) / 2     HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2     HH = (a - b - c + d) / 2
//! ```
//!
//! The matrix is symmetric and orthogonal, so synthesis applies the same
//! butterfly and the transform preserves energy.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// The four subbands of one analysis level, in `(LL, HL, LH, HH)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet<T: Element> {
    pub ll: Tensor<T>,
    pub hl: Tensor<T>,
    pub lh: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Element> SubbandSet<T> {
    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ll, &self.hl, &self.lh, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| b.sum_sq()).sum()
    }
}

#[inline]
fn butterfly<T: Element>(a: T, b: T, c: T, d: T) -> [T; 4] {
    let half = T::of_f64(0.5);
    [
        (a + b + c + d) * half,
        (a - b + c - d) * half,
        (a + b - c - d) * half,
        (a - b - c + d) * half,
    ]
}

pub(crate) fn check_even(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::OddExtent { height: h, width: w });
    }
    Ok(())
}

/// Analysis over `planes` planes of `h x w`, writing band `b` of plane `p` to
/// `bands[b][p]`.
fn analyze<T: Element>(x: &[T], planes: usize, h: usize, w: usize, mut put: impl FnMut(usize, usize, usize, T)) {
    let (h2, w2) = (h / 2, w / 2);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                for (band, v) in butterfly(a, b, c, d).into_iter().enumerate() {
                    put(band, p, i * w2 + j, v);
                }
            }
        }
    }
}

fn synthesize<T: Element>(planes: usize, h2: usize, w2: usize, get: impl Fn(usize, usize, usize) -> T) -> Vec<T> {
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                let k = i * w2 + j;
                let [a, b, c, d] = butterfly(get(0, p, k), get(1, p, k), get(2, p, k), get(3, p, k));
                dst[2 * i * w + 2 * j] = a;
                dst[2 * i * w + 2 * j + 1] = b;
                dst[(2 * i + 1) * w + 2 * j] = c;
                dst[(2 * i + 1) * w + 2 * j + 1] = d;
            }
        }
    }
    out
}

/// Forward transform of a tensor whose last two axes are spatial.
pub fn haar_dwt2<T: Element>(x: &Tensor<T>) -> Result<SubbandSet<T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "haar_dwt2 needs at least 2 axes, got {shape:?}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    check_even(h, w)?;
    let planes = x.len() / (h * w);
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = h / 2;
    out_shape[r - 1] = w / 2;
    let plane = h * w / 4;
    let mut bands = vec![vec![T::zero(); planes * plane]; 4];
    analyze(x.data(), planes, h, w, |b, p, k, v| bands[b][p * plane + k] = v);
    let mut it = bands.into_iter().map(|d| Tensor::from_vec(&out_shape, d));
    Ok(SubbandSet {
        ll: it.next().unwrap()?,
        hl: it.next().unwrap()?,
        lh: it.next().unwrap()?,
        hh: it.next().unwrap()?,
    })
}

/// Inverse of [`haar_dwt2`].
pub fn haar_idwt2<T: Element>(s: &SubbandSet<T>) -> Result<Tensor<T>> {
    let shape = s.ll.shape();
    for b in [&s.hl, &s.lh, &s.hh] {
        if b.shape() != shape {
            return Err(Error::shape("haar_idwt2", shape, b.shape()));
        }
    }
    if shape.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "haar_idwt2 needs at least 2 axes, got {shape:?}"
        )));
    }
    let r = shape.len();
    let (h2, w2) = (shape[r - 2], shape[r - 1]);
    let planes = s.ll.len() / (h2 * w2);
    let plane = h2 * w2;
    let bands = s.bands();
    let data = synthesize(planes, h2, w2, |b, p, k| bands[b].data()[p * plane + k]);
    let mut out_shape = shape.to_vec();
    out_shape[r - 2] = 2 * h2;
    out_shape[r - 1] = 2 * w2;
    Tensor::from_vec(&out_shape, data)
}

/// Channel-packed analysis: `(n, c, h, w)` -> `(n, 4c, h/2, w/2)` with the
/// subbands stacked band-major (`[LL(c); HL(c); LH(c); HH(c)]`), i.e. the
/// channel concatenation of the four bands.
pub(crate) fn dwt_packed<T: Element>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let plane = h * w / 4;
    let mut out = vec![T::zero(); n * 4 * c * plane];
    analyze(x, n * c, h, w, |b, p, k, v| {
        let (ni, ci) = (p / c, p % c);
        out[((ni * 4 + b) * c + ci) * plane + k] = v;
    });
    out
}

/// Inverse of [`dwt_packed`]: `(n, 4c, h2, w2)` -> `(n, c, 2h2, 2w2)`.
pub(crate) fn idwt_packed<T: Element>(s: &[T], n: usize, c: usize, h2: usize, w2: usize) -> Vec<T> {
    let plane = h2 * w2;
    synthesize(n * c, h2, w2, |b, p, k| {
        let (ni, ci) = (p / c, p % c);
        s[((ni * 4 + b) * c + ci) * plane + k]
    })
}
