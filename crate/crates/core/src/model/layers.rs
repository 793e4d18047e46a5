//! Dense kernels for the segmentation network. Feature maps are
//! channel-first `(C, H, W)` arrays in standard layout; convolutions run as
//! im2col followed by a GEMM.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Element type of network tensors.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Default
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Weight matrix plus bias vector of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros_like(&self) -> Self {
        Param {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.dim()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            w: self.w.mapv(|v| U::of(v.as_f64())),
            b: self.b.mapv(|v| U::of(v.as_f64())),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w += &other.w;
        self.b += &other.b;
    }
}

fn flat<T: Scalar>(x: &Array3<T>) -> ArrayView2<'_, T> {
    let (c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((c, h * w))
        .expect("feature maps are kept in standard layout")
}

/// Patch matrix `(cin*9, h*w)` for a 3x3 kernel with zero padding 1.
pub fn im2col3<T: Scalar>(x: ArrayView3<T>) -> Array2<T> {
    let x = x.as_standard_layout();
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = &xs[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &plane[si as usize * w..][..w];
                    let dst = &mut row[i * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * 9, hw), cols).expect("sized above")
}

/// Adjoint of [`im2col3`].
pub fn col2im3<T: Scalar>(cols: ArrayView2<T>, c: usize, h: usize, w: usize) -> Array3<T> {
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cs[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[si as usize * w..][..w];
                    let src = &row[i * w..][..w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("sized above")
}

/// `W · cols + b`, reshaped to `(cout, h, w)`.
pub fn affine<T: Scalar>(p: &Param<T>, cols: ArrayView2<T>, h: usize, w: usize) -> Array3<T> {
    let mut z = p.w.dot(&cols);
    z += &p.b.view().insert_axis(Axis(1));
    let cout = z.nrows();
    z.into_shape_with_order((cout, h, w)).expect("h*w columns")
}

/// Accumulates `dW += dz · colsᵀ`, `db += Σ dz` and returns `Wᵀ · dz`
/// when `want_input` is set.
pub fn affine_backward<T: Scalar>(
    p: &Param<T>,
    g: &mut Param<T>,
    cols: ArrayView2<T>,
    dz: &Array3<T>,
    want_input: bool,
) -> Option<Array2<T>> {
    let dz2 = flat(dz);
    general_mat_mul(T::one(), &dz2, &cols.t(), T::one(), &mut g.w);
    g.b += &dz2.sum_axis(Axis(1));
    want_input.then(|| p.w.t().dot(&dz2))
}

pub fn relu_inplace<T: Scalar>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes gradient entries where the forward activation was clipped.
pub fn relu_backward<T: Scalar>(grad: &Array3<T>, activation: &Array3<T>) -> Array3<T> {
    let mut out = grad.clone();
    ndarray::Zip::from(&mut out)
        .and(activation)
        .for_each(|g, &a| {
            if a <= T::zero() {
                *g = T::zero();
            }
        });
    out
}

/// 2x2 max pooling with stride 2; returns the output and the winning
/// offset (0..4, row-major inside the window) of each output cell.
pub fn maxpool2<T: Scalar>(x: &Array3<T>) -> (Array3<T>, Vec<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::zeros((c, oh, ow));
    let mut idx = vec![0u8; c * oh * ow];
    let mut n = 0;
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = x[[ci, 2 * i, 2 * j]];
                let mut arg = 0u8;
                for (k, (di, dj)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = x[[ci, 2 * i + di, 2 * j + dj]];
                    if v > best {
                        best = v;
                        arg = k as u8 + 1;
                    }
                }
                out[[ci, i, j]] = best;
                idx[n] = arg;
                n += 1;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<T: Scalar>(
    grad: &Array3<T>,
    idx: &[u8],
    h: usize,
    w: usize,
) -> Array3<T> {
    let (c, oh, ow) = grad.dim();
    let mut out = Array3::zeros((c, h, w));
    let mut n = 0;
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let k = idx[n] as usize;
                out[[ci, 2 * i + k / 2, 2 * j + k % 2]] += grad[[ci, i, j]];
                n += 1;
            }
        }
    }
    out
}

/// 2x2 stride-2 transposed convolution. Weight rows are indexed
/// `co*4 + a*2 + b` for output offset `(a, b)`.
pub fn upconv2<T: Scalar>(p: &Param<T>, x: &Array3<T>) -> Array3<T> {
    let (_, h, w) = x.dim();
    let y = p.w.dot(&flat(x));
    let cout = p.b.len();
    let mut out = Array3::zeros((cout, 2 * h, 2 * w));
    for co in 0..cout {
        let bias = p.b[co];
        for a in 0..2 {
            for b in 0..2 {
                let row = y.row(co * 4 + a * 2 + b);
                for i in 0..h {
                    for j in 0..w {
                        out[[co, 2 * i + a, 2 * j + b]] = row[i * w + j] + bias;
                    }
                }
            }
        }
    }
    out
}

pub fn upconv2_backward<T: Scalar>(
    p: &Param<T>,
    g: &mut Param<T>,
    x: &Array3<T>,
    dout: &Array3<T>,
) -> Array3<T> {
    let (cin, h, w) = x.dim();
    let cout = p.b.len();
    let mut dy = Array2::zeros((cout * 4, h * w));
    for co in 0..cout {
        let mut bsum = T::zero();
        for a in 0..2 {
            for b in 0..2 {
                let mut row = dy.row_mut(co * 4 + a * 2 + b);
                for i in 0..h {
                    for j in 0..w {
                        let v = dout[[co, 2 * i + a, 2 * j + b]];
                        row[i * w + j] = v;
                        bsum += v;
                    }
                }
            }
        }
        g.b[co] += bsum;
    }
    let x2 = flat(x);
    general_mat_mul(T::one(), &dy, &x2.t(), T::one(), &mut g.w);
    p.w.t()
        .dot(&dy)
        .into_shape_with_order((cin, h, w))
        .expect("cin*h*w")
}

/// Concatenates along channels.
pub fn concat<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> Array3<T> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("equal spatial dims")
}
