//! Plain tensor kernels shared by the forward and backward passes.

use super::Tensor;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Strided matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Scalar> View<'a, T> {
    /// Row-major `[rows, cols]` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[.., start..start+width]` of a row-major matrix with
    /// `stride` columns.
    pub fn cols_of(data: &'a [T], rows: usize, stride: usize, start: usize, width: usize) -> Self {
        Self {
            data,
            offset: start,
            rows,
            cols: width,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// Mutable strided output view.
pub(crate) struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
}

impl<'a, T: Scalar> ViewMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
        }
    }

    pub fn cols_of(
        data: &'a mut [T],
        rows: usize,
        stride: usize,
        start: usize,
        width: usize,
    ) -> Self {
        Self {
            data,
            offset: start,
            rows,
            cols: width,
            rs: stride,
        }
    }
}

/// `c = a·b + (accumulate ? c : 0)`.
pub(crate) fn gemm<T: Scalar>(a: View<T>, b: View<T>, c: ViewMut<T>, accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner extents");
    assert_eq!(a.rows, c.rows, "output rows");
    assert_eq!(b.cols, c.cols, "output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c.data[c.offset + i * c.rs + j] = T::zero();
                }
            }
        }
        return;
    }
    assert!(a.last_index() < a.data.len(), "lhs view out of bounds");
    assert!(b.last_index() < b.data.len(), "rhs view out of bounds");
    assert!(
        c.offset + (m - 1) * c.rs + n - 1 < c.data.len(),
        "output view out of bounds"
    );
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds of all three views were checked above, and `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            1,
        );
    }
}

pub(crate) fn matmul<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
) -> Result<Tensor<T>> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    let mut va = View::dense(a.data(), ar, ac);
    let mut vb = View::dense(b.data(), br, bc);
    if ta {
        va = va.t();
    }
    if tb {
        vb = vb.t();
    }
    if va.cols != vb.rows {
        return shape_err(format!(
            "matmul inner extents differ: {:?}{} · {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        ));
    }
    let (m, n) = (va.rows, vb.cols);
    let mut out = vec![T::zero(); m * n];
    gemm(va, vb, ViewMut::dense(&mut out, m, n), false);
    Tensor::new(&[m, n], out)
}

/// Output extent of a convolution along one axis.
pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `x [c, h, w]` into `[c·k·k, ho·wo]` patch columns.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto `[c, h, w]`.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Row-wise softmax in place with max subtraction.
pub(crate) fn softmax_rows_in_place<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        let inv = T::one() / total;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

/// Softmax backward for one row block: `dx = y ⊙ (dy − Σ dy⊙y)`.
pub(crate) fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y
        .chunks(cols)
        .zip(dy.chunks(cols))
        .zip(dx.chunks_mut(cols))
    {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Normalizes each contiguous block of `block` elements to zero mean and unit
/// variance. Returns the normalized values and the per-block inverse std.
pub(crate) fn normalize_blocks<T: Scalar>(x: &[T], block: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::of(block as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / block.max(1));
    for (xs, os) in x.chunks(block).zip(out.chunks_mut(block)) {
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let denom = var + eps;
        let inv = if denom > T::zero() {
            T::one() / denom.sqrt()
        } else {
            T::zero()
        };
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

/// Backward of [`normalize_blocks`] given the gradient w.r.t. the normalized
/// values.
pub(crate) fn normalize_blocks_backward<T: Scalar>(
    xhat: &[T],
    inv_std: &[T],
    dxhat: &[T],
    block: usize,
) -> Vec<T> {
    let n = T::of(block as f64);
    let mut dx = vec![T::zero(); xhat.len()];
    for (((xh, g), d), &inv) in xhat
        .chunks(block)
        .zip(dxhat.chunks(block))
        .zip(dx.chunks_mut(block))
        .zip(inv_std)
    {
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((o, &gi), &xi) in d.iter_mut().zip(g).zip(xh) {
            *o = inv * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
