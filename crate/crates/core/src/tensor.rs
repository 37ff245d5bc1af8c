//! Dense planar `[channels, height, width]` storage and the numeric kernels
//! shared by the graph and the frame-level operators.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type. Training and inference run in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Raw matrixmultiply entry point for this precision.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row/column strides of a matrix view inside a flat slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strides(pub usize, pub usize);

impl Strides {
    /// Row-major `rows × cols`.
    pub fn row_major(cols: usize) -> Self {
        Strides(cols, 1)
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Strides(1, cols)
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.0 + (cols - 1) * self.1
        }
    }
}

/// `C = A·B + beta·C` where `C` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    if k > 0 {
        assert!(sa.max_offset(m, k) < a.len(), "gemm: lhs view out of bounds");
        assert!(sb.max_offset(k, n) < b.len(), "gemm: rhs view out of bounds");
    }
    // SAFETY: every view was bounds-checked above; `c` is exclusively borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Planar `[c, h, w]` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            shape: [c, h, w],
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn full(c: usize, h: usize, w: usize, v: T) -> Self {
        Tensor {
            shape: [c, h, w],
            data: vec![v; c * h * w],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: [1, 1, 1],
            data: vec![v],
        }
    }

    /// Panics when `data.len() != c*h*w`.
    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor {
            shape: [c, h, w],
            data,
        }
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ci, y, x));
                }
            }
        }
        Tensor {
            shape: [c, h, w],
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = (c * self.shape[1] + y) * self.shape[2] + x;
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Scalar value of a `[1,1,1]` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "tensor add shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "tensor diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Output size of a 3×3 convolution with padding 1.
#[inline]
pub(crate) fn conv_out(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// Unfolds 3×3 neighbourhoods (padding 1) into a `[c*9, ho*wo]` matrix.
pub(crate) fn im2col<T: Real>(x: &Tensor<T>, stride: usize, out: &mut Vec<T>) -> (usize, usize) {
    let [c, h, w] = x.shape();
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let hw = ho * wo;
    out.clear();
    out.resize(c * 9 * hw, T::zero());
    let src = x.data();
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut out[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        // ix = ox + kx - 1
                        let lo = if kx == 0 { 1 } else { 0 };
                        let hi = if kx == 2 { wo.min(w).saturating_sub(1) } else { wo.min(w) };
                        for ox in lo..hi {
                            dst[ox] = src_row[ox + kx - 1];
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (ho, wo)
}

/// Adjoint of [`im2col`]: scatters a `[c*9, ho*wo]` matrix back into `dst`
/// (accumulating).
pub(crate) fn col2im<T: Real>(cols: &[T], stride: usize, ho: usize, wo: usize, dst: &mut Tensor<T>) {
    let [c, h, w] = dst.shape();
    let hw = ho * wo;
    debug_assert_eq!(cols.len(), c * 9 * hw);
    let data = dst.data_mut();
    for ci in 0..c {
        let plane = &mut data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Mirror index without edge repetition (`-1 → 1`), folded for any offset.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable convolution of every plane with a symmetric odd-length
/// kernel, reflect-padded borders.
pub(crate) fn blur_separable<T: Real>(x: &Tensor<T>, kernel: &[T]) -> Tensor<T> {
    let [c, h, w] = x.shape();
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Tensor::zeros(c, h, w);
    let mut out = Tensor::zeros(c, h, w);
    let xcols: Vec<Vec<usize>> = (0..w)
        .map(|xx| (0..kernel.len()).map(|k| reflect_index(xx as isize + k as isize - r, w)).collect())
        .collect();
    let yrows: Vec<Vec<usize>> = (0..h)
        .map(|yy| (0..kernel.len()).map(|k| reflect_index(yy as isize + k as isize - r, h)).collect())
        .collect();
    for ci in 0..c {
        let src = x.plane(ci);
        let t = &mut tmp.data_mut()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (xx, idx) in xcols.iter().enumerate() {
                let mut acc = T::zero();
                for (k, &i) in idx.iter().enumerate() {
                    acc += kernel[k] * row[i];
                }
                t[y * w + xx] = acc;
            }
        }
        let t = &tmp.data()[ci * h * w..(ci + 1) * h * w];
        let o = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
        for (y, idx) in yrows.iter().enumerate() {
            let orow = &mut o[y * w..(y + 1) * w];
            for (k, &i) in idx.iter().enumerate() {
                let wk = kernel[k];
                let trow = &t[i * w..(i + 1) * w];
                for (ov, &tv) in orow.iter_mut().zip(trow) {
                    *ov += wk * tv;
                }
            }
        }
    }
    out
}

/// Adjoint of [`blur_separable`]. Differs from the forward pass near the
/// borders because reflection folds several taps onto one source pixel.
pub(crate) fn blur_separable_adjoint<T: Real>(g: &Tensor<T>, kernel: &[T]) -> Tensor<T> {
    let [c, h, w] = g.shape();
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Tensor::zeros(c, h, w);
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let src = g.plane(ci);
        let t = &mut tmp.data_mut()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for (k, &wk) in kernel.iter().enumerate() {
                let i = reflect_index(y as isize + k as isize - r, h);
                let (srow, trow) = (&src[y * w..(y + 1) * w], i * w);
                for xx in 0..w {
                    t[trow + xx] += wk * srow[xx];
                }
            }
        }
        let t = &tmp.data()[ci * h * w..(ci + 1) * h * w];
        let o = &mut out.data_mut()[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let v = t[y * w + xx];
                for (k, &wk) in kernel.iter().enumerate() {
                    let i = reflect_index(xx as isize + k as isize - r, w);
                    o[y * w + i] += wk * v;
                }
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian truncated at `radius`.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Vec<f64> {
    let taps: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Default truncation radius `ceil(4σ)`.
pub fn default_radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil() as usize
}
