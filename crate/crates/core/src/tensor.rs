//! Dense NCHW tensors and the numeric kernels behind the autodiff tape.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training and
/// inference) and `f64` (gradient verification).
pub trait Real:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn c(x: f64) -> Self;

    fn to_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Strided accesses must stay inside the allocations behind the pointers.
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

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `exp`, possibly replaced by a branch-free approximation that the
    /// compiler can vectorise.
    #[inline(always)]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    #[inline(always)]
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp_fast())
    }

    #[inline(always)]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}

/// Polynomial `exp` for `f32`, accurate to a few ulp over the clamped range.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    // `clamp` keeps NaN, so non-finite inputs stay visible downstream.
    let x = x.clamp(-87.0, 88.0);
    let shifted = x * std::f32::consts::LOG2_E + ROUND;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    // The low mantissa bits of `shifted` hold the rounded exponent.
    let e = shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127);
    y * f32::from_bits(e << 23)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline(always)]
    fn c(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    #[inline(always)]
    fn exp_fast(self) -> Self {
        exp_f32(self)
    }

    #[inline(always)]
    fn tanh_fast(self) -> Self {
        let x = self.clamp(-9.0, 9.0);
        1.0 - 2.0 / (exp_f32(2.0 * x) + 1.0)
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline(always)]
    fn c(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Borrowed row/column-strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major `rows x cols` view.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Row-major `out = a * b + beta * out`.
pub fn gemm<T: Real>(out: &mut [T], a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[..m * n] {
            *v *= beta;
        }
        return;
    }
    // Largest element touched by each strided view.
    assert!((a.rows - 1) * a.rs + (a.cols - 1) * a.cs < a.data.len());
    assert!((b.rows - 1) * b.rs + (b.cols - 1) * b.cs < b.data.len());
    // SAFETY: bounds of all three views were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A dense tensor in row-major order. Image batches use `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Validation(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Validation(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulate shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::c(v.to_f64())).collect(),
        }
    }

    /// Images `start..start + len` of an `[N, ...]` tensor.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor {
            shape,
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let inner = parts[0].shape.clone();
        let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
        for p in parts {
            assert_eq!(p.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        Tensor { shape, data }
    }

    /// Concatenates `[N_i, ...]` tensors along the batch axis.
    pub fn stack_batch(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let tail = &parts[0].shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        let mut n = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "stack_batch shape mismatch");
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = n;
        Tensor { shape, data }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }
}

/// Geometry of a square-kernel 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + offset - pad`
/// falls inside `0..w`.
fn valid_range(wo: usize, w: usize, g: ConvGeom, offset: usize) -> (usize, usize) {
    let shift = offset as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift + s - 1) / s) as usize };
    let hi = if (w as isize) <= shift {
        0
    } else {
        (((w as isize - shift + s - 1) / s) as usize).min(wo)
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_range(wo, w, g, kj);
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, s) in drow[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let (lo, hi) = valid_range(wo, w, g, kj);
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                row += 1;
                if lo >= hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo + lo..oy * wo + hi];
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, &s) in drow[start..start + hi - lo].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (d, &s) in drow[start..].iter_mut().step_by(g.stride).zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [N, Ci, H, W]` with `weight: [Co, Ci, k, k]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Tensor<T> {
    let (n, ci, h, w) = x.dims4();
    let co = weight.shape()[0];
    assert_eq!(weight.shape(), &[co, ci, g.kernel, g.kernel], "conv weight shape");
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let kdim = ci * g.kernel * g.kernel;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * ho * wo]
    };
    let wmat = MatRef::new(weight.data(), co, kdim);
    for b in 0..n {
        let xb = &x.data()[b * ci * h * w..(b + 1) * ci * h * w];
        let ob = &mut out.data_mut()[b * co * ho * wo..(b + 1) * co * ho * wo];
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                ob[o * ho * wo..(o + 1) * ho * wo].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(ob, wmat, MatRef::new(xb, kdim, ho * wo), beta);
        } else {
            im2col(xb, ci, h, w, g, &mut cols);
            gemm(ob, wmat, MatRef::new(&cols, kdim, ho * wo), beta);
        }
    }
    out
}

/// Gradients of [`conv2d`]. Returns `(dx, dweight, dbias)`; each is only
/// computed when requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, h, w) = x.dims4();
    let co = weight.shape()[0];
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let kdim = ci * g.kernel * g.kernel;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(weight.shape()));
    let db = want_db.then(|| {
        let mut db = Tensor::zeros(&[co]);
        for b in 0..n {
            for o in 0..co {
                let off = (b * co + o) * ho * wo;
                db.data_mut()[o] += dy.data()[off..off + ho * wo].iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kdim * ho * wo }];
    let mut dcols = vec![T::zero(); if pointwise || !want_dx { 0 } else { kdim * ho * wo }];
    let wmat = MatRef::new(weight.data(), co, kdim);
    for b in 0..n {
        let xb = &x.data()[b * ci * h * w..(b + 1) * ci * h * w];
        let dyb = MatRef::new(&dy.data()[b * co * ho * wo..(b + 1) * co * ho * wo], co, ho * wo);
        if let Some(dw) = dw.as_mut() {
            let colmat = if pointwise {
                MatRef::new(xb, kdim, ho * wo)
            } else {
                im2col(xb, ci, h, w, g, &mut cols);
                MatRef::new(&cols, kdim, ho * wo)
            };
            gemm(dw.data_mut(), dyb, colmat.t(), T::one());
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * ci * h * w..(b + 1) * ci * h * w];
            if pointwise {
                gemm(dxb, wmat.t(), dyb, T::zero());
            } else {
                gemm(&mut dcols, wmat.t(), dyb, T::zero());
                col2im(&dcols, ci, h, w, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Nearest-neighbour upsampling by a factor of two in both spatial axes.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let (src, dst) = (x.data(), out.data_mut());
    for p in 0..n * c {
        for y in 0..2 * h {
            let srow = &src[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            let drow = &mut dst[(p * 2 * h + y) * 2 * w..(p * 2 * h + y + 1) * 2 * w];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let (src, dst) = (dy.data(), dx.data_mut());
    for p in 0..n * c {
        for y in 0..h2 {
            for xo in 0..w2 {
                dst[(p * h + y / 2) * w + xo / 2] += src[(p * h2 + y) * w2 + xo];
            }
        }
    }
    dx
}

/// 2x2 max pooling with stride two. Returns the pooled tensor and the flat
/// argmax index of every output element.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let src = x.data();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = p * h * w + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    if 2 * oy + dy >= h || 2 * ox + dx >= w {
                        continue;
                    }
                    let idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out.data_mut()[o] = src[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// Embedded-Gaussian attention over spatial positions.
///
/// `theta`, `phi` and `g` are `[N, C, H, W]`; for every image the output at
/// position `i` is `sum_j softmax_j(theta_i . phi_j) g_j`. Rows are processed
/// one at a time, so the `(H W)^2` attention matrix is never materialised.
/// The second return value holds the softmax statistics (row maximum and
/// inverse normaliser) that [`attention_backward`] needs to rebuild a row.
pub fn attention<T: Real>(theta: &Tensor<T>, phi: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { attention_avx2(theta, phi, g) };
    }
    attention_impl(theta, phi, g)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attention_avx2<T: Real>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    attention_impl(theta, phi, g)
}

#[inline(always)]
fn attention_impl<T: Real>(theta: &Tensor<T>, phi: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let (n, c, h, w) = theta.dims4();
    assert_eq!(phi.shape(), theta.shape());
    assert_eq!(g.shape(), theta.shape());
    let s = h * w;
    let mut out = Tensor::zeros(theta.shape());
    let mut stats = vec![T::zero(); n * s * 2];
    let mut row = vec![T::zero(); s];
    for b in 0..n {
        let off = b * c * s;
        let th = &theta.data()[off..off + c * s];
        let ph = &phi.data()[off..off + c * s];
        let gm = &g.data()[off..off + c * s];
        let y = &mut out.data_mut()[off..off + c * s];
        for i in 0..s {
            let (max, inv) = attention_row(th, ph, c, s, i, &mut row);
            stats[(b * s + i) * 2] = max;
            stats[(b * s + i) * 2 + 1] = inv;
            for ch in 0..c {
                y[ch * s + i] = dot(&row, &gm[ch * s..(ch + 1) * s]);
            }
        }
    }
    (out, stats)
}

/// Scores of query `i` against every key, turned into softmax weights in
/// `row`. Returns the row maximum and inverse normaliser.
#[inline(always)]
fn attention_row<T: Real>(th: &[T], ph: &[T], c: usize, s: usize, i: usize, row: &mut [T]) -> (T, T) {
    row.fill(T::zero());
    for ch in 0..c {
        let q = th[ch * s + i];
        for (r, &k) in row.iter_mut().zip(&ph[ch * s..(ch + 1) * s]) {
            *r += q * k;
        }
    }
    let max = lane_max(row);
    for r in row.iter_mut() {
        *r = (*r - max).exp_fast();
    }
    let inv = T::one() / lane_sum(row);
    for r in row.iter_mut() {
        *r *= inv;
    }
    (max, inv)
}

/// Gradients of [`attention`] with respect to `theta`, `phi` and `g`.
pub fn attention_backward<T: Real>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g: &Tensor<T>,
    stats: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { attention_backward_avx2(theta, phi, g, stats, dy) };
    }
    attention_backward_impl(theta, phi, g, stats, dy)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attention_backward_avx2<T: Real>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g: &Tensor<T>,
    stats: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    attention_backward_impl(theta, phi, g, stats, dy)
}

#[inline(always)]
fn attention_backward_impl<T: Real>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g: &Tensor<T>,
    stats: &[T],
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = theta.dims4();
    let s = h * w;
    let mut dtheta = Tensor::zeros(theta.shape());
    let mut dphi = Tensor::zeros(theta.shape());
    let mut dg = Tensor::zeros(theta.shape());
    let mut a = vec![T::zero(); s];
    let mut da = vec![T::zero(); s];
    for b in 0..n {
        let off = b * c * s;
        let th = &theta.data()[off..off + c * s];
        let ph = &phi.data()[off..off + c * s];
        let gm = &g.data()[off..off + c * s];
        let dym = &dy.data()[off..off + c * s];
        let dth = &mut dtheta.data_mut()[off..off + c * s];
        let dph = &mut dphi.data_mut()[off..off + c * s];
        let dgm = &mut dg.data_mut()[off..off + c * s];
        for i in 0..s {
            let max = stats[(b * s + i) * 2];
            let inv = stats[(b * s + i) * 2 + 1];
            a.fill(T::zero());
            for ch in 0..c {
                let q = th[ch * s + i];
                for (r, &k) in a.iter_mut().zip(&ph[ch * s..(ch + 1) * s]) {
                    *r += q * k;
                }
            }
            for r in a.iter_mut() {
                *r = (*r - max).exp_fast() * inv;
            }
            // dG += dy_i a^T and dA = G^T dy_i
            da.fill(T::zero());
            for ch in 0..c {
                let d = dym[ch * s + i];
                for ((dgv, dav), (&av, &gv)) in dgm[ch * s..(ch + 1) * s]
                    .iter_mut()
                    .zip(da.iter_mut())
                    .zip(a.iter().zip(&gm[ch * s..(ch + 1) * s]))
                {
                    *dgv += d * av;
                    *dav += d * gv;
                }
            }
            // Softmax Jacobian.
            let mean = dot(&da, &a);
            for (d, &p) in da.iter_mut().zip(&a) {
                *d = p * (*d - mean);
            }
            // dTheta_i = Phi dS_i, dPhi += theta_i dS_i^T
            for ch in 0..c {
                let krow = &ph[ch * s..(ch + 1) * s];
                dth[ch * s + i] = dot(&da, krow);
                let q = th[ch * s + i];
                for (dk, &d) in dph[ch * s..(ch + 1) * s].iter_mut().zip(&da) {
                    *dk += q * d;
                }
            }
        }
    }
    (dtheta, dphi, dg)
}

#[inline(always)]
fn lane_max<T: Real>(a: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = a.chunks_exact(8);
    let tail = chunks.remainder().iter().copied().fold(T::neg_infinity(), T::max);
    for x in chunks {
        for k in 0..8 {
            acc[k] = if x[k] > acc[k] { x[k] } else { acc[k] };
        }
    }
    acc.iter().copied().fold(tail, T::max)
}

/// Dot product with eight independent accumulators so the loop vectorises.
#[inline(always)]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

#[inline(always)]
pub(crate) fn lane_sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let tail: T = chunks.remainder().iter().copied().sum();
    for x in chunks {
        for k in 0..8 {
            acc[k] += x[k];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}


#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the oracle for the im2col path.
    fn conv_naive(x: &Tensor<f64>, wt: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let (n, ci, h, w) = x.dims4();
        let co = wt.shape()[0];
        let (ho, wo) = (g.out_size(h), g.out_size(w));
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * ci + c) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((o * ci + c) * g.kernel + ki) * g.kernel + kj];
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect())
            .unwrap()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = seq(&[2, 3, 7, 6], 0.1);
        for g in [
            ConvGeom { kernel: 3, stride: 1, pad: 1 },
            ConvGeom { kernel: 3, stride: 2, pad: 1 },
            ConvGeom { kernel: 1, stride: 1, pad: 0 },
            ConvGeom { kernel: 1, stride: 2, pad: 0 },
        ] {
            let wt = seq(&[4, 3, g.kernel, g.kernel], 0.05);
            let fast = conv2d(&x, &wt, None, g);
            let slow = conv_naive(&x, &wt, g);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> must equal <x, dx> and <w, dw> (the op is bilinear).
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        let x = seq(&[2, 3, 8, 8], 0.1);
        let wt = seq(&[5, 3, 3, 3], 0.07);
        let y = conv2d(&x, &wt, None, g);
        let dy = seq(y.shape(), 0.03);
        let (dx, dw, _) = conv2d_backward(&x, &wt, &dy, g, true, true, false);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rx: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
        let rw: f64 = wt.data().iter().zip(dw.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rx).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - rw).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn nearest_upsample_duplicates_each_value() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample2x(&x);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.data(),
            &[
                1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0
            ]
        );
        let dx = upsample2x_backward(&Tensor::full(&[1, 1, 4, 4], 1.0));
        assert_eq!(dx.data(), &[4.0; 4]);
    }

    #[test]
    fn maxpool_picks_largest() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 0.0, -1.0, 2.0, 3.0, -2.0, -3.0])
            .unwrap();
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data(), &[5.0, 0.0]);
        assert_eq!(arg, vec![1, 2]);
        let odd = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 0.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&odd).0.data(), &[1.0, 4.0]);
    }

    #[test]
    fn attention_rows_are_stable_softmax() {
        let th = [1.0f64, 1.0, 1.0];
        let ph = [1000.0f64, 1001.0, 999.0];
        let mut row = vec![0.0; 3];
        attention_row(&th, &ph, 1, 3, 0, &mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(row[1] > row[0] && row[0] > row[2]);
    }

    #[test]
    fn attention_matches_dense_formula() {
        let (c, s) = (2, 6);
        let th: Vec<f64> = (0..c * s).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let ph: Vec<f64> = (0..c * s).map(|i| ((i * 3 % 7) as f64 - 3.0) * 0.2).collect();
        let gv: Vec<f64> = (0..c * s).map(|i| i as f64 * 0.1).collect();
        let t = |v: &Vec<f64>| Tensor::from_vec(&[1, c, 2, 3], v.clone()).unwrap();
        let (y, _) = attention(&t(&th), &t(&ph), &t(&gv));
        for i in 0..s {
            let scores: Vec<f64> =
                (0..s).map(|j| (0..c).map(|k| th[k * s + i] * ph[k * s + j]).sum()).collect();
            let z: f64 = scores.iter().map(|v| v.exp()).sum();
            for k in 0..c {
                let want: f64 = (0..s).map(|j| scores[j].exp() / z * gv[k * s + j]).sum();
                assert!((y.data()[k * s + i] - want).abs() < 1e-12);
            }
        }
    }
}
