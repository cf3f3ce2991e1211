//! Dense row-major `f64` tensors and the convolution lowering helpers
//! (`im2col` / `col2im`) shared by the forward and backward passes.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "element-wise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of elements per entry of the leading (batch) dimension.
    pub fn inner_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Slice `n` of the leading dimension, as an owned tensor without it.
    pub fn index_outer(&self, n: usize) -> Tensor {
        let inner = self.inner_len();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[n * inner..(n + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack: shape {:?} differs from {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Geometry of a 2-D sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Window {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self { kernel, stride, pad }
    }

    /// Output size of a convolution over an `h x w` input, or `None` if the
    /// padded input is smaller than the kernel.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if ph < self.kernel.0 || pw < self.kernel.1 {
            return None;
        }
        Some(((ph - self.kernel.0) / self.stride.0 + 1, (pw - self.kernel.1) / self.stride.1 + 1))
    }

    /// Output size of the transposed convolution over an `h x w` input.
    pub fn conv_transpose_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = ((h - 1) * self.stride.0 + self.kernel.0).checked_sub(2 * self.pad.0)?;
        let ow = ((w - 1) * self.stride.1 + self.kernel.1).checked_sub(2 * self.pad.1)?;
        if oh == 0 || ow == 0 {
            return None;
        }
        Some((oh, ow))
    }
}

/// Unfolds one `[c, h, w]` image into a `[c*kh*kw, oh*ow]` column matrix.
pub fn im2col(img: &[f64], c: usize, h: usize, w: usize, win: &Window, oh: usize, ow: usize) -> Vec<f64> {
    let (kh, kw) = win.kernel;
    let (sh, sw) = win.stride;
    let (pad_h, pad_w) = (win.pad.0 as isize, win.pad.1 as isize);
    let cols_w = oh * ow;
    let mut cols = vec![0.0; c * kh * kw * cols_w];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - pad_h;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * sw + kj) as isize - pad_w;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto a
/// `[c, h, w]` image buffer.
#[allow(clippy::too_many_arguments)]
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, win: &Window, oh: usize, ow: usize, img: &mut [f64]) {
    let (kh, kw) = win.kernel;
    let (sh, sw) = win.stride;
    let (pad_h, pad_w) = (win.pad.0 as isize, win.pad.1 as isize);
    let cols_w = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - pad_h;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * sw + kj) as isize - pad_w;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (+)= op(a) * op(b)` for row-major matrices, where `op(a)` is `m x k`
/// and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every access matrixmultiply makes
    // through these pointers and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
