//! Dense row-major arrays and the numeric kernels everything else is built on.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::real::Real;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    #[serde(default)]
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            bail!(Dimension, "shape {:?} needs {} values, got {}", shape, expect, data.len());
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len], requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value], requires_grad: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect(), requires_grad: false }
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Dimension, "ragged rows");
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => bail!(Dimension, "expected a matrix, got shape {:?}", s),
        }
    }

    /// Last extent and number of leading vectors.
    pub fn last_dim(&self) -> Result<(usize, usize)> {
        match self.shape.last() {
            Some(&d) if d > 0 => Ok((self.len() / d, d)),
            _ => bail!(Dimension, "tensor of shape {:?} has no last dimension", self.shape),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            bail!(Dimension, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect(), requires_grad: false }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self, other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data, requires_grad: false })
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self::from_fn(&[c, r], |i| self.data[(i % r) * c + i / r]))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        same_shape(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + len > r {
            bail!(Dimension, "rows {}..{} out of {}", start, start + len, r);
        }
        Self::new(&[len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + len > c {
            bail!(Dimension, "cols {}..{} out of {}", start, start + len, c);
        }
        let mut data = Vec::with_capacity(r * len);
        for row in self.data.chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        Self::new(&[r, len], data)
    }

    /// Concatenates 2-D tensors side by side.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = match parts.first() {
            Some(p) => p.dims2()?.0,
            None => bail!(Dimension, "nothing to concatenate"),
        };
        let mut total = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                bail!(Dimension, "row count {} != {}", r, rows);
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                let c = p.shape[1];
                data.extend_from_slice(&p.data[i * c..(i + 1) * c]);
            }
        }
        Self::new(&[rows, total], data)
    }
}

pub(crate) fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        bail!(Dimension, "shape {:?} != {:?}", a.shape, b.shape);
    }
    Ok(())
}

pub(crate) fn ensure_finite<T: Real>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Row-major product `op(a) * op(b)` where `op` optionally transposes.
///
/// `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above pin every view inside its slice.
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, out.as_mut_ptr(), n as isize, 1)
    }
}

/// Matrix product of `a: [m, k]` and `b: [k, p]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        bail!(Dimension, "matmul inner extents {} and {} differ", k, k2);
    }
    let mut out = vec![T::zero(); m * p];
    gemm(a.data(), false, b.data(), false, m, k, p, &mut out, false);
    ensure_finite(&out, "matmul")?;
    Tensor::new(&[m, p], out)
}

/// Row softmax where `allowed(i, j)` selects the entries that participate.
pub(crate) fn softmax_rows_with<T: Real>(
    x: &[T],
    rows: usize,
    cols: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(i, j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::DegenerateRow { row: i });
        }
        let dst = &mut out[i * cols..(i + 1) * cols];
        let mut total = T::zero();
        for (j, (&v, o)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if allowed(i, j) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        let inv = T::one() / total;
        dst.iter_mut().for_each(|o| *o *= inv);
    }
    ensure_finite(&out, "softmax")?;
    Ok(out)
}

/// Row-wise softmax with max subtraction; `mask` entries of 0 are excluded.
pub fn softmax_rows<T: Real>(x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2()?;
    let out = match mask {
        Some(m) => {
            same_shape(x, m)?;
            let md = m.data();
            softmax_rows_with(x.data(), rows, cols, |i, j| md[i * cols + j] != T::zero())?
        }
        None => softmax_rows_with(x.data(), rows, cols, |_, _| true)?,
    };
    Tensor::new(&[rows, cols], out)
}

/// Normalized values and reciprocal standard deviations kept for the backward pass.
pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_raw<T: Real>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> Result<(Vec<T>, NormCache<T>)> {
    let rows = x.len() / d;
    let dn = T::from_f64(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let v = &x[r * d..(r + 1) * d];
        let mean = v.iter().copied().sum::<T>() / dn;
        let var = v.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / dn;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (v[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    ensure_finite(&out, "layer_norm")?;
    Ok((out, NormCache { xhat, inv_std }))
}

/// Normalizes each trailing vector to zero mean, unit variance, then applies `gain`/`bias`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (_, d) = x.last_dim()?;
    if gain.shape() != [d] || bias.shape() != [d] {
        bail!(Dimension, "layer norm affine params must be [{}]", d);
    }
    let (out, _) = layer_norm_raw(x.data(), d, gain.data(), bias.data(), eps)?;
    Tensor::new(x.shape(), out)
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, in_ch, height, width], &[out_ch, kin, kh, kw]) = (input, kernels) else {
            bail!(Dimension, "conv2d expects [B,C,H,W] input and [C',C,k,k] kernels");
        };
        if kin != in_ch {
            bail!(Dimension, "kernel expects {} input channels, input has {}", kin, in_ch);
        }
        if kh != kw {
            bail!(Dimension, "only square kernels are supported");
        }
        if stride == 0 {
            bail!(Config, "stride must be positive");
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            bail!(Dimension, "kernel {}x{} larger than padded input {}x{}", kh, kw, height + 2 * padding, width + 2 * padding);
        }
        Ok(Self { batch, in_ch, height, width, out_ch, kernel: kh, stride, padding })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_height(), self.out_width()]
    }

    /// Visits every (output index, input index, kernel index) triple with an in-bounds input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for b in 0..self.batch {
            for co in 0..self.out_ch {
                for ci in 0..self.in_ch {
                    for kh in 0..k {
                        for kw in 0..k {
                            let widx = ((co * self.in_ch + ci) * k + kh) * k + kw;
                            for y in 0..oh {
                                let iy = (y * self.stride + kh) as isize - self.padding as isize;
                                if iy < 0 || iy as usize >= self.height {
                                    continue;
                                }
                                let in_row = ((b * self.in_ch + ci) * self.height + iy as usize) * self.width;
                                let out_row = ((b * self.out_ch + co) * oh + y) * ow;
                                for x in 0..ow {
                                    let ix = (x * self.stride + kw) as isize - self.padding as isize;
                                    if ix < 0 || ix as usize >= self.width {
                                        continue;
                                    }
                                    f(out_row + x, in_row + ix as usize, widx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward<T: Real>(&self, input: &[T], kernels: &[T]) -> Vec<T> {
        let [b, c, h, w] = self.out_shape();
        let mut out = vec![T::zero(); b * c * h * w];
        self.for_each_tap(|o, i, k| out[o] += input[i] * kernels[k]);
        out
    }

    /// Gradients with respect to input and kernels.
    pub(crate) fn backward<T: Real>(&self, input: &[T], kernels: &[T], grad_out: &[T]) -> (Vec<T>, Vec<T>) {
        let mut gin = vec![T::zero(); input.len()];
        let mut gk = vec![T::zero(); kernels.len()];
        self.for_each_tap(|o, i, k| {
            gin[i] += kernels[k] * grad_out[o];
            gk[k] += input[i] * grad_out[o];
        });
        (gin, gk)
    }
}

/// Cross-correlation of `input: [B,C,H,W]` with `kernels: [C',C,k,k]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(input.shape(), kernels.shape(), stride, padding)?;
    let out = geom.forward(input.data(), kernels.data());
    ensure_finite(&out, "conv2d")?;
    Tensor::new(&geom.out_shape(), out)
}

/// Result of a stable sort: sorted keys plus the permutation and its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SortedPermutation {
    pub sorted: Vec<usize>,
    /// `sorted[i] == keys[permutation[i]]`.
    pub permutation: Vec<usize>,
    /// `inverse[permutation[i]] == i`.
    pub inverse: Vec<usize>,
}

impl SortedPermutation {
    /// Reorders `items` into sorted order.
    pub fn apply<X: Clone>(&self, items: &[X]) -> Vec<X> {
        self.permutation.iter().map(|&i| items[i].clone()).collect()
    }

    /// Restores original order from sorted order.
    pub fn unapply<X: Clone>(&self, sorted: &[X]) -> Vec<X> {
        self.inverse.iter().map(|&i| sorted[i].clone()).collect()
    }
}

/// Stable sort of integer keys; equal keys keep their original relative order.
pub fn stable_sort_with_permutation(keys: &[usize]) -> SortedPermutation {
    let mut permutation: Vec<usize> = (0..keys.len()).collect();
    permutation.sort_by_key(|&i| keys[i]);
    let mut inverse = vec![0; keys.len()];
    for (pos, &i) in permutation.iter().enumerate() {
        inverse[i] = pos;
    }
    let sorted = permutation.iter().map(|&i| keys[i]).collect();
    SortedPermutation { sorted, permutation, inverse }
}
