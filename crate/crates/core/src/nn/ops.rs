//! Forward and backward kernels. Every backward returns gradients rather than
//! mutating parameters; layers decide where to accumulate them.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_bt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn as_matrix<S: Scalar>(x: &Tensor<S>) -> (usize, usize) {
    if x.shape().len() == 1 {
        (1, x.shape()[0])
    } else {
        (x.rows(), x.cols())
    }
}

/// `y = x·Wᵀ + b` for `x` of shape `[in]` or `[n × in]`, `W` of shape `[out × in]`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: Option<&Tensor<S>>) -> Result<Tensor<S>> {
    if w.shape().len() != 2 {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let (n, xin) = as_matrix(x);
    if xin != in_dim {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.len() != out_dim {
            return Err(Error::shape("linear bias", w.shape(), b.shape()));
        }
    }
    let mut y = vec![S::zero(); n * out_dim];
    if let Some(b) = b {
        for row in y.chunks_mut(out_dim) {
            row.copy_from_slice(b.data());
        }
    }
    matmul_bt_acc(x.data(), w.data(), &mut y, n, in_dim, out_dim);
    let shape = if x.shape().len() == 1 {
        vec![out_dim]
    } else {
        vec![n, out_dim]
    };
    Tensor::from_vec(&shape, y)
}

pub struct LinearGrads<S> {
    pub dx: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

pub fn linear_backward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, dy: &Tensor<S>) -> LinearGrads<S> {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let (n, _) = as_matrix(x);
    debug_assert_eq!(dy.len(), n * out_dim);
    let mut dx = vec![S::zero(); n * in_dim];
    matmul_acc(dy.data(), w.data(), &mut dx, n, out_dim, in_dim);
    let mut dw = vec![S::zero(); out_dim * in_dim];
    matmul_at_acc(dy.data(), x.data(), &mut dw, n, out_dim, in_dim);
    let mut db = vec![S::zero(); out_dim];
    for row in dy.data().chunks(out_dim) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    LinearGrads {
        dx: Tensor::from_vec(x.shape(), dx).expect("dx shape"),
        dw: Tensor::from_vec(w.shape(), dw).expect("dw shape"),
        db: Tensor::vector(db),
    }
}

/// Stride, dilation and symmetric zero padding of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Padding that keeps the length unchanged at stride 1 (odd kernels).
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::new(1, dilation, dilation * (kernel - 1) / 2)
    }

    pub fn output_len(&self, t: usize, kernel: usize) -> Result<usize> {
        if self.stride < 1 || self.dilation < 1 {
            return Err(Error::InvalidHyper(format!(
                "conv1d stride {} and dilation {} must be >= 1",
                self.stride, self.dilation
            )));
        }
        let span = self.dilation * (kernel.max(1) - 1) + 1;
        let padded = t + 2 * self.padding;
        if kernel == 0 || padded < span {
            return Err(Error::InvalidHyper(format!(
                "conv1d input length {t} with padding {} is shorter than the receptive field {span}",
                self.padding
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// Valid output range `[lo, hi)` such that `t*stride + off` lands in `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi_num = len as isize - off;
    let hi = if hi_num <= 0 {
        0
    } else {
        ((hi_num as usize - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Cross-correlation of `x [Cin × T]` with `w [Cout × Cin × K]`.
pub fn conv1d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    if x.shape().len() != 2 || w.shape().len() != 3 || w.shape()[1] != x.shape()[0] {
        return Err(Error::shape("conv1d", x.shape(), w.shape()));
    }
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape("conv1d bias", w.shape(), b.shape()));
        }
    }
    let out_len = geom.output_len(t, k)?;
    let mut y = vec![S::zero(); cout * out_len];
    let xs = x.data();
    let ws = w.data();
    for co in 0..cout {
        let yrow = &mut y[co * out_len..(co + 1) * out_len];
        if let Some(b) = bias {
            yrow.iter_mut().for_each(|v| *v = b.data()[co]);
        }
        for ci in 0..cin {
            let xrow = &xs[ci * t..(ci + 1) * t];
            for kk in 0..k {
                let wv = ws[(co * cin + ci) * k + kk];
                let off = (kk * geom.dilation) as isize - geom.padding as isize;
                let (lo, hi) = valid_range(t, out_len, geom.stride, off);
                if lo == hi {
                    continue;
                }
                let start = ((lo * geom.stride) as isize + off) as usize;
                let ys = &mut yrow[lo..hi];
                if geom.stride == 1 {
                    for (yv, &xv) in ys.iter_mut().zip(&xrow[start..start + (hi - lo)]) {
                        *yv += wv * xv;
                    }
                } else {
                    for (yv, &xv) in ys.iter_mut().zip(xrow[start..].iter().step_by(geom.stride)) {
                        *yv += wv * xv;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[cout, out_len], y)
}

pub struct ConvGrads<S> {
    pub dx: Tensor<S>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

pub fn conv1d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
    geom: ConvGeometry,
) -> ConvGrads<S> {
    let (cin, t) = (x.shape()[0], x.shape()[1]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let out_len = dy.shape()[1];
    let mut dx = vec![S::zero(); cin * t];
    let mut dw = vec![S::zero(); cout * cin * k];
    let mut db = vec![S::zero(); cout];
    let xs = x.data();
    let ws = w.data();
    for co in 0..cout {
        let dyrow = &dy.data()[co * out_len..(co + 1) * out_len];
        db[co] = dyrow.iter().copied().sum();
        for ci in 0..cin {
            let xrow = &xs[ci * t..(ci + 1) * t];
            let dxrow = &mut dx[ci * t..(ci + 1) * t];
            for kk in 0..k {
                let widx = (co * cin + ci) * k + kk;
                let wv = ws[widx];
                let off = (kk * geom.dilation) as isize - geom.padding as isize;
                let (lo, hi) = valid_range(t, out_len, geom.stride, off);
                if lo == hi {
                    continue;
                }
                let start = ((lo * geom.stride) as isize + off) as usize;
                let gs = &dyrow[lo..hi];
                let mut acc = S::zero();
                if geom.stride == 1 {
                    let n = hi - lo;
                    for ((&g, &xv), dxv) in gs.iter().zip(&xrow[start..start + n]).zip(&mut dxrow[start..start + n]) {
                        acc += g * xv;
                        *dxv += g * wv;
                    }
                } else {
                    for (j, &g) in gs.iter().enumerate() {
                        let idx = start + j * geom.stride;
                        acc += g * xrow[idx];
                        dxrow[idx] += g * wv;
                    }
                }
                dw[widx] += acc;
            }
        }
    }
    ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx).expect("dx shape"),
        dw: Tensor::from_vec(w.shape(), dw).expect("dw shape"),
        db: Tensor::vector(db),
    }
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Gradient of relu given its output.
pub fn relu_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Softmax over the last axis, max-shifted.
pub fn softmax<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut y = x.clone();
    let c = x.shape().last().copied().unwrap_or(1).max(1);
    for row in y.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    y
}

/// Softmax along `axis` of a 2-D tensor (0 = columns, 1 = rows).
pub fn softmax_axis<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    match (x.shape().len(), axis) {
        (1, 0) | (2, 1) => Ok(softmax(x)),
        (2, 0) => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut y = x.clone();
            let mut col = vec![S::zero(); r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = x.data()[i * c + j];
                }
                softmax_in_place(&mut col);
                for i in 0..r {
                    y.data_mut()[i * c + j] = col[i];
                }
            }
            Ok(y)
        }
        _ => Err(Error::InvalidHyper(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        ))),
    }
}

/// Gradient of last-axis softmax given its output.
pub fn softmax_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let c = y.shape().last().copied().unwrap_or(1).max(1);
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(c).zip(dy.data().chunks(c)) {
        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::from_vec(y.shape(), dx).expect("same shape")
}

/// Mean over the last axis of `[C × T]`, giving `[C]`.
pub fn mean_pool_time<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let t = x.cols();
    let inv = S::one() / S::of(t as f64);
    Tensor::vector((0..x.rows()).map(|c| x.row(c).iter().copied().sum::<S>() * inv).collect())
}

pub fn mean_pool_time_backward<S: Scalar>(shape: &[usize], dy: &Tensor<S>) -> Tensor<S> {
    let (c, t) = (shape[0], shape[1]);
    let inv = S::one() / S::of(t as f64);
    let mut dx = Vec::with_capacity(c * t);
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * inv, t));
    }
    Tensor::from_vec(shape, dx).expect("pool shape")
}

/// Mean over rows of `[n × d]`, giving `[d]`.
pub fn mean_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![S::zero(); d];
    for i in 0..n {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    let inv = S::one() / S::of(n as f64);
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::vector(out)
}

pub fn mean_rows_backward<S: Scalar>(n: usize, dy: &Tensor<S>) -> Tensor<S> {
    let inv = S::one() / S::of(n as f64);
    let row: Vec<S> = dy.data().iter().map(|&g| g * inv).collect();
    let mut data = Vec::with_capacity(n * row.len());
    for _ in 0..n {
        data.extend_from_slice(&row);
    }
    Tensor::from_vec(&[n, row.len()], data).expect("rows shape")
}

/// Mean over windows of `factor` samples along the time axis of `[C × T]`;
/// a trailing partial window is averaged over its own length.
pub fn mean_pool_windows<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    if factor == 0 {
        return Err(Error::InvalidHyper("downsample factor must be >= 1".into()));
    }
    let (c, t) = (x.rows(), x.cols());
    let out_t = t.div_ceil(factor);
    let mut out = Vec::with_capacity(c * out_t);
    for ch in 0..c {
        for w in x.row(ch).chunks(factor) {
            out.push(w.iter().copied().sum::<S>() / S::of(w.len() as f64));
        }
    }
    Tensor::from_vec(&[c, out_t], out)
}

/// Mean pooling of `[C × T]` into exactly `bins` contiguous segments per
/// channel (segment `i` covers `[i*T/bins, (i+1)*T/bins)`).
pub fn adaptive_mean_pool<S: Scalar>(x: &Tensor<S>, bins: usize) -> Tensor<S> {
    let (c, t) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(c * bins);
    for ch in 0..c {
        let row = x.row(ch);
        for i in 0..bins {
            let (lo, hi) = bin_bounds(i, bins, t);
            out.push(row[lo..hi].iter().copied().sum::<S>() / S::of((hi - lo) as f64));
        }
    }
    Tensor::from_vec(&[c, bins], out).expect("bins shape")
}

pub(crate) fn bin_bounds(i: usize, bins: usize, t: usize) -> (usize, usize) {
    let lo = i * t / bins;
    let hi = ((i + 1) * t / bins).max(lo + 1).min(t);
    (lo.min(t - 1), hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hand_arithmetic() {
        let x = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 1.0]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
    }

    #[test]
    fn linear_identity() {
        let x = Tensor::<f64>::vector(vec![0.5, -2.0, 7.0]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear(&x, &eye, Some(&Tensor::zeros(&[3]))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[3]);
        let w = Tensor::<f64>::zeros(&[2, 4]);
        let err = linear(&x, &w, None).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn conv_impulse_reproduces_reversed_kernel() {
        let mut x = Tensor::<f64>::zeros(&[1, 9]);
        x.data_mut()[4] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = conv1d(&x, &w, None, ConvGeometry::same(3, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 9]);
        assert_eq!(&y.data()[3..6], &[3.0, 2.0, 1.0]);
        assert_eq!(y.data().iter().filter(|v| **v != 0.0).count(), 3);
    }

    #[test]
    fn conv_dilated_receptive_field() {
        // K=3, dilation 2: output 0 (no padding) sees inputs 0, 2, 4.
        let w = Tensor::<f64>::from_vec(&[1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = ConvGeometry::new(1, 2, 0);
        let base = Tensor::<f64>::zeros(&[1, 12]);
        let y0 = conv1d(&base, &w, None, g).unwrap();
        let mut near = base.clone();
        near.data_mut()[4] = 1.0;
        let mut far = base.clone();
        far.data_mut()[5] = 1.0;
        assert_ne!(conv1d(&near, &w, None, g).unwrap().data()[0], y0.data()[0]);
        assert_eq!(conv1d(&far, &w, None, g).unwrap().data()[0], y0.data()[0]);
    }

    #[test]
    fn conv_rejects_bad_stride() {
        let x = Tensor::<f64>::zeros(&[1, 8]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3]);
        assert!(matches!(
            conv1d(&x, &w, None, ConvGeometry::new(0, 1, 0)),
            Err(Error::InvalidHyper(_))
        ));
        assert!(matches!(
            conv1d(&x, &w, None, ConvGeometry::new(1, 0, 0)),
            Err(Error::InvalidHyper(_))
        ));
    }

    #[test]
    fn softmax_cases() {
        let y = softmax(&Tensor::<f64>::zeros(&[5]));
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let x = Tensor::<f64>::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let shifted = x.map(|v| v + 123.4);
        assert!(softmax(&x).max_abs_diff(&softmax(&shifted)) < 1e-12);

        let y = softmax(&Tensor::<f64>::vector(vec![1000.0, 0.0]));
        assert!(y.all_finite());
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn softmax_column_axis() {
        let x = Tensor::<f64>::from_vec(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = softmax_axis(&x, 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn window_pooling() {
        let x = Tensor::<f64>::from_vec(&[1, 5], vec![1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        assert_eq!(mean_pool_windows(&x, 1).unwrap(), x);
        let y = mean_pool_windows(&x, 2).unwrap();
        assert_eq!(y.data(), &[1.5, 3.5, 10.0]);
        let long = Tensor::<f64>::zeros(&[2, 5000]);
        assert_eq!(mean_pool_windows(&long, 4).unwrap().shape(), &[2, 1250]);
        let c = Tensor::<f64>::filled(&[1, 37], 3.25);
        assert!(mean_pool_windows(&c, 4).unwrap().data().iter().all(|&v| v == 3.25));
    }
}
