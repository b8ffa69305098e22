//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff graph and the forward-only helpers.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
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

    /// First element; used for `[1]`-shaped loss values.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(format!(
                "expected a 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a 3-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_vec(&[c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Self::from_vec(&[m, n], out)
    }
}

/// `c = a·b + beta·c` with optional transposition of row-major operands.
///
/// `a` is `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k` when
/// `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above; strides describe exactly
    // the row-major (or transposed) layouts of those slices.
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

/// Geometry of a square-kernel convolution with replicate padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize) -> Self {
        let pad = kernel / 2;
        let out = |n: usize| (n + 2 * pad - kernel) / stride + 1;
        Self {
            in_c,
            in_h,
            in_w,
            kernel,
            stride,
            out_h: out(in_h),
            out_w: out(in_w),
        }
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    fn src(&self, o: usize, k: usize, limit: usize) -> usize {
        let p = (o * self.stride) as isize + k as isize - self.pad();
        p.clamp(0, limit as isize - 1) as usize
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold `[C,H,W]` into a `(C·k·k) × (H_out·W_out)` column matrix;
/// out-of-range taps read the nearest edge pixel.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.col_cols();
    let mut col = vec![0.0; g.col_rows() * n];
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let sy = g.src(oy, ky, g.in_h);
                    let src_row = &plane[sy * g.in_w..(sy + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = src_row[g.src(ox, kx, g.in_w)];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.col_cols();
    let mut x = vec![0.0; g.in_c * g.in_h * g.in_w];
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let sy = g.src(oy, ky, g.in_h);
                    for ox in 0..g.out_w {
                        plane[sy * g.in_w + g.src(ox, kx, g.in_w)] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
    x
}

/// Replicate-padded 2-d convolution of a single `[C,H,W]` sample.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let [out_c, in_c, kh, kw] = weight.shape()[..] else {
        return Err(Error::invalid(format!(
            "conv weight must be 4-d, got {:?}",
            weight.shape()
        )));
    };
    if in_c != c || kh != kw || kh % 2 == 0 || bias.shape() != [out_c] || stride == 0 {
        return Err(Error::invalid(format!(
            "conv mismatch: input {:?}, weight {:?}, bias {:?}, stride {stride}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let g = ConvGeom::new(c, h, w, kh, stride);
    let col = im2col(x.data(), &g);
    let n = g.col_cols();
    let mut out = vec![0.0; out_c * n];
    for (o, chunk) in out.chunks_mut(n).enumerate() {
        chunk.fill(bias.data()[o]);
    }
    gemm(out_c, g.col_rows(), n, weight.data(), false, &col, false, &mut out, 1.0);
    Tensor::from_vec(&[out_c, g.out_h, g.out_w], out)
}

/// Row-wise softmax of a 2-d tensor, max-shifted for stability.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c.max(1)).take(r) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_vec(&[r, c], out)
}

/// Sub-pixel rearrangement `(C·r²)×H×W → C×(rH)×(rW)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (cr2, h, w) = x.dims3()?;
    if r == 0 || cr2 % (r * r) != 0 {
        return Err(Error::invalid(format!(
            "pixel shuffle: {cr2} channels not divisible by r²={}",
            r * r
        )));
    }
    let c = cr2 / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; c * oh * ow];
    let src = x.data();
    for ch in 0..c {
        for a in 0..r {
            for b in 0..r {
                let ic = ch * r * r + a * r + b;
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * oh + r * y + a) * ow + r * xx + b] = src[(ic * h + y) * w + xx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`]; also its adjoint, since the map is a permutation.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c, oh, ow) = x.dims3()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::invalid("pixel unshuffle: spatial dims not divisible by r"));
    }
    let (h, w) = (oh / r, ow / r);
    let mut out = vec![0.0; c * r * r * h * w];
    let src = x.data();
    for ch in 0..c {
        for a in 0..r {
            for b in 0..r {
                let ic = ch * r * r + a * r + b;
                for y in 0..h {
                    for xx in 0..w {
                        out[(ic * h + y) * w + xx] = src[(ch * oh + r * y + a) * ow + r * xx + b];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * r * r, h, w], out)
}

/// `[C,H,W] → [H·W, C]`.
pub fn chw_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    x.clone().reshape(&[c, h * w])?.transpose2()
}

/// `[H·W, C] → [C,H,W]`.
pub fn tokens_to_chw(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (t, c) = x.dims2()?;
    if t != h * w {
        return Err(Error::invalid(format!(
            "{t} tokens cannot form a {h}×{w} map"
        )));
    }
    x.transpose2()?.reshape(&[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        let a = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[4., 5., 10., 11.]);

        let at = a.transpose2().unwrap();
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, at.data(), true, b.data(), false, &mut c, 0.0);
        assert_eq!(c, ab.data());
        let bt = b.transpose2().unwrap();
        gemm(2, 3, 2, a.data(), false, bt.data(), true, &mut c, 0.0);
        assert_eq!(c, ab.data());
    }

    #[test]
    fn conv_on_constant_input_is_constant() {
        let x = Tensor::full(&[2, 6, 6], 0.5);
        let w = Tensor::full(&[3, 2, 3, 3], 0.1);
        let b = Tensor::from_vec(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        for stride in [1, 2] {
            let y = conv2d(&x, &w, &b, stride).unwrap();
            assert_eq!(y.shape(), &[3, 6 / stride, 6 / stride]);
            let n = y.len() / 3;
            for (o, chunk) in y.data().chunks(n).enumerate() {
                let expected = 0.5 * 0.1 * 18.0 + b.data()[o];
                assert!(chunk.iter().all(|v| (v - expected).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mut wd = vec![0.0; 9];
        wd[1] = 1.0; // tap above
        let w = Tensor::from_vec(&[1, 1, 3, 3], wd).unwrap();
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        // replicate border: first row reads itself
        assert_eq!(y.data(), &[1., 2., 3., 1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn unshuffle_inverts_shuffle() {
        let x = Tensor::from_vec(&[8, 2, 3], (0..48).map(f64::from).collect()).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 6]);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
    }

    #[test]
    fn softmax_rows_normalize() {
        let x = Tensor::from_vec(&[2, 3], vec![1000., 1000., 1000., -1., 0., 1.]).unwrap();
        let s = softmax_rows(&x).unwrap();
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
    }
}
