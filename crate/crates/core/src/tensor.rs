//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! plain forward API and the autograd tape.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
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

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [C, H, W] tensor");
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// Interprets the tensor as `[H, W]`.
    pub fn hw(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a [H, W] tensor");
        (self.shape[0], self.shape[1])
    }

    pub fn at3(&self, c: usize, h: usize, w: usize) -> f64 {
        let (_, hh, ww) = self.chw();
        self.data[(c * hh + h) * ww + w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`, all row-major.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `out[m, n] += a[k, m]^T * b[k, n]`.
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            if s == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[n, k]^T`.
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let k = g.kernel;
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, out: &mut [f64]) {
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of `x: [C, H, W]` with `weight: [O, C, k, k]` and optional `bias: [O]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let (c, h, w) = x.chw();
    let o = weight.shape()[0];
    assert_eq!(weight.shape(), &[o, c, g.kernel, g.kernel], "conv weight shape");
    let (cols, ho, wo) = im2col(x.data(), c, h, w, g);
    let mut out = vec![0.0; o * ho * wo];
    if let Some(b) = bias {
        for (oi, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.fill(b.data()[oi]);
        }
    }
    matmul_acc(weight.data(), &cols, &mut out, o, c * g.kernel * g.kernel, ho * wo);
    Tensor::new(vec![o, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeom,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = x.chw();
    let (o, ho, wo) = grad_out.chw();
    let kk = c * g.kernel * g.kernel;
    let (cols, _, _) = im2col(x.data(), c, h, w, g);

    let mut dw = vec![0.0; o * kk];
    matmul_a_bt_acc(grad_out.data(), &cols, &mut dw, o, ho * wo, kk);

    let db: Vec<f64> = grad_out
        .data()
        .chunks(ho * wo)
        .map(|ch| ch.iter().sum())
        .collect();

    let mut dcols = vec![0.0; kk * ho * wo];
    matmul_at_b_acc(weight.data(), grad_out.data(), &mut dcols, kk, o, ho * wo);
    let mut dx = vec![0.0; c * h * w];
    col2im(&dcols, c, h, w, g, &mut dx);

    (
        Tensor::new(vec![c, h, w], dx),
        Tensor::new(weight.shape().to_vec(), dw),
        Tensor::new(vec![o], db),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Silu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn map(self, t: &Tensor) -> Tensor {
        Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| self.apply(v)).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let (c, h, wd) = x.chw();
        let o = w.shape()[0];
        let (ho, wo) = (g.out_dim(h), g.out_dim(wd));
        let mut out = Tensor::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.at3(ic, iy as usize, ix as usize)
                                    * w.data()[((oc * c + ic) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect(),
        )
    }

    #[test]
    fn conv_matches_direct_loop() {
        for g in [
            ConvGeom { kernel: 3, stride: 1, pad: 1 },
            ConvGeom { kernel: 3, stride: 2, pad: 1 },
            ConvGeom { kernel: 4, stride: 4, pad: 0 },
            ConvGeom { kernel: 1, stride: 1, pad: 0 },
        ] {
            let x = ramp(&[2, 8, 8], 0.1);
            let w = ramp(&[3, 2, g.kernel, g.kernel], 0.07);
            let got = conv2d(&x, &w, None, g);
            assert!(got.max_abs_diff(&naive_conv(&x, &w, g)) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn stride_two_halves_even_dims() {
        let g = ConvGeom { kernel: 3, stride: 2, pad: 1 };
        assert_eq!(g.out_dim(64), 32);
        assert_eq!(g.out_dim(2), 1);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
