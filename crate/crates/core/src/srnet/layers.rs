//! Convolution, transposed convolution and non-local attention layers with
//! hand-derived backward passes.

use super::tensor::{col2im, gemm, im2col, Geometry, Tensor};
use crate::error::{Error, Result};

fn check_channels(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    if x.channels != expected {
        return Err(Error::Shape(format!("{what} expects {expected} channels, got {}", x.channels)));
    }
    Ok(())
}

fn add_bias(out: &mut [f64], bias: &[f64], n: usize) {
    for (row, b) in out.chunks_mut(n).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad(grad: &mut [f64], dout: &[f64], n: usize) {
    for (g, row) in grad.iter_mut().zip(dout.chunks(n)) {
        *g += row.iter().sum::<f64>();
    }
}

/// 3x3 convolution with symmetric padding of one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// `(cout, cin, 3, 3)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub const K: usize = 3;

    pub fn zeros(cin: usize, cout: usize, stride: usize) -> Self {
        Conv { cin, cout, stride, weight: vec![0.0; cout * cin * 9], bias: vec![0.0; cout] }
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            c: self.cin,
            h,
            w,
            oh: h.div_ceil(self.stride),
            ow: w.div_ceil(self.stride),
            k: Self::K,
            stride: self.stride,
            pad: 1,
            symmetric: true,
        }
    }

    /// Pre-activation output of size `ceil(h / stride) x ceil(w / stride)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_channels(x, self.cin, "convolution")?;
        let g = self.geometry(x.height, x.width);
        let cols = im2col(&g, &x.data);
        let mut out = Tensor::zeros(self.cout, g.oh, g.ow);
        gemm(self.cout, g.rows(), g.cols(), &self.weight, false, &cols, false, &mut out.data, 0.0);
        add_bias(&mut out.data, &self.bias, g.cols());
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(&self, x: &Tensor, dout: &Tensor, grad: &mut Conv, want_input: bool) -> Option<Tensor> {
        let g = self.geometry(x.height, x.width);
        let cols = im2col(&g, &x.data);
        gemm(self.cout, g.cols(), g.rows(), &dout.data, false, &cols, true, &mut grad.weight, 1.0);
        accumulate_bias_grad(&mut grad.bias, &dout.data, g.cols());
        want_input.then(|| {
            let mut dcols = vec![0.0; g.rows() * g.cols()];
            gemm(g.rows(), self.cout, g.cols(), &self.weight, true, &dout.data, false, &mut dcols, 0.0);
            Tensor { channels: self.cin, height: x.height, width: x.width, data: col2im(&g, &dcols) }
        })
    }
}

/// 4x4 transposed convolution, stride 2, padding 1: doubles the spatial size,
/// then keeps the top-left `target` region.
#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConv {
    pub cin: usize,
    pub cout: usize,
    /// `(cin, cout, 4, 4)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl TransposedConv {
    pub const K: usize = 4;

    pub fn zeros(cin: usize, cout: usize) -> Self {
        TransposedConv { cin, cout, weight: vec![0.0; cin * cout * 16], bias: vec![0.0; cout] }
    }

    fn geometry(&self, x: &Tensor, th: usize, tw: usize) -> Geometry {
        Geometry { c: self.cout, h: th, w: tw, oh: x.height, ow: x.width, k: Self::K, stride: 2, pad: 1, symmetric: false }
    }

    pub fn forward(&self, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        check_channels(x, self.cin, "transposed convolution")?;
        let (th, tw) = target;
        if th > 2 * x.height || tw > 2 * x.width || th == 0 || tw == 0 {
            return Err(Error::Shape(format!(
                "cannot crop a doubled {}x{} map to {th}x{tw}",
                x.height, x.width
            )));
        }
        let g = self.geometry(x, th, tw);
        let mut cols = vec![0.0; g.rows() * g.cols()];
        gemm(g.rows(), self.cin, g.cols(), &self.weight, true, &x.data, false, &mut cols, 0.0);
        let mut out = Tensor { channels: self.cout, height: th, width: tw, data: col2im(&g, &cols) };
        add_bias(&mut out.data, &self.bias, th * tw);
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor, dout: &Tensor, grad: &mut TransposedConv) -> Tensor {
        let g = self.geometry(x, dout.height, dout.width);
        let dcols = im2col(&g, &dout.data);
        gemm(self.cin, g.cols(), g.rows(), &x.data, false, &dcols, true, &mut grad.weight, 1.0);
        accumulate_bias_grad(&mut grad.bias, &dout.data, dout.spatial());
        let mut dx = Tensor::zeros(self.cin, x.height, x.width);
        gemm(self.cin, g.rows(), g.cols(), &self.weight, false, &dcols, false, &mut dx.data, 0.0);
        dx
    }
}

/// Pointwise (1x1) convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointwise {
    pub cin: usize,
    pub cout: usize,
    /// `(cout, cin)`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Pointwise {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Pointwise { cin, cout, weight: vec![0.0; cout * cin], bias: vec![0.0; cout] }
    }

    /// `x` is `cin x n`; returns `cout x n`.
    fn apply(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cout * n];
        gemm(self.cout, self.cin, n, &self.weight, false, x, false, &mut out, 0.0);
        add_bias(&mut out, &self.bias, n);
        out
    }

    /// Accumulates into `grad` and adds the input gradient into `dx`.
    fn backward(&self, x: &[f64], dout: &[f64], n: usize, grad: &mut Pointwise, dx: &mut [f64]) {
        gemm(self.cout, n, self.cin, dout, false, x, true, &mut grad.weight, 1.0);
        accumulate_bias_grad(&mut grad.bias, dout, n);
        gemm(self.cin, self.cout, n, &self.weight, true, dout, false, dx, 1.0);
    }
}

/// Embedded-Gaussian non-local block with a residual connection. Queries
/// come from the first input, keys and values from the second.
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocal {
    pub theta: Pointwise,
    pub phi: Pointwise,
    pub g: Pointwise,
    pub h: Pointwise,
}

#[derive(Debug, Clone)]
pub struct NonLocalCache {
    theta: Vec<f64>,
    phi: Vec<f64>,
    g: Vec<f64>,
    /// Row-stochastic `n x m` attention matrix.
    pub attention: Vec<f64>,
    y: Vec<f64>,
}

impl NonLocal {
    pub fn zeros(channels: usize, embed: usize) -> Self {
        NonLocal {
            theta: Pointwise::zeros(channels, embed),
            phi: Pointwise::zeros(channels, embed),
            g: Pointwise::zeros(channels, embed),
            h: Pointwise::zeros(embed, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.theta.cin
    }

    pub fn embed(&self) -> usize {
        self.theta.cout
    }

    pub fn forward(&self, x: &Tensor, r: &Tensor) -> Result<(Tensor, NonLocalCache)> {
        check_channels(x, self.channels(), "non-local query")?;
        check_channels(r, self.channels(), "non-local reference")?;
        let (e, n, m) = (self.embed(), x.spatial(), r.spatial());
        let theta = self.theta.apply(&x.data, n);
        let phi = self.phi.apply(&r.data, m);
        let g = self.g.apply(&r.data, m);
        let mut attention = vec![0.0; n * m];
        gemm(n, e, m, &theta, true, &phi, false, &mut attention, 0.0);
        for row in attention.chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let mut y = vec![0.0; e * n];
        gemm(e, m, n, &g, false, &attention, true, &mut y, 0.0);
        let mut out = x.clone();
        gemm(self.channels(), e, n, &self.h.weight, false, &y, false, &mut out.data, 1.0);
        add_bias(&mut out.data, &self.h.bias, n);
        Ok((out, NonLocalCache { theta, phi, g, attention, y }))
    }

    /// Returns the gradients with respect to the query and reference inputs.
    pub fn backward(&self, x: &Tensor, r: &Tensor, cache: &NonLocalCache, dout: &Tensor, grad: &mut NonLocal) -> (Tensor, Tensor) {
        let (c, e, n, m) = (self.channels(), self.embed(), x.spatial(), r.spatial());
        let a = &cache.attention;
        let mut dx = dout.clone();
        let mut dy = vec![0.0; e * n];
        self.h.backward(&cache.y, &dout.data, n, &mut grad.h, &mut dy);

        let mut da = vec![0.0; n * m];
        gemm(n, e, m, &dy, true, &cache.g, false, &mut da, 0.0);
        let mut dg = vec![0.0; e * m];
        gemm(e, n, m, &dy, false, a, false, &mut dg, 0.0);
        // softmax Jacobian, row by row
        let mut ds = da;
        for (drow, arow) in ds.chunks_mut(m).zip(a.chunks(m)) {
            let dot: f64 = drow.iter().zip(arow).map(|(d, p)| d * p).sum();
            for (d, p) in drow.iter_mut().zip(arow) {
                *d = p * (*d - dot);
            }
        }
        let mut dtheta = vec![0.0; e * n];
        gemm(e, m, n, &cache.phi, false, &ds, true, &mut dtheta, 0.0);
        let mut dphi = vec![0.0; e * m];
        gemm(e, n, m, &cache.theta, false, &ds, false, &mut dphi, 0.0);

        let mut dr = Tensor::zeros(c, r.height, r.width);
        self.theta.backward(&x.data, &dtheta, n, &mut grad.theta, &mut dx.data);
        self.phi.backward(&r.data, &dphi, m, &mut grad.phi, &mut dr.data);
        self.g.backward(&r.data, &dg, m, &mut grad.g, &mut dr.data);
        (dx, dr)
    }
}
