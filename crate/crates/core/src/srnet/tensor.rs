//! Dense CHW tensors and the matrix kernels the layers are built on.

use crate::error::{Error, Result};
use crate::image::{symmetric_index, Image};

/// A single feature map, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite tensor value".into()));
        }
        Ok(Tensor { channels, height, width, data })
    }

    pub fn from_image(img: &Image) -> Self {
        Tensor { channels: img.channels(), height: img.height(), width: img.width(), data: img.data().to_vec() }
    }

    pub fn to_image(&self) -> Result<Image> {
        Image::from_vec(self.width, self.height, self.channels, self.data.clone())
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn relu(mut self) -> Tensor {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self
    }
}

/// `c = op(a) * op(b) + beta * c` with row-major operands; `op(a)` is m x k
/// and `op(b)` is k x n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose presence is asserted.
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

/// Sliding-window geometry relating a `c x h x w` image to an `oh x ow` grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Mirror out-of-range taps; otherwise they read as zero.
    pub symmetric: bool,
}

impl Geometry {
    fn sources(&self, n: usize, out: usize) -> Vec<Option<usize>> {
        let mut table = Vec::with_capacity(self.k * out);
        for kk in 0..self.k {
            for o in 0..out {
                let s = (o * self.stride + kk) as i64 - self.pad as i64;
                table.push(if (0..n as i64).contains(&s) {
                    Some(s as usize)
                } else if self.symmetric {
                    Some(symmetric_index(s, n))
                } else {
                    None
                });
            }
        }
        table
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `x` into a `(c*k*k) x (oh*ow)` matrix.
pub(crate) fn im2col(g: &Geometry, x: &[f64]) -> Vec<f64> {
    let ys = g.sources(g.h, g.oh);
    let xs = g.sources(g.w, g.ow);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.oh {
                    let Some(sy) = ys[ky * g.oh + oy] else { continue };
                    let src = &plane[sy * g.w..(sy + 1) * g.w];
                    for ox in 0..g.ow {
                        if let Some(sx) = xs[kx * g.ow + ox] {
                            dst[oy * g.ow + ox] = src[sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating overlaps.
pub(crate) fn col2im(g: &Geometry, cols: &[f64]) -> Vec<f64> {
    let ys = g.sources(g.h, g.oh);
    let xs = g.sources(g.w, g.ow);
    let mut x = vec![0.0; g.c * g.h * g.w];
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * g.cols()..(row + 1) * g.cols()];
                for oy in 0..g.oh {
                    let Some(sy) = ys[ky * g.oh + oy] else { continue };
                    for ox in 0..g.ow {
                        if let Some(sx) = xs[kx * g.ow + ox] {
                            plane[sy * g.w + sx] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
