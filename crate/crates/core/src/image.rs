//! Planar floating-point rasters and the resampling primitives built on them.
//!
//! Samples are stored channel-major (`data[c * h * w + y * w + x]`) in `[0, 1]`.
//! Intermediate results may leave that range; clamping happens on export.

use crate::error::{Error, Result};

/// A planar floating-point image with 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("non-finite sample {bad}")));
        }
        Ok(Image { width, height, channels, data })
    }

    /// Builds an image by evaluating `f(channel, x, y)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Image { width, height, channels, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Copy with every sample clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        let data = self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Image { data, ..*self }
    }

    /// Single channel `c` as a new one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image { width: self.width, height: self.height, channels: 1, data: self.plane(c).to_vec() }
    }

    /// Axis-aligned copy of `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::OutOfBounds {
                x: (x0 + w / 2) as i64,
                y: (y0 + h / 2) as i64,
                side: w.max(h),
                width: self.width,
                height: self.height,
            });
        }
        Ok(Image::from_fn(w, h, self.channels, |c, x, y| self.get(c, x0 + x, y0 + y)))
    }

    /// Pads by symmetric reflection so the original lands at `(left, top)`.
    pub fn pad_symmetric(&self, left: usize, top: usize, width: usize, height: usize) -> Image {
        Image::from_fn(width, height, self.channels, |c, x, y| {
            let sx = symmetric_index(x as i64 - left as i64, self.width);
            let sy = symmetric_index(y as i64 - top as i64, self.height);
            self.get(c, sx, sy)
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// `self + alpha * other`, elementwise.
    pub fn add_scaled(&self, other: &Image, alpha: f64) -> Result<Image> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + alpha * b).collect();
        Ok(Image { data, ..*self })
    }

    /// Euclidean norm over all samples.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Applies element `t` of the dihedral group of the square (see [`Dihedral`]).
    pub fn transformed(&self, t: Dihedral) -> Image {
        let (w, h) = t.output_dims(self.width, self.height);
        Image::from_fn(w, h, self.channels, |c, x, y| {
            let (sx, sy) = t.source_of(x, y, self.width, self.height);
            self.get(c, sx, sy)
        })
    }
}

/// Maps any integer index onto `[0, n)` by half-sample symmetric reflection
/// (`-1 -> 0`, `-2 -> 1`, `n -> n - 1`).
#[inline]
pub fn symmetric_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// One of the eight rotations/reflections of the square.
///
/// `id % 4` counter-clockwise quarter turns, applied after a horizontal flip
/// when `id >= 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);
    pub const ROT180: Dihedral = Dihedral(2);
    pub const FLIP_H: Dihedral = Dihedral(4);

    pub fn new(id: u8) -> Result<Self> {
        if id < 8 {
            Ok(Dihedral(id))
        } else {
            Err(Error::Config(format!("dihedral transform id {id} outside 0..8")))
        }
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    fn quarter_turns(self) -> u8 {
        self.0 % 4
    }

    fn flips(self) -> bool {
        self.0 >= 4
    }

    pub fn inverse(self) -> Dihedral {
        if self.flips() {
            self
        } else {
            Dihedral((4 - self.quarter_turns()) % 4)
        }
    }

    pub fn output_dims(self, width: usize, height: usize) -> (usize, usize) {
        if self.quarter_turns() % 2 == 1 {
            (height, width)
        } else {
            (width, height)
        }
    }

    /// Source pixel that lands on output `(x, y)` for a `width x height` input.
    pub fn source_of(self, x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
        // Undo the rotation first (it was applied last).
        let (mut sx, mut sy) = (x, y);
        let (mut w, mut h) = self.output_dims(width, height);
        for _ in 0..self.quarter_turns() {
            // A counter-clockwise turn sends (x, y) of a W x H image to (y, W - 1 - x);
            // here the pre-turn width W is the current height.
            let (px, py) = (h - 1 - sy, sx);
            sx = px;
            sy = py;
            std::mem::swap(&mut w, &mut h);
        }
        if self.flips() {
            sx = width - 1 - sx;
        }
        (sx, sy)
    }

    /// Where source pixel `(x, y)` lands after the transform.
    pub fn map_point(self, x: usize, y: usize, width: usize, height: usize) -> (usize, usize) {
        let (ow, oh) = self.output_dims(width, height);
        self.inverse().source_of(x, y, ow, oh)
    }
}

/// Which image of the pyramid a coordinate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleTag {
    Full,
    Down2,
    Down4,
}

impl ScaleTag {
    pub fn to_byte(self) -> u8 {
        match self {
            ScaleTag::Full => 0,
            ScaleTag::Down2 => 1,
            ScaleTag::Down4 => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ScaleTag::Full),
            1 => Some(ScaleTag::Down2),
            2 => Some(ScaleTag::Down4),
            _ => None,
        }
    }
}

/// A square window copied out of a source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub scale: ScaleTag,
    pub center: (usize, usize),
    pub side: usize,
    pub pixels: Image,
}

/// Top-left corner of the `side`-wide window centered at `center`, if it fits.
///
/// The window spans `[c - side/2, c + side/2)` on each axis.
pub fn window_origin(center: (usize, usize), side: usize, width: usize, height: usize) -> Option<(usize, usize)> {
    let half = side / 2;
    let (cx, cy) = center;
    if cx < half || cy < half || cx + (side - half) > width || cy + (side - half) > height {
        None
    } else {
        Some((cx - half, cy - half))
    }
}

/// Copies the `side x side` window centered at `center`. No padding is applied.
pub fn extract_patch(img: &Image, scale: ScaleTag, center: (usize, usize), side: usize) -> Result<Patch> {
    let (x0, y0) = window_origin(center, side, img.width, img.height).ok_or(Error::OutOfBounds {
        x: center.0 as i64,
        y: center.1 as i64,
        side,
        width: img.width,
        height: img.height,
    })?;
    Ok(Patch { scale, center, side, pixels: img.crop(x0, y0, side, side)? })
}

/// A normalized 2-D blur kernel with odd side length.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    side: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    /// Builds a kernel from row-major weights, normalizing them to sum 1.
    pub fn new(side: usize, weights: Vec<f64>) -> Result<Self> {
        if side.is_multiple_of(2) || side == 0 {
            return Err(Error::Config(format!("kernel side {side} must be odd")));
        }
        if weights.len() != side * side {
            return Err(Error::Shape(format!("{} weights for a {side}x{side} kernel", weights.len())));
        }
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || sum.abs() < 1e-12 {
            return Err(Error::Degenerate(format!("kernel weights sum to {sum}")));
        }
        Ok(BlurKernel { side, weights: weights.into_iter().map(|w| w / sum).collect() })
    }

    pub fn delta(side: usize) -> Result<Self> {
        let mut w = vec![0.0; side * side];
        w[side * side / 2] = 1.0;
        Self::new(side, w)
    }

    pub fn gaussian(side: usize, sigma: f64) -> Result<Self> {
        let r = (side / 2) as f64;
        let w = (0..side * side)
            .map(|i| {
                let dx = (i % side) as f64 - r;
                let dy = (i / side) as f64 - r;
                (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        Self::new(side, w)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, kx: usize, ky: usize) -> f64 {
        self.weights[ky * self.side + kx]
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
#[inline]
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Per-output-sample source indices and weights along one axis.
#[derive(Debug, Clone)]
pub(crate) struct Contributions {
    pub taps: Vec<Vec<(usize, f64)>>,
}

/// Resampling weights for one axis, following the `imresize` recipe: the
/// kernel is stretched by `1/scale` when shrinking, weights are normalized per
/// output sample and indices beyond the border are mirrored.
pub(crate) fn cubic_contributions(in_len: usize, out_len: usize, scale: f64) -> Contributions {
    let antialias = scale < 1.0;
    let kernel_width = if antialias { 4.0 / scale } else { 4.0 };
    let taps_per = kernel_width.ceil() as i64 + 2;
    let taps = (0..out_len)
        .map(|i| {
            // 1-based output coordinate mapped into 1-based input space.
            let x = (i + 1) as f64;
            let u = x / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - kernel_width / 2.0).floor() as i64;
            let mut row: Vec<(i64, f64)> = (0..taps_per)
                .map(|j| {
                    let idx = left + j;
                    let d = u - idx as f64;
                    let w = if antialias { scale * cubic(scale * d) } else { cubic(d) };
                    (idx, w)
                })
                .collect();
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            for t in &mut row {
                t.1 /= sum;
            }
            row.into_iter()
                .filter(|&(_, w)| w != 0.0)
                .map(|(idx, w)| (symmetric_index(idx - 1, in_len), w))
                .collect()
        })
        .collect();
    Contributions { taps }
}

fn resample_axis(img: &Image, contrib: &Contributions, horizontal: bool) -> Image {
    let (w, h) = if horizontal {
        (contrib.taps.len(), img.height)
    } else {
        (img.width, contrib.taps.len())
    };
    let mut out = Image::new(w, h, img.channels);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        if horizontal {
            for y in 0..h {
                let row = &src[y * img.width..(y + 1) * img.width];
                for (x, taps) in contrib.taps.iter().enumerate() {
                    dst[y * w + x] = taps.iter().map(|&(i, wt)| wt * row[i]).sum();
                }
            }
        } else {
            for (y, taps) in contrib.taps.iter().enumerate() {
                let out_row = &mut dst[y * w..(y + 1) * w];
                for &(i, wt) in taps {
                    let in_row = &src[i * img.width..(i + 1) * img.width];
                    for (o, &v) in out_row.iter_mut().zip(in_row) {
                        *o += wt * v;
                    }
                }
            }
        }
    }
    out
}

/// Output size of resizing `len` samples by `scale`.
pub fn scaled_len(len: usize, scale: f64) -> usize {
    (len as f64 * scale).round() as usize
}

/// Bicubic resize with antialiasing on shrink, symmetric borders and
/// separable rows-then-columns evaluation.
pub fn resize_bicubic(img: &Image, scale: f64) -> Result<Image> {
    let (w, h) = (scaled_len(img.width, scale), scaled_len(img.height, scale));
    resize_bicubic_to(img, scale, w, h)
}

/// Bicubic resize to an explicit output size, with `scale` driving the kernel.
pub fn resize_bicubic_to(img: &Image, scale: f64, width: usize, height: usize) -> Result<Image> {
    if !(scale > 0.0) || !scale.is_finite() || width == 0 || height == 0 {
        return Err(Error::InvalidScale { scale, width, height });
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::Degenerate("empty image".into()));
    }
    let horizontal = cubic_contributions(img.width, width, scale);
    let vertical = cubic_contributions(img.height, height, scale);
    let rows = resample_axis(img, &horizontal, true);
    Ok(resample_axis(&rows, &vertical, false))
}

/// Bilinear resize with pixel-center alignment and clamped borders.
///
/// Used for depth maps, where cubic overshoot would invent depth orderings.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidScale { scale: 0.0, width, height });
    }
    let axis = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f64)> {
        let ratio = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|i| {
                let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = axis(img.width, width);
    let ys = axis(img.height, height);
    Ok(Image::from_fn(width, height, img.channels, |c, x, y| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let top = img.get(c, x0, y0) * (1.0 - fx) + img.get(c, x1, y0) * fx;
        let bottom = img.get(c, x0, y1) * (1.0 - fx) + img.get(c, x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Full 2-D convolution with symmetric borders, then keeps every `factor`-th
/// sample starting at `factor / 2` on both axes.
pub fn downsample_with_kernel(img: &Image, kernel: &BlurKernel, factor: usize) -> Result<Image> {
    if factor < 2 {
        return Err(Error::Config(format!("downsampling factor {factor} must be >= 2")));
    }
    let side = kernel.side();
    if side > img.width || side > img.height {
        return Err(Error::Degenerate(format!(
            "{side}x{side} kernel larger than {}x{} image",
            img.width, img.height
        )));
    }
    let offset = factor / 2;
    let out_w = (img.width - offset).div_ceil(factor);
    let out_h = (img.height - offset).div_ceil(factor);
    let r = (side / 2) as i64;
    Ok(Image::from_fn(out_w, out_h, img.channels, |c, ox, oy| {
        let x = (offset + ox * factor) as i64;
        let y = (offset + oy * factor) as i64;
        let mut acc = 0.0;
        for ky in 0..side {
            let sy = symmetric_index(y - (ky as i64 - r), img.height);
            for kx in 0..side {
                let sx = symmetric_index(x - (kx as i64 - r), img.width);
                acc += kernel.at(kx, ky) * img.get(c, sx, sy);
            }
        }
        acc
    }))
}

const YCBCR_OFFSET: [f64; 3] = [16.0, 128.0, 128.0];
const YCBCR_MATRIX: [[f64; 3]; 3] = [
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
];

/// Studio-range BT.601 conversion: `Y = (16 + 65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_ycbcr(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::Channels { expected: 3, actual: img.channels });
    }
    let n = img.width * img.height;
    let mut out = Image::new(img.width, img.height, 3);
    for i in 0..n {
        let rgb = [img.data[i], img.data[n + i], img.data[2 * n + i]];
        for k in 0..3 {
            let m = YCBCR_MATRIX[k];
            out.data[k * n + i] = (YCBCR_OFFSET[k] + m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2]) / 255.0;
        }
    }
    Ok(out)
}

/// Exact inverse of [`rgb_to_ycbcr`].
pub fn ycbcr_to_rgb(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::Channels { expected: 3, actual: img.channels });
    }
    let inv = invert3(&YCBCR_MATRIX);
    let n = img.width * img.height;
    let mut out = Image::new(img.width, img.height, 3);
    for i in 0..n {
        let v = [0, 1, 2].map(|k| img.data[k * n + i] * 255.0 - YCBCR_OFFSET[k]);
        for k in 0..3 {
            out.data[k * n + i] = inv[k][0] * v[0] + inv[k][1] * v[1] + inv[k][2] * v[2];
        }
    }
    Ok(out)
}

/// Luma plane on the [0,1] scale: the Y channel for RGB input, the image itself for grayscale.
pub fn luma(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => Ok(rgb_to_ycbcr(img)?.channel(0)),
        n => Err(Error::Channels { expected: 3, actual: n }),
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let cof = |r: usize, c: usize| {
        let rs: Vec<usize> = (0..3).filter(|&i| i != r).collect();
        let cs: Vec<usize> = (0..3).filter(|&i| i != c).collect();
        let minor = m[rs[0]][cs[0]] * m[rs[1]][cs[1]] - m[rs[0]][cs[1]] * m[rs[1]][cs[0]];
        if (r + c).is_multiple_of(2) {
            minor
        } else {
            -minor
        }
    };
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = cof(c, r) / det;
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 1, |_, x, y| (x + 100 * y) as f64)
    }

    fn smooth(w: usize, h: usize, channels: usize) -> Image {
        Image::from_fn(w, h, channels, |c, x, y| {
            let fx = x as f64 / w as f64;
            let fy = y as f64 / h as f64;
            0.5 + 0.3 * (std::f64::consts::TAU * (fx + 0.3 * c as f64)).sin() * (std::f64::consts::PI * fy).cos()
        })
    }

    #[test]
    fn constant_image_survives_resize() {
        let img = Image::filled(13, 9, 3, 0.5);
        for scale in [0.25, 0.5, 1.0 / 3.0, 2.0, 3.0] {
            let out = resize_bicubic(&img, scale).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-12), "scale {scale}");
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let img = smooth(17, 11, 3);
        assert_eq!(resize_bicubic(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn resize_output_dims_round() {
        let img = Image::new(33, 17, 1);
        let out = resize_bicubic(&img, 0.5).unwrap();
        assert_eq!((out.width(), out.height()), (17, 9));
        assert!(matches!(resize_bicubic(&Image::new(1, 1, 1), 0.1), Err(Error::InvalidScale { .. })));
    }

    // Direct dense evaluation of the stretched cubic kernel on the impulse.
    #[test]
    fn impulse_downsample_matches_dense_oracle() {
        let mut img = Image::new(8, 8, 1);
        img.set(0, 3, 4, 1.0);
        let out = resize_bicubic(&img, 0.5).unwrap();
        let weights_1d = |o: usize| -> Vec<f64> {
            let u = (o as f64 + 1.0) * 2.0 - 0.5;
            let raw: Vec<(i64, f64)> = (-10i64..20).map(|j| (j, 0.5 * cubic(0.5 * (u - j as f64)))).collect();
            let sum: f64 = raw.iter().map(|r| r.1).sum();
            let mut w = vec![0.0; 8];
            for (j, v) in raw {
                // 1-based index j, mirrored into 1..=8.
                let mut k = j - 1;
                while !(0..8).contains(&k) {
                    k = if k < 0 { -k - 1 } else { 15 - k };
                }
                w[k as usize] += v / sum;
            }
            w
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let expected = weights_1d(ox)[3] * weights_1d(oy)[4];
                assert!((out.get(0, ox, oy) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn up_then_down_is_near_identity_on_smooth_images() {
        let img = smooth(32, 24, 1);
        let back = resize_bicubic(&resize_bicubic(&img, 2.0).unwrap(), 0.5).unwrap();
        let mae: f64 =
            img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.data().len() as f64;
        assert!(mae < 0.01, "mae {mae}");
    }

    #[test]
    fn delta_kernel_is_plain_subsampling() {
        let img = ramp(10, 8);
        let out = downsample_with_kernel(&img, &BlurKernel::delta(3).unwrap(), 2).unwrap();
        assert_eq!((out.width(), out.height()), (5, 4));
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.get(0, x, y), img.get(0, 1 + 2 * x, 1 + 2 * y));
            }
        }
    }

    #[test]
    fn gaussian_blur_downsample_matches_nested_loop_oracle() {
        let img = Image::from_fn(16, 16, 1, |_, x, y| (x as f64 + 2.0 * y as f64) / 48.0);
        let k = BlurKernel::gaussian(5, 1.0).unwrap();
        let out = downsample_with_kernel(&img, &k, 2).unwrap();
        // Pad explicitly, then correlate with the flipped kernel.
        let padded = img.pad_symmetric(2, 2, 20, 20);
        for oy in 0..8 {
            for ox in 0..8 {
                let (x, y) = (1 + 2 * ox, 1 + 2 * oy);
                let mut acc = 0.0;
                for j in 0..5 {
                    for i in 0..5 {
                        acc += k.at(4 - i, 4 - j) * padded.get(0, x + i, y + j);
                    }
                }
                assert!((out.get(0, ox, oy) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_larger_than_image_is_rejected() {
        let k = BlurKernel::gaussian(11, 2.0).unwrap();
        let r = downsample_with_kernel(&Image::new(8, 8, 1), &k, 2);
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn ycbcr_reference_points() {
        let px = |r, g, b| Image::from_vec(1, 1, 3, vec![r, g, b]).unwrap();
        let y = |img: &Image| rgb_to_ycbcr(img).unwrap().get(0, 0, 0);
        assert!((y(&px(0.0, 0.0, 0.0)) - 16.0 / 255.0).abs() < 1e-12);
        assert!((y(&px(1.0, 1.0, 1.0)) - 235.0 / 255.0).abs() < 1e-12);
        assert!((y(&px(1.0, 0.0, 0.0)) - 81.481 / 255.0).abs() < 1e-12);
        let white = rgb_to_ycbcr(&px(1.0, 1.0, 1.0)).unwrap();
        assert!((white.get(1, 0, 0) - 128.0 / 255.0).abs() < 1e-9);
        assert!((white.get(2, 0, 0) - 128.0 / 255.0).abs() < 1e-9);
        assert!(matches!(rgb_to_ycbcr(&Image::new(2, 2, 1)), Err(Error::Channels { .. })));
    }

    #[test]
    fn ycbcr_round_trip() {
        let img = smooth(9, 7, 3);
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn patch_extraction() {
        let img = ramp(32, 32);
        let p = extract_patch(&img, ScaleTag::Full, (10, 10), 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(p.pixels.get(0, x, y), ((8 + x) + 100 * (8 + y)) as f64);
            }
        }
        let whole = extract_patch(&img, ScaleTag::Full, (16, 16), 32).unwrap();
        assert_eq!(whole.pixels, img);
        let flat = Image::filled(20, 20, 1, 0.3);
        let p = extract_patch(&flat, ScaleTag::Full, (10, 10), 6).unwrap();
        assert!(p.pixels.data().iter().all(|&v| v == 0.3));
        assert!(matches!(
            extract_patch(&img, ScaleTag::Full, (1, 10), 4),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn dihedral_group_behaves() {
        let img = Image::from_fn(5, 3, 1, |_, x, y| (x * 10 + y) as f64);
        for t in Dihedral::all() {
            assert_eq!(img.transformed(t).transformed(t.inverse()), img, "t={t:?}");
            for y in 0..3 {
                for x in 0..5 {
                    let (mx, my) = t.map_point(x, y, 5, 3);
                    assert_eq!(img.transformed(t).get(0, mx, my), img.get(0, x, y));
                }
            }
        }
        let twice = img.transformed(Dihedral::ROT180).transformed(Dihedral::ROT180);
        assert_eq!(twice, img);
        let flipped = img.transformed(Dihedral::FLIP_H);
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(flipped.get(0, 4 - x, y), img.get(0, x, y));
            }
        }
    }

    #[test]
    fn bilinear_keeps_constant_and_range() {
        let img = Image::from_fn(6, 6, 1, |_, x, _| x as f64 / 5.0);
        let out = resize_bilinear(&img, 3, 3).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = resize_bilinear(&Image::filled(7, 5, 1, 0.25), 14, 10).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn kernel_downsampling_is_linear(
                a in proptest::collection::vec(0.0f64..1.0, 144),
                b in proptest::collection::vec(0.0f64..1.0, 144),
                alpha in -2.0f64..2.0,
                beta in -2.0f64..2.0,
            ) {
                let ia = Image::from_vec(12, 12, 1, a).unwrap();
                let ib = Image::from_vec(12, 12, 1, b).unwrap();
                let k = BlurKernel::gaussian(5, 1.3).unwrap();
                let mixed = ia.map(|v| alpha * v).add_scaled(&ib, beta).unwrap();
                let lhs = downsample_with_kernel(&mixed, &k, 2).unwrap();
                let rhs = downsample_with_kernel(&ia, &k, 2).unwrap().map(|v| alpha * v)
                    .add_scaled(&downsample_with_kernel(&ib, &k, 2).unwrap(), beta).unwrap();
                for (l, r) in lhs.data().iter().zip(rhs.data()) {
                    prop_assert!((l - r).abs() < 1e-6);
                }
            }

            #[test]
            fn resize_is_shift_equivariant_in_the_interior(shift in 1usize..4, seed in 0u64..1000) {
                // Downscaling by 1/2 shifts by `shift` output samples when the
                // input shifts by 2*shift.
                let f = |x: usize, y: usize| ((x * 7 + y * 13 + seed as usize) % 17) as f64 / 17.0;
                let big = Image::from_fn(40, 40, 1, |_, x, y| f(x, y));
                let moved = Image::from_fn(40, 40, 1, |_, x, y| f(x + 2 * shift, y));
                let a = resize_bicubic(&big, 0.5).unwrap();
                let b = resize_bicubic(&moved, 0.5).unwrap();
                for y in 0..20 {
                    for x in 4..(16 - shift) {
                        prop_assert!((a.get(0, x + shift, y) - b.get(0, x, y)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
