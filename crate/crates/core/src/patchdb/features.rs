//! Image-level feature maps and the patch descriptors pooled from them.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{symmetric_index, window_origin, Image};

/// Which features describe a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorBackend {
    /// Raw pixel values.
    Pixel,
    /// Luminance and absolute gradients at three smoothing levels.
    #[default]
    GradientPyramid,
    /// Precomputed maps read from `FMAP` files.
    ExternalFile,
}

/// Smoothing applied before each pyramid level's gradients.
const PYRAMID_SIGMAS: [f64; 3] = [0.0, 1.0, 2.0];

/// Dense feature vectors sampled every `stride` image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    stride: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn from_vec(width: usize, height: usize, channels: usize, stride: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels || stride == 0 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} feature map (stride {stride})",
                data.len()
            )));
        }
        Ok(FeatureMap { width, height, channels, stride, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Image-space extent covered by the map.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.width * self.stride, self.height * self.stride)
    }

    /// Reads an `FMAP width height channels stride` file followed by
    /// channel-major little-endian float32 values.
    pub fn read(path: &Path) -> Result<FeatureMap> {
        let load_err = |reason: String| Error::FeatureLoad { path: path.to_path_buf(), reason };
        let file = File::open(path).map_err(|e| load_err(e.to_string()))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| load_err(e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "FMAP" {
            return Err(load_err(format!("bad header `{}`", header.trim())));
        }
        let dims: Vec<usize> = fields[1..]
            .iter()
            .map(|t| t.parse().map_err(|_| load_err(format!("bad header field `{t}`"))))
            .collect::<Result<_>>()?;
        let (w, h, c, stride) = (dims[0], dims[1], dims[2], dims[3]);
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw).map_err(|e| load_err(e.to_string()))?;
        if raw.len() != w * h * c * 4 {
            return Err(load_err(format!("expected {} payload bytes, found {}", w * h * c * 4, raw.len())));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        FeatureMap::from_vec(w, h, c, stride, data).map_err(|e| load_err(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body =
            format!("FMAP {} {} {} {}\n", self.width, self.height, self.channels, self.stride).into_bytes();
        for v in &self.data {
            body.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&body).map_err(|e| Error::io(path, e))
    }
}

/// Computes (or loads) the feature map of `img` with the chosen backend.
///
/// For the external backend `file` names the map; its image extent must
/// cover `img`.
pub fn extract_image_features(img: &Image, backend: DescriptorBackend, file: Option<&Path>) -> Result<FeatureMap> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Degenerate("empty image".into()));
    }
    match backend {
        DescriptorBackend::Pixel => {
            FeatureMap::from_vec(img.width(), img.height(), img.channels(), 1, img.data().to_vec())
        }
        DescriptorBackend::GradientPyramid => Ok(gradient_pyramid(img)),
        DescriptorBackend::ExternalFile => {
            let path = file.ok_or_else(|| Error::FeatureLoad {
                path: PathBuf::new(),
                reason: "external-file backend needs a feature map path".into(),
            })?;
            let fm = FeatureMap::read(path)?;
            let (w, h) = fm.image_dims();
            if w.abs_diff(img.width()) >= fm.stride || h.abs_diff(img.height()) >= fm.stride {
                return Err(Error::FeatureLoad {
                    path: path.to_path_buf(),
                    reason: format!(
                        "map covers {w}x{h} pixels but the image is {}x{}",
                        img.width(),
                        img.height()
                    ),
                });
            }
            Ok(fm)
        }
    }
}

fn luminance_centered(img: &Image) -> Vec<f64> {
    let n = img.width() * img.height();
    let lum: Vec<f64> = if img.channels() == 3 {
        (0..n)
            .map(|i| 0.299 * img.plane(0)[i] + 0.587 * img.plane(1)[i] + 0.114 * img.plane(2)[i])
            .collect()
    } else {
        img.plane(0).to_vec()
    };
    let mean = lum.iter().sum::<f64>() / n as f64;
    lum.into_iter().map(|v| v - mean).collect()
}

fn gaussian_blur(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / sum).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[y * w + symmetric_index(x as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[symmetric_index(y as i64 + k as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Nine channels: `[L, |dL/dx|, |dL/dy|]` for three smoothing levels of the
/// mean-centered luminance `L`. Gradients are forward differences with a
/// symmetric border (so the last column/row has zero gradient).
fn gradient_pyramid(img: &Image) -> FeatureMap {
    let (w, h) = (img.width(), img.height());
    let lum = luminance_centered(img);
    let mut data = Vec::with_capacity(9 * w * h);
    for sigma in PYRAMID_SIGMAS {
        let s = gaussian_blur(&lum, w, h, sigma);
        let mut gx = vec![0.0; w * h];
        let mut gy = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let here = s[y * w + x];
                if x + 1 < w {
                    gx[y * w + x] = (s[y * w + x + 1] - here).abs();
                }
                if y + 1 < h {
                    gy[y * w + x] = (s[(y + 1) * w + x] - here).abs();
                }
            }
        }
        data.extend_from_slice(&s);
        data.extend_from_slice(&gx);
        data.extend_from_slice(&gy);
    }
    FeatureMap { width: w, height: h, channels: 9, stride: 1, data }
}

/// A unit-length patch descriptor, or the zero descriptor of a featureless patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f32>,
    sq: f64,
    zero: bool,
}

/// Pooled vectors shorter than this are treated as featureless.
const ZERO_NORM: f64 = 1e-9;

impl Descriptor {
    /// L2-normalizes `raw`; near-zero vectors become the zero descriptor.
    pub fn from_raw(raw: &[f64]) -> Descriptor {
        let len = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(len > ZERO_NORM) {
            return Descriptor { values: vec![0.0; raw.len()], sq: 0.0, zero: true };
        }
        let values: Vec<f32> = raw.iter().map(|v| (v / len) as f32).collect();
        Self::from_stored(values)
    }

    /// Rebuilds a descriptor from its stored (already normalized) values.
    pub fn from_stored(values: Vec<f32>) -> Descriptor {
        let sq = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        let zero = sq == 0.0;
        Descriptor { values, sq, zero }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Length of the stored vector (1 up to float32 rounding, 0 when zero-flagged).
    pub fn norm(&self) -> f64 {
        self.sq.sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `1 - cos(a, b)` in `[0, 2]`; 2 whenever either side is the zero descriptor.
pub fn descriptor_distance(a: &Descriptor, b: &Descriptor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Config(format!("descriptor lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(distance_unchecked(a, b))
}

#[inline]
pub(crate) fn distance_unchecked(a: &Descriptor, b: &Descriptor) -> f64 {
    if a.zero || b.zero {
        return 2.0;
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(&x, &y)| x as f64 * y as f64).sum();
    let cos = dot / (a.sq * b.sq).sqrt();
    (1.0 - cos).clamp(0.0, 2.0)
}

/// Mean-pools the window of side `side` centered at `center` (image
/// coordinates) over a `grid x grid` layout of cells, then normalizes.
pub fn patch_descriptor(fm: &FeatureMap, center: (usize, usize), side: usize, grid: usize) -> Result<Descriptor> {
    let grid = grid.max(1);
    let (img_w, img_h) = fm.image_dims();
    let oob = || Error::OutOfBounds {
        x: center.0 as i64,
        y: center.1 as i64,
        side,
        width: img_w,
        height: img_h,
    };
    let (x0, y0) = window_origin(center, side, img_w, img_h).ok_or_else(oob)?;
    let s = fm.stride;
    let fx0 = x0 / s;
    let fy0 = y0 / s;
    let fx1 = (x0 + side).div_ceil(s).min(fm.width);
    let fy1 = (y0 + side).div_ceil(s).min(fm.height);
    let (fw, fh) = (fx1 - fx0, fy1 - fy0);
    if fw < grid || fh < grid {
        return Err(oob());
    }
    let mut raw = Vec::with_capacity(grid * grid * fm.channels);
    for gy in 0..grid {
        let (cy0, cy1) = (fy0 + gy * fh / grid, fy0 + (gy + 1) * fh / grid);
        for gx in 0..grid {
            let (cx0, cx1) = (fx0 + gx * fw / grid, fx0 + (gx + 1) * fw / grid);
            let count = ((cy1 - cy0) * (cx1 - cx0)) as f64;
            for c in 0..fm.channels {
                let plane = &fm.data[c * fm.width * fm.height..(c + 1) * fm.width * fm.height];
                let mut acc = 0.0;
                for y in cy0..cy1 {
                    acc += plane[y * fm.width + cx0..y * fm.width + cx1].iter().sum::<f64>();
                }
                raw.push(acc / count);
            }
        }
    }
    Ok(Descriptor::from_raw(&raw))
}
