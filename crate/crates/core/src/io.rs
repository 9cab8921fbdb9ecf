//! File formats: 8-bit PNG, plain-text blur kernels and depth maps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BlurKernel, Image};

/// Reads an 8-bit grayscale or RGB(A) PNG. Alpha is dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_channels, out_channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
    };
    let row_bytes = info.line_size;
    let mut img = Image::new(w, h, out_channels);
    for y in 0..h {
        let row = &buf[y * row_bytes..];
        for x in 0..w {
            for c in 0..out_channels {
                img.set(c, x, y, row[x * src_channels + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Quantizes to 8 bits (after clamping) and writes a grayscale or RGB PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(Error::Channels { expected: 3, actual: n }),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(&to_bytes(img)).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Interleaved 8-bit samples, rounded after clamping to `[0, 1]`.
pub fn to_bytes(img: &Image) -> Vec<u8> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = Vec::with_capacity(w * h * ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                out.push((img.get(c, x, y).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Reads a kernel file: first line is the side length, then `side * side`
/// whitespace-separated weights in row-major order.
pub fn read_kernel(path: &Path) -> Result<BlurKernel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let side: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "missing kernel side on first line"))?;
    let weights: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|t| t.parse::<f64>().map_err(|_| Error::format(path, format!("bad weight `{t}`"))))
        .collect::<Result<_>>()?;
    if weights.len() != side * side {
        return Err(Error::format(path, format!("expected {} weights, found {}", side * side, weights.len())));
    }
    BlurKernel::new(side, weights).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_kernel(path: &Path, kernel: &BlurKernel) -> Result<()> {
    let mut text = format!("{}\n", kernel.side());
    for row in kernel.weights().chunks(kernel.side()) {
        let cells: Vec<String> = row.iter().map(|w| format!("{w:.17e}")).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A per-pixel depth map, min-max normalized to `[0, 1]`; smaller is nearer.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Image);

impl DepthMap {
    /// Wraps raw depth values, min-max normalizing them. A constant map becomes all zeros.
    pub fn from_raw(width: usize, height: usize, raw: Vec<f64>) -> Result<Self> {
        let img = Image::from_vec(width, height, 1, raw)?;
        Ok(Self::normalized(img))
    }

    fn normalized(img: Image) -> Self {
        let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        DepthMap(img.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }))
    }

    /// Wraps values that are already in `[0, 1]` without renormalizing.
    pub fn from_normalized(img: Image) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::Channels { expected: 1, actual: img.channels() });
        }
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("normalized depth outside [0, 1]".into()));
        }
        Ok(DepthMap(img))
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.0.get(0, x, y)
    }

    pub fn as_image(&self) -> &Image {
        &self.0
    }

    /// Bilinear resample to `width x height`.
    pub fn resized(&self, width: usize, height: usize) -> Result<DepthMap> {
        if (width, height) == (self.width(), self.height()) {
            return Ok(self.clone());
        }
        let img = crate::image::resize_bilinear(&self.0, width, height)?;
        // Bilinear weights are convex, so values stay in range up to rounding.
        Ok(DepthMap(img.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn transformed(&self, t: crate::image::Dihedral) -> DepthMap {
        DepthMap(self.0.transformed(t))
    }

    pub fn read(path: &Path) -> Result<DepthMap> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut magic = [0u8; 2];
        reader.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        match &magic {
            b"P5" => read_pgm(path, reader),
            b"DP" => read_dpt(path, reader),
            _ => Err(Error::format(path, "expected a P5 PGM or DPT depth file")),
        }
    }

    /// Writes the map as a float32 `DPT` file.
    pub fn write_dpt(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut body = format!("DPT {} {}\n", self.width(), self.height()).into_bytes();
        for v in self.0.data() {
            body.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&body).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

fn pnm_token(reader: &mut impl BufRead) -> std::io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        reader.read_exact(&mut byte)?;
        let b = byte[0];
        if b == b'#' {
            let mut skip = Vec::new();
            reader.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(b as char);
    }
}

fn read_pgm(path: &Path, mut reader: impl BufRead) -> Result<DepthMap> {
    let mut header = [0usize; 3];
    for slot in &mut header {
        let tok = pnm_token(&mut reader).map_err(|e| Error::io(path, e))?;
        *slot = tok.parse().map_err(|_| Error::format(path, format!("bad PGM header token `{tok}`")))?;
    }
    let [w, h, maxval] = header;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("PGM maxval {maxval} out of range")));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let mut raw = vec![0u8; w * h * bytes_per];
    reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let values = if bytes_per == 2 {
        raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64).collect()
    } else {
        raw.iter().map(|&b| b as f64).collect()
    };
    DepthMap::from_raw(w, h, values)
}

fn read_dpt(path: &Path, mut reader: impl BufRead) -> Result<DepthMap> {
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    // The magic consumed "DP"; the rest of the header is "T width height".
    let mut parts = line.split_whitespace();
    if parts.next() != Some("T") {
        return Err(Error::format(path, "expected header `DPT width height`"));
    }
    let mut dim = || -> Result<usize> {
        parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(path, "expected header `DPT width height`"))
    };
    let (w, h) = (dim()?, dim()?);
    let mut raw = vec![0u8; w * h * 4];
    reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    DepthMap::from_raw(w, h, values)
}

/// Writes a 16-bit binary PGM of the depth map.
pub fn write_pgm16(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut body = format!("P5\n{} {}\n65535\n", depth.width(), depth.height()).into_bytes();
    for v in depth.as_image().data() {
        body.extend_from_slice(&((v * 65535.0).round() as u16).to_be_bytes());
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
