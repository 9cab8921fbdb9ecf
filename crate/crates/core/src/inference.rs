//! Sliding-window super-resolution, back-projection and the geometric ensemble.

use std::path::Path;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{downsample_with_kernel, resize_bicubic, window_origin, BlurKernel, Dihedral, Image};
use crate::patchdb::RetrievalResult;
use crate::scales::{Level, ScaleSpace, Searcher};
use crate::srnet::{Network, Tensor};
use crate::trainer::fallback_cousin;

/// Tiles evaluated together before accumulating, bounding peak memory.
const TILE_CHUNK: usize = 64;

/// Tile layout over the input image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub side: usize,
    pub stride: usize,
    /// Dimensions of the (possibly padded) image the tiles live in.
    pub width: usize,
    pub height: usize,
    /// Padding added on the left and top when the input is smaller than a tile.
    pub pad: (usize, usize),
    /// Tile centers in padded coordinates, row-major.
    pub centers: Vec<(usize, usize)>,
}

fn axis_offsets(len: usize, side: usize, stride: usize) -> Vec<usize> {
    let mut offs: Vec<usize> = (0..=len - side).step_by(stride).collect();
    if *offs.last().expect("len >= side") != len - side {
        offs.push(len - side);
    }
    offs
}

/// Tiles at stride `stride` with the last row and column flush against the border.
pub fn plan_tiles(width: usize, height: usize, side: usize, stride: usize) -> Result<TilePlan> {
    if side == 0 || side % 2 == 1 || stride == 0 {
        return Err(Error::Config(format!("tile side {side} must be even and stride {stride} positive")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Degenerate("empty image".into()));
    }
    let (pw, ph) = (width.max(side), height.max(side));
    let pad = ((pw - width) / 2, (ph - height) / 2);
    let xs = axis_offsets(pw, side, stride);
    let ys = axis_offsets(ph, side, stride);
    let centers = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x + side / 2, y + side / 2))).collect();
    Ok(TilePlan { side, stride, width: pw, height: ph, pad, centers })
}

impl TilePlan {
    /// Number of tiles covering each pixel of the padded image.
    pub fn coverage(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.width * self.height];
        for &(cx, cy) in &self.centers {
            let (x0, y0) = (cx - self.side / 2, cy - self.side / 2);
            for y in y0..y0 + self.side {
                for c in &mut counts[y * self.width + x0..y * self.width + x0 + self.side] {
                    *c += 1;
                }
            }
        }
        counts
    }
}

/// Anything that maps an upsampled son (and optional cousin) to an output patch.
pub trait TileModel: Sync {
    fn uses_cousin(&self) -> bool;
    fn run(&self, son_up: &Tensor, cousin: Option<&Tensor>) -> Result<Tensor>;
}

impl TileModel for Network {
    fn uses_cousin(&self) -> bool {
        self.mode().uses_cousin()
    }

    fn run(&self, son_up: &Tensor, cousin: Option<&Tensor>) -> Result<Tensor> {
        self.predict(son_up, cousin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub patch_side: usize,
    pub stride: usize,
    pub threshold: f64,
    pub pool_grid: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { patch_side: 48, stride: 4, threshold: 0.9, pool_grid: 2 }
    }
}

/// One row of the tile audit log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TileAudit {
    pub center: (usize, usize),
    pub query_depth: f32,
    /// Center of the cousin in `I`, absent on fallback.
    pub cousin_center: Option<(usize, usize)>,
    pub retrieval: RetrievalResult,
    pub used_fallback: bool,
}

pub struct SrOutput {
    pub image: Image,
    pub audit: Vec<TileAudit>,
    /// Cousin searches actually run.
    pub lookups: usize,
}

impl SrOutput {
    pub fn fallback_rate(&self) -> f64 {
        if self.audit.is_empty() {
            return 0.0;
        }
        self.audit.iter().filter(|a| a.used_fallback).count() as f64 / self.audit.len() as f64
    }
}

/// Super-resolves `scales.full` by two. Each `M`-tile is paired with a cousin
/// found by `searcher` over `I↓2` (the `2M` window at twice the match in `I`)
/// or with its own bicubic upsample; overlapping outputs are averaged.
pub fn sr_image(model: &impl TileModel, scales: &ScaleSpace, searcher: &Searcher, cfg: &InferConfig) -> Result<SrOutput> {
    let img = &scales.full;
    let m = cfg.patch_side;
    let plan = plan_tiles(img.width(), img.height(), m, cfg.stride)?;
    let padded = plan.pad != (0, 0) || plan.width != img.width() || plan.height != img.height();
    let work = if padded { img.pad_symmetric(plan.pad.0, plan.pad.1, plan.width, plan.height) } else { img.clone() };
    // upsample before padding so that the residual path is bicubic of `img` itself
    let up = resize_bicubic(img, 2.0)?;
    let up = if padded { up.pad_symmetric(2 * plan.pad.0, 2 * plan.pad.1, 2 * plan.width, 2 * plan.height) } else { up };
    let channels = img.channels();

    let tile = |&center: &(usize, usize)| -> Result<(Tensor, TileAudit)> {
        let (ox, oy) = (center.0 - m / 2, center.1 - m / 2);
        let son = work.crop(ox, oy, m, m)?;
        let son_up = Tensor::from_image(&up.crop(2 * ox, 2 * oy, 2 * m, 2 * m)?);
        let mut audit = TileAudit {
            center,
            query_depth: 0.0,
            cousin_center: None,
            retrieval: RetrievalResult::fallback(),
            used_fallback: true,
        };
        let cousin = if model.uses_cousin() {
            if !padded {
                audit.query_depth = scales.depth_at(Level::Full, center);
                let query = scales.descriptor(Level::Full, center, m, cfg.pool_grid)?;
                audit.retrieval = searcher.lookup(&query, audit.query_depth, cfg.threshold);
                audit.cousin_center = audit
                    .retrieval
                    .cousin_center()
                    .map(|y| (2 * y.0, 2 * y.1))
                    .filter(|&y2| window_origin(y2, 2 * m, img.width(), img.height()).is_some());
                audit.used_fallback = audit.cousin_center.is_none();
            }
            let pixels = match audit.cousin_center {
                Some(y2) => img.crop(y2.0 - m, y2.1 - m, 2 * m, 2 * m)?,
                None => fallback_cousin(&son)?,
            };
            Some(Tensor::from_image(&pixels))
        } else {
            None
        };
        let out = model.run(&son_up, cousin.as_ref())?;
        if out.shape() != (channels, 2 * m, 2 * m) {
            return Err(Error::Shape(format!("tile model returned {:?}", out.shape())));
        }
        Ok((out, audit))
    };

    let (w2, h2) = (2 * plan.width, 2 * plan.height);
    let mut acc = vec![0.0; channels * w2 * h2];
    let mut counts = vec![0u32; w2 * h2];
    let mut audit = Vec::with_capacity(plan.centers.len());
    for chunk in plan.centers.chunks(TILE_CHUNK) {
        let results: Vec<_> = chunk
            .par_iter()
            .map(|c| tile(c).map_err(|e| Error::Tile { x: c.0, y: c.1, source: Box::new(e) }))
            .collect::<Result<_>>()?;
        for (out, a) in results {
            let (x0, y0) = (2 * (a.center.0 - m / 2), 2 * (a.center.1 - m / 2));
            for c in 0..channels {
                for y in 0..2 * m {
                    let src = &out.data[(c * 2 * m + y) * 2 * m..(c * 2 * m + y + 1) * 2 * m];
                    let row = (c * h2 + y0 + y) * w2 + x0;
                    for (d, s) in acc[row..row + 2 * m].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            for y in 0..2 * m {
                for n in &mut counts[(y0 + y) * w2 + x0..(y0 + y) * w2 + x0 + 2 * m] {
                    *n += 1;
                }
            }
            audit.push(a);
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v = (*v / counts[i % (w2 * h2)] as f64).clamp(0.0, 1.0);
    }
    let full = Image::from_vec(w2, h2, channels, acc)?;
    let image = if padded {
        full.crop(2 * plan.pad.0, 2 * plan.pad.1, 2 * img.width(), 2 * img.height())?
    } else {
        full
    };
    debug!("{} tiles, {} fallbacks", audit.len(), audit.iter().filter(|a| a.used_fallback).count());
    let searched = model.uses_cousin() && !padded && !matches!(searcher, Searcher::Disabled);
    let lookups = if searched { audit.len() } else { 0 };
    Ok(SrOutput { image, audit, lookups })
}

pub fn write_audit_csv(path: &Path, audit: &[TileAudit]) -> Result<()> {
    let mut text = String::from("tile_x,tile_y,query_depth,cousin_x,cousin_y,distance,used_fallback\n");
    for a in audit {
        let (cx, cy) = a.cousin_center.map_or((String::new(), String::new()), |c| (c.0.to_string(), c.1.to_string()));
        text.push_str(&format!(
            "{},{},{},{cx},{cy},{},{}\n",
            a.center.0, a.center.1, a.query_depth, a.retrieval.min_distance, a.used_fallback
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// How an HR image is taken back to LR resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum Downscale {
    Bicubic,
    Kernel(BlurKernel),
}

impl Downscale {
    pub fn apply(&self, img: &Image) -> Result<Image> {
        match self {
            Downscale::Bicubic => resize_bicubic(img, 0.5),
            Downscale::Kernel(k) => downsample_with_kernel(img, k, 2),
        }
    }
}

fn residual(sr: &Image, lr: &Image, down: &Downscale) -> Result<Image> {
    let d = down.apply(sr)?;
    if !d.same_shape(lr) {
        return Err(Error::Shape(format!(
            "downscaled SR is {}x{}, LR is {}x{}",
            d.width(),
            d.height(),
            lr.width(),
            lr.height()
        )));
    }
    lr.add_scaled(&d, -1.0)
}

/// Iterative back-projection `sr += up(lr - down(sr))`. Stops early after
/// the residual grows twice in a row and returns the iterate with the
/// smallest residual.
pub fn back_project(sr: &Image, lr: &Image, down: &Downscale, iters: usize) -> Result<Image> {
    let mut cur = sr.clone();
    let mut res = residual(&cur, lr, down)?;
    let mut best = (res.norm(), cur.clone());
    let mut rises = 0;
    for i in 0..iters {
        let up = resize_bicubic(&res, 2.0)?;
        if !up.same_shape(&cur) {
            return Err(Error::Shape("SR must be exactly twice the LR size".into()));
        }
        cur = cur.add_scaled(&up, 1.0)?;
        let prev = res.norm();
        res = residual(&cur, lr, down)?;
        let norm = res.norm();
        if norm < best.0 {
            best = (norm, cur.clone());
        }
        rises = if norm > prev { rises + 1 } else { 0 };
        if rises >= 2 {
            debug!("back-projection stopped after {} iterations: residual rising", i + 1);
            break;
        }
    }
    Ok(best.1)
}

/// Runs `run` on each of the eight dihedral transforms of the input, maps
/// each result back and averages. With `enabled == false` only the identity
/// pass runs.
pub fn geometric_ensemble(enabled: bool, run: impl Fn(Dihedral) -> Result<Image>) -> Result<Image> {
    if !enabled {
        return run(Dihedral::IDENTITY);
    }
    let mut sum: Option<Image> = None;
    for t in Dihedral::all() {
        let out = run(t)?.transformed(t.inverse());
        sum = Some(match sum {
            None => out,
            Some(s) => s.add_scaled(&out, 1.0)?,
        });
    }
    Ok(sum.expect("eight passes").map(|v| v / 8.0))
}
