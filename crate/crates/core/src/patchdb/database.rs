//! Depth-binned patch databases and cousin retrieval.

use std::io::{Read, Write};
use std::path::Path;

use log::debug;
use rayon::prelude::*;

use super::features::{distance_unchecked, patch_descriptor, Descriptor, FeatureMap};
use super::kmedoids::cluster_kmedoids;
use crate::error::{Error, Result};
use crate::image::{window_origin, ScaleTag};
use crate::io::DepthMap;

/// Parameters controlling database construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbParams {
    pub patch_side: usize,
    /// Lattice step between candidate centers; must be even.
    pub stride: usize,
    pub depth_bins: usize,
    /// `k_i = ceil(N_i / k_divisor)` medoids per bin.
    pub k_divisor: usize,
    /// Cells per side when pooling descriptors.
    pub pool_grid: usize,
}

impl Default for DbParams {
    fn default() -> Self {
        DbParams { patch_side: 48, stride: 2, depth_bins: 5, k_divisor: 100, pool_grid: 2 }
    }
}

/// One representative patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEntry {
    pub center: (usize, usize),
    pub depth: f32,
    pub descriptor: Descriptor,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDatabase {
    pub scale: ScaleTag,
    pub patch_side: usize,
    /// `D + 1` strictly increasing bin edges.
    pub edges: Vec<f32>,
    pub entries: Vec<PatchEntry>,
}

/// Depth-bin assignment of a set of centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub bins: Vec<usize>,
    pub edges: Vec<f32>,
}

/// Depth values are compared at float32 precision everywhere so that stored
/// databases and freshly computed candidates agree exactly.
#[inline]
pub fn depth_key(v: f64) -> f32 {
    v as f32
}

/// Uniform bin edges over the full depth range of `depth`.
pub fn depth_edges(depth: &DepthMap, bins: usize) -> Result<Vec<f32>> {
    if bins == 0 {
        return Err(Error::Config("number of depth bins must be >= 1".into()));
    }
    let data = depth.as_image().data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min) as f32;
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max) as f32;
    let span = if hi - lo > 1e-6 { hi - lo } else { 1.0 };
    let mut edges: Vec<f32> = (0..=bins).map(|i| lo + span * i as f32 / bins as f32).collect();
    if hi - lo > 1e-6 {
        edges[bins] = hi;
    }
    Ok(edges)
}

/// Largest bin whose lower edge does not exceed `d`; the top edge is inclusive.
pub fn bin_of(d: f32, edges: &[f32]) -> usize {
    let bins = edges.len() - 1;
    (0..bins).rev().find(|&b| edges[b] <= d).unwrap_or(0)
}

/// Assigns each center to a depth bin by the depth at its center pixel.
pub fn segment_by_depth(depth: &DepthMap, centers: &[(usize, usize)], bins: usize) -> Result<Segmentation> {
    let edges = depth_edges(depth, bins)?;
    let bins = centers.iter().map(|&(x, y)| bin_of(depth_key(depth.at(x, y)), &edges)).collect();
    Ok(Segmentation { bins, edges })
}

/// Even-coordinate lattice of centers whose `side`-wide window fits `width x height`.
pub fn candidate_centers(width: usize, height: usize, side: usize, stride: usize) -> Vec<(usize, usize)> {
    let half = side / 2;
    let first = half + half % 2;
    let axis = |len: usize| -> Vec<usize> {
        (first..len).step_by(stride.max(1)).filter(|&c| c + (side - half) <= len).collect()
    };
    let xs = axis(width);
    let ys = axis(height);
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect()
}

/// Builds the internal patch database of one image scale: candidate patches
/// are binned by center depth and each bin is summarized by its k-medoids.
pub fn build_database(fm: &FeatureMap, depth: &DepthMap, scale: ScaleTag, params: &DbParams) -> Result<PatchDatabase> {
    if params.patch_side == 0 || params.patch_side % 2 == 1 {
        return Err(Error::Config(format!("patch side {} must be even and positive", params.patch_side)));
    }
    if params.stride == 0 || params.stride % 2 == 1 {
        return Err(Error::Config(format!("database stride {} must be even", params.stride)));
    }
    if params.k_divisor == 0 {
        return Err(Error::Config("k divisor must be >= 1".into()));
    }
    let (width, height) = (depth.width(), depth.height());
    let centers = candidate_centers(width, height, params.patch_side, params.stride);
    let seg = segment_by_depth(depth, &centers, params.depth_bins)?;
    let descriptors: Vec<Descriptor> = centers
        .par_iter()
        .map(|&c| patch_descriptor(fm, c, params.patch_side, params.pool_grid))
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    for bin in 0..params.depth_bins {
        let members: Vec<usize> = (0..centers.len()).filter(|&i| seg.bins[i] == bin).collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len().div_ceil(params.k_divisor);
        let descs: Vec<Descriptor> = members.iter().map(|&i| descriptors[i].clone()).collect();
        for m in cluster_kmedoids(&descs, k) {
            let i = members[m];
            entries.push(PatchEntry {
                center: centers[i],
                depth: depth_key(depth.at(centers[i].0, centers[i].1)),
                descriptor: descriptors[i].clone(),
                bin,
            });
        }
    }
    sort_entries(&mut entries);
    debug!("database over {:?}: {} candidates -> {} medoids", scale, centers.len(), entries.len());
    Ok(PatchDatabase { scale, patch_side: params.patch_side, edges: seg.edges, entries })
}

fn sort_entries(entries: &mut [PatchEntry]) {
    entries.sort_by_key(|e| (e.bin, e.center.1, e.center.0));
}

/// Derives the next-coarser database by halving every center and recomputing
/// descriptors on the coarser image's feature map. Entries whose halved
/// window leaves the coarser image are dropped.
pub fn derive_scaled_database(db: &PatchDatabase, coarse_fm: &FeatureMap, pool_grid: usize) -> Result<PatchDatabase> {
    let (w, h) = coarse_fm.image_dims();
    let scale = match db.scale {
        ScaleTag::Full => ScaleTag::Down2,
        _ => ScaleTag::Down4,
    };
    let mut entries = Vec::with_capacity(db.entries.len());
    for e in &db.entries {
        let center = (e.center.0 / 2, e.center.1 / 2);
        if window_origin(center, db.patch_side, w, h).is_none() {
            debug!("dropping entry at {:?}: halved window leaves {w}x{h}", e.center);
            continue;
        }
        entries.push(PatchEntry {
            center,
            depth: e.depth,
            descriptor: patch_descriptor(coarse_fm, center, db.patch_side, pool_grid)?,
            bin: e.bin,
        });
    }
    sort_entries(&mut entries);
    Ok(PatchDatabase { scale, patch_side: db.patch_side, edges: db.edges.clone(), entries })
}

/// Outcome of one cousin lookup.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RetrievalResult {
    /// Best eligible center in the searched image's coordinates, if any.
    pub best_center: Option<(usize, usize)>,
    /// Distance of the best candidate; infinite when nothing was eligible.
    pub min_distance: f64,
    pub used_fallback: bool,
}

impl RetrievalResult {
    pub fn fallback() -> Self {
        RetrievalResult { best_center: None, min_distance: f64::INFINITY, used_fallback: true }
    }

    /// The matched center, or `None` when the bicubic fallback applies.
    pub fn cousin_center(&self) -> Option<(usize, usize)> {
        if self.used_fallback {
            None
        } else {
            self.best_center
        }
    }
}

/// Argmin over eligible candidates, lowest index first on ties. The match is
/// accepted only when its distance is strictly below `threshold`.
fn best_match<'a>(
    query: &Descriptor,
    candidates: impl Iterator<Item = (&'a (usize, usize), f32, &'a Descriptor)>,
    max_depth: Option<f32>,
    threshold: f64,
) -> RetrievalResult {
    let mut best: Option<((usize, usize), f64)> = None;
    for (center, depth, desc) in candidates {
        if let Some(limit) = max_depth {
            if !(depth < limit) {
                continue;
            }
        }
        let d = distance_unchecked(query, desc);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((*center, d));
        }
    }
    match best {
        None => RetrievalResult::fallback(),
        Some((center, d)) => RetrievalResult { best_center: Some(center), min_distance: d, used_fallback: !(d < threshold) },
    }
}

/// Looks up the nearest entry that lies strictly closer than `query_depth`.
pub fn retrieve_cousin(query: &Descriptor, query_depth: f32, db: &PatchDatabase, threshold: f64) -> RetrievalResult {
    best_match(
        query,
        db.entries.iter().map(|e| (&e.center, e.depth, &e.descriptor)),
        Some(query_depth),
        threshold,
    )
}

/// Every even-coordinate candidate of one image, for exhaustive search.
#[derive(Debug, Clone)]
pub struct ExhaustiveIndex {
    pub patch_side: usize,
    centers: Vec<(usize, usize)>,
    depths: Vec<f32>,
    descriptors: Vec<Descriptor>,
}

impl ExhaustiveIndex {
    /// `depth`, when given, must be aligned with the feature map's image.
    pub fn new(fm: &FeatureMap, depth: Option<&DepthMap>, patch_side: usize, pool_grid: usize) -> Result<Self> {
        let (w, h) = fm.image_dims();
        let centers = candidate_centers(w, h, patch_side, 2);
        let descriptors = centers
            .par_iter()
            .map(|&c| patch_descriptor(fm, c, patch_side, pool_grid))
            .collect::<Result<_>>()?;
        let depths = centers
            .iter()
            .map(|&(x, y)| depth.map_or(0.0, |d| depth_key(d.at(x, y))))
            .collect();
        Ok(ExhaustiveIndex { patch_side, centers, depths, descriptors })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Scans every candidate; the depth constraint applies only when `use_depth`.
pub fn retrieve_exhaustive(
    query: &Descriptor,
    query_depth: f32,
    index: &ExhaustiveIndex,
    use_depth: bool,
    threshold: f64,
) -> RetrievalResult {
    best_match(
        query,
        index.centers.iter().zip(&index.depths).zip(&index.descriptors).map(|((c, &d), desc)| (c, d, desc)),
        use_depth.then_some(query_depth),
        threshold,
    )
}

const MAGIC: &[u8; 4] = b"RZDB";
const VERSION: u16 = 1;

impl PatchDatabase {
    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn descriptor_len(&self) -> usize {
        self.entries.first().map_or(0, |e| e.descriptor.len())
    }

    /// Little-endian layout:
    ///
    /// ```text
    /// "RZDB" | version u16 | scale u8 | patch_side u32 | D u32 | edges f32 x (D+1)
    /// | descriptor_len u32 | count u32 | count x (cx i32, cy i32, depth f32, descriptor f32 x len)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.scale.to_byte());
        out.extend_from_slice(&(self.patch_side as u32).to_le_bytes());
        out.extend_from_slice(&(self.bins() as u32).to_le_bytes());
        for e in &self.edges {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.extend_from_slice(&(self.descriptor_len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.center.0 as i32).to_le_bytes());
            out.extend_from_slice(&(e.center.1 as i32).to_le_bytes());
            out.extend_from_slice(&e.depth.to_le_bytes());
            for v in e.descriptor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if r.len() < n {
                return Err("truncated database".into());
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err("missing RZDB magic".into());
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported database version {version}"));
        }
        let scale = ScaleTag::from_byte(take(1)?[0]).ok_or("bad scale tag")?;
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let f32_at = |b: &[u8]| f32::from_le_bytes(b.try_into().unwrap());
        let patch_side = u32_at(take(4)?) as usize;
        let bins = u32_at(take(4)?) as usize;
        let edges: Vec<f32> = (0..=bins).map(|_| take(4).map(f32_at)).collect::<std::result::Result<_, _>>()?;
        let len = u32_at(take(4)?) as usize;
        let count = u32_at(take(4)?) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let cx = i32::from_le_bytes(take(4)?.try_into().unwrap());
            let cy = i32::from_le_bytes(take(4)?.try_into().unwrap());
            if cx < 0 || cy < 0 {
                return Err("negative center".into());
            }
            let depth = f32_at(take(4)?);
            let values: Vec<f32> = (0..len).map(|_| take(4).map(f32_at)).collect::<std::result::Result<_, _>>()?;
            entries.push(PatchEntry {
                center: (cx as usize, cy as usize),
                depth,
                descriptor: Descriptor::from_stored(values),
                bin: bin_of(depth, &edges),
            });
        }
        if !r.is_empty() {
            return Err("trailing bytes after database".into());
        }
        Ok(PatchDatabase { scale, patch_side, edges, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::format(path, reason))
    }
}
