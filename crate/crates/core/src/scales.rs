//! The input image at full, 1/2 and 1/4 scale with aligned depth and features,
//! and the cousin search strategies that run over them.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize_bicubic, Image};
use crate::io::DepthMap;
use crate::patchdb::{
    depth_key, extract_image_features, patch_descriptor, retrieve_cousin, retrieve_exhaustive, Descriptor,
    DescriptorBackend, ExhaustiveIndex, FeatureMap, PatchDatabase, RetrievalResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Full,
    Down2,
    Down4,
}

impl Level {
    fn file_name(self) -> &'static str {
        match self {
            Level::Full => "full.fmap",
            Level::Down2 => "down2.fmap",
            Level::Down4 => "down4.fmap",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSettings {
    pub backend: DescriptorBackend,
    /// Directory holding `full.fmap`, `down2.fmap` and `down4.fmap` for the
    /// external backend.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ScaleSpace {
    pub full: Image,
    pub down2: Image,
    pub down4: Image,
    /// Depth at each scale, when a depth map was supplied.
    pub depth: Option<[DepthMap; 3]>,
    pub features: [FeatureMap; 3],
}

impl ScaleSpace {
    /// `I↓2 = resize(I, 1/2)` and `I↓4 = resize(I↓2, 1/2)`; depth is resampled
    /// bilinearly to each scale.
    pub fn new(img: &Image, depth: Option<&DepthMap>, features: &FeatureSettings) -> Result<ScaleSpace> {
        let down2 = resize_bicubic(img, 0.5)?;
        let down4 = resize_bicubic(&down2, 0.5)?;
        let depth = depth
            .map(|d| -> Result<[DepthMap; 3]> {
                Ok([
                    d.resized(img.width(), img.height())?,
                    d.resized(down2.width(), down2.height())?,
                    d.resized(down4.width(), down4.height())?,
                ])
            })
            .transpose()?;
        let load = |im: &Image, level: Level| -> Result<FeatureMap> {
            let file = match (features.backend, &features.dir) {
                (DescriptorBackend::ExternalFile, Some(dir)) => Some(feature_file(dir, level)),
                (DescriptorBackend::ExternalFile, None) => {
                    return Err(Error::Config("external descriptor backend needs a feature directory".into()))
                }
                _ => None,
            };
            extract_image_features(im, features.backend, file.as_deref())
        };
        let features = [load(img, Level::Full)?, load(&down2, Level::Down2)?, load(&down4, Level::Down4)?];
        Ok(ScaleSpace { full: img.clone(), down2, down4, depth, features })
    }

    pub fn image(&self, level: Level) -> &Image {
        match level {
            Level::Full => &self.full,
            Level::Down2 => &self.down2,
            Level::Down4 => &self.down4,
        }
    }

    fn index(level: Level) -> usize {
        match level {
            Level::Full => 0,
            Level::Down2 => 1,
            Level::Down4 => 2,
        }
    }

    pub fn features(&self, level: Level) -> &FeatureMap {
        &self.features[Self::index(level)]
    }

    pub fn depth(&self, level: Level) -> Option<&DepthMap> {
        self.depth.as_ref().map(|d| &d[Self::index(level)])
    }

    /// Depth at a pixel of one scale, or 0 without depth.
    pub fn depth_at(&self, level: Level, center: (usize, usize)) -> f32 {
        self.depth(level).map_or(0.0, |d| depth_key(d.at(center.0, center.1)))
    }

    /// Depth used for database construction: the real map, or all zeros
    /// (a single bin) when no depth was supplied.
    pub fn depth_or_flat(&self, level: Level) -> Result<DepthMap> {
        match self.depth(level) {
            Some(d) => Ok(d.clone()),
            None => {
                let im = self.image(level);
                DepthMap::from_normalized(Image::new(im.width(), im.height(), 1))
            }
        }
    }

    pub fn descriptor(&self, level: Level, center: (usize, usize), side: usize, grid: usize) -> Result<Descriptor> {
        patch_descriptor(self.features(level), center, side, grid)
    }
}

/// Cousin search strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Retrieval {
    /// Depth-constrained search over the medoid database.
    #[default]
    Database,
    /// Depth-constrained search over every lattice patch.
    Exhaustive,
    /// Every lattice patch, ignoring depth.
    ExhaustiveNoDepth,
}

/// What to do about retrieval when no depth map is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingDepth {
    #[default]
    ExhaustiveNoDepth,
    /// Use the bicubic fallback cousin everywhere.
    Fallback,
}

/// A ready-to-query search over one scale.
#[derive(Debug, Clone)]
pub enum Searcher {
    Database(PatchDatabase),
    Exhaustive { index: ExhaustiveIndex, use_depth: bool },
    Disabled,
}

impl Searcher {
    /// Builds the search over `level`. `db` is used by the database strategy.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        retrieval: Retrieval,
        missing: MissingDepth,
        scales: &ScaleSpace,
        level: Level,
        db: Option<&PatchDatabase>,
        patch_side: usize,
        grid: usize,
    ) -> Result<Searcher> {
        let depth = scales.depth(level);
        let fm = scales.features(level);
        let effective = match (retrieval, depth) {
            (Retrieval::ExhaustiveNoDepth, _) => Retrieval::ExhaustiveNoDepth,
            (r, Some(_)) => r,
            (_, None) => {
                warn!("no depth map: {retrieval:?} retrieval replaced by {missing:?}");
                match missing {
                    MissingDepth::ExhaustiveNoDepth => Retrieval::ExhaustiveNoDepth,
                    MissingDepth::Fallback => return Ok(Searcher::Disabled),
                }
            }
        };
        Ok(match effective {
            Retrieval::Database => {
                Searcher::Database(db.cloned().ok_or_else(|| Error::Config("database retrieval needs a database".into()))?)
            }
            Retrieval::Exhaustive => {
                Searcher::Exhaustive { index: ExhaustiveIndex::new(fm, depth, patch_side, grid)?, use_depth: true }
            }
            Retrieval::ExhaustiveNoDepth => {
                Searcher::Exhaustive { index: ExhaustiveIndex::new(fm, None, patch_side, grid)?, use_depth: false }
            }
        })
    }

    pub fn lookup(&self, query: &Descriptor, query_depth: f32, threshold: f64) -> RetrievalResult {
        match self {
            Searcher::Database(db) => retrieve_cousin(query, query_depth, db, threshold),
            Searcher::Exhaustive { index, use_depth } => {
                retrieve_exhaustive(query, query_depth, index, *use_depth, threshold)
            }
            Searcher::Disabled => RetrievalResult::fallback(),
        }
    }
}

/// Where the external backend looks for the map of `level` inside `dir`.
pub fn feature_file(dir: &Path, level: Level) -> PathBuf {
    dir.join(level.file_name())
}
