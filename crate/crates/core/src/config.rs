//! Run configuration: TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferConfig;
use crate::patchdb::{DbParams, DescriptorBackend};
use crate::scales::{FeatureSettings, MissingDepth, Retrieval};
use crate::srnet::{Mode, NetConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    pub scale: usize,
    /// Number of depth bins.
    pub depth_bins: usize,
    /// Retrieval distance threshold.
    pub threshold: f64,
    pub patch_side: usize,
    /// Inference tile stride.
    pub stride: usize,
    pub k_divisor: usize,
    pub db_stride: usize,
    pub pool_grid: usize,
    pub mode: Mode,
    pub retrieval: Retrieval,
    pub missing_depth: MissingDepth,
    pub descriptor: DescriptorBackend,
    pub ensemble: bool,
    pub bp_iters: usize,
    pub seed: u64,
    pub width: usize,
    pub son_skips: bool,
    pub lr: f64,
    pub max_iters: usize,
    pub check_every: usize,
    pub augment: bool,
    pub min_triplets: usize,
    pub audit: bool,
    pub image: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub kernel: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            scale: 2,
            depth_bins: 5,
            threshold: 0.9,
            patch_side: 48,
            stride: 4,
            k_divisor: 100,
            db_stride: 2,
            pool_grid: 2,
            mode: Mode::Full,
            retrieval: Retrieval::Database,
            missing_depth: MissingDepth::ExhaustiveNoDepth,
            descriptor: DescriptorBackend::GradientPyramid,
            ensemble: false,
            bp_iters: 8,
            seed: 0,
            width: 128,
            son_skips: true,
            lr: 1e-3,
            max_iters: 3000,
            check_every: 50,
            augment: true,
            min_triplets: 32,
            audit: false,
            image: None,
            depth: None,
            kernel: None,
            features: None,
            output: None,
        }
    }
}

impl SrConfig {
    pub fn from_toml(text: &str) -> Result<SrConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<SrConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.scale < 2 {
            return fail(format!("scale {} must be an integer >= 2", self.scale));
        }
        if self.patch_side < 2 || self.patch_side % 2 == 1 {
            return fail(format!("patch side {} must be even", self.patch_side));
        }
        if self.depth_bins == 0 || self.k_divisor == 0 || self.stride == 0 || self.pool_grid == 0 {
            return fail("depth bins, k divisor, stride and pool grid must be positive".into());
        }
        if self.db_stride == 0 || self.db_stride % 2 == 1 {
            return fail(format!("database stride {} must be even", self.db_stride));
        }
        if !(self.threshold >= 0.0) {
            return fail(format!("threshold {} must be >= 0", self.threshold));
        }
        if !(self.lr > 0.0) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if self.width < 2 || self.width % 2 == 1 {
            return fail(format!("network width {} must be even", self.width));
        }
        Ok(())
    }

    pub fn db_params(&self) -> DbParams {
        DbParams {
            patch_side: self.patch_side,
            stride: self.db_stride,
            depth_bins: self.depth_bins,
            k_divisor: self.k_divisor,
            pool_grid: self.pool_grid,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            patch_side: self.patch_side,
            max_iters: self.max_iters,
            lr: self.lr,
            augment: self.augment,
            check_every: self.check_every,
            min_triplets: self.min_triplets,
            threshold: self.threshold,
            pool_grid: self.pool_grid,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig { patch_side: self.patch_side, stride: self.stride, threshold: self.threshold, pool_grid: self.pool_grid }
    }

    pub fn net_config(&self, channels: usize) -> NetConfig {
        NetConfig { width: self.width, channels, mode: self.mode, son_skips: self.son_skips, seed: self.seed }
    }

    pub fn feature_settings(&self) -> FeatureSettings {
        FeatureSettings { backend: self.descriptor, dir: self.features.clone() }
    }
}
