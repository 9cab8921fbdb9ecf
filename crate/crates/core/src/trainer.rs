//! Training-triplet mining and the test-time training loop.

use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{extract_patch, resize_bicubic, window_origin, Dihedral, Image, Patch, ScaleTag};
use crate::patchdb::{candidate_centers, PatchDatabase, RetrievalResult};
use crate::scales::{Level, ScaleSpace, Searcher};
use crate::srnet::{Adam, Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub patch_side: usize,
    pub max_iters: usize,
    pub lr: f64,
    pub lr_drop: f64,
    pub min_lr: f64,
    pub augment: bool,
    pub check_every: usize,
    /// Checkpoints in the plateau fit.
    pub window: usize,
    /// Sons are topped up from the lattice below this count.
    pub min_triplets: usize,
    pub threshold: f64,
    pub pool_grid: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_side: 48,
            max_iters: 3000,
            lr: 1e-3,
            lr_drop: 10.0,
            min_lr: 1e-6,
            augment: true,
            check_every: 50,
            window: 10,
            min_triplets: 32,
            threshold: 0.9,
            pool_grid: 2,
            seed: 0,
        }
    }
}

/// LR son, HR father and HR cousin for one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    /// `M x M` patch of `I↓2`.
    pub son: Patch,
    /// The son's region of the bicubic x2 upsampled `I↓2`.
    pub son_up: Image,
    /// `2M x 2M` patch of `I` at twice the son's center.
    pub father: Patch,
    pub cousin: Image,
    /// Center of the cousin in `I↓2`, absent on fallback.
    pub cousin_center: Option<(usize, usize)>,
    pub retrieval: RetrievalResult,
    pub used_fallback: bool,
}

/// Bicubic x2 of a patch: the cousin used when retrieval fails.
pub fn fallback_cousin(son: &Image) -> Result<Image> {
    resize_bicubic(son, 2.0)
}

/// Son centers: the 1/2-scale medoids whose father fits in `I`, topped up
/// with evenly spaced lattice centers when fewer than `min_triplets`.
fn son_centers(scales: &ScaleSpace, db2: &PatchDatabase, cfg: &TrainConfig) -> Vec<(usize, usize)> {
    let m = cfg.patch_side;
    let (w, h) = (scales.full.width(), scales.full.height());
    let fits = |c: &(usize, usize)| window_origin((2 * c.0, 2 * c.1), 2 * m, w, h).is_some();
    let mut centers: Vec<(usize, usize)> = db2.entries.iter().map(|e| e.center).filter(fits).collect();
    if centers.len() < cfg.min_triplets {
        let pool: Vec<(usize, usize)> = candidate_centers(scales.down2.width(), scales.down2.height(), m, 2)
            .into_iter()
            .filter(|c| fits(c) && !centers.contains(c))
            .collect();
        let need = (cfg.min_triplets - centers.len()).min(pool.len());
        centers.extend((0..need).map(|i| pool[i * pool.len() / need]));
    }
    centers
}

/// Mines one triplet per son. Cousins come from `searcher`, which runs over
/// `I↓4`; a match at `y` materializes the `2M` window at `2y` in `I↓2`.
pub fn build_training_set(
    scales: &ScaleSpace,
    db2: &PatchDatabase,
    searcher: &Searcher,
    cfg: &TrainConfig,
) -> Result<Vec<Triplet>> {
    let m = cfg.patch_side;
    let centers = son_centers(scales, db2, cfg);
    if centers.is_empty() {
        return Err(Error::Config(format!(
            "image {}x{} too small for patch side {m}: no {}-pixel father fits; try a smaller patch side",
            scales.full.width(),
            scales.full.height(),
            2 * m
        )));
    }
    let up2 = resize_bicubic(&scales.down2, 2.0)?;
    let mut triplets = Vec::with_capacity(centers.len());
    for &c in &centers {
        let son = extract_patch(&scales.down2, ScaleTag::Down2, c, m)?;
        let father = extract_patch(&scales.full, ScaleTag::Full, (2 * c.0, 2 * c.1), 2 * m)?;
        let (ox, oy) = window_origin(c, m, scales.down2.width(), scales.down2.height()).expect("son fits");
        let son_up = up2.crop(2 * ox, 2 * oy, 2 * m, 2 * m)?;
        let query = match db2.entries.iter().find(|e| e.center == c) {
            Some(e) => e.descriptor.clone(),
            None => scales.descriptor(Level::Down2, c, m, cfg.pool_grid)?,
        };
        let retrieval = searcher.lookup(&query, scales.depth_at(Level::Down2, c), cfg.threshold);
        let cousin_center = retrieval
            .cousin_center()
            .map(|y| (2 * y.0, 2 * y.1))
            .filter(|&y2| window_origin(y2, 2 * m, scales.down2.width(), scales.down2.height()).is_some());
        let cousin = match cousin_center {
            Some(y2) => extract_patch(&scales.down2, ScaleTag::Down2, y2, 2 * m)?.pixels,
            None => fallback_cousin(&son.pixels)?,
        };
        triplets.push(Triplet {
            son,
            son_up,
            father,
            cousin,
            cousin_center,
            retrieval,
            used_fallback: cousin_center.is_none(),
        });
    }
    debug!(
        "{} triplets, {} with fallback cousins",
        triplets.len(),
        triplets.iter().filter(|t| t.used_fallback).count()
    );
    Ok(triplets)
}

/// Applies dihedral transform `id` to every patch of the triplet.
pub fn augment_triplet(t: &Triplet, id: u8) -> Result<Triplet> {
    let d = Dihedral::new(id)?;
    let mut out = t.clone();
    out.son.pixels = t.son.pixels.transformed(d);
    out.son_up = t.son_up.transformed(d);
    out.father.pixels = t.father.pixels.transformed(d);
    out.cousin = t.cousin.transformed(d);
    Ok(out)
}

/// Plateau-driven learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub drop: f64,
    pub min_lr: f64,
    pub window: usize,
    /// Mean reconstruction error at each checkpoint.
    pub history: Vec<f64>,
    since_drop: usize,
}

impl LrSchedule {
    pub fn new(lr: f64, drop: f64, min_lr: f64, window: usize) -> Self {
        LrSchedule { lr, drop, min_lr, window: window.max(3), history: Vec::new(), since_drop: 0 }
    }

    /// Records a checkpoint. Once `window` checkpoints have accumulated since
    /// the last drop, a line is fitted to them; the rate drops when the slope
    /// is within one standard error of zero. Returns whether it dropped.
    pub fn record(&mut self, error: f64) -> bool {
        self.history.push(error);
        self.since_drop += 1;
        if self.since_drop < self.window {
            return false;
        }
        let ys = &self.history[self.history.len() - self.window..];
        let (slope, se) = line_fit(ys);
        if slope.abs() <= se {
            self.lr /= self.drop;
            self.since_drop = 0;
            true
        } else {
            false
        }
    }

    pub fn finished(&self) -> bool {
        self.lr < self.min_lr
    }
}

/// Least-squares slope of `ys` against `0..n` and its standard error.
pub fn line_fit(ys: &[f64]) -> (f64, f64) {
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = (0..ys.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    let sxy: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let sse: f64 = ys.iter().enumerate().map(|(i, y)| (y - ym - slope * (i as f64 - xm)).powi(2)).sum();
    (slope, (sse / (n - 2.0) / sxx).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub triplet_id: usize,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    pub final_lr: f64,
    /// Whether the rate fell below the floor before `max_iters`.
    pub converged: bool,
}

/// Mean squared error and its gradient with respect to `out`.
pub fn mse_with_grad(out: &Tensor, target: &Tensor) -> (f64, Tensor) {
    let n = out.data.len() as f64;
    let mut grad = out.clone();
    let mut loss = 0.0;
    for (g, t) in grad.data.iter_mut().zip(&target.data) {
        let d = *g - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    (loss / n, grad)
}

/// Trains `net` in place on uniformly sampled (and optionally augmented) triplets.
pub fn train(net: &mut Network, triplets: &[Triplet], cfg: &TrainConfig) -> Result<TrainReport> {
    if triplets.is_empty() {
        return Err(Error::Config("no training triplets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut schedule = LrSchedule::new(cfg.lr, cfg.lr_drop, cfg.min_lr, cfg.window);
    let mut records = Vec::with_capacity(cfg.max_iters);
    let use_cousin = net.mode().uses_cousin();
    let check_every = cfg.check_every.max(1);
    for iteration in 0..cfg.max_iters {
        let id = rng.random_range(0..triplets.len());
        let t = if cfg.augment {
            augment_triplet(&triplets[id], rng.random_range(0..8u8))?
        } else {
            triplets[id].clone()
        };
        let son_up = Tensor::from_image(&t.son_up);
        let cousin = Tensor::from_image(&t.cousin);
        let (out, cache) = net.forward(&son_up, use_cousin.then_some(&cousin))?;
        let (loss, dout) = mse_with_grad(&out, &Tensor::from_image(&t.father.pixels));
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, lr: schedule.lr, triplet: id, loss });
        }
        records.push(LossRecord { iteration, loss, lr: schedule.lr, triplet_id: id, used_fallback: t.used_fallback });
        let grad = net.backward(&cache, &dout)?;
        adam.update(net.params_mut(), grad.params(), schedule.lr);

        if (iteration + 1) % check_every == 0 {
            let recent = &records[records.len() - check_every..];
            let mean = recent.iter().map(|r| r.loss).sum::<f64>() / check_every as f64;
            if schedule.record(mean) {
                info!("iteration {}: plateau at {mean:.3e}, lr -> {:e}", iteration + 1, schedule.lr);
            }
            if schedule.finished() {
                break;
            }
        }
    }
    Ok(TrainReport { final_lr: schedule.lr, converged: schedule.finished(), records })
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut text = String::from("iteration,loss,lr,triplet_id,used_fallback\n");
    for r in records {
        text.push_str(&format!("{},{:e},{:e},{},{}\n", r.iteration, r.loss, r.lr, r.triplet_id, r.used_fallback));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::DepthMap;
    use crate::patchdb::{build_database, derive_scaled_database, DbParams};
    use crate::scales::{FeatureSettings, MissingDepth, Retrieval};
    use crate::srnet::{Mode, NetConfig};

    fn checker(w: usize, h: usize, cell: usize) -> Image {
        Image::from_fn(w, h, 3, |c, x, y| if ((x / cell) + (y / cell)).is_multiple_of(2) { 0.9 - 0.1 * c as f64 } else { 0.1 })
    }

    fn setup(img: &Image, m: usize) -> (ScaleSpace, PatchDatabase, Searcher) {
        let depth = DepthMap::from_normalized(Image::from_fn(img.width(), img.height(), 1, |_, _, y| {
            y as f64 / (img.height() - 1) as f64
        }))
        .unwrap();
        let scales = ScaleSpace::new(img, Some(&depth), &FeatureSettings::default()).unwrap();
        let params = DbParams { patch_side: m, ..DbParams::default() };
        let db2 = build_database(scales.features(Level::Down2), scales.depth(Level::Down2).unwrap(), ScaleTag::Down2, &params).unwrap();
        let db4 = derive_scaled_database(&db2, scales.features(Level::Down4), params.pool_grid).unwrap();
        let searcher = Searcher::build(Retrieval::Database, MissingDepth::default(), &scales, Level::Down4, Some(&db4), m, 2).unwrap();
        (scales, db2, searcher)
    }

    #[test]
    fn triplet_coordinates_and_fallback_purity() {
        let img = checker(96, 96, 3);
        let (scales, db2, searcher) = setup(&img, 12);
        let cfg = TrainConfig { patch_side: 12, ..TrainConfig::default() };
        let triplets = build_training_set(&scales, &db2, &searcher, &cfg).unwrap();
        assert!(triplets.len() >= 32);
        for t in &triplets {
            assert_eq!(t.father.center, (2 * t.son.center.0, 2 * t.son.center.1));
            assert_eq!(t.father.side, 2 * t.son.side);
            assert_eq!(t.father, extract_patch(&img, ScaleTag::Full, t.father.center, 24).unwrap());
            assert_eq!((t.cousin.width(), t.cousin.height()), (24, 24));
            if t.used_fallback {
                assert_eq!(t.cousin, resize_bicubic(&t.son.pixels, 2.0).unwrap());
            } else {
                let y = t.cousin_center.unwrap();
                assert_eq!(t.cousin, extract_patch(&scales.down2, ScaleTag::Down2, y, 24).unwrap().pixels);
            }
        }
    }

    #[test]
    fn constant_image_gives_only_fallbacks() {
        let img = Image::filled(64, 64, 3, 0.4);
        let (scales, db2, searcher) = setup(&img, 8);
        let triplets = build_training_set(&scales, &db2, &searcher, &TrainConfig { patch_side: 8, ..TrainConfig::default() }).unwrap();
        assert!(!triplets.is_empty());
        assert!(triplets.iter().all(|t| t.used_fallback));
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = checker(40, 40, 2);
        let (scales, db2, searcher) = setup(&img, 24);
        let err = build_training_set(&scales, &db2, &searcher, &TrainConfig { patch_side: 24, ..TrainConfig::default() });
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn augmentation_flips_and_inverts() {
        let img = checker(64, 64, 3);
        let (scales, db2, searcher) = setup(&img, 8);
        let t = &build_training_set(&scales, &db2, &searcher, &TrainConfig { patch_side: 8, ..TrainConfig::default() }).unwrap()[0];
        assert_eq!(&augment_triplet(t, 0).unwrap(), t);
        let twice = augment_triplet(&augment_triplet(t, 2).unwrap(), 2).unwrap();
        assert_eq!(&twice, t);
        let flipped = augment_triplet(t, 4).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(flipped.son.pixels.get(c, x, y), t.son.pixels.get(c, 7 - x, y));
                }
            }
        }
        assert!(augment_triplet(t, 8).is_err());
    }

    #[test]
    fn line_fit_reference() {
        let (slope, se) = line_fit(&[1.0, 3.0, 5.0, 7.0]);
        assert!((slope - 2.0).abs() < 1e-12 && se < 1e-12);
        // residuals (0.1, -0.1, -0.1, 0.1) around slope 1
        let (slope, se) = line_fit(&[0.1, 0.9, 1.9, 3.1]);
        assert!((slope - 1.0).abs() < 1e-12);
        assert!((se - (0.04f64 / 2.0 / 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn schedule_drops_by_factor_on_plateau() {
        let mut s = LrSchedule::new(1e-3, 10.0, 1e-6, 10);
        for i in 0..9 {
            assert!(!s.record(1.0 - 0.01 * i as f64));
        }
        // steady decrease: no drop
        assert!(!s.record(0.91));
        let mut dropped = false;
        for _ in 0..10 {
            dropped |= s.record(0.5);
        }
        assert!(dropped);
        assert!((s.lr - 1e-4).abs() < 1e-18);
    }

    fn identity_triplets(n: usize) -> Vec<Triplet> {
        let img = checker(32, 32, 2);
        (0..n)
            .map(|i| {
                let son = extract_patch(&img, ScaleTag::Down2, (8 + 2 * i, 8), 8).unwrap();
                let son_up = resize_bicubic(&son.pixels, 2.0).unwrap();
                let father = Patch { scale: ScaleTag::Full, center: (16 + 4 * i, 16), side: 16, pixels: son_up.clone() };
                Triplet {
                    cousin: son_up.clone(),
                    son,
                    son_up,
                    father,
                    cousin_center: None,
                    retrieval: RetrievalResult::fallback(),
                    used_fallback: true,
                }
            })
            .collect()
    }

    #[test]
    fn zero_residual_target_keeps_zero_loss_and_stops_early() {
        let mut net = Network::new(NetConfig { width: 4, ..NetConfig::default() }).unwrap();
        let cfg = TrainConfig { max_iters: 1000, check_every: 5, ..TrainConfig::default() };
        let report = train(&mut net, &identity_triplets(3), &cfg).unwrap();
        assert!(report.records.iter().all(|r| r.loss == 0.0));
        assert!(report.converged);
        assert_eq!(report.records.len(), 4 * 10 * 5);
        let lrs: Vec<f64> = report.records.iter().map(|r| r.lr).collect();
        for w in lrs.windows(2) {
            assert!(w[1] == w[0] || (w[0] / w[1] - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let img = checker(64, 64, 3);
        let (scales, db2, searcher) = setup(&img, 8);
        let cfg = TrainConfig { patch_side: 8, max_iters: 200, seed: 5, ..TrainConfig::default() };
        let triplets = build_training_set(&scales, &db2, &searcher, &cfg).unwrap();
        let run = || {
            let mut net = Network::new(NetConfig { width: 8, seed: 1, ..NetConfig::default() }).unwrap();
            train(&mut net, &triplets, &cfg).unwrap()
        };
        let a = run();
        let smooth = |r: &[LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
        assert!(smooth(&a.records[150..]) < smooth(&a.records[..50]));
        assert_eq!(a, run());
    }

    #[test]
    fn reference_free_training_runs() {
        let mut net = Network::new(NetConfig { width: 4, mode: Mode::ReferenceFree, ..NetConfig::default() }).unwrap();
        let report = train(&mut net, &identity_triplets(2), &TrainConfig { max_iters: 3, ..TrainConfig::default() }).unwrap();
        assert_eq!(report.records.len(), 3);
    }

    #[test]
    fn loss_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rec = LossRecord { iteration: 0, loss: 0.5, lr: 1e-3, triplet_id: 2, used_fallback: true };
        write_loss_csv(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iteration,loss,lr,triplet_id,used_fallback\n0,5e-1,1e-3,2,true\n");
    }
}
