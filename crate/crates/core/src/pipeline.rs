//! End-to-end runs: super-resolution, database builds, degradation sets,
//! evaluation and ablations, each leaving a manifest next to its outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::SrConfig;
use crate::error::{Error, Result};
use crate::eval::{degrade, make_random_kernel, psnr_y, ssim_y, DegradationSpec, MetricReport, MetricRow};
use crate::image::{resize_bicubic_to, BlurKernel, Dihedral, Image, ScaleTag};
use crate::inference::{back_project, geometric_ensemble, sr_image, write_audit_csv, Downscale, TileAudit};
use crate::io::{read_kernel, read_png, write_kernel, write_png, DepthMap};
use crate::patchdb::{build_database, derive_scaled_database, DescriptorBackend, PatchDatabase};
use crate::scales::{FeatureSettings, Level, Retrieval, ScaleSpace, Searcher};
use crate::srnet::{Mode, Network};
use crate::trainer::{build_training_set, train, write_loss_csv, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTime {
    pub step: usize,
    pub stage: &'static str,
    pub seconds: f64,
}

/// One x2 pass of a (possibly cascaded) run.
pub struct StepRun {
    pub image: Image,
    pub audit: Vec<TileAudit>,
    pub train: TrainReport,
    pub triplets: usize,
    pub train_fallbacks: usize,
    pub lookups: usize,
    pub network: Network,
}

pub struct SrRun {
    pub image: Image,
    pub steps: Vec<StepRun>,
    pub timings: Vec<StageTime>,
}

impl SrRun {
    pub fn fallback_rate(&self) -> f64 {
        let tiles: usize = self.steps.iter().map(|s| s.audit.len()).sum();
        let falls: usize = self.steps.iter().map(|s| s.audit.iter().filter(|a| a.used_fallback).count()).sum();
        if tiles == 0 {
            0.0
        } else {
            falls as f64 / tiles as f64
        }
    }

    pub fn lookups(&self) -> usize {
        self.steps.iter().map(|s| s.lookups).sum()
    }
}

struct Timer<'a> {
    step: usize,
    log: &'a mut Vec<StageTime>,
}

impl Timer<'_> {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.log.push(StageTime { step: self.step, stage, seconds: t0.elapsed().as_secs_f64() });
        out
    }
}

fn searcher_for(cfg: &SrConfig, scales: &ScaleSpace, level: Level, db: Option<&PatchDatabase>) -> Result<Searcher> {
    if !cfg.mode.uses_cousin() {
        return Ok(Searcher::Disabled);
    }
    Searcher::build(cfg.retrieval, cfg.missing_depth, scales, level, db, cfg.patch_side, cfg.pool_grid)
}

fn down2_database(cfg: &SrConfig, scales: &ScaleSpace) -> Result<PatchDatabase> {
    build_database(
        scales.features(Level::Down2),
        &scales.depth_or_flat(Level::Down2)?,
        ScaleTag::Down2,
        &cfg.db_params(),
    )
}

/// Precomputed feature files only describe the original input.
fn derived_features(features: &FeatureSettings) -> FeatureSettings {
    if features.backend == DescriptorBackend::ExternalFile {
        warn!("external features cover the input only; derived images use the gradient backend");
        FeatureSettings { backend: DescriptorBackend::GradientPyramid, dir: None }
    } else {
        features.clone()
    }
}

fn run_x2(
    img: &Image,
    depth: Option<&DepthMap>,
    down: &Downscale,
    cfg: &SrConfig,
    features: &FeatureSettings,
    timer: &mut Timer,
) -> Result<StepRun> {
    let scales = timer.run("scales", || ScaleSpace::new(img, depth, features))?;
    let (db2, db4) = timer.run("database", || {
        let db2 = down2_database(cfg, &scales)?;
        let db4 = derive_scaled_database(&db2, scales.features(Level::Down4), cfg.pool_grid)?;
        Ok((db2, db4))
    })?;
    let tcfg = cfg.train_config();
    let (triplets, train_lookups) = timer.run("mining", || {
        let searcher4 = searcher_for(cfg, &scales, Level::Down4, Some(&db4))?;
        let triplets = build_training_set(&scales, &db2, &searcher4, &tcfg)?;
        let lookups = if matches!(searcher4, Searcher::Disabled) { 0 } else { triplets.len() };
        Ok((triplets, lookups))
    })?;
    let mut network = Network::new(cfg.net_config(img.channels()))?;
    let report = timer.run("training", || train(&mut network, &triplets, &tcfg))?;
    info!(
        "trained {} iterations on {} triplets, final lr {:e}",
        report.records.len(),
        triplets.len(),
        report.final_lr
    );

    let icfg = cfg.infer_config();
    let (first, image) = timer.run("inference", || {
        let searcher2 = searcher_for(cfg, &scales, Level::Down2, Some(&db2))?;
        let first = sr_image(&network, &scales, &searcher2, &icfg)?;
        let alt = derived_features(features);
        let image = geometric_ensemble(cfg.ensemble, |t| {
            if t == Dihedral::IDENTITY {
                return Ok(first.image.clone());
            }
            let depth_t = depth.map(|d| d.transformed(t));
            let scales_t = ScaleSpace::new(&img.transformed(t), depth_t.as_ref(), &alt)?;
            let db_t = match cfg.retrieval {
                Retrieval::Database if cfg.mode.uses_cousin() => Some(down2_database(cfg, &scales_t)?),
                _ => None,
            };
            let searcher_t = searcher_for(cfg, &scales_t, Level::Down2, db_t.as_ref())?;
            Ok(sr_image(&network, &scales_t, &searcher_t, &icfg)?.image)
        })?;
        Ok((first, image))
    })?;
    let image = timer.run("back-projection", || Ok(back_project(&image, img, down, cfg.bp_iters)?.clamped()))?;
    Ok(StepRun {
        image,
        lookups: train_lookups + first.lookups,
        audit: first.audit,
        train_fallbacks: triplets.iter().filter(|t| t.used_fallback).count(),
        triplets: triplets.len(),
        train: report,
        network,
    })
}

/// Super-resolves `img` by `cfg.scale`. Scales above two cascade x2 passes,
/// each retraining on the previous output, and finish with a bicubic resize
/// to the exact target when the scale is not a power of two.
pub fn super_resolve(img: &Image, depth: Option<&DepthMap>, kernel: Option<&BlurKernel>, cfg: &SrConfig) -> Result<SrRun> {
    cfg.validate()?;
    let mut timings = Vec::new();
    let mut steps = Vec::new();
    let mut cur = img.clone();
    let passes = usize::BITS - (cfg.scale - 1).leading_zeros();
    let features = cfg.feature_settings();
    for step in 0..passes as usize {
        let down = match kernel {
            Some(k) if step == 0 => Downscale::Kernel(k.clone()),
            _ => Downscale::Bicubic,
        };
        let settings = if step == 0 { features.clone() } else { derived_features(&features) };
        let mut timer = Timer { step, log: &mut timings };
        let run = run_x2(&cur, depth, &down, cfg, &settings, &mut timer)?;
        cur = run.image.clone();
        steps.push(run);
    }
    let (tw, th) = (cfg.scale * img.width(), cfg.scale * img.height());
    if (cur.width(), cur.height()) != (tw, th) {
        let f = tw as f64 / cur.width() as f64;
        cur = resize_bicubic_to(&cur, f, tw, th)?.clamped();
    }
    Ok(SrRun { image: cur, steps, timings })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn manifest(command: &str, config: Value, inputs: &[&Path], extra: Value) -> Result<Value> {
    let mut hashes = serde_json::Map::new();
    for p in inputs {
        hashes.insert(p.display().to_string(), Value::String(sha256_file(p)?));
    }
    let mut m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "inputs": hashes,
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut m, extra) {
        base.extend(more);
    }
    Ok(m)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Summary of an `sr` run written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SrArtifacts {
    pub image: PathBuf,
    pub manifest: PathBuf,
    pub fallback_rate: f64,
}

pub const DEFAULT_OUTPUT: &str = "rzsr-out";

/// Reads the inputs named in `cfg`, super-resolves and writes `sr.png`,
/// loss traces, optional audit logs and `manifest.json` into the output
/// directory.
pub fn run_sr_command(cfg: &SrConfig) -> Result<SrArtifacts> {
    cfg.validate()?;
    let image_path = cfg.image.as_deref().ok_or_else(|| Error::Usage("an input image is required".into()))?;
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    let img = read_png(image_path).map_err(|e| e.in_stage("load"))?;
    let depth = cfg.depth.as_deref().map(DepthMap::read).transpose().map_err(|e| e.in_stage("load"))?;
    let kernel = cfg.kernel.as_deref().map(read_kernel).transpose().map_err(|e| e.in_stage("load"))?;
    let run = super_resolve(&img, depth.as_ref(), kernel.as_ref(), cfg)?;

    create_dir(&out)?;
    let sr_path = out.join("sr.png");
    write_png(&sr_path, &run.image)?;
    let mut losses = Vec::new();
    let mut audits = Vec::new();
    for (i, step) in run.steps.iter().enumerate() {
        let suffix = if i == 0 { String::new() } else { format!("_step{}", i + 1) };
        let loss = out.join(format!("loss{suffix}.csv"));
        write_loss_csv(&loss, &step.train.records)?;
        losses.push(loss.display().to_string());
        if cfg.audit {
            let audit = out.join(format!("audit{suffix}.csv"));
            write_audit_csv(&audit, &step.audit)?;
            audits.push(audit.display().to_string());
        }
    }
    let mut inputs = vec![image_path];
    inputs.extend(cfg.depth.as_deref());
    inputs.extend(cfg.kernel.as_deref());
    let steps: Vec<Value> = run
        .steps
        .iter()
        .map(|s| {
            json!({
                "iterations": s.train.records.len(),
                "final_lr": s.train.final_lr,
                "converged": s.train.converged,
                "triplets": s.triplets,
                "training_fallbacks": s.triplets.min(s.train_fallbacks),
                "tiles": s.audit.len(),
                "tile_fallbacks": s.audit.iter().filter(|a| a.used_fallback).count(),
                "retrievals": s.lookups,
            })
        })
        .collect();
    let fallback_rate = run.fallback_rate();
    let m = manifest(
        "sr",
        serde_json::to_value(cfg).expect("config serializes"),
        &inputs,
        json!({
            "output": sr_path.display().to_string(),
            "output_size": [run.image.width(), run.image.height()],
            "seed": cfg.seed,
            "timings": run.timings,
            "fallback_rate": fallback_rate,
            "retrievals": run.lookups(),
            "loss_traces": losses,
            "audit_logs": audits,
            "steps": steps,
        }),
    )?;
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &m)?;
    Ok(SrArtifacts { image: sr_path, manifest: manifest_path, fallback_rate })
}

/// Which scale of the input `build-db` summarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DbLevel {
    Full,
    #[default]
    Down2,
    Down4,
}

/// Builds and saves the database of one scale of `cfg.image`.
pub fn build_db_command(cfg: &SrConfig, level: DbLevel, out: &Path) -> Result<PatchDatabase> {
    cfg.validate()?;
    let image_path = cfg.image.as_deref().ok_or_else(|| Error::Usage("an input image is required".into()))?;
    let img = read_png(image_path).map_err(|e| e.in_stage("load"))?;
    let depth = cfg.depth.as_deref().map(DepthMap::read).transpose().map_err(|e| e.in_stage("load"))?;
    let scales = ScaleSpace::new(&img, depth.as_ref(), &cfg.feature_settings()).map_err(|e| e.in_stage("scales"))?;
    let db = match level {
        DbLevel::Full => build_database(
            scales.features(Level::Full),
            &scales.depth_or_flat(Level::Full)?,
            ScaleTag::Full,
            &cfg.db_params(),
        ),
        DbLevel::Down2 => down2_database(cfg, &scales),
        DbLevel::Down4 => down2_database(cfg, &scales)
            .and_then(|db2| derive_scaled_database(&db2, scales.features(Level::Down4), cfg.pool_grid)),
    }
    .map_err(|e| e.in_stage("database"))?;
    db.save(out)?;
    let mut inputs = vec![image_path];
    inputs.extend(cfg.depth.as_deref());
    let m = manifest(
        "build-db",
        serde_json::to_value(cfg).expect("config serializes"),
        &inputs,
        json!({ "output": out.display().to_string(), "level": level, "entries": db.entries.len() }),
    )?;
    write_json(&out.with_extension("manifest.json"), &m)?;
    Ok(db)
}

/// PNG files of a directory in name order.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Degrades every PNG of `input` into `out`, saving kernels as
/// `<stem>.kernel`. Image `i` (name order) uses seed `spec.seed + i`.
pub fn degrade_command(input: &Path, out: &Path, spec: &DegradationSpec) -> Result<usize> {
    let files = list_pngs(input)?;
    create_dir(out)?;
    let mut records = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let img = read_png(path)?;
        let d = degrade(&img, spec, i as u64).map_err(|e| e.in_stage("degrade"))?;
        write_png(&out.join(file_name(path)), &d.lr)?;
        let kernel_file = match &d.kernel {
            Some(k) => {
                let kp = out.join(format!("{}.kernel", stem(path)));
                write_kernel(&kp, k)?;
                Some(file_name(&kp))
            }
            None => None,
        };
        records.push(json!({
            "file": file_name(path),
            "seed": d.seed,
            "kernel_params": d.params,
            "kernel_file": kernel_file,
        }));
    }
    let mut inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    inputs.extend(spec.kernel_file.as_deref());
    let m = manifest(
        "degrade",
        serde_json::to_value(spec).expect("spec serializes"),
        &inputs,
        json!({ "images": records }),
    )?;
    write_json(&out.join("manifest.json"), &m)?;
    Ok(files.len())
}

/// Scores every PNG of `sr_dir` against the same-named file in `hr_dir`.
pub fn eval_command(sr_dir: &Path, hr_dir: &Path, shave: usize, out: &Path) -> Result<MetricReport> {
    let files = list_pngs(sr_dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG files in {}", sr_dir.display())));
    }
    let mut rows = Vec::new();
    let mut inputs = Vec::new();
    for sr_path in &files {
        let hr_path = hr_dir.join(file_name(sr_path));
        if !hr_path.exists() {
            return Err(Error::Config(format!("no ground truth {} for {}", hr_path.display(), sr_path.display())));
        }
        let (sr, hr) = (read_png(sr_path)?, read_png(&hr_path)?);
        rows.push(MetricRow { file: file_name(sr_path), psnr_db: psnr_y(&sr, &hr, shave)?, ssim: ssim_y(&sr, &hr, shave)? });
        inputs.push(hr_path);
    }
    inputs.extend(files.iter().cloned());
    let config = json!({ "sr_dir": sr_dir.display().to_string(), "hr_dir": hr_dir.display().to_string(), "shave": shave });
    let report = MetricReport::new(rows, shave, config.clone());
    create_dir(out)?;
    report.write(out, "metrics")?;
    let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let m = manifest(
        "eval",
        config,
        &refs,
        json!({ "mean_psnr_db": fmt_finite(report.mean_psnr_db), "mean_ssim": report.mean_ssim }),
    )?;
    write_json(&out.join("manifest.json"), &m)?;
    Ok(report)
}

fn fmt_finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

/// Writes `count` random kernels `kernel_<seed>.kernel` for seeds
/// `seed..seed + count` and their parameters.
pub fn kernel_gen_command(seed: u64, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut paths = Vec::new();
    let mut records = Vec::new();
    for i in 0..count as u64 {
        let s = seed.wrapping_add(i);
        let (k, params) = make_random_kernel(s)?;
        let p = out.join(format!("kernel_{s}.kernel"));
        write_kernel(&p, &k)?;
        records.push(json!({ "file": file_name(&p), "seed": s, "params": params }));
        paths.push(p);
    }
    let m = manifest("kernel-gen", json!({ "seed": seed, "count": count }), &[], json!({ "kernels": records }))?;
    write_json(&out.join("manifest.json"), &m)?;
    Ok(paths)
}

/// One ablation variant's configuration change.
pub fn ablation_variants() -> [(&'static str, Mode, Retrieval); 4] {
    [
        ("reference-free", Mode::ReferenceFree, Retrieval::Database),
        ("single-scale", Mode::SingleScale, Retrieval::Database),
        ("exhaustive", Mode::Full, Retrieval::Exhaustive),
        ("database", Mode::Full, Retrieval::Database),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub seconds: f64,
    pub fallback_rate: f64,
}

/// Depth file for an image stem: `<stem>.dpt` or `<stem>.pgm`.
fn find_depth(dir: Option<&Path>, stem: &str) -> Option<PathBuf> {
    let dir = dir?;
    ["dpt", "pgm"].iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.exists())
}

/// Degrades each HR image of `input` by bicubic x`cfg.scale`, super-resolves
/// it under every ablation variant and reports mean PSNR, SSIM and runtime.
pub fn ablate_command(cfg: &SrConfig, input: &Path, depth_dir: Option<&Path>, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let files = list_pngs(input)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG files in {}", input.display())));
    }
    let spec = DegradationSpec { factor: cfg.scale, seed: cfg.seed, ..DegradationSpec::default() };
    let mut cases = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let hr = read_png(path)?;
        let lr = degrade(&hr, &spec, i as u64)?.lr;
        let depth = find_depth(depth_dir, &stem(path)).map(|p| DepthMap::read(&p)).transpose()?;
        cases.push((hr, lr, depth));
    }
    let mut rows = Vec::new();
    let mut per_image = Vec::new();
    for (name, mode, retrieval) in ablation_variants() {
        let vcfg = SrConfig { mode, retrieval, ..cfg.clone() };
        let (mut psnr, mut ssim, mut secs, mut fb) = (0.0, 0.0, 0.0, 0.0);
        for (path, (hr, lr, depth)) in files.iter().zip(&cases) {
            let t0 = Instant::now();
            let run = super_resolve(lr, depth.as_ref(), None, &vcfg).map_err(|e| e.in_stage("ablation"))?;
            let dt = t0.elapsed().as_secs_f64();
            let (p, s) = (psnr_y(&run.image, hr, cfg.scale)?, ssim_y(&run.image, hr, cfg.scale)?);
            info!("{name} {}: {p:.3} dB, ssim {s:.4}, {dt:.1} s", file_name(path));
            per_image.push(json!({ "variant": name, "file": file_name(path), "psnr_db": fmt_finite(p), "ssim": s, "seconds": dt }));
            psnr += p;
            ssim += s;
            secs += dt;
            fb += run.fallback_rate();
        }
        let n = cases.len() as f64;
        rows.push(AblationRow { variant: name.into(), psnr_db: psnr / n, ssim: ssim / n, seconds: secs / n, fallback_rate: fb / n });
    }
    create_dir(out)?;
    let mut csv = String::from("variant,psnr_db,ssim,seconds,fallback_rate\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.4},{:.6},{:.3},{:.4}\n", r.variant, r.psnr_db, r.ssim, r.seconds, r.fallback_rate));
    }
    let csv_path = out.join("ablation.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    write_json(&out.join("ablation.json"), &json!({ "rows": rows, "images": per_image }))?;
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let m = manifest("ablate", serde_json::to_value(cfg).expect("config serializes"), &refs, json!({}))?;
    write_json(&out.join("manifest.json"), &m)?;
    Ok(rows)
}
