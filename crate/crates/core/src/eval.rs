//! Degradation protocols and Y-channel quality metrics.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{downsample_with_kernel, luma, resize_bicubic, BlurKernel, Image};
use crate::io::read_kernel;

pub const KERNEL_SIDE: usize = 11;
pub const LAMBDA_RANGE: (f64, f64) = (0.6, 5.0);

/// Axis standard deviations and rotation of an anisotropic Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: f64,
}

impl KernelParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        KernelParams {
            lambda1: rng.random_range(LAMBDA_RANGE.0..=LAMBDA_RANGE.1),
            lambda2: rng.random_range(LAMBDA_RANGE.0..=LAMBDA_RANGE.1),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    /// Samples `exp(-x^T S^-1 x / 2)` with `S = R diag(l1^2, l2^2) R^T` on a
    /// centered `side x side` grid and normalizes it.
    pub fn kernel(&self, side: usize) -> Result<BlurKernel> {
        if !(LAMBDA_RANGE.0..=LAMBDA_RANGE.1).contains(&self.lambda1)
            || !(LAMBDA_RANGE.0..=LAMBDA_RANGE.1).contains(&self.lambda2)
        {
            return Err(Error::Config(format!("kernel widths outside {LAMBDA_RANGE:?}")));
        }
        let (s, c) = self.theta.sin_cos();
        let (a, b) = (1.0 / self.lambda1.powi(2), 1.0 / self.lambda2.powi(2));
        // inverse covariance R diag(a, b) R^T
        let (ixx, ixy, iyy) = (a * c * c + b * s * s, (a - b) * c * s, a * s * s + b * c * c);
        let half = (side / 2) as f64;
        let mut w = Vec::with_capacity(side * side);
        for ky in 0..side {
            for kx in 0..side {
                let (x, y) = (kx as f64 - half, ky as f64 - half);
                w.push((-0.5 * (ixx * x * x + 2.0 * ixy * x * y + iyy * y * y)).exp());
            }
        }
        BlurKernel::new(side, w)
    }
}

/// Draws kernel parameters from `seed` and builds the 11x11 kernel.
pub fn make_random_kernel(seed: u64) -> Result<(BlurKernel, KernelParams)> {
    let params = KernelParams::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((params.kernel(KERNEL_SIDE)?, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradationMode {
    #[default]
    Bicubic,
    RandomKernel,
    FileKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationSpec {
    pub mode: DegradationMode,
    pub factor: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise; 0 disables it.
    pub noise_sigma: f64,
    pub kernel_file: Option<PathBuf>,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec { mode: DegradationMode::Bicubic, factor: 2, seed: 0, noise_sigma: 0.0, kernel_file: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub lr: Image,
    pub kernel: Option<BlurKernel>,
    pub params: Option<KernelParams>,
    /// Seed actually used for this image.
    pub seed: u64,
}

/// Degrades one image; `index` decorrelates the draws of images in a set.
pub fn degrade(img: &Image, spec: &DegradationSpec, index: u64) -> Result<Degraded> {
    if spec.factor < 1 {
        return Err(Error::Config("degradation factor must be >= 1".into()));
    }
    let seed = spec.seed.wrapping_add(index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lr, kernel, params) = match spec.mode {
        DegradationMode::Bicubic => (resize_bicubic(img, 1.0 / spec.factor as f64)?, None, None),
        DegradationMode::RandomKernel => {
            let params = KernelParams::sample(&mut rng);
            let k = params.kernel(KERNEL_SIDE)?;
            (downsample_with_kernel(img, &k, spec.factor)?, Some(k), Some(params))
        }
        DegradationMode::FileKernel => {
            let path = spec
                .kernel_file
                .as_deref()
                .ok_or_else(|| Error::Config("file-kernel degradation needs a kernel file".into()))?;
            let k = read_kernel(path)?;
            (downsample_with_kernel(img, &k, spec.factor)?, Some(k), None)
        }
    };
    let lr = if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let noisy: Vec<f64> = lr.data().iter().map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0)).collect();
        Image::from_vec(lr.width(), lr.height(), lr.channels(), noisy)?
    } else {
        lr
    };
    Ok(Degraded { lr, kernel, params, seed })
}

fn shaved_luma(a: &Image, b: &Image, shave: usize) -> Result<(Image, Image)> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    if a.width() <= 2 * shave || a.height() <= 2 * shave {
        return Err(Error::Degenerate(format!("image smaller than the {shave}-pixel border shave")));
    }
    let (w, h) = (a.width() - 2 * shave, a.height() - 2 * shave);
    Ok((luma(a)?.crop(shave, shave, w, h)?, luma(b)?.crop(shave, shave, w, h)?))
}

/// PSNR of the Y channel on the `[0, 1]` scale after shaving `shave` border
/// pixels; identical inputs give `+inf`.
pub fn psnr_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    let (ya, yb) = shaved_luma(a, b, shave)?;
    let mse = ya.data().iter().zip(yb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ya.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Valid-mode separable filtering with a normalized 1-D Gaussian.
fn gaussian_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of the Y channel over valid 11x11 Gaussian windows (sigma 1.5).
pub fn ssim_y(a: &Image, b: &Image, shave: usize) -> Result<f64> {
    let (ya, yb) = shaved_luma(a, b, shave)?;
    let (w, h) = (ya.width(), ya.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Degenerate(format!("{w}x{h} is smaller than the SSIM window")));
    }
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (pa, pb) = (ya.data(), yb.data());
    let (mu_a, ow, oh) = gaussian_valid(pa, w, h, &taps);
    let (mu_b, ..) = gaussian_valid(pb, w, h, &taps);
    let (saa, ..) = gaussian_valid(&prod(pa, pa), w, h, &taps);
    let (sbb, ..) = gaussian_valid(&prod(pb, pb), w, h, &taps);
    let (sab, ..) = gaussian_valid(&prod(pa, pb), w, h, &taps);
    let mut sum = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(sum / (ow * oh) as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "inf".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub file: String,
    #[serde(serialize_with = "ser_db")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    #[serde(serialize_with = "ser_db")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub shave: usize,
    pub config: serde_json::Value,
}

impl MetricReport {
    /// Rows are sorted by file name.
    pub fn new(mut rows: Vec<MetricRow>, shave: usize, config: serde_json::Value) -> Self {
        rows.sort_by(|a, b| a.file.cmp(&b.file));
        let n = rows.len().max(1) as f64;
        let mean_psnr_db = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        MetricReport { rows, mean_psnr_db, mean_ssim, shave, config }
    }

    pub fn to_csv(&self) -> String {
        let mut text = String::from("filename,psnr_db,ssim\n");
        for r in &self.rows {
            text.push_str(&format!("{},{},{:.6}\n", r.file, fmt_db(r.psnr_db), r.ssim));
        }
        text
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn gray(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> Image {
        Image::from_fn(w, h, 1, |_, x, y| f(x, y))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = gray(20, 20, |x, y| 0.3 + 0.01 * ((x + y) % 5) as f64);
        assert_eq!(psnr_y(&a, &a, 2).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr_y(&a, &b, 2).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr_y(&a, &Image::new(20, 21, 1), 0), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_matches_independent_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Image::from_fn(17, 13, 3, |_, _, _| rng.random::<f64>());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Image::from_fn(17, 13, 3, |_, _, _| rng.random::<f64>());
        // Y by the studio-range formula, cropped by two, written out by hand
        let y = |img: &Image, x: usize, yy: usize| {
            (16.0 + 65.481 * img.get(0, x, yy) + 128.553 * img.get(1, x, yy) + 24.966 * img.get(2, x, yy)) / 255.0
        };
        let mut se = 0.0;
        for yy in 2..11 {
            for x in 2..15 {
                se += (y(&a, x, yy) - y(&b, x, yy)).powi(2);
            }
        }
        let expect = 10.0 * (1.0 / (se / (9.0 * 13.0))).log10();
        assert!((psnr_y(&a, &b, 2).unwrap() - expect).abs() < 1e-4);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = gray(24, 24, |x, y| ((x * 3 + y * 7) % 11) as f64 / 11.0);
        assert_eq!(ssim_y(&a, &a, 2).unwrap(), 1.0);
        let c = gray(20, 20, |_, _| 0.2);
        let d = gray(20, 20, |_, _| 0.7);
        let expect = (2.0 * 0.2 * 0.7 + SSIM_C1) / (0.2f64 * 0.2 + 0.7 * 0.7 + SSIM_C1);
        assert!((ssim_y(&c, &d, 2).unwrap() - expect).abs() < 1e-4);
        assert!(matches!(ssim_y(&c, &d, 5), Err(Error::Degenerate(_))));
    }

    #[test]
    fn kernel_shape_and_moments() {
        let iso = KernelParams { lambda1: 2.0, lambda2: 2.0, theta: 0.0 }.kernel(11).unwrap();
        let iso_rot = KernelParams { lambda1: 2.0, lambda2: 2.0, theta: 1.1 }.kernel(11).unwrap();
        for (a, b) in iso.weights().iter().zip(iso_rot.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
        let k = KernelParams { lambda1: 5.0, lambda2: 0.6, theta: 0.0 }.kernel(11).unwrap();
        let (mut vx, mut vy) = (0.0, 0.0);
        for ky in 0..11 {
            for kx in 0..11 {
                vx += k.at(kx, ky) * (kx as f64 - 5.0).powi(2);
                vy += k.at(kx, ky) * (ky as f64 - 5.0).powi(2);
            }
        }
        // theta = 0 separates into two truncated 1-D Gaussians
        let moment = |s: f64| {
            let w: Vec<f64> = (-5..=5).map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp()).collect();
            (-5..=5).zip(&w).map(|(i, wi)| wi * (i * i) as f64).sum::<f64>() / w.iter().sum::<f64>()
        };
        assert!(vx > vy);
        assert!((vx - moment(5.0)).abs() < 1e-9);
        assert!((vy - moment(0.6)).abs() < 1e-9);
    }

    #[test]
    fn random_kernels_normalized_and_reproducible() {
        for seed in 0..1000 {
            let (k, p) = make_random_kernel(seed).unwrap();
            assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((0.0..std::f64::consts::PI).contains(&p.theta));
        }
        assert_eq!(make_random_kernel(7).unwrap(), make_random_kernel(7).unwrap());
    }

    #[test]
    fn degradation_modes() {
        let img = Image::from_fn(32, 30, 3, |c, x, y| ((x + 2 * y + c) % 9) as f64 / 9.0);
        let bic = degrade(&img, &DegradationSpec::default(), 0).unwrap();
        assert_eq!(bic.lr, resize_bicubic(&img, 0.5).unwrap());
        let spec = DegradationSpec { mode: DegradationMode::RandomKernel, seed: 11, ..DegradationSpec::default() };
        let a = degrade(&img, &spec, 3).unwrap();
        let b = degrade(&img, &spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.seed, 14);
        assert_eq!((a.lr.width(), a.lr.height()), (16, 15));
        let flat = Image::filled(20, 20, 3, 0.25);
        let lr = degrade(&flat, &spec, 0).unwrap().lr;
        assert!(lr.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        let missing = DegradationSpec { mode: DegradationMode::FileKernel, kernel_file: Some("/nonexistent/k.txt".into()), ..DegradationSpec::default() };
        assert!(matches!(degrade(&img, &missing, 0), Err(Error::Io { .. })));
    }

    #[test]
    fn report_formats_infinity() {
        let rows = vec![
            MetricRow { file: "b.png".into(), psnr_db: 30.0, ssim: 0.9 },
            MetricRow { file: "a.png".into(), psnr_db: f64::INFINITY, ssim: 1.0 },
        ];
        let r = MetricReport::new(rows, 2, serde_json::json!({}));
        assert_eq!(r.to_csv(), "filename,psnr_db,ssim\na.png,inf,1.000000\nb.png,30.0000,0.900000\n");
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["rows"][0]["psnr_db"], "inf");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ssim_symmetric_and_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gray(16, 16, |_, _| rng.random::<f64>());
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let b = gray(16, 16, |_, _| rng.random::<f64>());
            let ab = ssim_y(&a, &b, 0).unwrap();
            let ba = ssim_y(&b, &a, 0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn psnr_invariant_to_shared_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let va: Vec<f64> = (0..64).map(|_| rng.random()).collect();
            let vb: Vec<f64> = (0..64).map(|_| rng.random()).collect();
            let mut order: Vec<usize> = (0..64).collect();
            order.reverse();
            order.rotate_left((seed % 64) as usize);
            let a = Image::from_vec(8, 8, 1, va.clone()).unwrap();
            let b = Image::from_vec(8, 8, 1, vb.clone()).unwrap();
            let pa = Image::from_vec(8, 8, 1, order.iter().map(|&i| va[i]).collect()).unwrap();
            let pb = Image::from_vec(8, 8, 1, order.iter().map(|&i| vb[i]).collect()).unwrap();
            prop_assert!((psnr_y(&a, &b, 0).unwrap() - psnr_y(&pa, &pb, 0).unwrap()).abs() < 1e-9);
        }
    }
}
