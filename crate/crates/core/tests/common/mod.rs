//! Synthetic images shared by the integration tests.
#![allow(dead_code)]

use rzsr::image::Image;
use rzsr::io::DepthMap;

/// Renders a two-colour pattern with 4x4 supersampling.
fn render(size: usize, a: [f64; 3], b: [f64; 3], inside: impl Fn(f64, f64) -> bool) -> Image {
    Image::from_fn(size, size, 3, |c, x, y| {
        let mut hits = 0;
        for sy in 0..4 {
            for sx in 0..4 {
                let (u, v) = (x as f64 + (sx as f64 + 0.5) / 4.0, y as f64 + (sy as f64 + 0.5) / 4.0);
                hits += inside(u, v) as usize;
            }
        }
        let t = hits as f64 / 16.0;
        a[c] + (b[c] - a[c]) * t
    })
}

fn near(v: f64, period: f64, half_width: f64) -> bool {
    let r = v.rem_euclid(period);
    r.min(period - r) < half_width
}

pub fn bricks(size: usize) -> Image {
    render(size, [0.70, 0.30, 0.22], [0.88, 0.86, 0.80], |x, y| {
        let shift = if (y / 10.0).floor() as i64 % 2 == 0 { 0.0 } else { 9.0 };
        near(y, 10.0, 1.0) || near(x + shift, 18.0, 1.0)
    })
}

pub fn grid(size: usize) -> Image {
    render(size, [0.15, 0.35, 0.60], [0.95, 0.95, 0.90], |x, y| near(x, 12.0, 0.8) || near(y, 12.0, 0.8))
}

pub fn checker(size: usize) -> Image {
    render(size, [0.10, 0.10, 0.12], [0.90, 0.85, 0.70], |x, y| {
        ((x / 7.0).floor() as i64 + (y / 7.0).floor() as i64).rem_euclid(2) == 0
    })
}

pub fn dots(size: usize) -> Image {
    render(size, [0.92, 0.90, 0.55], [0.25, 0.10, 0.40], |x, y| {
        let (cx, cy) = (x.rem_euclid(11.0) - 5.5, y.rem_euclid(11.0) - 5.5);
        cx * cx + cy * cy < 3.2 * 3.2
    })
}

pub fn stripes(size: usize) -> Image {
    render(size, [0.20, 0.55, 0.30], [0.95, 0.92, 0.85], |x, y| near((x + y) / std::f64::consts::SQRT_2, 9.0, 2.0))
}

/// The five-image desk suite, 128x128.
pub fn suite() -> Vec<(&'static str, Image)> {
    vec![
        ("bricks", bricks(128)),
        ("grid", grid(128)),
        ("checker", checker(128)),
        ("dots", dots(128)),
        ("stripes", stripes(128)),
    ]
}

/// Depth rising linearly from top (near) to bottom (far).
pub fn ramp_depth(w: usize, h: usize) -> DepthMap {
    DepthMap::from_raw(w, h, (0..w * h).map(|i| (i / w) as f64 / h as f64).collect()).unwrap()
}
