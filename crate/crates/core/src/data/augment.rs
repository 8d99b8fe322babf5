use rand::Rng;
use serde::{Deserialize, Serialize};

/// Training-time augmentation: horizontal flip, rotation, and an affine
/// (translation + shear) warp. Resampling is bilinear with reflected
/// borders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub hflip_prob: f64,
    /// Rotation drawn uniformly from [-rotation_degrees, rotation_degrees].
    pub rotation_degrees: f64,
    /// Max translation as a fraction of width/height.
    pub translate: f64,
    /// Max x-shear angle in degrees.
    pub shear_degrees: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: false,
            hflip_prob: 0.5,
            rotation_degrees: 15.0,
            translate: 0.1,
            shear_degrees: 10.0,
        }
    }
}

impl AugmentPolicy {
    pub fn flip_only() -> Self {
        Self {
            enabled: true,
            hflip_prob: 1.0,
            rotation_degrees: 0.0,
            translate: 0.0,
            shear_degrees: 0.0,
        }
    }
}

fn mirror(img: &[f32], (h, w): (usize, usize)) -> Vec<f32> {
    let mut out = vec![0f32; img.len()];
    for c in 0..3 {
        for y in 0..h {
            let row = c * h * w + y * w;
            for x in 0..w {
                out[row + x] = img[row + w - 1 - x];
            }
        }
    }
    out
}

/// Reflect a continuous coordinate into [0, n-1].
fn reflect(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let max = (n - 1) as f64;
    let period = 2.0 * max;
    let mut v = v.abs() % period;
    if v > max {
        v = period - v;
    }
    v
}

fn sample_bilinear(img: &[f32], c: usize, (h, w): (usize, usize), y: f64, x: f64) -> f32 {
    let y = reflect(y, h);
    let x = reflect(x, w);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |yy: usize, xx: usize| img[c * h * w + yy * w + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Rotate by `angle`, x-shear by `shear` (radians) and translate by
/// `(tx, ty)` pixels about the image centre.
fn warp(img: &[f32], size: (usize, usize), angle: f64, shear: f64, tx: f64, ty: f64) -> Vec<f32> {
    let (h, w) = size;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // forward A = R(angle) * S(shear), S = [[1, tan], [0, 1]]
    let (s, c) = angle.sin_cos();
    let t = shear.tan();
    let a = [[c, c * t - s], [s, s * t + c]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let mut out = vec![0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            for ch in 0..3 {
                out[ch * h * w + y * w + x] = sample_bilinear(img, ch, size, sy, sx);
            }
        }
    }
    out
}

/// Apply a randomly drawn augmentation to one 3 x H x W image.
pub fn augment<R: Rng + ?Sized>(img: &[f32], size: (usize, usize), policy: &AugmentPolicy, rng: &mut R) -> Vec<f32> {
    if !policy.enabled {
        return img.to_vec();
    }
    let (h, w) = size;
    let mut out = if rng.random::<f64>() < policy.hflip_prob {
        mirror(img, size)
    } else {
        img.to_vec()
    };
    let draw = |rng: &mut R, max: f64| if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
    let angle = draw(rng, policy.rotation_degrees).to_radians();
    let shear = draw(rng, policy.shear_degrees).to_radians();
    let tx = draw(rng, policy.translate) * w as f64;
    let ty = draw(rng, policy.translate) * h as f64;
    if angle != 0.0 || shear != 0.0 || tx != 0.0 || ty != 0.0 {
        out = warp(&out, size, angle, shear, tx, ty);
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}
