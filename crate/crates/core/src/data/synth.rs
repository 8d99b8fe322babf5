use std::f64::consts::TAU;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

/// Synthetic class-structured images.
///
/// Class k has a mean colour on a circle in the plane orthogonal to the grey
/// axis (so per-image brightness jitter never moves a sample toward another
/// class) and vertical stripes of frequency k + 1 with a random phase. The
/// stripes and pixel noise average out over each row, so per-channel means
/// are linearly separable by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    /// (H, W)
    pub size: (usize, usize),
    /// Amplitude of uniform per-pixel noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 2,
            images_per_class: 100,
            size: (32, 32),
            noise: 0.05,
        }
    }
}

const COLOR_RADIUS: f64 = 0.2;
const STRIPE_AMPLITUDE: f64 = 0.1;
const BRIGHTNESS_JITTER: f64 = 0.05;

/// Mean colour of class `k` out of `n`.
pub fn class_color(k: usize, n: usize) -> [f64; 3] {
    let theta = TAU * k as f64 / n as f64;
    std::array::from_fn(|c| 0.5 + COLOR_RADIUS * (theta + TAU * c as f64 / 3.0).cos())
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.n_classes < 2 {
        return Err(Error::config("synth_classes", "must be >= 2"));
    }
    if spec.images_per_class == 0 {
        return Err(Error::config("synth_per_class", "must be >= 1"));
    }
    let (h, w) = spec.size;
    if h == 0 || w == 0 {
        return Err(Error::config("image_size", "must be non-zero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(spec.n_classes * spec.images_per_class);
    let class_names: Vec<String> = (0..spec.n_classes).map(|k| format!("class{k}")).collect();
    for (k, name) in class_names.iter().enumerate() {
        let color = class_color(k, spec.n_classes);
        let freq = (k + 1) as f64;
        for i in 0..spec.images_per_class {
            let phase = rng.random_range(0.0..TAU);
            let bright = rng.random_range(-BRIGHTNESS_JITTER..=BRIGHTNESS_JITTER);
            let mut pixels = vec![0f32; 3 * h * w];
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let stripe = STRIPE_AMPLITUDE * (TAU * freq * x as f64 / w as f64 + phase).sin();
                        let noise = if spec.noise > 0.0 {
                            rng.random_range(-spec.noise..=spec.noise)
                        } else {
                            0.0
                        };
                        let v = color[c] + bright + stripe + noise;
                        pixels[c * h * w + y * w + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            samples.push(Sample {
                image_id: format!("{name}/{i:04}.png"),
                label: k,
                path: None,
                pixels: Arc::new(pixels),
            });
        }
    }
    Ok(Dataset {
        samples,
        class_names,
        image_size: spec.size,
    })
}
