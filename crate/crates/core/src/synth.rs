//! Deterministic synthetic lesion dataset: skin-toned backgrounds with one
//! darker filled ellipse each, plus clipped Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imgio::{Mask, RgbImage};

/// Mean skin color the backgrounds are jittered around.
pub const SKIN_RGB: [f64; 3] = [0.708, 0.582, 0.536];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_images: usize,
    /// Side of the square images in pixels.
    pub size: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Semi-axis range as fractions of `size`.
    pub axis_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 250,
            size: 64,
            seed: 42,
            noise_std: 0.05,
            axis_range: (0.1, 0.4),
        }
    }
}

/// Ellipse in pixel coordinates; pixel `(x, y)` is sampled at its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    /// Rotation of the `a` axis, radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_a;
        let v = (-dx * s + dy * c) / self.semi_b;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    pub mask: Mask,
    pub ellipse: Ellipse,
}

/// Center coordinate: Gaussian around the middle, truncated to the central half.
fn draw_center<R: Rng>(rng: &mut R, size: f64) -> f64 {
    let normal = Normal::new(0.5 * size, 0.15 * size).expect("positive std");
    loop {
        let c = normal.sample(rng);
        if (0.25 * size..=0.75 * size).contains(&c) {
            return c;
        }
    }
}

/// Sample `index` of the dataset; depends only on `(cfg, index)`.
pub fn synth_sample(cfg: &SynthConfig, index: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.size as f64;

    let skin: [f64; 3] = SKIN_RGB.map(|m| m + rng.random_range(-0.04..0.04));
    let darken: f64 = rng.random_range(0.45..0.65);
    let lesion = [skin[0] * darken, skin[1] * darken * 0.85, skin[2] * darken * 0.85];

    let ellipse = Ellipse {
        cx: draw_center(&mut rng, size),
        cy: draw_center(&mut rng, size),
        semi_a: rng.random_range(cfg.axis_range.0..=cfg.axis_range.1) * size,
        semi_b: rng.random_range(cfg.axis_range.0..=cfg.axis_range.1) * size,
        angle: rng.random_range(0.0..std::f64::consts::PI),
    };

    let n = cfg.size * cfg.size;
    let mut mask = vec![0u8; n];
    for y in 0..cfg.size {
        for x in 0..cfg.size {
            mask[y * cfg.size + x] = u8::from(ellipse.contains(x, y));
        }
    }
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("finite std"));
    let mut data = vec![0f32; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            let base = if mask[i] == 1 { lesion[c] } else { skin[c] };
            let eps = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            data[c * n + i] = (base + eps).clamp(0.0, 1.0) as f32;
        }
    }
    SynthSample {
        image: RgbImage {
            width: cfg.size,
            height: cfg.size,
            data,
        },
        mask: Mask {
            width: cfg.size,
            height: cfg.size,
            data: mask,
        },
        ellipse,
    }
}

pub fn synth_dataset(cfg: &SynthConfig) -> Vec<(RgbImage, Mask)> {
    (0..cfg.n_images)
        .map(|i| {
            let s = synth_sample(cfg, i);
            (s.image, s.mask)
        })
        .collect()
}
