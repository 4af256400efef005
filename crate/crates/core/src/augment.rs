//! Training-time augmentation: random flips and right-angle rotations applied
//! identically to an image and its mask.

use rand::Rng;
use thiserror::Error;

use crate::imgio::Mask;
use crate::nn::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("rotation count {0} not in 0..=3")]
    BadRotation(u32),
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("image is {image_w}x{image_h} but mask is {mask_w}x{mask_h}")]
    DimensionMismatch {
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
}

/// An image/mask training pair of identical spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Mask) -> Result<Self, AugmentError> {
        if image.width != mask.width || image.height != mask.height {
            return Err(AugmentError::DimensionMismatch {
                image_w: image.width,
                image_h: image.height,
                mask_w: mask.width,
                mask_h: mask.height,
            });
        }
        Ok(Self { image, mask })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    pub rot90: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            rot90: true,
        }
    }
}

impl AugmentConfig {
    pub const IDENTITY: Self = Self {
        p_flip_h: 0.0,
        p_flip_v: 0.0,
        rot90: false,
    };

    pub fn validate(&self) -> Result<(), AugmentError> {
        for p in [self.p_flip_h, self.p_flip_v] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::BadProbability(p));
            }
        }
        Ok(())
    }
}

/// A concrete draw: flips are applied first, then the rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot90: u32,
}

impl Transform {
    /// Consumes exactly three draws (flip_h, flip_v, k) regardless of `cfg`.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        let u_h: f64 = rng.random();
        let u_v: f64 = rng.random();
        let k: u32 = rng.random_range(0..4);
        Self {
            flip_h: u_h < cfg.p_flip_h,
            flip_v: u_v < cfg.p_flip_v,
            rot90: if cfg.rot90 { k } else { 0 },
        }
    }

    pub fn apply_planes<T: Copy>(
        &self,
        data: &[T],
        planes: usize,
        w: usize,
        h: usize,
    ) -> (Vec<T>, usize, usize) {
        let mut out = data.to_vec();
        if self.flip_h {
            out = flip_h_planes(&out, planes, w, h);
        }
        if self.flip_v {
            out = flip_v_planes(&out, planes, w, h);
        }
        rot90_planes(&out, planes, w, h, self.rot90 % 4)
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let (data, width, height) = self.apply_planes(&mask.data, 1, mask.width, mask.height);
        Mask {
            width,
            height,
            data,
        }
    }

    pub fn apply_tensor(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let (data, width, height) = self.apply_planes(&t.data, t.planes, t.width, t.height);
        Tensor::from_vec(t.planes, width, height, data)
    }

    pub fn apply(&self, s: &Sample) -> Sample {
        Sample {
            image: self.apply_tensor(&s.image),
            mask: self.apply_mask(&s.mask),
        }
    }
}

/// Mirror about the vertical axis.
pub fn flip_h_planes<T: Copy>(data: &[T], planes: usize, w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data[..planes * w * h].chunks_exact(w) {
        out.extend(row.iter().rev());
    }
    out
}

/// Mirror about the horizontal axis.
pub fn flip_v_planes<T: Copy>(data: &[T], planes: usize, w: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for plane in data[..planes * w * h].chunks_exact(w * h) {
        for row in plane.chunks_exact(w).rev() {
            out.extend_from_slice(row);
        }
    }
    out
}

/// Counter-clockwise rotation by `90 * k` degrees as seen on screen (y down).
/// Source pixel `(x, y)` lands at `(y, w - 1 - x)` for k = 1.
pub fn rot90_planes<T: Copy>(
    data: &[T],
    planes: usize,
    w: usize,
    h: usize,
    k: u32,
) -> (Vec<T>, usize, usize) {
    let (ow, oh) = if k % 2 == 1 { (h, w) } else { (w, h) };
    let n = w * h;
    let mut out = Vec::with_capacity(planes * n);
    for p in 0..planes {
        let src = &data[p * n..(p + 1) * n];
        for oy in 0..oh {
            for ox in 0..ow {
                let (sx, sy) = match k {
                    0 => (ox, oy),
                    1 => (w - 1 - oy, ox),
                    2 => (w - 1 - ox, h - 1 - oy),
                    _ => (oy, h - 1 - ox),
                };
                out.push(src[sy * w + sx]);
            }
        }
    }
    (out, ow, oh)
}

pub fn flip_h(s: &Sample) -> Sample {
    Transform {
        flip_h: true,
        ..Default::default()
    }
    .apply(s)
}

pub fn flip_v(s: &Sample) -> Sample {
    Transform {
        flip_v: true,
        ..Default::default()
    }
    .apply(s)
}

pub fn rot90(s: &Sample, k: u32) -> Result<Sample, AugmentError> {
    if k > 3 {
        return Err(AugmentError::BadRotation(k));
    }
    Ok(Transform {
        rot90: k,
        ..Default::default()
    }
    .apply(s))
}

pub fn random_augment<R: Rng + ?Sized>(s: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Sample {
    Transform::draw(rng, cfg).apply(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mask_proportion;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(w: usize, h: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor::from_vec(3, w, h, (0..3 * w * h).map(|_| rng.random()).collect());
        let mask = Mask::new(w, h, (0..w * h).map(|_| rng.random_range(0..2)).collect()).unwrap();
        Sample::new(image, mask).unwrap()
    }

    fn mask_sample(w: usize, h: usize, m: &[u8]) -> Sample {
        Sample::new(
            Tensor::zeros(3, w, h),
            Mask::new(w, h, m.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample(5, 3, 1);
        assert_eq!(flip_h(&flip_h(&s)), s);
        assert_eq!(flip_v(&flip_v(&s)), s);
        assert_ne!(flip_h(&s), s);
    }

    #[test]
    fn flip_h_small_mask() {
        let s = mask_sample(2, 1, &[0, 1]);
        assert_eq!(flip_h(&s).mask.data, vec![1, 0]);
        let s = mask_sample(1, 2, &[0, 1]);
        assert_eq!(flip_v(&s).mask.data, vec![1, 0]);
    }

    #[test]
    fn rotations() {
        let s = sample(4, 3, 2);
        assert_eq!(rot90(&s, 0).unwrap(), s);
        let mut r = s.clone();
        for _ in 0..4 {
            r = rot90(&r, 1).unwrap();
        }
        assert_eq!(r, s);
        let r1 = rot90(&s, 1).unwrap();
        assert_eq!((r1.mask.width, r1.mask.height), (3, 4));
        assert_eq!(rot90(&rot90(&s, 1).unwrap(), 1).unwrap(), rot90(&s, 2).unwrap());
        assert_eq!(rot90(&s, 4), Err(AugmentError::BadRotation(4)));
    }

    #[test]
    fn rot90_index_map() {
        // 2x1 [0,1] rotated once: right pixel goes to the top of a 1x2 column
        let r = rot90(&mask_sample(2, 1, &[0, 1]), 1).unwrap();
        assert_eq!((r.mask.width, r.mask.height), (1, 2));
        assert_eq!(r.mask.data, vec![1, 0]);
    }

    #[test]
    fn proportion_preserved() {
        let s = sample(6, 4, 3);
        let p = mask_proportion(&s.mask);
        assert_eq!(mask_proportion(&flip_h(&s).mask), p);
        assert_eq!(mask_proportion(&rot90(&s, 3).unwrap().mask), p);
    }

    #[test]
    fn identity_config_and_determinism() {
        let s = sample(4, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(random_augment(&s, &mut rng, &AugmentConfig::IDENTITY), s);
        let cfg = AugmentConfig::default();
        let a = random_augment(&s, &mut ChaCha8Rng::seed_from_u64(11), &cfg);
        let b = random_augment(&s, &mut ChaCha8Rng::seed_from_u64(11), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn flip_frequency() {
        let cfg = AugmentConfig {
            p_flip_h: 0.5,
            p_flip_v: 0.0,
            rot90: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let flips = (0..10_000)
            .filter(|_| Transform::draw(&mut rng, &cfg).flip_h)
            .count();
        let f = flips as f64 / 10_000.0;
        assert!((0.45..=0.55).contains(&f), "flip frequency {f}");
    }

    #[test]
    fn mismatched_sample_rejected() {
        let err = Sample::new(Tensor::zeros(3, 2, 2), Mask::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, AugmentError::DimensionMismatch { .. }));
        assert!(AugmentConfig {
            p_flip_h: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
