//! Dataset statistics: per-channel color mean/std, lesion proportion, and the
//! spatial prior (per-pixel lesion frequency).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgio::{Mask, RgbImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty input sequence")]
    Empty,
    #[error("target dimensions must be at least 1x1")]
    ZeroTarget,
    #[error("channel {0} has zero standard deviation")]
    ZeroStd(usize),
}

/// Per-channel mean and population standard deviation, RGB order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Mean-only variant: normalization subtracts the mean and leaves scale alone.
    pub fn center_only(self) -> Self {
        Self {
            mean: self.mean,
            std: [1.0; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Fraction of foreground pixels.
pub fn mask_proportion(mask: &Mask) -> f64 {
    mask.foreground_count() as f64 / mask.data.len() as f64
}

/// Pooled-pixel statistics over every pixel of every image.
pub fn dataset_stats(images: &[RgbImage]) -> Result<ChannelStats, StatsError> {
    if images.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut count = 0usize;
    let mut sum = [0f64; 3];
    for img in images {
        count += img.width * img.height;
        for (c, s) in sum.iter_mut().enumerate() {
            *s += img.plane(c).iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let n = count as f64;
    let mean = sum.map(|s| s / n);
    // two-pass variance for accuracy
    let mut sq = [0f64; 3];
    for img in images {
        for (c, s) in sq.iter_mut().enumerate() {
            let m = mean[c];
            *s += img
                .plane(c)
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    Ok(ChannelStats {
        mean,
        std: sq.map(|s| (s / n).sqrt()),
    })
}

/// Nearest-neighbor source index for destination index `i`.
#[inline]
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

pub fn resample_nearest(mask: &Mask, target_w: usize, target_h: usize) -> Mask {
    let mut data = Vec::with_capacity(target_w * target_h);
    for y in 0..target_h {
        let sy = nearest_source(y, mask.height, target_h);
        for x in 0..target_w {
            let sx = nearest_source(x, mask.width, target_w);
            data.push(mask.data[sy * mask.width + sx]);
        }
    }
    Mask {
        width: target_w,
        height: target_h,
        data,
    }
}

/// Per-pixel fraction of masks with foreground, after resampling every mask
/// to the target size.
pub fn spatial_prior(
    masks: &[Mask],
    target_w: usize,
    target_h: usize,
) -> Result<PriorMap, StatsError> {
    if masks.is_empty() {
        return Err(StatsError::Empty);
    }
    if target_w == 0 || target_h == 0 {
        return Err(StatsError::ZeroTarget);
    }
    let mut counts = vec![0u32; target_w * target_h];
    for m in masks {
        let r = resample_nearest(m, target_w, target_h);
        for (c, &v) in counts.iter_mut().zip(&r.data) {
            *c += v as u32;
        }
    }
    let n = masks.len() as f64;
    Ok(PriorMap {
        width: target_w,
        height: target_h,
        data: counts.iter().map(|&c| (c as f64 / n) as f32).collect(),
    })
}

/// `(in - mean_c) / std_c` per channel; returns a plane-major raster.
pub fn normalize_image(img: &RgbImage, stats: &ChannelStats) -> Result<Vec<f32>, StatsError> {
    if let Some(c) = stats.std.iter().position(|&s| s <= 0.0) {
        return Err(StatsError::ZeroStd(c));
    }
    let mut out = Vec::with_capacity(img.data.len());
    for c in 0..3 {
        let (m, s) = (stats.mean[c], stats.std[c]);
        out.extend(img.plane(c).iter().map(|&v| ((v as f64 - m) / s) as f32));
    }
    Ok(out)
}

pub fn denormalize(normalized: &[f32], stats: &ChannelStats) -> Vec<f32> {
    let n = normalized.len() / 3;
    normalized
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / n;
            (v as f64 * stats.std[c] + stats.mean[c]) as f32
        })
        .collect()
}
