//! Score post-processing: softmax probabilities, Gaussian smoothing of the
//! score planes, the score difference `Δs = s1 - s0`, Otsu thresholding and
//! mask extraction.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use thiserror::Error;

use crate::imgio::{Mask, ScoreMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocessError {
    #[error("sigma {0} must be finite and >= 0")]
    BadSigma(f64),
    #[error("bins {0} must be >= 2")]
    BadBins(usize),
    #[error("otsu needs at least one value")]
    Empty,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown mode {0:?} (expected naive or otsu)")]
    BadMode(String),
}

/// Single float plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No smoothing, threshold Δs at 0 (equivalently p1 > 0.5).
    Naive,
    /// Smooth both planes, then threshold Δs with Otsu.
    Otsu,
}

impl std::str::FromStr for Mode {
    type Err = PostprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Mode::Naive),
            "otsu" => Ok(Mode::Otsu),
            other => Err(PostprocessError::BadMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessConfig {
    pub sigma: f64,
    pub bins: usize,
    pub mode: Mode,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            sigma: 5.0,
            bins: 256,
            mode: Mode::Otsu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OtsuResult {
    /// Upper edge of the last bin in the lower class, in input units.
    pub threshold: f64,
    /// `ω0·ω1·(μ0 − μ1)²` at the chosen cut, in squared input units.
    pub between_class_variance: f64,
    pub degenerate: bool,
    /// Number of bins in the lower class (0 when degenerate).
    pub cut: usize,
}

/// Two-class softmax computed as a logistic of the score difference.
pub fn softmax2(s: &ScoreMap) -> ProbabilityMap {
    let (p0, p1): (Vec<f64>, Vec<f64>) = s
        .s0
        .iter()
        .zip(&s.s1)
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            let mut p1 = if b >= a {
                1.0 / (1.0 + (a - b).exp())
            } else {
                let e = (b - a).exp();
                e / (1.0 + e)
            };
            // exp rounds to 1 for |Δ| below ~1e-16; keep p1 > 0.5 <=> s1 > s0
            if b > a && p1 <= 0.5 {
                p1 = 0.5f64.next_up();
            } else if b < a && p1 >= 0.5 {
                p1 = 0.5f64.next_down();
            }
            (1.0 - p1, p1)
        })
        .unzip();
    ProbabilityMap {
        width: s.width,
        height: s.height,
        p0,
        p1,
    }
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, PostprocessError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(PostprocessError::BadSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

/// Separable Gaussian filter, horizontal pass then vertical, replicating
/// edge pixels outside the plane.
pub fn gaussian_blur(plane: &Plane, sigma: f64) -> Result<Plane, PostprocessError> {
    let kernel = gaussian_kernel(sigma)?;
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (plane.width, plane.height);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0f64; w * h];
    for y in 0..h {
        let row = &plane.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0f64;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * row[clamp(x as isize + k as isize - r, w)] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[clamp(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    Ok(Plane {
        width: w,
        height: h,
        data: out,
    })
}

/// `Δs = s1 - s0` per pixel.
pub fn score_diff(s: &ScoreMap) -> Plane {
    Plane {
        width: s.width,
        height: s.height,
        data: s.s0.iter().zip(&s.s1).map(|(&a, &b)| b - a).collect(),
    }
}

/// Equal-width histogram on `[min, max]` used by [`otsu_threshold`].
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build<V: Copy + Into<f64>>(values: &[V], bins: usize) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            let v: f64 = v.into();
            min = min.min(v);
            max = max.max(v);
        }
        let mut counts = vec![0u64; bins];
        let width = (max - min) / bins as f64;
        for &v in values {
            counts[Self::bin_of(v.into(), min, width, bins)] += 1;
        }
        Self { min, max, counts }
    }

    #[inline]
    fn bin_of(v: f64, min: f64, width: f64, bins: usize) -> usize {
        if width > 0.0 {
            (((v - min) / width).floor() as usize).min(bins - 1)
        } else {
            0
        }
    }

    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.counts.len() as f64
    }

    /// Value at the lower edge of bin `k`.
    pub fn edge(&self, k: usize) -> f64 {
        self.min + k as f64 * self.bin_width()
    }
}

/// Otsu's method on a `bins`-bin histogram. Every cut between consecutive
/// bins is scored by the between-class variance of the bin centers; ties go
/// to the lowest cut. Class counts and sums are kept in integers, so the
/// score of each cut is reproducible exactly.
pub fn otsu_threshold<V: Copy + Into<f64>>(
    values: &[V],
    bins: usize,
) -> Result<OtsuResult, PostprocessError> {
    if bins < 2 {
        return Err(PostprocessError::BadBins(bins));
    }
    if values.is_empty() {
        return Err(PostprocessError::Empty);
    }
    if values.iter().any(|&v| !v.into().is_finite()) {
        return Err(PostprocessError::NonFinite("otsu input"));
    }
    let degenerate = OtsuResult {
        threshold: 0.0,
        between_class_variance: 0.0,
        degenerate: true,
        cut: 0,
    };
    let hist = Histogram::build(values, bins);
    if !(hist.max > hist.min) || hist.counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Ok(degenerate);
    }
    let n = values.len() as u64;
    // bin centers in half-bin units: center_i = (2i + 1) / 2
    let total_sum: u128 = hist
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c as u128 * (2 * i as u128 + 1))
        .sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best: Option<(usize, f64)> = None;
    for k in 1..bins {
        n0 += hist.counts[k - 1];
        s0 += hist.counts[k - 1] as u128 * (2 * (k - 1) as u128 + 1);
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let var = between_class_variance(n0, n1, s0, total_sum - s0, n);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((k, var));
        }
    }
    let Some((cut, var)) = best else {
        return Ok(degenerate);
    };
    let w = hist.bin_width();
    Ok(OtsuResult {
        threshold: hist.edge(cut),
        between_class_variance: var * w * w,
        degenerate: false,
        cut,
    })
}

/// `ω0·ω1·(μ0 − μ1)²` in bin units, from integer class statistics (`s*` are
/// sums of `2i + 1` over members).
#[inline]
pub fn between_class_variance(n0: u64, n1: u64, s0: u128, s1: u128, n: u64) -> f64 {
    let w0 = n0 as f64 / n as f64;
    let w1 = n1 as f64 / n as f64;
    let m0 = s0 as f64 / (2.0 * n0 as f64);
    let m1 = s1 as f64 / (2.0 * n1 as f64);
    w0 * w1 * (m0 - m1) * (m0 - m1)
}

/// Foreground iff `delta > threshold`.
pub fn extract_mask(delta: &Plane, threshold: f64) -> Mask {
    Mask {
        width: delta.width,
        height: delta.height,
        data: delta
            .data
            .iter()
            .map(|&d| u8::from(d as f64 > threshold))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOutput {
    pub mask: Mask,
    /// Threshold actually applied to Δs.
    pub threshold: f64,
    /// Present in otsu mode; a degenerate result means the 0 fallback was used.
    pub otsu: Option<OtsuResult>,
}

pub fn postprocess_pipeline(
    s: &ScoreMap,
    cfg: &PostprocessConfig,
) -> Result<PostprocessOutput, PostprocessError> {
    if s.s0.iter().chain(&s.s1).any(|v| !v.is_finite()) {
        return Err(PostprocessError::NonFinite("scores"));
    }
    match cfg.mode {
        Mode::Naive => Ok(PostprocessOutput {
            mask: extract_mask(&score_diff(s), 0.0),
            threshold: 0.0,
            otsu: None,
        }),
        Mode::Otsu => {
            if cfg.bins < 2 {
                return Err(PostprocessError::BadBins(cfg.bins));
            }
            let plane = |data: &[f32]| Plane {
                width: s.width,
                height: s.height,
                data: data.to_vec(),
            };
            let b0 = gaussian_blur(&plane(&s.s0), cfg.sigma)?;
            let b1 = gaussian_blur(&plane(&s.s1), cfg.sigma)?;
            let smoothed = ScoreMap {
                width: s.width,
                height: s.height,
                s0: b0.data,
                s1: b1.data,
            };
            let delta = score_diff(&smoothed);
            let otsu = otsu_threshold(&delta.data, cfg.bins)?;
            let threshold = if otsu.degenerate { 0.0 } else { otsu.threshold };
            Ok(PostprocessOutput {
                mask: extract_mask(&delta, threshold),
                threshold,
                otsu: Some(otsu),
            })
        }
    }
}

/// Adds i.i.d. Gaussian noise to both score planes.
pub fn add_score_noise<R: Rng + ?Sized>(s: &ScoreMap, std: f64, rng: &mut R) -> ScoreMap {
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut noisy = |plane: &[f32]| -> Vec<f32> {
        plane
            .iter()
            .map(|&v| (v as f64 + normal.sample(rng)) as f32)
            .collect()
    };
    let s0 = noisy(&s.s0);
    let s1 = noisy(&s.s1);
    ScoreMap {
        width: s.width,
        height: s.height,
        s0,
        s1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(s0: Vec<f32>, s1: Vec<f32>) -> ScoreMap {
        ScoreMap::new(s0.len(), 1, s0, s1).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax2(&map(vec![0.7], vec![0.7]));
        assert_eq!((p.p0[0], p.p1[0]), (0.5, 0.5));
        let p = softmax2(&map(vec![0.0], vec![3f32.ln()]));
        assert!((p.p1[0] - 0.75).abs() < 1e-7);
        let p = softmax2(&map(vec![0.0, 1000.0], vec![1000.0, 0.0]));
        assert_eq!(p.p1, vec![1.0, 0.0]);
        assert!(p.p0.iter().chain(&p.p1).all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_tiny_difference_keeps_argmax() {
        let p = softmax2(&map(vec![1e-30, 2e-30], vec![2e-30, 1e-30]));
        assert!(p.p1[0] > 0.5);
        assert!(p.p1[1] < 0.5);
    }

    #[test]
    fn kernel_properties() {
        assert_eq!(gaussian_kernel(0.0).unwrap(), vec![1.0]);
        for sigma in [0.3, 0.5, 1.0, 2.0, 5.0] {
            let k = gaussian_kernel(sigma).unwrap();
            assert_eq!(k.len(), 2 * (3.0 * sigma as f64).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..k.len() {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
        // sigma 1: taps exp(-i^2/2) for |i| <= 3, divided by their sum
        let k = gaussian_kernel(1.0).unwrap();
        let raw: Vec<f64> = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).collect();
        let sum: f64 = raw.iter().sum();
        assert!((k[3] - 1.0 / sum).abs() < 1e-12);
        let dens = 0.398_942_280_401_432_7; // 1/sqrt(2π)
        assert!((k[3] - dens / (dens * sum)).abs() < 1e-6);
        assert!(gaussian_kernel(-1.0).is_err());
        assert!(gaussian_kernel(f64::NAN).is_err());
    }

    #[test]
    fn blur_constant_and_impulse() {
        let c = Plane {
            width: 9,
            height: 7,
            data: vec![2.5; 63],
        };
        let b = gaussian_blur(&c, 2.0).unwrap();
        assert!(b.data.iter().all(|v| (v - 2.5).abs() < 1e-6));

        let n = 31;
        let mut data = vec![0f32; n * n];
        data[15 * n + 15] = 1.0;
        let p = Plane {
            width: n,
            height: n,
            data,
        };
        let k = gaussian_kernel(2.0).unwrap();
        let r = k.len() / 2;
        let b = gaussian_blur(&p, 2.0).unwrap();
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as isize - 15 + r as isize, x as isize - 15 + r as isize);
                let expect = if (0..k.len() as isize).contains(&dy) && (0..k.len() as isize).contains(&dx) {
                    k[dy as usize] * k[dx as usize]
                } else {
                    0.0
                };
                assert!((b.data[y * n + x] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn score_diff_examples() {
        assert_eq!(score_diff(&map(vec![1.0, 0.5], vec![3.0, 0.5])).data, vec![2.0, 0.0]);
    }

    #[test]
    fn otsu_bimodal() {
        let mut v = vec![-10.0f64; 50];
        v.extend(vec![5.0; 50]);
        let r = otsu_threshold(&v, 256).unwrap();
        assert!(!r.degenerate);
        assert!(r.threshold > -10.0 && r.threshold < 5.0);
        // all cuts tie; the lowest wins
        assert_eq!(r.cut, 1);
        let m = extract_mask(
            &Plane {
                width: 100,
                height: 1,
                data: v.iter().map(|&x| x as f32).collect(),
            },
            r.threshold,
        );
        assert_eq!(m.data, [vec![0u8; 50], vec![1u8; 50]].concat());
        // ω0 = ω1 = 1/2 and the class means are 15 apart... in bin-center units
        let w = 15.0 / 256.0;
        let m0 = -10.0 + 0.5 * w;
        let m1 = 5.0 - 0.5 * w;
        assert!((r.between_class_variance - 0.25 * (m1 - m0) * (m1 - m0)).abs() < 1e-9);
    }

    #[test]
    fn otsu_degenerate_and_errors() {
        let r = otsu_threshold(&[3.0f64; 10], 256).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.threshold, 0.0);
        assert_eq!(otsu_threshold::<f64>(&[], 256), Err(PostprocessError::Empty));
        assert_eq!(otsu_threshold(&[1.0f64, 2.0], 1), Err(PostprocessError::BadBins(1)));
        assert!(otsu_threshold(&[1.0f64, f64::NAN], 8).is_err());
    }

    #[test]
    fn otsu_shift_by_integer_constant() {
        let v: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 - (i % 3) as f64 * 40.0).collect();
        let r = otsu_threshold(&v, 64).unwrap();
        for c in [-64.0, 128.0, 1024.0] {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let s = otsu_threshold(&shifted, 64).unwrap();
            assert_eq!(s.cut, r.cut);
            assert!((s.threshold - (r.threshold + c)).abs() < 1e-9);
        }
    }

    #[test]
    fn extract_mask_thresholds() {
        let d = Plane {
            width: 4,
            height: 1,
            data: vec![-2.0, 0.0, 0.5, 3.0],
        };
        assert_eq!(extract_mask(&d, 0.0).data, vec![0, 0, 1, 1]);
        assert_eq!(extract_mask(&d, 3.0).data, vec![0; 4]);
        assert_eq!(extract_mask(&d, -2.5).data, vec![1; 4]);
    }

    #[test]
    fn naive_pipeline_is_zero_threshold() {
        let s = map(vec![0.0, 1.0, 2.0], vec![1.0, 1.0, -1.0]);
        let out = postprocess_pipeline(
            &s,
            &PostprocessConfig {
                mode: Mode::Naive,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.mask, extract_mask(&score_diff(&s), 0.0));
        assert!(out.otsu.is_none());
    }

    #[test]
    fn otsu_pipeline_degenerate_falls_back() {
        let s = map(vec![1.0; 8], vec![1.0; 8]);
        let out = postprocess_pipeline(&s, &PostprocessConfig::default()).unwrap();
        assert_eq!(out.threshold, 0.0);
        assert!(out.otsu.unwrap().degenerate);
        assert_eq!(out.mask.data, vec![0; 8]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("otsu".parse::<Mode>().unwrap(), Mode::Otsu);
        assert_eq!("naive".parse::<Mode>().unwrap(), Mode::Naive);
        assert!("fancy".parse::<Mode>().is_err());
    }
}
