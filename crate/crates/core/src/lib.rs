//! Skin-lesion segmentation at desk scale: dataset statistics, a small U-Net
//! trained with class-weighted cross-entropy and Adam, Gaussian-smoothed Otsu
//! post-processing of the score maps, and Jaccard evaluation.

pub mod augment;
pub mod cli;
pub mod imgio;
pub mod metrics;
pub mod nn;
pub mod postprocess;
pub mod stats;
pub mod synth;
