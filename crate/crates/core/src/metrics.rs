//! Jaccard index, the challenge's zero-below-cutoff variant, and dataset
//! evaluation reports.

use serde::Serialize;
use thiserror::Error;

use crate::imgio::Mask;

/// Per-image scores below this are counted as zero.
pub const DEFAULT_CUTOFF: f64 = 0.65;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask dimensions differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch {
        a_w: usize,
        a_h: usize,
        b_w: usize,
        b_h: usize,
    },
    #[error("jaccard value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("no image pairs to evaluate")]
    Empty,
    #[error("image {id}: {source}")]
    Pair {
        id: String,
        #[source]
        source: Box<MetricsError>,
    },
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 1.
pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64, MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::DimensionMismatch {
            a_w: a.width,
            a_h: a.height,
            b_w: b.width,
            b_h: b.height,
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// `j` if `j >= cutoff`, else 0.
pub fn thresholded_jaccard(j: f64, cutoff: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&j) {
        return Err(MetricsError::OutOfRange(j));
    }
    Ok(if j < cutoff { 0.0 } else { j })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: String,
    pub raw: f64,
    pub thresholded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub mean_raw: f64,
    pub mean_thresholded: f64,
    pub cutoff: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,raw,thresholded\n");
        for r in &self.per_image {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.id, r.raw, r.thresholded));
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_images": self.per_image.len(),
            "mean_raw": self.mean_raw,
            "mean_thresholded": self.mean_thresholded,
            "cutoff": self.cutoff,
        })
    }
}

/// Scores every `(prediction, truth, id)` pair; rows are sorted by id.
pub fn evaluate_dataset(
    pairs: &[(Mask, Mask, String)],
    cutoff: f64,
) -> Result<EvalReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per_image = pairs
        .iter()
        .map(|(pred, truth, id)| {
            let raw = jaccard(pred, truth).map_err(|e| MetricsError::Pair {
                id: id.clone(),
                source: Box::new(e),
            })?;
            Ok(ImageScore {
                id: id.clone(),
                raw,
                thresholded: thresholded_jaccard(raw, cutoff)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    per_image.sort_by(|a, b| a.id.cmp(&b.id));
    let n = per_image.len() as f64;
    Ok(EvalReport {
        mean_raw: per_image.iter().map(|r| r.raw).sum::<f64>() / n,
        mean_thresholded: per_image.iter().map(|r| r.thresholded).sum::<f64>() / n,
        per_image,
        cutoff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(data: &[u8]) -> Mask {
        Mask::new(data.len(), 1, data.to_vec()).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&m(&[1, 1, 0]), &m(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(jaccard(&m(&[1, 0, 0]), &m(&[0, 0, 1])).unwrap(), 0.0);
        assert_eq!(jaccard(&m(&[1, 1, 0, 0]), &m(&[0, 1, 1, 0])).unwrap(), 1.0 / 3.0);
        assert_eq!(jaccard(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 1.0);
        assert!(matches!(
            jaccard(&m(&[0, 0]), &m(&[0, 0, 0])),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(thresholded_jaccard(0.6, DEFAULT_CUTOFF).unwrap(), 0.0);
        assert_eq!(thresholded_jaccard(0.65, DEFAULT_CUTOFF).unwrap(), 0.65);
        assert_eq!(thresholded_jaccard(0.75, DEFAULT_CUTOFF).unwrap(), 0.75);
        assert_eq!(
            thresholded_jaccard(1.2, DEFAULT_CUTOFF),
            Err(MetricsError::OutOfRange(1.2))
        );
    }

    #[test]
    fn report_means() {
        let one = evaluate_dataset(&[(m(&[1, 0]), m(&[1, 0]), "a".into())], 0.65).unwrap();
        assert_eq!((one.mean_raw, one.mean_thresholded), (1.0, 1.0));

        // raw 0.6 (3/5) and 0.8 (4/5)
        let pairs = vec![
            (m(&[1, 1, 1, 1, 1]), m(&[1, 1, 1, 0, 0]), "b".to_string()),
            (m(&[1, 1, 1, 1, 1]), m(&[1, 1, 1, 1, 0]), "a".to_string()),
        ];
        let r = evaluate_dataset(&pairs, 0.65).unwrap();
        assert_eq!(r.per_image[0].id, "a");
        assert!((r.mean_raw - 0.7).abs() < 1e-12);
        assert!((r.mean_thresholded - 0.4).abs() < 1e-12);
        let recomputed: f64 = r.per_image.iter().map(|x| x.raw).sum::<f64>() / 2.0;
        assert!((recomputed - r.mean_raw).abs() < 1e-9);
        assert!(r.to_csv().starts_with("id,raw,thresholded\na,0.800000,0.800000\n"));
    }

    #[test]
    fn report_errors() {
        assert_eq!(evaluate_dataset(&[], 0.65), Err(MetricsError::Empty));
        let err = evaluate_dataset(&[(m(&[1]), m(&[1, 0]), "x7".into())], 0.65).unwrap_err();
        assert!(err.to_string().contains("x7"));
    }
}
