//! Segmentation metrics and analysis maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::pixel_decoder::PerPixelEmbeddings;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `counts[gt * K + pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "square matrix");
        Self {
            num_classes: k,
            counts: rows.concat(),
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-ignored pixel.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= k || p >= k {
                return Err(Error::Input(format!("label {} outside {k} classes", g.max(p))));
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.num_classes, other.num_classes, "merging different class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU (`None` when the class never occurs in GT or prediction) and
    /// the mean over defined classes.
    pub fn miou(&self) -> (Vec<Option<f64>>, f64) {
        let k = self.num_classes;
        let per: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..k).filter(|&g| g != c).map(|g| self.get(g, c)).sum();
                let den = tp + fp + fn_;
                (den > 0).then(|| tp as f64 / den as f64)
            })
            .collect();
        let defined: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        (per, mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApRule {
    Trapezoid,
    ElevenPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub ap: f64,
}

/// `n` evenly spaced thresholds from 0 to 1.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2, "need at least two thresholds");
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

fn pr_point(scores: &[f64], gt: &[bool], threshold: f64, positives: usize) -> PrPoint {
    let mut selected = 0usize;
    let mut hit = 0usize;
    for (&s, &g) in scores.iter().zip(gt) {
        if s > threshold {
            selected += 1;
            hit += g as usize;
        }
    }
    PrPoint {
        threshold,
        precision: if selected == 0 {
            1.0
        } else {
            hit as f64 / selected as f64
        },
        recall: hit as f64 / positives as f64,
    }
}

/// Area under precision(recall) for arbitrary points.
pub fn average_precision(points: &[PrPoint], rule: ApRule) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    match rule {
        ApRule::Trapezoid => pts
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
            .sum(),
        ApRule::ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let r = i as f64 / 10.0;
                    pts.iter()
                        .filter(|p| p.0 >= r - 1e-12)
                        .map(|p| p.1)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Precision-recall of the proposals `score > threshold` against `gt`.
/// `None` when `gt` has no positive pixel.
pub fn pr_curve(scores: &[f64], gt: &[bool], thresholds: &[f64], rule: ApRule) -> Result<Option<PrCurve>> {
    if scores.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            gt.len()
        )));
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("thresholds must be strictly increasing".into()));
    }
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Ok(None);
    }
    let points: Vec<PrPoint> = thresholds
        .iter()
        .map(|&t| pr_point(scores, gt, t, positives))
        .collect();
    let ap = average_precision(&points, rule);
    Ok(Some(PrCurve { points, ap }))
}

/// Bilinear resize of one channel with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w, "source size");
    let axis = |o: usize, n: usize, out: usize| {
        let f = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(n - 1), f - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ty) = axis(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = axis(x, w, out_w);
            let top = (1.0 - tx) * src[y0 * w + x0] + tx * src[y0 * w + x1];
            let bot = (1.0 - tx) * src[y1 * w + x0] + tx * src[y1 * w + x1];
            out.push((1.0 - ty) * top + ty * bot);
        }
    }
    out
}

/// Rescales to `[0, 1]`; a constant channel maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Per-class normalized pixel-text similarity at image resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    /// One `height * width` map per class.
    pub values: Vec<Vec<f64>>,
}

pub fn similarity_map<T: Scalar>(
    x: &Tensor<T>,
    grid: (usize, usize),
    t: &Tensor<T>,
    out: (usize, usize),
) -> Result<SimilarityMap> {
    let (h, w) = grid;
    if x.rows() != h * w || x.cols() != t.cols() {
        return Err(Error::Shape(format!(
            "visual {:?} on a {h}x{w} grid vs text {:?}",
            x.shape(),
            t.shape()
        )));
    }
    let s = x.l2_normalize_rows().matmul_nt(&t.l2_normalize_rows());
    let values = (0..t.rows())
        .map(|k| {
            let ch: Vec<f64> = (0..h * w).map(|i| s.get(i, k).to_f64_lossy()).collect();
            min_max(&resize_bilinear(&ch, h, w, out.0, out.1))
        })
        .collect();
    Ok(SimilarityMap {
        height: out.0,
        width: out.1,
        values,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity of the anchor pixel of `source` to every pixel of `target`.
pub fn coherence_map<T: Scalar>(
    source: &PerPixelEmbeddings<T>,
    anchor: (usize, usize),
    target: &PerPixelEmbeddings<T>,
) -> Result<Vec<f64>> {
    if anchor.0 >= source.height || anchor.1 >= source.width {
        return Err(Error::Input(format!("anchor {anchor:?} outside the map")));
    }
    if source.dim() != target.dim() {
        return Err(Error::Shape("embedding widths differ".into()));
    }
    let a: Vec<f64> = source.pixel(anchor.0, anchor.1).iter().map(|v| v.to_f64_lossy()).collect();
    Ok((0..target.values.rows())
        .map(|i| {
            let b: Vec<f64> = target.values.row(i).iter().map(|v| v.to_f64_lossy()).collect();
            cosine(&a, &b)
        })
        .collect())
}
