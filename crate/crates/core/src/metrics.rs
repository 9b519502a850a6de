//! Segmentation metrics: MAE, S-measure, E-measure, BER, Dice and IoU.
//!
//! Maps are row-major `height × width`. Predictions lie in `[0, 1]`; ground
//! truth is binary. Thresholded metrics binarize with `pred >= threshold`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A prediction map and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub pred: Vec<f64>,
    pub gt: Vec<bool>,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, width: usize, height: usize, pred: Vec<f64>, gt: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if n == 0 || pred.len() != n || gt.len() != n {
            return Err(Error::Contract(format!(
                "eval pair {width}x{height} has {} predictions and {} labels",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("prediction {v} outside [0, 1]")));
        }
        Ok(EvalPair {
            id: id.into(),
            width,
            height,
            pred,
            gt,
        })
    }

    fn len(&self) -> usize {
        self.pred.len()
    }

    fn gt_f(&self, i: usize) -> f64 {
        if self.gt[i] {
            1.0
        } else {
            0.0
        }
    }
}

/// Threshold and S-measure weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConfig {
    pub alpha: f64,
    pub threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            alpha: 0.5,
            threshold: 0.5,
        }
    }
}

pub fn mae(p: &EvalPair) -> f64 {
    let s: f64 = (0..p.len()).map(|i| (p.gt_f(i) - p.pred[i]).abs()).sum();
    s / p.len() as f64
}

/// Confusion counts after binarization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(p: &EvalPair, threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (&s, &g) in p.pred.iter().zip(&p.gt) {
        match (s >= threshold, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Balanced error rate, ×100. Undefined when the ground truth has one class.
pub fn ber(p: &EvalPair, threshold: f64) -> Result<f64> {
    let c = confusion(p, threshold);
    if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
        return Err(Error::Degenerate(format!("BER undefined for single-class ground truth ({})", p.id)));
    }
    let tpr = c.tp as f64 / (c.tp + c.fn_) as f64;
    let tnr = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok(100.0 * (1.0 - 0.5 * (tpr + tnr)))
}

/// `(dice, iou)` of the binarized prediction; `(1, 1)` when both are empty.
pub fn dice_iou(p: &EvalPair, threshold: f64) -> (f64, f64) {
    let c = confusion(p, threshold);
    let pred = c.tp + c.fp;
    let gt = c.tp + c.fn_;
    if pred + gt == 0 {
        return (1.0, 1.0);
    }
    let dice = 2.0 * c.tp as f64 / (pred + gt) as f64;
    let iou = c.tp as f64 / (pred + gt - c.tp) as f64;
    (dice, iou)
}

/// Mean and unbiased standard deviation (divisor `max(n − 1, 1)`).
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.saturating_sub(1).max(1) as f64;
    (mean, var.sqrt())
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    if values.clone().next().is_none() {
        return 0.0;
    }
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

/// Object-aware term: foreground and background object scores weighted by
/// the foreground fraction of the ground truth.
pub fn s_object(p: &EvalPair) -> f64 {
    let n = p.len();
    let fg_fraction = p.gt.iter().filter(|&&g| g).count() as f64 / n as f64;
    let fg = object_score((0..n).filter(|&i| p.gt[i]).map(|i| p.pred[i]));
    let bg = object_score((0..n).filter(|&i| !p.gt[i]).map(|i| 1.0 - p.pred[i]));
    fg_fraction * fg + (1.0 - fg_fraction) * bg
}

/// Ground-truth centroid as 1-based `(col, row)` split coordinates. Means
/// are rounded half-to-even.
fn centroid(p: &EvalPair) -> (usize, usize) {
    let (w, h) = (p.width, p.height);
    let mut count = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            if p.gt[r * w + c] {
                count += 1;
                sx += c as f64;
                sy += r as f64;
            }
        }
    }
    if count == 0 {
        return (((w as f64) / 2.0).round_ties_even() as usize, ((h as f64) / 2.0).round_ties_even() as usize);
    }
    let x = (sx / count as f64).round_ties_even() as usize + 1;
    let y = (sy / count as f64).round_ties_even() as usize + 1;
    (x, y)
}

/// Structural similarity of one block; `None` for an empty block.
fn block_ssim(p: &EvalPair, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Option<f64> {
    let n = rows.len() * cols.len();
    if n == 0 {
        return None;
    }
    let w = p.width;
    let idx = || rows.clone().flat_map(|r| cols.clone().map(move |c| r * w + c));
    let x = idx().map(|i| p.pred[i]).sum::<f64>() / n as f64;
    let y = idx().map(|i| p.gt_f(i)).sum::<f64>() / n as f64;
    let denom = n.saturating_sub(1).max(1) as f64;
    let sx = idx().map(|i| (p.pred[i] - x).powi(2)).sum::<f64>() / denom;
    let sy = idx().map(|i| (p.gt_f(i) - y).powi(2)).sum::<f64>() / denom;
    let sxy = idx().map(|i| (p.pred[i] - x) * (p.gt_f(i) - y)).sum::<f64>() / denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    Some(if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    })
}

/// Region-aware term: four blocks split at the ground-truth centroid,
/// area-weighted block SSIM.
pub fn s_region(p: &EvalPair) -> f64 {
    let (w, h) = (p.width, p.height);
    let (x, y) = centroid(p);
    let (x, y) = (x.min(w), y.min(h));
    let area = (w * h) as f64;
    let blocks = [
        (0..y, 0..x),
        (0..y, x..w),
        (y..h, 0..x),
        (y..h, x..w),
    ];
    blocks
        .into_iter()
        .map(|(rows, cols)| {
            let weight = (rows.len() * cols.len()) as f64 / area;
            block_ssim(p, rows, cols).map_or(0.0, |s| weight * s)
        })
        .sum()
}

/// `α·S_o + (1 − α)·S_r`, clamped to `[0, 1]`. An all-background ground truth
/// scores `1 − mean(pred)`; an all-foreground one scores `mean(pred)`.
pub fn s_measure(p: &EvalPair, alpha: f64) -> f64 {
    let fg_fraction = p.gt.iter().filter(|&&g| g).count() as f64 / p.len() as f64;
    let mean_pred = p.pred.iter().sum::<f64>() / p.len() as f64;
    let q = if fg_fraction == 0.0 {
        1.0 - mean_pred
    } else if fg_fraction == 1.0 {
        mean_pred
    } else {
        alpha * s_object(p) + (1.0 - alpha) * s_region(p)
    };
    q.clamp(0.0, 1.0)
}

/// Mean enhanced alignment `(ξ + 1)² / 4` with
/// `ξ = 2·φ_G·φ_S / (φ_G² + φ_S²)` on mean-centred maps.
pub fn e_measure(p: &EvalPair) -> f64 {
    let n = p.len();
    let fg = p.gt.iter().filter(|&&g| g).count();
    let enhanced: f64 = if fg == 0 {
        p.pred.iter().map(|s| 1.0 - s).sum()
    } else if fg == n {
        p.pred.iter().sum()
    } else {
        let mu_s = p.pred.iter().sum::<f64>() / n as f64;
        let mu_g = fg as f64 / n as f64;
        (0..n)
            .map(|i| {
                let a = p.pred[i] - mu_s;
                let b = p.gt_f(i) - mu_g;
                let xi = 2.0 * a * b / (a * a + b * b);
                (xi + 1.0).powi(2) / 4.0
            })
            .sum()
    };
    enhanced / n as f64
}

/// All six metrics of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub mae: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub ber: f64,
    pub dice: f64,
    pub iou: f64,
}

impl ImageMetrics {
    pub fn values(&self) -> [f64; 6] {
        [self.mae, self.s_measure, self.e_measure, self.ber, self.dice, self.iou]
    }
}

pub fn evaluate_pair(p: &EvalPair, cfg: &MetricConfig) -> Result<ImageMetrics> {
    let (dice, iou) = dice_iou(p, cfg.threshold);
    Ok(ImageMetrics {
        id: p.id.clone(),
        mae: mae(p),
        s_measure: s_measure(p, cfg.alpha),
        e_measure: e_measure(p),
        ber: ber(p, cfg.threshold)?,
        dice,
        iou,
    })
}

pub const CSV_HEADER: &str = "image,mae,s_measure,e_measure,ber,dice,iou";

/// Per-image metrics plus their arithmetic means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
}

impl MetricReport {
    pub fn mean_dice(&self) -> f64 {
        self.mean.dice
    }

    pub fn mean_iou(&self) -> f64 {
        self.mean.iou
    }

    /// Header, one row per image in input order, then a `MEAN` row; six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for m in self.images.iter().chain(std::iter::once(&self.mean)) {
            let _ = write!(out, "{}", m.id);
            for v in m.values() {
                let _ = write!(out, ",{v:.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses a report CSV back into `(image, values)` rows, `MEAN` included.
    pub fn parse_csv(text: &str) -> Result<Vec<(String, [f64; 6])>> {
        let mut lines = text.lines();
        let mut offset = 0;
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => offset += h.len() + 1,
            _ => {
                return Err(Error::Parse {
                    offset: 0,
                    msg: "missing metrics header".into(),
                })
            }
        }
        let mut rows = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Parse {
                    offset,
                    msg: format!("expected 7 fields, got {}", fields.len()),
                });
            }
            let mut vals = [0.0; 6];
            for (v, f) in vals.iter_mut().zip(&fields[1..]) {
                *v = f.trim().parse().map_err(|_| Error::Parse {
                    offset,
                    msg: format!("bad number {f:?}"),
                })?;
            }
            rows.push((fields[0].to_string(), vals));
            offset += line.len() + 1;
        }
        Ok(rows)
    }
}

/// Scores every pair and averages. Order of the report follows the input.
pub fn evaluate_dataset(pairs: &[EvalPair], cfg: &MetricConfig) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let images = pairs.iter().map(|p| evaluate_pair(p, cfg)).collect::<Result<Vec<_>>>()?;
    let n = images.len() as f64;
    let avg = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    let mean = ImageMetrics {
        id: "MEAN".into(),
        mae: avg(|m| m.mae),
        s_measure: avg(|m| m.s_measure),
        e_measure: avg(|m| m.e_measure),
        ber: avg(|m| m.ber),
        dice: avg(|m| m.dice),
        iou: avg(|m| m.iou),
    };
    Ok(MetricReport { images, mean })
}
