//! Scene difficulty checked with a fixed intensity-threshold baseline.

use mca_core::synth::{generate_sample, train_seed, Sample, SceneKind, SceneSpec, OCCUPANCY};

fn luminance(s: &Sample) -> Vec<f64> {
    let n = s.mask.len();
    let d = s.image.data();
    (0..n)
        .map(|i| (0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]) as f64)
        .collect()
}

/// Otsu threshold over a 256-bin histogram of `[0, 1]` values.
fn otsu(values: &[f64]) -> f64 {
    let mut hist = [0usize; 256];
    for v in values {
        hist[((v.clamp(0.0, 1.0) * 255.0).round()) as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_t) = (0.0, 0.0, -1.0, 0);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let between = w0 * w1 * (sum0 / w0 - (sum_all - sum0) / w1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f64 + 0.5) / 255.0
}

/// IoU of thresholding at `t`: bright pixels for camouflage, dark for shadow.
fn threshold_iou(s: &Sample, kind: SceneKind, t: f64) -> f64 {
    let lum = luminance(s);
    let gt = s.mask_bits();
    let (mut inter, mut union) = (0usize, 0usize);
    for (v, g) in lum.iter().zip(gt) {
        let p = match kind {
            SceneKind::Camouflage => *v > t,
            SceneKind::Shadow => *v < t,
        };
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    inter as f64 / union as f64
}

fn otsu_iou(s: &Sample, kind: SceneKind) -> f64 {
    threshold_iou(s, kind, otsu(&luminance(s)))
}

/// Best IoU over every 8-bit threshold.
fn best_iou(s: &Sample, kind: SceneKind) -> f64 {
    (0..256)
        .map(|t| threshold_iou(s, kind, (t as f64 + 0.5) / 255.0))
        .fold(0.0, f64::max)
}

fn mean_iou(kind: SceneKind, gap: f64, n: u64, score: fn(&Sample, SceneKind) -> f64) -> f64 {
    let spec = SceneSpec {
        kind,
        contrast_gap: gap,
        ..Default::default()
    };
    let total: f64 = (0..n)
        .map(|i| score(&generate_sample(&spec, train_seed(77, i), "s").unwrap(), kind))
        .sum();
    total / n as f64
}

#[test]
fn full_gap_is_separable_by_threshold() {
    for kind in [SceneKind::Camouflage, SceneKind::Shadow] {
        let iou = mean_iou(kind, 1.0, 50, best_iou);
        assert!(iou > 0.9, "{kind}: {iou}");
    }
}

#[test]
fn baseline_improves_as_the_gap_widens() {
    for kind in [SceneKind::Camouflage, SceneKind::Shadow] {
        let ious: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&g| mean_iou(kind, g, 50, otsu_iou)).collect();
        assert!(ious.windows(2).all(|w| w[0] <= w[1]), "{kind}: {ious:?}");
    }
}

#[test]
fn occupancy_stays_in_range() {
    let spec = SceneSpec::default();
    for i in 0..200 {
        let s = generate_sample(&spec, train_seed(5, i), "s").unwrap();
        let frac = s.mask_bits().iter().filter(|&&b| b).count() as f64 / s.mask.len() as f64;
        assert!((OCCUPANCY.0..=OCCUPANCY.1).contains(&frac), "{frac}");
    }
}
