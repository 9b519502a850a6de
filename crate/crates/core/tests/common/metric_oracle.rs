//! Independent metric implementations over 2-D indices.

use mca_core::metrics::EvalPair;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Map {
    pub w: usize,
    pub h: usize,
    pub s: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

impl Map {
    pub fn from_pair(p: &EvalPair) -> Map {
        let (w, h) = (p.width, p.height);
        let s = (0..h).map(|r| (0..w).map(|c| p.pred[r * w + c]).collect()).collect();
        let g = (0..h)
            .map(|r| (0..w).map(|c| if p.gt[r * w + c] { 1.0 } else { 0.0 }).collect())
            .collect();
        Map { w, h, s, g }
    }

    fn area(&self) -> f64 {
        (self.w * self.h) as f64
    }
}

pub fn oracle_mae(m: &Map) -> f64 {
    let mut e = 0.0;
    for r in 0..m.h {
        for c in 0..m.w {
            e += (m.s[r][c] - m.g[r][c]).abs();
        }
    }
    e / m.area()
}

pub fn counts(m: &Map) -> (f64, f64, f64, f64) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for r in 0..m.h {
        for c in 0..m.w {
            let pos = m.s[r][c] >= 0.5;
            let gt = m.g[r][c] == 1.0;
            match (pos, gt) {
                (true, true) => tp += 1.0,
                (false, false) => tn += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
            }
        }
    }
    (tp, tn, fp, fn_)
}

pub fn oracle_ber(m: &Map) -> f64 {
    let (tp, tn, fp, fn_) = counts(m);
    100.0 * (1.0 - 0.5 * (tp / (tp + fn_) + tn / (tn + fp)))
}

pub fn oracle_dice_iou(m: &Map) -> (f64, f64) {
    let (tp, _, fp, fn_) = counts(m);
    (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
}

pub fn object(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    2.0 * mean / (mean * mean + 1.0 + var.sqrt() + f64::EPSILON)
}

pub fn oracle_s_object(m: &Map) -> f64 {
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    for r in 0..m.h {
        for c in 0..m.w {
            if m.g[r][c] == 1.0 {
                fg.push(m.s[r][c]);
            } else {
                bg.push(1.0 - m.s[r][c]);
            }
        }
    }
    let u = fg.len() as f64 / m.area();
    u * object(&fg) + (1.0 - u) * object(&bg)
}

pub fn ssim(m: &Map, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in r0..r1 {
        for c in c0..c1 {
            sx += m.s[r][c];
            sy += m.g[r][c];
        }
    }
    let (x, y) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for r in r0..r1 {
        for c in c0..c1 {
            vx += (m.s[r][c] - x).powi(2);
            vy += (m.g[r][c] - y).powi(2);
            cxy += (m.s[r][c] - x) * (m.g[r][c] - y);
        }
    }
    let d = (n - 1.0).max(1.0);
    let (vx, vy, cxy) = (vx / d, vy / d, cxy / d);
    let a = 4.0 * x * y * cxy;
    let b = (x * x + y * y) * (vx + vy);
    if a != 0.0 {
        a / (b + f64::EPSILON)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn oracle_s_region(m: &Map) -> f64 {
    let (mut n, mut sr, mut sc) = (0.0, 0.0, 0.0);
    for r in 0..m.h {
        for c in 0..m.w {
            if m.g[r][c] == 1.0 {
                n += 1.0;
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    let x = ((sc / n).round_ties_even() as usize + 1).min(m.w);
    let y = ((sr / n).round_ties_even() as usize + 1).min(m.h);
    let weight = |rows: usize, cols: usize| (rows * cols) as f64 / m.area();
    weight(y, x) * ssim(m, 0, y, 0, x)
        + weight(y, m.w - x) * ssim(m, 0, y, x, m.w)
        + weight(m.h - y, x) * ssim(m, y, m.h, 0, x)
        + weight(m.h - y, m.w - x) * ssim(m, y, m.h, x, m.w)
}

pub fn oracle_s_measure(m: &Map) -> f64 {
    (0.5 * oracle_s_object(m) + 0.5 * oracle_s_region(m)).clamp(0.0, 1.0)
}

pub fn oracle_e_measure(m: &Map) -> f64 {
    let (mut ms, mut mg) = (0.0, 0.0);
    for r in 0..m.h {
        for c in 0..m.w {
            ms += m.s[r][c];
            mg += m.g[r][c];
        }
    }
    let (ms, mg) = (ms / m.area(), mg / m.area());
    let mut total = 0.0;
    for r in 0..m.h {
        for c in 0..m.w {
            let a = m.s[r][c] - ms;
            let b = m.g[r][c] - mg;
            let xi = 2.0 * a * b / (a * a + b * b);
            total += (xi + 1.0) * (xi + 1.0) / 4.0;
        }
    }
    total / m.area()
}

pub fn random_pair(rng: &mut ChaCha8Rng, side: usize, id: usize) -> EvalPair {
    loop {
        // one rectangle of foreground plus noise flips
        let (r0, c0) = (rng.random_range(0..side - 2), rng.random_range(0..side - 2));
        let (r1, c1) = (rng.random_range(r0 + 1..side), rng.random_range(c0 + 1..side));
        let gt: Vec<bool> = (0..side * side)
            .map(|i| {
                let (r, c) = (i / side, i % side);
                let inside = (r0..r1).contains(&r) && (c0..c1).contains(&c);
                inside ^ (rng.random::<f64>() < 0.05)
            })
            .collect();
        let fg = gt.iter().filter(|&&g| g).count();
        if fg == 0 || fg == gt.len() {
            continue;
        }
        let pred: Vec<f64> = gt
            .iter()
            .map(|&g| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => {
                    let base = if g { 0.7 } else { 0.3 };
                    (base + rng.random_range(-0.5..0.5f64)).clamp(0.0, 1.0)
                }
            })
            .collect();
        return EvalPair::new(format!("r{id}"), side, side, pred, gt).unwrap();
    }
}

/// All six oracle metrics in report order.
pub fn oracle_values(p: &EvalPair) -> [f64; 6] {
    let m = Map::from_pair(p);
    let (dice, iou) = oracle_dice_iou(&m);
    [oracle_mae(&m), oracle_s_measure(&m), oracle_e_measure(&m), oracle_ber(&m), dice, iou]
}
