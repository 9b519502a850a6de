//! Photometric and geometric views for the sample-level contrastive branch.
//!
//! Each view applies exactly one operation, drawn uniformly from the
//! strategy's set. Masks are never augmented.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AugmentKind {
    ColorJitter,
    Grayscale,
    RandomShift,
}

impl AugmentKind {
    pub fn short_name(self) -> &'static str {
        match self {
            AugmentKind::ColorJitter => "cj",
            AugmentKind::Grayscale => "gray",
            AugmentKind::RandomShift => "rs",
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cj" | "colorjitter" | "color_jitter" => Ok(AugmentKind::ColorJitter),
            "gray" | "grayscale" => Ok(AugmentKind::Grayscale),
            "rs" | "randomshift" | "random_shift" => Ok(AugmentKind::RandomShift),
            other => Err(Error::Config(format!("unknown augmentation {other:?}"))),
        }
    }
}

/// Ranges the per-view parameters are drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Maximum shift as a fraction of the image side.
    pub shift_frac: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            brightness: (0.6, 1.4),
            contrast: (0.6, 1.4),
            saturation: (0.6, 1.4),
            shift_frac: 0.1,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if lo < 0.0 || hi < lo || !hi.is_finite() {
                return Err(Error::Config(format!("invalid {name} range [{lo}, {hi}]")));
            }
        }
        if !(0.0..1.0).contains(&self.shift_frac) {
            return Err(Error::Config(format!("shift fraction {} not in [0, 1)", self.shift_frac)));
        }
        Ok(())
    }

    /// Maximum shift in pixels for a given image side.
    pub fn shift_extent(&self, side: usize) -> usize {
        (self.shift_frac * side as f64).round() as usize
    }
}

/// A non-empty set of augmentation kinds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentStrategy {
    kinds: Vec<AugmentKind>,
}

impl AugmentStrategy {
    pub fn new(mut kinds: Vec<AugmentKind>) -> Result<Self> {
        kinds.sort();
        kinds.dedup();
        if kinds.is_empty() {
            return Err(Error::Config("augmentation strategy is empty".into()));
        }
        Ok(AugmentStrategy { kinds })
    }

    pub fn kinds(&self) -> &[AugmentKind] {
        &self.kinds
    }
}

impl Default for AugmentStrategy {
    fn default() -> Self {
        AugmentStrategy {
            kinds: vec![AugmentKind::ColorJitter, AugmentKind::RandomShift],
        }
    }
}

impl FromStr for AugmentStrategy {
    type Err = Error;

    /// Parses `+`-joined short names, e.g. `cj+rs`.
    fn from_str(s: &str) -> Result<Self> {
        let kinds = s
            .split('+')
            .filter(|p| !p.trim().is_empty())
            .map(AugmentKind::from_str)
            .collect::<Result<Vec<_>>>()?;
        AugmentStrategy::new(kinds)
    }
}

impl fmt::Display for AugmentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.kinds.iter().map(|k| k.short_name()).collect();
        f.write_str(&names.join("+"))
    }
}

fn rgb_shape<T: Scalar>(img: &Tensor<T>) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        other => Err(Error::dim("augment", other, &[3, 0, 0])),
    }
}

fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

fn luma<T: Scalar>(data: &[T], plane: usize, i: usize) -> T {
    T::of(LUMA[0]) * data[i] + T::of(LUMA[1]) * data[plane + i] + T::of(LUMA[2]) * data[2 * plane + i]
}

/// Brightness scale, then contrast blend toward the image's mean luma, then
/// saturation blend toward each pixel's luma. Clamped after every stage.
pub fn color_jitter<T: Scalar>(img: &Tensor<T>, brightness: f64, contrast: f64, saturation: f64) -> Result<Tensor<T>> {
    let (h, w) = rgb_shape(img)?;
    if brightness < 0.0 || contrast < 0.0 || saturation < 0.0 {
        return Err(Error::Config("jitter factors must be non-negative".into()));
    }
    let plane = h * w;
    let mut out = img.clone();
    let data = out.data_mut();

    let b = T::of(brightness);
    data.iter_mut().for_each(|v| *v = clamp01(*v * b));

    let mean = (0..plane).map(|i| luma(data, plane, i)).sum::<T>() / T::of(plane as f64);
    let c = T::of(contrast);
    data.iter_mut().for_each(|v| *v = clamp01(c * *v + (T::one() - c) * mean));

    let s = T::of(saturation);
    for i in 0..plane {
        let y = luma(data, plane, i);
        for ch in 0..3 {
            let v = &mut data[ch * plane + i];
            *v = clamp01(s * *v + (T::one() - s) * y);
        }
    }
    Ok(out)
}

/// Luma `0.299R + 0.587G + 0.114B` copied into all three channels.
pub fn grayscale<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = rgb_shape(img)?;
    let plane = h * w;
    let mut out = img.clone();
    let data = out.data_mut();
    for i in 0..plane {
        let y = clamp01(luma(data, plane, i));
        for ch in 0..3 {
            data[ch * plane + i] = y;
        }
    }
    Ok(out)
}

/// Integer translation by `(dx, dy)`; vacated pixels become zero. Positive
/// `dx` moves content right, positive `dy` moves it down.
pub fn random_shift<T: Scalar>(img: &Tensor<T>, dx: i64, dy: i64) -> Result<Tensor<T>> {
    let (h, w) = rgb_shape(img)?;
    if dx.unsigned_abs() as usize >= w || dy.unsigned_abs() as usize >= h {
        return Err(Error::Config(format!("shift ({dx}, {dy}) too large for {w}x{h}")));
    }
    let src = img.data();
    let mut out = Tensor::zeros(img.shape().to_vec());
    let dst = out.data_mut();
    for ch in 0..3 {
        for y in 0..h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w as i64 {
                let sx = x - dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                dst[ch * h * w + (y as usize) * w + x as usize] = src[ch * h * w + (sy as usize) * w + sx as usize];
            }
        }
    }
    Ok(out)
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws one kind uniformly from the strategy.
pub fn choose_kind<R: Rng + ?Sized>(strategy: &AugmentStrategy, rng: &mut R) -> AugmentKind {
    strategy.kinds[rng.random_range(0..strategy.kinds.len())]
}

/// Applies one operation drawn uniformly from the strategy, with parameters
/// drawn from `params`.
pub fn sample_view<T: Scalar, R: Rng + ?Sized>(
    img: &Tensor<T>,
    strategy: &AugmentStrategy,
    params: &AugmentParams,
    rng: &mut R,
) -> Result<Tensor<T>> {
    params.validate()?;
    let (h, w) = rgb_shape(img)?;
    match choose_kind(strategy, rng) {
        AugmentKind::ColorJitter => {
            let b = draw(rng, params.brightness);
            let c = draw(rng, params.contrast);
            let s = draw(rng, params.saturation);
            color_jitter(img, b, c, s)
        }
        AugmentKind::Grayscale => grayscale(img),
        AugmentKind::RandomShift => {
            let extent = params.shift_extent(h.min(w));
            if extent >= h.min(w) {
                return Err(Error::Config("shift extent must be smaller than the image".into()));
            }
            let e = extent as i64;
            let dx = rng.random_range(-e..=e);
            let dy = rng.random_range(-e..=e);
            random_shift(img, dx, dy)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_img(seed: u64, side: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * side * side).map(|_| rng.random::<f64>()).collect();
        Tensor::new([3, side, side], data).unwrap()
    }

    #[test]
    fn unit_jitter_is_identity() {
        let img = random_img(1, 8);
        let out = color_jitter(&img, 1.0, 1.0, 1.0).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_brightness_blacks_out() {
        let img = random_img(2, 8);
        let out = color_jitter(&img, 0.0, 1.0, 1.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_brightness_on_constant() {
        let img = Tensor::<f64>::full([3, 4, 4], 0.8);
        let out = color_jitter(&img, 0.5, 1.0, 1.0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn negative_factor_is_config_error() {
        let img = random_img(3, 4);
        assert!(matches!(color_jitter(&img, -0.1, 1.0, 1.0), Err(Error::Config(_))));
        let bad = AugmentParams {
            contrast: (-1.0, 1.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grayscale_red_pixel_and_fixed_point() {
        let mut img = Tensor::<f64>::zeros([3, 1, 1]);
        img.data_mut()[0] = 1.0;
        let g = grayscale(&img).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.299).abs() < 1e-12));

        let gray = Tensor::<f64>::full([3, 2, 2], 0.37);
        let out = grayscale(&gray).unwrap();
        for (a, b) in gray.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn grayscale_is_idempotent() {
        let img = random_img(4, 6);
        let once = grayscale(&img).unwrap();
        let twice = grayscale(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_moves_one_hot_and_accounts_mass() {
        let mut img = Tensor::<f64>::zeros([3, 4, 4]);
        img.data_mut()[5] = 1.0; // channel 0, row 1, col 1
        let out = random_shift(&img, 1, 0).unwrap();
        assert_eq!(out.data()[6], 1.0);
        assert_eq!(out.data().iter().sum::<f64>(), 1.0);
        assert_eq!(random_shift(&img, 0, 0).unwrap(), img);

        let img = random_img(5, 6);
        let out = random_shift(&img, 2, -1).unwrap();
        // pushed out: the two right-most columns and the top row of the source
        let mut lost = 0.0;
        for ch in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    if x >= 4 || y == 0 {
                        lost += img.data()[ch * 36 + y * 6 + x];
                    }
                }
            }
        }
        let before: f64 = img.data().iter().sum();
        let after: f64 = out.data().iter().sum();
        assert!((before - after - lost).abs() < 1e-9);
        assert!(random_shift(&img, 6, 0).is_err());
    }

    #[test]
    fn strategy_parsing() {
        let s: AugmentStrategy = "rs+cj".parse().unwrap();
        assert_eq!(s, AugmentStrategy::default());
        assert_eq!(s.to_string(), "cj+rs");
        assert!("".parse::<AugmentStrategy>().is_err());
        assert!("blur".parse::<AugmentStrategy>().is_err());
    }

    #[test]
    fn singleton_gray_strategy_always_grays() {
        let s: AugmentStrategy = "gray".parse().unwrap();
        let img = random_img(6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let expect = grayscale(&img).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_view(&img, &s, &AugmentParams::default(), &mut rng).unwrap(), expect);
        }
    }

    #[test]
    fn kinds_are_drawn_uniformly() {
        let s = AugmentStrategy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let cj = (0..n)
            .filter(|_| choose_kind(&s, &mut rng) == AugmentKind::ColorJitter)
            .count();
        let freq = cj as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn views_are_deterministic_per_seed() {
        let img = random_img(7, 16);
        let s = AugmentStrategy::default();
        let p = AugmentParams::default();
        let a = sample_view(&img, &s, &p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = sample_view(&img, &s, &p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert!(a.bitwise_eq(&b));
    }
}
