//! Training configuration and its flat `key = value` text form.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::adaptors::ContrastConfig;
use crate::augment::{AugmentParams, AugmentStrategy};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::optim::AdamW;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "MCA_SEED";

/// Which trainable parts and loss terms a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Frozen encoder and decoder head only.
    DecoderOnly,
    /// Token adaptors in the residual stream, no contrastive terms.
    AdaptorPlain,
    /// Adaptors with the token contrastive term.
    TcOnly,
    /// Adaptors with the sample contrastive term.
    ScOnly,
    /// Adaptors with both contrastive terms.
    Mca,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::DecoderOnly,
        Variant::AdaptorPlain,
        Variant::TcOnly,
        Variant::ScOnly,
        Variant::Mca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DecoderOnly => "decoder_only",
            Variant::AdaptorPlain => "adaptor_plain",
            Variant::TcOnly => "tc_only",
            Variant::ScOnly => "sc_only",
            Variant::Mca => "mca",
        }
    }

    pub fn uses_adaptors(self) -> bool {
        self != Variant::DecoderOnly
    }

    pub fn uses_cl_t(self) -> bool {
        matches!(self, Variant::TcOnly | Variant::Mca)
    }

    pub fn uses_cl_s(self) -> bool {
        matches!(self, Variant::ScOnly | Variant::Mca)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    /// Adaptor bottleneck ratio `r`: hidden width is `d / r`.
    pub bottleneck: usize,
    /// Init std of the token adaptor up-projection; `None` scales by fan-in
    /// like every other layer, 0 makes adaptors start as an exact no-op.
    pub tc_up_std: Option<f64>,
    pub temperature: f64,
    /// Cap on token pairs per contrastive loss; 0 scores all pairs.
    pub token_pair_limit: usize,
    pub augment: AugmentStrategy,
    pub augment_params: AugmentParams,
    /// Whether the augmented pass also runs through the token adaptors.
    pub adapted_aug_pass: bool,
    /// Contrastive terms see adaptor inputs as constants, so each term trains
    /// only the adaptor it scores.
    pub local_contrast: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub optimizer: AdamW,
    pub weights: LossWeights,
    pub variant: Variant,
    pub seed: u64,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            bottleneck: 8,
            tc_up_std: None,
            temperature: 0.1,
            token_pair_limit: 0,
            augment: AugmentStrategy::default(),
            augment_params: AugmentParams::default(),
            adapted_aug_pass: true,
            local_contrast: true,
            batch_size: 8,
            epochs: 30,
            lr_start: 2e-4,
            lr_end: 1e-7,
            optimizer: AdamW::default(),
            weights: LossWeights::default(),
            variant: Variant::Mca,
            seed: 0,
            data_root: None,
            out_dir: None,
        }
    }
}

fn parse_num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected lo,hi")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "image_size",
        "patch_size",
        "embed_dim",
        "num_layers",
        "num_heads",
        "mlp_ratio",
        "bottleneck",
        "tc_up_std",
        "temperature",
        "token_pair_limit",
        "augment",
        "brightness",
        "contrast",
        "saturation",
        "shift_frac",
        "adapted_aug_pass",
        "local_contrast",
        "batch_size",
        "epochs",
        "lr_start",
        "lr_end",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "w_bce",
        "w_iou",
        "w_cl_t",
        "w_cl_s",
        "variant",
        "seed",
        "data_root",
        "out_dir",
    ];

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment_params.validate()?;
        self.contrast().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return bad(format!("need lr_start > lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.bottleneck == 0 || !self.encoder.embed_dim.is_multiple_of(self.bottleneck) {
            return bad(format!("bottleneck {} must divide embed_dim {}", self.bottleneck, self.encoder.embed_dim));
        }
        if self.tc_up_std.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return bad("tc_up_std must be a non-negative number".into());
        }
        let w = &self.weights;
        if [w.bce, w.iou, w.cl_t, w.cl_s].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// Resolved token adaptor up-projection init std.
    pub fn tc_up_init_std(&self) -> f64 {
        self.tc_up_std
            .unwrap_or_else(|| 1.0 / ((self.encoder.embed_dim / self.bottleneck).max(1) as f64).sqrt())
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            temperature: self.temperature,
            token_pair_limit: (self.token_pair_limit > 0).then_some(self.token_pair_limit),
            seed: 0,
        }
    }

    /// Loss weights with the contrastive terms the variant leaves out set to 0.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            cl_t: if self.variant.uses_cl_t() { self.weights.cl_t } else { 0.0 },
            cl_s: if self.variant.uses_cl_s() { self.weights.cl_s } else { 0.0 },
            ..self.weights
        }
    }

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "image_size" => self.encoder.image_size = parse_num(key, v)?,
            "patch_size" => self.encoder.patch_size = parse_num(key, v)?,
            "embed_dim" => self.encoder.embed_dim = parse_num(key, v)?,
            "num_layers" => self.encoder.num_layers = parse_num(key, v)?,
            "num_heads" => self.encoder.num_heads = parse_num(key, v)?,
            "mlp_ratio" => self.encoder.mlp_ratio = parse_num(key, v)?,
            "bottleneck" => self.bottleneck = parse_num(key, v)?,
            "tc_up_std" => self.tc_up_std = if v == "fan_in" { None } else { Some(parse_num(key, v)?) },
            "temperature" => self.temperature = parse_num(key, v)?,
            "token_pair_limit" => self.token_pair_limit = parse_num(key, v)?,
            "augment" => self.augment = v.parse()?,
            "brightness" => self.augment_params.brightness = parse_range(key, v)?,
            "contrast" => self.augment_params.contrast = parse_range(key, v)?,
            "saturation" => self.augment_params.saturation = parse_range(key, v)?,
            "shift_frac" => self.augment_params.shift_frac = parse_num(key, v)?,
            "adapted_aug_pass" => self.adapted_aug_pass = parse_bool(key, v)?,
            "local_contrast" => self.local_contrast = parse_bool(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr_start" => self.lr_start = parse_num(key, v)?,
            "lr_end" => self.lr_end = parse_num(key, v)?,
            "beta1" => self.optimizer.beta1 = parse_num(key, v)?,
            "beta2" => self.optimizer.beta2 = parse_num(key, v)?,
            "adam_eps" => self.optimizer.eps = parse_num(key, v)?,
            "weight_decay" => self.optimizer.weight_decay = parse_num(key, v)?,
            "w_bce" => self.weights.bce = parse_num(key, v)?,
            "w_iou" => self.weights.iou = parse_num(key, v)?,
            "w_cl_t" => self.weights.cl_t = parse_num(key, v)?,
            "w_cl_s" => self.weights.cl_s = parse_num(key, v)?,
            "variant" => self.variant = v.parse()?,
            "seed" => self.seed = parse_num(key, v)?,
            "data_root" => self.data_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Replaces the seed with `MCA_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_num(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    /// Every key in [`Self::KEYS`] order; `parse(to_text())` is exact.
    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let a = &self.augment_params;
        let o = &self.optimizer;
        let w = &self.weights;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<String> = vec![
            e.image_size.to_string(),
            e.patch_size.to_string(),
            e.embed_dim.to_string(),
            e.num_layers.to_string(),
            e.num_heads.to_string(),
            e.mlp_ratio.to_string(),
            self.bottleneck.to_string(),
            self.tc_up_std.map_or("fan_in".into(), |s| s.to_string()),
            self.temperature.to_string(),
            self.token_pair_limit.to_string(),
            self.augment.to_string(),
            format!("{},{}", a.brightness.0, a.brightness.1),
            format!("{},{}", a.contrast.0, a.contrast.1),
            format!("{},{}", a.saturation.0, a.saturation.1),
            a.shift_frac.to_string(),
            self.adapted_aug_pass.to_string(),
            self.local_contrast.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.lr_start.to_string(),
            self.lr_end.to_string(),
            o.beta1.to_string(),
            o.beta2.to_string(),
            o.eps.to_string(),
            o.weight_decay.to_string(),
            w.bce.to_string(),
            w.iou.to_string(),
            w.cl_t.to_string(),
            w.cl_s.to_string(),
            self.variant.to_string(),
            self.seed.to_string(),
            path(&self.data_root),
            path(&self.out_dir),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig {
            variant: Variant::TcOnly,
            seed: 17,
            lr_start: 3.3e-4,
            data_root: Some("data/cam".into()),
            ..Default::default()
        };
        cfg.augment = "gray+rs".parse().unwrap();
        cfg.augment_params.brightness = (0.5, 1.5);
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(TrainConfig::parse(&TrainConfig::default().to_text()).unwrap(), TrainConfig::default());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(TrainConfig::parse("learning_rate = 1"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("epochs = ten").is_err());
        assert!(TrainConfig::parse("epochs 10").is_err());
        assert!(TrainConfig::parse("epochs = 1\nepochs = 2").is_err());
        assert!(TrainConfig::parse("variant = sam").is_err());
        let cfg = TrainConfig::parse("# comment\n\n epochs = 3 \nvariant = sc_only\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.variant, Variant::ScOnly);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_end: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            bottleneck: 7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variant_terms() {
        let cfg = |variant| TrainConfig {
            variant,
            ..Default::default()
        };
        let w = cfg(Variant::AdaptorPlain).effective_weights();
        assert_eq!((w.cl_t, w.cl_s), (0.0, 0.0));
        let w = cfg(Variant::TcOnly).effective_weights();
        assert_eq!((w.cl_t, w.cl_s), (1.0, 0.0));
        let w = cfg(Variant::Mca).effective_weights();
        assert_eq!((w.cl_t, w.cl_s), (1.0, 1.0));
        assert!(!Variant::DecoderOnly.uses_adaptors());
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
