//! Frozen encoder, per-layer adaptors and the mask head, plus the batch
//! objective shared by training and gradient checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptors::{
    sample_contrastive_loss, sc_forward, tc_forward, token_contrastive_loss, AdaptorStack, ContrastConfig, ScVars, TcVars,
};
use crate::config::TrainConfig;
use crate::encoder::{encoder_forward, tokenize, EncoderConfig, EncoderState, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::objectives::{bce_loss, decode_mask, iou_loss, total_loss, DecoderVars, DecoderWeights, LossTerms, LossWeights};
use crate::synth::derive_seed;
use crate::tensor::{Scalar, Tensor};

const STREAM_ENCODER: u64 = 10;
const STREAM_ADAPTORS: u64 = 11;
const STREAM_PAIRS: u64 = 12;
const STREAM_DECODER: u64 = 13;

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub encoder: EncoderState<T>,
    pub adaptors: AdaptorStack<T>,
    pub decoder: DecoderWeights<T>,
}

/// Graph handles for every model tensor.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub tc: Vec<TcVars>,
    pub sc: Vec<ScVars>,
    pub decoder: DecoderVars,
}

impl ModelVars {
    /// Handles in [`Model::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.encoder.vars();
        out.extend(self.tc.iter().flat_map(TcVars::vars));
        out.extend(self.sc.iter().flat_map(ScVars::vars));
        out.extend(self.decoder.vars());
        out
    }
}

impl<T: Scalar> Model<T> {
    /// Seeded encoder, adaptors and decoder. The encoder depends only on
    /// the seed and geometry, so every variant trained with one seed shares it.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ENCODER, 0));
        let encoder = EncoderState::init(e.clone(), &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ADAPTORS, 0));
        let adaptors = AdaptorStack::init(e.num_layers, e.embed_dim, cfg.bottleneck, cfg.tc_up_init_std(), &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DECODER, 0));
        Ok(Model {
            encoder,
            adaptors,
            decoder: DecoderWeights::init(e.embed_dim, &mut rng),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(g),
            tc: self.adaptors.tc.iter().map(|a| a.bind(g)).collect(),
            sc: self.adaptors.sc.iter().map(|a| a.bind(g)).collect(),
            decoder: self.decoder.bind(g),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named();
        out.extend(self.adaptors.named());
        out.extend(self.decoder.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.encoder.named_mut();
        out.extend(self.adaptors.named_mut());
        out.extend(self.decoder.named_mut());
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            encoder: self.encoder.cast(),
            adaptors: self.adaptors.cast(),
            decoder: self.decoder.cast(),
        }
    }

    /// Overwrites every tensor from `(name, tensor)` pairs. Missing names,
    /// unknown names and shape changes are errors.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let mut named = self.named_mut();
        if tensors.len() < named.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model needs {}",
                tensors.len(),
                named.len()
            )));
        }
        for (name, src) in tensors {
            let Some((_, dst)) = named.iter_mut().find(|(n, _)| n == name) else {
                if name.starts_with("opt.") {
                    continue;
                }
                return Err(Error::Config(format!("unknown tensor {name:?}")));
            };
            if dst.shape() != src.shape() {
                return Err(Error::Config(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Probability map `[H, W]` for one image; token adaptors join the residual
/// stream when `adapted`.
pub fn predict<T: Scalar>(g: &mut Graph<'_, T>, mv: &ModelVars, cfg: &EncoderConfig, image: &Tensor<T>, adapted: bool) -> Result<Var> {
    let x0 = tokenize(g, image, cfg, &mv.encoder)?;
    let trace = encoder_forward(g, x0, &mv.encoder, adapted.then_some(&mv.tc[..]))?;
    decode_mask(g, trace.last(), &mv.decoder, cfg.grid(), cfg.patch_size)
}

fn mean_of<T: Scalar>(g: &mut Graph<'_, T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(g.scale(acc, T::of(1.0 / vars.len() as f64)))
}

/// Graph nodes of one batch objective.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub terms: LossTerms,
    pub total: Var,
    /// Probability map per original image.
    pub preds: Vec<Var>,
}

/// What the objective computes for one batch.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    pub adapted: bool,
    pub cl_t: bool,
    pub cl_s: bool,
    pub adapted_aug_pass: bool,
    pub local_contrast: bool,
    pub weights: LossWeights,
    pub contrast: ContrastConfig,
}

impl ObjectiveSpec {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        ObjectiveSpec {
            adapted: cfg.variant.uses_adaptors(),
            cl_t: cfg.variant.uses_cl_t(),
            cl_s: cfg.variant.uses_cl_s(),
            adapted_aug_pass: cfg.adapted_aug_pass,
            local_contrast: cfg.local_contrast,
            weights: cfg.effective_weights(),
            contrast: cfg.contrast(),
        }
    }
}

/// Builds the training objective for a batch.
///
/// Each image runs through the encoder (with token adaptors when `adapted`),
/// the head decodes a mask from the last layer and BCE + IoU are averaged over
/// the batch. The token term contrasts each adaptor's input and output tokens,
/// averaged over layers then images. The sample term contrasts per-layer
/// sample embeddings of the originals against those of `augmented`, one view
/// per image, averaged over layers.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<T: Scalar>(
    g: &mut Graph<'_, T>,
    mv: &ModelVars,
    cfg: &EncoderConfig,
    spec: &ObjectiveSpec,
    images: &[&Tensor<T>],
    masks: &[&Tensor<T>],
    augmented: &[Tensor<T>],
    pair_seed: u64,
) -> Result<BatchOutput> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::Contract(format!("{} images with {} masks", images.len(), masks.len())));
    }
    if spec.cl_s && augmented.len() != images.len() {
        return Err(Error::Contract(format!("{} augmented views for {} images", augmented.len(), images.len())));
    }
    if (spec.cl_t || spec.cl_s) && !spec.adapted {
        return Err(Error::Contract("contrastive terms need adaptors".into()));
    }
    let layers = mv.encoder.layers.len();
    let tc = spec.adapted.then_some(&mv.tc[..]);
    let contrast_input = |g: &mut Graph<'_, T>, x: Var| if spec.local_contrast { g.detach(x) } else { x };
    let (mut bce, mut iou, mut cl_t, mut preds) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut eps: Vec<Vec<Var>> = vec![Vec::new(); layers];
    let mut eps_aug: Vec<Vec<Var>> = vec![Vec::new(); layers];

    for (b, (&image, &mask)) in images.iter().zip(masks).enumerate() {
        let x0 = tokenize(g, image, cfg, &mv.encoder)?;
        let trace = encoder_forward(g, x0, &mv.encoder, tc)?;
        let pred = decode_mask(g, trace.last(), &mv.decoder, cfg.grid(), cfg.patch_size)?;
        let gt = g.constant(mask.clone());
        bce.push(bce_loss(g, pred, gt)?);
        iou.push(iou_loss(g, pred, gt)?);
        preds.push(pred);

        if spec.cl_t {
            let per_layer = (0..layers)
                .map(|l| {
                    let contrast = ContrastConfig {
                        seed: derive_seed(pair_seed, STREAM_PAIRS, (b * layers + l) as u64),
                        ..spec.contrast.clone()
                    };
                    let (x, y) = if spec.local_contrast {
                        let x = g.detach(trace.inputs[l]);
                        (x, tc_forward(g, x, &mv.tc[l])?)
                    } else {
                        (trace.inputs[l], trace.adaptor_outputs[l])
                    };
                    token_contrastive_loss(g, x, y, &contrast)
                })
                .collect::<Result<Vec<_>>>()?;
            cl_t.push(mean_of(g, &per_layer)?);
        }
        if spec.cl_s {
            for (l, e) in eps.iter_mut().enumerate() {
                let x = contrast_input(g, trace.inputs[l]);
                e.push(sc_forward(g, x, &mv.sc[l])?);
            }
            let xa = tokenize(g, &augmented[b], cfg, &mv.encoder)?;
            let trace_a = encoder_forward(g, xa, &mv.encoder, if spec.adapted_aug_pass { tc } else { None })?;
            for (l, e) in eps_aug.iter_mut().enumerate() {
                let x = contrast_input(g, trace_a.inputs[l]);
                e.push(sc_forward(g, x, &mv.sc[l])?);
            }
        }
    }

    let cl_s = if spec.cl_s {
        let per_layer = (0..layers)
            .map(|l| sample_contrastive_loss(g, &eps[l], &eps_aug[l], &spec.contrast))
            .collect::<Result<Vec<_>>>()?;
        Some(mean_of(g, &per_layer)?)
    } else {
        None
    };
    let terms = LossTerms {
        bce: mean_of(g, &bce)?,
        iou: mean_of(g, &iou)?,
        cl_t: if spec.cl_t { Some(mean_of(g, &cl_t)?) } else { None },
        cl_s,
    };
    let total = total_loss(g, &terms, &spec.weights)?;
    Ok(BatchOutput { terms, total, preds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    fn tiny(variant: Variant) -> TrainConfig {
        let mut cfg = TrainConfig {
            variant,
            ..Default::default()
        };
        cfg.encoder.image_size = 16;
        cfg.encoder.patch_size = 4;
        cfg.encoder.embed_dim = 16;
        cfg.encoder.num_layers = 2;
        cfg.encoder.num_heads = 2;
        cfg.encoder.mlp_ratio = 2;
        cfg.bottleneck = 4;
        cfg
    }

    #[test]
    fn var_order_matches_names() {
        let model = Model::<f32>::init(&tiny(Variant::Mca)).unwrap();
        let mut g = Graph::new();
        let mv = model.bind(&mut g);
        let vars = mv.vars();
        let named = model.named();
        assert_eq!(vars.len(), named.len());
        for (v, (name, t)) in vars.iter().zip(&named) {
            assert_eq!(g.shape(*v), t.shape(), "{name}");
            assert_eq!(g.value(*v).as_ptr(), t.data().as_ptr(), "{name}");
        }
    }

    #[test]
    fn encoder_is_shared_across_variants() {
        let a = Model::<f32>::init(&tiny(Variant::DecoderOnly)).unwrap();
        let b = Model::<f32>::init(&tiny(Variant::Mca)).unwrap();
        for ((n, x), (_, y)) in a.named().iter().zip(b.named()) {
            assert!(x.bitwise_eq(y), "{n}");
        }
        assert!(a.encoder.named().iter().all(|(_, t)| !t.requires_grad()));
        assert!(a.adaptors.named().iter().all(|(_, t)| t.requires_grad()));
    }

    #[test]
    fn objective_terms_follow_the_variant() {
        let image = Tensor::full([3, 16, 16], 0.4f64);
        let mut mask = Tensor::zeros([16, 16]);
        mask.data_mut()[..64].fill(1.0);
        let aug = vec![Tensor::full([3, 16, 16], 0.6f64)];
        for variant in Variant::ALL {
            let cfg = tiny(variant);
            let model = Model::<f64>::init(&cfg).unwrap();
            let mut g = Graph::new();
            let mv = model.bind(&mut g);
            let spec = ObjectiveSpec::from_config(&cfg);
            let out = batch_objective(&mut g, &mv, &cfg.encoder, &spec, &[&image], &[&mask], &aug, 0).unwrap();
            assert_eq!(out.terms.cl_t.is_some(), variant.uses_cl_t());
            assert_eq!(out.terms.cl_s.is_some(), variant.uses_cl_s());
            if let Some(s) = out.terms.cl_s {
                // a single image has no negatives
                assert_eq!(g.scalar(s), 0.0);
            }
            assert!(g.scalar(out.total).is_finite());
        }
    }
}
