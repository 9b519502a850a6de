//! Toy vision-transformer image encoder with frozen weights.
//!
//! Images are cut into square patches, linearly projected, offset by a learned
//! position embedding, then passed through `num_layers` pre-norm transformer
//! layers. When adaptors are supplied, each layer output becomes
//! `layer(x) + adaptor(x)` on the same input `x`.

use rand::Rng;

use crate::adaptors::{tc_forward, TcVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Geometry of the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 16,
            channels: 3,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail("image_size must be a positive multiple of patch_size");
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail("embed_dim must be a positive multiple of num_heads");
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1");
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return fail("channels and mlp_ratio must be positive");
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count `K`.
    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Weights of one pre-norm transformer layer.
#[derive(Clone, Debug)]
pub struct LayerWeights<T: Scalar> {
    pub norm1_gamma: Tensor<T>,
    pub norm1_beta: Tensor<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub norm2_gamma: Tensor<T>,
    pub norm2_beta: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
    pub num_heads: usize,
}

/// Graph handles for one bound layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    norm1_gamma: Var,
    norm1_beta: Var,
    qkv_w: Var,
    qkv_b: Var,
    proj_w: Var,
    proj_b: Var,
    norm2_gamma: Var,
    norm2_beta: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
    num_heads: usize,
}

impl LayerVars {
    /// Builds handles from twelve vars in [`LayerWeights::named`] order.
    pub fn from_vars(vars: &[Var], num_heads: usize) -> Result<Self> {
        let &[norm1_gamma, norm1_beta, qkv_w, qkv_b, proj_w, proj_b, norm2_gamma, norm2_beta, fc1_w, fc1_b, fc2_w, fc2_b] =
            vars
        else {
            return Err(Error::Contract(format!("a layer binds 12 tensors, got {}", vars.len())));
        };
        Ok(LayerVars {
            norm1_gamma,
            norm1_beta,
            qkv_w,
            qkv_b,
            proj_w,
            proj_b,
            norm2_gamma,
            norm2_beta,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            num_heads,
        })
    }

    /// Handles in [`LayerWeights::named`] order.
    pub fn vars(&self) -> [Var; 12] {
        [
            self.norm1_gamma,
            self.norm1_beta,
            self.qkv_w,
            self.qkv_b,
            self.proj_w,
            self.proj_b,
            self.norm2_gamma,
            self.norm2_beta,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }
}

impl<T: Scalar> LayerWeights<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let std_d = 1.0 / (d as f64).sqrt();
        LayerWeights {
            norm1_gamma: Tensor::full([d], T::one()),
            norm1_beta: Tensor::zeros([d]),
            qkv_w: Tensor::randn([d, 3 * d], std_d, rng),
            qkv_b: Tensor::zeros([3 * d]),
            proj_w: Tensor::randn([d, d], std_d, rng),
            proj_b: Tensor::zeros([d]),
            norm2_gamma: Tensor::full([d], T::one()),
            norm2_beta: Tensor::zeros([d]),
            fc1_w: Tensor::randn([d, hidden], std_d, rng),
            fc1_b: Tensor::zeros([hidden]),
            fc2_w: Tensor::randn([hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
            fc2_b: Tensor::zeros([d]),
            num_heads: cfg.num_heads,
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> LayerVars {
        LayerVars {
            norm1_gamma: g.leaf(&self.norm1_gamma),
            norm1_beta: g.leaf(&self.norm1_beta),
            qkv_w: g.leaf(&self.qkv_w),
            qkv_b: g.leaf(&self.qkv_b),
            proj_w: g.leaf(&self.proj_w),
            proj_b: g.leaf(&self.proj_b),
            norm2_gamma: g.leaf(&self.norm2_gamma),
            norm2_beta: g.leaf(&self.norm2_beta),
            fc1_w: g.leaf(&self.fc1_w),
            fc1_b: g.leaf(&self.fc1_b),
            fc2_w: g.leaf(&self.fc2_w),
            fc2_b: g.leaf(&self.fc2_b),
            num_heads: self.num_heads,
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("norm1_gamma", &self.norm1_gamma),
            ("norm1_beta", &self.norm1_beta),
            ("qkv_w", &self.qkv_w),
            ("qkv_b", &self.qkv_b),
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("norm2_gamma", &self.norm2_gamma),
            ("norm2_beta", &self.norm2_beta),
            ("fc1_w", &self.fc1_w),
            ("fc1_b", &self.fc1_b),
            ("fc2_w", &self.fc2_w),
            ("fc2_b", &self.fc2_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("norm1_gamma", &mut self.norm1_gamma),
            ("norm1_beta", &mut self.norm1_beta),
            ("qkv_w", &mut self.qkv_w),
            ("qkv_b", &mut self.qkv_b),
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
            ("norm2_gamma", &mut self.norm2_gamma),
            ("norm2_beta", &mut self.norm2_beta),
            ("fc1_w", &mut self.fc1_w),
            ("fc1_b", &mut self.fc1_b),
            ("fc2_w", &mut self.fc2_w),
            ("fc2_b", &mut self.fc2_b),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> LayerWeights<U> {
        LayerWeights {
            norm1_gamma: self.norm1_gamma.cast(),
            norm1_beta: self.norm1_beta.cast(),
            qkv_w: self.qkv_w.cast(),
            qkv_b: self.qkv_b.cast(),
            proj_w: self.proj_w.cast(),
            proj_b: self.proj_b.cast(),
            norm2_gamma: self.norm2_gamma.cast(),
            norm2_beta: self.norm2_beta.cast(),
            fc1_w: self.fc1_w.cast(),
            fc1_b: self.fc1_b.cast(),
            fc2_w: self.fc2_w.cast(),
            fc2_b: self.fc2_b.cast(),
            num_heads: self.num_heads,
        }
    }
}

/// Frozen encoder weights. Every tensor here has `requires_grad == false`.
#[derive(Clone, Debug)]
pub struct EncoderState<T: Scalar> {
    pub config: EncoderConfig,
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
}

/// Bound encoder: graph handles for every frozen tensor.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    /// Handles in [`EncoderState::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.pos_embed];
        out.extend(self.layers.iter().flat_map(LayerVars::vars));
        out
    }
}

impl<T: Scalar> EncoderState<T> {
    /// Seeded random initialization.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_w = Tensor::randn([config.patch_dim(), d], 1.0 / (config.patch_dim() as f64).sqrt(), rng);
        let pos_embed = Tensor::randn([config.num_tokens(), d], 0.02, rng);
        let layers = (0..config.num_layers).map(|_| LayerWeights::init(&config, rng)).collect();
        Ok(EncoderState {
            patch_w,
            patch_b: Tensor::zeros([d]),
            pos_embed,
            layers,
            config,
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> EncoderVars {
        EncoderVars {
            patch_w: g.leaf(&self.patch_w),
            patch_b: g.leaf(&self.patch_b),
            pos_embed: g.leaf(&self.pos_embed),
            layers: self.layers.iter().map(|l| l.bind(g)).collect(),
        }
    }

    /// Every tensor with a stable checkpoint name.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("encoder.patch_w".to_string(), &self.patch_w),
            ("encoder.patch_b".to_string(), &self.patch_b),
            ("encoder.pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("encoder.layers.{i}.{n}"), t)));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("encoder.patch_w".to_string(), &mut self.patch_w),
            ("encoder.patch_b".to_string(), &mut self.patch_b),
            ("encoder.pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut().into_iter().map(|(n, t)| (format!("encoder.layers.{i}.{n}"), t)));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> EncoderState<U> {
        EncoderState {
            config: self.config.clone(),
            patch_w: self.patch_w.cast(),
            patch_b: self.patch_b.cast(),
            pos_embed: self.pos_embed.cast(),
            layers: self.layers.iter().map(LayerWeights::cast).collect(),
        }
    }
}

/// Cuts a `[C,H,W]` image into `[K, C·p·p]` flattened patches, row-major over
/// the patch grid, each patch ordered by channel then row then column.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let s = cfg.image_size;
    let expected = [cfg.channels, s, s];
    if image.shape() != expected {
        return Err(Error::dim("tokenize", image.shape(), &expected));
    }
    let p = cfg.patch_size;
    let grid = cfg.grid();
    let src = image.data();
    let mut out = Vec::with_capacity(cfg.num_tokens() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..cfg.channels {
                for py in 0..p {
                    let row = c * s * s + (gy * p + py) * s + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new([cfg.num_tokens(), cfg.patch_dim()], out)
}

/// `X⁰ = patches·W + b + position embedding`, giving `[K, d]`.
pub fn tokenize<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    image: &Tensor<T>,
    cfg: &EncoderConfig,
    enc: &EncoderVars,
) -> Result<Var> {
    let patches = g.constant(patchify(image, cfg)?);
    let proj = g.matmul(patches, enc.patch_w)?;
    let proj = g.add_row(proj, enc.patch_b)?;
    g.add(proj, enc.pos_embed)
}

fn norm_affine<T: Scalar>(g: &mut Graph<'_, T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = g.layer_norm_rows(x, T::of(NORM_EPS))?;
    let n = g.mul_row(n, gamma)?;
    g.add_row(n, beta)
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// One transformer layer, also returning the per-head attention probabilities.
pub fn layer_forward_traced<T: Scalar>(g: &mut Graph<'_, T>, x: Var, lv: &LayerVars) -> Result<(Var, Vec<Var>)> {
    let d = match g.shape(x) {
        [_, d] => *d,
        other => return Err(Error::dim("layer_forward", other, &[])),
    };
    let heads = lv.num_heads;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let h = norm_affine(g, x, lv.norm1_gamma, lv.norm1_beta)?;
    let qkv = linear(g, h, lv.qkv_w, lv.qkv_b)?;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let q = g.slice_cols(qkv, head * dh, (head + 1) * dh)?;
        let k = g.slice_cols(qkv, d + head * dh, d + (head + 1) * dh)?;
        let v = g.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores)?;
        outs.push(g.matmul(attn, v)?);
        probs.push(attn);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let attn_out = linear(g, merged, lv.proj_w, lv.proj_b)?;
    let x1 = g.add(x, attn_out)?;

    let h2 = norm_affine(g, x1, lv.norm2_gamma, lv.norm2_beta)?;
    let hidden = linear(g, h2, lv.fc1_w, lv.fc1_b)?;
    let hidden = g.gelu(hidden);
    let mlp = linear(g, hidden, lv.fc2_w, lv.fc2_b)?;
    Ok((g.add(x1, mlp)?, probs))
}

pub fn layer_forward<T: Scalar>(g: &mut Graph<'_, T>, x: Var, lv: &LayerVars) -> Result<Var> {
    layer_forward_traced(g, x, lv).map(|(y, _)| y)
}

/// Per-layer record of one encoder pass.
#[derive(Clone, Debug, Default)]
pub struct EncoderTrace {
    /// Input of layer `i` (`X^{i-1}`).
    pub inputs: Vec<Var>,
    /// Output of layer `i` (`X^i`), adaptor residual included.
    pub outputs: Vec<Var>,
    /// Token-adaptor output of layer `i` (`Y^i`); empty when adaptors are off.
    pub adaptor_outputs: Vec<Var>,
}

impl EncoderTrace {
    pub fn last(&self) -> Var {
        *self.outputs.last().expect("encoder has at least one layer")
    }
}

/// Runs every layer. With `adaptors`, layer `i` outputs
/// `layer_i(X^{i-1}) + tc_i(X^{i-1})`.
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    x0: Var,
    enc: &EncoderVars,
    adaptors: Option<&[TcVars]>,
) -> Result<EncoderTrace> {
    if let Some(a) = adaptors {
        if a.len() != enc.layers.len() {
            return Err(Error::Contract(format!(
                "{} adaptors for {} layers",
                a.len(),
                enc.layers.len()
            )));
        }
    }
    let mut trace = EncoderTrace::default();
    let mut x = x0;
    for (i, lv) in enc.layers.iter().enumerate() {
        trace.inputs.push(x);
        let mut y = layer_forward(g, x, lv)?;
        if let Some(a) = adaptors {
            let ya = tc_forward(g, x, &a[i])?;
            trace.adaptor_outputs.push(ya);
            y = g.add(y, ya)?;
        }
        trace.outputs.push(y);
        x = y;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig { patch_size: 15, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { num_heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { num_layers: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_geometry_gives_sixteen_tokens() {
        assert_eq!(EncoderConfig::default().num_tokens(), 16);
    }

    #[test]
    fn zero_image_tokens_are_position_embeddings() {
        let cfg = small();
        let state = EncoderState::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = Tensor::zeros([3, 16, 16]);
        let mut g = Graph::new();
        let ev = state.bind(&mut g);
        let x0 = tokenize(&mut g, &img, &cfg, &ev).unwrap();
        assert_eq!(g.value(x0), state.pos_embed.data());
    }

    #[test]
    fn single_patch_changes_single_token() {
        let cfg = small();
        let state = EncoderState::<f64>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let zero = Tensor::zeros([3, 16, 16]);
        let mut img = zero.clone();
        // pixel (5, 9) lies in grid cell (1, 2) → token 6
        img.data_mut()[16 * 16 + 5 * 16 + 9] = 0.7;
        let mut g = Graph::new();
        let ev = state.bind(&mut g);
        let a = tokenize(&mut g, &zero, &cfg, &ev).unwrap();
        let b = tokenize(&mut g, &img, &cfg, &ev).unwrap();
        let d = cfg.embed_dim;
        let changed: Vec<usize> = (0..cfg.num_tokens())
            .filter(|&k| g.value(a)[k * d..(k + 1) * d] != g.value(b)[k * d..(k + 1) * d])
            .collect();
        assert_eq!(changed, vec![6]);
    }

    #[test]
    fn wrong_image_size_is_a_dimension_error() {
        let cfg = small();
        let state = EncoderState::<f32>::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let ev = state.bind(&mut g);
        let img = Tensor::zeros([3, 8, 8]);
        assert!(matches!(tokenize(&mut g, &img, &cfg, &ev), Err(Error::Dimension { .. })));
    }

    #[test]
    fn layer_preserves_shape_and_attention_is_stochastic() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = EncoderState::<f64>::init(cfg.clone(), &mut rng).unwrap();
        let x = Tensor::randn([16, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let ev = state.bind(&mut g);
        let xv = g.constant(x);
        let (y, probs) = layer_forward_traced(&mut g, xv, &ev.layers[0]).unwrap();
        assert_eq!(g.shape(y), &[16, 8]);
        assert_eq!(probs.len(), 2);
        for p in probs {
            for row in g.value(p).chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn encoder_weights_are_frozen() {
        let state = EncoderState::<f32>::init(small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(state.named().iter().all(|(_, t)| !t.requires_grad() && t.grad().is_none()));
    }
}
