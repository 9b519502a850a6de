//! Token-level and sample-level contrastive adaptors.
//!
//! A token adaptor is a per-token bottleneck MLP `up(gelu(down(x)))` whose
//! output joins the encoder residual stream. Its contrastive loss treats each
//! input token and the adaptor's output for that token as a positive pair and
//! the outputs for every other token as negatives.
//!
//! A sample adaptor mean-pools the tokens of one image, projects the pooled
//! vector, and runs it through its own bottleneck to get one embedding per
//! image. Its loss pairs each image with its augmented view against the views
//! of the other images in the batch. It never feeds the residual stream.
//!
//! Both losses are InfoNCE over cosine similarities divided by a temperature,
//! averaged over anchors.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Weights of one token adaptor: `[d, d/r]` down, `[d/r, d]` up.
#[derive(Clone, Debug)]
pub struct TcAdaptorWeights<T: Scalar> {
    pub down_w: Tensor<T>,
    pub down_b: Tensor<T>,
    pub up_w: Tensor<T>,
    pub up_b: Tensor<T>,
}

/// Weights of one sample adaptor: `[d, d]` projection plus a bottleneck.
#[derive(Clone, Debug)]
pub struct ScAdaptorWeights<T: Scalar> {
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub down_w: Tensor<T>,
    pub down_b: Tensor<T>,
    pub up_w: Tensor<T>,
    pub up_b: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct TcVars {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ScVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

impl TcVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.down_w, self.down_b, self.up_w, self.up_b]
    }
}

impl ScVars {
    pub fn vars(&self) -> [Var; 6] {
        [self.proj_w, self.proj_b, self.down_w, self.down_b, self.up_w, self.up_b]
    }
}

fn bottleneck(d: usize, r: usize) -> Result<usize> {
    if r == 0 || !d.is_multiple_of(r) || d / r == 0 {
        return Err(Error::Config(format!("bottleneck factor {r} must divide width {d}")));
    }
    Ok(d / r)
}

fn tunable<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    t.with_requires_grad(true)
}

impl<T: Scalar> TcAdaptorWeights<T> {
    /// Random down-projection; `up_std == 0` gives an exactly-zero up-projection,
    /// so the adaptor output starts at zero.
    pub fn init<R: Rng + ?Sized>(d: usize, r: usize, up_std: f64, rng: &mut R) -> Result<Self> {
        let h = bottleneck(d, r)?;
        let up_w = if up_std == 0.0 {
            Tensor::zeros([h, d])
        } else {
            Tensor::randn([h, d], up_std, rng)
        };
        Ok(TcAdaptorWeights {
            down_w: tunable(Tensor::randn([d, h], 1.0 / (d as f64).sqrt(), rng)),
            down_b: tunable(Tensor::zeros([h])),
            up_w: tunable(up_w),
            up_b: tunable(Tensor::zeros([d])),
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> TcVars {
        TcVars {
            down_w: g.leaf(&self.down_w),
            down_b: g.leaf(&self.down_b),
            up_w: g.leaf(&self.up_w),
            up_b: g.leaf(&self.up_b),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("down_w", &self.down_w),
            ("down_b", &self.down_b),
            ("up_w", &self.up_w),
            ("up_b", &self.up_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("down_w", &mut self.down_w),
            ("down_b", &mut self.down_b),
            ("up_w", &mut self.up_w),
            ("up_b", &mut self.up_b),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> TcAdaptorWeights<U> {
        TcAdaptorWeights {
            down_w: self.down_w.cast(),
            down_b: self.down_b.cast(),
            up_w: self.up_w.cast(),
            up_b: self.up_b.cast(),
        }
    }
}

impl<T: Scalar> ScAdaptorWeights<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, r: usize, rng: &mut R) -> Result<Self> {
        let h = bottleneck(d, r)?;
        let std_d = 1.0 / (d as f64).sqrt();
        Ok(ScAdaptorWeights {
            proj_w: tunable(Tensor::randn([d, d], std_d, rng)),
            proj_b: tunable(Tensor::zeros([d])),
            down_w: tunable(Tensor::randn([d, h], std_d, rng)),
            down_b: tunable(Tensor::zeros([h])),
            up_w: tunable(Tensor::randn([h, d], 1.0 / (h as f64).sqrt(), rng)),
            up_b: tunable(Tensor::zeros([d])),
        })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> ScVars {
        ScVars {
            proj_w: g.leaf(&self.proj_w),
            proj_b: g.leaf(&self.proj_b),
            down_w: g.leaf(&self.down_w),
            down_b: g.leaf(&self.down_b),
            up_w: g.leaf(&self.up_w),
            up_b: g.leaf(&self.up_b),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("proj_w", &self.proj_w),
            ("proj_b", &self.proj_b),
            ("down_w", &self.down_w),
            ("down_b", &self.down_b),
            ("up_w", &self.up_w),
            ("up_b", &self.up_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("proj_w", &mut self.proj_w),
            ("proj_b", &mut self.proj_b),
            ("down_w", &mut self.down_w),
            ("down_b", &mut self.down_b),
            ("up_w", &mut self.up_w),
            ("up_b", &mut self.up_b),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> ScAdaptorWeights<U> {
        ScAdaptorWeights {
            proj_w: self.proj_w.cast(),
            proj_b: self.proj_b.cast(),
            down_w: self.down_w.cast(),
            down_b: self.down_b.cast(),
            up_w: self.up_w.cast(),
            up_b: self.up_b.cast(),
        }
    }
}

/// One token adaptor and one sample adaptor per encoder layer.
#[derive(Clone, Debug)]
pub struct AdaptorStack<T: Scalar> {
    pub tc: Vec<TcAdaptorWeights<T>>,
    pub sc: Vec<ScAdaptorWeights<T>>,
}

impl<T: Scalar> AdaptorStack<T> {
    pub fn init<R: Rng + ?Sized>(
        layers: usize,
        d: usize,
        r: usize,
        tc_up_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let tc = (0..layers)
            .map(|_| TcAdaptorWeights::init(d, r, tc_up_std, rng))
            .collect::<Result<_>>()?;
        let sc = (0..layers)
            .map(|_| ScAdaptorWeights::init(d, r, rng))
            .collect::<Result<_>>()?;
        Ok(AdaptorStack { tc, sc })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, a) in self.tc.iter().enumerate() {
            out.extend(a.named().into_iter().map(|(n, t)| (format!("adaptor.tc.{i}.{n}"), t)));
        }
        for (i, a) in self.sc.iter().enumerate() {
            out.extend(a.named().into_iter().map(|(n, t)| (format!("adaptor.sc.{i}.{n}"), t)));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, a) in self.tc.iter_mut().enumerate() {
            out.extend(a.named_mut().into_iter().map(|(n, t)| (format!("adaptor.tc.{i}.{n}"), t)));
        }
        for (i, a) in self.sc.iter_mut().enumerate() {
            out.extend(a.named_mut().into_iter().map(|(n, t)| (format!("adaptor.sc.{i}.{n}"), t)));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> AdaptorStack<U> {
        AdaptorStack {
            tc: self.tc.iter().map(TcAdaptorWeights::cast).collect(),
            sc: self.sc.iter().map(ScAdaptorWeights::cast).collect(),
        }
    }
}

fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// `Y = up(gelu(down(X)))` applied to every token of `[K, d]`.
pub fn tc_forward<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: &TcVars) -> Result<Var> {
    let h = linear(g, x, w.down_w, w.down_b)?;
    let h = g.gelu(h);
    linear(g, h, w.up_w, w.up_b)
}

/// Sample embedding `ε = up(gelu(down(proj(mean_k X))))`, shape `[d]`.
pub fn sc_forward<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: &ScVars) -> Result<Var> {
    let pooled = g.mean_rows(x)?;
    let d = g.shape(pooled)[0];
    let pooled = g.reshape(pooled, &[1, d])?;
    let p = linear(g, pooled, w.proj_w, w.proj_b)?;
    let h = linear(g, p, w.down_w, w.down_b)?;
    let h = g.gelu(h);
    let e = linear(g, h, w.up_w, w.up_b)?;
    g.reshape(e, &[d])
}

/// Temperature and negative-sampling settings for both losses.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    pub temperature: f64,
    /// Cap on scored pairs per token loss; beyond it each anchor keeps a random
    /// subset of its negatives.
    pub token_pair_limit: Option<usize>,
    /// Seed for negative subsampling.
    pub seed: u64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.1,
            token_pair_limit: None,
            seed: 0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Mean over rows `i` of `−log softmax_i(sim(a_i, p_·)/τ)[i]`, with `sim` the
/// cosine similarity between anchor row `i` and positive row `j`.
pub fn info_nce<T: Scalar>(
    g: &mut Graph<'_, T>,
    anchors: Var,
    positives: Var,
    temperature: f64,
    mask: Option<Vec<bool>>,
) -> Result<Var> {
    if g.shape(anchors) != g.shape(positives) || g.shape(anchors).len() != 2 {
        return Err(Error::dim("info_nce", g.shape(anchors), g.shape(positives)));
    }
    let a = g.normalize_rows(anchors)?;
    let p = g.normalize_rows(positives)?;
    let pt = g.transpose(p)?;
    let sim = g.matmul(a, pt)?;
    let logits = g.scale(sim, T::of(1.0 / temperature));
    let lse = g.logsumexp_rows(logits, mask)?;
    let pos = g.diag(logits)?;
    let per_anchor = g.sub(lse, pos)?;
    Ok(g.mean(per_anchor))
}

fn negative_mask(k: usize, per_anchor: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; k * k];
    for i in 0..k {
        mask[i * k + i] = true;
        let others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        for idx in sample(&mut rng, others.len(), per_anchor.min(others.len())) {
            mask[i * k + others[idx]] = true;
        }
    }
    mask
}

/// Token contrastive loss between adaptor inputs `x` and outputs `y`, both `[K, d]`.
pub fn token_contrastive_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    y: Var,
    cfg: &ContrastConfig,
) -> Result<Var> {
    cfg.validate()?;
    let k = match g.shape(x) {
        [k, _] => *k,
        other => return Err(Error::dim("token_contrastive_loss", other, g.shape(y))),
    };
    let mask = match cfg.token_pair_limit {
        Some(limit) if k * k > limit => {
            let per_anchor = (limit / k).saturating_sub(1);
            Some(negative_mask(k, per_anchor, cfg.seed))
        }
        _ => None,
    };
    info_nce(g, x, y, cfg.temperature, mask)
}

/// Sample contrastive loss over a batch of embeddings and their augmented views.
pub fn sample_contrastive_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    eps: &[Var],
    eps_aug: &[Var],
    cfg: &ContrastConfig,
) -> Result<Var> {
    cfg.validate()?;
    if eps.len() != eps_aug.len() {
        return Err(Error::Contract(format!(
            "batch size mismatch: {} embeddings vs {} augmented",
            eps.len(),
            eps_aug.len()
        )));
    }
    if eps.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let a = g.stack_rows(eps)?;
    let p = g.stack_rows(eps_aug)?;
    info_nce(g, a, p, cfg.temperature, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn bottleneck_must_divide() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(TcAdaptorWeights::<f32>::init(64, 32, 0.0, &mut rng).is_ok());
        assert!(TcAdaptorWeights::<f32>::init(64, 8, 0.0, &mut rng).is_ok());
        assert!(TcAdaptorWeights::<f32>::init(64, 7, 0.0, &mut rng).is_err());
        assert!(ScAdaptorWeights::<f32>::init(64, 0, &mut rng).is_err());
    }

    #[test]
    fn zero_up_projection_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = TcAdaptorWeights::<f64>::init(8, 2, 0.0, &mut rng).unwrap();
        let x = Tensor::randn([5, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let v = w.bind(&mut g);
        let xv = g.constant(x);
        let y = tc_forward(&mut g, xv, &v).unwrap();
        assert!(g.value(y).iter().all(|&e| e == 0.0));
    }

    #[test]
    fn tc_forward_hand_set() {
        // d=4, r=2
        let w = TcAdaptorWeights {
            down_w: t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, -0.5, -1.0, 2.0]),
            down_b: t(&[2], &[0.1, -0.2]),
            up_w: t(&[2, 4], &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 1.0, 1.0]),
            up_b: t(&[4], &[0.0, 0.0, 0.5, 0.0]),
        };
        let x = [0.3, -0.7, 1.1, 0.2];
        let gelu = |v: f64| v * 0.5 * (1.0 + libm::erf(v / 2f64.sqrt()));
        let h0 = gelu(0.3 * 1.0 + -0.7 * 0.0 + 1.1 * 0.5 + -0.2 + 0.1);
        let h1 = gelu(0.3 * 0.0 + -0.7 * 1.0 + 1.1 * -0.5 + 0.2 * 2.0 - 0.2);
        let expected = [
            h0 * 1.0 + h1 * 0.5,
            h0 * 2.0,
            h1 * 1.0 + 0.5,
            -h0 + h1,
        ];
        let mut g = Graph::new();
        let v = w.bind(&mut g);
        let xv = g.constant(t(&[1, 4], &x));
        let y = tc_forward(&mut g, xv, &v).unwrap();
        for (a, b) in g.value(y).iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn tc_forward_is_tokenwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = TcAdaptorWeights::<f64>::init(8, 2, 0.1, &mut rng).unwrap();
        let x = Tensor::randn([3, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let v = w.bind(&mut g);
        let all = g.constant(x.clone());
        let yall = tc_forward(&mut g, all, &v).unwrap();
        let row = g.constant(Tensor::new([1, 8], x.data()[8..16].to_vec()).unwrap());
        let yrow = tc_forward(&mut g, row, &v).unwrap();
        assert_eq!(&g.value(yall)[8..16], g.value(yrow));
    }

    #[test]
    fn sc_forward_hand_set() {
        let w = ScAdaptorWeights {
            proj_w: t(&[4, 4], &[
                1.0, 0.0, 0.0, 0.5, //
                0.0, 1.0, 0.0, 0.0, //
                0.0, -1.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ]),
            proj_b: t(&[4], &[0.0, 0.1, 0.0, 0.0]),
            down_w: t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0]),
            down_b: t(&[2], &[0.0, 0.0]),
            up_w: t(&[2, 4], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]),
            up_b: t(&[4], &[0.0; 4]),
        };
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 0.0]);
        let gelu = |v: f64| v * 0.5 * (1.0 + libm::erf(v / 2f64.sqrt()));
        let pooled = [0.0, 1.0, 2.0, 2.0];
        let proj = [
            pooled[0],
            pooled[1] - pooled[2] + 0.1,
            pooled[2],
            0.5 * pooled[0] + pooled[3],
        ];
        let h0 = gelu(proj[0] + proj[2] - proj[3]);
        let h1 = gelu(proj[1] + proj[2]);
        let expected = [h0, h1, h0, h1];
        let mut g = Graph::new();
        let v = w.bind(&mut g);
        let xv = g.constant(x);
        let e = sc_forward(&mut g, xv, &v).unwrap();
        assert_eq!(g.shape(e), &[4]);
        for (a, b) in g.value(e).iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sc_forward_zero_up_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = ScAdaptorWeights::<f64>::init(8, 2, &mut rng).unwrap();
        w.up_w = Tensor::zeros([4, 8]);
        let mut g = Graph::new();
        let v = w.bind(&mut g);
        let xv = g.constant(Tensor::randn([4, 8], 1.0, &mut rng));
        let e = sc_forward(&mut g, xv, &v).unwrap();
        assert!(g.value(e).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_and_single_sample_losses_vanish() {
        let cfg = ContrastConfig::default();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[0.2, -1.0, 3.0]));
        let y = g.constant(t(&[1, 3], &[-4.0, 0.5, 0.1]));
        let l = token_contrastive_loss(&mut g, x, y, &cfg).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        let e = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let ea = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let l = sample_contrastive_loss(&mut g, &[e], &[ea], &cfg).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn orthogonal_pair_closed_form() {
        let cfg = ContrastConfig::default();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let l = token_contrastive_loss(&mut g, x, x, &cfg).unwrap();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
        assert!((expected - 4.54e-5).abs() < 1e-7);

        let e1 = g.constant(t(&[2], &[1.0, 0.0]));
        let e2 = g.constant(t(&[2], &[0.0, 1.0]));
        let l = sample_contrastive_loss(&mut g, &[e1, e2], &[e1, e2], &cfg).unwrap();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn contract_errors() {
        let cfg = ContrastConfig::default();
        let mut g = Graph::<f64>::new();
        let e = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(
            sample_contrastive_loss(&mut g, &[e, e], &[e], &cfg),
            Err(Error::Contract(_))
        ));
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        assert!(matches!(
            sample_contrastive_loss(&mut g, &[e, z], &[e, e], &cfg),
            Err(Error::Degenerate(_))
        ));
        let x = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(
            token_contrastive_loss(&mut g, x, x, &cfg),
            Err(Error::Degenerate(_))
        ));
        let bad = ContrastConfig { temperature: 0.0, ..cfg };
        let y = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert!(token_contrastive_loss(&mut g, y, y, &bad).is_err());
    }

    #[test]
    fn pair_limit_subsamples_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = Tensor::<f64>::randn([8, 4], 1.0, &mut rng);
        let ys = Tensor::<f64>::randn([8, 4], 1.0, &mut rng);
        let cfg = ContrastConfig {
            token_pair_limit: Some(24),
            seed: 3,
            ..Default::default()
        };
        let run = |cfg: &ContrastConfig| {
            let mut g = Graph::new();
            let x = g.constant(xs.clone());
            let y = g.constant(ys.clone());
            let l = token_contrastive_loss(&mut g, x, y, cfg).unwrap();
            g.scalar(l)
        };
        let full = run(&ContrastConfig::default());
        let sub = run(&cfg);
        assert_eq!(sub, run(&cfg));
        // dropping negatives can only lower each anchor's log-partition
        assert!(sub < full);
        assert!(sub >= 0.0);

        let mask = negative_mask(8, 2, 3);
        for i in 0..8 {
            assert!(mask[i * 8 + i]);
            assert_eq!(mask[i * 8..(i + 1) * 8].iter().filter(|&&b| b).count(), 3);
        }
    }
}
