//! Linear mask head and the training objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp applied before the BCE logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-token linear head: one logit per patch.
#[derive(Clone, Debug)]
pub struct DecoderWeights<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w: Var,
    pub b: Var,
}

impl DecoderVars {
    pub fn vars(&self) -> [Var; 2] {
        [self.w, self.b]
    }
}

impl<T: Scalar> DecoderWeights<T> {
    /// Weights and bias uniform in `±1/√d`.
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect::<Vec<_>>();
        let w = draw(d);
        let b = draw(1);
        DecoderWeights {
            w: Tensor::new([d, 1], w).expect("valid shape").with_requires_grad(true),
            b: Tensor::new([1], b).expect("valid shape").with_requires_grad(true),
        }
    }

    /// Zero weights and bias: the initial mask is uniformly 0.5.
    pub fn zeros(d: usize) -> Self {
        DecoderWeights {
            w: Tensor::zeros([d, 1]).with_requires_grad(true),
            b: Tensor::zeros([1]).with_requires_grad(true),
        }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> DecoderVars {
        DecoderVars {
            w: g.leaf(&self.w),
            b: g.leaf(&self.b),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("decoder.w".into(), &self.w), ("decoder.b".into(), &self.b)]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("decoder.w".into(), &mut self.w), ("decoder.b".into(), &mut self.b)]
    }

    pub fn cast<U: Scalar>(&self) -> DecoderWeights<U> {
        DecoderWeights {
            w: self.w.cast(),
            b: self.b.cast(),
        }
    }
}

/// Final tokens `[K, d]` to an `[H, W]` probability map: one logit per token,
/// laid out on the patch grid, block-upsampled by `patch_size`, then sigmoid.
pub fn decode_mask<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, w: &DecoderVars, grid: usize, patch_size: usize) -> Result<Var> {
    if g.shape(tokens).first() != Some(&(grid * grid)) {
        return Err(Error::dim("decode_mask", g.shape(tokens), &[grid * grid]));
    }
    let logits = g.matmul(tokens, w.w)?;
    let logits = g.add_row(logits, w.b)?;
    let grid_logits = g.reshape(logits, &[grid, grid])?;
    let up = g.upsample(grid_logits, patch_size)?;
    Ok(g.sigmoid(up))
}

fn check_pair<T: Scalar>(g: &Graph<'_, T>, pred: Var, gt: Var) -> Result<()> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::Contract(format!(
            "mask shapes differ: {:?} vs {:?}",
            g.shape(pred),
            g.shape(gt)
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy, with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    check_pair(g, pred, gt)?;
    let m = g.clamp(pred, T::of(PROB_CLAMP), T::of(1.0 - PROB_CLAMP));
    let log_m = g.ln(m)?;
    let one_minus_m = g.affine(m, -T::one(), T::one());
    let log_1m = g.ln(one_minus_m)?;
    let one_minus_gt = g.affine(gt, -T::one(), T::one());
    let pos = g.mul(gt, log_m)?;
    let neg = g.mul(one_minus_gt, log_1m)?;
    let ll = g.add(pos, neg)?;
    let mean = g.mean(ll);
    Ok(g.scale(mean, -T::one()))
}

/// Soft IoU loss `1 − Σmg / (Σm + Σg − Σmg)`; zero when both masks are empty.
pub fn iou_loss<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    check_pair(g, pred, gt)?;
    let mg = g.mul(pred, gt)?;
    let inter = g.sum(mg);
    let sm = g.sum(pred);
    let sg = g.sum(gt);
    let total = g.add(sm, sg)?;
    if g.scalar(total) == T::zero() {
        // both empty: perfect agreement, reported with zero gradient
        return Ok(g.scale(total, T::zero()));
    }
    let union = g.sub(total, inter)?;
    let ratio = g.div(inter, union)?;
    Ok(g.affine(ratio, -T::one(), T::one()))
}

/// Weights of `BCE`, `IoU`, token-contrastive and sample-contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub iou: f64,
    pub cl_t: f64,
    pub cl_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 1.0,
            iou: 1.0,
            cl_t: 1.0,
            cl_s: 1.0,
        }
    }
}

/// Loss components as graph nodes. Absent contrastive terms count as zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub bce: Var,
    pub iou: Var,
    pub cl_t: Option<Var>,
    pub cl_s: Option<Var>,
}

/// Weighted sum of the loss components. A non-finite component aborts with
/// its name.
pub fn total_loss<T: Scalar>(g: &mut Graph<'_, T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let parts = [
        ("bce", Some(terms.bce), w.bce),
        ("iou", Some(terms.iou), w.iou),
        ("cl_t", terms.cl_t, w.cl_t),
        ("cl_s", terms.cl_s, w.cl_s),
    ];
    let mut acc: Option<Var> = None;
    for (name, var, weight) in parts {
        let Some(v) = var else { continue };
        if !g.value(v).iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { term: name.into() });
        }
        let scaled = g.scale(v, T::of(weight));
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.expect("bce and iou are always present"))
}
