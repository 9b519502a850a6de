//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptors::{sample_contrastive_loss, sc_forward, tc_forward, token_contrastive_loss, ContrastConfig, ScVars, TcVars};
use crate::encoder::{layer_forward, LayerVars};
use crate::error::{Error, Result};
use crate::graph::{cosine_similarity, logsumexp, Graph, Var};
use crate::objectives::{bce_loss, decode_mask, iou_loss, total_loss, DecoderVars, LossTerms, LossWeights};
use crate::synth::derive_seed;
use crate::tensor::Tensor;

/// Default step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the reverse-mode gradient of a scalar `f` at `x` with central
/// differences. Returns `max_i |analytic_i − central_i| / max(1, |central_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// As [`finite_diff_check`], over every element of every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    };

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: "finite-difference evaluation".into(),
            });
        }
        Ok(v)
    };

    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (which, grad) in analytic.iter().enumerate() {
        for (i, &analytic_i) in grad.iter().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * h);
            let err = (analytic_i - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Operations covered by [`run_suite`], in report order.
pub const SUITE_OPS: [&str; 13] = [
    "gelu",
    "matmul",
    "cosine_similarity",
    "logsumexp",
    "tc_forward",
    "sc_forward",
    "cl_t",
    "cl_s",
    "bce_loss",
    "iou_loss",
    "layer_forward",
    "decode_mask",
    "total_loss",
];

/// Worst error of one operation over its random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub op: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), std, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
    v[0] = 1.0;
    v[n - 1] = 0.0;
    Tensor::new(shape.to_vec(), v).expect("valid shape")
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any output into a scalar with
/// a generic upstream gradient.
fn project(g: &mut Graph<'_, f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(out, rv)?;
    Ok(g.sum(p))
}

fn tc_vars(v: &[Var]) -> TcVars {
    TcVars {
        down_w: v[0],
        down_b: v[1],
        up_w: v[2],
        up_b: v[3],
    }
}

fn sc_vars(v: &[Var]) -> ScVars {
    ScVars {
        proj_w: v[0],
        proj_b: v[1],
        down_w: v[2],
        down_b: v[3],
        up_w: v[4],
        up_b: v[5],
    }
}

fn check_op(op: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let h = DEFAULT_STEP;
    match op {
        "gelu" => {
            let r = randn(&[3, 5], 1.0, rng);
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = g.gelu(v[0]);
                project(g, y, &r)
            };
            finite_diff_check_many(f, &[randn(&[3, 5], 2.0, rng)], h)
        }
        "matmul" => {
            let r = randn(&[3, 2], 1.0, rng);
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, &r)
            };
            finite_diff_check_many(f, &[randn(&[3, 4], 1.0, rng), randn(&[4, 2], 1.0, rng)], h)
        }
        "cosine_similarity" => {
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| cosine_similarity(g, v[0], v[1]);
            finite_diff_check_many(f, &[randn(&[6], 1.0, rng), randn(&[6], 1.0, rng)], h)
        }
        "logsumexp" => {
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| logsumexp(g, v[0]);
            finite_diff_check_many(f, &[randn(&[7], 3.0, rng)], h)
        }
        "tc_forward" => {
            let r = randn(&[4, 8], 1.0, rng);
            let inputs = [
                randn(&[4, 8], 1.0, rng),
                randn(&[8, 2], 0.5, rng),
                randn(&[2], 0.1, rng),
                randn(&[2, 8], 0.5, rng),
                randn(&[8], 0.1, rng),
            ];
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
                let y = tc_forward(g, v[0], &tc_vars(&v[1..]))?;
                project(g, y, &r)
            };
            finite_diff_check_many(f, &inputs, h)
        }
        "sc_forward" => {
            let r = randn(&[8], 1.0, rng);
            let inputs = [
                randn(&[4, 8], 1.0, rng),
                randn(&[8, 8], 0.4, rng),
                randn(&[8], 0.1, rng),
                randn(&[8, 2], 0.5, rng),
                randn(&[2], 0.1, rng),
                randn(&[2, 8], 0.5, rng),
                randn(&[8], 0.1, rng),
            ];
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
                let e = sc_forward(g, v[0], &sc_vars(&v[1..]))?;
                project(g, e, &r)
            };
            finite_diff_check_many(f, &inputs, h)
        }
        "cl_t" => {
            let cfg = ContrastConfig::default();
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| token_contrastive_loss(g, v[0], v[1], &cfg);
            finite_diff_check_many(f, &[randn(&[5, 6], 1.0, rng), randn(&[5, 6], 1.0, rng)], h)
        }
        "cl_s" => {
            let cfg = ContrastConfig::default();
            let inputs: Vec<Tensor<f64>> = (0..6).map(|_| randn(&[6], 1.0, rng)).collect();
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| sample_contrastive_loss(g, &v[..3], &v[3..], &cfg);
            finite_diff_check_many(f, &inputs, h)
        }
        "bce_loss" => {
            let gt = binary(&[4, 4], rng);
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
                let gv = g.constant(gt.clone());
                bce_loss(g, v[0], gv)
            };
            finite_diff_check_many(f, &[uniform(&[4, 4], 0.05, 0.95, rng)], h)
        }
        "iou_loss" => {
            let gt = binary(&[4, 4], rng);
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
                let gv = g.constant(gt.clone());
                iou_loss(g, v[0], gv)
            };
            finite_diff_check_many(f, &[uniform(&[4, 4], 0.05, 0.95, rng)], h)
        }
        "layer_forward" => {
            let (d, hidden, heads) = (8, 16, 2);
            let r = randn(&[4, d], 1.0, rng);
            let sd = 1.0 / (d as f64).sqrt();
            let mut gamma = || {
                let mut t = randn(&[d], 0.1, rng);
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
                t
            };
            let (g1, g2) = (gamma(), gamma());
            let inputs = [
                randn(&[4, d], 1.0, rng),
                g1,
                randn(&[d], 0.1, rng),
                randn(&[d, 3 * d], sd, rng),
                randn(&[3 * d], 0.1, rng),
                randn(&[d, d], sd, rng),
                randn(&[d], 0.1, rng),
                g2,
                randn(&[d], 0.1, rng),
                randn(&[d, hidden], sd, rng),
                randn(&[hidden], 0.1, rng),
                randn(&[hidden, d], 0.25, rng),
                randn(&[d], 0.1, rng),
            ];
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
                let lv = LayerVars::from_vars(&v[1..], heads)?;
                let y = layer_forward(g, v[0], &lv)?;
                project(g, y, &r)
            };
            finite_diff_check_many(f, &inputs, h)
        }
        "decode_mask" => {
            let r = randn(&[4, 4], 1.0, rng);
            let inputs = [randn(&[4, 6], 1.0, rng), randn(&[6, 1], 0.5, rng), randn(&[1], 0.5, rng)];
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
                let m = decode_mask(g, v[0], &DecoderVars { w: v[1], b: v[2] }, 2, 2)?;
                project(g, m, &r)
            };
            finite_diff_check_many(f, &inputs, h)
        }
        "total_loss" => {
            let gt = binary(&[4, 4], rng);
            let weights = LossWeights {
                bce: rng.random_range(0.5..2.0),
                iou: rng.random_range(0.5..2.0),
                cl_t: rng.random_range(0.5..2.0),
                cl_s: rng.random_range(0.5..2.0),
            };
            let cfg = ContrastConfig::default();
            let inputs = [
                randn(&[4, 4], 1.5, rng),
                randn(&[3, 4], 1.0, rng),
                randn(&[3, 4], 1.0, rng),
                randn(&[4], 1.0, rng),
                randn(&[4], 1.0, rng),
                randn(&[4], 1.0, rng),
                randn(&[4], 1.0, rng),
            ];
            let f = |g: &mut Graph<'_, f64>, v: &[Var]| {
                let pred = g.sigmoid(v[0]);
                let gv = g.constant(gt.clone());
                let terms = LossTerms {
                    bce: bce_loss(g, pred, gv)?,
                    iou: iou_loss(g, pred, gv)?,
                    cl_t: Some(token_contrastive_loss(g, v[1], v[2], &cfg)?),
                    cl_s: Some(sample_contrastive_loss(g, &v[3..5], &v[5..7], &cfg)?),
                };
                total_loss(g, &terms, &weights)
            };
            finite_diff_check_many(f, &inputs, h)
        }
        other => Err(Error::Contract(format!("no gradient check for {other:?}"))),
    }
}

/// Checks every operation in [`SUITE_OPS`] on `instances` random 64-bit
/// inputs each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    SUITE_OPS
        .iter()
        .enumerate()
        .map(|(k, &op)| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + k as u64, i as u64));
                worst = worst.max(check_op(op, &mut rng)?);
            }
            Ok(SuiteResult {
                op,
                instances,
                max_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let err = finite_diff_check(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // clamp kills the gradient, finite differences do not see the clamp
        let x = Tensor::from_f64([2], &[0.3, 0.7]).unwrap();
        let err = finite_diff_check(
            |g, x| {
                let c = g.clamp(x, 0.3, 0.7);
                Ok(g.sum(c))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::scalar(0.0);
        let res = finite_diff_check(
            |g, x| {
                let y = g.affine(x, 1.0, 1e-9);
                let l = g.ln(y)?;
                Ok(g.sum(l))
            },
            &x,
            1e-5,
        );
        assert!(res.is_err());
    }
}
