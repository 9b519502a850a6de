//! Training loop, evaluation and the ablation runner.
//!
//! A run is a pure function of its config and data. Step `s` draws its
//! batch from the permutation of epoch `s / steps_per_epoch` and its augmented
//! views from a stream keyed by `s`, so a run resumed from a checkpoint
//! continues exactly where the uninterrupted run would.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{sample_view, AugmentStrategy};
use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, Variant};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{self, evaluate_dataset, EvalPair, MetricConfig, MetricReport};
use crate::model::{batch_objective, predict, Model, ObjectiveSpec};
use crate::optim::{cosine_lr, Moments};
use crate::synth::{derive_seed, Sample};
use crate::tensor::Tensor;

const STREAM_SHUFFLE: u64 = 20;
const STREAM_AUGMENT: u64 = 21;
const STREAM_PAIR_STEP: u64 = 22;

pub const LOG_HEADER: &str = "epoch,lr,bce,iou_loss,cl_t,cl_s,total,train_dice";

/// Mean losses over the steps of one epoch and the mean training Dice.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub bce: f64,
    pub iou_loss: f64,
    pub cl_t: f64,
    pub cl_s: f64,
    pub total: f64,
    pub train_dice: f64,
}

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            l.epoch, l.lr, l.bce, l.iou_loss, l.cl_t, l.cl_s, l.total, l.train_dice
        );
    }
    out
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub bce: f64,
    pub iou_loss: f64,
    pub cl_t: f64,
    pub cl_s: f64,
    pub total: f64,
    pub dice_sum: f64,
    pub images: usize,
}

fn opt_name(kind: &str, name: &str) -> String {
    format!("opt.{kind}.{name}")
}

/// Training state over a borrowed training split.
pub struct Trainer<'d> {
    cfg: TrainConfig,
    data: &'d [Sample],
    model: Model,
    /// Adam moments per model tensor, `None` for frozen ones.
    moments: Vec<Option<Moments<f32>>>,
    step: u64,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d [Sample]) -> Result<Self> {
        let model = Model::init(&cfg)?;
        let moments = model
            .named()
            .iter()
            .map(|(_, t)| t.requires_grad().then(|| Moments::zeros(t.shape())))
            .collect();
        let trainer = Trainer {
            cfg,
            data,
            model,
            moments,
            step: 0,
        };
        trainer.check()?;
        Ok(trainer)
    }

    /// Restores weights, optimizer moments and step from a checkpoint.
    pub fn resume(ck: &Checkpoint, data: &'d [Sample]) -> Result<Self> {
        let cfg = TrainConfig::parse(&ck.config)?;
        let mut t = Trainer::new(cfg, data)?;
        t.model.load_named(&ck.tensors)?;
        let names: Vec<String> = t.model.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(t.moments.iter_mut()) {
            if let Some(m) = slot {
                if let (Some(mt), Some(vt)) = (ck.get(&opt_name("m", name)), ck.get(&opt_name("v", name))) {
                    if mt.shape() != m.m.shape() || vt.shape() != m.v.shape() {
                        return Err(Error::Config(format!("optimizer state of {name} has the wrong shape")));
                    }
                    m.m = mt.clone();
                    m.v = vt.clone();
                }
            }
        }
        if ck.step > t.total_steps() {
            return Err(Error::Config(format!("checkpoint step {} beyond {} total steps", ck.step, t.total_steps())));
        }
        t.step = ck.step;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let s = self.cfg.encoder.image_size;
        if let Some(bad) = self.data.iter().find(|x| x.image.shape() != [3, s, s]) {
            return Err(Error::Config(format!(
                "sample {} has shape {:?}, config expects [3, {s}, {s}]",
                bad.id,
                bad.image.shape()
            )));
        }
        if self.cfg.variant.uses_cl_t() && self.cfg.tc_up_init_std() == 0.0 && self.total_steps() > 0 {
            return Err(Error::Config(
                "token contrastive training needs tc_up_std > 0: zero adaptor outputs have no direction".into(),
            ));
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_SHUFFLE, epoch)));
        let bs = self.cfg.batch_size;
        order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
    }

    /// Evaluates the objective of `step` at the current weights without
    /// updating anything.
    pub fn probe_loss(&self, step: u64) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.build(&mut g, step)?;
        Ok(g.scalar(out.0.total) as f64)
    }

    fn build<'a>(&'a self, g: &mut Graph<'a, f32>, step: u64) -> Result<(crate::model::BatchOutput, crate::model::ModelVars, Vec<usize>)> {
        let idx = self.batch_indices(step);
        let spec = ObjectiveSpec::from_config(&self.cfg);
        let images: Vec<&Tensor> = idx.iter().map(|&i| &self.data[i].image).collect();
        let masks: Vec<&Tensor> = idx.iter().map(|&i| &self.data[i].mask).collect();
        let augmented = if spec.cl_s {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, STREAM_AUGMENT, step));
            images
                .iter()
                .map(|img| sample_view(*img, &self.cfg.augment, &self.cfg.augment_params, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mv = self.model.bind(g);
        let pair_seed = derive_seed(self.cfg.seed, STREAM_PAIR_STEP, step);
        let out = batch_objective(g, &mv, &self.cfg.encoder, &spec, &images, &masks, &augmented, pair_seed)?;
        Ok((out, mv, idx))
    }

    /// One optimizer step on the next batch.
    pub fn train_step(&mut self) -> Result<StepStats> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let step = self.step;
        let lr = cosine_lr(step, self.total_steps(), self.cfg.lr_start, self.cfg.lr_end)?;
        let (stats, grads) = {
            let mut g = Graph::new();
            let (out, mv, idx) = self.build(&mut g, step).map_err(|e| match e {
                Error::NonFinite { term } => Error::NonFinite {
                    term: format!("{term} at step {step}"),
                },
                other => other,
            })?;
            let val = |v: Option<crate::graph::Var>| v.map_or(0.0, |v| g.scalar(v) as f64);
            let mut dice_sum = 0.0;
            for (&p, &i) in out.preds.iter().zip(&idx) {
                let s = &self.data[i];
                let pair = EvalPair::new(
                    &s.id,
                    s.mask.shape()[1],
                    s.mask.shape()[0],
                    g.value(p).iter().map(|&v| v as f64).collect(),
                    s.mask_bits(),
                )?;
                dice_sum += metrics::dice_iou(&pair, MetricConfig::default().threshold).0;
            }
            let stats = StepStats {
                step,
                lr,
                bce: val(Some(out.terms.bce)),
                iou_loss: val(Some(out.terms.iou)),
                cl_t: val(out.terms.cl_t),
                cl_s: val(out.terms.cl_s),
                total: val(Some(out.total)),
                dice_sum,
                images: idx.len(),
            };
            let grads = g.backward(out.total)?;
            let per_tensor: Vec<Option<Vec<f32>>> = mv.vars().iter().map(|&v| grads.wrt(v).map(<[f32]>::to_vec)).collect();
            (stats, per_tensor)
        };
        let t = step + 1;
        let opt = self.cfg.optimizer;
        for (((name, w), slot), grad) in self.model.named_mut().into_iter().zip(&mut self.moments).zip(&grads) {
            if let (Some(m), Some(gr)) = (slot.as_mut(), grad) {
                opt.step(&name, w.data_mut(), gr, m, t, lr)?;
            }
        }
        self.step = t;
        Ok(stats)
    }

    /// Trains to the end, one log entry per epoch touched.
    pub fn run(&mut self) -> Result<Vec<EpochLog>> {
        let spe = self.steps_per_epoch();
        let mut logs = Vec::new();
        while !self.is_done() {
            let epoch = self.step / spe;
            let mut acc: Vec<StepStats> = Vec::new();
            while !self.is_done() && self.step / spe == epoch {
                acc.push(self.train_step()?);
            }
            let n = acc.len() as f64;
            let mean = |f: fn(&StepStats) -> f64| acc.iter().map(f).sum::<f64>() / n;
            logs.push(EpochLog {
                epoch: epoch as usize,
                lr: acc[0].lr,
                bce: mean(|s| s.bce),
                iou_loss: mean(|s| s.iou_loss),
                cl_t: mean(|s| s.cl_t),
                cl_s: mean(|s| s.cl_s),
                total: mean(|s| s.total),
                train_dice: acc.iter().map(|s| s.dice_sum).sum::<f64>() / acc.iter().map(|s| s.images).sum::<usize>() as f64,
            });
        }
        Ok(logs)
    }

    /// Weights, optimizer moments (`opt.m.*`, `opt.v.*`), config and step.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .named()
            .into_iter()
            .map(|(n, t)| (n, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape")))
            .collect();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        for (name, m) in names.iter().zip(&self.moments) {
            if let Some(m) = m {
                tensors.push((opt_name("m", name), m.m.clone()));
                tensors.push((opt_name("v", name), m.v.clone()));
            }
        }
        Checkpoint {
            tensors,
            config: self.cfg.to_text(),
            step: self.step,
        }
    }
}

/// Trains from scratch; returns the final checkpoint and the epoch log.
pub fn train(cfg: &TrainConfig, data: &[Sample]) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let mut t = Trainer::new(cfg.clone(), data)?;
    let logs = t.run()?;
    Ok((t.checkpoint(), logs))
}

/// Rebuilds the model a checkpoint describes.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Model)> {
    let cfg = TrainConfig::parse(&ck.config)?;
    let mut model = Model::init(&cfg)?;
    model.load_named(&ck.tensors)?;
    Ok((cfg, model))
}

/// Probability maps for `samples`, without augmentation or contrastive terms.
pub fn predict_all(model: &Model, adapted: bool, samples: &[Sample]) -> Result<Vec<Tensor>> {
    let cfg = model.config();
    let s = cfg.image_size;
    if let Some(bad) = samples.iter().find(|x| x.image.shape() != [3, s, s]) {
        return Err(Error::Config(format!(
            "sample {} has shape {:?}, model expects [3, {s}, {s}]",
            bad.id,
            bad.image.shape()
        )));
    }
    samples
        .par_iter()
        .map(|x| {
            let mut g = Graph::new();
            let mv = model.bind(&mut g);
            let p = predict(&mut g, &mv, cfg, &x.image, adapted)?;
            Ok(g.to_tensor(p))
        })
        .collect()
}

pub fn evaluate(model: &Model, variant: Variant, samples: &[Sample]) -> Result<MetricReport> {
    let preds = predict_all(model, variant.uses_adaptors(), samples)?;
    let pairs = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let [h, w] = p.shape() else { unreachable!("masks are 2-d") };
            EvalPair::new(&s.id, *w, *h, p.data().iter().map(|&v| v as f64).collect(), s.mask_bits())
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_dataset(&pairs, &MetricConfig::default())
}

pub fn evaluate_checkpoint(ck: &Checkpoint, samples: &[Sample]) -> Result<MetricReport> {
    let (cfg, model) = model_from_checkpoint(ck)?;
    evaluate(&model, cfg.variant, samples)
}

/// One trained and evaluated configuration of an ablation.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub strategy: AugmentStrategy,
    pub seed: u64,
    pub report: MetricReport,
}

/// Mean and standard deviation over seeds of every dataset-mean metric.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub strategy: AugmentStrategy,
    pub seeds: usize,
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_METRICS: [&str; 6] = ["mae", "s_measure", "e_measure", "ber", "dice", "iou"];

impl AblationTable {
    pub fn row(&self, variant: Variant, strategy: &AugmentStrategy) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && &r.strategy == strategy)
    }

    pub fn csv_header() -> String {
        let mut h = String::from("variant,strategy,seeds");
        for m in ABLATION_METRICS {
            let _ = write!(h, ",{m}_mean,{m}_std");
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.variant, r.strategy, r.seeds);
            for (m, s) in r.mean.iter().zip(&r.std) {
                let _ = write!(out, ",{m:.6},{s:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates every `(variant, strategy, seed)`, then aggregates
/// over seeds. Runs are independent and execute in parallel; rows follow the
/// order of `variants` then `strategies`.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    strategies: &[AugmentStrategy],
    seeds: &[u64],
    data: &Dataset,
) -> Result<AblationTable> {
    if variants.is_empty() || strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("ablation needs at least one variant, strategy and seed".into()));
    }
    let jobs: Vec<(Variant, AugmentStrategy, u64)> = variants
        .iter()
        .flat_map(|&v| strategies.iter().flat_map(move |s| seeds.iter().map(move |&seed| (v, s.clone(), seed))))
        .collect();
    let runs = jobs
        .into_par_iter()
        .map(|(variant, strategy, seed)| {
            let cfg = TrainConfig {
                variant,
                augment: strategy.clone(),
                seed,
                ..base.clone()
            };
            let (ck, _) = train(&cfg, &data.train)?;
            let report = evaluate_checkpoint(&ck, &data.test)?;
            Ok(AblationRun {
                variant,
                strategy,
                seed,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = runs
        .chunks(seeds.len())
        .map(|group| {
            let values: Vec<[f64; 6]> = group.iter().map(|r| r.report.mean.values()).collect();
            let n = values.len() as f64;
            let mean: [f64; 6] = std::array::from_fn(|k| values.iter().map(|v| v[k]).sum::<f64>() / n);
            let std: [f64; 6] = std::array::from_fn(|k| {
                let ss = values.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>();
                (ss / (n - 1.0).max(1.0)).sqrt()
            });
            AblationRow {
                variant: group[0].variant,
                strategy: group[0].strategy.clone(),
                seeds: group.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok(AblationTable { runs, rows })
}
