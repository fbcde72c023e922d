//! Anchor targets, detection loss and the momentum-SGD training loop.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{encode_deltas, AnchorSet, Assigner, Label};
use crate::dcloss::DcLossParams;
use crate::error::{Error, Result};
use crate::graph::{Graph, RegressionKind, Var};
use crate::params::{Checkpoint, ParamStore};
use crate::pyramid::Level;
use crate::synth::{GtBox, Scene};
use crate::tensor::Tensor;

use super::config::{RegressionLoss, TrainConfig};
use super::model::{Detector, LevelOutput};

/// Dense per-level training targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub level: Level,
    /// One-hot class targets `[K, H, W]`.
    pub cls_target: Tensor,
    /// 1 for positive and negative anchors, 0 for ignored ones, `[K, H, W]`.
    pub cls_weight: Tensor,
    /// Encoded deltas `[4, H, W]`, zero away from positives.
    pub reg_target: Tensor,
    /// 1 on positive anchors, `[4, H, W]`.
    pub reg_weight: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub levels: Vec<LevelTargets>,
    pub num_pos: usize,
}

pub fn build_targets(
    gts: &[GtBox],
    anchors: &AnchorSet,
    assigner: &dyn Assigner,
    num_classes: usize,
    box_stds: [f64; 4],
) -> Result<ImageTargets> {
    if let Some(g) = gts.iter().find(|g| g.category >= num_classes) {
        return Err(Error::Invalid(format!("category {} but the model has {num_classes} classes", g.category)));
    }
    let boxes: Vec<_> = gts.iter().map(|g| g.bbox).collect();
    let labels = assigner.assign(&anchors.boxes, &boxes)?;
    let mut levels = Vec::with_capacity(anchors.spans.len());
    let mut num_pos = 0;
    for (level, range, (h, w)) in &anchors.spans {
        let hw = h * w;
        let mut ct = vec![0.0; num_classes * hw];
        let mut cw = vec![0.0; num_classes * hw];
        let mut rt = vec![0.0; 4 * hw];
        let mut rw = vec![0.0; 4 * hw];
        for (cell, ai) in range.clone().enumerate() {
            match labels[ai] {
                Label::Ignored => {}
                Label::Negative => (0..num_classes).for_each(|k| cw[k * hw + cell] = 1.0),
                Label::Positive(gi) => {
                    num_pos += 1;
                    (0..num_classes).for_each(|k| cw[k * hw + cell] = 1.0);
                    ct[gts[gi].category * hw + cell] = 1.0;
                    let d = encode_deltas(&anchors.boxes[ai], &gts[gi].bbox);
                    for (j, v) in d.into_iter().enumerate() {
                        rt[j * hw + cell] = v / box_stds[j];
                        rw[j * hw + cell] = 1.0;
                    }
                }
            }
        }
        levels.push(LevelTargets {
            level: *level,
            cls_target: Tensor::new(&[num_classes, *h, *w], ct)?,
            cls_weight: Tensor::new(&[num_classes, *h, *w], cw)?,
            reg_target: Tensor::new(&[4, *h, *w], rt)?,
            reg_weight: Tensor::new(&[4, *h, *w], rw)?,
        });
    }
    Ok(ImageTargets { levels, num_pos })
}

/// Scalar loss nodes of one image.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

fn scaled(t: &Tensor, f: f64) -> Tensor {
    Tensor::new(t.dims(), t.data().iter().map(|v| v * f).collect()).expect("same dims")
}

/// `cls = sum BCE / max(1, P)`, `reg = sum penalty / (4 max(1, P))` over
/// positive coordinates, `total = cls + reg`, with `P` positives.
pub fn detection_loss(
    g: &mut Graph,
    outputs: &[LevelOutput],
    targets: &ImageTargets,
    kind: RegressionKind,
) -> Result<LossVars> {
    if outputs.len() != targets.levels.len() {
        return Err(Error::shape("detection_loss", format!("{} outputs, {} targets", outputs.len(), targets.levels.len())));
    }
    let norm = targets.num_pos.max(1) as f64;
    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    for (o, t) in outputs.iter().zip(&targets.levels) {
        if o.level != t.level {
            return Err(Error::shape("detection_loss", format!("{} output against {} targets", o.level, t.level)));
        }
        cls_terms.push(g.bce_with_logits(o.cls, t.cls_target.clone(), scaled(&t.cls_weight, 1.0 / norm))?);
        reg_terms.push(g.regression_loss(o.reg, t.reg_target.clone(), scaled(&t.reg_weight, 0.25 / norm), kind)?);
    }
    let sum = |g: &mut Graph, terms: Vec<Var>| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    };
    let cls = sum(g, cls_terms)?;
    let reg = sum(g, reg_terms)?;
    let total = g.add(cls, reg)?;
    Ok(LossVars { total, cls, reg })
}

/// Loss values and gradients of one image.
#[derive(Debug, Clone)]
pub struct ImageGrad {
    pub cls: f64,
    pub reg: f64,
    pub grads: Vec<Vec<f64>>,
    pub d_k: f64,
    pub d_delta: f64,
}

impl ImageGrad {
    pub fn total(&self) -> f64 {
        self.cls + self.reg
    }

    fn is_finite(&self) -> bool {
        self.cls.is_finite()
            && self.reg.is_finite()
            && self.d_k.is_finite()
            && self.d_delta.is_finite()
            && self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

/// Loss choice with the current values of the loss parameters.
#[derive(Debug, Clone, Copy)]
pub struct LossSetup {
    pub regression: RegressionLoss,
    pub smooth_l1_beta: f64,
    pub dcloss: DcLossParams,
}

impl LossSetup {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LossSetup { regression: cfg.regression, smooth_l1_beta: cfg.smooth_l1_beta, dcloss: cfg.effective_dcloss() }
    }

    /// Adds the regression kind to `g`; returns the `(k, delta)` nodes when
    /// the loss parameters are learned.
    pub fn kind(&self, g: &mut Graph) -> (RegressionKind, Option<(Var, Var)>) {
        match self.regression {
            RegressionLoss::SmoothL1 => (RegressionKind::SmoothL1 { beta: self.smooth_l1_beta }, None),
            RegressionLoss::Dcloss | RegressionLoss::DclossSwapped => {
                let p = &self.dcloss;
                let (k, d) = if p.learnable {
                    (g.param(Tensor::scalar(p.k)), g.param(Tensor::scalar(p.delta)))
                } else {
                    (g.constant(Tensor::scalar(p.k)), g.constant(Tensor::scalar(p.delta)))
                };
                let kind = RegressionKind::DcLoss { k, delta: d, swap_weights: p.swap_weights };
                (kind, p.learnable.then_some((k, d)))
            }
        }
    }
}

/// Forward and backward pass for one image.
pub fn image_grad(
    det: &Detector,
    store: &ParamStore,
    image: &Tensor,
    targets: &ImageTargets,
    loss: &LossSetup,
) -> Result<ImageGrad> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = det.input(&mut g, image)?;
    let (kind, loss_params) = loss.kind(&mut g);
    let out = det.forward(&mut g, &bound, x)?;
    let l = detection_loss(&mut g, &out, targets, kind)?;
    g.backward(l.total)?;
    let grad_of = |v: Var| g.grad(v).map_or(0.0, |s| s[0]);
    let (d_k, d_delta) = loss_params.map_or((0.0, 0.0), |(k, d)| (grad_of(k), grad_of(d)));
    Ok(ImageGrad {
        cls: g.value(l.cls).item(),
        reg: g.value(l.reg).item(),
        grads: bound.grads(&g),
        d_k,
        d_delta,
    })
}

/// Mean losses of one epoch, measured on the forward passes used for the
/// updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub lr: f64,
    pub k: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochLoss>,
}

/// SGD with momentum and L2 weight decay (PyTorch semantics): `v = m v + g +
/// wd w`, `w -= lr v`. Loss parameters get no weight decay and are
/// projected onto the admissible range after each step.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
    loss_velocity: [f64; 2],
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            loss_velocity: [0.0; 2],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        for (((_, p), g), v) in store.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
    }

    pub fn step_loss(&mut self, p: &mut DcLossParams, d_k: f64, d_delta: f64, lr: f64) {
        let [vk, vd] = &mut self.loss_velocity;
        *vk = self.momentum * *vk + d_k;
        *vd = self.momentum * *vd + d_delta;
        p.k -= lr * *vk;
        p.delta -= lr * *vd;
        p.project();
    }
}

fn checkpoint(store: &ParamStore, dcloss: DcLossParams, det: &Detector, cfg: &TrainConfig, epoch: usize) -> Checkpoint {
    Checkpoint {
        params: store.clone(),
        dcloss,
        meta: serde_json::json!({
            "model": det.config,
            "train": cfg,
            "epochs_completed": epoch,
        }),
    }
}

/// Trains `det` from a fresh initialization seeded with `cfg.seed`.
///
/// The image order of epoch `e` is a shuffle drawn from stream `e` of a
/// ChaCha8 generator seeded with `cfg.seed`. Per-image gradients may be
/// computed in parallel but are summed in batch order, so the result is
/// bitwise reproducible.
pub fn train(det: &Detector, scenes: &[Scene], cfg: &TrainConfig, assigner: &dyn Assigner) -> Result<TrainOutcome> {
    let store = det.init_params(cfg.seed)?;
    train_from(det, store, scenes, cfg, assigner)
}

pub fn train_from(
    det: &Detector,
    mut store: ParamStore,
    scenes: &[Scene],
    cfg: &TrainConfig,
    assigner: &dyn Assigner,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mc = &det.config;
    let targets: Vec<ImageTargets> = scenes
        .iter()
        .map(|s| {
            let (_, h, w) = s.image.chw()?;
            build_targets(&s.gts, &mc.anchors().anchors(h, w), assigner, mc.num_classes, mc.box_stds)
        })
        .collect::<Result<_>>()?;

    let mut loss = LossSetup::from_config(cfg);
    let mut sgd = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut iter = 0;
    let learn_loss = loss.regression != RegressionLoss::SmoothL1 && loss.dcloss.learnable;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut sum_cls, mut sum_reg) = (0.0, 0.0);
        let mut lr = cfg.lr_at(epoch, iter);

        for batch in order.chunks(cfg.batch_size) {
            lr = cfg.lr_at(epoch, iter);
            let work = |&i: &usize| image_grad(det, &store, &scenes[i].image, &targets[i], &loss);
            let results: Vec<ImageGrad> = if cfg.parallel {
                batch.par_iter().map(work).collect::<Result<_>>()?
            } else {
                batch.iter().map(work).collect::<Result<_>>()?
            };
            if let Some(bad) = results.iter().position(|r| !r.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    iteration: iter,
                    detail: format!("non-finite loss or gradient on image {}", batch[bad]),
                    last_good: Box::new(checkpoint(&store, loss.dcloss, det, cfg, epoch - 1)),
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = results[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
            let (mut d_k, mut d_delta) = (0.0, 0.0);
            for r in &results {
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
                }
                d_k += scale * r.d_k;
                d_delta += scale * r.d_delta;
                sum_cls += r.cls;
                sum_reg += r.reg;
            }
            sgd.step(&mut store, &grads, lr);
            if learn_loss {
                sgd.step_loss(&mut loss.dcloss, d_k, d_delta, lr);
            }
            iter += 1;
            debug!("epoch {epoch} iter {iter}: loss {:.5}", results.iter().map(ImageGrad::total).sum::<f64>() * scale);
        }
        let n = scenes.len() as f64;
        let e = EpochLoss {
            epoch,
            total: (sum_cls + sum_reg) / n,
            cls: sum_cls / n,
            reg: sum_reg / n,
            lr,
            k: loss.dcloss.k,
            delta: loss.dcloss.delta,
        };
        info!("epoch {epoch}: total {:.5} cls {:.5} reg {:.5}", e.total, e.cls, e.reg);
        curve.push(e);
    }
    Ok(TrainOutcome { checkpoint: checkpoint(&store, loss.dcloss, det, cfg, cfg.epochs), curve })
}

pub fn curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,total,cls,reg,lr,k,delta\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{},{},{},{}\n", e.epoch, e.total, e.cls, e.reg, e.lr, e.k, e.delta));
    }
    s
}
