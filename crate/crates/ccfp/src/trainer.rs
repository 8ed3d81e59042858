//! Alternating min/max training of the dual-stream model, plus the
//! single-stream empirical-risk baseline.
//!
//! Each iteration feeds one batch twice: a minimization step fits both
//! classifiers (with the semantic-consistency pull between the streams), then
//! a maximization step ascends the Gram discrepancy through the perturbation
//! offsets only. Parameter groups are disjoint; the two stages keep separate
//! Adam moments for the perturbation parameters.

use crate::data::{Example, Splits, XyView};
use crate::error::{Error, Result};
use crate::nn::{CheckpointModel, DualPass, DualStreamModel, SingleStream};
use crate::objectives::{discrepancy, semantic_loss, LossWeights, SemVariant};
use crate::rng::derive_rng;
use crate::tensor::{AdamState, Graph, Real};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub weights: LossWeights,
    pub apply_prob: f64,
    pub sem_variant: SemVariant,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            steps: 5000,
            weights: LossWeights::default(),
            apply_prob: 0.5,
            sem_variant: SemVariant::Classifier,
            seed: 0,
            eval_every: 300,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.steps < 1 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.eval_every < 1 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::config(format!("apply_prob must lie in [0,1], got {}", self.apply_prob)));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_cls1: f64,
    pub l_cls2: Option<f64>,
    pub l_sem: Option<f64>,
    pub d_before: Option<f64>,
    pub d_after: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    pub source_val_accuracy: f64,
}

/// Per-step loss records and per-checkpoint accuracies, serializable as
/// line-delimited JSON.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&serde_json::json!({
                "kind": "step", "step": s.step, "l_cls1": s.l_cls1, "l_cls2": s.l_cls2,
                "l_sem": s.l_sem, "d_before": s.d_before, "d_after": s.d_after,
            }))?);
            out.push('\n');
        }
        for c in &self.checkpoints {
            out.push_str(&serde_json::to_string(&serde_json::json!({
                "kind": "checkpoint", "step": c.step, "source_val_accuracy": c.source_val_accuracy,
            }))?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// A model snapshot taken at a checkpoint step.
#[derive(Clone)]
pub struct SavedCheckpoint<T: Real> {
    pub step: usize,
    pub val_accuracy: f64,
    pub model: CheckpointModel<T>,
}

pub struct TrainOutput<T: Real> {
    pub log: TrainLog,
    pub checkpoints: Vec<SavedCheckpoint<T>>,
}

/// Assemble `[B,C,H,W]` batch data and labels from view indices.
pub fn batch_data<T: Real>(view: &XyView<'_>, idxs: &[usize]) -> (Vec<T>, Vec<usize>) {
    let mut data = Vec::with_capacity(idxs.len() * view.image(0).len());
    let mut labels = Vec::with_capacity(idxs.len());
    for &i in idxs {
        data.extend(view.image(i).iter().map(|&p| T::from_f64(p as f64)));
        labels.push(view.label(i));
    }
    (data, labels)
}

/// Accuracy of a batch predictor over a labeled example list.
pub fn accuracy_of<T: Real>(
    mut predict: impl FnMut(Vec<T>, Vec<usize>) -> Result<Vec<usize>>,
    examples: &[Example],
    shape: [usize; 3],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::config("accuracy over an empty example list"));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(256) {
        let mut data = Vec::with_capacity(chunk.len() * shape.iter().product::<usize>());
        for ex in chunk {
            data.extend(ex.image.iter().map(|&p| T::from_f64(p as f64)));
        }
        let preds = predict(data, vec![chunk.len(), shape[0], shape[1], shape[2]])?;
        correct += preds.iter().zip(chunk).filter(|(p, e)| **p == e.label).count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn ensure_finite(value: f64, step: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainAborted { step, reason: format!("{what} became {value}") })
    }
}

pub struct MinRecord {
    pub l_cls1: f64,
    pub l_cls2: f64,
    pub l_sem: f64,
}

/// Trainer for the dual-stream model.
pub struct CcfpTrainer<T: Real> {
    pub model: DualStreamModel<T>,
    pub cfg: TrainConfig,
    image_shape: [usize; 3],
    opt_original: AdamState<T>,
    opt_perturbed: AdamState<T>,
    opt_max: AdamState<T>,
    group_original: BTreeSet<u32>,
    group_perturbed: BTreeSet<u32>,
    group_ldp: BTreeSet<u32>,
    rng_batches: ChaCha8Rng,
    rng_perturb: ChaCha8Rng,
    step: usize,
}

impl<T: Real> CcfpTrainer<T> {
    pub fn new(cfg: TrainConfig, model: DualStreamModel<T>, image_shape: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        let group_original: BTreeSet<u32> = model.original_param_ids().into_iter().collect();
        let group_perturbed: BTreeSet<u32> = model.perturbed_param_ids().into_iter().collect();
        let group_ldp: BTreeSet<u32> = model.ldp_param_ids().into_iter().collect();
        debug_assert!(group_original.is_disjoint(&group_perturbed));
        let seed = cfg.seed;
        Ok(CcfpTrainer {
            model,
            cfg,
            image_shape,
            opt_original: AdamState::new(),
            opt_perturbed: AdamState::new(),
            opt_max: AdamState::new(),
            group_original,
            group_perturbed,
            group_ldp,
            rng_batches: derive_rng(seed, "batches", 0),
            rng_perturb: derive_rng(seed, "perturb", 0),
            step: 0,
        })
    }

    pub fn draw_batch(&mut self, n: usize) -> Vec<usize> {
        (0..self.cfg.batch_size).map(|_| self.rng_batches.gen_range(0..n)).collect()
    }

    fn apply_group(
        opt: &mut AdamState<T>,
        model: &mut DualStreamModel<T>,
        group: &BTreeSet<u32>,
        grads: &BTreeMap<u32, Vec<T>>,
        lr: T,
    ) {
        opt.begin_step();
        model.visit_params_mut(&mut |p| {
            if group.contains(&p.id) {
                if let Some(g) = grads.get(&p.id) {
                    opt.update(p.id, &mut p.data, g, lr);
                }
            }
        });
    }

    /// One minimization step: both classification losses plus the semantic
    /// pull; the original group updates with the gradient of
    /// `L_cls1 + lambda_sem * L_sem`, the perturbed group (including the
    /// perturbation offsets) with the gradient of `L_cls2 + lambda_sem *
    /// L_sem`. Since `L_cls1` does not touch the perturbed stream and
    /// `L_cls2` does not touch the original, one backward pass over
    /// `L_cls1 + L_cls2 + lambda_sem * L_sem` yields both group gradients.
    pub fn min_step(&mut self, view: &XyView<'_>, idxs: &[usize]) -> Result<MinRecord> {
        self.step += 1;
        let g: Graph<T> = Graph::new();
        let (data, labels) = batch_data::<T>(view, idxs);
        let [c, h, w] = self.image_shape;
        let x = g.leaf(data, vec![idxs.len(), c, h, w], false, None)?;

        let draws = self.model.train_draws(idxs.len(), &mut self.rng_perturb);
        let acts = self.model.dual_pass(&g, &x, DualPass::MinStage, &draws)?;
        let logits_o = acts.logits_o.expect("min stage runs the full network");
        let logits_p = acts.logits_p.expect("min stage runs the full network");

        let l_cls1 = logits_o.cross_entropy(&labels)?;
        let l_cls2 = logits_p.cross_entropy(&labels)?;
        let lambda_sem = self.cfg.weights.lambda_sem;
        let sem = if lambda_sem != 0.0 {
            let (a, b) = match self.cfg.sem_variant {
                SemVariant::Classifier => (&logits_o, &logits_p),
                SemVariant::Feature => (
                    acts.feat_o.as_ref().expect("full pass"),
                    acts.feat_p.as_ref().expect("full pass"),
                ),
            };
            Some(semantic_loss(a, b)?)
        } else {
            None
        };

        let record = MinRecord {
            l_cls1: l_cls1.value().as_f64(),
            l_cls2: l_cls2.value().as_f64(),
            l_sem: sem.as_ref().map_or(0.0, |s| s.value().as_f64()),
        };
        ensure_finite(record.l_cls1, self.step, "classification loss (original)")?;
        ensure_finite(record.l_cls2, self.step, "classification loss (perturbed)")?;
        ensure_finite(record.l_sem, self.step, "semantic loss")?;

        let mut combined = l_cls1.add(&l_cls2)?;
        if let Some(sem) = &sem {
            combined = combined.add(&sem.scale(T::from_f64(lambda_sem)))?;
        }
        g.backward(&combined)?;
        let grads: BTreeMap<u32, Vec<T>> = g.param_grads().into_iter().collect();

        let lr = T::from_f64(self.cfg.lr);
        Self::apply_group(&mut self.opt_original, &mut self.model, &self.group_original, &grads, lr);
        Self::apply_group(&mut self.opt_perturbed, &mut self.model, &self.group_perturbed, &grads, lr);
        Ok(record)
    }

    /// One maximization step: a fresh truncated forward of both streams,
    /// an Adam ascent step on the perturbation offsets only (objective
    /// `lambda_dis * D`), and the discrepancy re-measured with the updated
    /// offsets under the same draws and frozen statistics. Skipped entirely
    /// when `lambda_dis` is zero or the perturbation has no learnable
    /// parameters (the stochastic baselines).
    pub fn max_step(
        &mut self,
        view: &XyView<'_>,
        idxs: &[usize],
    ) -> Result<(Option<f64>, Option<f64>)> {
        if self.cfg.weights.lambda_dis == 0.0
            || self.model.site_count() == 0
            || self.model.kind != crate::nn::PerturbKind::Ldp
        {
            return Ok((None, None));
        }
        let g: Graph<T> = Graph::new();
        let (data, _) = batch_data::<T>(view, idxs);
        let [c, h, w] = self.image_shape;
        let x = g.leaf(data.clone(), vec![idxs.len(), c, h, w], false, None)?;

        let draws = self.model.train_draws(idxs.len(), &mut self.rng_perturb);
        let acts = self.model.dual_pass(&g, &x, DualPass::MaxStage, &draws)?;
        let d = discrepancy(&acts.taps_o, &acts.taps_p)?;
        let d_before = d.value().as_f64();
        ensure_finite(d_before, self.step, "gram discrepancy")?;

        // Ascent on lambda_dis * D == descent on its negation.
        let loss = d.scale(T::from_f64(-self.cfg.weights.lambda_dis));
        g.backward(&loss)?;
        let grads: BTreeMap<u32, Vec<T>> = g.param_grads().into_iter().collect();
        let lr = T::from_f64(self.cfg.lr);
        self.opt_max.begin_step();
        let opt = &mut self.opt_max;
        let group = &self.group_ldp;
        self.model.visit_params_mut(&mut |p| {
            if group.contains(&p.id) {
                if let Some(gr) = grads.get(&p.id) {
                    opt.update(p.id, &mut p.data, gr, lr);
                }
            }
        });

        // Re-measure under the same draws with frozen statistics.
        let g2: Graph<T> = Graph::new();
        let x2 = g2.leaf(data, vec![idxs.len(), c, h, w], false, None)?;
        let acts2 = self.model.dual_pass(&g2, &x2, DualPass::Measure, &draws)?;
        let d_after = discrepancy(&acts2.taps_o, &acts2.taps_p)?.value().as_f64();
        ensure_finite(d_after, self.step, "gram discrepancy after ascent")?;
        Ok((Some(d_before), Some(d_after)))
    }

    pub fn source_val_accuracy(&mut self, examples: &[Example]) -> Result<f64> {
        let model = &mut self.model;
        let shape = self.image_shape;
        accuracy_of::<T>(|d, s| model.predict_batch(d, s), examples, shape)
    }
}

fn check_splits(data: &Splits) -> Result<()> {
    if data.source_train.is_empty() {
        return Err(Error::config("empty source training split"));
    }
    if data.source_val.is_empty() {
        return Err(Error::config("empty source validation split"));
    }
    Ok(())
}

/// Alternating min/max training. Each iteration consumes one batch for both
/// stages, checkpoints every `eval_every` steps (and always at the last step)
/// with the source-validation accuracy of the perturbed-stream predictor.
pub fn train_ccfp<T: Real>(
    cfg: &TrainConfig,
    model: DualStreamModel<T>,
    data: &Splits,
) -> Result<(DualStreamModel<T>, TrainOutput<T>)> {
    check_splits(data)?;
    let mut trainer = CcfpTrainer::new(cfg.clone(), model, data.image_shape)?;
    let view = XyView::new(&data.source_train);
    let n = view.len();
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();

    for step in 1..=cfg.steps {
        let idxs = trainer.draw_batch(n);
        let min = trainer.min_step(&view, &idxs)?;
        // Same batch feeds the maximization stage.
        let (d_before, d_after) = trainer.max_step(&view, &idxs)?;
        log.steps.push(StepRecord {
            step,
            l_cls1: min.l_cls1,
            l_cls2: Some(min.l_cls2),
            l_sem: Some(min.l_sem),
            d_before,
            d_after,
        });
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let val = trainer.source_val_accuracy(&data.source_val)?;
            log.checkpoints.push(CheckpointRecord { step, source_val_accuracy: val });
            checkpoints.push(SavedCheckpoint {
                step,
                val_accuracy: val,
                model: CheckpointModel::Dual(trainer.model.clone()),
            });
        }
    }
    Ok((trainer.model, TrainOutput { log, checkpoints }))
}

/// Pooled-data baseline: one stream, cross-entropy only, same batch stream
/// and checkpoint cadence as the dual trainer.
pub fn train_erm<T: Real>(
    cfg: &TrainConfig,
    mut model: SingleStream<T>,
    data: &Splits,
) -> Result<(SingleStream<T>, TrainOutput<T>)> {
    check_splits(data)?;
    cfg.validate()?;
    let view = XyView::new(&data.source_train);
    let n = view.len();
    let [c, h, w] = data.image_shape;
    let group: BTreeSet<u32> = model.param_ids().into_iter().collect();
    let mut opt: AdamState<T> = AdamState::new();
    let mut rng_batches = derive_rng(cfg.seed, "batches", 0);
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();

    for step in 1..=cfg.steps {
        let idxs: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng_batches.gen_range(0..n)).collect();
        let g: Graph<T> = Graph::new();
        let (bdata, labels) = batch_data::<T>(&view, &idxs);
        let x = g.leaf(bdata, vec![idxs.len(), c, h, w], false, None)?;
        let (_, logits, _) = model.forward(
            &g,
            &x,
            crate::nn::Mode::Train,
            crate::nn::BindMode::Trainable,
            true,
            false,
            &mut |_, _, t| Ok(t),
        )?;
        let loss = logits.expect("full forward").cross_entropy(&labels)?;
        let l = loss.value().as_f64();
        ensure_finite(l, step, "classification loss")?;
        g.backward(&loss)?;
        let grads: BTreeMap<u32, Vec<T>> = g.param_grads().into_iter().collect();
        opt.begin_step();
        {
            let opt = &mut opt;
            model.visit_params_mut(&mut |p| {
                if group.contains(&p.id) {
                    if let Some(gr) = grads.get(&p.id) {
                        opt.update(p.id, &mut p.data, gr, T::from_f64(cfg.lr));
                    }
                }
            });
        }
        log.steps.push(StepRecord {
            step,
            l_cls1: l,
            l_cls2: None,
            l_sem: None,
            d_before: None,
            d_after: None,
        });
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let val = {
                let m = &mut model;
                accuracy_of::<T>(|d, s| m.predict_batch(d, s), &data.source_val, data.image_shape)?
            };
            log.checkpoints.push(CheckpointRecord { step, source_val_accuracy: val });
            checkpoints.push(SavedCheckpoint {
                step,
                val_accuracy: val,
                model: CheckpointModel::Single(model.clone()),
            });
        }
    }
    Ok((model, TrainOutput { log, checkpoints }))
}
