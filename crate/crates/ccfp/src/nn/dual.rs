//! Single training stream and the dual-stream model: two parameter-disjoint
//! backbone+classifier pairs fed the same batch, with the perturbation applied
//! on the second stream at the insertion sites.

use super::backbone::{build_backbone, Backbone, BackboneCfg, Layer};
use super::layers::{IdGen, Linear, Param};
use super::perturb::{draw_dsu, draw_mix, dsu_apply, mixstyle_apply, DsuDraw, LdpSite, MixDraw};
use super::{BindMode, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SingleStream<T: Real> {
    pub backbone: Backbone<T>,
    pub classifier: Linear<T>,
}

impl<T: Real> SingleStream<T> {
    pub fn new(cfg: &BackboneCfg, ids: &mut IdGen, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = build_backbone(cfg, ids, rng)?;
        let classifier = Linear::new(ids, backbone.feature_dim, cfg.class_count, rng);
        Ok(SingleStream { backbone, classifier })
    }

    /// Backbone walk plus classifier. Features and logits are absent when the
    /// walk is truncated at the last tap site.
    #[allow(clippy::type_complexity)]
    pub fn forward(
        &mut self,
        g: &Graph<T>,
        x: &Tensor<T>,
        mode: Mode,
        bind: BindMode,
        update_stats: bool,
        truncate: bool,
        site_hook: &mut dyn FnMut(usize, &Graph<T>, Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Vec<Tensor<T>>)> {
        let (feat, taps) =
            self.backbone.forward(g, x, mode, bind, update_stats, truncate, site_hook)?;
        let logits = match &feat {
            Some(f) => Some(self.classifier.forward(g, f, bind)?),
            None => None,
        };
        Ok((feat, logits, taps))
    }

    pub fn param_ids(&self) -> Vec<u32> {
        let mut ids = Vec::new();
        for layer in &self.backbone.layers {
            match layer {
                Layer::Conv(c) => ids.push(c.weight.id),
                Layer::Norm(n) => {
                    ids.push(n.gamma.id);
                    ids.push(n.beta.id);
                }
                _ => {}
            }
        }
        ids.push(self.classifier.weight.id);
        ids.push(self.classifier.bias.id);
        ids
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for layer in &mut self.backbone.layers {
            match layer {
                Layer::Conv(c) => f(&mut c.weight),
                Layer::Norm(n) => {
                    f(&mut n.gamma);
                    f(&mut n.beta);
                }
                _ => {}
            }
        }
        f(&mut self.classifier.weight);
        f(&mut self.classifier.bias);
    }

    /// Copy parameter values and batch-norm running statistics from an
    /// architecture-identical stream; ids keep their own values.
    pub fn copy_params_from(&mut self, other: &SingleStream<T>) {
        for (dst, src) in self.backbone.layers.iter_mut().zip(&other.backbone.layers) {
            match (dst, src) {
                (Layer::Conv(d), Layer::Conv(s)) => d.weight.data = s.weight.data.clone(),
                (Layer::Norm(d), Layer::Norm(s)) => {
                    d.gamma.data = s.gamma.data.clone();
                    d.beta.data = s.beta.data.clone();
                    d.running_mean = s.running_mean.clone();
                    d.running_var = s.running_var.clone();
                }
                _ => {}
            }
        }
        self.classifier.weight.data = other.classifier.weight.data.clone();
        self.classifier.bias.data = other.classifier.bias.data.clone();
    }

    /// Deterministic class predictions (evaluation mode, frozen parameters).
    pub fn predict_batch(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<Vec<usize>> {
        let g: Graph<T> = Graph::new();
        let x = g.leaf(data, shape, false, None)?;
        let (_, logits, _) = self.forward(
            &g,
            &x,
            Mode::Eval,
            BindMode::Frozen,
            false,
            false,
            &mut |_, _, t| Ok(t),
        )?;
        let logits = logits.expect("full forward always yields logits");
        let k = logits.shape()[1];
        Ok(argmax_rows(&logits.data(), k))
    }
}

/// Row-wise argmax with ties broken toward the lower class index.
pub(crate) fn argmax_rows<T: Real>(logits: &[T], k: usize) -> Vec<usize> {
    logits
        .chunks(k)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Which perturbation the second stream applies at its sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Ldp,
    Mixstyle,
    Dsu,
}

/// Pre-drawn randomness for one dual forward, one entry per site.
#[derive(Clone, Debug)]
pub enum PerturbDraws {
    Ldp { apply: Vec<bool> },
    Mix { draws: Vec<Option<MixDraw>> },
    Dsu { draws: Vec<Option<DsuDraw>> },
}

/// What a dual pass is for; controls binding, statistics updates, and whether
/// the walk stops after the last tap site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DualPass {
    /// Full train-mode forward, everything trainable, statistics updated.
    MinStage,
    /// Train-mode forward to the last tap; only the perturbation parameters
    /// are trainable, statistics updated.
    MaxStage,
    /// Train-mode forward to the last tap with nothing trainable and
    /// statistics frozen (used to re-measure the discrepancy).
    Measure,
    /// Deterministic evaluation forward, nothing trainable.
    Eval,
}

pub struct DualActivations<T: Real> {
    pub taps_o: Vec<Tensor<T>>,
    pub taps_p: Vec<Tensor<T>>,
    pub feat_o: Option<Tensor<T>>,
    pub feat_p: Option<Tensor<T>>,
    pub logits_o: Option<Tensor<T>>,
    pub logits_p: Option<Tensor<T>>,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DualStreamModel<T: Real> {
    pub cfg: BackboneCfg,
    pub original: SingleStream<T>,
    pub perturbed: SingleStream<T>,
    pub ldp: Vec<LdpSite<T>>,
    pub kind: PerturbKind,
    /// Probability that a site's perturbation is applied in a train-mode
    /// forward (one coin per site per forward).
    pub apply_prob: f64,
    pub mix_alpha: f64,
    pub mix_prob: f64,
}

impl<T: Real> DualStreamModel<T> {
    pub fn new(
        cfg: &BackboneCfg,
        kind: PerturbKind,
        apply_prob: f64,
        mix_alpha: f64,
        mix_prob: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&apply_prob) {
            return Err(Error::config("apply_prob must lie in [0,1]"));
        }
        let mut ids = IdGen::new();
        let original = SingleStream::new(cfg, &mut ids, rng)?;
        let perturbed = SingleStream::new(cfg, &mut ids, rng)?;
        let ldp = perturbed
            .backbone
            .site_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LdpSite::new(&mut ids, c, i))
            .collect();
        Ok(DualStreamModel {
            cfg: cfg.clone(),
            original,
            perturbed,
            ldp,
            kind,
            apply_prob,
            mix_alpha,
            mix_prob,
        })
    }

    pub fn site_count(&self) -> usize {
        self.perturbed.backbone.site_count()
    }

    /// Stochastic per-site draws for a train-mode forward.
    pub fn train_draws(&self, batch: usize, rng: &mut ChaCha8Rng) -> PerturbDraws {
        let k = self.site_count();
        match self.kind {
            PerturbKind::Ldp => PerturbDraws::Ldp {
                apply: (0..k).map(|_| rng.gen_range(0.0..1.0) < self.apply_prob).collect(),
            },
            PerturbKind::Mixstyle => PerturbDraws::Mix {
                draws: (0..k)
                    .map(|_| {
                        if batch >= 2 && rng.gen_range(0.0..1.0) < self.mix_prob {
                            Some(draw_mix(rng, batch, self.mix_alpha))
                        } else {
                            None
                        }
                    })
                    .collect(),
            },
            PerturbKind::Dsu => PerturbDraws::Dsu {
                draws: (0..k)
                    .map(|ki| {
                        if batch >= 2 && rng.gen_range(0.0..1.0) < self.apply_prob {
                            Some(draw_dsu(rng, batch, self.perturbed.backbone.site_channels[ki]))
                        } else {
                            None
                        }
                    })
                    .collect(),
            },
        }
    }

    /// Deterministic draws for evaluation: the learnable perturbation is
    /// always applied, the stochastic baselines are not.
    pub fn eval_draws(&self) -> PerturbDraws {
        let k = self.site_count();
        match self.kind {
            PerturbKind::Ldp => PerturbDraws::Ldp { apply: vec![true; k] },
            PerturbKind::Mixstyle => PerturbDraws::Mix { draws: vec![None; k] },
            PerturbKind::Dsu => PerturbDraws::Dsu { draws: vec![None; k] },
        }
    }

    /// Run both streams on the same input under the given pass. Taps record
    /// the original-stream activation and the post-perturbation activation at
    /// each site.
    pub fn dual_pass(
        &mut self,
        g: &Graph<T>,
        x: &Tensor<T>,
        pass: DualPass,
        draws: &PerturbDraws,
    ) -> Result<DualActivations<T>> {
        let (mode, bind_stream, bind_ldp, update_stats, truncate) = match pass {
            DualPass::MinStage => (Mode::Train, BindMode::Trainable, BindMode::Trainable, true, false),
            DualPass::MaxStage => (Mode::Train, BindMode::Frozen, BindMode::Trainable, true, true),
            DualPass::Measure => (Mode::Train, BindMode::Frozen, BindMode::Frozen, false, true),
            DualPass::Eval => (Mode::Eval, BindMode::Frozen, BindMode::Frozen, false, false),
        };

        let (feat_o, logits_o, taps_o) = self.original.forward(
            g,
            x,
            mode,
            bind_stream,
            update_stats,
            truncate,
            &mut |_, _, t| Ok(t),
        )?;

        let stats_eps = T::from_f64(self.cfg.stats_eps);
        let ldp = &self.ldp;
        let kind = self.kind;
        let mut hook = |ordinal: usize, g: &Graph<T>, t: Tensor<T>| -> Result<Tensor<T>> {
            match (kind, draws) {
                (PerturbKind::Ldp, PerturbDraws::Ldp { apply }) => {
                    if apply[ordinal] {
                        ldp[ordinal].forward(g, &t, stats_eps, bind_ldp)
                    } else {
                        Ok(t)
                    }
                }
                (PerturbKind::Mixstyle, PerturbDraws::Mix { draws }) => match &draws[ordinal] {
                    Some(d) => mixstyle_apply(&t, d, stats_eps),
                    None => Ok(t),
                },
                (PerturbKind::Dsu, PerturbDraws::Dsu { draws }) => match &draws[ordinal] {
                    Some(d) => dsu_apply(&t, d, stats_eps),
                    None => Ok(t),
                },
                _ => Err(Error::Contract("perturbation draws do not match the model kind".into())),
            }
        };
        let (feat_p, logits_p, taps_p) = {
            let perturbed = &mut self.perturbed;
            let (feat, taps) =
                perturbed.backbone.forward(g, x, mode, bind_stream, update_stats, truncate, &mut hook)?;
            let logits = match &feat {
                Some(f) => Some(perturbed.classifier.forward(g, f, bind_stream)?),
                None => None,
            };
            (feat, logits, taps)
        };

        Ok(DualActivations { taps_o, taps_p, feat_o, feat_p, logits_o, logits_p })
    }

    /// Both streams on the same batch: stochastic perturbation in train mode,
    /// deterministic in evaluation mode.
    pub fn dual_forward(
        &mut self,
        g: &Graph<T>,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<DualActivations<T>> {
        let batch = x.shape().first().copied().unwrap_or(0);
        match mode {
            Mode::Train => {
                let draws = self.train_draws(batch, rng);
                self.dual_pass(g, x, DualPass::MinStage, &draws)
            }
            Mode::Eval => {
                let draws = self.eval_draws();
                self.dual_pass(g, x, DualPass::Eval, &draws)
            }
        }
    }

    /// Deterministic predictions of the perturbed stream (the inference
    /// network), with the learnable perturbation applied.
    pub fn predict_batch(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<Vec<usize>> {
        let g: Graph<T> = Graph::new();
        let x = g.leaf(data, shape, false, None)?;
        let draws = self.eval_draws();
        let acts = self.dual_pass(&g, &x, DualPass::Eval, &draws)?;
        let logits = acts.logits_p.expect("eval pass yields logits");
        let k = logits.shape()[1];
        Ok(argmax_rows(&logits.data(), k))
    }

    pub fn original_param_ids(&self) -> Vec<u32> {
        self.original.param_ids()
    }

    /// Perturbed-stream parameters including the perturbation offsets.
    pub fn perturbed_param_ids(&self) -> Vec<u32> {
        let mut ids = self.perturbed.param_ids();
        ids.extend(self.ldp_param_ids());
        ids
    }

    pub fn ldp_param_ids(&self) -> Vec<u32> {
        self.ldp.iter().flat_map(|s| [s.gamma.id, s.beta.id]).collect()
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.original.visit_params_mut(f);
        self.perturbed.visit_params_mut(f);
        for site in &mut self.ldp {
            f(&mut site.gamma);
            f(&mut site.beta);
        }
    }

    /// Make the perturbed stream an exact copy of the original (parameters
    /// and running statistics).
    pub fn sync_perturbed_from_original(&mut self) {
        let src = self.original.clone();
        self.perturbed.copy_params_from(&src);
    }
}
