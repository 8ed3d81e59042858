//! The small convolutional backbone: conv/batch-norm/relu blocks with
//! max-pooling after every second block and a global average pool, plus the
//! perturbation-insertion and Gram-tap sites after the first three
//! batch-normalization layers.

use super::layers::{BatchNorm2d, Conv2d, IdGen};
use super::{BindMode, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneCfg {
    pub in_channels: usize,
    pub class_count: usize,
    /// Output width of each conv block.
    pub widths: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Epsilon inside the per-instance channel statistics used by the
    /// perturbation modules.
    pub stats_eps: f64,
    /// Evaluation-time batch-norm source: running statistics (default) or the
    /// current batch.
    pub bn_eval_uses_batch_stats: bool,
}

impl Default for BackboneCfg {
    fn default() -> Self {
        BackboneCfg {
            in_channels: 1,
            class_count: 10,
            widths: vec![32, 32, 64, 64],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            stats_eps: 1e-5,
            bn_eval_uses_batch_stats: false,
        }
    }
}

impl BackboneCfg {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.class_count == 0 {
            return Err(Error::config("in_channels and class_count must be positive"));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config(format!("invalid width list {:?}", self.widths)));
        }
        if self.bn_momentum <= 0.0 || self.bn_momentum >= 1.0 {
            return Err(Error::config("bn_momentum must lie in (0,1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum Layer<T: Real> {
    Conv(Conv2d<T>),
    Norm(BatchNorm2d<T>),
    Relu,
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Backbone<T: Real> {
    pub layers: Vec<Layer<T>>,
    /// Layer indices after which a perturbation module may be inserted.
    pub ldp_sites: Vec<usize>,
    /// Layer indices after which activations are recorded for the Gram
    /// discrepancy (post-perturbation on the perturbed stream).
    pub tap_sites: Vec<usize>,
    /// Channel count at each site, in site order.
    pub site_channels: Vec<usize>,
    pub feature_dim: usize,
}

/// Blocks of [conv3x3 -> batch-norm -> relu], max-pool after every second
/// block, then a global average pool. Sites sit after the first three
/// batch-norm layers (fewer if the backbone is shallower).
pub fn build_backbone<T: Real>(
    cfg: &BackboneCfg,
    ids: &mut IdGen,
    rng: &mut ChaCha8Rng,
) -> Result<Backbone<T>> {
    cfg.validate()?;
    let mut layers: Vec<Layer<T>> = Vec::new();
    let mut ldp_sites = Vec::new();
    let mut site_channels = Vec::new();
    let mut in_ch = cfg.in_channels;
    for (bi, &width) in cfg.widths.iter().enumerate() {
        layers.push(Layer::Conv(Conv2d::new(ids, in_ch, width, 3, 1, 1, rng)));
        let mut bn = BatchNorm2d::new(ids, width, cfg.bn_momentum, cfg.bn_eps);
        bn.eval_uses_batch_stats = cfg.bn_eval_uses_batch_stats;
        layers.push(Layer::Norm(bn));
        if ldp_sites.len() < 3 {
            ldp_sites.push(layers.len() - 1);
            site_channels.push(width);
        }
        layers.push(Layer::Relu);
        if (bi + 1) % 2 == 0 {
            layers.push(Layer::MaxPool { window: 2, stride: 2 });
        }
        in_ch = width;
    }
    layers.push(Layer::GlobalAvgPool);
    Ok(Backbone {
        layers,
        tap_sites: ldp_sites.clone(),
        ldp_sites,
        site_channels,
        feature_dim: *cfg.widths.last().unwrap(),
    })
}

impl<T: Real> Backbone<T> {
    /// Number of tap sites (K).
    pub fn site_count(&self) -> usize {
        self.tap_sites.len()
    }

    /// Walk the layers, applying `site_hook` at each perturbation site (hook
    /// receives the site ordinal) and recording taps. When `truncate` is set
    /// the walk stops after the last site and returns no features.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &mut self,
        g: &Graph<T>,
        x: &Tensor<T>,
        mode: Mode,
        bind: BindMode,
        update_stats: bool,
        truncate: bool,
        site_hook: &mut dyn FnMut(usize, &Graph<T>, Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<(Option<Tensor<T>>, Vec<Tensor<T>>)> {
        let mut taps = Vec::with_capacity(self.tap_sites.len());
        let last_site = self.ldp_sites.iter().chain(&self.tap_sites).max().copied();
        let mut cur = x.clone();
        let ldp_sites = self.ldp_sites.clone();
        let tap_sites = self.tap_sites.clone();
        for li in 0..self.layers.len() {
            cur = match &mut self.layers[li] {
                Layer::Conv(conv) => conv.forward(g, &cur, bind)?,
                Layer::Norm(bn) => bn.forward(g, &cur, mode, bind, update_stats)?,
                Layer::Relu => cur.relu(),
                Layer::MaxPool { window, stride } => cur.max_pool2d(*window, *stride)?,
                Layer::GlobalAvgPool => cur.channel_mean()?,
            };
            if let Some(ordinal) = ldp_sites.iter().position(|&s| s == li) {
                cur = site_hook(ordinal, g, cur)?;
            }
            if tap_sites.contains(&li) {
                taps.push(cur.clone());
            }
            if truncate && Some(li) == last_site {
                return Ok((None, taps));
            }
        }
        Ok((Some(cur), taps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn default_backbone_has_three_sites_and_flat_features() {
        let cfg = BackboneCfg::default();
        let mut ids = IdGen::new();
        let mut rng = derive_rng(1, "init", 0);
        let mut bb: Backbone<f64> = build_backbone(&cfg, &mut ids, &mut rng).unwrap();
        assert_eq!(bb.site_count(), 3);
        assert_eq!(bb.ldp_sites, bb.tap_sites);
        assert_eq!(bb.site_channels, vec![32, 32, 64]);

        let g = Graph::new();
        let x = g.tensor4(vec![0.0; 2 * 28 * 28], 2, 1, 28, 28, false).unwrap();
        let (feat, taps) = bb
            .forward(&g, &x, Mode::Train, BindMode::Frozen, false, false, &mut |_, _, t| Ok(t))
            .unwrap();
        let feat = feat.unwrap();
        assert_eq!(feat.shape(), &[2, 64]);
        assert_eq!(taps.len(), 3);
        assert!(feat.data().iter().all(|v| v.is_finite()), "zero image gives finite features");
    }

    #[test]
    fn invalid_width_list_is_config_error() {
        let cfg = BackboneCfg { widths: vec![], ..BackboneCfg::default() };
        let mut ids = IdGen::new();
        let mut rng = derive_rng(1, "init", 0);
        assert!(matches!(
            build_backbone::<f64>(&cfg, &mut ids, &mut rng),
            Err(Error::Config(_))
        ));
        let cfg = BackboneCfg { widths: vec![8, 0], ..BackboneCfg::default() };
        assert!(matches!(
            build_backbone::<f64>(&cfg, &mut ids, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn truncated_forward_stops_at_last_tap() {
        let cfg = BackboneCfg { widths: vec![4, 4, 8, 8], in_channels: 1, ..BackboneCfg::default() };
        let mut ids = IdGen::new();
        let mut rng = derive_rng(2, "init", 0);
        let mut bb: Backbone<f64> = build_backbone(&cfg, &mut ids, &mut rng).unwrap();
        let g = Graph::new();
        let x = g.tensor4(vec![0.5; 64], 1, 1, 8, 8, false).unwrap();
        let (feat, taps) = bb
            .forward(&g, &x, Mode::Train, BindMode::Frozen, false, true, &mut |_, _, t| Ok(t))
            .unwrap();
        assert!(feat.is_none());
        assert_eq!(taps.len(), 3);
    }

    #[test]
    fn eval_mode_uses_running_statistics_and_is_repeatable() {
        let cfg = BackboneCfg { widths: vec![4, 4], in_channels: 1, ..BackboneCfg::default() };
        let mut ids = IdGen::new();
        let mut rng = derive_rng(3, "init", 0);
        let mut bb: Backbone<f64> = build_backbone(&cfg, &mut ids, &mut rng).unwrap();
        let g = Graph::new();
        let data: Vec<f64> = (0..2 * 36).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.tensor4(data, 2, 1, 6, 6, false).unwrap();

        // Train once to move the running stats off their initial values.
        let _ = bb
            .forward(&g, &x, Mode::Train, BindMode::Frozen, true, false, &mut |_, _, t| Ok(t))
            .unwrap();

        let run = |bb: &mut Backbone<f64>| {
            let g = Graph::new();
            let data: Vec<f64> = (0..36).map(|i| (i as f64 * 0.11).cos()).collect();
            let x = g.tensor4(data, 1, 1, 6, 6, false).unwrap();
            let (f, _) = bb
                .forward(&g, &x, Mode::Eval, BindMode::Frozen, false, false, &mut |_, _, t| Ok(t))
                .unwrap();
            f.unwrap().data()
        };
        let a = run(&mut bb);
        let b = run(&mut bb);
        assert_eq!(a, b, "two eval passes must be bit-identical");
    }
}
