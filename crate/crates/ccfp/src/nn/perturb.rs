//! Feature-statistics perturbations applied at backbone sites: the learnable
//! scale/shift module and the two stochastic baselines (statistics mixing and
//! uncertainty resampling).

use super::layers::{IdGen, Param};
use super::BindMode;
use crate::error::{Error, Result};
use crate::tensor::{channel_stats, Graph, Real, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Learnable per-channel offsets to the instance statistics at one site.
/// At gamma = beta = 0 the module is the identity.
#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LdpSite<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub site_index: usize,
}

impl<T: Real> LdpSite<T> {
    pub fn new(ids: &mut IdGen, channels: usize, site_index: usize) -> Self {
        LdpSite {
            gamma: Param::zeros(ids.next_id(), vec![channels]),
            beta: Param::zeros(ids.next_id(), vec![channels]),
            site_index,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape[0]
    }

    pub fn forward(&self, g: &Graph<T>, x: &Tensor<T>, eps: T, bind: BindMode) -> Result<Tensor<T>> {
        let gamma = self.gamma.bind(g, bind)?;
        let beta = self.beta.bind(g, bind)?;
        ldp_forward(x, &gamma, &beta, eps)
    }
}

/// `(sigma+gamma) * (x-mu)/sigma + mu + beta`, computed in the rearranged form
/// `x + (gamma/sigma) * (x-mu) + beta` (equal in exact arithmetic) so that
/// gamma = beta = 0 returns `x` bitwise for any eps.
pub fn ldp_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.shape().len() != 4 {
        return Err(Error::shape(format!("ldp_forward: expected [B,C,H,W], got {:?}", x.shape())));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "ldp_forward: gamma {:?} / beta {:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let (mu, sigma) = channel_stats(x, eps)?;
    let ratio = gamma.row_broadcast(b)?.div(&sigma)?;
    let scaled = x.bc_sub(&mu)?.bc_mul(&ratio)?;
    x.add(&scaled)?.bc_add_vec(beta)
}

/// `x + (x-mu)/sigma * (sigma_new - sigma) + (mu_new - mu)`; equals
/// `(x-mu)/sigma * sigma_new + mu_new` in exact arithmetic and returns `x`
/// bitwise when the new statistics equal the old ones.
fn restyle<T: Real>(
    x: &Tensor<T>,
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
    mu_new: &Tensor<T>,
    sigma_new: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dsigma = sigma_new.sub(sigma)?;
    let dmu = mu_new.sub(mu)?;
    let scaled = x.bc_sub(mu)?.bc_mul(&dsigma.div(sigma)?)?;
    x.add(&scaled)?.bc_add(&dmu)
}

/// Per-instance interpolation weights and the batch permutation of one
/// statistics-mixing application.
#[derive(Clone, Debug)]
pub struct MixDraw {
    pub perm: Vec<usize>,
    pub lambdas: Vec<f64>,
}

pub fn draw_mix(rng: &mut ChaCha8Rng, batch: usize, alpha: f64) -> MixDraw {
    let mut perm: Vec<usize> = (0..batch).collect();
    for i in (1..batch).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let beta = Beta::new(alpha, alpha).expect("alpha must be positive");
    let lambdas = (0..batch).map(|_| beta.sample(rng)).collect();
    MixDraw { perm, lambdas }
}

/// Replace each instance's statistics with a convex mix of its own and a
/// batch-shuffled partner's, with probability `prob`; identity otherwise.
pub fn mixstyle_forward<T: Real>(
    x: &Tensor<T>,
    rng: &mut ChaCha8Rng,
    alpha: f64,
    prob: f64,
    eps: T,
) -> Result<Tensor<T>> {
    let b = x.shape().first().copied().unwrap_or(0);
    if b < 2 {
        log::warn!("mixstyle: batch of {b} has no partner statistics, passing through");
        return Ok(x.clone());
    }
    if rng.gen_range(0.0..1.0) >= prob {
        return Ok(x.clone());
    }
    let draw = draw_mix(rng, b, alpha);
    mixstyle_apply(x, &draw, eps)
}

pub fn mixstyle_apply<T: Real>(x: &Tensor<T>, draw: &MixDraw, eps: T) -> Result<Tensor<T>> {
    let (mu, sigma) = channel_stats(x, eps)?;
    let lam: Vec<T> = draw.lambdas.iter().map(|&l| T::from_f64(l)).collect();
    let lam1: Vec<T> = draw.lambdas.iter().map(|&l| T::from_f64(1.0 - l)).collect();
    let mu_mix = mu.scale_rows(&lam)?.add(&mu.permute_rows(&draw.perm)?.scale_rows(&lam1)?)?;
    let sigma_mix =
        sigma.scale_rows(&lam)?.add(&sigma.permute_rows(&draw.perm)?.scale_rows(&lam1)?)?;
    restyle(x, &mu, &sigma, &mu_mix, &sigma_mix)
}

/// Gaussian draws for one uncertainty-resampling application, one per
/// instance-channel statistic.
#[derive(Clone, Debug)]
pub struct DsuDraw {
    pub eps_mu: Vec<f64>,
    pub eps_sigma: Vec<f64>,
}

pub fn draw_dsu(rng: &mut ChaCha8Rng, batch: usize, channels: usize) -> DsuDraw {
    let n = batch * channels;
    let eps_mu = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let eps_sigma = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    DsuDraw { eps_mu, eps_sigma }
}

/// Resample each instance's statistics as Gaussian draws centered on the
/// originals, with the batch-level standard deviation of those statistics as
/// the noise scale. The noise scale is treated as a constant.
pub fn dsu_forward<T: Real>(x: &Tensor<T>, rng: &mut ChaCha8Rng, eps: T) -> Result<Tensor<T>> {
    let b = x.shape().first().copied().unwrap_or(0);
    if b < 2 {
        log::warn!("dsu: batch of {b} has no batch-level statistics, passing through");
        return Ok(x.clone());
    }
    let c = x.shape()[1];
    let draw = draw_dsu(rng, b, c);
    dsu_apply(x, &draw, eps)
}

pub fn dsu_apply<T: Real>(x: &Tensor<T>, draw: &DsuDraw, eps: T) -> Result<Tensor<T>> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let (mu, sigma) = channel_stats(x, eps)?;

    // Batch-level population std of each statistic, per channel.
    let column_std = |vals: &[T]| -> Vec<f64> {
        let mut out = vec![0.0f64; c];
        for (ci, slot) in out.iter_mut().enumerate() {
            let mut mean = 0.0;
            for bi in 0..b {
                mean += vals[bi * c + ci].as_f64();
            }
            mean /= b as f64;
            let mut var = 0.0;
            for bi in 0..b {
                let d = vals[bi * c + ci].as_f64() - mean;
                var += d * d;
            }
            *slot = (var / b as f64).sqrt();
        }
        out
    };
    let mu_scale = column_std(&mu.data());
    let sigma_scale = column_std(&sigma.data());

    let g = x.graph();
    let noise = |eps_draws: &[f64], scale: &[f64]| -> Result<Tensor<T>> {
        let data: Vec<T> = (0..b * c)
            .map(|i| T::from_f64(eps_draws[i] * scale[i % c]))
            .collect();
        g.constant(data, vec![b, c])
    };
    let mu_new = mu.add(&noise(&draw.eps_mu, &mu_scale)?)?;
    let sigma_new = sigma.add(&noise(&draw.eps_sigma, &sigma_scale)?)?;
    restyle(x, &mu, &sigma, &mu_new, &sigma_new)
}
