//! Trainable parameters and the primitive layers of the backbone.

use super::{BindMode, Mode};
use crate::error::Result;
use crate::tensor::{Graph, Real, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// A named flat parameter buffer. The id is unique within one model and is
/// how gradients find their way back from a graph.
#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Param<T: Real> {
    pub id: u32,
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> Param<T> {
    pub fn new(id: u32, data: Vec<T>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Param { id, data, shape }
    }

    pub fn zeros(id: u32, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param { id, data: vec![T::zero(); n], shape }
    }

    pub fn bind(&self, g: &Graph<T>, mode: BindMode) -> Result<Tensor<T>> {
        match mode {
            BindMode::Trainable => g.leaf(self.data.clone(), self.shape.clone(), true, Some(self.id)),
            BindMode::Frozen => g.leaf(self.data.clone(), self.shape.clone(), false, None),
        }
    }
}

/// Monotone parameter-id generator; one per model build.
#[derive(Default)]
pub struct IdGen(u32);

impl IdGen {
    pub fn new() -> Self {
        IdGen(0)
    }

    pub fn next_id(&mut self) -> u32 {
        let id = self.0;
        self.0 += 1;
        id
    }
}

fn he_normal<T: Real>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect()
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        ids: &mut IdGen,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let data = he_normal(rng, out_ch * fan_in, fan_in);
        Conv2d {
            weight: Param::new(ids.next_id(), data, vec![out_ch, in_ch, k, k]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: &Tensor<T>, bind: BindMode) -> Result<Tensor<T>> {
        let w = self.weight.bind(g, bind)?;
        x.conv2d(&w, self.stride, self.padding)
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BatchNorm2d<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    /// When set, evaluation normalizes with the current batch statistics
    /// instead of the running ones.
    pub eval_uses_batch_stats: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(ids: &mut IdGen, channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm2d {
            gamma: Param::new(ids.next_id(), vec![T::one(); channels], vec![channels]),
            beta: Param::zeros(ids.next_id(), vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(momentum),
            eps: T::from_f64(eps),
            eval_uses_batch_stats: false,
        }
    }

    pub fn forward(
        &mut self,
        g: &Graph<T>,
        x: &Tensor<T>,
        mode: Mode,
        bind: BindMode,
        update_stats: bool,
    ) -> Result<Tensor<T>> {
        let use_batch = mode == Mode::Train || self.eval_uses_batch_stats;
        let normed = if use_batch {
            let mean = x.batch_chan_mean()?;
            let var = x.batch_chan_var()?;
            if update_stats && mode == Mode::Train {
                let m = self.momentum;
                let one = T::one();
                for (r, &b) in self.running_mean.iter_mut().zip(&mean.data()) {
                    *r = (one - m) * *r + m * b;
                }
                for (r, &b) in self.running_var.iter_mut().zip(&var.data()) {
                    *r = (one - m) * *r + m * b;
                }
            }
            let std = var.add_scalar(self.eps).sqrt_elem();
            x.bc_sub_vec(&mean)?.bc_div_vec(&std)?
        } else {
            let c = self.running_mean.len();
            let mean = g.constant(self.running_mean.clone(), vec![c])?;
            let std: Vec<T> = self.running_var.iter().map(|&v| (v + self.eps).sqrt()).collect();
            let std = g.constant(std, vec![c])?;
            x.bc_sub_vec(&mean)?.bc_div_vec(&std)?
        };
        let gamma = self.gamma.bind(g, bind)?;
        let beta = self.beta.bind(g, bind)?;
        normed.bc_mul_vec(&gamma)?.bc_add_vec(&beta)
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(ids: &mut IdGen, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::new(ids.next_id(), he_normal(rng, in_dim * out_dim, in_dim), vec![in_dim, out_dim]),
            bias: Param::zeros(ids.next_id(), vec![out_dim]),
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: &Tensor<T>, bind: BindMode) -> Result<Tensor<T>> {
        let w = self.weight.bind(g, bind)?;
        let b = self.bias.bind(g, bind)?;
        x.linear(&w, &b)
    }
}
