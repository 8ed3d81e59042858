//! Graph operations: forward constructors on `Tensor` and the reverse-mode
//! vector-Jacobian products, dispatched from one match like a replayed tape.

use super::kernels;
use super::kernels::ConvDims;
use super::{numel, Graph, Real, Tape, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize, T),
    Scale(usize, T),
    Sqrt(usize),
    Relu(usize),
    Conv2d { input: usize, kernel: usize, stride: usize, padding: usize },
    MaxPool2d { input: usize, argmax: Vec<u32> },
    Linear { input: usize, weight: usize, bias: usize },
    /// `[B,C,H,W] -> [B,C]` spatial mean per instance-channel.
    ChannelMean(usize),
    /// `[B,C,H,W] -> [B,C]` sqrt(population variance + eps).
    ChannelStd { input: usize },
    /// `[B,C,H,W] -> [C]` mean over batch and space (batch-norm statistics).
    BatchChanMean(usize),
    /// `[B,C,H,W] -> [C]` population variance over batch and space.
    BatchChanVar(usize),
    /// Elementwise combine with a `[B,C]` statistic broadcast over H,W.
    BcAdd { input: usize, stat: usize },
    BcSub { input: usize, stat: usize },
    BcMul { input: usize, stat: usize },
    BcDiv { input: usize, stat: usize },
    /// Elementwise combine with a `[C]` vector broadcast over B,H,W.
    BcAddVec { input: usize, vec: usize },
    BcSubVec { input: usize, vec: usize },
    BcMulVec { input: usize, vec: usize },
    BcDivVec { input: usize, vec: usize },
    /// `[C] -> [rows, C]`.
    RowBroadcast { vec: usize },
    /// `[B,C]` with rows reordered by a fixed permutation.
    PermuteRows { input: usize, perm: Vec<u32> },
    /// `[B,C]` with row b scaled by the constant `weights[b]`.
    ScaleRows { input: usize, weights: Vec<T> },
    /// Mean over the batch of -log softmax(logits)[label].
    CrossEntropy { logits: usize, labels: Vec<u32> },
    /// Sum of squared differences (scalar).
    L2Squared(usize, usize),
    /// sqrt of the sum of squares (scalar); gradient at zero defined as zero.
    FrobNorm(usize),
    /// Per-sample Frobenius norm of `[B, ...]` -> `[B]`.
    BatchFrobNorm(usize),
    /// Per-sample Gram matrix `[B,C,H,W] -> [B,C,C]`, normalized by C*H*W.
    Gram(usize),
    SumAll(usize),
    MeanAll(usize),
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn dims4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::shape(format!(
                "{what}: expected a [B,C,H,W] tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    fn req(&self) -> bool {
        self.graph.tape().nodes[self.id].requires_grad
    }

    fn binary_elementwise(
        &self,
        other: &Tensor<T>,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Tensor<T>> {
        if !self.same_graph(other) {
            return Err(Error::Contract(format!("{what}: operands from different graphs")));
        }
        check_same_shape(self, other, what)?;
        let data = {
            let tape = self.graph.tape();
            let a = &tape.nodes[self.id].data;
            let b = &tape.nodes[other.id].data;
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        let requires = self.req() || other.req();
        Ok(self.graph.push(data, self.shape.clone(), op(self.id, other.id), requires, None))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_elementwise(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn add_scalar(&self, v: T) -> Tensor<T> {
        let data = {
            let tape = self.graph.tape();
            tape.nodes[self.id].data.iter().map(|&x| x + v).collect()
        };
        self.graph.push(data, self.shape.clone(), Op::AddScalar(self.id, v), self.req(), None)
    }

    pub fn scale(&self, v: T) -> Tensor<T> {
        let data = {
            let tape = self.graph.tape();
            tape.nodes[self.id].data.iter().map(|&x| x * v).collect()
        };
        self.graph.push(data, self.shape.clone(), Op::Scale(self.id, v), self.req(), None)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn sqrt_elem(&self) -> Tensor<T> {
        let data = {
            let tape = self.graph.tape();
            tape.nodes[self.id].data.iter().map(|&x| x.sqrt()).collect()
        };
        self.graph.push(data, self.shape.clone(), Op::Sqrt(self.id), self.req(), None)
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = {
            let tape = self.graph.tape();
            tape.nodes[self.id].data.iter().map(|&x| x.max(T::zero())).collect()
        };
        self.graph.push(data, self.shape.clone(), Op::Relu(self.id), self.req(), None)
    }

    /// Cross-correlation with zero padding. `kernel` is `[O, C, kh, kw]`.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        if !self.same_graph(kernel) {
            return Err(Error::Contract("conv2d: operands from different graphs".into()));
        }
        let (b, c, h, w) = self.dims4("conv2d input")?;
        let (o, kc, kh, kw) = kernel.dims4("conv2d kernel")?;
        if kc != c {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {kc} input channels, input has {c}"
            )));
        }
        if stride < 1 {
            return Err(Error::shape("conv2d: stride must be >= 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let dims = ConvDims::new(&self.shape, &kernel.shape, stride, padding);
        let data = {
            let tape = self.graph.tape();
            kernels::conv2d_forward(&tape.nodes[self.id].data, &tape.nodes[kernel.id].data, &dims)
        };
        let shape = vec![b, o, dims.out_h, dims.out_w];
        let requires = self.req() || kernel.req();
        Ok(self.graph.push(
            data,
            shape,
            Op::Conv2d { input: self.id, kernel: kernel.id, stride, padding },
            requires,
            None,
        ))
    }

    /// Window maximum without padding; gradient routes to the first maximal
    /// element in scan order.
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("max_pool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::shape("max_pool2d: window and stride must be >= 1"));
        }
        if window > h || window > w {
            return Err(Error::shape(format!(
                "max_pool2d: window {window} larger than input {h}x{w}"
            )));
        }
        let (data, argmax, oh, ow) = {
            let tape = self.graph.tape();
            kernels::maxpool_forward(&tape.nodes[self.id].data, b, c, h, w, window, stride)
        };
        Ok(self.graph.push(
            data,
            vec![b, c, oh, ow],
            Op::MaxPool2d { input: self.id, argmax },
            self.req(),
            None,
        ))
    }

    /// Affine map `x [B,D] @ weight [D,K] + bias [K]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.same_graph(weight) || !self.same_graph(bias) {
            return Err(Error::Contract("linear: operands from different graphs".into()));
        }
        if self.shape.len() != 2 || weight.shape.len() != 2 || bias.shape.len() != 1 {
            return Err(Error::shape(format!(
                "linear: expected x [B,D], weight [D,K], bias [K]; got {:?}, {:?}, {:?}",
                self.shape, weight.shape, bias.shape
            )));
        }
        let (b, d) = (self.shape[0], self.shape[1]);
        let (wd, k) = (weight.shape[0], weight.shape[1]);
        if d != wd || bias.shape[0] != k {
            return Err(Error::shape(format!(
                "linear: inner dimensions do not match (x [{b},{d}], weight [{wd},{k}], bias [{}])",
                bias.shape[0]
            )));
        }
        let data = {
            let tape = self.graph.tape();
            kernels::linear_forward(
                &tape.nodes[self.id].data,
                &tape.nodes[weight.id].data,
                &tape.nodes[bias.id].data,
                b,
                d,
                k,
            )
        };
        let requires = self.req() || weight.req() || bias.req();
        Ok(self.graph.push(
            data,
            vec![b, k],
            Op::Linear { input: self.id, weight: weight.id, bias: bias.id },
            requires,
            None,
        ))
    }

    /// Spatial mean per instance-channel: `[B,C,H,W] -> [B,C]`.
    pub fn channel_mean(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("channel_mean")?;
        let n = T::from_f64((h * w) as f64);
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let mut out = vec![T::zero(); b * c];
            for (bc, slot) in out.iter_mut().enumerate() {
                let plane = &x[bc * h * w..(bc + 1) * h * w];
                let mut acc = T::zero();
                for &v in plane {
                    acc = acc + v;
                }
                *slot = acc / n;
            }
            out
        };
        Ok(self.graph.push(data, vec![b, c], Op::ChannelMean(self.id), self.req(), None))
    }

    /// Per instance-channel `sqrt(population variance + eps)`: `[B,C,H,W] -> [B,C]`.
    pub fn channel_std(&self, eps: T) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("channel_std")?;
        let n = T::from_f64((h * w) as f64);
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let mut out = vec![T::zero(); b * c];
            for (bc, slot) in out.iter_mut().enumerate() {
                let plane = &x[bc * h * w..(bc + 1) * h * w];
                let mut acc = T::zero();
                for &v in plane {
                    acc = acc + v;
                }
                let mu = acc / n;
                let mut var = T::zero();
                for &v in plane {
                    let d = v - mu;
                    var = var + d * d;
                }
                *slot = (var / n + eps).sqrt();
            }
            out
        };
        Ok(self.graph.push(data, vec![b, c], Op::ChannelStd { input: self.id }, self.req(), None))
    }

    /// Per-channel mean over batch and space: `[B,C,H,W] -> [C]`.
    pub fn batch_chan_mean(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("batch_chan_mean")?;
        let n = T::from_f64((b * h * w) as f64);
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let mut out = vec![T::zero(); c];
            for bi in 0..b {
                for (ci, slot) in out.iter_mut().enumerate() {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    let mut acc = T::zero();
                    for &v in plane {
                        acc = acc + v;
                    }
                    *slot = *slot + acc;
                }
            }
            for slot in &mut out {
                *slot = *slot / n;
            }
            out
        };
        Ok(self.graph.push(data, vec![c], Op::BatchChanMean(self.id), self.req(), None))
    }

    /// Per-channel population variance over batch and space: `[B,C,H,W] -> [C]`.
    pub fn batch_chan_var(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("batch_chan_var")?;
        let n = T::from_f64((b * h * w) as f64);
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let mut mean = vec![T::zero(); c];
            for bi in 0..b {
                for (ci, slot) in mean.iter_mut().enumerate() {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for &v in plane {
                        *slot = *slot + v;
                    }
                }
            }
            for slot in &mut mean {
                *slot = *slot / n;
            }
            let mut var = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    let m = mean[ci];
                    let mut acc = T::zero();
                    for &v in plane {
                        let d = v - m;
                        acc = acc + d * d;
                    }
                    var[ci] = var[ci] + acc;
                }
            }
            for slot in &mut var {
                *slot = *slot / n;
            }
            var
        };
        Ok(self.graph.push(data, vec![c], Op::BatchChanVar(self.id), self.req(), None))
    }

    fn bc_combine(
        &self,
        stat: &Tensor<T>,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Tensor<T>> {
        if !self.same_graph(stat) {
            return Err(Error::Contract(format!("{what}: operands from different graphs")));
        }
        let (b, c, h, w) = self.dims4(what)?;
        if stat.shape != [b, c] {
            return Err(Error::shape(format!(
                "{what}: statistic shape {:?} does not match [B,C]=[{b},{c}]",
                stat.shape
            )));
        }
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let s = &tape.nodes[stat.id].data;
            let mut out = vec![T::zero(); x.len()];
            for bc in 0..b * c {
                let sv = s[bc];
                let src = &x[bc * h * w..(bc + 1) * h * w];
                let dst = &mut out[bc * h * w..(bc + 1) * h * w];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = f(v, sv);
                }
            }
            out
        };
        let requires = self.req() || stat.req();
        Ok(self.graph.push(data, self.shape.clone(), op(self.id, stat.id), requires, None))
    }

    pub fn bc_add(&self, stat: &Tensor<T>) -> Result<Tensor<T>> {
        self.bc_combine(stat, "bc_add", |a, b| a + b, |input, stat| Op::BcAdd { input, stat })
    }

    pub fn bc_sub(&self, stat: &Tensor<T>) -> Result<Tensor<T>> {
        self.bc_combine(stat, "bc_sub", |a, b| a - b, |input, stat| Op::BcSub { input, stat })
    }

    pub fn bc_mul(&self, stat: &Tensor<T>) -> Result<Tensor<T>> {
        self.bc_combine(stat, "bc_mul", |a, b| a * b, |input, stat| Op::BcMul { input, stat })
    }

    pub fn bc_div(&self, stat: &Tensor<T>) -> Result<Tensor<T>> {
        self.bc_combine(stat, "bc_div", |a, b| a / b, |input, stat| Op::BcDiv { input, stat })
    }

    fn bc_vec_combine(
        &self,
        v: &Tensor<T>,
        what: &str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Tensor<T>> {
        if !self.same_graph(v) {
            return Err(Error::Contract(format!("{what}: operands from different graphs")));
        }
        let (b, c, h, w) = self.dims4(what)?;
        if v.shape != [c] {
            return Err(Error::shape(format!(
                "{what}: vector shape {:?} does not match channel count {c}",
                v.shape
            )));
        }
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let vv = &tape.nodes[v.id].data;
            let mut out = vec![T::zero(); x.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let sv = vv[ci];
                    let base = (bi * c + ci) * h * w;
                    for k in 0..h * w {
                        out[base + k] = f(x[base + k], sv);
                    }
                }
            }
            out
        };
        let requires = self.req() || v.req();
        Ok(self.graph.push(data, self.shape.clone(), op(self.id, v.id), requires, None))
    }

    pub fn bc_add_vec(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.bc_vec_combine(v, "bc_add_vec", |a, b| a + b, |input, vec| Op::BcAddVec { input, vec })
    }

    pub fn bc_sub_vec(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.bc_vec_combine(v, "bc_sub_vec", |a, b| a - b, |input, vec| Op::BcSubVec { input, vec })
    }

    pub fn bc_mul_vec(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.bc_vec_combine(v, "bc_mul_vec", |a, b| a * b, |input, vec| Op::BcMulVec { input, vec })
    }

    pub fn bc_div_vec(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.bc_vec_combine(v, "bc_div_vec", |a, b| a / b, |input, vec| Op::BcDivVec { input, vec })
    }

    /// Repeat a `[C]` vector into `[rows, C]`.
    pub fn row_broadcast(&self, rows: usize) -> Result<Tensor<T>> {
        if self.shape.len() != 1 {
            return Err(Error::shape(format!(
                "row_broadcast: expected a rank-1 tensor, got {:?}",
                self.shape
            )));
        }
        let c = self.shape[0];
        let data = {
            let tape = self.graph.tape();
            let v = &tape.nodes[self.id].data;
            let mut out = Vec::with_capacity(rows * c);
            for _ in 0..rows {
                out.extend_from_slice(v);
            }
            out
        };
        Ok(self.graph.push(data, vec![rows, c], Op::RowBroadcast { vec: self.id }, self.req(), None))
    }

    /// Reorder the rows of a `[B,C]` tensor: `out[r,:] = x[perm[r],:]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "permute_rows: expected a rank-2 tensor, got {:?}",
                self.shape
            )));
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        if perm.len() != b || perm.iter().any(|&p| p >= b) {
            return Err(Error::Index(format!(
                "permute_rows: permutation of length {} invalid for {b} rows",
                perm.len()
            )));
        }
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let mut out = vec![T::zero(); b * c];
            for (r, &p) in perm.iter().enumerate() {
                out[r * c..(r + 1) * c].copy_from_slice(&x[p * c..(p + 1) * c]);
            }
            out
        };
        let perm32 = perm.iter().map(|&p| p as u32).collect();
        Ok(self.graph.push(
            data,
            self.shape.clone(),
            Op::PermuteRows { input: self.id, perm: perm32 },
            self.req(),
            None,
        ))
    }

    /// Scale row b of a `[B,C]` tensor by the constant `weights[b]`.
    pub fn scale_rows(&self, weights: &[T]) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "scale_rows: expected a rank-2 tensor, got {:?}",
                self.shape
            )));
        }
        let (b, c) = (self.shape[0], self.shape[1]);
        if weights.len() != b {
            return Err(Error::shape(format!(
                "scale_rows: {} weights for {b} rows",
                weights.len()
            )));
        }
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let mut out = vec![T::zero(); b * c];
            for (r, &wv) in weights.iter().enumerate() {
                for k in 0..c {
                    out[r * c + k] = x[r * c + k] * wv;
                }
            }
            out
        };
        Ok(self.graph.push(
            data,
            self.shape.clone(),
            Op::ScaleRows { input: self.id, weights: weights.to_vec() },
            self.req(),
            None,
        ))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized by
    /// max subtraction. `self` is `[B,K]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "cross_entropy: expected logits [B,K], got {:?}",
                self.shape
            )));
        }
        let (b, k) = (self.shape[0], self.shape[1]);
        if labels.len() != b {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let mut total = T::zero();
            for (bi, &label) in labels.iter().enumerate() {
                let row = &x[bi * k..(bi + 1) * k];
                let mut mx = T::neg_infinity();
                for &v in row {
                    mx = mx.max(v);
                }
                let mut lse = T::zero();
                for &v in row {
                    lse = lse + (v - mx).exp();
                }
                total = total + lse.ln() + mx - row[label];
            }
            vec![total / T::from_f64(b as f64)]
        };
        let labels32 = labels.iter().map(|&l| l as u32).collect();
        Ok(self.graph.push(
            data,
            vec![],
            Op::CrossEntropy { logits: self.id, labels: labels32 },
            self.req(),
            None,
        ))
    }

    /// Sum of squared differences, as a scalar.
    pub fn l2_squared(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.same_graph(other) {
            return Err(Error::Contract("l2_squared: operands from different graphs".into()));
        }
        check_same_shape(self, other, "l2_squared")?;
        let data = {
            let tape = self.graph.tape();
            let a = &tape.nodes[self.id].data;
            let b = &tape.nodes[other.id].data;
            let mut acc = T::zero();
            for (&x, &y) in a.iter().zip(b) {
                let d = x - y;
                acc = acc + d * d;
            }
            vec![acc]
        };
        let requires = self.req() || other.req();
        Ok(self.graph.push(data, vec![], Op::L2Squared(self.id, other.id), requires, None))
    }

    /// Frobenius norm (sqrt of sum of squares) of the whole tensor.
    pub fn frobenius_norm(&self) -> Tensor<T> {
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let mut acc = T::zero();
            for &v in x {
                acc = acc + v * v;
            }
            vec![acc.sqrt()]
        };
        self.graph.push(data, vec![], Op::FrobNorm(self.id), self.req(), None)
    }

    /// Per-sample Frobenius norm of a `[B, ...]` tensor, giving `[B]`.
    pub fn batch_frobenius_norm(&self) -> Result<Tensor<T>> {
        if self.shape.is_empty() {
            return Err(Error::shape("batch_frobenius_norm: rank-0 tensor has no batch"));
        }
        let b = self.shape[0];
        let per = numel(&self.shape[1..]);
        let data = {
            let tape = self.graph.tape();
            let x = &tape.nodes[self.id].data;
            let mut out = vec![T::zero(); b];
            for (bi, slot) in out.iter_mut().enumerate() {
                let mut acc = T::zero();
                for &v in &x[bi * per..(bi + 1) * per] {
                    acc = acc + v * v;
                }
                *slot = acc.sqrt();
            }
            out
        };
        Ok(self.graph.push(data, vec![b], Op::BatchFrobNorm(self.id), self.req(), None))
    }

    /// Per-sample Gram matrix over flattened spatial positions, normalized by
    /// `C*H*W`: `[B,C,H,W] -> [B,C,C]`.
    pub fn gram(&self) -> Result<Tensor<T>> {
        let (b, c, h, w) = self.dims4("gram")?;
        let data = {
            let tape = self.graph.tape();
            kernels::gram_forward(&tape.nodes[self.id].data, b, c, h * w)
        };
        Ok(self.graph.push(data, vec![b, c, c], Op::Gram(self.id), self.req(), None))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let data = {
            let tape = self.graph.tape();
            let mut acc = T::zero();
            for &v in &tape.nodes[self.id].data {
                acc = acc + v;
            }
            vec![acc]
        };
        self.graph.push(data, vec![], Op::SumAll(self.id), self.req(), None)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64(self.numel() as f64);
        let data = {
            let tape = self.graph.tape();
            let mut acc = T::zero();
            for &v in &tape.nodes[self.id].data {
                acc = acc + v;
            }
            vec![acc / n]
        };
        self.graph.push(data, vec![], Op::MeanAll(self.id), self.req(), None)
    }
}

impl<T: Real> Graph<T> {
    /// Convenience for tests: leaf 4-D tensor.
    pub fn tensor4(
        &self,
        data: Vec<T>,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
        requires_grad: bool,
    ) -> Result<Tensor<T>> {
        self.leaf(data, vec![b, c, h, w], requires_grad, None)
    }
}

impl<T: Real> Tape<T> {
    /// Accumulate the vector-Jacobian product of node `id` into `tgrad`.
    pub(crate) fn vjp(&self, id: usize, g: &[T], tgrad: &mut [Option<Vec<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                if let Some(dst) = self.acc(tgrad, *a) {
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if let Some(dst) = self.acc(tgrad, *b) {
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
            }

            Op::Sub(a, b) => {
                if let Some(dst) = self.acc(tgrad, *a) {
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if let Some(dst) = self.acc(tgrad, *b) {
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d = *d - gi;
                    }
                }
            }

            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let bd = &self.nodes[b].data;
                    let dst = self.acc(tgrad, a).unwrap();
                    for ((d, &gi), &bv) in dst.iter_mut().zip(g).zip(bd) {
                        *d = *d + gi * bv;
                    }
                }
                if self.nodes[b].requires_grad {
                    let ad = &self.nodes[a].data;
                    let dst = self.acc(tgrad, b).unwrap();
                    for ((d, &gi), &av) in dst.iter_mut().zip(g).zip(ad) {
                        *d = *d + gi * av;
                    }
                }
            }

            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let bd = &self.nodes[b].data;
                    let dst = self.acc(tgrad, a).unwrap();
                    for ((d, &gi), &bv) in dst.iter_mut().zip(g).zip(bd) {
                        *d = *d + gi / bv;
                    }
                }
                if self.nodes[b].requires_grad {
                    let bd = &self.nodes[b].data;
                    let yd = &self.nodes[id].data;
                    let dst = self.acc(tgrad, b).unwrap();
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d = *d - g[i] * yd[i] / bd[i];
                    }
                }
            }

            Op::AddScalar(a, _) => {
                if let Some(dst) = self.acc(tgrad, *a) {
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
            }

            Op::Scale(a, c) => {
                let c = *c;
                if let Some(dst) = self.acc(tgrad, *a) {
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d = *d + gi * c;
                    }
                }
            }

            Op::Sqrt(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let yd = &self.nodes[id].data;
                    let half = T::from_f64(0.5);
                    let dst = self.acc(tgrad, a).unwrap();
                    for (i, d) in dst.iter_mut().enumerate() {
                        if yd[i] > T::zero() {
                            *d = *d + g[i] * half / yd[i];
                        }
                    }
                }
            }

            Op::Relu(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let xd = &self.nodes[a].data;
                    let dst = self.acc(tgrad, a).unwrap();
                    for (i, d) in dst.iter_mut().enumerate() {
                        if xd[i] > T::zero() {
                            *d = *d + g[i];
                        }
                    }
                }
            }

            Op::Conv2d { input, kernel, stride, padding } => {
                let (input, kernel) = (*input, *kernel);
                let dims = ConvDims::new(
                    &self.nodes[input].shape,
                    &self.nodes[kernel].shape,
                    *stride,
                    *padding,
                );
                let need_in = self.nodes[input].requires_grad;
                let need_k = self.nodes[kernel].requires_grad;
                let (din, dk) = kernels::conv2d_backward(
                    &self.nodes[input].data,
                    &self.nodes[kernel].data,
                    &dims,
                    g,
                    need_in,
                    need_k,
                );
                if let Some(din) = din {
                    let dst = self.acc(tgrad, input).unwrap();
                    for (d, &v) in dst.iter_mut().zip(&din) {
                        *d = *d + v;
                    }
                }
                if let Some(dk) = dk {
                    let dst = self.acc(tgrad, kernel).unwrap();
                    for (d, &v) in dst.iter_mut().zip(&dk) {
                        *d = *d + v;
                    }
                }
            }

            Op::MaxPool2d { input, argmax } => {
                let input = *input;
                if self.nodes[input].requires_grad {
                    let arg = argmax;
                    let dst = self.acc(tgrad, input).unwrap();
                    for (i, &src) in arg.iter().enumerate() {
                        dst[src as usize] = dst[src as usize] + g[i];
                    }
                }
            }

            Op::Linear { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let (b, d) = (self.nodes[input].shape[0], self.nodes[input].shape[1]);
                let k = self.nodes[weight].shape[1];
                if self.nodes[input].requires_grad {
                    let wd = &self.nodes[weight].data;
                    let dst = self.acc(tgrad, input).unwrap();
                    for bi in 0..b {
                        for di in 0..d {
                            let wrow = &wd[di * k..(di + 1) * k];
                            let grow = &g[bi * k..(bi + 1) * k];
                            let mut acc = T::zero();
                            for (&wv, &gv) in wrow.iter().zip(grow) {
                                acc = acc + wv * gv;
                            }
                            dst[bi * d + di] = dst[bi * d + di] + acc;
                        }
                    }
                }
                if self.nodes[weight].requires_grad {
                    let xd = &self.nodes[input].data;
                    let dst = self.acc(tgrad, weight).unwrap();
                    for bi in 0..b {
                        let grow = &g[bi * k..(bi + 1) * k];
                        for di in 0..d {
                            let xv = xd[bi * d + di];
                            let wrow = &mut dst[di * k..(di + 1) * k];
                            for (wv, &gv) in wrow.iter_mut().zip(grow) {
                                *wv = *wv + xv * gv;
                            }
                        }
                    }
                }
                if self.nodes[bias].requires_grad {
                    let dst = self.acc(tgrad, bias).unwrap();
                    for bi in 0..b {
                        let grow = &g[bi * k..(bi + 1) * k];
                        for (dv, &gv) in dst.iter_mut().zip(grow) {
                            *dv = *dv + gv;
                        }
                    }
                }
            }

            Op::ChannelMean(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let shape = self.nodes[a].shape.clone();
                    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let n = T::from_f64(hw as f64);
                    let dst = self.acc(tgrad, a).unwrap();
                    for bc in 0..b * c {
                        let gv = g[bc] / n;
                        for k in 0..hw {
                            dst[bc * hw + k] = dst[bc * hw + k] + gv;
                        }
                    }
                }
            }

            Op::ChannelStd { input } => {
                let input = *input;
                if self.nodes[input].requires_grad {
                    let shape = self.nodes[input].shape.clone();
                    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let n = T::from_f64(hw as f64);
                    let xd = &self.nodes[input].data;
                    let sigma = &self.nodes[id].data;
                    let dst = self.acc(tgrad, input).unwrap();
                    for bc in 0..b * c {
                        if sigma[bc] <= T::zero() {
                            continue;
                        }
                        let plane = &xd[bc * hw..(bc + 1) * hw];
                        let mut mu = T::zero();
                        for &v in plane {
                            mu = mu + v;
                        }
                        mu = mu / n;
                        let coef = g[bc] / (n * sigma[bc]);
                        for (k, &v) in plane.iter().enumerate() {
                            dst[bc * hw + k] = dst[bc * hw + k] + coef * (v - mu);
                        }
                    }
                }
            }

            Op::BatchChanMean(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let shape = self.nodes[a].shape.clone();
                    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let n = T::from_f64((b * hw) as f64);
                    let dst = self.acc(tgrad, a).unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = g[ci] / n;
                            let base = (bi * c + ci) * hw;
                            for k in 0..hw {
                                dst[base + k] = dst[base + k] + gv;
                            }
                        }
                    }
                }
            }

            Op::BatchChanVar(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let shape = self.nodes[a].shape.clone();
                    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let n = T::from_f64((b * hw) as f64);
                    let xd = &self.nodes[a].data;
                    let mut mean = vec![T::zero(); c];
                    for bi in 0..b {
                        for (ci, m) in mean.iter_mut().enumerate() {
                            let base = (bi * c + ci) * hw;
                            for k in 0..hw {
                                *m = *m + xd[base + k];
                            }
                        }
                    }
                    for m in &mut mean {
                        *m = *m / n;
                    }
                    let two = T::from_f64(2.0);
                    let dst = self.acc(tgrad, a).unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            let coef = g[ci] * two / n;
                            let base = (bi * c + ci) * hw;
                            for k in 0..hw {
                                dst[base + k] = dst[base + k] + coef * (xd[base + k] - mean[ci]);
                            }
                        }
                    }
                }
            }

            Op::BcAdd { input, stat } | Op::BcSub { input, stat } => {
                let negate = matches!(self.nodes[id].op, Op::BcSub { .. });
                let (input, stat) = (*input, *stat);
                let shape = self.nodes[input].shape.clone();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                if self.nodes[input].requires_grad {
                    let dst = self.acc(tgrad, input).unwrap();
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.nodes[stat].requires_grad {
                    let dst = self.acc(tgrad, stat).unwrap();
                    for bc in 0..b * c {
                        let mut acc = T::zero();
                        for k in 0..hw {
                            acc = acc + g[bc * hw + k];
                        }
                        dst[bc] = if negate { dst[bc] - acc } else { dst[bc] + acc };
                    }
                }
            }

            Op::BcMul { input, stat } => {
                let (input, stat) = (*input, *stat);
                let shape = self.nodes[input].shape.clone();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                if self.nodes[input].requires_grad {
                    let sd = &self.nodes[stat].data;
                    let dst = self.acc(tgrad, input).unwrap();
                    for bc in 0..b * c {
                        let sv = sd[bc];
                        for k in 0..hw {
                            dst[bc * hw + k] = dst[bc * hw + k] + g[bc * hw + k] * sv;
                        }
                    }
                }
                if self.nodes[stat].requires_grad {
                    let xd = &self.nodes[input].data;
                    let dst = self.acc(tgrad, stat).unwrap();
                    for bc in 0..b * c {
                        let mut acc = T::zero();
                        for k in 0..hw {
                            acc = acc + g[bc * hw + k] * xd[bc * hw + k];
                        }
                        dst[bc] = dst[bc] + acc;
                    }
                }
            }

            Op::BcDiv { input, stat } => {
                let (input, stat) = (*input, *stat);
                let shape = self.nodes[input].shape.clone();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let sd = &self.nodes[stat].data;
                if self.nodes[input].requires_grad {
                    let dst = self.acc(tgrad, input).unwrap();
                    for bc in 0..b * c {
                        let sv = sd[bc];
                        for k in 0..hw {
                            dst[bc * hw + k] = dst[bc * hw + k] + g[bc * hw + k] / sv;
                        }
                    }
                }
                if self.nodes[stat].requires_grad {
                    let yd = &self.nodes[id].data;
                    let dst = self.acc(tgrad, stat).unwrap();
                    for bc in 0..b * c {
                        let mut acc = T::zero();
                        for k in 0..hw {
                            acc = acc + g[bc * hw + k] * yd[bc * hw + k];
                        }
                        dst[bc] = dst[bc] - acc / sd[bc];
                    }
                }
            }

            Op::BcAddVec { input, vec } | Op::BcSubVec { input, vec } => {
                let negate = matches!(self.nodes[id].op, Op::BcSubVec { .. });
                let (input, vec) = (*input, *vec);
                let shape = self.nodes[input].shape.clone();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                if self.nodes[input].requires_grad {
                    let dst = self.acc(tgrad, input).unwrap();
                    for (d, &gi) in dst.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if self.nodes[vec].requires_grad {
                    let dst = self.acc(tgrad, vec).unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let mut acc = T::zero();
                            for k in 0..hw {
                                acc = acc + g[base + k];
                            }
                            dst[ci] = if negate { dst[ci] - acc } else { dst[ci] + acc };
                        }
                    }
                }
            }

            Op::BcMulVec { input, vec } => {
                let (input, vec) = (*input, *vec);
                let shape = self.nodes[input].shape.clone();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                if self.nodes[input].requires_grad {
                    let vd = &self.nodes[vec].data;
                    let dst = self.acc(tgrad, input).unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            let sv = vd[ci];
                            let base = (bi * c + ci) * hw;
                            for k in 0..hw {
                                dst[base + k] = dst[base + k] + g[base + k] * sv;
                            }
                        }
                    }
                }
                if self.nodes[vec].requires_grad {
                    let xd = &self.nodes[input].data;
                    let dst = self.acc(tgrad, vec).unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let mut acc = T::zero();
                            for k in 0..hw {
                                acc = acc + g[base + k] * xd[base + k];
                            }
                            dst[ci] = dst[ci] + acc;
                        }
                    }
                }
            }

            Op::BcDivVec { input, vec } => {
                let (input, vec) = (*input, *vec);
                let shape = self.nodes[input].shape.clone();
                let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let vd = &self.nodes[vec].data;
                if self.nodes[input].requires_grad {
                    let dst = self.acc(tgrad, input).unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            let sv = vd[ci];
                            let base = (bi * c + ci) * hw;
                            for k in 0..hw {
                                dst[base + k] = dst[base + k] + g[base + k] / sv;
                            }
                        }
                    }
                }
                if self.nodes[vec].requires_grad {
                    let yd = &self.nodes[id].data;
                    let dst = self.acc(tgrad, vec).unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let mut acc = T::zero();
                            for k in 0..hw {
                                acc = acc + g[base + k] * yd[base + k];
                            }
                            dst[ci] = dst[ci] - acc / vd[ci];
                        }
                    }
                }
            }

            Op::RowBroadcast { vec } => {
                let vec = *vec;
                if self.nodes[vec].requires_grad {
                    let c = self.nodes[vec].data.len();
                    let rows = self.nodes[id].shape[0];
                    let dst = self.acc(tgrad, vec).unwrap();
                    for r in 0..rows {
                        for k in 0..c {
                            dst[k] = dst[k] + g[r * c + k];
                        }
                    }
                }
            }

            Op::PermuteRows { input, perm } => {
                let input = *input;
                if self.nodes[input].requires_grad {
                    let c = self.nodes[input].shape[1];
                    let perm = perm;
                    let dst = self.acc(tgrad, input).unwrap();
                    for (r, &p) in perm.iter().enumerate() {
                        let p = p as usize;
                        for k in 0..c {
                            dst[p * c + k] = dst[p * c + k] + g[r * c + k];
                        }
                    }
                }
            }

            Op::ScaleRows { input, weights } => {
                let input = *input;
                if self.nodes[input].requires_grad {
                    let c = self.nodes[input].shape[1];
                    let w = weights;
                    let dst = self.acc(tgrad, input).unwrap();
                    for (r, &wv) in w.iter().enumerate() {
                        for k in 0..c {
                            dst[r * c + k] = dst[r * c + k] + g[r * c + k] * wv;
                        }
                    }
                }
            }

            Op::CrossEntropy { logits, labels } => {
                let logits = *logits;
                if self.nodes[logits].requires_grad {
                    let (b, k) = (self.nodes[logits].shape[0], self.nodes[logits].shape[1]);
                    let xd = &self.nodes[logits].data;
                    let labels = labels;
                    let coef = g[0] / T::from_f64(b as f64);
                    let dst = self.acc(tgrad, logits).unwrap();
                    for (bi, &label) in labels.iter().enumerate() {
                        let row = &xd[bi * k..(bi + 1) * k];
                        let mut mx = T::neg_infinity();
                        for &v in row {
                            mx = mx.max(v);
                        }
                        let mut denom = T::zero();
                        for &v in row {
                            denom = denom + (v - mx).exp();
                        }
                        for (ki, &v) in row.iter().enumerate() {
                            let mut p = (v - mx).exp() / denom;
                            if ki == label as usize {
                                p = p - T::one();
                            }
                            dst[bi * k + ki] = dst[bi * k + ki] + coef * p;
                        }
                    }
                }
            }

            Op::L2Squared(a, b) => {
                let (a, b) = (*a, *b);
                let two = T::from_f64(2.0);
                let coef = g[0] * two;
                if self.nodes[a].requires_grad || self.nodes[b].requires_grad {
                    let ad = &self.nodes[a].data;
                    let bd = &self.nodes[b].data;
                    if self.nodes[a].requires_grad {
                        let dst = self.acc(tgrad, a).unwrap();
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d = *d + coef * (ad[i] - bd[i]);
                        }
                    }
                    if self.nodes[b].requires_grad {
                        let dst = self.acc(tgrad, b).unwrap();
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d = *d - coef * (ad[i] - bd[i]);
                        }
                    }
                }
            }

            Op::FrobNorm(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let norm = self.nodes[id].data[0];
                    let xd = &self.nodes[a].data;
                    // subgradient 0 at the zero matrix; buffer still materializes
                    let dst = self.acc(tgrad, a).unwrap();
                    if norm > T::zero() {
                        let coef = g[0] / norm;
                        for (d, &v) in dst.iter_mut().zip(&xd) {
                            *d = *d + coef * v;
                        }
                    }
                }
            }

            Op::BatchFrobNorm(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let b = self.nodes[a].shape[0];
                    let per = self.nodes[a].data.len() / b;
                    let xd = &self.nodes[a].data;
                    let norms = &self.nodes[id].data;
                    let dst = self.acc(tgrad, a).unwrap();
                    for bi in 0..b {
                        if norms[bi] <= T::zero() {
                            continue;
                        }
                        let coef = g[bi] / norms[bi];
                        for k in 0..per {
                            dst[bi * per + k] = dst[bi * per + k] + coef * xd[bi * per + k];
                        }
                    }
                }
            }

            Op::Gram(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let shape = self.nodes[a].shape.clone();
                    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let dx = kernels::gram_backward(&self.nodes[a].data, g, b, c, hw);
                    let dst = self.acc(tgrad, a).unwrap();
                    for (d, &v) in dst.iter_mut().zip(&dx) {
                        *d = *d + v;
                    }
                }
            }

            Op::SumAll(a) => {
                if let Some(dst) = self.acc(tgrad, *a) {
                    let gv = g[0];
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }

            Op::MeanAll(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let n = T::from_f64(self.nodes[a].data.len() as f64);
                    let gv = g[0] / n;
                    let dst = self.acc(tgrad, a).unwrap();
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                }
            }
        }
    }
}
