use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{
    col2im, gemm, im2col, interval_gemm_left, interval_gemm_right, transpose2, Conv2dGeometry,
    Real, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Gradient of a scalar root with respect to every registered parameter.
pub type GradientSet<T> = BTreeMap<ParamId, Tensor<T>>;

/// Unit-variance elementwise functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Recip,
    Square,
    Exp,
    Log,
    Abs,
    /// Sign has no useful derivative; recording it on a differentiable input
    /// is rejected.
    Sign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise minimum. Ties select the first operand.
    Min,
}

/// One recorded operation with whatever the backward rule needs.
#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddConst(Var, T),
    SumAll(Var),
    MeanAll(Var),
    MaskedSum(Var, Vec<bool>),
    SubScalar(Var, Var),
    Reshape(Var),
    Pick {
        src: Var,
        index: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    IntervalLinear {
        lo: Var,
        hi: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        k: Var,
        b: Var,
        geom: Conv2dGeometry,
        cols: Vec<T>,
    },
    IntervalConv {
        lo: Var,
        hi: Var,
        k: Var,
        b: Var,
        geom: Conv2dGeometry,
        cols_lo: Vec<T>,
        cols_hi: Vec<T>,
    },
    ChannelMean(Var),
    ChannelVar {
        x: Var,
        mean: Vec<T>,
    },
    BnScale {
        gamma: Var,
        var: Var,
        eps: T,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        mean: Var,
        beta: Var,
    },
    SignSelect {
        sign_of: Var,
        pos: Var,
        neg: Var,
    },
    ElidedMargins {
        lo: Var,
        hi: Var,
        w: Var,
        b: Var,
        labels: Vec<usize>,
    },
    RobustCe {
        margins: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the recorded graph is acyclic
/// and topologically sorted by construction. Every discrete decision taken
/// during the forward pass (ReLU masks, weight sign splits, min branches,
/// scale signs, indicator masks) is folded into [`Tape::mask_fingerprint`],
/// which the gradient checker uses to detect finite-difference steps that
/// cross a kink.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
    fingerprint: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            fingerprint: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn mask_fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn mix_bits(&mut self, bits: impl IntoIterator<Item = bool>) {
        let mut h = self.fingerprint;
        let mut word = 0u64;
        let mut n = 0u32;
        for b in bits {
            word = (word << 1) | b as u64;
            n += 1;
            if n == 64 {
                h = (h ^ word).wrapping_mul(FNV_PRIME);
                word = 0;
                n = 0;
            }
        }
        h = (h ^ word ^ ((n as u64) << 56)).wrapping_mul(FNV_PRIME);
        self.fingerprint = h;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Records a differentiable leaf. Parameters get entries in the
    /// [`GradientSet`] produced by [`Gradients::into_gradient_set`].
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.params.push((v, id));
        v
    }

    /// Differentiable leaf that is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn unary(&mut self, f: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match f {
            Unary::Neg => xv.map(|v| -v),
            Unary::Relu => xv.map(|v| if v > T::zero() { v } else { T::zero() }),
            Unary::Recip => xv.map(|v| T::one() / v),
            Unary::Square => xv.map(|v| v * v),
            Unary::Exp => xv.map(|v| v.exp()),
            Unary::Log => xv.map(|v| v.ln()),
            Unary::Abs => xv.map(|v| v.abs()),
            Unary::Sign => {
                if self.needs_grad(x) {
                    return Err(Error::Unsupported(
                        "sign() on a differentiable input".into(),
                    ));
                }
                xv.map(|v| v.signum())
            }
        };
        if matches!(f, Unary::Relu | Unary::Abs) {
            let bits: Vec<bool> = self.value(x).data().iter().map(|&v| v > T::zero()).collect();
            self.mix_bits(bits);
        }
        Ok(self.push(out, Op::Unary(f, x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is always supported")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x).expect("neg is always supported")
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(Unary::Recip, x).expect("recip is always supported")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x).expect("square is always supported")
    }

    pub fn binary(&mut self, f: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = match f {
            Binary::Add => av.add(bv)?,
            Binary::Sub => av.sub(bv)?,
            Binary::Mul => av.zip_map(bv, |x, y| x * y)?,
            Binary::Div => av.zip_map(bv, |x, y| x / y)?,
            Binary::Min => av.zip_map(bv, |x, y| if y < x { y } else { x })?,
        };
        if f == Binary::Min {
            let bits: Vec<bool> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| y < x)
                .collect();
            self.mix_bits(bits);
        }
        Ok(self.push(out, Op::Binary(f, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst(x, c), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_all());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean_all());
        self.push(out, Op::MeanAll(x), &[x])
    }

    /// Sum of the entries selected by `mask`. The mask is a constant of the
    /// forward pass.
    pub fn masked_sum(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::dim(format!(
                "mask of length {} for tensor of {}",
                mask.len(),
                xv.len()
            )));
        }
        let mut acc = T::zero();
        for (&v, &m) in xv.data().iter().zip(&mask) {
            if m {
                acc += v;
            }
        }
        self.mix_bits(mask.iter().copied());
        Ok(self.push(Tensor::scalar(acc), Op::MaskedSum(x, mask), &[x]))
    }

    /// `x − s` with a single-element `s` broadcast over `x`.
    pub fn sub_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("sub_scalar expects a single-element subtrahend"));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v - sv);
        Ok(self.push(out, Op::SubScalar(x, s), &[x, s]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Slice `index` of a tensor stacked along a leading axis.
    pub fn pick(&mut self, src: Var, index: usize) -> Result<Var> {
        let sv = self.value(src);
        let lead = *sv.shape().first().ok_or_else(|| Error::dim("pick on a scalar"))?;
        if index >= lead {
            return Err(Error::dim(format!("pick index {index} of {lead}")));
        }
        let stride = sv.len() / lead;
        let out = Tensor::new(
            sv.shape()[1..].to_vec(),
            sv.data()[index * stride..(index + 1) * stride].to_vec(),
        )?;
        Ok(self.push(out, Op::Pick { src, index }, &[src]))
    }

    /// Dense layer `x·Wᵀ + b` with `x: N×in`, `W: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Interval image of a dense layer. Returns a `2×N×out` tensor stacking
    /// the lower and upper bound; see [`interval_linear_forward`].
    pub fn interval_linear(&mut self, lo: Var, hi: Var, w: Var, b: Var) -> Result<Var> {
        let out = interval_linear_forward(self.value(lo), self.value(hi), self.value(w), self.value(b))?;
        let bits: Vec<bool> = self.value(w).data().iter().map(|&v| v >= T::zero()).collect();
        self.mix_bits(bits);
        Ok(self.push(out, Op::IntervalLinear { lo, hi, w, b }, &[lo, hi, w, b]))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, geom) =
            crate::tensor::linalg::conv_geometry(self.value(x), self.value(k), stride, padding)?;
        check_bias(self.value(b), geom.c_out)?;
        let cols = unroll_batch(&geom, n, self.value(x).data());
        let out = conv_from_cols(&geom, n, &cols, self.value(k).data(), self.value(b).data());
        let value = Tensor::new(vec![n, geom.c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::Conv { x, k, b, geom, cols }, &[x, k, b]))
    }

    /// Interval image of a convolution, stacked as `2×N×C_out×H'×W'`.
    pub fn interval_conv2d(
        &mut self,
        lo: Var,
        hi: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, geom) =
            crate::tensor::linalg::conv_geometry(self.value(lo), self.value(k), stride, padding)?;
        self.value(lo).check_same_shape(self.value(hi))?;
        check_bias(self.value(b), geom.c_out)?;
        let cols_lo = unroll_batch(&geom, n, self.value(lo).data());
        let cols_hi = unroll_batch(&geom, n, self.value(hi).data());
        let value = interval_conv_from_cols(
            &geom,
            n,
            &cols_lo,
            &cols_hi,
            self.value(k).data(),
            self.value(b).data(),
        )?;
        let bits: Vec<bool> = self.value(k).data().iter().map(|&v| v >= T::zero()).collect();
        self.mix_bits(bits);
        Ok(self.push(
            value,
            Op::IntervalConv {
                lo,
                hi,
                k,
                b,
                geom,
                cols_lo,
                cols_hi,
            },
            &[lo, hi, k, b],
        ))
    }

    /// Per-channel mean over batch and spatial positions (channel axis 1).
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = channel_layout(self.value(x))?;
        let mean = channel_means(self.value(x).data(), n, c, s);
        Ok(self.push(Tensor::new(vec![c], mean)?, Op::ChannelMean(x), &[x]))
    }

    /// Per-channel biased variance, computed as the mean squared deviation.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = channel_layout(self.value(x))?;
        let data = self.value(x).data();
        let mean = channel_means(data, n, c, s);
        let mut var = vec![T::zero(); c];
        for e in 0..n {
            for ch in 0..c {
                let base = (e * c + ch) * s;
                for &v in &data[base..base + s] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let count = T::of((n * s) as f64);
        for v in &mut var {
            *v = *v / count;
        }
        Ok(self.push(Tensor::new(vec![c], var)?, Op::ChannelVar { x, mean }, &[x]))
    }

    /// `γ / √(var + eps)`.
    pub fn bn_scale(&mut self, gamma: Var, var: Var, eps: T) -> Result<Var> {
        let out = self
            .value(gamma)
            .zip_map(self.value(var), |g, v| g / (v + eps).sqrt())?;
        Ok(self.push(out, Op::BnScale { gamma, var, eps }, &[gamma, var]))
    }

    /// `scale·(x − mean) + beta`, per channel.
    pub fn channel_affine(&mut self, x: Var, scale: Var, mean: Var, beta: Var) -> Result<Var> {
        let (n, c, s) = channel_layout(self.value(x))?;
        for v in [scale, mean, beta] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(format!(
                    "channel parameter shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        let (sc, mu, be) = (
            self.value(scale).data(),
            self.value(mean).data(),
            self.value(beta).data(),
        );
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        for e in 0..n {
            for ch in 0..c {
                let base = (e * c + ch) * s;
                out.extend(xd[base..base + s].iter().map(|&v| sc[ch] * (v - mu[ch]) + be[ch]));
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::ChannelAffine {
                x,
                scale,
                mean,
                beta,
            },
            &[x, scale, mean, beta],
        ))
    }

    /// Channelwise choice: `pos` where `sign_of[c] ≥ 0`, otherwise `neg`.
    pub fn sign_select(&mut self, sign_of: Var, pos: Var, neg: Var) -> Result<Var> {
        self.value(pos).check_same_shape(self.value(neg))?;
        let (n, c, s) = channel_layout(self.value(pos))?;
        if self.value(sign_of).shape() != [c] {
            return Err(Error::dim("sign_select selector must have one entry per channel"));
        }
        let sel: Vec<bool> = self.value(sign_of).data().iter().map(|&v| v >= T::zero()).collect();
        let (p, q) = (self.value(pos).data(), self.value(neg).data());
        let mut out = Vec::with_capacity(p.len());
        for e in 0..n {
            for (ch, &take_pos) in sel.iter().enumerate() {
                let base = (e * c + ch) * s;
                let src = if take_pos { p } else { q };
                out.extend_from_slice(&src[base..base + s]);
            }
        }
        let value = Tensor::new(self.value(pos).shape().to_vec(), out)?;
        self.mix_bits(sel);
        Ok(self.push(value, Op::SignSelect { sign_of, pos, neg }, &[sign_of, pos, neg]))
    }

    /// Lower bounds of `logit_y − logit_i` for every `i ≠ y`, with the
    /// difference rows merged into the final dense layer before the interval
    /// step. Output is `N×(K−1)`, classes in ascending order skipping `y`.
    pub fn elided_margins(
        &mut self,
        lo: Var,
        hi: Var,
        w: Var,
        b: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let out = elided_margins_forward(
            self.value(lo),
            self.value(hi),
            self.value(w),
            self.value(b),
            labels,
        )?;
        let (wv, k, f) = {
            let wv = self.value(w);
            (wv.data().to_vec(), wv.shape()[0], wv.shape()[1])
        };
        let mut bits = Vec::with_capacity(labels.len() * (k - 1) * f);
        for &y in labels {
            for i in (0..k).filter(|&i| i != y) {
                bits.extend((0..f).map(|j| wv[y * f + j] - wv[i * f + j] >= T::zero()));
            }
        }
        self.mix_bits(bits);
        Ok(self.push(
            out,
            Op::ElidedMargins {
                lo,
                hi,
                w,
                b,
                labels: labels.to_vec(),
            },
            &[lo, hi, w, b],
        ))
    }

    /// Batch mean of `log(1 + Σ_i exp(−m_i))` over rows of `margins`.
    pub fn robust_ce(&mut self, margins: Var) -> Result<Var> {
        let mv = self.value(margins);
        let [n, k1] = *mv.shape() else {
            return Err(Error::dim("robust_ce expects N×(K−1) margins"));
        };
        let mut weights = Vec::with_capacity(n * k1);
        let mut total = T::zero();
        for row in mv.data().chunks(k1.max(1)).take(n) {
            let (loss, w) = worst_case_ce(row);
            total += loss;
            weights.extend(w);
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(value, Op::RobustCe { margins, weights }, &[margins]))
    }

    /// Reverse accumulation from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.backward_with_seed(root, T::one())
    }

    pub fn backward_with_seed(&self, root: Var, seed: T) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), seed));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Unary(f, x) => {
                let xv = self.value(*x);
                let y = &node.value;
                let dx = match f {
                    Unary::Neg => g.map(|v| -v),
                    Unary::Relu => g.zip_map(xv, |gv, v| if v > T::zero() { gv } else { T::zero() })?,
                    Unary::Recip => g.zip_map(y, |gv, yv| -gv * yv * yv)?,
                    Unary::Square => g.zip_map(xv, |gv, v| gv * (v + v))?,
                    Unary::Exp => g.zip_map(y, |gv, yv| gv * yv)?,
                    Unary::Log => g.zip_map(xv, |gv, v| gv / v)?,
                    Unary::Abs => g.zip_map(xv, |gv, v| if v > T::zero() { gv } else { -gv })?,
                    Unary::Sign => return Err(Error::Unsupported("gradient of sign()".into())),
                };
                self.accumulate(grads, *x, dx)?;
            }
            Op::Binary(f, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = match f {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|v| -v)),
                    Binary::Mul => (g.zip_map(bv, |x, y| x * y)?, g.zip_map(av, |x, y| x * y)?),
                    Binary::Div => {
                        let da = g.zip_map(bv, |x, y| x / y)?;
                        let db = zip3(g, av, bv, |gv, x, y| -gv * x / (y * y))?;
                        (da, db)
                    }
                    Binary::Min => {
                        let da = zip3(g, av, bv, |gv, x, y| if y < x { T::zero() } else { gv })?;
                        let db = zip3(g, av, bv, |gv, x, y| if y < x { gv } else { T::zero() })?;
                        (da, db)
                    }
                };
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c))?,
            Op::AddConst(x, _) => self.accumulate(grads, *x, g.clone())?,
            Op::SumAll(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()))?;
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let gv = g.item() / T::of(xv.len() as f64);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gv))?;
            }
            Op::MaskedSum(x, mask) => {
                let gv = g.item();
                let data = mask.iter().map(|&m| if m { gv } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), data)?)?;
            }
            Op::SubScalar(x, s) => {
                self.accumulate(grads, *x, g.clone())?;
                self.accumulate(grads, *s, Tensor::new(self.value(*s).shape().to_vec(), vec![-g.sum_all()])?)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?)?;
            }
            Op::Pick { src, index } => {
                let sv = self.value(*src);
                let mut full = Tensor::zeros(sv.shape());
                let stride = g.len();
                full.data_mut()[index * stride..(index + 1) * stride].copy_from_slice(g.data());
                self.accumulate(grads, *src, full)?;
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.needs_grad(*x) {
                    let dx = gemm(g.data(), wv.data(), n, fout, fin);
                    self.accumulate(grads, *x, Tensor::new(vec![n, fin], dx)?)?;
                }
                if self.needs_grad(*w) {
                    let gt = transpose2(g.data(), n, fout);
                    let dw = gemm(&gt, xv.data(), fout, n, fin);
                    self.accumulate(grads, *w, Tensor::new(vec![fout, fin], dw)?)?;
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, column_sums(g.data(), n, fout))?;
                }
            }
            Op::IntervalLinear { lo, hi, w, b } => {
                let (lv, hv, wv) = (self.value(*lo), self.value(*hi), self.value(*w));
                let (n, fin) = (lv.shape()[0], lv.shape()[1]);
                let fout = wv.shape()[0];
                let half = T::of(0.5);
                let (g_lo, g_hi) = g.data().split_at(n * fout);
                // Center/radius form of the sign-split rule:
                //   W₊ = (W + |W|)/2,  W₋ = (W − |W|)/2.
                let gs: Vec<T> = g_lo.iter().zip(g_hi).map(|(&a, &b)| a + b).collect();
                let gd: Vec<T> = g_lo.iter().zip(g_hi).map(|(&a, &b)| a - b).collect();
                if self.needs_grad(*lo) || self.needs_grad(*hi) {
                    let wabs: Vec<T> = wv.data().iter().map(|v| v.abs()).collect();
                    let p = gemm(&gs, wv.data(), n, fout, fin);
                    let q = gemm(&gd, &wabs, n, fout, fin);
                    let dlo = p.iter().zip(&q).map(|(&a, &b)| half * (a + b)).collect();
                    let dhi = p.iter().zip(&q).map(|(&a, &b)| half * (a - b)).collect();
                    self.accumulate(grads, *lo, Tensor::new(vec![n, fin], dlo)?)?;
                    self.accumulate(grads, *hi, Tensor::new(vec![n, fin], dhi)?)?;
                }
                if self.needs_grad(*w) {
                    // dW = Gsᵀ·C ± Gdᵀ·R with C, R the input center and radius
                    // and Gd = g_hi − g_lo here; sign chosen by the weight sign.
                    let c: Vec<T> = lv.data().iter().zip(hv.data()).map(|(&l, &h)| half * (l + h)).collect();
                    let r: Vec<T> = lv.data().iter().zip(hv.data()).map(|(&l, &h)| half * (h - l)).collect();
                    let gst = transpose2(&gs, n, fout);
                    let gdt: Vec<T> = transpose2(&gd, n, fout).into_iter().map(|v| -v).collect();
                    let a = gemm(&gst, &c, fout, n, fin);
                    let bb = gemm(&gdt, &r, fout, n, fin);
                    let dw = wv
                        .data()
                        .iter()
                        .zip(a.iter().zip(&bb))
                        .map(|(&wj, (&x, &y))| if wj >= T::zero() { x + y } else { x - y })
                        .collect();
                    self.accumulate(grads, *w, Tensor::new(vec![fout, fin], dw)?)?;
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, column_sums(&gs, n, fout))?;
                }
            }
            Op::Conv { x, k, b, geom, cols } => {
                let n = self.value(*x).shape()[0];
                let kd = self.value(*k).data();
                if self.needs_grad(*x) {
                    let kt = transpose2(kd, geom.c_out, geom.patch_len());
                    let dx = cols_grad_to_input(geom, n, &kt, g.data());
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?)?;
                }
                if self.needs_grad(*k) {
                    let dk = kernel_grad(geom, n, g.data(), cols);
                    self.accumulate(grads, *k, Tensor::new(self.value(*k).shape().to_vec(), dk)?)?;
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, channel_sums(g.data(), n, geom.c_out, geom.positions()))?;
                }
            }
            Op::IntervalConv {
                lo,
                hi,
                k,
                b,
                geom,
                cols_lo,
                cols_hi,
            } => {
                let n = self.value(*lo).shape()[0];
                let kd = self.value(*k).data();
                let half = T::of(0.5);
                let (g_lo, g_hi) = g.data().split_at(n * geom.output_len());
                let gs: Vec<T> = g_lo.iter().zip(g_hi).map(|(&a, &b)| a + b).collect();
                let gd: Vec<T> = g_lo.iter().zip(g_hi).map(|(&a, &b)| a - b).collect();
                if self.needs_grad(*lo) || self.needs_grad(*hi) {
                    let kt = transpose2(kd, geom.c_out, geom.patch_len());
                    let kabs: Vec<T> = kd.iter().map(|v| v.abs()).collect();
                    let kabst = transpose2(&kabs, geom.c_out, geom.patch_len());
                    let p = cols_grad_to_input(geom, n, &kt, &gs);
                    let q = cols_grad_to_input(geom, n, &kabst, &gd);
                    let dlo = p.iter().zip(&q).map(|(&a, &b)| half * (a + b)).collect();
                    let dhi = p.iter().zip(&q).map(|(&a, &b)| half * (a - b)).collect();
                    let shape = self.value(*lo).shape().to_vec();
                    self.accumulate(grads, *lo, Tensor::new(shape.clone(), dlo)?)?;
                    self.accumulate(grads, *hi, Tensor::new(shape, dhi)?)?;
                }
                if self.needs_grad(*k) {
                    let c: Vec<T> = cols_lo.iter().zip(cols_hi).map(|(&l, &h)| half * (l + h)).collect();
                    let r: Vec<T> = cols_lo.iter().zip(cols_hi).map(|(&l, &h)| half * (h - l)).collect();
                    let neg_gd: Vec<T> = gd.iter().map(|&v| -v).collect();
                    let a = kernel_grad(geom, n, &gs, &c);
                    let bb = kernel_grad(geom, n, &neg_gd, &r);
                    let dk = kd
                        .iter()
                        .zip(a.iter().zip(&bb))
                        .map(|(&kj, (&x, &y))| if kj >= T::zero() { x + y } else { x - y })
                        .collect();
                    self.accumulate(grads, *k, Tensor::new(self.value(*k).shape().to_vec(), dk)?)?;
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, channel_sums(&gs, n, geom.c_out, geom.positions()))?;
                }
            }
            Op::ChannelMean(x) => {
                let xv = self.value(*x);
                let (n, c, s) = channel_layout(xv)?;
                let count = T::of((n * s) as f64);
                let gd = g.data();
                let dx = broadcast_channels(n, c, s, |ch, _| gd[ch] / count);
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
            }
            Op::ChannelVar { x, mean } => {
                let xv = self.value(*x);
                let (n, c, s) = channel_layout(xv)?;
                let two_over = T::of(2.0) / T::of((n * s) as f64);
                let (gd, xd) = (g.data(), xv.data());
                let dx = broadcast_channels(n, c, s, |ch, i| gd[ch] * two_over * (xd[i] - mean[ch]));
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
            }
            Op::BnScale { gamma, var, eps } => {
                let (gv, vv) = (self.value(*gamma), self.value(*var));
                let dg = g.zip_map(vv, |gr, v| gr / (v + *eps).sqrt())?;
                let dv = zip3(g, gv, vv, |gr, ga, v| {
                    let d = v + *eps;
                    -T::of(0.5) * gr * ga / (d * d.sqrt())
                })?;
                self.accumulate(grads, *gamma, dg)?;
                self.accumulate(grads, *var, dv)?;
            }
            Op::ChannelAffine {
                x,
                scale,
                mean,
                beta,
            } => {
                let xv = self.value(*x);
                let (n, c, s) = channel_layout(xv)?;
                let (sc, mu) = (self.value(*scale).data(), self.value(*mean).data());
                let (gd, xd) = (g.data(), xv.data());
                if self.needs_grad(*x) {
                    let dx = broadcast_channels(n, c, s, |ch, i| gd[i] * sc[ch]);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                let mut dscale = vec![T::zero(); c];
                let mut gsum = vec![T::zero(); c];
                for e in 0..n {
                    for ch in 0..c {
                        let base = (e * c + ch) * s;
                        for i in base..base + s {
                            dscale[ch] += gd[i] * (xd[i] - mu[ch]);
                            gsum[ch] += gd[i];
                        }
                    }
                }
                let dmean: Vec<T> = gsum.iter().zip(sc).map(|(&gs, &scv)| -gs * scv).collect();
                self.accumulate(grads, *scale, Tensor::new(vec![c], dscale)?)?;
                self.accumulate(grads, *mean, Tensor::new(vec![c], dmean)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], gsum)?)?;
            }
            Op::SignSelect { sign_of, pos, neg } => {
                let pv = self.value(*pos);
                let (n, c, s) = channel_layout(pv)?;
                let sel = self.value(*sign_of).data();
                let gd = g.data();
                let dp = broadcast_channels(n, c, s, |ch, i| if sel[ch] >= T::zero() { gd[i] } else { T::zero() });
                let dn = broadcast_channels(n, c, s, |ch, i| if sel[ch] >= T::zero() { T::zero() } else { gd[i] });
                self.accumulate(grads, *pos, Tensor::new(pv.shape().to_vec(), dp)?)?;
                self.accumulate(grads, *neg, Tensor::new(pv.shape().to_vec(), dn)?)?;
            }
            Op::ElidedMargins { lo, hi, w, b, labels } => {
                let (lv, hv, wv) = (self.value(*lo), self.value(*hi), self.value(*w));
                let (k, f) = (wv.shape()[0], wv.shape()[1]);
                let (ld, hd, wd) = (lv.data(), hv.data(), wv.data());
                let gd = g.data();
                let mut dlo = vec![T::zero(); ld.len()];
                let mut dhi = vec![T::zero(); hd.len()];
                let mut dw = vec![T::zero(); wd.len()];
                let mut db = vec![T::zero(); k];
                for (e, &y) in labels.iter().enumerate() {
                    for (col, i) in (0..k).filter(|&i| i != y).enumerate() {
                        let gv = gd[e * (k - 1) + col];
                        if gv == T::zero() {
                            continue;
                        }
                        db[y] += gv;
                        db[i] -= gv;
                        for j in 0..f {
                            let diff = wd[y * f + j] - wd[i * f + j];
                            let (l, h) = (ld[e * f + j], hd[e * f + j]);
                            let chosen = if diff >= T::zero() {
                                dlo[e * f + j] += gv * diff;
                                l
                            } else {
                                dhi[e * f + j] += gv * diff;
                                h
                            };
                            dw[y * f + j] += gv * chosen;
                            dw[i * f + j] -= gv * chosen;
                        }
                    }
                }
                self.accumulate(grads, *lo, Tensor::new(lv.shape().to_vec(), dlo)?)?;
                self.accumulate(grads, *hi, Tensor::new(hv.shape().to_vec(), dhi)?)?;
                self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?)?;
                self.accumulate(grads, *b, Tensor::new(vec![k], db)?)?;
            }
            Op::RobustCe { margins, weights } => {
                let mv = self.value(*margins);
                let n = mv.shape()[0];
                let scale = g.item() / T::of(n as f64);
                let dm = weights.iter().map(|&w| -w * scale).collect();
                self.accumulate(grads, *margins, Tensor::new(mv.shape().to_vec(), dm)?)?;
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any recorded value, if one reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// One entry per registered parameter; parameters the root does not
    /// depend on get an all-zero gradient.
    pub fn into_gradient_set(mut self, tape: &Tape<T>) -> GradientSet<T> {
        let mut out = GradientSet::new();
        for (v, id) in &self.params {
            let g = self.grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()));
            match out.get_mut(id) {
                Some(acc) => acc.add_assign(&g).expect("same parameter, same shape"),
                None => {
                    out.insert(*id, g);
                }
            }
        }
        out
    }
}

/// Records `f` on a fresh tape, returning the root value and the tape.
pub fn record<T: Real, F>(f: F) -> Result<(Tensor<T>, Tape<T>, Var)>
where
    F: FnOnce(&mut Tape<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape)?;
    Ok((tape.value(root).clone(), tape, root))
}

fn zip3<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    f: impl Fn(T, T, T) -> T,
) -> Result<Tensor<T>> {
    a.check_same_shape(b)?;
    a.check_same_shape(c)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn check_bias<T: Real>(b: &Tensor<T>, c_out: usize) -> Result<()> {
    if b.shape() != [c_out] {
        return Err(Error::dim(format!(
            "bias shape {:?}, expected [{c_out}]",
            b.shape()
        )));
    }
    Ok(())
}

/// `(N, C, S)` view of an `N×C×...` tensor, `S` the product of trailing dims.
pub(crate) fn channel_layout<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return Err(Error::dim(format!(
            "expected N×C×..., got shape {:?}",
            t.shape()
        )));
    }
    let s = t.shape()[2..].iter().product();
    Ok((t.shape()[0], t.shape()[1], s))
}

fn channel_means<T: Real>(data: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut sum = vec![T::zero(); c];
    for e in 0..n {
        for (ch, acc) in sum.iter_mut().enumerate() {
            let base = (e * c + ch) * s;
            for &v in &data[base..base + s] {
                *acc += v;
            }
        }
    }
    let count = T::of((n * s) as f64);
    sum.into_iter().map(|v| v / count).collect()
}

fn channel_sums<T: Real>(data: &[T], n: usize, c: usize, s: usize) -> Tensor<T> {
    let mut sum = vec![T::zero(); c];
    for e in 0..n {
        for (ch, acc) in sum.iter_mut().enumerate() {
            let base = (e * c + ch) * s;
            for &v in &data[base..base + s] {
                *acc += v;
            }
        }
    }
    Tensor::new(vec![c], sum).expect("length c")
}

fn column_sums<T: Real>(data: &[T], rows: usize, cols: usize) -> Tensor<T> {
    let mut sum = vec![T::zero(); cols];
    for r in 0..rows {
        for (acc, &v) in sum.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *acc += v;
        }
    }
    Tensor::new(vec![cols], sum).expect("length cols")
}

fn broadcast_channels<T: Real>(
    n: usize,
    c: usize,
    s: usize,
    f: impl Fn(usize, usize) -> T,
) -> Vec<T> {
    let mut out = Vec::with_capacity(n * c * s);
    for e in 0..n {
        for ch in 0..c {
            let base = (e * c + ch) * s;
            out.extend((base..base + s).map(|i| f(ch, i)));
        }
    }
    out
}

pub(crate) fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, fin] = *x.shape() else {
        return Err(Error::dim(format!("dense input must be N×in, got {:?}", x.shape())));
    };
    let [fout, win] = *w.shape() else {
        return Err(Error::dim(format!("dense weight must be out×in, got {:?}", w.shape())));
    };
    if win != fin {
        return Err(Error::dim(format!(
            "dense weight {:?} does not accept input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    check_bias(b, fout)?;
    let wt = transpose2(w.data(), fout, fin);
    let mut out = gemm(x.data(), &wt, n, fin, fout);
    for row in out.chunks_mut(fout.max(1)) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Tensor::new(vec![n, fout], out)
}

/// Sign-split interval image of `z·Wᵀ + b`, stacked as `2×N×out`.
pub(crate) fn interval_linear_forward<T: Real>(
    lo: &Tensor<T>,
    hi: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    lo.check_same_shape(hi)?;
    let [n, fin] = *lo.shape() else {
        return Err(Error::dim(format!("dense input must be N×in, got {:?}", lo.shape())));
    };
    let [fout, win] = *w.shape() else {
        return Err(Error::dim(format!("dense weight must be out×in, got {:?}", w.shape())));
    };
    if win != fin {
        return Err(Error::dim(format!(
            "dense weight {:?} does not accept input {:?}",
            w.shape(),
            lo.shape()
        )));
    }
    check_bias(b, fout)?;
    let wt = transpose2(w.data(), fout, fin);
    let wtp: Vec<T> = wt.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    let wtn: Vec<T> = wt.iter().map(|&v| if v < T::zero() { v } else { T::zero() }).collect();
    let mut lo_out = vec![T::zero(); n * fout];
    let mut hi_out = vec![T::zero(); n * fout];
    let rows = crate::tensor::linalg::rows_per_task(n, 2 * fin * fout);
    let (ld, hd) = (lo.data(), hi.data());
    par::for_each_chunk_pair_mut(&mut lo_out, &mut hi_out, rows * fout.max(1), |ci, lc, hc| {
        let r0 = ci * rows;
        let nr = lc.len() / fout.max(1);
        interval_gemm_right(
            &ld[r0 * fin..(r0 + nr) * fin],
            &hd[r0 * fin..(r0 + nr) * fin],
            &wtp,
            &wtn,
            lc,
            hc,
            nr,
            fin,
            fout,
        );
        for (lr, hr) in lc.chunks_mut(fout).zip(hc.chunks_mut(fout)) {
            for j in 0..fout {
                lr[j] += b.data()[j];
                hr[j] += b.data()[j];
            }
        }
    });
    lo_out.extend(hi_out);
    Tensor::new(vec![2, n, fout], lo_out)
}

fn unroll_batch<T: Real>(g: &Conv2dGeometry, n: usize, x: &[T]) -> Vec<T> {
    let per = g.patch_len() * g.positions();
    let mut cols = vec![T::zero(); n * per];
    par::for_each_chunk_mut(&mut cols, per, |e, dst| {
        im2col(g, &x[e * g.input_len()..(e + 1) * g.input_len()], dst);
    });
    cols
}

fn conv_from_cols<T: Real>(g: &Conv2dGeometry, n: usize, cols: &[T], k: &[T], b: &[T]) -> Vec<T> {
    let per = g.patch_len() * g.positions();
    let mut out = vec![T::zero(); n * g.output_len()];
    par::for_each_chunk_mut(&mut out, g.output_len(), |e, dst| {
        crate::tensor::gemm_acc(k, &cols[e * per..(e + 1) * per], dst, g.c_out, g.patch_len(), g.positions());
        crate::tensor::linalg::add_channel_bias(dst, b, g.positions());
    });
    out
}

pub(crate) fn interval_conv_from_cols<T: Real>(
    g: &Conv2dGeometry,
    n: usize,
    cols_lo: &[T],
    cols_hi: &[T],
    k: &[T],
    b: &[T],
) -> Result<Tensor<T>> {
    let per = g.patch_len() * g.positions();
    let kp: Vec<T> = k.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    let kn: Vec<T> = k.iter().map(|&v| if v < T::zero() { v } else { T::zero() }).collect();
    let mut lo = vec![T::zero(); n * g.output_len()];
    let mut hi = vec![T::zero(); n * g.output_len()];
    par::for_each_chunk_pair_mut(&mut lo, &mut hi, g.output_len(), |e, lc, hc| {
        interval_gemm_left(
            &kp,
            &kn,
            &cols_lo[e * per..(e + 1) * per],
            &cols_hi[e * per..(e + 1) * per],
            lc,
            hc,
            g.c_out,
            g.patch_len(),
            g.positions(),
        );
        crate::tensor::linalg::add_channel_bias(lc, b, g.positions());
        crate::tensor::linalg::add_channel_bias(hc, b, g.positions());
    });
    lo.extend(hi);
    Tensor::new(vec![2, n, g.c_out, g.h_out, g.w_out], lo)
}

/// `Σ_e g_e · cols_eᵀ` as one `C_out×(N·P)` by `(N·P)×patch` product.
fn kernel_grad<T: Real>(g: &Conv2dGeometry, n: usize, grad_out: &[T], cols: &[T]) -> Vec<T> {
    let (p, q, c_out) = (g.positions(), g.patch_len(), g.c_out);
    let np = n * p;
    let mut gcat = vec![T::zero(); c_out * np];
    for e in 0..n {
        for o in 0..c_out {
            let src = &grad_out[(e * c_out + o) * p..(e * c_out + o + 1) * p];
            gcat[o * np + e * p..o * np + (e + 1) * p].copy_from_slice(src);
        }
    }
    let mut cols_t = vec![T::zero(); np * q];
    par::for_each_chunk_mut(&mut cols_t, p * q, |e, dst| {
        let t = transpose2(&cols[e * q * p..(e + 1) * q * p], q, p);
        dst.copy_from_slice(&t);
    });
    gemm(&gcat, &cols_t, c_out, np, q)
}

/// Per example: `kᵀ · g_e`, then folded back onto the input with col2im.
fn cols_grad_to_input<T: Real>(g: &Conv2dGeometry, n: usize, kt: &[T], grad_out: &[T]) -> Vec<T> {
    let (p, q) = (g.positions(), g.patch_len());
    let mut dx = vec![T::zero(); n * g.input_len()];
    par::for_each_chunk_mut(&mut dx, g.input_len(), |e, dst| {
        let mut dcols = vec![T::zero(); q * p];
        crate::tensor::gemm_acc(kt, &grad_out[e * g.output_len()..(e + 1) * g.output_len()], &mut dcols, q, g.c_out, p);
        col2im(g, &dcols, dst);
    });
    dx
}

pub(crate) fn elided_margins_forward<T: Real>(
    lo: &Tensor<T>,
    hi: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    lo.check_same_shape(hi)?;
    let [n, f] = *lo.shape() else {
        return Err(Error::dim(format!("margin input must be N×F, got {:?}", lo.shape())));
    };
    let [k, wf] = *w.shape() else {
        return Err(Error::dim("final layer weight must be K×F"));
    };
    if wf != f || labels.len() != n {
        return Err(Error::dim(format!(
            "final layer {:?} vs bounds {:?} with {} labels",
            w.shape(),
            lo.shape(),
            labels.len()
        )));
    }
    check_bias(b, k)?;
    if k < 2 {
        return Err(Error::arg("margins need at least two classes"));
    }
    let (ld, hd, wd, bd) = (lo.data(), hi.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(n * (k - 1));
    for (e, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::arg(format!("label {y} out of range for {k} classes")));
        }
        for i in (0..k).filter(|&i| i != y) {
            let mut acc = T::zero();
            for j in 0..f {
                let diff = wd[y * f + j] - wd[i * f + j];
                let (p, q) = if diff > T::zero() {
                    (diff, T::zero())
                } else {
                    (T::zero(), diff)
                };
                acc += p * ld[e * f + j] + q * hd[e * f + j];
            }
            out.push(acc + (bd[y] - bd[i]));
        }
    }
    Tensor::new(vec![n, k - 1], out)
}

/// `log(1 + Σ exp(−m_i))` and its softmax weights `exp(−m_i)/(1 + Σ exp(−m_j))`.
pub(crate) fn worst_case_ce<T: Real>(margins: &[T]) -> (T, Vec<T>) {
    let shift = margins
        .iter()
        .fold(T::zero(), |acc, &m| if -m > acc { -m } else { acc });
    let base = (-shift).exp();
    let exps: Vec<T> = margins.iter().map(|&m| (-m - shift).exp()).collect();
    let mut denom = base;
    for &e in &exps {
        denom += e;
    }
    let loss = shift + denom.ln();
    (loss, exps.into_iter().map(|e| e / denom).collect())
}
