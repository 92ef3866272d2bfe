//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order; [`Graph::backward`]
//! walks the tape in reverse. Leaves created with [`Graph::param`] accumulate
//! gradients across calls; intermediate gradients are rebuilt on every call.

use rand::Rng;

use super::conv::{self, rm, tr, ConvGeom};
use super::{NnError, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv2dDims {
    batch: usize,
    in_ch: usize,
    in_hw: (usize, usize),
    out_ch: usize,
    out_hw: (usize, usize),
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        dims: Conv2dDims,
        cols: Option<Vec<T>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        dims: Conv2dDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Gelu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
    },
    L1 {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    MulScalar {
        x: Var,
        s: Var,
    },
    DivScalar {
        x: Var,
        s: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Sum {
        x: Var,
    },
    AbsSum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for running-statistics updates.
    pub var_unbiased: Vec<T>,
}

#[derive(Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn rank4(&self, v: Var, what: &str) -> Result<[usize; 4], NnError> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(shape_err(format!(
                "{what}: expected rank-4 input, got {s:?}"
            ))),
        }
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<(), NnError> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(shape_err(format!(
                    "bias shape {:?} != [{channels}]",
                    self.shape(b)
                )));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `x: (N, C, H, W)` with `w: (O, C, k, k)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var, NnError> {
        let [n, c, h, wd] = self.rank4(x, "conv2d")?;
        let k = geom.kernel;
        let o = match *self.shape(w) {
            [o, wc, kh, kw] if wc == c && kh == k && kw == k => o,
            ref s => {
                return Err(shape_err(format!(
                    "conv2d weight {s:?} vs input channels {c}, kernel {k}"
                )))
            }
        };
        self.check_bias(b, o)?;
        let (ho, wo) = match (geom.conv_out(h), geom.conv_out(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err(format!(
                    "conv2d input {h}x{wd} smaller than kernel {k}"
                )))
            }
        };
        let cols = conv::im2col(self.data(x), n, c, (h, wd), (ho, wo), geom);
        let ncols = n * ho * wo;
        let ckk = c * k * k;
        let mut out_cm = vec![T::ZERO; o * ncols];
        T::gemm(
            o,
            ckk,
            ncols,
            T::ONE,
            self.data(w),
            rm(ckk),
            &cols,
            rm(ncols),
            T::ZERO,
            &mut out_cm,
            rm(ncols),
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for (oc, row) in out_cm.chunks_mut(ncols).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[oc]);
            }
        }
        let out = conv::channel_major_to_batch_major(&out_cm, n, o, ho * wo);
        let requires = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        let keep_cols = self.nodes[w.0].requires_grad;
        let dims = Conv2dDims {
            batch: n,
            in_ch: c,
            in_hw: (h, wd),
            out_ch: o,
            out_hw: (ho, wo),
        };
        Ok(self.push(
            Tensor::from_vec(&[n, o, ho, wo], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                dims,
                cols: keep_cols.then_some(cols),
            },
            requires,
        ))
    }

    /// Transposed convolution of `x: (N, Cin, H, W)` with `w: (Cin, Cout, k, k)`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        output_padding: usize,
    ) -> Result<Var, NnError> {
        let [n, cin, h, wd] = self.rank4(x, "conv_transpose2d")?;
        let k = geom.kernel;
        let cout = match *self.shape(w) {
            [wc, co, kh, kw] if wc == cin && kh == k && kw == k => co,
            ref s => {
                return Err(shape_err(format!(
                    "conv_transpose2d weight {s:?} vs input channels {cin}, kernel {k}"
                )))
            }
        };
        self.check_bias(b, cout)?;
        let (ho, wo) = match (
            geom.transpose_out(h, output_padding),
            geom.transpose_out(wd, output_padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err("conv_transpose2d produces an empty output")),
        };
        // The geometry must map every output pixel back onto the input grid.
        if geom.conv_out(ho) != Some(h) || geom.conv_out(wo) != Some(wd) {
            return Err(shape_err(format!(
                "output_padding {output_padding} must be smaller than stride {}",
                geom.stride
            )));
        }
        let plane = h * wd;
        let ncols = n * plane;
        let ckk = cout * k * k;
        let xmat = conv::batch_major_to_channel_major(self.data(x), n, cin, plane);
        let mut cols = vec![T::ZERO; ckk * ncols];
        T::gemm(
            ckk,
            cin,
            ncols,
            T::ONE,
            self.data(w),
            tr(ckk),
            &xmat,
            rm(ncols),
            T::ZERO,
            &mut cols,
            rm(ncols),
        );
        let mut out = vec![T::ZERO; n * cout * ho * wo];
        conv::col2im(&cols, &mut out, n, cout, (ho, wo), (h, wd), geom);
        if let Some(b) = b {
            let bias = self.data(b);
            for (i, chunk) in out.chunks_mut(ho * wo).enumerate() {
                let bc = bias[i % cout];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        let requires = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        let dims = Conv2dDims {
            batch: n,
            in_ch: cin,
            in_hw: (h, wd),
            out_ch: cout,
            out_hw: (ho, wo),
        };
        Ok(self.push(
            Tensor::from_vec(&[n, cout, ho, wo], out)?,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                dims,
            },
            requires,
        ))
    }

    fn check_channel_params(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4], NnError> {
        let dims = self.rank4(x, "batch_norm")?;
        if self.shape(gamma) != [dims[1]] || self.shape(beta) != [dims[1]] {
            return Err(shape_err(
                "batch_norm affine parameters must have one entry per channel",
            ));
        }
        Ok(dims)
    }

    /// Batch norm with batch statistics over `(N, H, W)`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>), NnError> {
        let [n, c, h, w] = self.check_channel_params(x, gamma, beta)?;
        let plane = h * w;
        let count = n * plane;
        if count < 2 {
            return Err(NnError::BatchTooSmall);
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let m = T::from_f64(count as f64);
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        for b in 0..n {
            for ch in 0..c {
                let s = &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                mean[ch] += s.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for ch in 0..c {
                let s = &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                var[ch] += s
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<T>();
            }
        }
        let var_unbiased: Vec<T> = var
            .iter()
            .map(|&v| v / T::from_f64((count - 1) as f64))
            .collect();
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut out = vec![T::ZERO; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in range {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let requires = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::from_vec(&[n, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            requires,
        );
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var, NnError> {
        let [n, c, h, w] = self.check_channel_params(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(
                "running statistics must have one entry per channel",
            ));
        }
        let plane = h * w;
        let xs = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::ONE / (v + eps).sqrt())
            .collect();
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut out = vec![T::ZERO; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    let xh = (xs[i] - running_mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let requires = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_vec(&[n, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            requires,
        ))
    }

    /// Spatial dropout: zeroes whole `(sample, channel)` planes with
    /// probability `rate` and scales survivors by `1/(1 − rate)`. Identity
    /// when `train` is false or `rate` is zero.
    pub fn dropout2d<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidConfig(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        let [n, c, h, w] = self.rank4(x, "dropout2d")?;
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let plane = h * w;
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mut mask = vec![T::ZERO; n * c * plane];
        for chunk in mask.chunks_mut(plane) {
            if rng.random::<f64>() >= rate {
                chunk.iter_mut().for_each(|m| *m = keep);
            }
        }
        let out: Vec<T> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let requires = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[n, c, h, w], out)?,
            Op::Mask { x, mask },
            requires,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.rg(&[x]);
        self.push(
            Tensor::from_vec(&shape, out).expect("same shape"),
            op,
            requires,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            |v| if v >= T::ZERO { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    /// GELU in the exact form `x Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * gauss_cdf(v), Op::Gelu { x })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale { x, s })
    }

    /// `y = x wᵀ + b` for `x: (N, in)`, `w: (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let (n, fin) = match *self.shape(x) {
            [n, f] => (n, f),
            ref s => return Err(shape_err(format!("linear input must be rank 2, got {s:?}"))),
        };
        let fout = match *self.shape(w) {
            [o, i] if i == fin => o,
            ref s => {
                return Err(shape_err(format!(
                    "linear weight {s:?} vs input features {fin}"
                )))
            }
        };
        self.check_bias(b, fout)?;
        let mut out = vec![T::ZERO; n * fout];
        T::gemm(
            n,
            fin,
            fout,
            T::ONE,
            self.data(x),
            rm(fin),
            self.data(w),
            tr(fin),
            T::ZERO,
            &mut out,
            rm(fout),
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(fout) {
                add_into(row, bias);
            }
        }
        let requires = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(
            Tensor::from_vec(&[n, fout], out)?,
            Op::Linear { x, w, b },
            requires,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let shape = self.shape(x).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| shape_err("softmax of a rank-0 tensor"))?;
        if last == 0 {
            return Err(shape_err("softmax over an empty axis"));
        }
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(last) {
            let mx = row.iter().copied().fold(row[0], T::max);
            row.iter_mut().for_each(|v| *v = (*v - mx).exp());
            let s: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let requires = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Softmax { x }, requires))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Mean absolute difference, a scalar.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "l1_loss")?;
        let n = self.data(a).len();
        if n == 0 {
            return Err(shape_err("l1_loss of empty tensors"));
        }
        let total: T = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| (p - q).abs())
            .sum();
        let requires = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::scalar(total / T::from_f64(n as f64)),
            Op::L1 { a, b },
            requires,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Add { a, b }, requires))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&p, &q)| p - q)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Sub { a, b }, requires))
    }

    fn check_scalar(&self, s: Var) -> Result<T, NnError> {
        if self.data(s).len() != 1 {
            return Err(shape_err(format!(
                "expected a one-element tensor, got {:?}",
                self.shape(s)
            )));
        }
        Ok(self.data(s)[0])
    }

    /// `x · s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        let sv = self.check_scalar(s)?;
        let out: Vec<T> = self.data(x).iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.rg(&[x, s]);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::MulScalar { x, s },
            requires,
        ))
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        let sv = self.check_scalar(s)?;
        let out: Vec<T> = self.data(x).iter().map(|&v| v / sv).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.rg(&[x, s]);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::DivScalar { x, s },
            requires,
        ))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(shape_err(format!("matmul {sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            self.data(a),
            rm(k),
            self.data(b),
            rm(n),
            T::ZERO,
            &mut out,
            rm(n),
        );
        let requires = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&[m, n], out)?,
            Op::MatMul { a, b },
            requires,
        ))
    }

    /// `out[i] = x[idx[i]]` with the given output shape.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var, NnError> {
        let src = self.data(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err(format!(
                "gather index {bad} out of range {}",
                src.len()
            )));
        }
        let out: Vec<T> = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::from_vec(shape, out)?;
        let requires = self.rg(&[x]);
        Ok(self.push(t, Op::Gather { x, idx }, requires))
    }

    /// Concatenates the flattened parts into a tensor of `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var, NnError> {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::from_vec(shape, out)?;
        let requires = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
            },
            requires,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let t = self.value(x).clone().reshape(shape)?;
        let requires = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, requires))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let requires = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, requires)
    }

    /// `Σ |x|`, used for L1 weight penalties.
    pub fn abs_sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().map(|v| v.abs()).sum();
        let requires = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::AbsSum { x }, requires)
    }

    /// Reverse pass from a one-element `loss`. Gradients of [`Graph::param`]
    /// leaves accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if self.data(loss).len() != 1 {
            return Err(NnError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NnError::DisconnectedGraph);
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        let seed = vec![T::ONE];
        match &mut self.grads[loss.0] {
            Some(g) if matches!(self.nodes[loss.0].op, Op::Leaf) => g[0] += T::ONE,
            slot => *slot = Some(seed),
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contribution: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => add_into(g, contribution),
            slot => *slot = Some(contribution.to_vec()),
        }
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<T> {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; len])
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so that its caches can be read while
        // gradients are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                dims,
                cols,
            } => self.conv2d_backward(g, *x, *w, *b, *geom, *dims, cols.as_deref()),
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                dims,
            } => self.conv_transpose2d_backward(g, *x, *w, *b, *geom, *dims),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => self.batch_norm_backward(g, *x, *gamma, *beta, xhat, inv_std, *train),
            Op::Mask { x, mask } => {
                let dx: Vec<T> = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accum(*x, &dx);
            }
            Op::LeakyRelu { x, slope } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &xi)| if xi >= T::ZERO { gi } else { gi * *slope })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &xi)| gi * (gauss_cdf(xi) + xi * gauss_pdf(xi)))
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Linear { x, w, b } => self.linear_backward(g, *x, *w, *b),
            Op::Softmax { x } => {
                let y = self.nodes[i].value.data();
                let last = *self.nodes[i].value.shape().last().unwrap();
                let mut dx = vec![T::ZERO; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(last).zip(y.chunks(last)).zip(g.chunks(last)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accum(*x, &dx);
            }
            Op::L1 { a, b } => {
                let n = T::from_f64(self.data(*a).len() as f64);
                let scale = g[0] / n;
                let da: Vec<T> = self
                    .data(*a)
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&p, &q)| {
                        let d = p - q;
                        if d > T::ZERO {
                            scale
                        } else if d < T::ZERO {
                            -scale
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                if self.nodes[b.0].requires_grad {
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    self.accum(*b, &db);
                }
                self.accum(*a, &da);
            }
            Op::Add { a, b } => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub { a, b } => {
                self.accum(*a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accum(*b, &neg);
            }
            Op::Scale { x, s } => {
                let dx: Vec<T> = g.iter().map(|&v| v * *s).collect();
                self.accum(*x, &dx);
            }
            Op::MulScalar { x, s } => {
                let sv = self.data(*s)[0];
                if self.nodes[s.0].requires_grad {
                    let ds: T = g.iter().zip(self.data(*x)).map(|(&a, &b)| a * b).sum();
                    self.accum(*s, &[ds]);
                }
                let dx: Vec<T> = g.iter().map(|&v| v * sv).collect();
                self.accum(*x, &dx);
            }
            Op::DivScalar { x, s } => {
                let sv = self.data(*s)[0];
                if self.nodes[s.0].requires_grad {
                    let dot: T = g.iter().zip(self.data(*x)).map(|(&a, &b)| a * b).sum();
                    self.accum(*s, &[-dot / (sv * sv)]);
                }
                let dx: Vec<T> = g.iter().map(|&v| v / sv).collect();
                self.accum(*x, &dx);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::ZERO; m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        g,
                        rm(n),
                        self.data(*b),
                        tr(n),
                        T::ZERO,
                        &mut da,
                        rm(k),
                    );
                    self.accum(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::ZERO; k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        self.data(*a),
                        tr(k),
                        g,
                        rm(n),
                        T::ZERO,
                        &mut db,
                        rm(n),
                    );
                    self.accum(*b, &db);
                }
            }
            Op::Gather { x, idx } => {
                if self.nodes[x.0].requires_grad {
                    let buf = self.grad_buf(*x);
                    for (&j, &gv) in idx.iter().zip(g) {
                        buf[j] += gv;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    self.accum(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.data(*x).len()];
                self.accum(*x, &dx);
            }
            Op::AbsSum { x } => {
                let dx: Vec<T> = self
                    .data(*x)
                    .iter()
                    .map(|&v| {
                        if v > T::ZERO {
                            g[0]
                        } else if v < T::ZERO {
                            -g[0]
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                self.accum(*x, &dx);
            }
            Op::Reshape { x } => self.accum(*x, g),
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &mut self,
        g: &[T],
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        dims: Conv2dDims,
        cols: Option<&[T]>,
    ) {
        let Conv2dDims {
            batch: n,
            in_ch: c,
            in_hw,
            out_ch: o,
            out_hw: (ho, wo),
        } = dims;
        let k = geom.kernel;
        let ckk = c * k * k;
        let ncols = n * ho * wo;
        let gmat = conv::batch_major_to_channel_major(g, n, o, ho * wo);
        if let Some(b) = b.filter(|b| self.nodes[b.0].requires_grad) {
            let db: Vec<T> = gmat
                .chunks(ncols)
                .map(|r| r.iter().copied().sum())
                .collect();
            self.accum(b, &db);
        }
        if self.nodes[w.0].requires_grad {
            let cols = cols.expect("columns cached when the weight needs a gradient");
            let buf = self.grads[w.0].get_or_insert_with(|| vec![T::ZERO; o * ckk]);
            T::gemm(
                o,
                ncols,
                ckk,
                T::ONE,
                &gmat,
                rm(ncols),
                cols,
                tr(ncols),
                T::ONE,
                buf,
                rm(ckk),
            );
        }
        if self.nodes[x.0].requires_grad {
            let mut dcols = vec![T::ZERO; ckk * ncols];
            T::gemm(
                ckk,
                o,
                ncols,
                T::ONE,
                self.data(w),
                tr(ckk),
                &gmat,
                rm(ncols),
                T::ZERO,
                &mut dcols,
                rm(ncols),
            );
            let len = self.data(x).len();
            let buf = self.grads[x.0].get_or_insert_with(|| vec![T::ZERO; len]);
            conv::col2im(&dcols, buf, n, c, in_hw, (ho, wo), geom);
        }
    }

    fn conv_transpose2d_backward(
        &mut self,
        g: &[T],
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        dims: Conv2dDims,
    ) {
        let Conv2dDims {
            batch: n,
            in_ch: cin,
            in_hw: (h, wd),
            out_ch: cout,
            out_hw,
        } = dims;
        let k = geom.kernel;
        let ckk = cout * k * k;
        let plane = h * wd;
        let ncols = n * plane;
        if let Some(b) = b.filter(|b| self.nodes[b.0].requires_grad) {
            let oplane = out_hw.0 * out_hw.1;
            let mut db = vec![T::ZERO; cout];
            for (i, chunk) in g.chunks(oplane).enumerate() {
                db[i % cout] += chunk.iter().copied().sum::<T>();
            }
            self.accum(b, &db);
        }
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        if !need_x && !need_w {
            return;
        }
        let dcols = conv::im2col(g, n, cout, out_hw, (h, wd), geom);
        if need_w {
            let xmat = conv::batch_major_to_channel_major(self.data(x), n, cin, plane);
            let buf = self.grads[w.0].get_or_insert_with(|| vec![T::ZERO; cin * ckk]);
            T::gemm(
                cin,
                ncols,
                ckk,
                T::ONE,
                &xmat,
                rm(ncols),
                &dcols,
                tr(ncols),
                T::ONE,
                buf,
                rm(ckk),
            );
        }
        if need_x {
            let mut dxmat = vec![T::ZERO; cin * ncols];
            T::gemm(
                cin,
                ckk,
                ncols,
                T::ONE,
                self.data(w),
                rm(ckk),
                &dcols,
                rm(ncols),
                T::ZERO,
                &mut dxmat,
                rm(ncols),
            );
            let dx = conv::channel_major_to_batch_major(&dxmat, n, cin, plane);
            self.accum(x, &dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &mut self,
        g: &[T],
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        inv_std: &[T],
        train: bool,
    ) {
        let [n, c, h, w] = self.rank4(x, "batch_norm").expect("checked in forward");
        let plane = h * w;
        let mut dgamma = vec![T::ZERO; c];
        let mut dbeta = vec![T::ZERO; c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    dgamma[ch] += g[i] * xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        if self.nodes[x.0].requires_grad {
            let gam = self.data(gamma).to_vec();
            let mut dx = vec![T::ZERO; g.len()];
            if train {
                // dx = inv_std/M · (M·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)) with dx̂ = γ·dy.
                let m = T::from_f64((n * plane) as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let sum1 = dbeta[ch] * gam[ch];
                        let sum2 = dgamma[ch] * gam[ch];
                        let f = inv_std[ch] / m;
                        for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            dx[i] = f * (m * g[i] * gam[ch] - sum1 - xhat[i] * sum2);
                        }
                    }
                }
            } else {
                for b in 0..n {
                    for ch in 0..c {
                        let f = gam[ch] * inv_std[ch];
                        for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            dx[i] = g[i] * f;
                        }
                    }
                }
            }
            self.accum(x, &dx);
        }
        self.accum(gamma, &dgamma);
        self.accum(beta, &dbeta);
    }

    fn linear_backward(&mut self, g: &[T], x: Var, w: Var, b: Option<Var>) {
        let (n, fin) = (self.shape(x)[0], self.shape(x)[1]);
        let fout = self.shape(w)[0];
        if let Some(b) = b.filter(|b| self.nodes[b.0].requires_grad) {
            let mut db = vec![T::ZERO; fout];
            for row in g.chunks(fout) {
                add_into(&mut db, row);
            }
            self.accum(b, &db);
        }
        if self.nodes[w.0].requires_grad {
            let mut dw = vec![T::ZERO; fout * fin];
            T::gemm(
                fout,
                n,
                fin,
                T::ONE,
                g,
                tr(fout),
                self.data(x),
                rm(fin),
                T::ZERO,
                &mut dw,
                rm(fin),
            );
            self.accum(w, &dw);
        }
        if self.nodes[x.0].requires_grad {
            let mut dx = vec![T::ZERO; n * fin];
            T::gemm(
                n,
                fout,
                fin,
                T::ONE,
                g,
                rm(fout),
                self.data(w),
                rm(fin),
                T::ZERO,
                &mut dx,
                rm(fin),
            );
            self.accum(x, &dx);
        }
    }
}

#[inline]
fn gauss_cdf<T: Real>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gauss_pdf<T: Real>(x: T) -> T {
    T::from_f64(0.398_942_280_401_432_7) * (T::from_f64(-0.5) * x * x).exp()
}
