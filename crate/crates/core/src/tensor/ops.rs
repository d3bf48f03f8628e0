//! Forward operations. Each records a node whose backward rule lives in `tape.rs`.

use super::array::Tensor;
use super::conv::{self, ConvGeom};
use super::gemm::{gemm, MatRef};
use super::tape::{BinaryKind, Broadcast, Op, Tape, UnaryKind, Var};
use crate::error::{Error, Result};

pub(crate) const RBF_MIN_SIGMA: f64 = 1e-6;

/// Effective RBF scale: magnitudes below the minimum are clamped, sign kept.
pub(crate) fn rbf_scale(s: f64) -> f64 {
    if s.abs() >= RBF_MIN_SIGMA {
        s
    } else if s < 0.0 {
        -RBF_MIN_SIGMA
    } else {
        RBF_MIN_SIGMA
    }
}

/// Kernel weights `exp(-alpha d^2)` below e^-40 are treated as zero.
const KDE_CUTOFF: f64 = 40.0;

/// Grid index range `[lo, hi)` where a sample's kernel is non-negligible.
pub(crate) fn kde_support(grid: &[f64], u: f64, alpha: f64) -> (usize, usize) {
    let reach = (KDE_CUTOFF / alpha).sqrt();
    let lo = grid.partition_point(|g| *g < u - reach);
    let hi = grid.partition_point(|g| *g <= u + reach);
    (lo, hi.max(lo))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Rbf,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat source index for each output element of a broadcast.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

impl Tape {
    /// Same-padded stride-1 convolution; `weight` is `[c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, c_in, h, w) = self.value(input).dims4()?;
        let (c_out, wc_in, k, k2) = self.value(weight).dims4()?;
        if wc_in != c_in {
            return Err(Error::shape(format!("conv2d weight expects {wc_in} input channels, input has {c_in}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel must be square and odd, got {k}x{k2}")));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::shape(format!("conv2d bias shape {:?}, expected [{c_out}]", self.value(bias).shape())));
        }
        let geom = ConvGeom { n, c_in, c_out, h, w, k };
        let out = conv::forward(&geom, self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let value = Tensor::new(vec![n, c_out, h, w], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, "conv2d"))
    }

    /// Batch-statistics normalization. Returns the output with the batch mean and
    /// population variance per channel.
    pub fn batchnorm_batch(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        self.check_channel_param(gamma, c, "gamma")?;
        self.check_channel_param(beta, c, "beta")?;
        let hw = h * w;
        let m = (n * hw) as f64;
        if m == 0.0 {
            return Err(Error::shape("batchnorm over an empty batch"));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                mean[ci] += xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for ni in 0..n {
            for ci in 0..c {
                var[ci] +=
                    xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let node = self.push(
            out,
            Op::BatchNorm { x, gamma, beta, mean: mean.clone(), inv_std, batch_stats: true },
            "batchnorm",
        );
        Ok((node, mean, var))
    }

    /// Normalization with fixed (running) statistics.
    pub fn batchnorm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4()?;
        self.check_channel_param(gamma, c, "gamma")?;
        self.check_channel_param(beta, c, "beta")?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(format!("running stats for {} channels, input has {c}", mean.len())));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.affine_normalize(x, gamma, beta, mean, &inv_std);
        Ok(self.push(
            out,
            Op::BatchNorm { x, gamma, beta, mean: mean.to_vec(), inv_std, batch_stats: false },
            "batchnorm",
        ))
    }

    fn check_channel_param(&self, v: Var, c: usize, what: &str) -> Result<()> {
        if self.value(v).shape() != [c] {
            return Err(Error::shape(format!("{what} shape {:?}, expected [{c}]", self.value(v).shape())));
        }
        Ok(())
    }

    fn affine_normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64]) -> Tensor {
        let t = self.value(x);
        let (_, c, h, w) = t.dims4().unwrap();
        let hw = h * w;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ci = (i / hw) % c;
                g[ci] * (v - mean[ci]) * inv_std[ci] + b[ci]
            })
            .collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    }

    /// Elementwise activation. `sigma` (one per channel) is required for RBF:
    /// `exp(-x^2 / sigma_c^2)`.
    pub fn activation(&mut self, x: Var, kind: Activation, sigma: Option<Var>) -> Result<Var> {
        match kind {
            Activation::Relu => Ok(self.unary(x, UnaryKind::Relu)),
            Activation::Rbf => {
                let sigma = sigma.ok_or_else(|| Error::invalid("rbf activation needs sigma"))?;
                let (_, c, h, w) = self.value(x).dims4()?;
                if self.value(sigma).shape() != [c] {
                    return Err(Error::shape(format!(
                        "rbf sigma has shape {:?}, input has {c} channels",
                        self.value(sigma).shape()
                    )));
                }
                let hw = h * w;
                let s: Vec<f64> = self.value(sigma).data().iter().map(|v| rbf_scale(*v)).collect();
                let t = self.value(x);
                let data = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let sc = s[(i / hw) % c];
                        (-(v * v) / (sc * sc)).exp()
                    })
                    .collect();
                let value = Tensor::new(t.shape().to_vec(), data)?;
                Ok(self.push(value, Op::Rbf { x, sigma }, "rbf"))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("max_pool2 needs even spatial size, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..ho {
                for xx in 0..wo {
                    let cands = [
                        base + 2 * y * w + 2 * xx,
                        base + 2 * y * w + 2 * xx + 1,
                        base + (2 * y + 1) * w + 2 * xx,
                        base + (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    let mut best = cands[0];
                    for &ci in &cands[1..] {
                        if xv[ci] > xv[best] {
                            best = ci;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, "max_pool2"))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * 4 * h * w);
        for p in 0..n * c {
            for y in 0..2 * h {
                let row = &xv[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
                for v in row {
                    out.push(*v);
                    out.push(*v);
                }
            }
        }
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2 { x }, "upsample2"))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for ni in 0..n {
            out.extend_from_slice(&av[ni * ca * hw..(ni + 1) * ca * hw]);
            out.extend_from_slice(&bv[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels { a, b }, "concat"))
    }

    /// Softmax over axis 1 of an `[N, K, H, W]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for p in 0..hw {
                let idx = |ci: usize| (ni * c + ci) * hw + p;
                let mx = (0..c).map(|ci| xv[idx(ci)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (xv[idx(ci)] - mx).exp();
                    out[idx(ci)] = e;
                    z += e;
                }
                for ci in 0..c {
                    out[idx(ci)] /= z;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::SoftmaxChannels { x }, "softmax"))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            let data = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
            let value = Tensor::new(sa, data)?;
            return Ok(self.push(value, Op::Binary { kind, a, b, bcast: None }, "binary"));
        }
        let out_shape =
            broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let bc = Broadcast { a_index: broadcast_index(&sa, &out_shape), b_index: broadcast_index(&sb, &out_shape) };
        let data = bc.a_index.iter().zip(&bc.b_index).map(|(i, j)| f(av[*i], bv[*j])).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b, bcast: Some(bc) }, "binary"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Exp => v.exp(),
                UnaryKind::Ln => v.ln(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Square => v * v,
                UnaryKind::Relu => v.max(0.0),
            })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(value, Op::Unary { kind, x }, "unary")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect()).unwrap();
        self.push(value, Op::Scale { x, factor }, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + offset).collect()).unwrap();
        self.push(value, Op::Shift { x }, "add_scalar")
    }

    /// `max(x, floor)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(floor)).collect()).unwrap();
        self.push(value, Op::ClampMin { x, floor }, "clamp_min")
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s = self.sum(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sums over `axes`, keeping reduced dimensions with size 1.
    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("reduction over no axes"));
        }
        let mut reduced = vec![false; shape.len()];
        for a in axes {
            if *a >= shape.len() {
                return Err(Error::invalid(format!("axis {a} out of range for {shape:?}")));
            }
            reduced[*a] = true;
        }
        if axes.iter().any(|a| shape[*a] == 0) {
            return Err(Error::invalid("reduction over an empty axis"));
        }
        let out_shape: Vec<usize> = shape.iter().zip(&reduced).map(|(d, r)| if *r { 1 } else { *d }).collect();
        let out_index = broadcast_index(&out_shape, &shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, o) in self.value(x).data().iter().zip(&out_index) {
            out[*o] += v;
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::ReduceSum { x, out_index }, "reduce_sum"))
    }

    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.reduce_sum(x, axes)?;
        let count = self.value(x).numel() / self.value(s).numel();
        Ok(self.scale(s, 1.0 / count as f64))
    }

    /// Mean and population variance over `axes` (reduced dims kept as size 1).
    pub fn reduce_stats(&mut self, x: Var, axes: &[usize]) -> Result<(Var, Var)> {
        let mean = self.reduce_mean(x, axes)?;
        let centered = self.sub(x, mean)?;
        let sq = self.square(centered);
        let var = self.reduce_mean(sq, axes)?;
        Ok((mean, var))
    }

    /// `out[i] = x.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(bad) = indices.iter().find(|i| **i >= xv.len()) {
            return Err(Error::shape(format!("gather index {bad} out of {} elements", xv.len())));
        }
        let data = indices.iter().map(|i| xv[*i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Gather { x, indices }, "gather"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, "matmul"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, "reshape"))
    }

    /// Unnormalized Gaussian-kernel sums on a sorted grid:
    /// `out[j] = sum_i exp(-alpha (grid[j] - x_i)^2)`.
    pub fn kde_sums(&mut self, x: Var, grid: Vec<f64>, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("kde alpha must be positive, got {alpha}")));
        }
        if grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("kde grid must be sorted"));
        }
        let mut out = vec![0.0; grid.len()];
        for u in self.value(x).data() {
            let (lo, hi) = kde_support(&grid, *u, alpha);
            for j in lo..hi {
                let d = grid[j] - u;
                out[j] += (-alpha * d * d).exp();
            }
        }
        let value = Tensor::from_vec(out);
        Ok(self.push(value, Op::KdeSums { x, grid, alpha }, "kde_sums"))
    }
}
