//! Dynamic tape: every op appends a node holding its value and the data its
//! backward rule needs. The tape is rebuilt for each forward pass.

use crate::error::{invalid, mismatch, AutodiffError, Result};
use crate::kernels::{batch_to_channel_major, channel_to_batch_major, col2im, gemm, im2col, ConvGeom, MatRef};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule used by [`Graph::clamp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClampGrad {
    /// Pass the upstream gradient through unchanged.
    #[default]
    StraightThrough,
    /// Zero gradient wherever the clamp is active.
    Exact,
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        // Geometry of the adjoint convolution, from output space back to input space.
        geom: ConvGeom,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    Reshape(Var),
    Mse(Var, Var),
    Sum(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Clamp {
        x: Var,
        pass: Option<Vec<bool>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves of a [`Graph`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` is not a leaf reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; unreachable leaves yield zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(invalid(op, format!("expected [N, C, H, W], got {:?}", t.shape()))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(invalid(op, format!("expected a matrix, got {:?}", t.shape()))),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// `[M, K] · [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fan_in) = dims2("linear", self.value(x))?;
        let (fan_out, fan_in_w) = dims2("linear", self.value(w))?;
        if fan_in != fan_in_w {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; n * fan_out];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(mismatch("linear bias", self.shape(b), &[fan_out]));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            MatRef::new(self.value(x).data(), n, fan_in),
            MatRef::new(self.value(w).data(), fan_out, fan_in).t(),
            1.0,
            &mut out,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, fan_out], out),
            Op::Linear { x, w, b },
            &inputs,
        ))
    }

    fn add_channel_bias(out: &mut [f64], bias: &[f64], batch: usize, plane: usize) {
        let c = bias.len();
        for n in 0..batch {
            for (ch, &bv) in bias.iter().enumerate() {
                out[(n * c + ch) * plane..][..plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [channels] => Err(mismatch(op, self.shape(b), &[channels])),
            _ => Ok(()),
        }
    }

    /// 2-D cross-correlation of `x: [N, C, H, W]` with `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4("conv2d", self.value(x))?;
        let (o, c_w, k, k2) = dims4("conv2d", self.value(w))?;
        if c != c_w || k != k2 {
            return Err(mismatch("conv2d", self.shape(x), self.shape(w)));
        }
        self.check_bias("conv2d bias", b, o)?;
        let geom = ConvGeom::new(n, c, h, wd, k, stride, pad).ok_or_else(|| {
            invalid(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{wd}"),
            )
        })?;
        let cols = im2col(self.value(x).data(), &geom);
        let plane = geom.out_h * geom.out_w;
        let mut ym = vec![0.0; o * geom.col_cols()];
        gemm(
            MatRef::new(self.value(w).data(), o, geom.col_rows()),
            MatRef::new(&cols, geom.col_rows(), geom.col_cols()),
            0.0,
            &mut ym,
        );
        let mut out = channel_to_batch_major(&ym, n, o, plane);
        if let Some(b) = b {
            Self::add_channel_bias(&mut out, self.value(b).data(), n, plane);
        }
        let value = Tensor::from_parts(vec![n, o, geom.out_h, geom.out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, &inputs))
    }

    /// Transposed convolution of `x: [N, Cin, H, W]` with `w: [Cin, Cout, k, k]`;
    /// output spatial size is `(H - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = dims4("conv_transpose2d", self.value(x))?;
        let (cin_w, cout, k, k2) = dims4("conv_transpose2d", self.value(w))?;
        if cin != cin_w || k != k2 {
            return Err(mismatch("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        self.check_bias("conv_transpose2d bias", b, cout)?;
        let out_h = ((h - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let out_w = ((wd - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let geom = match (out_h, out_w) {
            (Some(oh), Some(ow)) => ConvGeom::new(n, cout, oh, ow, k, stride, pad),
            _ => None,
        }
        .filter(|g| g.out_h == h && g.out_w == wd)
        .ok_or_else(|| invalid("conv_transpose2d", format!("invalid geometry for input {h}x{wd}")))?;
        let xm = batch_to_channel_major(self.value(x).data(), n, cin, h * wd);
        let mut cols = vec![0.0; geom.col_rows() * geom.col_cols()];
        gemm(
            MatRef::new(self.value(w).data(), cin, geom.col_rows()).t(),
            MatRef::new(&xm, cin, n * h * wd),
            0.0,
            &mut cols,
        );
        let mut out = col2im(&cols, &geom);
        let plane = geom.height * geom.width;
        if let Some(b) = b {
            Self::add_channel_bias(&mut out, self.value(b).data(), n, plane);
        }
        let value = Tensor::from_parts(vec![n, cout, geom.height, geom.width], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    /// Adds a per-sample, per-channel offset `v: [N, C]` to `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("add_channel", self.value(x))?;
        if self.shape(v) != [n, c] {
            return Err(mismatch("add_channel", self.shape(x), self.shape(v)));
        }
        let plane = h * w;
        let mut out = self.value(x).data().to_vec();
        for (i, &bv) in self.value(v).data().iter().enumerate() {
            out[i * plane..][..plane].iter_mut().for_each(|o| *o += bv);
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::AddChannel { x, v },
            &[x, v],
        ))
    }

    /// Concatenates along axis 1 (channels). All other dimensions must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat_channels", sa, sb));
        }
        let n = sa[0];
        let inner_a: usize = sa[1..].iter().product();
        let inner_b: usize = sb[1..].iter().product();
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for i in 0..n {
            out.extend_from_slice(&da[i * inner_a..][..inner_a]);
            out.extend_from_slice(&db[i * inner_b..][..inner_b]);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { a, b }, &[a, b]))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    /// Group normalization over `[N, C, ...]` with learned per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid("group_norm", format!("expected [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(invalid(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(mismatch("group_norm", &shape, self.shape(p)));
            }
        }
        let plane: usize = shape[2..].iter().product();
        let group_len = c / groups * plane;
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; n * groups];
        let mut out = vec![0.0; xd.len()];
        for (gi, chunk) in xd.chunks(group_len).enumerate() {
            let mean = chunk.iter().sum::<f64>() / group_len as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group_len as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[gi] = r;
            let base = gi * group_len;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = ((base + j) / plane) % c;
                let xh = (v - mean) * r;
                xhat[base + j] = xh;
                out[base + j] = gd[ch] * xh + bd[ch];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("upsample_nearest", self.value(x))?;
        if factor == 0 {
            return Err(invalid("upsample_nearest", "factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..][..h * w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = src[(i / factor) * w + j / factor];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Upsample { x, factor },
            &[x],
        ))
    }

    /// Average pooling over non-overlapping `factor × factor` blocks.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("avg_pool", self.value(x))?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(invalid("avg_pool", format!("factor {factor} does not divide {h}x{w}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..][..h * w];
            let dst = &mut out[p * oh * ow..][..oh * ow];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / factor) * ow + j / factor] += src[i * w + j] * inv;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::AvgPool { x, factor },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape)
            .map_err(|_| mismatch("reshape", self.shape(x), shape))?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Mean squared error, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self
            .value(a)
            .sub(self.value(b))
            .map_err(|_| mismatch("mse", self.shape(a), self.shape(b)))?;
        let value = Tensor::scalar(diff.norm_sq() / diff.len() as f64);
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Scales every row of `x: [N, D]` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (n, d) = dims2("l2_normalize", self.value(x))?;
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for (row, dst) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(invalid("l2_normalize", format!("row norm is {norm}")));
            }
            for (o, v) in dst.iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::L2Normalize { x, norms }, &[x]))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = dims2("softmax_cross_entropy", self.value(logits))?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(invalid(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows of {k} classes", labels.len()),
            ));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for ((row, p), &label) in self.value(logits).data().chunks(k).zip(probs.chunks_mut(k)).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - max).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            loss -= (row[label] - max) - z.ln();
        }
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Elementwise clamp of `x` into `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: &Tensor, hi: &Tensor, mode: ClampGrad) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != lo.shape() || xv.shape() != hi.shape() {
            return Err(mismatch("clamp", xv.shape(), lo.shape()));
        }
        if lo.data().iter().zip(hi.data()).any(|(l, h)| l > h) {
            return Err(invalid("clamp", "lower bound exceeds upper bound"));
        }
        let mut pass = Vec::with_capacity(xv.len());
        let out: Vec<f64> = xv
            .data()
            .iter()
            .zip(lo.data().iter().zip(hi.data()))
            .map(|(&v, (&l, &h))| {
                pass.push(v > l && v < h);
                v.max(l).min(h)
            })
            .collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let pass = (mode == ClampGrad::Exact).then_some(pass);
        Ok(self.push(value, Op::Clamp { x, pass }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone())?;
                self.accumulate(grads, *b, gy.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone())?;
                self.accumulate(grads, *b, gy.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.mul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gy.scale(*c))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone())?,
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", self.value(*a))?;
                let n = self.shape(*b)[1];
                let g = MatRef::new(gy.data(), m, n);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g, MatRef::new(self.value(*b).data(), k, n).t(), 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da))?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(MatRef::new(self.value(*a).data(), m, k).t(), g, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db))?;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fan_in) = dims2("linear", self.value(*x))?;
                let fan_out = self.shape(*w)[0];
                let g = MatRef::new(gy.data(), n, fan_out);
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * fan_in];
                    gemm(g, MatRef::new(self.value(*w).data(), fan_out, fan_in), 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::from_parts(vec![n, fan_in], dx))?;
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; fan_out * fan_in];
                    gemm(g.t(), MatRef::new(self.value(*x).data(), n, fan_in), 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::from_parts(vec![fan_out, fan_in], dw))?;
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; fan_out];
                    for row in gy.data().chunks(fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    self.accumulate(grads, b, Tensor::from_parts(vec![fan_out], db))?;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = self.shape(*w)[0];
                let plane = geom.out_h * geom.out_w;
                let dym = batch_to_channel_major(gy.data(), geom.batch, o, plane);
                let g = MatRef::new(&dym, o, geom.col_cols());
                if self.wants(*w) {
                    let mut dw = vec![0.0; o * geom.col_rows()];
                    gemm(g, MatRef::new(cols, geom.col_rows(), geom.col_cols()).t(), 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::from_parts(shape_of(*w), dw))?;
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; geom.col_rows() * geom.col_cols()];
                    gemm(
                        MatRef::new(self.value(*w).data(), o, geom.col_rows()).t(),
                        g,
                        0.0,
                        &mut dcols,
                    );
                    self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), col2im(&dcols, geom)))?;
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let db: Vec<f64> = dym.chunks(geom.col_cols()).map(|r| r.iter().sum()).collect();
                    self.accumulate(grads, b, Tensor::from_parts(vec![o], db))?;
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, cin, h, wd) = dims4("conv_transpose2d", self.value(*x))?;
                let dcols = im2col(gy.data(), geom);
                let dc = MatRef::new(&dcols, geom.col_rows(), geom.col_cols());
                if self.wants(*x) {
                    let mut dxm = vec![0.0; cin * n * h * wd];
                    gemm(
                        MatRef::new(self.value(*w).data(), cin, geom.col_rows()),
                        dc,
                        0.0,
                        &mut dxm,
                    );
                    let dx = channel_to_batch_major(&dxm, n, cin, h * wd);
                    self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), dx))?;
                }
                if self.wants(*w) {
                    let xm = batch_to_channel_major(self.value(*x).data(), n, cin, h * wd);
                    let mut dw = vec![0.0; cin * geom.col_rows()];
                    gemm(MatRef::new(&xm, cin, n * h * wd), dc.t(), 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::from_parts(shape_of(*w), dw))?;
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let cout = geom.channels;
                    let plane = geom.height * geom.width;
                    let mut db = vec![0.0; cout];
                    for (i, chunk) in gy.data().chunks(plane).enumerate() {
                        db[i % cout] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(grads, b, Tensor::from_parts(vec![cout], db))?;
                }
            }
            Op::AddChannel { x, v } => {
                self.accumulate(grads, *x, gy.clone())?;
                if self.wants(*v) {
                    let vs = shape_of(*v);
                    let plane = gy.len() / (vs[0] * vs[1]);
                    let dv = gy.data().chunks(plane).map(|c| c.iter().sum()).collect();
                    self.accumulate(grads, *v, Tensor::from_parts(vs, dv))?;
                }
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (shape_of(*a), shape_of(*b));
                let inner_a: usize = sa[1..].iter().product();
                let inner_b: usize = sb[1..].iter().product();
                let mut da = Vec::with_capacity(inner_a * sa[0]);
                let mut db = Vec::with_capacity(inner_b * sb[0]);
                for chunk in gy.data().chunks(inner_a + inner_b) {
                    da.extend_from_slice(&chunk[..inner_a]);
                    db.extend_from_slice(&chunk[inner_a..]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(sa, da))?;
                self.accumulate(grads, *b, Tensor::from_parts(sb, db))?;
            }
            Op::Silu(x) => {
                let dx = gy.zip_map(self.value(*x), "silu", |g, v| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let shape = shape_of(*x);
                let c = shape[1];
                let plane: usize = shape[2..].iter().product();
                let group_len = c / groups * plane;
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (j, (&g, &xh)) in gy.data().iter().zip(xhat).enumerate() {
                    let ch = (j / plane) % c;
                    dgamma[ch] += g * xh;
                    dbeta[ch] += g;
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for (gi, &r) in rstd.iter().enumerate() {
                        let base = gi * group_len;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in base..base + group_len {
                            let d = gy.data()[j] * gd[(j / plane) % c];
                            mean_d += d;
                            mean_dx += d * xhat[j];
                        }
                        mean_d /= group_len as f64;
                        mean_dx /= group_len as f64;
                        for j in base..base + group_len {
                            let d = gy.data()[j] * gd[(j / plane) % c];
                            dx[j] = r * (d - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(shape, dx))?;
                }
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma))?;
                self.accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta))?;
            }
            Op::Upsample { x, factor } => {
                let shape = shape_of(*x);
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; shape.iter().product()];
                for (p, src) in gy.data().chunks(oh * ow).enumerate() {
                    let dst = &mut dx[p * h * w..][..h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            dst[(i / factor) * w + j / factor] += src[i * ow + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx))?;
            }
            Op::AvgPool { x, factor } => {
                let shape = shape_of(*x);
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = (h / factor, w / factor);
                let inv = 1.0 / (factor * factor) as f64;
                let mut dx = vec![0.0; shape.iter().product()];
                for (p, dst) in dx.chunks_mut(h * w).enumerate() {
                    let src = &gy.data()[p * oh * ow..][..oh * ow];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = src[(i / factor) * ow + j / factor] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx))?;
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, Tensor::from_parts(shape_of(*x), gy.data().to_vec()))?;
            }
            Op::Mse(a, b) => {
                let g = gy.data()[0];
                let diff = self.value(*a).sub(self.value(*b))?;
                let d = diff.scale(2.0 * g / diff.len() as f64);
                if self.wants(*b) {
                    self.accumulate(grads, *b, d.scale(-1.0))?;
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::Sum(x) => {
                let shape = shape_of(*x);
                self.accumulate(grads, *x, Tensor::full(&shape, gy.data()[0]))?;
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let d = y.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..][..d];
                    let gr = &gy.data()[r * d..][..d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx))?;
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let shape = shape_of(*logits);
                let k = shape[1];
                let scale = gy.data()[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, Tensor::from_parts(shape, d))?;
            }
            Op::Clamp { x, pass } => {
                let dx = match pass {
                    None => gy.clone(),
                    Some(mask) => Tensor::from_parts(
                        gy.shape().to_vec(),
                        gy.data()
                            .iter()
                            .zip(mask)
                            .map(|(&g, &m)| if m { g } else { 0.0 })
                            .collect(),
                    ),
                };
                self.accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_shape_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let b = g.constant(Tensor::zeros(&[2, 5, 4, 4]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 8, 4, 4]);
    }

    #[test]
    fn silu_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.silu(x);
        assert_eq!(g.value(y).item(), Some(0.0));
    }

    #[test]
    fn identity_center_kernel_preserves_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let k = g.constant(k);
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(g.value(y), &Tensor::ones(&[1, 1, 3, 3]));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let v = g.leaf(Tensor::from_vec(vec![3.0, 4.0, 5.0]));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(v).is_none());
        assert_eq!(grads.wrt(v), Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(
            err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 3]"),
            "{err}"
        );
    }

    #[test]
    fn zero_norm_row_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.l2_normalize(a).is_err());
    }

    #[test]
    fn straight_through_clamp_passes_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 0.5, 2.0]));
        let lo = Tensor::zeros(&[3]);
        let hi = Tensor::ones(&[3]);
        let st = g.clamp(x, &lo, &hi, ClampGrad::StraightThrough).unwrap();
        let ex = g.clamp(x, &lo, &hi, ClampGrad::Exact).unwrap();
        assert_eq!(g.value(st).data(), &[0.0, 0.5, 1.0]);
        let l1 = g.sum(st);
        assert_eq!(g.backward(l1).unwrap().wrt(x).data(), &[1.0, 1.0, 1.0]);
        let l2 = g.sum(ex);
        assert_eq!(g.backward(l2).unwrap().wrt(x).data(), &[0.0, 1.0, 0.0]);
    }
}
