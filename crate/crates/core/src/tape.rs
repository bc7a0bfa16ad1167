//! Dynamic tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and the ids of its
//! operands. [`Tape::backward`] walks the nodes in reverse and returns a
//! [`Gradients`] table; parameter gradients are then folded into a
//! [`ParameterStore`] with [`Tape::accumulate_param_grads`].
//!
//! Image tensors may be `[c,h,w]` or `[n,c,h,w]`; ops that produce images
//! keep the rank of their input.

use std::collections::HashMap;

use crate::error::{config_err, Error, Result};
use crate::kernels::{self, ConvGeom, UpsampleMode};
use crate::params::ParameterStore;
use crate::tensor::{as_nchw, image_shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SoftmaxChannels(Var),
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Matmul {
        a: Var,
        b: Var,
        dims: MatmulDims,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulChannelBroadcast {
        x: Var,
        mask: Var,
    },
    ChannelMean(Var),
    AbsDiff(Var, Var),
    Upsample2x {
        input: Var,
        mode: UpsampleMode,
    },
    ReshapeMatrix(Var),
    MatrixToMap(Var),
    SelectChannel {
        input: Var,
        channel: usize,
    },
    Sum(Var),
    Mean(Var),
    WeightedBce {
        prob: Var,
        label: Vec<f64>,
        w0: f64,
        w1: f64,
    },
    Dice {
        prob: Var,
        label: Vec<f64>,
        samples: usize,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct MatmulDims {
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    /// rhs is `[m,k]` (used as its transpose) rather than `[k,m]`.
    trans_b: bool,
    /// rhs has no batch axis and is shared by every batch entry.
    b_shared: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics measured by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (used for running-stat updates).
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

/// Gradient buffers indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradient, honoring the tensor's own flag.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// A differentiable leaf regardless of the tensor's flag.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers the named parameter once; later calls return the same leaf,
    /// so every use (e.g. both Siamese branches) accumulates into one gradient.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let tensor = store
            .get(name)
            .ok_or_else(|| config_err!("unknown parameter `{name}`"))?;
        let v = self.push(tensor.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    /// Makes `name` resolve to an existing leaf, so a graph can be built
    /// with parameters supplied as explicit inputs.
    pub fn bind_param(&mut self, name: &str, var: Var) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(config_err!("parameter `{name}` is already bound"));
        }
        self.params.insert(name.to_string(), var);
        self.param_order.push((name.to_string(), var));
        Ok(())
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let (n, c_in, h, w) = as_nchw(&xs, "conv2d input")?;
        let ks = self.shape(kernel).to_vec();
        let [c_out, kc, kh, kw] = ks[..] else {
            return Err(config_err!("conv2d kernel must be [c_out,c_in,k,k], got {:?}", ks));
        };
        if kc != c_in {
            return Err(config_err!(
                "conv2d: kernel expects {kc} input channels, input {:?} has {c_in}",
                xs
            ));
        }
        if kh != kw {
            return Err(config_err!("conv2d: kernel must be square, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(config_err!("conv2d: stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(config_err!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(config_err!(
                    "conv2d: bias shape {:?} does not match {c_out} output channels",
                    self.shape(b)
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad: padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.data(input),
            self.data(kernel),
            bias.map(|b| self.data(b)),
            &geom,
        );
        let shape = image_shape(&xs, n, c_out, geom.h_out, geom.w_out);
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let (n, c, h, w) = as_nchw(&xs, "maxpool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(config_err!("maxpool2: spatial dims {h}x{w} must be even"));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.data(input), n * c, h, w);
        let shape = image_shape(&xs, n, c, h / 2, w / 2);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool2 { input, argmax }, rg))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.max(0.0), Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, kernels::sigmoid, Op::Sigmoid(input))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.unary(input, |v| v * factor, Op::Scale(input, factor))
    }

    /// Softmax along the last axis; every leading index is a row.
    pub fn softmax_rows(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(config_err!("softmax_rows expects at least 2-D input, got {:?}", shape));
        }
        let cols = *shape.last().unwrap();
        let out = kernels::softmax_rows_forward(self.data(input), cols);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SoftmaxRows(input), rg))
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (n, c, h, w) = as_nchw(&shape, "softmax_channels input")?;
        let plane = h * w;
        let x = self.data(input);
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let max = (0..c).map(|ch| x[base + ch * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (x[base + ch * plane + p] - max).exp();
                    out[base + ch * plane + p] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[base + ch * plane + p] /= sum;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SoftmaxChannels(input), rg))
    }

    /// Train-mode batch norm: normalizes with statistics over `(n,h,w)`.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let shape = self.shape(input).to_vec();
        let (n, c, h, w) = as_nchw(&shape, "batchnorm input")?;
        self.check_affine(gamma, beta, c)?;
        let plane = h * w;
        let count = n * plane;
        if count == 0 {
            return Err(config_err!("batchnorm: empty batch {:?}", shape));
        }
        let (mean, var) = kernels::channel_stats(self.data(input), n, c, plane);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (xhat, out) = self.normalize(input, gamma, beta, &mean, &inv_std, n, c, plane);
        let unbiased = if count > 1 {
            var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
        } else {
            var
        };
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (n, c, h, w) = as_nchw(&shape, "batchnorm input")?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(config_err!("batchnorm: running stats do not match {c} channels"));
        }
        if n * h * w == 0 {
            return Err(config_err!("batchnorm: empty batch {:?}", shape));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (xhat, out) = self.normalize(input, gamma, beta, running_mean, &inv_std, n, c, h * w);
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(config_err!(
                "batchnorm: affine shapes {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        c: usize,
        plane: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let x = self.data(input);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let start = (s * c + ch) * plane;
                for i in start..start + plane {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        (xhat, out)
    }

    fn matmul_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<MatmulDims> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (batch, n, k) = match *sa {
            [n, k] => (1, n, k),
            [bt, n, k] => (bt, n, k),
            _ => return Err(config_err!("matmul lhs must be 2-D or 3-D, got {:?}", sa)),
        };
        let (b_batch, rows, cols) = match *sb {
            [r, c] => (None, r, c),
            [bt, r, c] => (Some(bt), r, c),
            _ => return Err(config_err!("matmul rhs must be 2-D or 3-D, got {:?}", sb)),
        };
        let (bk, m) = if trans_b { (cols, rows) } else { (rows, cols) };
        if bk != k {
            return Err(config_err!("matmul: inner dims differ, lhs {:?} rhs {:?}", sa, sb));
        }
        let b_shared = match b_batch {
            None => true,
            Some(bt) if bt == batch && sa.len() == 3 => false,
            Some(_) => {
                return Err(config_err!("matmul: batch dims differ, lhs {:?} rhs {:?}", sa, sb));
            }
        };
        Ok(MatmulDims {
            batch,
            n,
            k,
            m,
            trans_b,
            b_shared,
        })
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let dims = self.matmul_dims(a, b, trans_b)?;
        let MatmulDims { batch, n, k, m, .. } = dims;
        let mut out = vec![0.0; batch * n * m];
        let bstride = if trans_b { (1, k) } else { (m, 1) };
        for bt in 0..batch {
            let bs = if dims.b_shared { 0 } else { bt * k * m };
            gemm_slices(
                n,
                k,
                m,
                &self.data(a)[bt * n * k..(bt + 1) * n * k],
                (k, 1),
                &self.data(b)[bs..bs + k * m],
                bstride,
                &mut out[bt * n * m..(bt + 1) * n * m],
            );
        }
        let shape = if self.shape(a).len() == 3 {
            vec![batch, n, m]
        } else {
            vec![n, m]
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Matmul { a, b, dims }, rg))
    }

    /// `a·b` for `[n,k]·[k,m]`, or batched `[B,n,k]·[B,k,m]` / `[B,n,k]·[k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` where `b` is `[m,k]` or `[B,m,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (n, ca, h, w) = as_nchw(&sa, "concat lhs")?;
        let (nb, cb, hb, wb) = as_nchw(&sb, "concat rhs")?;
        if sa.len() != sb.len() || n != nb || h != hb || w != wb {
            return Err(config_err!("concat_channels: incompatible shapes {:?} and {:?}", sa, sb));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&self.data(a)[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&self.data(b)[s * cb * plane..(s + 1) * cb * plane]);
        }
        let shape = image_shape(&sa, n, ca + cb, h, w);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatChannels { a, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "elementwise_mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "abs_diff", |x, y| (x - y).abs(), Op::AbsDiff(a, b))
    }

    /// Multiplies every channel of `x` by a single-channel `mask`.
    pub fn mul_channel_broadcast(&mut self, x: Var, mask: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sm = self.shape(mask).to_vec();
        let (n, c, h, w) = as_nchw(&sx, "masked input")?;
        let (nm, cm, hm, wm) = as_nchw(&sm, "mask")?;
        if cm != 1 || nm != n || hm != h || wm != w {
            return Err(config_err!(
                "mask {:?} must be single-channel with the spatial dims of {:?}",
                sm,
                sx
            ));
        }
        let plane = h * w;
        let xd = self.data(x);
        let md = self.data(mask);
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            let m = &md[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let start = (s * c + ch) * plane;
                for (i, mv) in m.iter().enumerate() {
                    out[start + i] = xd[start + i] * mv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(mask);
        Ok(self.push(Tensor::new(&sx, out)?, Op::MulChannelBroadcast { x, mask }, rg))
    }

    /// Mean over channels: `[n,c,h,w] -> [n,1,h,w]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (n, c, h, w) = as_nchw(&sx, "channel_mean input")?;
        let plane = h * w;
        let xd = self.data(x);
        let mut out = vec![0.0; n * plane];
        for s in 0..n {
            let dst = &mut out[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let start = (s * c + ch) * plane;
                for (d, v) in dst.iter_mut().zip(&xd[start..start + plane]) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d /= c as f64);
        }
        let shape = image_shape(&sx, n, 1, h, w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ChannelMean(x), rg))
    }

    pub fn upsample2x(&mut self, input: Var, mode: UpsampleMode) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        let (n, c, h, w) = as_nchw(&sx, "upsample2x input")?;
        if h == 0 || w == 0 {
            return Err(config_err!("upsample2x: empty spatial dims {:?}", sx));
        }
        let out = kernels::upsample2x_forward(self.data(input), n * c, h, w, mode);
        let shape = image_shape(&sx, n, c, 2 * h, 2 * w);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Upsample2x { input, mode }, rg))
    }

    /// `[c,h,w] -> [h·w, c]` (or batched `[n,c,h,w] -> [n, h·w, c]`): spatial
    /// positions become rows, channels become columns.
    pub fn reshape_matrix(&mut self, input: Var) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        let (n, c, h, w) = as_nchw(&sx, "reshape_matrix input")?;
        let plane = h * w;
        let xd = self.data(input);
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    out[(s * plane + p) * c + ch] = xd[(s * c + ch) * plane + p];
                }
            }
        }
        let shape = if sx.len() == 3 {
            vec![plane, c]
        } else {
            vec![n, plane, c]
        };
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ReshapeMatrix(input), rg))
    }

    /// Inverse layout of [`Tape::reshape_matrix`]: `[n, h·w, d] -> [n,d,h,w]`.
    pub fn matrix_to_map(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        let (n, rows, d, batched) = match *sx {
            [r, d] => (1, r, d, false),
            [n, r, d] => (n, r, d, true),
            _ => return Err(config_err!("matrix_to_map expects a 2-D or 3-D matrix, got {:?}", sx)),
        };
        if rows != h * w {
            return Err(config_err!("matrix_to_map: {rows} rows cannot form a {h}x{w} map"));
        }
        let plane = h * w;
        let xd = self.data(input);
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for p in 0..plane {
                for ch in 0..d {
                    out[(s * d + ch) * plane + p] = xd[(s * plane + p) * d + ch];
                }
            }
        }
        let shape = if batched { vec![n, d, h, w] } else { vec![d, h, w] };
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatrixToMap(input), rg))
    }

    /// Keeps one channel: `[n,c,h,w] -> [n,1,h,w]`.
    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let sx = self.shape(input).to_vec();
        let (n, c, h, w) = as_nchw(&sx, "select_channel input")?;
        if channel >= c {
            return Err(config_err!("select_channel: channel {channel} out of {c}"));
        }
        let plane = h * w;
        let xd = self.data(input);
        let mut out = Vec::with_capacity(n * plane);
        for s in 0..n {
            let start = (s * c + channel) * plane;
            out.extend_from_slice(&xd[start..start + plane]);
        }
        let shape = image_shape(&sx, n, 1, h, w);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SelectChannel { input, channel }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.data(input).iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let d = self.data(input);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Mean(input), rg)
    }

    /// Class-weighted binary cross-entropy averaged over every element.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn weighted_bce(&mut self, prob: Var, label: &Tensor, w0: f64, w1: f64) -> Result<Var> {
        let p = self.data(prob);
        if p.len() != label.numel() {
            return Err(config_err!(
                "weighted_bce: prediction {:?} vs label {:?}",
                self.shape(prob),
                label.shape()
            ));
        }
        check_binary(label)?;
        let loss = crate::losses::weighted_bce_value(p, label.data(), w0, w1);
        let rg = self.rg(prob);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                prob,
                label: label.data().to_vec(),
                w0,
                w1,
            },
            rg,
        ))
    }

    /// Soft dice loss, computed per sample (leading axis of a 4-D input) and
    /// averaged.
    pub fn dice(&mut self, prob: Var, label: &Tensor, epsilon: f64) -> Result<Var> {
        let shape = self.shape(prob).to_vec();
        if shape.iter().product::<usize>() != label.numel() {
            return Err(config_err!("dice: prediction {:?} vs label {:?}", shape, label.shape()));
        }
        let samples = if shape.len() == 4 { shape[0] } else { 1 };
        let loss = crate::losses::dice_value(self.data(prob), label.data(), samples, epsilon);
        let rg = self.rg(prob);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                prob,
                label: label.data().to_vec(),
                samples,
                epsilon,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. Returns gradients for every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(config_err!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
        if !self.rg(var) {
            return;
        }
        match grads[var.0].as_mut() {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            None => grads[var.0] = Some(delta),
        }
    }

    fn backward_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let g = kernels::conv2d_backward(
                    self.data(*input),
                    self.data(*kernel),
                    dy,
                    geom,
                    self.rg(*input),
                    self.rg(*kernel),
                    bias.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = g.dx {
                    self.acc(grads, *input, dx);
                }
                if let Some(dk) = g.dkernel {
                    self.acc(grads, *kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, g.dbias) {
                    self.acc(grads, *b, db);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (g, &src) in dy.iter().zip(argmax) {
                    dx[src] += g;
                }
                self.acc(grads, *input, dx);
            }
            Op::Relu(input) => {
                let x = self.data(*input);
                let dx = dy
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc(grads, *input, dx);
            }
            Op::Sigmoid(input) => {
                let dx = dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.acc(grads, *input, dx);
            }
            Op::Scale(input, f) => {
                let dx = dy.iter().map(|g| g * f).collect();
                self.acc(grads, *input, dx);
            }
            Op::SoftmaxRows(input) => {
                let cols = *node.value.shape().last().unwrap();
                self.acc(grads, *input, kernels::softmax_rows_backward(y, dy, cols));
            }
            Op::SoftmaxChannels(input) => {
                let (n, c, h, w) = as_nchw(node.value.shape(), "softmax_channels")?;
                let plane = h * w;
                let mut dx = vec![0.0; y.len()];
                for b in 0..n {
                    let base = b * c * plane;
                    for p in 0..plane {
                        let dot: f64 = (0..c)
                            .map(|ch| y[base + ch * plane + p] * dy[base + ch * plane + p])
                            .sum();
                        for ch in 0..c {
                            let i = base + ch * plane + p;
                            dx[i] = y[i] * (dy[i] - dot);
                        }
                    }
                }
                self.acc(grads, *input, dx);
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = as_nchw(node.value.shape(), "batchnorm")?;
                let plane = h * w;
                let count = (n * plane) as f64;
                let gd = self.data(*gamma);
                let (dgamma, dbeta) = affine_grads(dy, xhat, n, c, plane);
                if self.rg(*input) {
                    let mut dx = vec![0.0; dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gd[ch] * inv_std[ch] / count;
                            let start = (s * c + ch) * plane;
                            for i in start..start + plane {
                                dx[i] = k * (count * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    self.acc(grads, *input, dx);
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = as_nchw(node.value.shape(), "batchnorm")?;
                let plane = h * w;
                let gd = self.data(*gamma);
                let (dgamma, dbeta) = affine_grads(dy, xhat, n, c, plane);
                if self.rg(*input) {
                    let mut dx = vec![0.0; dy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gd[ch] * inv_std[ch];
                            let start = (s * c + ch) * plane;
                            for i in start..start + plane {
                                dx[i] = k * dy[i];
                            }
                        }
                    }
                    self.acc(grads, *input, dx);
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::Matmul { a, b, dims } => self.matmul_backward(*a, *b, dims, dy, grads),
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = as_nchw(self.shape(*a), "concat")?;
                let cb = as_nchw(self.shape(*b), "concat")?.1;
                let plane = h * w;
                let mut da = Vec::with_capacity(n * ca * plane);
                let mut db = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    da.extend_from_slice(&dy[base..base + ca * plane]);
                    db.extend_from_slice(&dy[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.to_vec());
                self.acc(grads, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.to_vec());
                self.acc(grads, *b, dy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, dy.iter().zip(bd).map(|(g, v)| g * v).collect());
                self.acc(grads, *b, dy.iter().zip(ad).map(|(g, v)| g * v).collect());
            }
            Op::AbsDiff(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let da: Vec<f64> = dy
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(g, (x, y))| g * sign(x - y))
                    .collect();
                self.acc(grads, *b, da.iter().map(|g| -g).collect());
                self.acc(grads, *a, da);
            }
            Op::MulChannelBroadcast { x, mask } => {
                let (n, c, h, w) = as_nchw(self.shape(*x), "mask")?;
                let plane = h * w;
                let (xd, md) = (self.data(*x), self.data(*mask));
                let mut dx = vec![0.0; xd.len()];
                let mut dm = vec![0.0; md.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let start = (s * c + ch) * plane;
                        for p in 0..plane {
                            dx[start + p] = dy[start + p] * md[s * plane + p];
                            dm[s * plane + p] += dy[start + p] * xd[start + p];
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *mask, dm);
            }
            Op::ChannelMean(x) => {
                let (n, c, h, w) = as_nchw(self.shape(*x), "channel_mean")?;
                let plane = h * w;
                let mut dx = vec![0.0; n * c * plane];
                for s in 0..n {
                    for ch in 0..c {
                        let start = (s * c + ch) * plane;
                        for p in 0..plane {
                            dx[start + p] = dy[s * plane + p] / c as f64;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Upsample2x { input, mode } => {
                let (n, c, h, w) = as_nchw(self.shape(*input), "upsample")?;
                self.acc(grads, *input, kernels::upsample2x_backward(dy, n * c, h, w, *mode));
            }
            Op::ReshapeMatrix(input) => {
                let (n, c, h, w) = as_nchw(self.shape(*input), "reshape_matrix")?;
                let plane = h * w;
                let mut dx = vec![0.0; dy.len()];
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..plane {
                            dx[(s * c + ch) * plane + p] = dy[(s * plane + p) * c + ch];
                        }
                    }
                }
                self.acc(grads, *input, dx);
            }
            Op::MatrixToMap(input) => {
                let (n, d, h, w) = as_nchw(node.value.shape(), "matrix_to_map")?;
                let plane = h * w;
                let mut dx = vec![0.0; dy.len()];
                for s in 0..n {
                    for p in 0..plane {
                        for ch in 0..d {
                            dx[(s * plane + p) * d + ch] = dy[(s * d + ch) * plane + p];
                        }
                    }
                }
                self.acc(grads, *input, dx);
            }
            Op::SelectChannel { input, channel } => {
                let (n, c, h, w) = as_nchw(self.shape(*input), "select_channel")?;
                let plane = h * w;
                let mut dx = vec![0.0; n * c * plane];
                for s in 0..n {
                    let start = (s * c + channel) * plane;
                    dx[start..start + plane].copy_from_slice(&dy[s * plane..(s + 1) * plane]);
                }
                self.acc(grads, *input, dx);
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                self.acc(grads, *input, vec![dy[0]; n]);
            }
            Op::Mean(input) => {
                let n = self.value(*input).numel();
                self.acc(grads, *input, vec![dy[0] / n.max(1) as f64; n]);
            }
            Op::WeightedBce { prob, label, w0, w1 } => {
                let p = self.data(*prob);
                let count = p.len() as f64;
                let dx = p
                    .iter()
                    .zip(label)
                    .map(|(&pv, &yv)| {
                        if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            -dy[0] * (w1 * yv / pv - w0 * (1.0 - yv) / (1.0 - pv)) / count
                        }
                    })
                    .collect();
                self.acc(grads, *prob, dx);
            }
            Op::Dice {
                prob,
                label,
                samples,
                epsilon,
            } => {
                let p = self.data(*prob);
                let per = p.len() / samples;
                let mut dx = vec![0.0; p.len()];
                for s in 0..*samples {
                    let ps = &p[s * per..(s + 1) * per];
                    let ys = &label[s * per..(s + 1) * per];
                    let inter: f64 = ps.iter().zip(ys).map(|(a, b)| a * b).sum();
                    let denom: f64 = ys.iter().sum::<f64>() + ps.iter().sum::<f64>() + epsilon;
                    let num = 2.0 * inter + epsilon;
                    for (m, yv) in ys.iter().enumerate() {
                        dx[s * per + m] =
                            -dy[0] * (2.0 * yv * denom - num) / (denom * denom) / *samples as f64;
                    }
                }
                self.acc(grads, *prob, dx);
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, a: Var, b: Var, dims: &MatmulDims, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let MatmulDims {
            batch,
            n,
            k,
            m,
            trans_b,
            b_shared,
        } = *dims;
        let ad = self.data(a);
        let bd = self.data(b);
        // stored rhs element (kk, j) of the logical [k,m] operand
        let b_rc = if trans_b { (1, k) } else { (m, 1) };
        if self.rg(a) {
            let mut da = vec![0.0; ad.len()];
            for bt in 0..batch {
                let bs = if b_shared { 0 } else { bt * k * m };
                // dA = dY·Bᵀ : [n,m]·[m,k]
                gemm_slices(
                    n,
                    m,
                    k,
                    &dy[bt * n * m..(bt + 1) * n * m],
                    (m, 1),
                    &bd[bs..bs + k * m],
                    (b_rc.1, b_rc.0),
                    &mut da[bt * n * k..(bt + 1) * n * k],
                );
            }
            self.acc(grads, a, da);
        }
        if self.rg(b) {
            let mut db = vec![0.0; bd.len()];
            for bt in 0..batch {
                let bs = if b_shared { 0 } else { bt * k * m };
                // dB = Aᵀ·dY : [k,n]·[n,m], written in the rhs storage layout
                let mut part = vec![0.0; k * m];
                gemm_slices(
                    k,
                    n,
                    m,
                    &ad[bt * n * k..(bt + 1) * n * k],
                    (1, k),
                    &dy[bt * n * m..(bt + 1) * n * m],
                    (m, 1),
                    &mut part,
                );
                for kk in 0..k {
                    for j in 0..m {
                        db[bs + kk * b_rc.0 + j * b_rc.1] += part[kk * m + j];
                    }
                }
            }
            self.acc(grads, b, db);
        }
    }

    /// Folds parameter gradients into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParameterStore) -> Result<()> {
        for (name, var) in &self.param_order {
            if let Some(g) = grads.get(*var) {
                store
                    .get_mut(name)
                    .ok_or_else(|| config_err!("unknown parameter `{name}`"))?
                    .accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_slices(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
) {
    kernels::gemm(m, k, n, a, sa, b, sb, 0.0, c, (n, 1));
}

fn affine_grads(dy: &[f64], xhat: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let start = (s * c + ch) * plane;
            for i in start..start + plane {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    (dgamma, dbeta)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_binary(label: &Tensor) -> Result<()> {
    if let Some(v) = label.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(format!("label value {v} is not in {{0,1}}")));
    }
    Ok(())
}
