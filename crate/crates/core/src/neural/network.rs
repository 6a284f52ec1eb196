//! Residual dense network with batch normalization.
//!
//! Activations are `features x batch` matrices stored column-major, so one
//! sample is one contiguous column. Weights are row-major `out x in`.
//! All parameters live in one flat vector; [`Tensor`] entries locate them.
//!
//! Each block maps width `a` to width `b`:
//!
//! ```text
//! x -> dense(b x a) -> bn -> relu -> dense(b x b) -> bn -> (+ skip) -> relu
//! ```
//!
//! The skip path is the identity when `a == b`, otherwise a projection
//! `bn(dense(b x a) x)`. Dense layers followed by batch normalization carry
//! no bias. A final affine layer maps the last width to the output, with an
//! optional tanh.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Linear,
    Tanh,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Output width of each residual block.
    pub widths: Vec<usize>,
    #[serde(default = "default_true")]
    pub batchnorm: bool,
    #[serde(default)]
    pub output_activation: OutputActivation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Same input and output width; identity skip.
    Preserving,
    /// Width changes; projected skip.
    Projecting,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(invalid("network input and output dimensions must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(invalid("network needs at least one block and positive widths"));
        }
        Ok(())
    }

    pub fn block_kinds(&self) -> Vec<BlockKind> {
        let mut prev = self.input_dim;
        self.widths
            .iter()
            .map(|&w| {
                let k = if w == prev {
                    BlockKind::Preserving
                } else {
                    BlockKind::Projecting
                };
                prev = w;
                k
            })
            .collect()
    }
}

/// A named parameter tensor inside the flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Clone, Debug)]
struct Dense {
    rows: usize,
    cols: usize,
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Debug)]
struct Norm {
    dim: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
struct Block {
    d1: Dense,
    n1: Option<Norm>,
    d2: Dense,
    n2: Option<Norm>,
    skip: Option<(Dense, Option<Norm>)>,
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<Block>,
    head: Dense,
    tensors: Vec<Tensor>,
    n_params: usize,
    n_stats: usize,
}

struct Builder {
    tensors: Vec<Tensor>,
    n_params: usize,
    n_stats: usize,
    batchnorm: bool,
}

impl Builder {
    fn alloc(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let offset = self.n_params;
        self.tensors.push(Tensor {
            name,
            rows,
            cols,
            offset,
        });
        self.n_params += rows * cols;
        offset
    }

    fn dense(&mut self, name: &str, rows: usize, cols: usize, bias: bool) -> Dense {
        let w = self.alloc(format!("{name}.weight"), rows, cols);
        let b = bias.then(|| self.alloc(format!("{name}.bias"), rows, 1));
        Dense { rows, cols, w, b }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Option<Norm> {
        if !self.batchnorm {
            return None;
        }
        let gamma = self.alloc(format!("{name}.gamma"), dim, 1);
        let beta = self.alloc(format!("{name}.beta"), dim, 1);
        let stats = self.n_stats;
        self.n_stats += dim;
        Some(Norm {
            dim,
            gamma,
            beta,
            stats,
        })
    }
}

impl Layout {
    fn new(spec: &NetworkSpec) -> Self {
        let bn = spec.batchnorm;
        let mut b = Builder {
            tensors: Vec::new(),
            n_params: 0,
            n_stats: 0,
            batchnorm: bn,
        };
        let mut blocks = Vec::new();
        let mut prev = spec.input_dim;
        for (k, &w) in spec.widths.iter().enumerate() {
            let d1 = b.dense(&format!("block{k}.dense1"), w, prev, !bn);
            let n1 = b.norm(&format!("block{k}.bn1"), w);
            let d2 = b.dense(&format!("block{k}.dense2"), w, w, !bn);
            let n2 = b.norm(&format!("block{k}.bn2"), w);
            let skip = (w != prev).then(|| {
                let d = b.dense(&format!("block{k}.skip"), w, prev, !bn);
                (d, b.norm(&format!("block{k}.skip_bn"), w))
            });
            blocks.push(Block { d1, n1, d2, n2, skip });
            prev = w;
        }
        let head = b.dense("head", spec.output_dim, prev, true);
        Layout {
            blocks,
            head,
            tensors: b.tensors,
            n_params: b.n_params,
            n_stats: b.n_stats,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    layout: Layout,
    params: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

/// `C = A * B + beta * C`, each operand given with (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
    sc: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, s: (usize, usize)| (rows - 1) * s.0 + (cols - 1) * s.1 + 1;
    if k > 0 {
        assert!(a.len() >= extent(m, k, sa) && b.len() >= extent(k, n, sb));
    }
    assert!(c.len() >= extent(m, n, sc));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

struct BlockCache {
    x: Vec<f64>,
    n1: Option<NormCache>,
    r1: Vec<f64>,
    n2: Option<NormCache>,
    ns: Option<NormCache>,
    out: Vec<f64>,
}

/// Intermediate values of a training-mode forward pass.
pub struct Tape {
    batch: usize,
    blocks: Vec<BlockCache>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Network {
    /// He-initialized weights, unit batch-norm scales, zero offsets and biases.
    pub fn new(spec: NetworkSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0; layout.n_params];
        for t in &layout.tensors {
            let slot = &mut params[t.offset..t.offset + t.rows * t.cols];
            if t.name.ends_with(".weight") {
                let std = if t.name == "head.weight" {
                    (1.0 / t.cols as f64).sqrt()
                } else {
                    (2.0 / t.cols as f64).sqrt()
                };
                slot.iter_mut().for_each(|v| *v = std * rng.normal());
            } else if t.name.ends_with(".gamma") {
                slot.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let n_stats = layout.n_stats;
        Ok(Self {
            spec,
            layout,
            params,
            running_mean: vec![0.0; n_stats],
            running_var: vec![1.0; n_stats],
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.layout.tensors
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    /// Replaces parameters and running statistics, e.g. after loading.
    pub fn set_state(&mut self, params: Vec<f64>, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.n_params {
            return Err(Error::DimensionMismatch {
                what: "network parameters",
                expected: self.layout.n_params,
                found: params.len(),
            });
        }
        if mean.len() != self.layout.n_stats || var.len() != self.layout.n_stats {
            return Err(Error::DimensionMismatch {
                what: "batch-norm statistics",
                expected: self.layout.n_stats,
                found: mean.len().min(var.len()),
            });
        }
        if var.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || mean.iter().any(|v| !v.is_finite()) {
            return Err(invalid("running statistics must be finite with nonnegative variance"));
        }
        self.params = params;
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Sets the final affine layer to zero, so the network outputs zero everywhere.
    pub fn zero_head(&mut self) {
        let h = &self.layout.head;
        self.params[h.w..h.w + h.rows * h.cols].iter_mut().for_each(|v| *v = 0.0);
        if let Some(b) = h.b {
            self.params[b..b + h.rows].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_batch(&self, x: &[f64], dim: usize) -> Result<usize> {
        if x.is_empty() || x.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                what: "network batch",
                expected: dim,
                found: x.len(),
            });
        }
        Ok(x.len() / dim)
    }

    fn dense_forward(&self, d: &Dense, x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; d.rows * batch];
        let w = &self.params[d.w..d.w + d.rows * d.cols];
        gemm(d.rows, d.cols, batch, w, (d.cols, 1), x, (1, d.cols), 0.0, &mut out, (1, d.rows));
        if let Some(b) = d.b {
            let bias = &self.params[b..b + d.rows];
            for col in out.chunks_exact_mut(d.rows) {
                col.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        out
    }

    fn norm_inference(&self, n: &Norm, z: &mut [f64]) {
        let gamma = &self.params[n.gamma..n.gamma + n.dim];
        let beta = &self.params[n.beta..n.beta + n.dim];
        let mean = &self.running_mean[n.stats..n.stats + n.dim];
        let var = &self.running_var[n.stats..n.stats + n.dim];
        let scale: Vec<f64> = gamma.iter().zip(var).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
        for col in z.chunks_exact_mut(n.dim) {
            for f in 0..n.dim {
                col[f] = scale[f] * (col[f] - mean[f]) + beta[f];
            }
        }
    }

    fn norm_train(&self, n: &Norm, z: &mut [f64], batch: usize) -> NormCache {
        let d = n.dim;
        let gamma = &self.params[n.gamma..n.gamma + d];
        let beta = &self.params[n.beta..n.beta + d];
        let mut mean = vec![0.0; d];
        for col in z.chunks_exact(d) {
            mean.iter_mut().zip(col).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= batch as f64);
        let mut var = vec![0.0; d];
        for col in z.chunks_exact(d) {
            for f in 0..d {
                let c = col[f] - mean[f];
                var[f] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= batch as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; z.len()];
        for (col, hcol) in z.chunks_exact_mut(d).zip(xhat.chunks_exact_mut(d)) {
            for f in 0..d {
                let h = (col[f] - mean[f]) * inv_std[f];
                hcol[f] = h;
                col[f] = gamma[f] * h + beta[f];
            }
        }
        NormCache {
            xhat,
            inv_std,
            mean,
            var,
        }
    }

    /// Inference-mode forward pass on a `input_dim x batch` column-major matrix.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = self.check_batch(x, self.spec.input_dim)?;
        let mut cur = x.to_vec();
        for blk in &self.layout.blocks {
            let mut h = self.dense_forward(&blk.d1, &cur, batch);
            if let Some(n) = &blk.n1 {
                self.norm_inference(n, &mut h);
            }
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut o = self.dense_forward(&blk.d2, &h, batch);
            if let Some(n) = &blk.n2 {
                self.norm_inference(n, &mut o);
            }
            match &blk.skip {
                None => o.iter_mut().zip(&cur).for_each(|(o, s)| *o += s),
                Some((d, n)) => {
                    let mut s = self.dense_forward(d, &cur, batch);
                    if let Some(n) = n {
                        self.norm_inference(n, &mut s);
                    }
                    o.iter_mut().zip(&s).for_each(|(o, s)| *o += s);
                }
            }
            o.iter_mut().for_each(|v| *v = v.max(0.0));
            cur = o;
        }
        let mut y = self.dense_forward(&self.layout.head, &cur, batch);
        if self.spec.output_activation == OutputActivation::Tanh {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        Ok(y)
    }

    /// Training-mode forward pass: batch normalization uses batch statistics.
    pub fn forward_train(&self, x: &[f64]) -> Result<Tape> {
        let batch = self.check_batch(x, self.spec.input_dim)?;
        if self.spec.batchnorm && batch < 2 {
            return Err(invalid("batch normalization needs at least two samples per batch"));
        }
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        let mut cur = x.to_vec();
        for blk in &self.layout.blocks {
            let mut h = self.dense_forward(&blk.d1, &cur, batch);
            let n1 = blk.n1.as_ref().map(|n| self.norm_train(n, &mut h, batch));
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut o = self.dense_forward(&blk.d2, &h, batch);
            let n2 = blk.n2.as_ref().map(|n| self.norm_train(n, &mut o, batch));
            let mut ns = None;
            match &blk.skip {
                None => o.iter_mut().zip(&cur).for_each(|(o, s)| *o += s),
                Some((d, n)) => {
                    let mut s = self.dense_forward(d, &cur, batch);
                    ns = n.as_ref().map(|n| self.norm_train(n, &mut s, batch));
                    o.iter_mut().zip(&s).for_each(|(o, s)| *o += s);
                }
            }
            o.iter_mut().for_each(|v| *v = v.max(0.0));
            let x_in = std::mem::replace(&mut cur, o.clone());
            blocks.push(BlockCache {
                x: x_in,
                n1,
                r1: h,
                n2,
                ns,
                out: o,
            });
        }
        let mut y = self.dense_forward(&self.layout.head, &cur, batch);
        if self.spec.output_activation == OutputActivation::Tanh {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        Ok(Tape {
            batch,
            blocks,
            output: y,
        })
    }

    /// Accumulates weight/bias gradients of a dense layer; returns the input gradient.
    fn dense_backward(&self, d: &Dense, x: &[f64], dz: &[f64], batch: usize, grads: &mut [f64]) -> Vec<f64> {
        gemm(
            d.rows,
            batch,
            d.cols,
            dz,
            (1, d.rows),
            x,
            (d.cols, 1),
            1.0,
            &mut grads[d.w..d.w + d.rows * d.cols],
            (d.cols, 1),
        );
        if let Some(b) = d.b {
            let gb = &mut grads[b..b + d.rows];
            for col in dz.chunks_exact(d.rows) {
                gb.iter_mut().zip(col).for_each(|(g, v)| *g += v);
            }
        }
        let mut dx = vec![0.0; d.cols * batch];
        let w = &self.params[d.w..d.w + d.rows * d.cols];
        gemm(d.cols, d.rows, batch, w, (1, d.cols), dz, (1, d.rows), 0.0, &mut dx, (1, d.cols));
        dx
    }

    /// Turns the gradient w.r.t. the norm output into the gradient w.r.t. its input, in place.
    fn norm_backward(&self, n: &Norm, c: &NormCache, dy: &mut [f64], batch: usize, grads: &mut [f64]) {
        let d = n.dim;
        let gamma = &self.params[n.gamma..n.gamma + d];
        let mut sum_dxhat = vec![0.0; d];
        let mut sum_dxhat_xhat = vec![0.0; d];
        for (col, hcol) in dy.chunks_exact(d).zip(c.xhat.chunks_exact(d)) {
            for f in 0..d {
                grads[n.gamma + f] += col[f] * hcol[f];
                grads[n.beta + f] += col[f];
                let dxh = col[f] * gamma[f];
                sum_dxhat[f] += dxh;
                sum_dxhat_xhat[f] += dxh * hcol[f];
            }
        }
        let b = batch as f64;
        for (col, hcol) in dy.chunks_exact_mut(d).zip(c.xhat.chunks_exact(d)) {
            for f in 0..d {
                let dxh = col[f] * gamma[f];
                col[f] = c.inv_std[f] / b * (b * dxh - sum_dxhat[f] - hcol[f] * sum_dxhat_xhat[f]);
            }
        }
    }

    /// Gradients of a loss with output gradient `dy` (same shape as the tape output).
    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Vec<f64> {
        let batch = tape.batch;
        let mut grads = vec![0.0; self.layout.n_params];
        let mut dz = dy.to_vec();
        if self.spec.output_activation == OutputActivation::Tanh {
            dz.iter_mut().zip(&tape.output).for_each(|(g, y)| *g *= 1.0 - y * y);
        }
        let head_in: &[f64] = match tape.blocks.last() {
            Some(c) => &c.out,
            None => unreachable!("networks have at least one block"),
        };
        let mut dcur = self.dense_backward(&self.layout.head, head_in, &dz, batch, &mut grads);
        for (blk, c) in self.layout.blocks.iter().zip(&tape.blocks).rev() {
            dcur.iter_mut().zip(&c.out).for_each(|(g, o)| {
                if *o <= 0.0 {
                    *g = 0.0
                }
            });
            let mut dx = match &blk.skip {
                None => dcur.clone(),
                Some((d, n)) => {
                    let mut ds = dcur.clone();
                    if let (Some(n), Some(nc)) = (n, &c.ns) {
                        self.norm_backward(n, nc, &mut ds, batch, &mut grads);
                    }
                    self.dense_backward(d, &c.x, &ds, batch, &mut grads)
                }
            };
            let mut dz2 = dcur;
            if let (Some(n), Some(nc)) = (&blk.n2, &c.n2) {
                self.norm_backward(n, nc, &mut dz2, batch, &mut grads);
            }
            let mut dr1 = self.dense_backward(&blk.d2, &c.r1, &dz2, batch, &mut grads);
            dr1.iter_mut().zip(&c.r1).for_each(|(g, r)| {
                if *r <= 0.0 {
                    *g = 0.0
                }
            });
            if let (Some(n), Some(nc)) = (&blk.n1, &c.n1) {
                self.norm_backward(n, nc, &mut dr1, batch, &mut grads);
            }
            let dx1 = self.dense_backward(&blk.d1, &c.x, &dr1, batch, &mut grads);
            dx.iter_mut().zip(&dx1).for_each(|(a, b)| *a += b);
            dcur = dx;
        }
        grads
    }

    /// Folds the batch statistics of a training pass into the running statistics.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        let b = tape.batch as f64;
        let correction = if tape.batch > 1 { b / (b - 1.0) } else { 1.0 };
        for (blk, c) in self.layout.blocks.iter().zip(&tape.blocks) {
            let pairs = [(&blk.n1, &c.n1), (&blk.n2, &c.n2), (&blk.skip.as_ref().and_then(|s| s.1.clone()), &c.ns)];
            for (n, nc) in pairs {
                if let (Some(n), Some(nc)) = (n, nc) {
                    for f in 0..n.dim {
                        let k = n.stats + f;
                        self.running_mean[k] = (1.0 - BN_MOMENTUM) * self.running_mean[k] + BN_MOMENTUM * nc.mean[f];
                        self.running_var[k] =
                            (1.0 - BN_MOMENTUM) * self.running_var[k] + BN_MOMENTUM * nc.var[f] * correction;
                    }
                }
            }
        }
    }
}

/// Mean squared error over all outputs of a batch and its gradient.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    (loss / n, grad)
}

/// Training-mode MSE loss and its gradient for every parameter.
pub fn loss_and_gradients(net: &Network, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let tape = net.forward_train(x)?;
    if y.len() != tape.output.len() {
        return Err(Error::DimensionMismatch {
            what: "training targets",
            expected: tape.output.len(),
            found: y.len(),
        });
    }
    let (loss, dy) = mse_loss(&tape.output, y);
    Ok((loss, net.backward(&tape, &dy)))
}
