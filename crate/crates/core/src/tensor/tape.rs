//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so walking the node list backwards is a valid reverse
//! topological order. Parameters enter the tape by copy from a
//! [`ParamStore`]; after [`Tape::backward`] their gradients are folded back
//! with [`Tape::accumulate_param_grads`].

use std::sync::Arc;

use super::broadcast::{broadcast_shape, Mapping};
use super::kernels::{gelu, gelu_grad, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{config_err, dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean keep-mask over the trailing dims of a tensor, broadcast over the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Arc<Vec<bool>>,
}

impl Mask {
    pub fn new(shape: &[usize], keep: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(dim_err!("mask shape {:?} vs {} entries", shape, keep.len()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            keep: Arc::new(keep),
        })
    }

    /// Lower-triangular `[t, t]` mask: position i keeps j <= i.
    pub fn causal(t: usize) -> Self {
        let mut keep = vec![false; t * t];
        for (i, row) in keep.chunks_mut(t.max(1)).enumerate() {
            row[..=i].fill(true);
        }
        Self {
            shape: vec![t, t],
            keep: Arc::new(keep),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// Elementwise AND of two masks with identical shape.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "cannot combine masks of shape {:?} and {:?}",
                self.shape,
                other.shape
            ));
        }
        let keep = self.keep.iter().zip(other.keep.iter()).map(|(a, b)| *a && *b).collect();
        Mask::new(&self.shape, keep)
    }

    /// Mask as a 0/1 tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::new(&self.shape, data).expect("mask shape is consistent")
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Add { a: Var, b: Var, ma: Mapping, mb: Mapping },
    Sub { a: Var, b: Var, ma: Mapping, mb: Mapping },
    Mul { a: Var, b: Var, ma: Mapping, mb: Mapping },
    Scale { x: Var, factor: f64 },
    Exp { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Abs { x: Var },
    TransposeLast2 { x: Var },
    Reshape { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var },
    AvgPool1d { x: Var, kernel: usize, stride: usize },
    Conv1d { x: Var, w: Var, b: Var },
    BatchNorm(Box<BatchNormOp>),
}

#[derive(Debug, Clone)]
struct BatchNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    training: bool,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (a block, b block) per output block.
    blocks: Vec<(usize, usize)>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A deferred running-statistics update from a training-mode batch norm.
#[derive(Debug, Clone, Copy)]
pub struct StatUpdate {
    pub node: Var,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    track_params: bool,
    captures: Vec<(String, Vec<Var>)>,
    stat_updates: Vec<StatUpdate>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            track_params: true,
            captures: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    /// Tape that records values only; parameters enter without gradient tracking.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.captures.clear();
        self.stat_updates.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    // ---- leaves ------------------------------------------------------------

    /// Input tensor; tracks gradients iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let rg = self.track_params && t.requires_grad;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), rg)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., m, k] × [.., k, n] -> [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(dim_err!("matmul shape mismatch: {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(batch_a, batch_b)
            .map_err(|_| dim_err!("matmul batch mismatch: {:?} x {:?}", sa, sb))?;
        let nb: usize = batch.iter().product();
        // A shared right operand lets every batch row go through one product.
        let fold = batch_b.iter().product::<usize>() == 1 && batch_a == batch.as_slice();
        let rows = m;
        let (m, blocks): (usize, Vec<(usize, usize)>) = if fold {
            (nb * m, vec![(0, 0)])
        } else {
            let ma = Mapping::new(batch_a, &batch);
            let mb = Mapping::new(batch_b, &batch);
            (m, (0..nb).map(|i| (ma.at(i), mb.at(i))).collect())
        };

        let mut out = vec![0.0; blocks.len() * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for (i, &(ia, ib)) in blocks.iter().enumerate() {
                matmul_acc(
                    &da[ia * m * k..(ia + 1) * m * k],
                    &db[ib * k * n..(ib + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch;
        shape.extend([rows, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                plan: MatMulPlan { m, k, n, blocks },
            },
            rg,
        ))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var, Mapping, Mapping) -> Op,
    ) -> Result<Var> {
        let out_shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let ma = Mapping::new(self.shape(a), &out_shape);
        let mb = Mapping::new(self.shape(b), &out_shape);
        let numel: usize = out_shape.iter().product();
        let da = self.data(a);
        let db = self.data(b);
        let out: Vec<f64> = match (&ma, &mb) {
            (Mapping::Identity, Mapping::Identity) => {
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
            }
            _ => (0..numel).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, make(a, b, ma, mb), rg))
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |a, b, ma, mb| Op::Add { a, b, ma, mb })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |a, b, ma, mb| Op::Sub { a, b, ma, mb })
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |a, b, ma, mb| Op::Mul { a, b, ma, mb })
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    // ---- shape -------------------------------------------------------------

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(dim_err!("transpose_last2 needs rank >= 2, got {:?}", s));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for (blk_in, blk_out) in d.chunks(r * c).zip(out.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    blk_out[j * r + i] = blk_in[i * c + j];
                }
            }
        }
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::TransposeLast2 { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(dim_err!(
                "cannot reshape {:?} into {:?}",
                self.shape(x),
                shape
            ));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }, rg))
    }

    /// Collapses all dims from `start_axis` onward into one.
    pub fn flatten(&mut self, x: Var, start_axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start_axis >= s.len() {
            return Err(dim_err!("flatten axis {} out of range for {:?}", start_axis, s));
        }
        let mut shape = s[..start_axis].to_vec();
        shape.push(s[start_axis..].iter().product());
        self.reshape(x, &shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} out of range for {:?}", axis, base));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d])
            {
                return Err(dim_err!("concat shape mismatch: {:?} vs {:?}", base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(dim_err!(
                "slice [{}..{}) on axis {} out of range for {:?}",
                start,
                start + len,
                axis,
                s
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, rg))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(dim_err!("mean of empty tensor"));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![], vec![s], Op::Mean { x }, rg))
    }

    // ---- neural-network primitives -----------------------------------------

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis restricted to kept entries.
    ///
    /// Dropped entries come out as exact zeros and do not enter the
    /// normalizer. A row with nothing kept is all zeros.
    pub fn softmax_lastdim_masked(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let s = self.shape(x);
        if mask.shape.is_empty() || !s.ends_with(&mask.shape) {
            return Err(dim_err!(
                "mask shape {:?} is not a suffix of {:?}",
                mask.shape,
                s
            ));
        }
        self.softmax_impl(x, Some(mask.clone()))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| dim_err!("softmax of a rank-0 tensor"))?;
        if n == 0 {
            return Err(dim_err!("softmax over empty last dimension"));
        }
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for (r, (row, o)) in d.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep: Option<&[bool]> = mask.as_ref().map(|m| {
                let off = (r * n) % m.keep.len();
                &m.keep[off..off + n]
            });
            let kept = |j: usize| keep.is_none_or(|k| k[j]);
            let max = (0..n)
                .filter(|&j| kept(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..n {
                if kept(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x }, rg))
    }

    /// Mean pooling over the last axis; the trailing remainder is dropped.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        if kernel == 0 || stride == 0 {
            return Err(config_err!("avg_pool1d needs kernel >= 1 and stride >= 1"));
        }
        let s = self.shape(x).to_vec();
        let len = *s.last().ok_or_else(|| dim_err!("avg_pool1d on rank-0 tensor"))?;
        if len < kernel {
            return Err(dim_err!(
                "avg_pool1d: length {} is shorter than kernel {}",
                len,
                kernel
            ));
        }
        let out_len = (len - kernel) / stride + 1;
        let d = self.data(x);
        let inv = 1.0 / kernel as f64;
        let mut out = Vec::with_capacity(d.len() / len * out_len);
        for row in d.chunks(len) {
            for o in 0..out_len {
                let w = &row[o * stride..o * stride + kernel];
                out.push(if kernel == 1 { w[0] } else { w.iter().sum::<f64>() * inv });
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = out_len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::AvgPool1d { x, kernel, stride }, rg))
    }

    /// Same-length 1-D convolution `[.., L, C_in] -> [.., L, C_out]` with
    /// weights `[kernel, C_in, C_out]`, zero padding `(kernel-1)/2` per side.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sw.len() != 3 {
            return Err(dim_err!("conv1d weight must be [kernel, C_in, C_out], got {:?}", sw));
        }
        let (kernel, c_in, c_out) = (sw[0], sw[1], sw[2]);
        if kernel % 2 == 0 {
            return Err(config_err!("conv1d kernel must be odd, got {}", kernel));
        }
        if sx.len() < 2 || sx[sx.len() - 1] != c_in || sb != [c_out] {
            return Err(dim_err!(
                "conv1d shape mismatch: x {:?}, w {:?}, b {:?}",
                sx,
                sw,
                sb
            ));
        }
        let len = sx[sx.len() - 2];
        let pad = kernel / 2;
        let (dx, dw, db) = (self.data(x), self.data(w), self.data(b));
        let batches = dx.len() / (len * c_in).max(1);
        let mut out = vec![0.0; batches * len * c_out];
        for bi in 0..batches {
            let xb = &dx[bi * len * c_in..(bi + 1) * len * c_in];
            let ob = &mut out[bi * len * c_out..(bi + 1) * len * c_out];
            for l in 0..len {
                let o = &mut ob[l * c_out..(l + 1) * c_out];
                o.copy_from_slice(db);
                for t in 0..kernel {
                    let src = l + t;
                    if src < pad || src - pad >= len {
                        continue;
                    }
                    let xr = &xb[(src - pad) * c_in..(src - pad + 1) * c_in];
                    for (c, &xv) in xr.iter().enumerate() {
                        let wr = &dw[(t * c_in + c) * c_out..(t * c_in + c + 1) * c_out];
                        for (ov, &wv) in o.iter_mut().zip(wr) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = c_out;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(shape, out, Op::Conv1d { x, w, b }, rg))
    }

    /// Batch normalization over the trailing feature axis.
    ///
    /// Statistics pool every leading axis. In training mode the biased batch
    /// variance normalizes and the batch statistics are kept on the node (see
    /// [`Tape::defer_stat_update`]); in eval mode the running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        training: bool,
        eps: f64,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let features = *sx.last().ok_or_else(|| dim_err!("batchnorm on rank-0 tensor"))?;
        if sx.len() < 2 || sx[0] == 0 || features == 0 {
            return Err(dim_err!("batchnorm needs a non-empty batch, got {:?}", sx));
        }
        if self.shape(gamma) != [features]
            || self.shape(beta) != [features]
            || running_mean.len() != features
            || running_var.len() != features
        {
            return Err(dim_err!("batchnorm parameter shapes do not match {} features", features));
        }
        let dx = self.data(x);
        let rows = dx.len() / features;
        let (mean, var) = if training {
            let mut mean = vec![0.0; features];
            for row in dx.chunks(features) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; features];
            for row in dx.chunks(features) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (dg, dbeta) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; dx.len()];
        let mut out = vec![0.0; dx.len()];
        for ((row, xh), o) in dx
            .chunks(features)
            .zip(xhat.chunks_mut(features))
            .zip(out.chunks_mut(features))
        {
            for f in 0..features {
                xh[f] = (row[f] - mean[f]) * inv_std[f];
                o[f] = dg[f] * xh[f] + dbeta[f];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let unbiased = if rows > 1 {
            var.iter().map(|v| v * rows as f64 / (rows - 1) as f64).collect()
        } else {
            var.clone()
        };
        Ok(self.push(
            sx,
            out,
            Op::BatchNorm(Box::new(BatchNormOp {
                x,
                gamma,
                beta,
                training,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: unbiased,
            })),
            rg,
        ))
    }

    // ---- side channels -----------------------------------------------------

    /// Registers a running-statistics update to be applied by
    /// [`Tape::commit_stat_updates`].
    pub fn defer_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    /// Applies deferred running-statistics updates with
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn commit_stat_updates(&mut self, store: &mut ParamStore) -> Result<()> {
        for u in self.stat_updates.drain(..) {
            let Op::BatchNorm(bn) = &self.nodes[u.node.0].op else {
                return Err(Error::Contract("stat update refers to a non-batchnorm node".into()));
            };
            if !bn.training {
                continue;
            }
            for (id, batch) in [(u.running_mean, &bn.batch_mean), (u.running_var, &bn.batch_var)] {
                let t = store.get_mut(id);
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * b;
                }
            }
        }
        Ok(())
    }

    /// Tags a group of nodes (for example per-head attention maps) for later lookup.
    pub fn capture(&mut self, name: impl Into<String>, vars: Vec<Var>) {
        self.captures.push((name.into(), vars));
    }

    pub fn captured(&self, name: &str) -> Option<&[Var]> {
        self.captures
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn capture_names(&self) -> impl Iterator<Item = &str> {
        self.captures.iter().map(|(n, _)| n.as_str())
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar `loss`.
    ///
    /// Afterwards every gradient-tracking node has a gradient; nodes the loss
    /// does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            self.fill_missing_grads();
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            propagate(&self.nodes, &mut self.grads, i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
        self.fill_missing_grads();
        Ok(())
    }

    fn fill_missing_grads(&mut self) {
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![0.0; node.data.len()]);
            }
        }
    }

    /// Adds gradients of every parameter node into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(Error::Contract("no backward pass has run on this tape".into()));
        }
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let t = store.get_mut(*id);
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                    None => t.grad = Some(g.clone()),
                }
            }
        }
        Ok(())
    }
}

type Grads = [Option<Vec<f64>>];

fn grad_buf<'a>(nodes: &[Node], grads: &'a mut Grads, v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn accumulate(nodes: &[Node], grads: &mut Grads, x: Var, vals: impl Iterator<Item = f64>) {
    if let Some(gx) = grad_buf(nodes, grads, x) {
        for (d, v) in gx.iter_mut().zip(vals) {
            *d += v;
        }
    }
}

fn scatter(nodes: &[Node], grads: &mut Grads, x: Var, map: &Mapping, vals: impl Iterator<Item = f64>) {
    if let Some(gx) = grad_buf(nodes, grads, x) {
        match map {
            Mapping::Identity => gx.iter_mut().zip(vals).for_each(|(d, v)| *d += v),
            _ => {
                for (j, v) in vals.enumerate() {
                    gx[map.at(j)] += v;
                }
            }
        }
    }
}

fn propagate(nodes: &[Node], grads: &mut Grads, i: usize, op: &Op, g: &[f64]) {
    let data = |v: Var| nodes[v.0].data.as_slice();
    let shape = |v: Var| nodes[v.0].shape.as_slice();
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul { a, b, plan } => {
            let (a, b) = (*a, *b);
            let MatMulPlan { m, k, n, blocks } = plan;
            let (m, k, n) = (*m, *k, *n);
            if let Some(ga) = grad_buf(nodes, grads, a) {
                let bd = data(b);
                for (bi, &(ia, ib)) in blocks.iter().enumerate() {
                    matmul_bt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bd[ib * k * n..(ib + 1) * k * n],
                        &mut ga[ia * m * k..(ia + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, b) {
                let ad = data(a);
                for (bi, &(ia, ib)) in blocks.iter().enumerate() {
                    matmul_at_acc(
                        &ad[ia * m * k..(ia + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Op::Add { a, b, ma, mb } => {
            scatter(nodes, grads, *a, ma, g.iter().copied());
            scatter(nodes, grads, *b, mb, g.iter().copied());
        }
        Op::Sub { a, b, ma, mb } => {
            scatter(nodes, grads, *a, ma, g.iter().copied());
            scatter(nodes, grads, *b, mb, g.iter().map(|v| -v));
        }
        Op::Mul { a, b, ma, mb } => {
            let (ad, bd) = (data(*a), data(*b));
            scatter(nodes, grads, *a, ma, g.iter().enumerate().map(|(j, v)| v * bd[mb.at(j)]));
            scatter(nodes, grads, *b, mb, g.iter().enumerate().map(|(j, v)| v * ad[ma.at(j)]));
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, grads, *x, g.iter().map(|v| v * factor));
        }
        Op::Exp { x } => {
            let y = &nodes[i].data;
            accumulate(nodes, grads, *x, g.iter().zip(y).map(|(v, y)| v * y));
        }
        Op::Relu { x } => {
            let xd = data(*x);
            accumulate(nodes, grads, *x, g.iter().zip(xd).map(|(v, &x)| if x > 0.0 { *v } else { 0.0 }));
        }
        Op::Gelu { x } => {
            let xd = data(*x);
            accumulate(nodes, grads, *x, g.iter().zip(xd).map(|(v, &x)| v * gelu_grad(x)));
        }
        Op::Abs { x } => {
            let xd = data(*x);
            accumulate(
                nodes,
                grads,
                *x,
                g.iter().zip(xd).map(|(v, &x)| if x == 0.0 { 0.0 } else { v * x.signum() }),
            );
        }
        Op::TransposeLast2 { x } => {
            let s = shape(*x);
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (gb, ob) in g.chunks(r * c).zip(gx.chunks_mut(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            ob[i * c + j] += gb[j * r + i];
                        }
                    }
                }
            }
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, g.iter().copied()),
        Op::Concat { inputs, axis } => {
            let axis = *axis;
            let base = &nodes[i].shape;
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let total = base[axis];
            let mut offset = 0;
            for &v in inputs {
                let len = shape(v)[axis] * inner;
                if let Some(gv) = grad_buf(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                        for (d, s) in gv[o * len..(o + 1) * len].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (axis, start) = (*axis, *start);
            let s = shape(*x);
            let len = nodes[i].shape[axis];
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let extent = s[axis];
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    for (d, v) in gx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += v;
                    }
                }
            }
        }
        Op::Sum { x } => {
            let n = data(*x).len();
            accumulate(nodes, grads, *x, std::iter::repeat_n(g[0], n));
        }
        Op::Mean { x } => {
            let n = data(*x).len();
            accumulate(nodes, grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
        }
        Op::Softmax { x } => {
            let n = *nodes[i].shape.last().unwrap();
            let y = &nodes[i].data;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::AvgPool1d { x, kernel, stride } => {
            let (kernel, stride) = (*kernel, *stride);
            let len = *shape(*x).last().unwrap();
            let out_len = *nodes[i].shape.last().unwrap();
            let inv = 1.0 / kernel as f64;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (gr, dr) in g.chunks(out_len).zip(gx.chunks_mut(len)) {
                    for (o, &gv) in gr.iter().enumerate() {
                        for d in &mut dr[o * stride..o * stride + kernel] {
                            *d += gv * inv;
                        }
                    }
                }
            }
        }
        Op::Conv1d { x, w, b } => conv1d_backward(nodes, grads, *x, *w, *b, g),
        Op::BatchNorm(bn) => batchnorm_backward(nodes, grads, bn, g),
    }
}

fn conv1d_backward(nodes: &[Node], grads: &mut Grads, x: Var, w: Var, b: Var, g: &[f64]) {
    let sw = &nodes[w.0].shape;
    let (kernel, c_in, c_out) = (sw[0], sw[1], sw[2]);
    let sx = &nodes[x.0].shape;
    let len = sx[sx.len() - 2];
    let pad = kernel / 2;
    let xd = &nodes[x.0].data;
    let wd = &nodes[w.0].data;
    let batches = xd.len() / (len * c_in).max(1);
    let taps = |l: usize, t: usize| -> Option<usize> {
        let src = l + t;
        (src >= pad && src - pad < len).then(|| src - pad)
    };

    if let Some(gb) = grad_buf(nodes, grads, b) {
        for row in g.chunks(c_out) {
            for (d, v) in gb.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    if let Some(gw) = grad_buf(nodes, grads, w) {
        for bi in 0..batches {
            for l in 0..len {
                let gr = &g[(bi * len + l) * c_out..(bi * len + l + 1) * c_out];
                for t in 0..kernel {
                    let Some(src) = taps(l, t) else { continue };
                    for c in 0..c_in {
                        let xv = xd[(bi * len + src) * c_in + c];
                        let wrow = &mut gw[(t * c_in + c) * c_out..(t * c_in + c + 1) * c_out];
                        for (d, gv) in wrow.iter_mut().zip(gr) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
    if let Some(gx) = grad_buf(nodes, grads, x) {
        for bi in 0..batches {
            for l in 0..len {
                let gr = &g[(bi * len + l) * c_out..(bi * len + l + 1) * c_out];
                for t in 0..kernel {
                    let Some(src) = taps(l, t) else { continue };
                    for c in 0..c_in {
                        let wrow = &wd[(t * c_in + c) * c_out..(t * c_in + c + 1) * c_out];
                        let s: f64 = wrow.iter().zip(gr).map(|(a, b)| a * b).sum();
                        gx[(bi * len + src) * c_in + c] += s;
                    }
                }
            }
        }
    }
}

fn batchnorm_backward(nodes: &[Node], grads: &mut Grads, bn: &BatchNormOp, g: &[f64]) {
    let features = bn.inv_std.len();
    let rows = g.len() / features;
    let gamma = &nodes[bn.gamma.0].data;
    let mut sum_g = vec![0.0; features];
    let mut sum_gx = vec![0.0; features];
    for (gr, xr) in g.chunks(features).zip(bn.xhat.chunks(features)) {
        for f in 0..features {
            sum_g[f] += gr[f];
            sum_gx[f] += gr[f] * xr[f];
        }
    }
    if let Some(gb) = grad_buf(nodes, grads, bn.beta) {
        gb.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
    }
    if let Some(gg) = grad_buf(nodes, grads, bn.gamma) {
        gg.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v);
    }
    if let Some(gx) = grad_buf(nodes, grads, bn.x) {
        let m = rows as f64;
        for ((gr, xr), dr) in g
            .chunks(features)
            .zip(bn.xhat.chunks(features))
            .zip(gx.chunks_mut(features))
        {
            for f in 0..features {
                let scale = gamma[f] * bn.inv_std[f];
                dr[f] += if bn.training {
                    scale * (gr[f] - sum_g[f] / m - xr[f] * sum_gx[f] / m)
                } else {
                    scale * gr[f]
                };
            }
        }
    }
}
