use std::collections::HashMap;

use super::kernels::{self, axis_split, conv_out};
use super::{sc, Group, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, T),
    AddBias(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    ChannelAffine { x: NodeId, scale: NodeId, shift: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Reshape(NodeId),
    LeakyRelu(NodeId, T),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanAxis(NodeId, usize),
    VarAxis(NodeId, usize),
    Softmax(NodeId, usize),
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    Conv1x1 { x: NodeId, w: NodeId },
    Upsample(NodeId, usize),
    SpaceToDepth(NodeId, usize),
    DepthToSpace(NodeId, usize),
    Embedding { table: NodeId, ids: Vec<usize> },
    InstanceNorm { x: NodeId, inv_std: Vec<T> },
    Pearson { a: NodeId, b: NodeId, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Every op appends one node whose parents precede it, so
/// the node order is a topological order and backward is a single reverse
/// sweep. A graph is rebuilt for every step.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    frozen: Vec<Group>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to a node, if the node was reached.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients in parameter-id order. Unreached parameters are
    /// skipped.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|&(p, n)| self.wrt(n).map(|g| (p, g)))
    }
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return dim_err(format!("{op}: axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), frozen: Vec::new() }
    }

    /// Graph in which parameters of the given groups enter as constants.
    pub fn frozen(groups: &[Group]) -> Self {
        Self { frozen: groups.to_vec(), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Result<NodeId> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Leaf that collects a gradient (used for inputs under test).
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node so
    /// all uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let p = store.get(id);
        let requires_grad = !self.frozen.contains(&p.group);
        self.nodes.push(Node { value: p.value.clone(), op: Op::Leaf, requires_grad });
        let n = NodeId(self.nodes.len() - 1);
        self.params.insert(id, n);
        n
    }

    /// Constant copy of a node's value; gradients stop here.
    pub fn detach(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return dim_err(format!("matmul: incompatible shapes {:?} and {:?}", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return dim_err(format!("transpose: expected rank 2, got {:?}", v.shape()));
        }
        let t = transpose2(v);
        let rg = self.rg(&[x]);
        self.push(t, Op::Transpose(x), rg, "transpose")
    }

    fn zip(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let (s, b) = (sc::<T>(scale), sc::<T>(shift));
        let t = self.value(x).map(|v| s * v + b);
        let rg = self.rg(&[x]);
        self.push(t, Op::Affine(x, s), rg, "affine")
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.affine(x, s, 0.0)
    }

    /// `x[.., N] + b[N]`, broadcast over all leading axes.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = bv.len();
        if xv.rank() == 0 || *xv.shape().last().unwrap() != n || bv.rank() != 1 {
            return dim_err(format!("add_bias: {:?} vs bias {:?}", xv.shape(), bv.shape()));
        }
        let mut t = xv.clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(bv.data()) {
                *v = *v + bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(t, Op::AddBias(x, b), rg, "add_bias")
    }

    /// `x[C, ..] + b[C]`, one bias per leading-axis slice.
    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() == 0 || xv.shape()[0] != bv.len() || bv.rank() != 1 {
            return dim_err(format!("add_channel_bias: {:?} vs bias {:?}", xv.shape(), bv.shape()));
        }
        let inner = xv.len() / bv.len().max(1);
        let mut t = xv.clone();
        for (chunk, &bb) in t.data_mut().chunks_mut(inner.max(1)).zip(bv.data()) {
            chunk.iter_mut().for_each(|v| *v = *v + bb);
        }
        let rg = self.rg(&[x, b]);
        self.push(t, Op::AddChannelBias(x, b), rg, "add_channel_bias")
    }

    /// Per-channel `x[c, ..] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let (xv, sv, bv) = (self.value(x), self.value(scale), self.value(shift));
        if xv.rank() == 0 || sv.rank() != 1 || sv.shape() != bv.shape() || xv.shape()[0] != sv.len() {
            return dim_err(format!(
                "channel_affine: input {:?}, scale {:?}, shift {:?}",
                xv.shape(),
                sv.shape(),
                bv.shape()
            ));
        }
        let inner = xv.len() / sv.len().max(1);
        let mut t = xv.clone();
        for (c, chunk) in t.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let (s, b) = (sv.data()[c], bv.data()[c]);
            chunk.iter_mut().for_each(|v| *v = *v * s + b);
        }
        let rg = self.rg(&[x, scale, shift]);
        self.push(t, Op::ChannelAffine { x, scale, shift }, rg, "channel_affine")
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let Some(&first) = inputs.first() else {
            return dim_err("concat: no inputs");
        };
        let base = self.value(first).shape().to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &i in inputs {
            let s = self.value(i).shape();
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d]) {
                return dim_err(format!("concat on axis {axis}: {base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in inputs {
                let v = self.value(i);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        self.push(Tensor::new(&shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg, "concat")
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        check_axis("slice", v.shape(), axis)?;
        if start + len > v.shape()[axis] {
            return dim_err(format!("slice {start}..{} out of range for {:?}", start + len, v.shape()));
        }
        let (outer, dim, inner) = axis_split(v.shape(), axis);
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, data)?, Op::Slice { x, axis, start }, rg, "slice")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    fn unary(&mut self, x: NodeId, name: &str, f: impl Fn(T) -> T, op: Op<T>) -> Result<NodeId> {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg, name)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let s = sc::<T>(slope);
        self.unary(x, "leaky_relu", |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "sigmoid", kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "tanh", |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "exp", |v| v.exp(), Op::Exp(x))
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let floor = sc::<T>(LOG_FLOOR);
        self.unary(x, "log", move |v| v.max(floor).ln(), Op::Log(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "softplus", kernels::softplus, Op::Softplus(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.is_empty() {
            return dim_err("mean of empty tensor");
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / sc(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg, "mean")
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        check_axis("mean_axis", v.shape(), axis)?;
        let (shape, data) = reduce_axis(v, axis, |vals| {
            let n = sc::<T>(vals.len() as f64);
            vals.iter().copied().sum::<T>() / n
        });
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, data)?, Op::MeanAxis(x, axis), rg, "mean_axis")
    }

    /// Population variance over one axis; the axis is removed from the shape.
    pub fn var_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        check_axis("var_axis", v.shape(), axis)?;
        let (shape, data) = reduce_axis(v, axis, population_var);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, data)?, Op::VarAxis(x, axis), rg, "var_axis")
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis`. Positions whose `mask` entry is false behave as if
    /// their logit were -inf. A mask with no true entry is ignored (uniform
    /// fallback over all positions).
    pub fn softmax_masked(&mut self, x: NodeId, axis: usize, mask: Option<&[bool]>) -> Result<NodeId> {
        let v = self.value(x);
        check_axis("softmax", v.shape(), axis)?;
        v.check_finite("softmax input")?;
        let split = axis_split(v.shape(), axis);
        let mask = match mask {
            Some(m) if m.len() != split.1 => {
                return dim_err(format!("softmax mask length {} vs axis extent {}", m.len(), split.1));
            }
            Some(m) if !m.iter().any(|&b| b) => {
                log::warn!("softmax: every position masked, attending uniformly");
                None
            }
            m => m,
        };
        let mut out = vec![T::zero(); v.len()];
        kernels::softmax_axis(v.data(), split, mask, &mut out);
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x, axis), rg, "softmax")
    }

    /// 2-D convolution of `x[C,H,W]` with `w[C',C,k,k]`, no bias.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 3 || wv.rank() != 4 || wv.shape()[1] != xv.shape()[0] || wv.shape()[2] != wv.shape()[3] {
            return dim_err(format!("conv2d: input {:?}, weight {:?}", xv.shape(), wv.shape()));
        }
        let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (co, k) = (wv.shape()[0], wv.shape()[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return dim_err(format!("conv2d: kernel {k} too large for {:?}", xv.shape()));
        }
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let rows = c * k * k;
        let mut cols = vec![T::zero(); rows * ho * wo];
        kernels::im2col(xv.data(), c, h, wd, k, stride, pad, &mut cols);
        let mut out = vec![T::zero(); co * ho * wo];
        T::gemm(co, rows, ho * wo, wv.data(), false, &cols, false, &mut out, false);
        let rg = self.rg(&[x, w]);
        self.push(Tensor::new(&[co, ho, wo], out)?, Op::Conv2d { x, w, stride, pad }, rg, "conv2d")
    }

    /// Per-pixel channel map: `x[C,H,W]`, `w[C',C]` -> `[C',H,W]`.
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() < 2 || wv.rank() != 2 || wv.shape()[1] != xv.shape()[0] {
            return dim_err(format!("conv1x1: input {:?}, weight {:?}", xv.shape(), wv.shape()));
        }
        let (c, co) = (xv.shape()[0], wv.shape()[0]);
        let pixels = xv.len() / c;
        let mut out = vec![T::zero(); co * pixels];
        for o in 0..co {
            let dst = &mut out[o * pixels..(o + 1) * pixels];
            for i in 0..c {
                let wgt = wv.data()[o * c + i];
                let src = &xv.data()[i * pixels..(i + 1) * pixels];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + wgt * s;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = co;
        let rg = self.rg(&[x, w]);
        self.push(Tensor::new(&shape, out)?, Op::Conv1x1 { x, w }, rg, "conv1x1")
    }

    /// Nearest-neighbour upsampling of `x[C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 3 || factor == 0 {
            return dim_err(format!("upsample_nearest: input {:?}, factor {factor}", v.shape()));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for y in 0..ho {
                let row = &v.data()[(ci * h + y / factor) * w..(ci * h + y / factor + 1) * w];
                out.extend((0..wo).map(|x| row[x / factor]));
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c, ho, wo], out)?, Op::Upsample(x, factor), rg, "upsample_nearest")
    }

    /// `[C,H,W]` -> `[C*s*s, H/s, W/s]`; output channel `(c*s + dy)*s + dx`.
    pub fn space_to_depth(&mut self, x: NodeId, s: usize) -> Result<NodeId> {
        let v = self.value(x);
        let t = space_to_depth(v, s)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SpaceToDepth(x, s), rg, "space_to_depth")
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: NodeId, s: usize) -> Result<NodeId> {
        let v = self.value(x);
        let t = depth_to_space(v, s)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::DepthToSpace(x, s), rg, "depth_to_space")
    }

    /// Rows of `table[V,E]` selected by `ids`, giving `[len(ids), E]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return dim_err(format!("embedding: table must be rank 2, got {:?}", tv.shape()));
        }
        let (vocab, e) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Data(format!("token id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(&tv.data()[id * e..(id + 1) * e]);
        }
        let rg = self.rg(&[table]);
        self.push(Tensor::new(&[ids.len(), e], data)?, Op::Embedding { table, ids: ids.to_vec() }, rg, "embedding")
    }

    /// Normalises each leading-axis slice to zero mean and unit variance,
    /// `(x - mean) / sqrt(var + eps)`.
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() < 2 {
            return dim_err(format!("instance_norm: expected [C, ..], got {:?}", v.shape()));
        }
        let c = v.shape()[0];
        let inner = v.len() / c.max(1);
        let eps = sc::<T>(eps);
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(c);
        for chunk in out.chunks_mut(inner.max(1)) {
            let n = sc::<T>(chunk.len() as f64);
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            chunk.iter_mut().for_each(|a| *a = (*a - mean) * inv);
            inv_std.push(inv);
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::InstanceNorm { x, inv_std }, rg, "instance_norm")
    }

    /// Pearson correlation of two equal-length vectors,
    /// `cov / (std_a * std_b + eps)`; zero when either has no variance.
    pub fn pearson(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.len() < 2 {
            return dim_err(format!("pearson: lengths {} and {}", av.len(), bv.len()));
        }
        let eps = sc::<T>(eps);
        let stats = PearsonStats::new(av.data(), bv.data(), eps);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(stats.rho), Op::Pearson { a, b, eps }, rg, "pearson")
    }

    #[cfg(test)]
    pub(super) fn poke(&mut self, node: usize, value: T) {
        self.nodes[node].value.data_mut()[0] = value;
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_node(node, &dy, &mut grads)?;
            }
            grads[i] = Some(dy);
        }
        let mut params: Vec<(ParamId, NodeId)> = self.params.iter().map(|(&p, &n)| (p, n)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], target: NodeId, g: Tensor<T>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, dy.data(), false, bv.data(), true, &mut da, false);
                    self.accum(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, av.data(), true, dy.data(), false, &mut db, false);
                    self.accum(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Transpose(x) => self.accum(grads, *x, transpose2(dy)),
            Op::Add(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, dy.clone());
                self.accum(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, zip_map(dy, bv, |g, v| g * v));
                self.accum(grads, *b, zip_map(dy, av, |g, v| g * v));
            }
            Op::Affine(x, s) => self.accum(grads, *x, dy.map(|g| g * *s)),
            Op::AddBias(x, b) => {
                self.accum(grads, *x, dy.clone());
                let n = self.value(*b).len();
                let mut db = vec![T::zero(); n];
                for row in dy.data().chunks(n) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                self.accum(grads, *b, Tensor::new(&[n], db)?);
            }
            Op::AddChannelBias(x, b) => {
                self.accum(grads, *x, dy.clone());
                let c = self.value(*b).len();
                let inner = (dy.len() / c.max(1)).max(1);
                let db = dy.data().chunks(inner).map(|ch| ch.iter().copied().sum()).collect();
                self.accum(grads, *b, Tensor::new(&[c], db)?);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let c = sv.len();
                let inner = (xv.len() / c.max(1)).max(1);
                let mut dx = dy.clone();
                let mut ds = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for ch in 0..c {
                    let range = ch * inner..(ch + 1) * inner;
                    let s = sv.data()[ch];
                    for (j, (d, &g)) in dx.data_mut()[range.clone()].iter_mut().zip(&dy.data()[range.clone()]).enumerate() {
                        *d = g * s;
                        ds[ch] = ds[ch] + g * xv.data()[range.start + j];
                        db[ch] = db[ch] + g;
                    }
                }
                self.accum(grads, *x, dx);
                self.accum(grads, *scale, Tensor::new(&[c], ds)?);
                self.accum(grads, *shift, Tensor::new(&[c], db)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &inp in inputs {
                    let shape = self.shape(inp).to_vec();
                    let chunk = shape[*axis] * inner;
                    if self.requires_grad(inp) {
                        let total = y.shape()[*axis] * inner;
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&dy.data()[base..base + chunk]);
                        }
                        self.accum(grads, inp, Tensor::new(&shape, d)?);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, dim, inner) = axis_split(xv.shape(), *axis);
                let len = y.shape()[*axis];
                let mut dx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner].copy_from_slice(&dy.data()[src..src + len * inner]);
                }
                self.accum(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accum(grads, *x, dy.clone().reshape(&shape)?);
            }
            Op::LeakyRelu(x, s) => {
                let g = zip_map(dy, self.value(*x), |g, v| if v > T::zero() { g } else { g * *s });
                self.accum(grads, *x, g);
            }
            Op::Sigmoid(x) => self.accum(grads, *x, zip_map(dy, y, |g, s| g * s * (T::one() - s))),
            Op::Tanh(x) => self.accum(grads, *x, zip_map(dy, y, |g, t| g * (T::one() - t * t))),
            Op::Exp(x) => self.accum(grads, *x, zip_map(dy, y, |g, e| g * e)),
            Op::Log(x) => {
                let floor = sc::<T>(LOG_FLOOR);
                let g = zip_map(dy, self.value(*x), |g, v| if v > floor { g / v } else { T::zero() });
                self.accum(grads, *x, g);
            }
            Op::Softplus(x) => {
                self.accum(grads, *x, zip_map(dy, self.value(*x), |g, v| g * kernels::sigmoid(v)));
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accum(grads, *x, Tensor::full(&shape, dy.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.item() / sc(xv.len() as f64);
                self.accum(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::MeanAxis(x, axis) => {
                let xv = self.value(*x);
                let (outer, dim, inner) = axis_split(xv.shape(), *axis);
                let n = sc::<T>(dim as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            dx.data_mut()[(o * dim + d) * inner + i] = dy.data()[o * inner + i] / n;
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::VarAxis(x, axis) => {
                let xv = self.value(*x);
                let (outer, dim, inner) = axis_split(xv.shape(), *axis);
                let n = sc::<T>(dim as f64);
                let two = sc::<T>(2.0);
                let mut dx = Tensor::zeros(xv.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |d: usize| (o * dim + d) * inner + i;
                        let mean = (0..dim).map(|d| xv.data()[idx(d)]).sum::<T>() / n;
                        let g = dy.data()[o * inner + i];
                        for d in 0..dim {
                            dx.data_mut()[idx(d)] = g * two * (xv.data()[idx(d)] - mean) / n;
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Softmax(x, axis) => {
                let (outer, dim, inner) = axis_split(y.shape(), *axis);
                let mut dx = Tensor::zeros(y.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |d: usize| (o * dim + d) * inner + i;
                        let dot: T = (0..dim).map(|d| y.data()[idx(d)] * dy.data()[idx(d)]).sum();
                        for d in 0..dim {
                            dx.data_mut()[idx(d)] = y.data()[idx(d)] * (dy.data()[idx(d)] - dot);
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (co, k) = (wv.shape()[0], wv.shape()[2]);
                let n = y.shape()[1] * y.shape()[2];
                let rows = c * k * k;
                if self.requires_grad(*w) {
                    let mut cols = vec![T::zero(); rows * n];
                    kernels::im2col(xv.data(), c, h, wd, k, *stride, *pad, &mut cols);
                    let mut dw = vec![T::zero(); co * rows];
                    T::gemm(co, n, rows, dy.data(), false, &cols, true, &mut dw, false);
                    self.accum(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                if self.requires_grad(*x) {
                    let mut dcols = vec![T::zero(); rows * n];
                    T::gemm(rows, co, n, wv.data(), true, dy.data(), false, &mut dcols, false);
                    let mut dx = vec![T::zero(); xv.len()];
                    kernels::col2im(&dcols, c, h, wd, k, *stride, *pad, &mut dx);
                    self.accum(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
            }
            Op::Conv1x1 { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (c, co) = (xv.shape()[0], wv.shape()[0]);
                let pixels = xv.len() / c;
                if self.requires_grad(*w) {
                    let mut dw = vec![T::zero(); co * c];
                    T::gemm(co, pixels, c, dy.data(), false, xv.data(), true, &mut dw, false);
                    self.accum(grads, *w, Tensor::new(wv.shape(), dw)?);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); c * pixels];
                    T::gemm(c, co, pixels, wv.data(), true, dy.data(), false, &mut dx, false);
                    self.accum(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
            }
            Op::Upsample(x, f) => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let wo = w * f;
                let mut dx = Tensor::zeros(xv.shape());
                for ci in 0..c {
                    for yy in 0..h * f {
                        for xx in 0..wo {
                            let d = &mut dx.data_mut()[(ci * h + yy / f) * w + xx / f];
                            *d = *d + dy.data()[(ci * h * f + yy) * wo + xx];
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::SpaceToDepth(x, s) => self.accum(grads, *x, depth_to_space(dy, *s)?),
            Op::DepthToSpace(x, s) => self.accum(grads, *x, space_to_depth(dy, *s)?),
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let e = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape());
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * e..(id + 1) * e];
                    for (d, &g) in dst.iter_mut().zip(&dy.data()[row * e..(row + 1) * e]) {
                        *d = *d + g;
                    }
                }
                self.accum(grads, *table, dt);
            }
            Op::InstanceNorm { x, inv_std } => {
                let c = inv_std.len();
                let inner = (y.len() / c.max(1)).max(1);
                let n = sc::<T>(inner as f64);
                let mut dx = Tensor::zeros(y.shape());
                for (ch, &inv) in inv_std.iter().enumerate() {
                    let r = ch * inner..(ch + 1) * inner;
                    let (yc, gc) = (&y.data()[r.clone()], &dy.data()[r.clone()]);
                    let mean_g = gc.iter().copied().sum::<T>() / n;
                    let mean_gy = gc.iter().zip(yc).map(|(&g, &v)| g * v).sum::<T>() / n;
                    for ((d, &g), &v) in dx.data_mut()[r].iter_mut().zip(gc).zip(yc) {
                        *d = inv * (g - mean_g - v * mean_gy);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Pearson { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let st = PearsonStats::new(av.data(), bv.data(), *eps);
                let g = dy.item();
                let (da, db) = st.grads(g);
                self.accum(grads, *a, Tensor::new(av.shape(), da)?);
                self.accum(grads, *b, Tensor::new(bv.shape(), db)?);
            }
        }
        Ok(())
    }
}

pub(crate) const LOG_FLOOR: f64 = 1e-12;

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn transpose2<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (v.shape()[0], v.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("transpose shape")
}

fn reduce_axis<T: Scalar>(v: &Tensor<T>, axis: usize, f: impl Fn(&[T]) -> T) -> (Vec<usize>, Vec<T>) {
    let (outer, dim, inner) = axis_split(v.shape(), axis);
    let mut shape = v.shape().to_vec();
    shape.remove(axis);
    let mut buf = vec![T::zero(); dim];
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            for (d, b) in buf.iter_mut().enumerate() {
                *b = v.data()[(o * dim + d) * inner + i];
            }
            out.push(f(&buf));
        }
    }
    (shape, out)
}

pub(crate) fn population_var<T: Scalar>(vals: &[T]) -> T {
    let n = sc::<T>(vals.len() as f64);
    let mean = vals.iter().copied().sum::<T>() / n;
    vals.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n
}

/// Moves each `s x s` pixel block into channels; see [`Graph::space_to_depth`].
pub fn space_to_depth<T: Scalar>(v: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if v.rank() != 3 || s == 0 || !v.shape()[1].is_multiple_of(s) || !v.shape()[2].is_multiple_of(s) {
        return dim_err(format!("space_to_depth: {:?} not divisible by {s}", v.shape()));
    }
    let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let (ho, wo) = (h / s, w / s);
    let mut out = vec![T::zero(); v.len()];
    for ci in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let oc = (ci * s + dy) * s + dx;
                for y in 0..ho {
                    for x in 0..wo {
                        out[(oc * ho + y) * wo + x] = v.data()[(ci * h + y * s + dy) * w + x * s + dx];
                    }
                }
            }
        }
    }
    Tensor::new(&[c * s * s, ho, wo], out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(v: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if v.rank() != 3 || s == 0 || !v.shape()[0].is_multiple_of(s * s) {
        return dim_err(format!("depth_to_space: {:?} channels not divisible by {}", v.shape(), s * s));
    }
    let (cs, ho, wo) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let c = cs / (s * s);
    let (h, w) = (ho * s, wo * s);
    let mut out = vec![T::zero(); v.len()];
    for ci in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let ic = (ci * s + dy) * s + dx;
                for y in 0..ho {
                    for x in 0..wo {
                        out[(ci * h + y * s + dy) * w + x * s + dx] = v.data()[(ic * ho + y) * wo + x];
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

struct PearsonStats<T> {
    ac: Vec<T>,
    bc: Vec<T>,
    saa: T,
    sbb: T,
    sab: T,
    denom: T,
    rho: T,
}

impl<T: Scalar> PearsonStats<T> {
    fn new(a: &[T], b: &[T], eps: T) -> Self {
        let n = sc::<T>(a.len() as f64);
        let ma = a.iter().copied().sum::<T>() / n;
        let mb = b.iter().copied().sum::<T>() / n;
        let ac: Vec<T> = a.iter().map(|&v| v - ma).collect();
        let bc: Vec<T> = b.iter().map(|&v| v - mb).collect();
        let saa = ac.iter().map(|&v| v * v).sum::<T>();
        let sbb = bc.iter().map(|&v| v * v).sum::<T>();
        let sab = ac.iter().zip(&bc).map(|(&x, &y)| x * y).sum::<T>();
        let denom = (saa * sbb).sqrt() + eps;
        Self { rho: sab / denom, ac, bc, saa, sbb, sab, denom }
    }

    fn grads(&self, g: T) -> (Vec<T>, Vec<T>) {
        let root = (self.saa * self.sbb).sqrt();
        let d2 = self.denom * self.denom;
        let side = |own: &[T], other: &[T], s_other: T| -> Vec<T> {
            own.iter()
                .zip(other)
                .map(|(&o, &p)| {
                    let stretch = if root > T::zero() { self.sab * s_other * o / (d2 * root) } else { T::zero() };
                    g * (p / self.denom - stretch)
                })
                .collect()
        };
        (side(&self.ac, &self.bc, self.sbb), side(&self.bc, &self.ac, self.saa))
    }
}
