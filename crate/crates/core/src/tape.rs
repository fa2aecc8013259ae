//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. A tape
//! supports exactly one backward call.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{self, ConvGeom, ConvSpec};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

/// Primitive kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar,
    Relu,
    Sigmoid,
    Tanh,
    Conv,
    Linear,
    BatchNorm,
    GlobalAvgPool,
    ChannelScale,
    Softmax,
    CrossEntropy,
    Sum,
    Reshape,
    Narrow,
    Concat,
    IndexSelect,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddScalar,
        OpKind::MulScalar,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Conv,
        OpKind::Linear,
        OpKind::BatchNorm,
        OpKind::GlobalAvgPool,
        OpKind::ChannelScale,
        OpKind::Softmax,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::Narrow,
        OpKind::Concat,
        OpKind::IndexSelect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Conv => "conv",
            OpKind::Linear => "linear",
            OpKind::BatchNorm => "batch_norm",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::ChannelScale => "channel_scale",
            OpKind::Softmax => "softmax",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::IndexSelect => "index_select",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Per-channel statistics of a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Biased (population) variance.
    pub var: Vec<E>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, E),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Conv {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    GlobalAvgPool(usize),
    ChannelScale(usize, usize),
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<E>,
    },
    Sum(usize),
    Reshape(usize),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    IndexSelect {
        input: usize,
        indices: Vec<usize>,
    },
}

impl<E> Op<E> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Conv { .. } => OpKind::Conv,
            Op::Linear { .. } => OpKind::Linear,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::ChannelScale(..) => OpKind::ChannelScale,
            Op::Softmax(..) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
        }
    }
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

pub struct Tape<E: Element = f32> {
    id: u64,
    nodes: Vec<Node<E>>,
    backward_done: bool,
    sign_fault: Option<OpKind>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<E: Element>(x: E) -> E {
    // Split by sign so exp never overflows.
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

/// (outer, extent, inner) sizes around `axis`.
fn split_at_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        dims[..axis].iter().product(),
        dims[axis],
        dims[axis + 1..].iter().product(),
    )
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
            sign_fault: None,
        }
    }

    /// Negates every gradient produced by `kind`'s backward rule. Used only
    /// to prove that the gradient checker detects broken rules.
    #[doc(hidden)]
    pub fn inject_sign_fault(&mut self, kind: OpKind) {
        self.sign_fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autograd("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a leaf. It is differentiated iff the tensor requires grad.
    pub fn leaf(&mut self, tensor: &Tensor<E>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor.detached(), Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<E>) -> Var {
        self.push(tensor.detached(), Op::Leaf, false)
    }

    /// Smallest distance of any recorded relu input from the kink at zero,
    /// or `None` when the tape holds no relu.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.to_f64_lossy().abs()))
            .min_by(f64::total_cmp)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<E>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn dims(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.dims())
    }

    /// Gradient of a leaf after [`Tape::backward`]. `None` when the leaf
    /// does not require grad or is unreachable from the root.
    pub fn grad(&self, v: Var) -> Result<Option<&[E]>> {
        Ok(self.nodes[self.idx(v)?].grad.as_deref())
    }

    fn binary_dims(&self, op: &'static str, a: usize, b: usize) -> Result<Vec<usize>> {
        let (da, db) = (self.nodes[a].value.dims(), self.nodes[b].value.dims());
        if da == db {
            return Ok(da.to_vec());
        }
        if self.nodes[b].value.numel() == 1 {
            return Ok(da.to_vec());
        }
        if self.nodes[a].value.numel() == 1 {
            return Ok(db.to_vec());
        }
        Err(Error::shape(op, format!("{da:?} vs {db:?}")))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(E, E) -> E, op: fn(usize, usize) -> Op<E>, name: &'static str) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let dims = self.binary_dims(name, ia, ib)?;
        let (va, vb) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let n = dims.iter().product::<usize>();
        let pick = |v: &[E], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let data = (0..n).map(|i| f(pick(va, i), pick(vb, i))).collect();
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(Tensor::from_parts(dims, data), op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul, "mul")
    }

    fn unary(&mut self, a: Var, f: impl Fn(E) -> E, op: Op<E>) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let out = Tensor::from_parts(v.dims().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(ia);
        Ok(self.push(out, op, rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, |x| x + c, Op::AddScalar(ia))
    }

    pub fn mul_scalar(&mut self, a: Var, c: E) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, |x| x * c, Op::MulScalar(ia, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, |x| if x > E::zero() { x } else { E::zero() }, Op::Relu(ia))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, sigmoid, Op::Sigmoid(ia))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        self.unary(a, |x| x.tanh(), Op::Tanh(ia))
    }

    fn conv_impl(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom, one_d: bool) -> Result<Var> {
        let (ii, iw) = (self.idx(input)?, self.idx(weight)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        if let Some(ib) = ib {
            let bd = self.nodes[ib].value.dims();
            if bd != [geom.cout] {
                return Err(Error::shape("conv", format!("bias must be [{}], got {bd:?}", geom.cout)));
            }
        }
        let out = conv::forward(
            &geom,
            self.nodes[ii].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|b| self.nodes[b].value.data()),
        );
        let rg = self.rg(ii) || self.rg(iw) || ib.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts(geom.output_dims(one_d), out);
        Ok(self.push(
            value,
            Op::Conv {
                input: ii,
                weight: iw,
                bias: ib,
                geom,
            },
            rg,
        ))
    }

    /// `input [N,Cin,H,W]`, `weight [Cout,Cin/groups,k,k]`, `bias [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::conv2d(self.dims(input)?, self.dims(weight)?, &spec)?;
        self.conv_impl(input, weight, bias, geom, false)
    }

    /// `input [N,C,L]`, `weight [Cout,C/groups,k]`, `bias [Cout]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::conv1d(self.dims(input)?, self.dims(weight)?, &spec)?;
        self.conv_impl(input, weight, bias, geom, true)
    }

    /// Affine map `input [N,Fin] -> [N,Fout]` with `weight [Fout,Fin]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (ii, iw) = (self.idx(input)?, self.idx(weight)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let (&[n, fin], &[fout, win]) = (self.nodes[ii].value.dims(), self.nodes[iw].value.dims()) else {
            return Err(Error::shape(
                "linear",
                format!(
                    "input must be [N,F] and weight [Fout,Fin], got {:?} and {:?}",
                    self.nodes[ii].value.dims(),
                    self.nodes[iw].value.dims()
                ),
            ));
        };
        if fin != win {
            return Err(Error::shape("linear", format!("input width {fin} vs weight width {win}")));
        }
        if let Some(ib) = ib {
            let bd = self.nodes[ib].value.dims();
            if bd != [fout] {
                return Err(Error::shape("linear", format!("bias must be [{fout}], got {bd:?}")));
            }
        }
        let mut out = vec![E::zero(); n * fout];
        E::gemm(
            false,
            true,
            n,
            fout,
            fin,
            E::one(),
            self.nodes[ii].value.data(),
            self.nodes[iw].value.data(),
            E::zero(),
            &mut out,
        );
        if let Some(ib) = ib {
            let b = self.nodes[ib].value.data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(b).for_each(|(o, &bv)| *o = *o + bv);
            }
        }
        let rg = self.rg(ii) || self.rg(iw) || ib.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, fout], out),
            Op::Linear {
                input: ii,
                weight: iw,
                bias: ib,
            },
            rg,
        ))
    }

    fn bn_check(&self, x: usize, gamma: usize, beta: usize) -> Result<(usize, usize, usize)> {
        let d = self.nodes[x].value.dims();
        if d.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input must be [N,C,...], got {d:?}")));
        }
        let (n, c) = (d[0], d[1]);
        let spatial = d[2..].iter().product::<usize>();
        for (what, i) in [("gamma", gamma), ("beta", beta)] {
            let pd = self.nodes[i].value.dims();
            if pd != [c] {
                return Err(Error::shape("batch_norm", format!("{what} must be [{c}], got {pd:?}")));
            }
        }
        Ok((n, c, spatial))
    }

    fn bn_push(&mut self, x: usize, gamma: usize, beta: usize, mean: Vec<E>, inv_std: Vec<E>, train: bool) -> Var {
        let (n, c, spatial) = {
            let d = self.nodes[x].value.dims();
            (d[0], d[1], d[2..].iter().product::<usize>())
        };
        let xv = self.nodes[x].value.data();
        let (g, b) = (self.nodes[gamma].value.data(), self.nodes[beta].value.data());
        let mut out = vec![E::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * spatial;
                for s in 0..spatial {
                    let xh = (xv[off + s] - mean[ci]) * inv_std[ci];
                    out[off + s] = g[ci] * xh + b[ci];
                }
            }
        }
        let dims = self.nodes[x].value.dims().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_parts(dims, out),
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            rg,
        )
    }

    /// Batch norm over `[N,C,...]` using the statistics of this batch.
    /// Returns the statistics so the caller can update running estimates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: E) -> Result<(Var, BatchStats<E>)> {
        let (x, g, b) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let (n, c, spatial) = self.bn_check(x, g, b)?;
        let count = n * spatial;
        if count < 2 {
            return Err(Error::Config(format!(
                "batch_norm in train mode needs at least 2 values per channel, got {count}"
            )));
        }
        let xv = self.nodes[x].value.data();
        let mut mean = Vec::with_capacity(c);
        let mut var = Vec::with_capacity(c);
        for ci in 0..c {
            let vals = || (0..n).flat_map(move |ni| xv[(ni * c + ci) * spatial..][..spatial].iter());
            let m = vals().map(|v| v.to_f64_lossy()).sum::<f64>() / count as f64;
            let s2 = vals().map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>() / count as f64;
            mean.push(E::from_f64_lossy(m));
            var.push(E::from_f64_lossy(s2));
        }
        let inv_std = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let out = self.bn_push(x, g, b, mean.clone(), inv_std, true);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch norm with fixed statistics, `gamma (x - mean) / sqrt(var + eps) + beta`.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[E], var: &[E], eps: E) -> Result<Var> {
        let (x, g, b) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let (_, c, _) = self.bn_check(x, g, b)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("running statistics must have {c} entries")));
        }
        let inv_std = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        Ok(self.bn_push(x, g, b, mean.to_vec(), inv_std, false))
    }

    /// Spatial mean: `[N,C,...] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.idx(input)?;
        let d = self.nodes[x].value.dims();
        if d.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("input must be [N,C,...], got {d:?}")));
        }
        let (n, c) = (d[0], d[1]);
        let spatial = d[2..].iter().product::<usize>();
        let out = self.nodes[x]
            .value
            .data()
            .chunks(spatial)
            .map(|ch| E::from_f64_lossy(ch.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / spatial as f64))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x), rg))
    }

    /// Scales each channel of `input [N,C,...]` by `scale [N,C]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let (x, s) = (self.idx(input)?, self.idx(scale)?);
        let (xd, sd) = (self.nodes[x].value.dims(), self.nodes[s].value.dims());
        if xd.len() < 3 || sd != &xd[..2] {
            return Err(Error::shape("channel_scale", format!("input {xd:?} with scale {sd:?}")));
        }
        let spatial = xd[2..].iter().product::<usize>();
        let sv = self.nodes[s].value.data();
        let out = self.nodes[x]
            .value
            .data()
            .chunks(spatial)
            .zip(sv)
            .flat_map(|(ch, &k)| ch.iter().map(move |&v| v * k))
            .collect();
        let dims = xd.to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::from_parts(dims, out), Op::ChannelScale(x, s), rg))
    }

    /// Numerically stabilised softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.idx(input)?;
        let v = &self.nodes[x].value;
        let k = *v.dims().last().expect("rank >= 1");
        let out = v.data().chunks(k).flat_map(softmax_row).collect();
        let dims = v.dims().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(dims, out), Op::Softmax(x), rg))
    }

    /// Sum over rows of `-ln softmax(logits)[target]` for `logits [N,K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.idx(logits)?;
        let &[n, k] = self.nodes[x].value.dims() else {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be [N,K], got {:?}", self.nodes[x].value.dims()),
            ));
        };
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{n} rows but {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Range(format!("target class {t} with {k} classes")));
        }
        let mut loss = 0.0f64;
        let mut probs = Vec::with_capacity(n * k);
        for (row, &t) in self.nodes[x].value.data().chunks(k).zip(targets) {
            let m = row.iter().fold(E::neg_infinity(), |a, &b| a.max(b)).to_f64_lossy();
            let lse = m + row.iter().map(|v| (v.to_f64_lossy() - m).exp()).sum::<f64>().ln();
            loss += lse - row[t].to_f64_lossy();
            probs.extend(softmax_row(row));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![E::from_f64_lossy(loss)]),
            Op::CrossEntropy {
                logits: x,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let x = self.idx(input)?;
        let s = self.nodes[x].value.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![1], vec![E::from_f64_lossy(s)]), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input)?.numel();
        let s = self.sum(input)?;
        self.mul_scalar(s, E::from_f64_lossy(1.0 / n as f64))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let x = self.idx(input)?;
        let value = self.nodes[x].value.reshape(dims)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.idx(input)?;
        let d = self.nodes[x].value.dims();
        if axis >= d.len() || len == 0 || start + len > d[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {d:?}", start + len)));
        }
        let (outer, extent, inner) = split_at_axis(d, axis);
        let src = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * extent + start) * inner..][..len * inner]);
        }
        let mut dims = d.to_vec();
        dims[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(dims, out), Op::Narrow { input: x, axis, start }, rg))
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let d0 = self.nodes[first].value.dims().to_vec();
        if axis >= d0.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {d0:?}")));
        }
        let mut total = 0;
        for &i in &idx {
            let d = self.nodes[i].value.dims();
            let agrees = d.len() == d0.len() && d.iter().zip(&d0).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !agrees {
                return Err(Error::shape("concat", format!("{d:?} vs {d0:?} on axis {axis}")));
            }
            total += d[axis];
        }
        let (outer, _, inner) = split_at_axis(&d0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let ext = self.nodes[i].value.dims()[axis];
                out.extend_from_slice(&self.nodes[i].value.data()[o * ext * inner..][..ext * inner]);
            }
        }
        let mut dims = d0;
        dims[axis] = total;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(Tensor::from_parts(dims, out), Op::Concat { inputs: idx, axis }, rg))
    }

    /// Gathers entries along axis 0.
    pub fn index_select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.idx(input)?;
        let d = self.nodes[x].value.dims();
        if indices.is_empty() {
            return Err(Error::shape("index_select", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= d[0]) {
            return Err(Error::Range(format!("index {bad} on axis of extent {}", d[0])));
        }
        let inner = d[1..].iter().product::<usize>();
        let src = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..][..inner]);
        }
        let mut dims = d.to_vec();
        dims[0] = indices.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(dims, out),
            Op::IndexSelect {
                input: x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates d(root)/d(node) to every node reachable from `root` and
    /// stores the result on leaves that require grad.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.idx(root)?;
        if self.backward_done {
            return Err(Error::Autograd("backward already ran on this tape".into()));
        }
        if self.nodes[r].value.numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward root must be a scalar, got dims {:?}",
                self.nodes[r].value.dims()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(r + 1);
        grads.resize_with(r + 1, || None);
        grads[r] = Some(vec![E::one()]);
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let mut sink = Sink {
                nodes: &self.nodes,
                grads: &mut grads,
                flip: self.sign_fault == Some(node.op.kind()),
            };
            backward_rule(&node.op, &node.value, &g, &mut sink);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = g;
            }
        }
        Ok(())
    }
}

fn softmax_row<E: Element>(row: &[E]) -> Vec<E> {
    let m = row.iter().fold(E::neg_infinity(), |a, &b| a.max(b));
    let ex: Vec<f64> = row.iter().map(|&v| (v - m).to_f64_lossy().exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.into_iter().map(|e| E::from_f64_lossy(e / z)).collect()
}

struct Sink<'a, E: Element> {
    nodes: &'a [Node<E>],
    grads: &'a mut [Option<Vec<E>>],
    flip: bool,
}

impl<'a, E: Element> Sink<'a, E> {
    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn value(&self, i: usize) -> &'a Tensor<E> {
        &self.nodes[i].value
    }

    fn add(&mut self, i: usize, mut delta: Vec<E>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        if self.flip {
            delta.iter_mut().for_each(|v| *v = -*v);
        }
        match &mut self.grads[i] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a = *a + *d),
            slot => *slot = Some(delta),
        }
    }

    /// Adds an output-shaped gradient to operand `i`, reducing to a scalar
    /// when the operand was broadcast.
    fn add_broadcast(&mut self, i: usize, delta: Vec<E>) {
        if self.value(i).numel() == 1 && delta.len() != 1 {
            let s = delta.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            self.add(i, vec![E::from_f64_lossy(s)]);
        } else {
            self.add(i, delta);
        }
    }
}

fn broadcast_get<E: Copy>(v: &[E], i: usize) -> E {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn backward_rule<E: Element>(op: &Op<E>, out: &Tensor<E>, g: &[E], sink: &mut Sink<'_, E>) {
    match op {
        Op::Leaf => unreachable!("leaves handled by caller"),
        Op::Add(a, b) => {
            sink.add_broadcast(*a, g.to_vec());
            sink.add_broadcast(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            sink.add_broadcast(*a, g.to_vec());
            sink.add_broadcast(*b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (sink.value(*a).data().to_vec(), sink.value(*b).data().to_vec());
            if sink.wants(*a) {
                let d = g.iter().enumerate().map(|(i, &gv)| gv * broadcast_get(&vb, i)).collect();
                sink.add_broadcast(*a, d);
            }
            if sink.wants(*b) {
                let d = g.iter().enumerate().map(|(i, &gv)| gv * broadcast_get(&va, i)).collect();
                sink.add_broadcast(*b, d);
            }
        }
        Op::AddScalar(a) => sink.add(*a, g.to_vec()),
        Op::MulScalar(a, c) => sink.add(*a, g.iter().map(|&v| v * *c).collect()),
        Op::Relu(a) => {
            let x = sink.value(*a).data();
            let d = g
                .iter()
                .zip(x)
                .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                .collect();
            sink.add(*a, d);
        }
        Op::Sigmoid(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(&gv, &y)| gv * y * (E::one() - y))
                .collect();
            sink.add(*a, d);
        }
        Op::Tanh(a) => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(&gv, &y)| gv * (E::one() - y * y))
                .collect();
            sink.add(*a, d);
        }
        Op::Conv {
            input,
            weight,
            bias,
            geom,
        } => {
            let want = (sink.wants(*input), sink.wants(*weight), bias.is_some_and(|b| sink.wants(b)));
            let grads = conv::backward(geom, sink.value(*input).data(), sink.value(*weight).data(), g, want);
            if let Some(d) = grads.input {
                sink.add(*input, d);
            }
            if let Some(d) = grads.weight {
                sink.add(*weight, d);
            }
            if let (Some(b), Some(d)) = (bias, grads.bias) {
                sink.add(*b, d);
            }
        }
        Op::Linear { input, weight, bias } => {
            let (xv, wv) = (sink.value(*input), sink.value(*weight));
            let (n, fin) = (xv.dims()[0], xv.dims()[1]);
            let fout = wv.dims()[0];
            if sink.wants(*input) {
                let mut d = vec![E::zero(); n * fin];
                E::gemm(false, false, n, fin, fout, E::one(), g, wv.data(), E::zero(), &mut d);
                sink.add(*input, d);
            }
            if sink.wants(*weight) {
                let mut d = vec![E::zero(); fout * fin];
                E::gemm(true, false, fout, fin, n, E::one(), g, xv.data(), E::zero(), &mut d);
                sink.add(*weight, d);
            }
            if let Some(b) = bias {
                let mut d = vec![E::zero(); fout];
                for row in g.chunks(fout) {
                    d.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                sink.add(*b, d);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            mean,
            inv_std,
            train,
        } => {
            let xv = sink.value(*input);
            let d = xv.dims();
            let (n, c) = (d[0], d[1]);
            let spatial = d[2..].iter().product::<usize>();
            let x = xv.data().to_vec();
            let gam = sink.value(*gamma).data().to_vec();
            let count = (n * spatial) as f64;
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            let mut dx = vec![E::zero(); x.len()];
            for ci in 0..c {
                let offs = (0..n).map(|ni| (ni * c + ci) * spatial);
                let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                for off in offs.clone() {
                    for s in 0..spatial {
                        let xh = ((x[off + s] - mean[ci]) * inv_std[ci]).to_f64_lossy();
                        let gv = g[off + s].to_f64_lossy();
                        sg += gv;
                        sgx += gv * xh;
                    }
                }
                dbeta[ci] = E::from_f64_lossy(sg);
                dgamma[ci] = E::from_f64_lossy(sgx);
                let (gm, is) = (gam[ci].to_f64_lossy(), inv_std[ci].to_f64_lossy());
                for off in offs {
                    for s in 0..spatial {
                        let gv = g[off + s].to_f64_lossy();
                        let v = if *train {
                            let xh = ((x[off + s] - mean[ci]) * inv_std[ci]).to_f64_lossy();
                            gm * is * (gv - sg / count - xh * sgx / count)
                        } else {
                            gm * is * gv
                        };
                        dx[off + s] = E::from_f64_lossy(v);
                    }
                }
            }
            sink.add(*input, dx);
            sink.add(*gamma, dgamma);
            sink.add(*beta, dbeta);
        }
        Op::GlobalAvgPool(a) => {
            let d = sink.value(*a).dims();
            let spatial = d[2..].iter().product::<usize>();
            let inv = E::from_f64_lossy(1.0 / spatial as f64);
            let delta = g
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv * inv, spatial))
                .collect();
            sink.add(*a, delta);
        }
        Op::ChannelScale(x, s) => {
            let xv = sink.value(*x).data().to_vec();
            let sv = sink.value(*s).data().to_vec();
            let spatial = xv.len() / sv.len();
            if sink.wants(*x) {
                let d = g
                    .chunks(spatial)
                    .zip(&sv)
                    .flat_map(|(ch, &k)| ch.iter().map(move |&v| v * k))
                    .collect();
                sink.add(*x, d);
            }
            if sink.wants(*s) {
                let d = g
                    .chunks(spatial)
                    .zip(xv.chunks(spatial))
                    .map(|(gc, xc)| {
                        E::from_f64_lossy(gc.iter().zip(xc).map(|(a, b)| (*a * *b).to_f64_lossy()).sum())
                    })
                    .collect();
                sink.add(*s, d);
            }
        }
        Op::Softmax(a) => {
            let k = *out.dims().last().expect("rank >= 1");
            let d = g
                .chunks(k)
                .zip(out.data().chunks(k))
                .flat_map(|(gr, yr)| {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| (*a * *b).to_f64_lossy()).sum();
                    let dot = E::from_f64_lossy(dot);
                    gr.iter().zip(yr).map(move |(&gv, &y)| y * (gv - dot)).collect::<Vec<_>>()
                })
                .collect();
            sink.add(*a, d);
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let k = probs.len() / targets.len();
            let mut d: Vec<E> = probs.iter().map(|&p| p * g[0]).collect();
            for (row, &t) in targets.iter().enumerate() {
                d[row * k + t] = d[row * k + t] - g[0];
            }
            sink.add(*logits, d);
        }
        Op::Sum(a) => {
            let n = sink.value(*a).numel();
            sink.add(*a, vec![g[0]; n]);
        }
        Op::Reshape(a) => sink.add(*a, g.to_vec()),
        Op::Narrow { input, axis, start } => {
            let d = sink.value(*input).dims();
            let (outer, extent, inner) = split_at_axis(d, *axis);
            let len = out.dims()[*axis];
            let mut delta = vec![E::zero(); outer * extent * inner];
            for o in 0..outer {
                delta[(o * extent + start) * inner..][..len * inner].copy_from_slice(&g[o * len * inner..][..len * inner]);
            }
            sink.add(*input, delta);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_at_axis(out.dims(), *axis);
            let mut offset = 0;
            for &i in inputs {
                let ext = sink.value(i).dims()[*axis];
                if sink.wants(i) {
                    let mut delta = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        delta.extend_from_slice(&g[(o * total + offset) * inner..][..ext * inner]);
                    }
                    sink.add(i, delta);
                }
                offset += ext;
            }
        }
        Op::IndexSelect { input, indices } => {
            let n = sink.value(*input).numel();
            let inner = n / sink.value(*input).dims()[0];
            let mut delta = vec![E::zero(); n];
            for (row, &i) in indices.iter().enumerate() {
                let dst = &mut delta[i * inner..][..inner];
                dst.iter_mut()
                    .zip(&g[row * inner..][..inner])
                    .for_each(|(a, &b)| *a = *a + b);
            }
            sink.add(*input, delta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 5.0]).with_requires_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 5.0]).with_requires_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn fan_out_sums_contributions() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::scalar(3.0).unwrap().with_requires_grad());
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[2.0]);
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::scalar(1.0).unwrap().with_requires_grad());
        let y = tape.mul_scalar(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Autograd(_))));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(&[2]).unwrap().with_requires_grad());
        assert!(matches!(tape.backward(x), Err(Error::Autograd(_))));
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let x = a.leaf(&Tensor::scalar(1.0).unwrap());
        b.leaf(&Tensor::scalar(1.0).unwrap());
        assert!(matches!(b.backward(x), Err(Error::Autograd(_))));
        assert!(b.relu(x).is_err());
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[0.5]);
        let h = tape.constant(t(&[1], &[0.5]));
        let th = tape.tanh(h).unwrap();
        assert!((tape.value(th).unwrap().data()[0] - 0.462117).abs() < 1e-6);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[0.0, 1.0]).with_requires_grad());
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3, 2]).unwrap());
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let s = tape.constant(Tensor::scalar(2.0).unwrap());
        assert!(tape.mul(a, s).is_ok());
    }

    #[test]
    fn softmax_cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let eq = tape.constant(t(&[1, 3], &[0.7, 0.7, 0.7]));
        let l = tape.cross_entropy(eq, &[2]).unwrap();
        assert!((tape.value(l).unwrap().data()[0] - 3f64.ln()).abs() < 1e-12);
        let peaked = tape.constant(t(&[1, 3], &[10.0, -10.0, -10.0]));
        let l = tape.cross_entropy(peaked, &[0]).unwrap();
        assert!(tape.value(l).unwrap().data()[0] < 1e-6);
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!((tape.value(l).unwrap().data()[0] - 1.407606).abs() < 1e-6);
        assert!(matches!(tape.cross_entropy(x, &[3]), Err(Error::Range(_))));
    }

    #[test]
    fn narrow_concat_index_select_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn(&[2, 3, 2], |i| i as f64).unwrap().with_requires_grad());
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 2).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).unwrap(), tape.value(x).unwrap());
        let r = tape.index_select(c, &[1, 1, 0]).unwrap();
        assert_eq!(tape.dims(r).unwrap(), &[3, 3, 2]);
        assert_eq!(&tape.value(r).unwrap().data()[..6], &[6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap().unwrap();
        assert_eq!(&g[..6], &[1.0; 6]);
        assert_eq!(&g[6..], &[2.0; 6]);
    }

    #[test]
    fn batch_norm_single_value_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap());
        let g = tape.constant(Tensor::full(&[2], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert!(matches!(tape.batch_norm_train(x, g, b, 1e-5), Err(Error::Config(_))));
        assert!(tape.batch_norm_eval(x, g, b, &[0.0; 2], &[1.0; 2], 1e-5).is_ok());
    }

    #[test]
    fn op_kind_names_roundtrip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
