use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamStore};
use super::tensor::{Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Input data, detached copies, and results computed only from such.
    Constant,
    /// Differentiable leaf that is not a stored parameter.
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    Exp(Var),
    MeanBatch(Var),
    SumLast(Var),
    LogSoftmax(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
}

/// Primitive kinds that leave a record on the tape, for inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    Relu,
    Log,
    Exp,
    MeanBatch,
    SumLast,
    LogSoftmax,
    Conv2d,
    GlobalAvgPool,
    Gather,
    Reshape,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so node
/// indices are already a topological order for the backward sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<ParamId, Var>,
}

/// Result of one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients<F = f32> {
    params: BTreeMap<ParamId, Tensor<F>>,
    leaves: HashMap<usize, Tensor<F>>,
}

impl<F: Element> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Tensor<F>)> {
        self.params.iter()
    }

    /// Parameters that received a gradient.
    pub fn touched(&self) -> Vec<ParamId> {
        self.params.keys().copied().collect()
    }

    /// Gradient of a differentiable leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&v.0)
    }
}

fn f<F: Element>(v: f64) -> F {
    F::from_f64_lossy(v)
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameters read into this tape so far.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.keys().copied().collect()
    }

    /// Kinds of the primitive applications recorded for backward.
    pub fn records(&self) -> Vec<OpKind> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Constant | Op::Leaf | Op::Param(_) => None,
                Op::MatMul(..) => Some(OpKind::MatMul),
                Op::Add(..) => Some(OpKind::Add),
                Op::AddRow(..) => Some(OpKind::AddRow),
                Op::Sub(..) => Some(OpKind::Sub),
                Op::Mul(..) => Some(OpKind::Mul),
                Op::Scale(..) => Some(OpKind::Scale),
                Op::Relu(..) => Some(OpKind::Relu),
                Op::Log(..) => Some(OpKind::Log),
                Op::Exp(..) => Some(OpKind::Exp),
                Op::MeanBatch(..) => Some(OpKind::MeanBatch),
                Op::SumLast(..) => Some(OpKind::SumLast),
                Op::LogSoftmax(..) => Some(OpKind::LogSoftmax),
                Op::Conv2d { .. } => Some(OpKind::Conv2d),
                Op::GlobalAvgPool(..) => Some(OpKind::GlobalAvgPool),
                Op::Gather(..) => Some(OpKind::Gather),
                Op::Reshape(..) => Some(OpKind::Reshape),
            })
            .collect()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-differentiable input.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Reads a parameter. Repeated reads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let value = store.value(id)?.clone();
        let v = self.push(value, Op::Param(id), true);
        self.params.insert(id, v);
        Ok(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        self.check(v)?;
        let value = self.nodes[v.0].value.clone();
        Ok(self.input(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_kernel(av.data(), bv.data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        fun: impl Fn(F, F) -> F,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| fun(*x, *y))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a[N, M] + row[M]`, broadcasting the row over the leading axis.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let (av, rv) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if av.rank() != 2 || rv.rank() != 1 || av.shape()[1] != rv.shape()[0] {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", av.shape(), rv.shape()),
            ));
        }
        let m = rv.len();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(m) {
            for (x, r) in chunk.iter_mut().zip(rv.data()) {
                *x = *x + *r;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    fn unary(&mut self, a: Var, op: Op, fun: impl Fn(F) -> F) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|x| fun(*x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, op, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let sf: F = f(s);
        self.unary(a, Op::Scale(a, s), move |x| x * sf)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > F::zero() { x } else { F::zero() })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    /// Mean over the leading (batch) axis: `[N, ...] -> [...]`.
    pub fn mean_batch(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        if av.rank() == 0 {
            return Err(shape_err("mean_batch", "scalar input"));
        }
        let n = av.shape()[0];
        let stride = av.len() / n;
        let mut acc = vec![0.0f64; stride];
        for row in av.data().chunks_exact(stride) {
            for (s, x) in acc.iter_mut().zip(row) {
                *s += x.as_f64();
            }
        }
        let data = acc.into_iter().map(|s| f(s / n as f64)).collect();
        let value = Tensor::new(av.shape()[1..].to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::MeanBatch(a), rg))
    }

    /// Sum over the last (class) axis: `[..., C] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        if av.rank() == 0 {
            return Err(shape_err("sum_last", "scalar input"));
        }
        let c = *av.shape().last().unwrap();
        let data = av
            .data()
            .chunks_exact(c)
            .map(|row| f(row.iter().map(|x| x.as_f64()).sum::<f64>()))
            .collect();
        let value = Tensor::new(av.shape()[..av.rank() - 1].to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SumLast(a), rg))
    }

    /// Log-softmax over the last axis, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        if av.rank() == 0 {
            return Err(shape_err("log_softmax", "scalar input"));
        }
        let c = *av.shape().last().unwrap();
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks_exact(c) {
            let m = row
                .iter()
                .map(|x| x.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| f::<F>(x.as_f64() - lse)));
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// `out[i] = a[i, labels[i]]` for `a: [N, C]`.
    pub fn gather(&mut self, a: Var, labels: &[usize]) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        if av.rank() != 2 || av.shape()[0] != labels.len() {
            return Err(shape_err(
                "gather",
                format!("{:?} with {} labels", av.shape(), labels.len()),
            ));
        }
        let c = av.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let data = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| av.data()[i * c + l])
            .collect();
        let value = Tensor::new(vec![labels.len()], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Gather(a, labels.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.0]
            .value
            .reshaped(shape)
            .map_err(|_| shape_err("reshape", format!("{:?} -> {:?}", self.nodes[a.0].value.shape(), shape)))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// 2D convolution. `input: [N, C, H, W]`, `weight: [O, C, KH, KW]`,
    /// `bias: [O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}, stride {}", x.shape(), w.shape(), stride),
            ));
        }
        let g = ConvGeom::new(x.shape(), w.shape(), stride, padding)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {:?} larger than padded input {:?}", w.shape(), x.shape())))?;
        let bias_data = match bias {
            Some(b) => {
                let bv = &self.nodes[b.0].value;
                if bv.shape() != [g.o] {
                    return Err(shape_err("conv2d", format!("bias {:?} for {} filters", bv.shape(), g.o)));
                }
                Some(bv.data().to_vec())
            }
            None => None,
        };
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![F::zero(); g.n * g.o * g.oh * g.ow];
        for n in 0..g.n {
            for o in 0..g.o {
                let b0 = bias_data.as_ref().map_or(0.0, |b| b[o].as_f64());
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = b0;
                        for c in 0..g.c {
                            for ky in 0..g.kh {
                                let Some(iy) = g.in_y(oy, ky) else { continue };
                                for kx in 0..g.kw {
                                    let Some(ix) = g.in_x(ox, kx) else { continue };
                                    acc += xd[g.x_idx(n, c, iy, ix)].as_f64()
                                        * wd[g.w_idx(o, c, ky, kx)].as_f64();
                                }
                            }
                        }
                        out[g.y_idx(n, o, oy, ox)] = f(acc);
                    }
                }
            }
        }
        let value = Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        if av.rank() != 4 {
            return Err(shape_err("global_avg_pool", format!("{:?}", av.shape())));
        }
        let (n, c) = (av.shape()[0], av.shape()[1]);
        let hw = av.shape()[2] * av.shape()[3];
        let data = av
            .data()
            .chunks_exact(hw)
            .map(|plane| f(plane.iter().map(|x| x.as_f64()).sum::<f64>() / hw as f64))
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::GlobalAvgPool(a), rg))
    }

    /// Propagates `d loss / d node` back to every differentiable leaf and
    /// parameter reachable from `loss`. Each node is visited at most once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: HashMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    out.leaves
                        .insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    out.params
                        .insert(*id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.requires_grad(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![F::zero(); m * k];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bv.data()[p * n..(p + 1) * n];
                                let s: f64 = grow
                                    .iter()
                                    .zip(brow)
                                    .map(|(x, y)| x.as_f64() * y.as_f64())
                                    .sum();
                                da[r * k + p] = f(s);
                            }
                        }
                        accumulate(&mut grads, &self.nodes, *a, da);
                    }
                    if self.requires_grad(*b) {
                        // dB = Aᵀ · G
                        let mut acc = vec![0.0f64; k * n];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let x = av.data()[r * k + p].as_f64();
                                if x == 0.0 {
                                    continue;
                                }
                                for (dst, gv) in acc[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *dst += x * gv.as_f64();
                                }
                            }
                        }
                        accumulate(&mut grads, &self.nodes, *b, acc.into_iter().map(f).collect());
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, &self.nodes, *a, g.clone());
                    accumulate(&mut grads, &self.nodes, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, &self.nodes, *a, g.clone());
                    accumulate(&mut grads, &self.nodes, *b, g.iter().map(|x| -*x).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = g.iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
                    let gb = g.iter().zip(av.data()).map(|(x, y)| *x * *y).collect();
                    accumulate(&mut grads, &self.nodes, *a, ga);
                    accumulate(&mut grads, &self.nodes, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let m = self.nodes[row.0].value.len();
                    if self.requires_grad(*row) {
                        let mut acc = vec![0.0f64; m];
                        for chunk in g.chunks_exact(m) {
                            for (s, x) in acc.iter_mut().zip(chunk) {
                                *s += x.as_f64();
                            }
                        }
                        accumulate(&mut grads, &self.nodes, *row, acc.into_iter().map(f).collect());
                    }
                    accumulate(&mut grads, &self.nodes, *a, g);
                }
                Op::Scale(a, s) => {
                    let sf: F = f(*s);
                    accumulate(&mut grads, &self.nodes, *a, g.iter().map(|x| *x * sf).collect());
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = g
                        .iter()
                        .zip(av.data())
                        .map(|(x, v)| if *v > F::zero() { *x } else { F::zero() })
                        .collect();
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = g.iter().zip(av.data()).map(|(x, v)| *x / *v).collect();
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(x, y)| *x * *y)
                        .collect();
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::MeanBatch(a) => {
                    let av = &self.nodes[a.0].value;
                    let n = av.shape()[0];
                    let inv: F = f(1.0 / n as f64);
                    let mut ga = Vec::with_capacity(av.len());
                    for _ in 0..n {
                        ga.extend(g.iter().map(|x| *x * inv));
                    }
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::SumLast(a) => {
                    let av = &self.nodes[a.0].value;
                    let c = *av.shape().last().unwrap();
                    let mut ga = Vec::with_capacity(av.len());
                    for x in &g {
                        ga.extend(std::iter::repeat(*x).take(c));
                    }
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    // dx = g - softmax * sum(g), row-wise.
                    let c = *node.value.shape().last().unwrap();
                    let mut ga = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks_exact(c).zip(node.value.data().chunks_exact(c)) {
                        let gs: f64 = grow.iter().map(|x| x.as_f64()).sum();
                        ga.extend(
                            grow.iter()
                                .zip(yrow)
                                .map(|(gv, y)| f::<F>(gv.as_f64() - y.as_f64().exp() * gs)),
                        );
                    }
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Gather(a, labels) => {
                    let av = &self.nodes[a.0].value;
                    let c = av.shape()[1];
                    let mut ga = vec![F::zero(); av.len()];
                    for (i, &l) in labels.iter().enumerate() {
                        ga[i * c + l] = g[i];
                    }
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads, &self.nodes, *a, g);
                }
                Op::GlobalAvgPool(a) => {
                    let av = &self.nodes[a.0].value;
                    let hw = av.shape()[2] * av.shape()[3];
                    let inv: F = f(1.0 / hw as f64);
                    let mut ga = Vec::with_capacity(av.len());
                    for x in &g {
                        ga.extend(std::iter::repeat(*x * inv).take(hw));
                    }
                    accumulate(&mut grads, &self.nodes, *a, ga);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    let geo = ConvGeom::new(x.shape(), w.shape(), *stride, *padding)
                        .expect("geometry validated in forward");
                    let (xd, wd) = (x.data(), w.data());
                    let want_x = self.requires_grad(*input);
                    let want_w = self.requires_grad(*weight);
                    let mut dx = vec![0.0f64; if want_x { x.len() } else { 0 }];
                    let mut dw = vec![0.0f64; if want_w { w.len() } else { 0 }];
                    let mut db = vec![0.0f64; geo.o];
                    for n in 0..geo.n {
                        for o in 0..geo.o {
                            for oy in 0..geo.oh {
                                for ox in 0..geo.ow {
                                    let gv = g[geo.y_idx(n, o, oy, ox)].as_f64();
                                    db[o] += gv;
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for c in 0..geo.c {
                                        for ky in 0..geo.kh {
                                            let Some(iy) = geo.in_y(oy, ky) else { continue };
                                            for kx in 0..geo.kw {
                                                let Some(ix) = geo.in_x(ox, kx) else { continue };
                                                let xi = geo.x_idx(n, c, iy, ix);
                                                let wi = geo.w_idx(o, c, ky, kx);
                                                if want_x {
                                                    dx[xi] += gv * wd[wi].as_f64();
                                                }
                                                if want_w {
                                                    dw[wi] += gv * xd[xi].as_f64();
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_x {
                        accumulate(&mut grads, &self.nodes, *input, dx.into_iter().map(f).collect());
                    }
                    if want_w {
                        accumulate(&mut grads, &self.nodes, *weight, dw.into_iter().map(f).collect());
                    }
                    if let Some(b) = bias {
                        accumulate(&mut grads, &self.nodes, *b, db.into_iter().map(f).collect());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into every
    /// given store. Returns the ids that were touched.
    pub fn backward_into(
        &self,
        loss: Var,
        stores: &mut [&mut ParamStore<F>],
    ) -> Result<Vec<super::ParamId>> {
        let grads = self.backward(loss)?;
        let mut touched = Vec::new();
        for s in stores.iter_mut() {
            touched.extend(s.accumulate(&grads));
        }
        touched.sort();
        Ok(touched)
    }
}

fn accumulate<F: Element>(grads: &mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var, g: Vec<F>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a = *a + x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// `[m, k] x [k, n]` with 64-bit row accumulators.
fn matmul_kernel<F: Element>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let x = a[i * k + p].as_f64();
            if x == 0.0 {
                continue;
            }
            for (dst, y) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *dst += x * y.as_f64();
            }
        }
        out.extend(acc.iter().map(|v| f::<F>(*v)));
    }
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Option<Self> {
        let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
        let (o, kh, kw) = (w[0], w[2], w[3]);
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return None;
        }
        Some(Self {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    #[inline]
    fn in_y(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.padding)
            .filter(|&y| y < self.h)
    }

    #[inline]
    fn in_x(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx)
            .checked_sub(self.padding)
            .filter(|&x| x < self.w)
    }

    #[inline]
    fn x_idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    fn w_idx(&self, o: usize, c: usize, y: usize, x: usize) -> usize {
        ((o * self.c + c) * self.kh + y) * self.kw + x
    }

    #[inline]
    fn y_idx(&self, n: usize, o: usize, y: usize, x: usize) -> usize {
        ((n * self.o + o) * self.oh + y) * self.ow + x
    }
}
