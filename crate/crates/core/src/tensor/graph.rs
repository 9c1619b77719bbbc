use super::kernels::{self, BroadcastMap, MatView};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        plan: MatMulPlan,
    },
    Add {
        a: Var,
        b: Var,
        ma: BroadcastMap,
        mb: BroadcastMap,
    },
    Mul {
        a: Var,
        b: Var,
        ma: BroadcastMap,
        mb: BroadcastMap,
    },
    Scale {
        a: Var,
        s: T,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    CausalSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    SumAxis {
        a: Var,
        axis: usize,
    },
    SumAll {
        a: Var,
    },
    IndexSelectRows {
        a: Var,
        ids: Vec<usize>,
    },
    IndexAddRows {
        src: Var,
        ids: Vec<usize>,
    },
    SelectFlat {
        a: Var,
        ids: Vec<usize>,
    },
    WeightedSum {
        items: Vec<Var>,
        weights: Var,
    },
}

#[derive(Debug)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// `(a matrix offset, b matrix offset, out matrix offset)` per batch.
    batches: Vec<(usize, usize, usize)>,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Gradient tape. Nodes are appended in evaluation order, so the node list
/// is already topologically sorted and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("graph input")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (batch_a, batch_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);

        let (out_shape, rows, batches) = if batch_b.is_empty() {
            // Fold every leading dim of `a` into its rows.
            let mut shape = batch_a.to_vec();
            shape.extend([m, n]);
            (shape, numel(batch_a) * m, vec![(0, 0, 0)])
        } else {
            let batch = kernels::broadcast_shape(batch_a, batch_b)
                .ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
            let map_a = BroadcastMap::new(&batch, batch_a);
            let map_b = BroadcastMap::new(&batch, batch_b);
            let batches = (0..numel(&batch))
                .map(|i| (map_a.at(i) * m * k, map_b.at(i) * k * n, i * m * n))
                .collect();
            let mut shape = batch;
            shape.extend([m, n]);
            (shape, m, batches)
        };

        let plan = MatMulPlan {
            m: rows,
            k,
            n,
            batches,
        };
        let mut out = vec![T::zero(); numel(&out_shape)];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for &(oa, ob, oc) in &plan.batches {
                kernels::gemm(
                    plan.m,
                    k,
                    n,
                    da,
                    MatView::row_major(oa, k),
                    db,
                    MatView::row_major(ob, n),
                    T::zero(),
                    &mut out,
                    MatView::row_major(oc, n),
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul { a, b, plan },
            rg,
        ))
    }

    fn binary_plan(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, BroadcastMap, BroadcastMap)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = kernels::broadcast_shape(sa, sb).ok_or_else(|| Error::shape(op, sa, sb))?;
        let ma = BroadcastMap::new(&out, sa);
        let mb = BroadcastMap::new(&out, sb);
        Ok((out, ma, mb))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ma, mb) = self.binary_plan("add", a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = match (&ma, &mb) {
            (BroadcastMap::Same, BroadcastMap::Same) => {
                da.iter().zip(db).map(|(&x, &y)| x + y).collect()
            }
            _ => (0..numel(&shape)).map(|i| da[ma.at(i)] + db[mb.at(i)]).collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add { a, b, ma, mb }, rg))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ma, mb) = self.binary_plan("mul", a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = (0..numel(&shape)).map(|i| da[ma.at(i)] * db[mb.at(i)]).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul { a, b, ma, mb }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a);
        let out: Vec<T> = value.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(value.shape(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale { a, s }, rg))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a);
        let out: Vec<T> = value.data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = Tensor::new(value.shape(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Gelu { a }, rg))
    }

    fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        (outer, len, inner)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = Self::lanes(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                kernels::softmax_lane(src, &mut out, o * len * inner + i, inner, len, len);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a, axis }, rg))
    }

    /// Softmax over the last axis of `[.., q, k]` scores where key `j` is
    /// visible to query `i` only when `j <= i + (k - q)`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] < shape[shape.len() - 2] {
            return Err(Error::invalid("causal_softmax", format!("bad score shape {shape:?}")));
        }
        let (q, k) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for row in 0..src.len() / k {
            let i = row % q;
            kernels::softmax_lane(src, &mut out, row * k, 1, k, i + 1 + (k - q));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::CausalSoftmax { a }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layernorm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layernorm", &shape, self.shape(gain)));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("layernorm", "eps must be positive"));
        }
        let eps = T::from_f64_lossy(eps);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let (xs, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d;
        let mut out = vec![T::zero(); xs.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[B, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let (rows, c) = (shape[0], shape[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::OutOfRange {
                what: "cross_entropy classes",
                index: bad,
                size: c,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[targets[r]];
        }
        let loss = total / T::from_usize(rows).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} for shape {shape:?}")));
        }
        let (data, out_shape) = kernels::permute(self.value(a).data(), &shape, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = Self::lanes(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::from_usize(len).unwrap())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::SumAll { a }, rg))
    }

    /// Gathers slices along the first axis (embedding lookup, token dispatch).
    pub fn index_select_rows(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || ids.is_empty() {
            return Err(Error::invalid("index_select_rows", "need rank >= 1 and ids"));
        }
        let rows = shape[0];
        let width = numel(&shape[1..]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::OutOfRange {
                what: "index_select_rows",
                index: bad,
                size: rows,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = ids.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::IndexSelectRows {
                a,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Zero tensor with `rows` leading slices, where slice `ids[r]` receives
    /// `src[r]` (summed when ids repeat).
    pub fn index_add_rows(&mut self, src: Var, ids: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if shape.is_empty() || shape[0] != ids.len() {
            return Err(Error::shape("index_add_rows", &shape, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::OutOfRange {
                what: "index_add_rows",
                index: bad,
                size: rows,
            });
        }
        let width = numel(&shape[1..]);
        let data = self.value(src).data();
        let mut out = vec![T::zero(); rows * width];
        for (r, &i) in ids.iter().enumerate() {
            for j in 0..width {
                out[i * width + j] += data[r * width + j];
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows;
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::IndexAddRows {
                src,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// 1-D tensor of the flat elements `a[ids[r]]`.
    pub fn select_flat(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = ids.iter().find(|&&i| i >= src.len()) {
            return Err(Error::OutOfRange {
                what: "select_flat",
                index: bad,
                size: src.len(),
            });
        }
        let out: Vec<T> = ids.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&[ids.len()], out)?,
            Op::SelectFlat {
                a,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_i weights[i]·items[i]` over same-shape items and a `[N]` weight vector.
    pub fn weighted_sum(&mut self, items: &[Var], weights: Var) -> Result<Var> {
        let n = items.len();
        if n == 0 || self.shape(weights) != [n] {
            return Err(Error::shape("weighted_sum", &[n], self.shape(weights)));
        }
        let shape = self.shape(items[0]).to_vec();
        for &it in &items[1..] {
            if self.shape(it) != shape.as_slice() {
                return Err(Error::shape("weighted_sum", &shape, self.shape(it)));
            }
        }
        let w = self.value(weights).data();
        let slices: Vec<&[T]> = items.iter().map(|&v| self.value(v).data()).collect();
        let out = kernels::weighted_sum(&slices, w);
        let mut deps = items.to_vec();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::WeightedSum {
                items: items.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Takes the gradient buffer of `$v` out of `grads`, lets the body
        // accumulate into it, and puts it back. Skips vars without grad.
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    let mut owned = grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]);
                    {
                        let $buf: &mut [T] = &mut owned;
                        $body
                    }
                    grads[v.0] = Some(owned);
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (da, db) = (val(*a), val(*b));
                let MatMulPlan { m, k, n, .. } = *plan;
                with_grad!(*a, |ga| {
                    for &(oa, ob, oc) in &plan.batches {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            g,
                            MatView::row_major(oc, n),
                            db,
                            MatView::transposed(ob, n),
                            T::one(),
                            ga,
                            MatView::row_major(oa, k),
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    for &(oa, ob, oc) in &plan.batches {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            da,
                            MatView::transposed(oa, k),
                            g,
                            MatView::row_major(oc, n),
                            T::one(),
                            gb,
                            MatView::row_major(ob, n),
                        );
                    }
                });
            }
            Op::Add { a, b, ma, mb } => {
                with_grad!(*a, |ga| {
                    match ma {
                        BroadcastMap::Same => ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                        _ => g.iter().enumerate().for_each(|(j, &y)| ga[ma.at(j)] += y),
                    }
                });
                with_grad!(*b, |gb| {
                    match mb {
                        BroadcastMap::Same => gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                        _ => g.iter().enumerate().for_each(|(j, &y)| gb[mb.at(j)] += y),
                    }
                });
            }
            Op::Mul { a, b, ma, mb } => {
                let (da, db) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for (j, &y) in g.iter().enumerate() {
                        ga[ma.at(j)] += y * db[mb.at(j)];
                    }
                });
                with_grad!(*b, |gb| {
                    for (j, &y) in g.iter().enumerate() {
                        gb[mb.at(j)] += y * da[ma.at(j)];
                    }
                });
            }
            Op::Scale { a, s } => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
                });
            }
            Op::Gelu { a } => {
                let da = val(*a);
                with_grad!(*a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * kernels::gelu_grad(da[j]);
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = out.data();
                let (outer, len, inner) = Self::lanes(out.shape(), *axis);
                with_grad!(*a, |ga| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dot: T = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                ga[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax { a } => {
                let y = out.data();
                let k = *out.shape().last().unwrap();
                with_grad!(*a, |ga| {
                    for row in 0..y.len() / k {
                        let base = row * k;
                        let dot: T = (0..k).map(|j| g[base + j] * y[base + j]).sum();
                        for j in 0..k {
                            ga[base + j] += y[base + j] * (g[base + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xs = val(*x);
                let gs = val(*gain);
                let d = gs.len();
                let rows = xs.len() / d;
                let inv_d = T::one() / T::from_usize(d).unwrap();
                let xhat = |r: usize, j: usize| (xs[r * d + j] - mean[r]) * rstd[r];
                with_grad!(*x, |gx| {
                    for r in 0..rows {
                        let mut sum_dx = T::zero();
                        let mut sum_dx_xhat = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gs[j];
                            sum_dx += dxh;
                            sum_dx_xhat += dxh * xhat(r, j);
                        }
                        for j in 0..d {
                            let dxh = g[r * d + j] * gs[j];
                            gx[r * d + j] +=
                                rstd[r] * (dxh - sum_dx * inv_d - xhat(r, j) * sum_dx_xhat * inv_d);
                        }
                    }
                });
                with_grad!(*gain, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat(r, j);
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let c = probs.len() / rows;
                let s = g[0] / T::from_usize(rows).unwrap();
                with_grad!(*logits, |gl| {
                    for r in 0..rows {
                        for j in 0..c {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                });
            }
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = kernels::permute(g, out.shape(), &inverse);
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y);
                });
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = Self::lanes(nodes[a.0].value.shape(), *axis);
                with_grad!(*a, |ga| {
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for ii in 0..inner {
                                ga[base + ii] += g[o * inner + ii];
                            }
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                });
            }
            Op::IndexSelectRows { a, ids } => {
                let width = out.numel() / ids.len();
                with_grad!(*a, |ga| {
                    for (r, &row) in ids.iter().enumerate() {
                        for j in 0..width {
                            ga[row * width + j] += g[r * width + j];
                        }
                    }
                });
            }
            Op::IndexAddRows { src, ids } => {
                let width = nodes[src.0].value.numel() / ids.len();
                with_grad!(*src, |gs| {
                    for (r, &row) in ids.iter().enumerate() {
                        for j in 0..width {
                            gs[r * width + j] += g[row * width + j];
                        }
                    }
                });
            }
            Op::SelectFlat { a, ids } => {
                with_grad!(*a, |ga| {
                    for (r, &j) in ids.iter().enumerate() {
                        ga[j] += g[r];
                    }
                });
            }
            Op::WeightedSum { items, weights } => {
                let w = val(*weights);
                for (idx, &it) in items.iter().enumerate() {
                    let wi = w[idx];
                    with_grad!(it, |gi| {
                        gi.iter_mut().zip(g).for_each(|(x, &y)| *x += wi * y);
                    });
                }
                with_grad!(*weights, |gw| {
                    for (idx, &it) in items.iter().enumerate() {
                        gw[idx] += val(it).iter().zip(g).map(|(&v, &y)| v * y).sum::<T>();
                    }
                });
            }
        }
    }
}
