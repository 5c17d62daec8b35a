use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, dot};
use super::{Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions a query row may attend to.
///
/// A key is visible when it passes every active constraint. Rows with no
/// visible key produce a zero output and zero weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnMask {
    /// Valid key count per batch element.
    pub key_lens: Option<Vec<usize>>,
    /// Query `i` sees keys `0..=i`.
    pub causal: bool,
    /// Row-major `tq × tk` visibility shared by all batch elements.
    pub dense: Option<Vec<bool>>,
}

impl AttnMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn causal() -> Self {
        AttnMask {
            causal: true,
            ..Self::default()
        }
    }

    pub fn key_lens(lens: Vec<usize>) -> Self {
        AttnMask {
            key_lens: Some(lens),
            ..Self::default()
        }
    }

    fn visible(&self, b: usize, i: usize, j: usize, tk: usize) -> bool {
        if let Some(lens) = &self.key_lens {
            if j >= lens[b] {
                return false;
            }
        }
        if self.causal && j > i {
            return false;
        }
        match &self.dense {
            Some(d) => d[i * tk + j],
            None => true,
        }
    }
}

/// Layout of a batched multi-head attention call. Queries are
/// `[batch·tq, heads·dk]`, keys `[batch·tk, heads·dk]`, values
/// `[batch·tk, heads·dv]`; head `h` owns the `h`-th column block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
    pub dk: usize,
    pub dv: usize,
    pub scale: f64,
    pub mask: AttnMask,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
/// is already a topological order for the backward sweep.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<usize, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Enables [`Graph::dropout`]; without a generator dropout is the identity.
    pub fn with_dropout_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Constant or input; receives a gradient but feeds nothing back.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Registers parameter `id`. Repeated calls with the same id return the same
    /// node, so a parameter used twice accumulates both gradient contributions.
    pub fn param(&mut self, id: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: usize) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// `(param id, gradient)` for every parameter touched by the graph.
    pub fn param_grads(&self) -> Vec<(usize, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape(v).to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.map(x, |v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (a, slot) in buf.iter_mut().enumerate() {
                    *slot = src[(o * len + a) * inner + i];
                }
                kernels::softmax_in_place(&mut buf);
                for (a, &p) in buf.iter().enumerate() {
                    out[(o * len + a) * inner + i] = p;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Batched scaled dot-product attention over head column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let AttnSpec {
            batch,
            tq,
            tk,
            heads,
            dk,
            dv,
            scale,
            ref mask,
        } = spec;
        let shape_err = |lhs: &[usize], rhs: Vec<usize>| Error::Shape {
            op: "attention",
            lhs: lhs.to_vec(),
            rhs,
        };
        if self.shape(q) != [batch * tq, heads * dk] {
            return Err(shape_err(self.shape(q), vec![batch * tq, heads * dk]));
        }
        if self.shape(k) != [batch * tk, heads * dk] {
            return Err(shape_err(self.shape(k), vec![batch * tk, heads * dk]));
        }
        if self.shape(v) != [batch * tk, heads * dv] {
            return Err(shape_err(self.shape(v), vec![batch * tk, heads * dv]));
        }
        if let Some(lens) = &mask.key_lens {
            if lens.len() != batch || lens.iter().any(|&l| l > tk) {
                return Err(Error::invalid(format!(
                    "key lengths {lens:?} do not fit batch {batch} with {tk} keys"
                )));
            }
        }
        if let Some(d) = &mask.dense {
            if d.len() != tq * tk {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: vec![d.len()],
                    rhs: vec![tq, tk],
                });
            }
        }
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let (qw, vw) = (heads * dk, heads * dv);
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; batch * tq * vw];
        let mut visible = vec![false; tk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..tq {
                    let qrow = &qd[(b * tq + i) * qw + h * dk..][..dk];
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..tk {
                        visible[j] = mask.visible(b, i, j, tk);
                        if visible[j] {
                            let krow = &kd[(b * tk + j) * qw + h * dk..][..dk];
                            p[j] = scale * dot(qrow, krow);
                            max = max.max(p[j]);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut total = 0.0;
                    for j in 0..tk {
                        p[j] = if visible[j] { (p[j] - max).exp() } else { 0.0 };
                        total += p[j];
                    }
                    let orow = &mut out[(b * tq + i) * vw + h * dv..][..dv];
                    for j in 0..tk {
                        p[j] /= total;
                        if p[j] != 0.0 {
                            let vrow = &vd[(b * tk + j) * vw + h * dv..][..dv];
                            for (o, &x) in orow.iter_mut().zip(vrow) {
                                *o += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch * tq, vw], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        ))
    }

    /// Attention weights of an attention node, laid out `[batch, heads, tq, tk]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnSpec, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    /// Row lookup into an embedding table `[vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.mat_dims(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::Empty("embedding ids"));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Copies rows of a 2-D node; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, _) = self.mat_dims(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: r,
            });
        }
        if rows.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let t = self.value(x).select_rows(rows);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `[a; b]` along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.mat_dims(a, "concat_cols")?;
        let (rb, cb) = self.mat_dims(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![ra, ca + cb], out)?;
        Ok(self.push(t, Op::ConcatCols(a, b)))
    }

    /// Mean token-level negative log-likelihood over rows whose target is not
    /// `pad`. `smoothing` mixes in the uniform distribution (0 disables it).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad: usize,
        smoothing: f64,
    ) -> Result<Var> {
        let (rows, vocab) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: vocab,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..rows {
            if targets[r] == pad {
                continue;
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let lse = kernels::log_sum_exp(row);
            let nll = lse - row[targets[r]];
            let mean_nll = if smoothing > 0.0 {
                row.iter().map(|x| lse - x).sum::<f64>() / vocab as f64
            } else {
                0.0
            };
            total += (1.0 - smoothing) * nll + smoothing * mean_nll;
            count += 1;
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                smoothing,
                probs,
                count,
            },
        ))
    }

    /// Inverted dropout. Identity when `rate` is zero or no generator is set.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let rng = match (&mut self.dropout_rng, rate > 0.0) {
            (Some(rng), true) => rng,
            _ => return x,
        };
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[x.0].value.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        self.push(t, Op::Dropout { x, mask })
    }

    /// Reverse sweep from a scalar loss. Afterwards every node on the graph has
    /// a gradient (zero where the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                let shape = node.value.shape().to_vec();
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(shape, data).unwrap())
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot =
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |ga| kernels::matmul_nt_acc(g, self.data(*b), ga, m, n, k));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(self.data(*a), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    let c = gb.len();
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)
            }),
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xd[i]);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => acc(*x, &mut |gx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let s: f64 = (0..*len).map(|a| out[at(a)] * g[at(a)]).sum();
                        for a in 0..*len {
                            gx[at(a)] += out[at(a)] * (g[at(a)] - s);
                        }
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gain)[0];
                let gd = self.data(*gain);
                acc(*gain, &mut |gg| {
                    for (i, &v) in g.iter().enumerate() {
                        gg[i % n] += v * xhat[i];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; n];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * n;
                        for j in 0..n {
                            dxhat[j] = g[base + j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            (0..n).map(|j| dxhat[j] * xhat[base + j]).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[base + j] += rs * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
            Op::Embedding { table, ids } => acc(*table, &mut |gt| {
                let d = g.len() / ids.len();
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }),
            Op::GatherRows { x, rows } => acc(*x, &mut |gx| {
                let d = g.len() / rows.len();
                for (r, &src) in rows.iter().enumerate() {
                    add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }),
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let rows = self.shape(*a)[0];
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &g[r * (ca + cb)..][..ca]);
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        add_into(
                            &mut gb[r * cb..(r + 1) * cb],
                            &g[r * (ca + cb) + ca..][..cb],
                        );
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                smoothing,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                let uniform = smoothing / vocab as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for j in 0..vocab {
                            let mut target = uniform;
                            if j == t {
                                target += 1.0 - smoothing;
                            }
                            gl[r * vocab + j] += scale * (probs[r * vocab + j] - target);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttnSpec {
            batch,
            tq,
            tk,
            heads,
            dk,
            dv,
            scale,
            ..
        } = *spec;
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let (qw, vw) = (heads * dk, heads * dv);
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..tq {
                    let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let grow = &g[(b * tq + i) * vw + h * dv..][..dv];
                    let mut weighted = 0.0;
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let voff = (b * tk + j) * vw + h * dv;
                        dp[j] = dot(grow, &vd[voff..voff + dv]);
                        weighted += p[j] * dp[j];
                        for c in 0..dv {
                            gv[voff + c] += p[j] * grow[c];
                        }
                    }
                    let qoff = (b * tq + i) * qw + h * dk;
                    for j in 0..tk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = scale * p[j] * (dp[j] - weighted);
                        let koff = (b * tk + j) * qw + h * dk;
                        for c in 0..dk {
                            gq[qoff + c] += ds * kd[koff + c];
                            gk[koff + c] += ds * qd[qoff + c];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            match &mut grads[var.0] {
                Some(slot) => add_into(slot, &local),
                slot @ None => *slot = Some(local),
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
