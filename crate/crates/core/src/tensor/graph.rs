use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::kernels::{self, check_matmul, mm_acc, mm_nt_acc, mm_tn_acc, sigmoid};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a node of a [`Graph`]. Only valid for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: u32,
    graph: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Operation kind of a recorded node, without its payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    MatMul,
    Add,
    Mul,
    AddRow,
    MulRows,
    Scale,
    Sigmoid,
    Relu,
    Softmax,
    CausalSoftmax,
    LayerNorm,
    Embedding,
    CrossEntropy,
    Sum,
    Mean,
    MeanRows,
    NegEntropy,
    Transpose,
    Rope,
    GatherRows,
    ScatterAdd,
    IndexFirst,
    GatherElems,
}

/// Read-only view of a node, for structural inspection of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct NodeInfo<'a> {
    pub var: Var,
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub label: Option<&'a str>,
    pub param: Option<ParamId>,
    pub shape: &'a [usize],
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRows(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    CausalSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    NegEntropy(usize),
    Transpose(usize),
    Rope {
        x: usize,
        cos: Arc<Vec<T>>,
        sin: Arc<Vec<T>>,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterAdd {
        parts: Vec<(usize, Vec<usize>)>,
    },
    IndexFirst {
        x: usize,
        index: usize,
    },
    GatherElems {
        x: usize,
        coords: Vec<(usize, usize)>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRows(..) => OpKind::MulRows,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::CausalSoftmax(_) => OpKind::CausalSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::NegEntropy(_) => OpKind::NegEntropy,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Rope { .. } => OpKind::Rope,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScatterAdd { .. } => OpKind::ScatterAdd,
            Op::IndexFirst { .. } => OpKind::IndexFirst,
            Op::GatherElems { .. } => OpKind::GatherElems,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRows(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::CausalSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::NegEntropy(a)
            | Op::Transpose(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Rope { x, .. } | Op::GatherRows { x, .. } | Op::IndexFirst { x, .. } | Op::GatherElems { x, .. } => {
                vec![*x]
            }
            Op::ScatterAdd { parts } => parts.iter().map(|(p, _)| *p).collect(),
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    label: Option<String>,
}

/// Tape of operations recorded during one forward pass.
///
/// A graph supports exactly one call to [`Graph::backward`]; afterwards it is
/// stale and further recording or differentiation is a lifecycle error.
pub struct Graph<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::Lifecycle("variable belongs to a different graph".into()));
        }
        Ok(v.idx as usize)
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Lifecycle(
                "graph already differentiated; record a new graph for this step".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name,
                context: String::new(),
            });
        }
        self.push_unchecked(Arc::new(value), op)
    }

    fn push_unchecked(&mut self, value: Arc<Tensor<T>>, op: Op<T>) -> Result<Var> {
        self.live()?;
        let idx = u32::try_from(self.nodes.len())
            .map_err(|_| Error::Lifecycle("graph node limit exceeded".into()))?;
        self.nodes.push(Node {
            value,
            op,
            label: None,
        });
        Ok(Var { idx, graph: self.id })
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.idx as usize].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Attaches a label to a node (used for structural inspection).
    pub fn set_label(&mut self, v: Var, label: impl Into<String>) {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        self.nodes[v.idx as usize].label = Some(label.into());
    }

    pub fn label(&self, v: Var) -> Option<&str> {
        self.nodes[v.idx as usize].label.as_deref()
    }

    /// Iterates over all recorded nodes in creation (topological) order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeInfo<'_>> {
        self.nodes.iter().enumerate().map(move |(i, n)| NodeInfo {
            var: Var {
                idx: i as u32,
                graph: self.id,
            },
            kind: n.op.kind(),
            inputs: n
                .op
                .inputs()
                .into_iter()
                .map(|j| Var {
                    idx: j as u32,
                    graph: self.id,
                })
                .collect(),
            label: n.label.as_deref(),
            param: match n.op {
                Op::Param(p) => Some(p),
                _ => None,
            },
            shape: n.value.shape(),
        })
    }

    // ----- leaves -------------------------------------------------------

    /// Constant (non-parameter) input. Its gradient is still reported by `backward`.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    /// Binds a parameter. Repeated calls return the same node, so every use of a
    /// shared parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push_unchecked(store.shared(id), Op::Param(id))?;
        self.nodes[v.idx as usize].label = Some(store.name(id).to_string());
        self.param_vars.insert(id, v);
        Ok(v)
    }

    // ----- operations ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (m, k, n) = check_matmul(av.shape(), bv.shape())?;
        let mut out = vec![T::zero(); m * n];
        mm_acc(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(ai, bi), "matmul")
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(Error::shape(name, sa, sb));
        }
        Ok((ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same(a, b, "add")?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Add(ai, bi), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.binary_same(a, b, "mul")?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Mul(ai, bi), "mul")
    }

    /// `a[..×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if bv.rank() != 1 || av.cols() != bv.numel() {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let n = bv.numel();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(ai, bi), "add_row")
    }

    /// Scales row `i` of `a[m×n]` by `g[i]`.
    pub fn mul_rows(&mut self, a: Var, g: Var) -> Result<Var> {
        let (ai, gi) = (self.check(a)?, self.check(g)?);
        let (av, gv) = (&self.nodes[ai].value, &self.nodes[gi].value);
        if gv.rank() != 1 || av.rank() != 2 || av.shape()[0] != gv.numel() {
            return Err(Error::shape("mul_rows", av.shape(), gv.shape()));
        }
        let n = av.cols();
        let mut data = av.data().to_vec();
        for (row, &s) in data.chunks_mut(n.max(1)).zip(gv.data()) {
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::MulRows(ai, gi), "mul_rows")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let c = T::lit(c);
        let t = self.nodes[ai].value.map(|v| v * c);
        self.push(t, Op::Scale(ai, c), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let t = self.nodes[ai].value.map(sigmoid);
        self.push(t, Op::Sigmoid(ai), "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let t = self.nodes[ai].value.map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(ai), "relu")
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let t = kernels::softmax_lastdim(&self.nodes[ai].value);
        self.push(t, Op::Softmax(ai), "softmax")
    }

    /// Row-wise softmax of a square score matrix restricted to columns `j <= i`;
    /// masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let av = &self.nodes[ai].value;
        let s = av.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("causal_softmax", s, &[s[0], s[0]]));
        }
        let n = s[0];
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            let row = &mut data[i * n..i * n + i + 1];
            row.copy_from_slice(&av.data()[i * n..i * n + i + 1]);
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(vec![n, n], data)?;
        self.push(t, Op::CausalSoftmax(ai), "causal_softmax")
    }

    /// Last-axis layer normalization with affine `gain`/`bias` of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let xv = &self.nodes[xi].value;
        let d = xv.cols();
        let (gv, bv) = (&self.nodes[gi].value, &self.nodes[bi].value);
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let (xhat, _, rstd) = kernels::normalize_rows(xv.data(), d, eps);
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, &g), &b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Row lookup `table[ids[t]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let tv = &self.nodes[ti].value;
        if tv.rank() != 2 {
            return Err(Error::shape("embedding", tv.shape(), &[ids.len()]));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Argument(format!("token id {id} out of range for vocabulary {v}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            t,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Mean token-level cross-entropy of `logits[T×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let lv = &self.nodes[li].value;
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let v = lv.shape()[1];
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (row, (&y, logit_row)) in probs.chunks_mut(v).zip(targets.iter().zip(lv.data().chunks(v))) {
            if y >= v {
                return Err(Error::Argument(format!("target {y} out of range for {v} classes")));
            }
            let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + logit_row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += (lse - logit_row[y]).as_f64();
            kernels::softmax_in_place(row);
        }
        let loss = T::lit(total / targets.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(ai), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = &self.nodes[ai].value;
        if v.numel() == 0 {
            return Err(Error::Argument("mean of empty tensor".into()));
        }
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(ai), "mean")
    }

    /// Mean over the leading axis of `a[m×n]`, giving `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = &self.nodes[ai].value;
        if v.rank() != 2 || v.shape()[0] == 0 {
            return Err(Error::shape("mean_rows", v.shape(), &[]));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![T::zero(); n];
        for row in v.data().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = T::one() / T::lit(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::vector(out), Op::MeanRows(ai), "mean_rows")
    }

    /// `Σ p·ln p` over all entries (zero entries contribute zero).
    pub fn neg_entropy(&mut self, p: Var) -> Result<Var> {
        let pi = self.check(p)?;
        let s = self.nodes[pi]
            .value
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x * x.ln() } else { T::zero() })
            .sum::<T>();
        self.push(Tensor::scalar(s), Op::NegEntropy(pi), "neg_entropy")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = &self.nodes[ai].value;
        if v.rank() != 2 {
            return Err(Error::shape("transpose", v.shape(), &[]));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v.data()[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(ai), "transpose")
    }

    /// Rotates consecutive pairs `(2i, 2i+1)` of row `t` of `x[T×d]` by the angle whose
    /// cosine and sine are stored at `cos[t·d/2 + i]`, `sin[t·d/2 + i]`.
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        let d = v.cols();
        if v.rank() != 2 || cos.len() < v.rows() * d / 2 || sin.len() != cos.len() {
            return Err(Error::shape("rope", v.shape(), &[cos.len()]));
        }
        let half = d / 2;
        let mut out = v.data().to_vec();
        for (t, row) in out.chunks_mut(d).enumerate() {
            for i in 0..half {
                let (c, s) = (cos[t * half + i], sin[t * half + i]);
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = a * c - b * s;
                row[2 * i + 1] = a * s + b * c;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::Rope { x: xi, cos, sin }, "rope")
    }

    /// Selects rows `idx` of `x[m×n]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        if v.rank() != 2 {
            return Err(Error::shape("gather_rows", v.shape(), &[idx.len()]));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            if r >= m {
                return Err(Error::Argument(format!("row {r} out of range for {m} rows")));
            }
            out.extend_from_slice(v.row(r));
        }
        let t = Tensor::new(vec![idx.len(), n], out)?;
        self.push(
            t,
            Op::GatherRows {
                x: xi,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Builds a `[rows×cols]` tensor by adding row `r` of each part into row `idx[r]`.
    /// Parts are accumulated in the given order.
    pub fn scatter_add_rows(&mut self, rows: usize, cols: usize, parts: &[(Var, Vec<usize>)]) -> Result<Var> {
        let mut out = vec![T::zero(); rows * cols];
        let mut recorded = Vec::with_capacity(parts.len());
        for (p, idx) in parts {
            let pi = self.check(*p)?;
            let v = &self.nodes[pi].value;
            if v.rank() != 2 || v.shape()[1] != cols || v.shape()[0] != idx.len() {
                return Err(Error::shape("scatter_add_rows", v.shape(), &[idx.len(), cols]));
            }
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= rows {
                    return Err(Error::Argument(format!("row {dst} out of range for {rows} rows")));
                }
                for (o, &x) in out[dst * cols..(dst + 1) * cols].iter_mut().zip(v.row(r)) {
                    *o += x;
                }
            }
            recorded.push((pi, idx.clone()));
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(t, Op::ScatterAdd { parts: recorded }, "scatter_add_rows")
    }

    /// Sub-tensor `x[index]` along the first axis (e.g. one expert's weight matrix).
    pub fn index_first(&mut self, x: Var, index: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.nodes[xi].value.index_first(index)?;
        self.push(t, Op::IndexFirst { x: xi, index }, "index_first")
    }

    /// Picks individual entries `x[r, c]` of a matrix into a vector.
    pub fn gather_elems(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let xi = self.check(x)?;
        let v = &self.nodes[xi].value;
        if v.rank() != 2 {
            return Err(Error::shape("gather_elems", v.shape(), &[coords.len()]));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(Error::Argument(format!("element ({r},{c}) out of range for {m}x{n}")));
            }
            out.push(v.data()[r * n + c]);
        }
        self.push(
            Tensor::vector(out),
            Op::GatherElems {
                x: xi,
                coords: coords.to_vec(),
            },
            "gather_elems",
        )
    }

    // ----- differentiation ----------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Consumes the graph's single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.live()?;
        let li = self.check(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |j: usize| -> &Tensor<T> { &self.nodes[j].value };
            match &node.op {
                Op::Input => {
                    out.inputs.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(p) => {
                    out.params.insert(*p, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                &Op::MatMul(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    mm_nt_acc(&g, bv.data(), acc(&mut grads, a, m * k), m, n, k);
                    mm_tn_acc(av.data(), &g, acc(&mut grads, b, k * n), k, m, n);
                }
                &Op::Add(a, b) => {
                    add_into(acc(&mut grads, a, g.len()), &g);
                    add_into(acc(&mut grads, b, g.len()), &g);
                }
                &Op::Mul(a, b) => {
                    let (av, bv) = (val(a).data(), val(b).data());
                    let ga = acc(&mut grads, a, g.len());
                    for ((o, &gg), &y) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gg * y;
                    }
                    let gb = acc(&mut grads, b, g.len());
                    for ((o, &gg), &x) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gg * x;
                    }
                }
                &Op::AddRow(a, b) => {
                    add_into(acc(&mut grads, a, g.len()), &g);
                    let n = val(b).numel();
                    let gb = acc(&mut grads, b, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
                &Op::MulRows(a, s) => {
                    let (av, sv) = (val(a), val(s));
                    let n = av.cols().max(1);
                    let ga = acc(&mut grads, a, g.len());
                    for ((orow, grow), &sc) in ga.chunks_mut(n).zip(g.chunks(n)).zip(sv.data()) {
                        for (o, &gg) in orow.iter_mut().zip(grow) {
                            *o += gg * sc;
                        }
                    }
                    let gs = acc(&mut grads, s, sv.numel());
                    for ((o, grow), arow) in gs.iter_mut().zip(g.chunks(n)).zip(av.data().chunks(n)) {
                        *o += grow.iter().zip(arow).map(|(&x, &y)| x * y).sum::<T>();
                    }
                }
                &Op::Scale(a, c) => {
                    let ga = acc(&mut grads, a, g.len());
                    for (o, &gg) in ga.iter_mut().zip(&g) {
                        *o += gg * c;
                    }
                }
                &Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = acc(&mut grads, a, g.len());
                    for ((o, &gg), &yy) in ga.iter_mut().zip(&g).zip(y) {
                        *o += gg * yy * (T::one() - yy);
                    }
                }
                &Op::Relu(a) => {
                    let x = val(a).data();
                    let ga = acc(&mut grads, a, g.len());
                    for ((o, &gg), &xx) in ga.iter_mut().zip(&g).zip(x) {
                        if xx > T::zero() {
                            *o += gg;
                        }
                    }
                }
                &Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let ga = acc(&mut grads, a, g.len());
                    softmax_backward(ga, &g, y, n, |_| n);
                }
                &Op::CausalSoftmax(a) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let ga = acc(&mut grads, a, g.len());
                    softmax_backward(ga, &g, y, n, |i| i + 1);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = val(*gain).data();
                    let d = gv.len();
                    let dn = T::lit(d as f64);
                    {
                        let gg = acc(&mut grads, *gain, d);
                        for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, &a), &b) in gg.iter_mut().zip(grow).zip(xrow) {
                                *o += a * b;
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *bias, d);
                        for grow in g.chunks(d) {
                            add_into(gb, grow);
                        }
                    }
                    let gx = acc(&mut grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for ((o, &a), &w) in dxhat.iter_mut().zip(grow).zip(gv) {
                            *o = a * w;
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dxhat.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let rs = rstd[r];
                        for ((o, &dh), &xh) in gx[r * d..(r + 1) * d].iter_mut().zip(&dxhat).zip(xrow) {
                            *o += rs * (dh - m1 - xh * m2);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = val(*table).cols();
                    let n = val(*table).numel();
                    let gt = acc(&mut grads, *table, n);
                    for (&id, grow) in ids.iter().zip(g.chunks(d)) {
                        add_into(&mut gt[id * d..(id + 1) * d], grow);
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let v = val(*logits).cols();
                    let scale = g[0] / T::lit(targets.len() as f64);
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (r, &y) in targets.iter().enumerate() {
                        for (c, o) in gl[r * v..(r + 1) * v].iter_mut().enumerate() {
                            let p = probs[r * v + c];
                            let t = if c == y { p - T::one() } else { p };
                            *o += t * scale;
                        }
                    }
                }
                &Op::Sum(a) => {
                    let n = val(a).numel();
                    acc(&mut grads, a, n).iter_mut().for_each(|o| *o += g[0]);
                }
                &Op::Mean(a) => {
                    let n = val(a).numel();
                    let s = g[0] / T::lit(n as f64);
                    acc(&mut grads, a, n).iter_mut().for_each(|o| *o += s);
                }
                &Op::MeanRows(a) => {
                    let av = val(a);
                    let (m, n) = (av.shape()[0], av.shape()[1]);
                    let inv = T::one() / T::lit(m as f64);
                    let ga = acc(&mut grads, a, m * n);
                    for row in ga.chunks_mut(n) {
                        for (o, &gg) in row.iter_mut().zip(&g) {
                            *o += gg * inv;
                        }
                    }
                }
                &Op::NegEntropy(a) => {
                    let p = val(a).data();
                    let ga = acc(&mut grads, a, p.len());
                    for (o, &pp) in ga.iter_mut().zip(p) {
                        let pp = pp.max(T::min_positive_value());
                        *o += g[0] * (pp.ln() + T::one());
                    }
                }
                &Op::Transpose(a) => {
                    let av = val(a);
                    let (m, n) = (av.shape()[0], av.shape()[1]);
                    let ga = acc(&mut grads, a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::Rope { x, cos, sin } => {
                    let d = node.value.cols();
                    let half = d / 2;
                    let gx = acc(&mut grads, *x, g.len());
                    for (t, (orow, grow)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        for i in 0..half {
                            let (c, s) = (cos[t * half + i], sin[t * half + i]);
                            let (a, b) = (grow[2 * i], grow[2 * i + 1]);
                            orow[2 * i] += a * c + b * s;
                            orow[2 * i + 1] += b * c - a * s;
                        }
                        if d % 2 == 1 {
                            orow[d - 1] += grow[d - 1];
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let xv = val(*x);
                    let n = xv.cols();
                    let gx = acc(&mut grads, *x, xv.numel());
                    for (&r, grow) in idx.iter().zip(g.chunks(n)) {
                        add_into(&mut gx[r * n..(r + 1) * n], grow);
                    }
                }
                Op::ScatterAdd { parts } => {
                    let n = node.value.cols();
                    for (p, idx) in parts {
                        let gp = acc(&mut grads, *p, idx.len() * n);
                        for (r, &src) in idx.iter().enumerate() {
                            add_into(&mut gp[r * n..(r + 1) * n], &g[src * n..(src + 1) * n]);
                        }
                    }
                }
                &Op::IndexFirst { x, index } => {
                    let inner = g.len();
                    let total = val(x).numel();
                    let gx = acc(&mut grads, x, total);
                    add_into(&mut gx[index * inner..(index + 1) * inner], &g);
                }
                Op::GatherElems { x, coords } => {
                    let xv = val(*x);
                    let n = xv.cols();
                    let gx = acc(&mut grads, *x, xv.numel());
                    for (&(r, c), &gg) in coords.iter().zip(&g) {
                        gx[r * n + c] += gg;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

/// `dx = y ⊙ (g − ⟨g, y⟩)` per row, over the first `width(i)` columns of row `i`.
fn softmax_backward<T: Scalar>(gx: &mut [T], g: &[T], y: &[T], n: usize, width: impl Fn(usize) -> usize) {
    for (i, ((orow, grow), yrow)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate() {
        let w = width(i);
        let dot = grow[..w].iter().zip(&yrow[..w]).map(|(&a, &b)| a * b).sum::<T>();
        for j in 0..w {
            orow[j] += yrow[j] * (grow[j] - dot);
        }
    }
}

/// Gradients produced by one backward pass, keyed by parameter and by input node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
    inputs: BTreeMap<usize, Tensor<T>>,
}

impl<T> Default for Gradients<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter; `None` if the parameter was not used in the graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient with respect to an input leaf.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v.index())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Adds another gradient set into this one (ascending parameter order).
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (id, t) in &other.params {
            match self.params.get_mut(id) {
                Some(mine) => add_into(mine.data_mut(), t.data()),
                None => {
                    self.params.insert(*id, t.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    /// L2 norm over all parameter gradients, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.params.values().map(|t| t.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|t| t.is_finite())
    }
}
