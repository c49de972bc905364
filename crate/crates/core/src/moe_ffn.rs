//! σ-MoE feedforward block.
//!
//! Every expert gets an independent sigmoid score `s = σ(x·W_S)`. The `K`
//! highest-scoring experts are evaluated and their outputs summed, each scaled by
//! its raw (unnormalized) score:
//!
//! ```text
//! y_t = Σ_{e ∈ topK(s_t)} s_t[e] · relu(x_t W1[e]) W2[e]
//! ```
//!
//! Load balancing uses the negative entropy of the sequence-averaged softmax of
//! the same selector logits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::tensor::{kernels, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Experts chosen for one token, in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSelection<T> {
    pub indices: Vec<usize>,
    /// Sigmoid scores at `indices`, not renormalized.
    pub scores: Vec<T>,
}

impl<T> ExpertSelection<T> {
    /// Indices in ascending order, as written to selection traces.
    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut v = self.indices.clone();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnDims {
    pub d_model: usize,
    pub d_expert: usize,
    pub n_experts: usize,
    pub k: usize,
}

impl FfnDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_expert == 0 {
            return Err(Error::Config("FFN dimensions must be positive".into()));
        }
        if self.k == 0 || self.k > self.n_experts {
            return Err(Error::Config(format!(
                "FFN requires 1 <= K <= N_E, got K={} N_E={}",
                self.k, self.n_experts
            )));
        }
        Ok(())
    }

    /// `N_E·d_expert·d_model·2 + d_model·N_E`
    pub fn param_count(&self) -> usize {
        2 * self.n_experts * self.d_expert * self.d_model + self.d_model * self.n_experts
    }
}

/// Parameter handles of one expert bank inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub dims: FfnDims,
    /// `[N_E × d_model × d_expert]`
    pub w1: ParamId,
    /// `[N_E × d_expert × d_model]`
    pub w2: ParamId,
    /// `[d_model × N_E]`
    pub w_s: ParamId,
}

impl FfnParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: FfnDims,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        let FfnDims {
            d_model,
            d_expert,
            n_experts,
            ..
        } = dims;
        let w1 = trunc_normal(rng, &[n_experts, d_model, d_expert], (d_model as f64).powf(-0.5));
        let w2 = trunc_normal(rng, &[n_experts, d_expert, d_model], (d_expert as f64).powf(-0.5));
        let w_s = trunc_normal(rng, &[d_model, n_experts], (d_model as f64).powf(-0.5));
        Ok(Self {
            dims,
            w1: store.add(format!("{prefix}.w1"), w1, true),
            w2: store.add(format!("{prefix}.w2"), w2, true),
            w_s: store.add(format!("{prefix}.w_s"), w_s, true),
        })
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<FfnExpertBank> {
        Ok(FfnExpertBank {
            dims: self.dims,
            w1: g.param(store, self.w1)?,
            w2: g.param(store, self.w2)?,
            w_s: g.param(store, self.w_s)?,
        })
    }
}

/// Expert bank bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct FfnExpertBank {
    pub dims: FfnDims,
    pub w1: Var,
    pub w2: Var,
    pub w_s: Var,
}

/// Selector logits and their sigmoid scores.
#[derive(Clone, Copy, Debug)]
pub struct ExpertScores {
    pub logits: Var,
    pub scores: Var,
}

/// `s = σ(x·W_S)` for every token and expert.
pub fn expert_scores<T: Scalar>(g: &mut Graph<T>, x: Var, w_s: Var) -> Result<ExpertScores> {
    let logits = g.matmul(x, w_s)?;
    let scores = g.sigmoid(logits)?;
    Ok(ExpertScores { logits, scores })
}

/// Per-token top-`k` over a `[T × N]` score matrix.
pub fn select_experts<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<Vec<ExpertSelection<T>>> {
    if scores.rank() != 2 {
        return Err(Error::Argument(format!(
            "expert scores must be [T x N], got {:?}",
            scores.shape()
        )));
    }
    (0..scores.rows())
        .map(|t| {
            let (indices, scores) = kernels::topk_slice(scores.row(t), k)?;
            Ok(ExpertSelection { indices, scores })
        })
        .collect()
}

/// Routes each token through its selected experts and sums the gated outputs.
///
/// `expert` maps the gathered input rows of one expert to that expert's output rows.
/// Only experts selected by at least one token are touched, so unselected experts
/// have no path to the output and receive exactly zero gradient.
pub(crate) fn mix_experts<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    gates: Var,
    selection: &[ExpertSelection<T>],
    n_experts: usize,
    d_out: usize,
    mut expert: impl FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); n_experts];
    for (t, sel) in selection.iter().enumerate() {
        for &e in &sel.indices {
            routed[e].push(t);
        }
    }
    let mut parts = Vec::new();
    for (e, rows) in routed.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, &rows)?;
        let ye = expert(g, e, xe)?;
        let coords: Vec<(usize, usize)> = rows.iter().map(|&t| (t, e)).collect();
        let ge = g.gather_elems(gates, &coords)?;
        let ye = g.mul_rows(ye, ge)?;
        parts.push((ye, rows));
    }
    g.scatter_add_rows(selection.len(), d_out, &parts)
}

/// Output of one σ-MoE feedforward evaluation.
#[derive(Clone, Debug)]
pub struct FfnOutput<T> {
    pub y: Var,
    pub scores: ExpertScores,
    pub selection: Vec<ExpertSelection<T>>,
}

/// σ-MoE feedforward.
///
/// `x` feeds the experts; `selector_input` feeds `W_S` (the same tensor, or its
/// layer-normalized version depending on the normalization scheme).
pub fn ffn_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    selector_input: Var,
    bank: &FfnExpertBank,
    k: usize,
) -> Result<FfnOutput<T>> {
    let dims = bank.dims;
    let xs = g.shape(x);
    if xs.len() != 2 || xs[1] != dims.d_model || xs[0] == 0 {
        return Err(Error::shape("ffn_forward", xs, &[xs.first().copied().unwrap_or(0), dims.d_model]));
    }
    let scores = expert_scores(g, selector_input, bank.w_s)?;
    let selection = select_experts(g.value(scores.scores), k)?;
    let (w1, w2) = (bank.w1, bank.w2);
    let y = mix_experts(g, x, scores.scores, &selection, dims.n_experts, dims.d_model, |g, e, xe| {
        let w1e = g.index_first(w1, e)?;
        let h = g.matmul(xe, w1e)?;
        let h = g.relu(h)?;
        let w2e = g.index_first(w2, e)?;
        g.matmul(h, w2e)
    })?;
    Ok(FfnOutput { y, scores, selection })
}

/// `Σ_e p[e]·ln p[e]` where `p` is the sequence mean of `softmax(logits)`.
pub fn balancing_loss_from_logits<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let probs = g.softmax_lastdim(logits)?;
    let p = g.mean_rows(probs)?;
    g.neg_entropy(p)
}

/// Balancing loss of one sequence `x_seq[T×d_model]` under selector `w_s`.
pub fn balancing_loss<T: Scalar>(g: &mut Graph<T>, x_seq: Var, w_s: Var) -> Result<Var> {
    let logits = g.matmul(x_seq, w_s)?;
    balancing_loss_from_logits(g, logits)
}

/// Mean routing distribution and balancing loss, computed without a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct BalancingStats<T> {
    pub p: Tensor<T>,
    pub loss: T,
}

impl<T: Scalar> BalancingStats<T> {
    pub fn from_logits(logits: &Tensor<T>) -> Result<Self> {
        if logits.rank() != 2 || logits.rows() == 0 {
            return Err(Error::Argument(format!(
                "balancing statistics need [T x N] logits with T >= 1, got {:?}",
                logits.shape()
            )));
        }
        let probs = kernels::softmax_lastdim(logits);
        let n = logits.cols();
        let mut p = vec![T::zero(); n];
        for row in probs.data().chunks(n) {
            for (o, &v) in p.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(logits.rows() as f64);
        p.iter_mut().for_each(|v| *v *= inv);
        let loss = p
            .iter()
            .map(|&v| if v > T::zero() { v * v.ln() } else { T::zero() })
            .sum();
        Ok(Self {
            p: Tensor::vector(p),
            loss,
        })
    }
}
