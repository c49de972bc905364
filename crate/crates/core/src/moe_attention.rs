//! SwitchHead attention: dense per-head queries and keys with rotary position
//! encoding, mixture-of-experts value and output projections with independent
//! sigmoid routing, and causal softmax attention.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::moe_ffn::{balancing_loss_from_logits, expert_scores, mix_experts, select_experts, ExpertScores, ExpertSelection};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Var};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// Experts per head for the value and for the output projection (`N_A`).
    pub n_experts: usize,
    /// Active experts per token (`K_A`).
    pub k: usize,
}

impl AttentionDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        if self.k == 0 || self.k > self.n_experts {
            return Err(Error::Config(format!(
                "attention requires 1 <= K_A <= N_A, got K_A={} N_A={}",
                self.k, self.n_experts
            )));
        }
        Ok(())
    }

    /// Parameters of one head: `W_Q`, `W_K`, `N_A` value and output experts, two selectors.
    pub fn head_param_count(&self) -> usize {
        let (d, h, n) = (self.d_model, self.d_head, self.n_experts);
        2 * d * h + 2 * n * d * h + 2 * d * n
    }

    pub fn param_count(&self) -> usize {
        self.n_heads * self.head_param_count()
    }
}

/// Precomputed rotation angles `θ_i = base^(-2i/d_head)` for positions `0..max_len`.
/// With an odd `d_head` the last channel is left unrotated.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    d_head: usize,
    max_len: usize,
    cos: Arc<Vec<T>>,
    sin: Arc<Vec<T>>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(d_head: usize, max_len: usize) -> Self {
        Self::with_base(d_head, max_len, ROPE_BASE)
    }

    pub fn with_base(d_head: usize, max_len: usize, base: f64) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for t in 0..max_len {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / d_head as f64);
                let angle = t as f64 * theta;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        Self {
            d_head,
            max_len,
            cos: Arc::new(cos),
            sin: Arc::new(sin),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Rotates a single vector as if it sat at `position`.
    pub fn rotate(&self, v: &[T], position: usize) -> Vec<T> {
        assert_eq!(v.len(), self.d_head);
        assert!(position < self.max_len);
        let half = self.d_head / 2;
        let mut out = v.to_vec();
        for i in 0..half {
            let (c, s) = (self.cos[position * half + i], self.sin[position * half + i]);
            out[2 * i] = v[2 * i] * c - v[2 * i + 1] * s;
            out[2 * i + 1] = v[2 * i] * s + v[2 * i + 1] * c;
        }
        out
    }

    /// Rotates row `t` of `x[T×d_head]` by position `t`.
    pub fn apply(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let rows = g.shape(x).first().copied().unwrap_or(0);
        if rows > self.max_len {
            return Err(Error::Argument(format!(
                "sequence of {rows} positions exceeds rotary table of {}",
                self.max_len
            )));
        }
        g.rope(x, Arc::clone(&self.cos), Arc::clone(&self.sin))
    }
}

/// Parameter handles of one attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionHeadParams {
    /// `[d_model × d_head]`
    pub wq: ParamId,
    pub wk: ParamId,
    /// `[N_A × d_model × d_head]`
    pub wv: ParamId,
    /// `[N_A × d_head × d_model]`
    pub wo: ParamId,
    /// `[d_model × N_A]`
    pub wsv: ParamId,
    pub wso: ParamId,
}

/// All heads of one SwitchHead layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub dims: AttentionDims,
    pub heads: Vec<AttentionHeadParams>,
}

impl AttentionParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: AttentionDims,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        let AttentionDims {
            d_model: d,
            d_head: dh,
            n_experts: n,
            ..
        } = dims;
        let std_in = (d as f64).powf(-0.5);
        let std_out = (dh as f64).powf(-0.5);
        let heads = (0..dims.n_heads)
            .map(|h| {
                let p = format!("{prefix}.head{h}");
                AttentionHeadParams {
                    wq: store.add(format!("{p}.wq"), trunc_normal(rng, &[d, dh], std_in), true),
                    wk: store.add(format!("{p}.wk"), trunc_normal(rng, &[d, dh], std_in), true),
                    wv: store.add(format!("{p}.wv"), trunc_normal(rng, &[n, d, dh], std_in), true),
                    wo: store.add(format!("{p}.wo"), trunc_normal(rng, &[n, dh, d], std_out), true),
                    wsv: store.add(format!("{p}.wsv"), trunc_normal(rng, &[d, n], std_in), true),
                    wso: store.add(format!("{p}.wso"), trunc_normal(rng, &[d, n], std_in), true),
                }
            })
            .collect();
        Ok(Self { dims, heads })
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Vec<AttentionHead>> {
        self.heads
            .iter()
            .map(|h| {
                Ok(AttentionHead {
                    dims: self.dims,
                    wq: g.param(store, h.wq)?,
                    wk: g.param(store, h.wk)?,
                    wv: g.param(store, h.wv)?,
                    wo: g.param(store, h.wo)?,
                    wsv: g.param(store, h.wsv)?,
                    wso: g.param(store, h.wso)?,
                })
            })
            .collect()
    }
}

/// One head's weights bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    pub dims: AttentionDims,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub wsv: Var,
    pub wso: Var,
}

/// Result of a routed projection (value or output side).
#[derive(Clone, Debug)]
pub struct RoutedProjection<T> {
    pub out: Var,
    pub scores: ExpertScores,
    pub selection: Vec<ExpertSelection<T>>,
}

/// Rotated queries and keys of one head from (possibly normalized) inputs.
pub fn project_qk<T: Scalar>(
    g: &mut Graph<T>,
    q_input: Var,
    k_input: Var,
    head: &AttentionHead,
    rope: &RopeTable<T>,
) -> Result<(Var, Var)> {
    let q = g.matmul(q_input, head.wq)?;
    let k = g.matmul(k_input, head.wk)?;
    Ok((rope.apply(g, q)?, rope.apply(g, k)?))
}

/// `v_t = Σ_{e ∈ topK_A(σ(x_t W_SV))} s_V[e] · x_t W_V[e]`
pub fn value_moe<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    selector_input: Var,
    head: &AttentionHead,
) -> Result<RoutedProjection<T>> {
    let dims = head.dims;
    let scores = expert_scores(g, selector_input, head.wsv)?;
    let selection = select_experts(g.value(scores.scores), dims.k)?;
    let wv = head.wv;
    let out = mix_experts(g, x, scores.scores, &selection, dims.n_experts, dims.d_head, |g, e, xe| {
        let w = g.index_first(wv, e)?;
        g.matmul(xe, w)
    })?;
    Ok(RoutedProjection { out, scores, selection })
}

/// `softmax(q·kᵀ/√d_head)·v` restricted to keys at positions `<= t`.
pub fn attention_core<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs != ks || qs.len() != 2 || vs.len() != 2 || vs[0] != qs[0] {
        return Err(Error::shape("attention_core", &qs, &ks));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    let probs = g.causal_softmax(scores)?;
    g.matmul(probs, v)
}

/// One head's contribution `Σ_{e ∈ topK_A(σ(x_t W_SO))} s_O[e] · a_t W_O[e]`.
///
/// Routing is computed from the layer input (`selector_input`), not from `a`.
pub fn output_moe<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    selector_input: Var,
    head: &AttentionHead,
) -> Result<RoutedProjection<T>> {
    let dims = head.dims;
    let scores = expert_scores(g, selector_input, head.wso)?;
    let selection = select_experts(g.value(scores.scores), dims.k)?;
    let wo = head.wo;
    let out = mix_experts(g, a, scores.scores, &selection, dims.n_experts, dims.d_model, |g, e, ae| {
        let w = g.index_first(wo, e)?;
        g.matmul(ae, w)
    })?;
    Ok(RoutedProjection { out, scores, selection })
}

/// Sum of balancing losses over the given selector logits (value and output, every head).
pub fn attention_entropy_reg<T: Scalar>(g: &mut Graph<T>, selector_logits: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &l in selector_logits {
        let term = balancing_loss_from_logits(g, l)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Argument("attention regularizer needs at least one selector".into()))
}

/// Inputs to the different projections of a SwitchHead layer. Which of these are
/// layer-normalized depends on the model's normalization scheme.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInputs {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub value_selector: Var,
    pub output_selector: Var,
}

/// Full SwitchHead layer output and per-head routing records.
#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    pub y: Var,
    /// Value and output selector logits of every head, for the entropy regularizer.
    pub selector_logits: Vec<Var>,
    pub value_selections: Vec<Vec<ExpertSelection<T>>>,
    pub output_selections: Vec<Vec<ExpertSelection<T>>>,
}

/// Runs all heads and sums their output contributions in head order.
pub fn switchhead_forward<T: Scalar>(
    g: &mut Graph<T>,
    inputs: AttentionInputs,
    heads: &[AttentionHead],
    rope: &RopeTable<T>,
) -> Result<AttentionOutput<T>> {
    let mut y: Option<Var> = None;
    let mut selector_logits = Vec::with_capacity(2 * heads.len());
    let mut value_selections = Vec::with_capacity(heads.len());
    let mut output_selections = Vec::with_capacity(heads.len());
    for head in heads {
        let (q, k) = project_qk(g, inputs.query, inputs.key, head, rope)?;
        let v = value_moe(g, inputs.value, inputs.value_selector, head)?;
        let a = attention_core(g, q, k, v.out)?;
        let o = output_moe(g, a, inputs.output_selector, head)?;
        y = Some(match y {
            Some(acc) => g.add(acc, o.out)?,
            None => o.out,
        });
        selector_logits.push(v.scores.logits);
        selector_logits.push(o.scores.logits);
        value_selections.push(v.selection);
        output_selections.push(o.selection);
    }
    Ok(AttentionOutput {
        y: y.ok_or_else(|| Error::Config("attention needs at least one head".into()))?,
        selector_logits,
        value_selections,
        output_selections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rope_position_zero_is_identity() {
        let table = RopeTable::<f64>::new(4, 8);
        let v = [0.3, -1.2, 2.0, 0.7];
        assert_eq!(table.rotate(&v, 0), v.to_vec());
    }

    #[test]
    fn rope_hand_rotation() {
        let table = RopeTable::<f64>::new(2, 4);
        let r = table.rotate(&[1.0, 0.0], 1);
        assert!((r[0] - 0.5403).abs() < 1e-4);
        assert!((r[1] - 0.8415).abs() < 1e-4);
        assert!((r[0] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn rope_preserves_norm() {
        let table = RopeTable::<f64>::new(8, 64);
        let v: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin() + 0.1).collect();
        let n0: f64 = v.iter().map(|x| x * x).sum();
        for t in 0..64 {
            let r = table.rotate(&v, t);
            let n: f64 = r.iter().map(|x| x * x).sum();
            assert!((n - n0).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_dot_product_depends_on_offset_only() {
        let table = RopeTable::<f64>::new(6, 32);
        let q = [0.5, -0.1, 0.9, 0.3, -0.7, 0.2];
        let k = [0.1, 0.4, -0.6, 0.8, 0.05, -0.3];
        let dot = |t: usize, s: usize| -> f64 {
            table
                .rotate(&q, t)
                .iter()
                .zip(table.rotate(&k, s))
                .map(|(a, b)| a * b)
                .sum()
        };
        for shift in 0..5 {
            let base = dot(10 + shift, 10);
            for s in [0usize, 3, 17, 25] {
                assert!((dot(s + shift, s) - base).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::from_f64(vec![1, 2], &[0.3, 0.4]).unwrap()).unwrap();
        let k = g.input(Tensor::from_f64(vec![1, 2], &[1.0, -2.0]).unwrap()).unwrap();
        let v = g.input(Tensor::from_f64(vec![1, 3], &[5.0, 6.0, 7.0]).unwrap()).unwrap();
        let a = attention_core(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(a).data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn identical_keys_average_visible_values() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::from_f64(vec![3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap()).unwrap();
        let k = g.input(Tensor::from_f64(vec![3, 2], &[0.2, 0.1, 0.2, 0.1, 0.2, 0.1]).unwrap()).unwrap();
        let v = g.input(Tensor::from_f64(vec![3, 1], &[3.0, 6.0, 9.0]).unwrap()).unwrap();
        let a = attention_core(&mut g, q, k, v).unwrap();
        let out = g.value(a).data();
        assert!((out[0] - 3.0).abs() < 1e-12);
        assert!((out[1] - 4.5).abs() < 1e-12);
        assert!((out[2] - 6.0).abs() < 1e-12);
    }

    fn toy_heads(store: &mut ParamStore<f64>, n_experts: usize, k: usize) -> AttentionParams {
        let dims = AttentionDims {
            d_model: 6,
            n_heads: 2,
            d_head: 4,
            n_experts,
            k,
        };
        AttentionParams::init(store, "att", dims, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn zero_inputs_give_zero_projections() {
        let mut store = ParamStore::new();
        let params = toy_heads(&mut store, 3, 2);
        let mut g = Graph::new();
        let heads = params.bind(&mut g, &store).unwrap();
        let x = g.input(Tensor::zeros(vec![4, 6])).unwrap();
        let sel = g
            .input(crate::init::trunc_normal(&mut ChaCha8Rng::seed_from_u64(1), &[4, 6], 1.0))
            .unwrap();
        let v = value_moe(&mut g, x, sel, &heads[0]).unwrap();
        assert!(g.value(v.out).data().iter().all(|&z| z == 0.0));
        let a = g.input(Tensor::zeros(vec![4, 4])).unwrap();
        let o = output_moe(&mut g, a, sel, &heads[1]).unwrap();
        assert!(g.value(o.out).data().iter().all(|&z| z == 0.0));
    }

    #[test]
    fn single_expert_value_is_gated_projection() {
        let mut store = ParamStore::new();
        let params = toy_heads(&mut store, 1, 1);
        let mut g = Graph::new();
        let heads = params.bind(&mut g, &store).unwrap();
        let xt = crate::init::trunc_normal(&mut ChaCha8Rng::seed_from_u64(2), &[3, 6], 1.0);
        let x = g.input(xt.clone()).unwrap();
        let v = value_moe(&mut g, x, x, &heads[0]).unwrap();
        let w = store.get(params.heads[0].wv).index_first(0).unwrap();
        let plain = crate::tensor::kernels::matmul(&xt, &w).unwrap();
        let gates = g.value(v.scores.scores);
        for t in 0..3 {
            for j in 0..4 {
                let want = gates.data()[t] * plain.row(t)[j];
                assert!((g.value(v.out).row(t)[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_regularizer_total() {
        let mut g = Graph::<f64>::new();
        let n_a = 5usize;
        let h = 3usize;
        let logits: Vec<Var> = (0..2 * h).map(|_| g.input(Tensor::zeros(vec![7, n_a])).unwrap()).collect();
        let r = attention_entropy_reg(&mut g, &logits).unwrap();
        let want = -2.0 * h as f64 * (n_a as f64).ln();
        assert!((g.value(r).item() - want).abs() < 1e-12);
        let one = g.input(Tensor::zeros(vec![7, 1])).unwrap();
        let r1 = attention_entropy_reg(&mut g, &[one]).unwrap();
        assert_eq!(g.value(r1).item(), 0.0);
    }

    #[test]
    fn odd_head_dim_keeps_last_channel() {
        let rope = RopeTable::<f64>::new(3, 4);
        let v = [1.0, 2.0, 3.0];
        let r = rope.rotate(&v, 2);
        assert_eq!(r[2], 3.0);
        assert!(((r[0] * r[0] + r[1] * r[1]) - 5.0).abs() < 1e-12);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 3], vec![1.0, 2.0, 3.0].repeat(3)).unwrap()).unwrap();
        let y = rope.apply(&mut g, x).unwrap();
        assert_eq!(g.value(y).row(2), rope.rotate(&v, 2).as_slice());
    }
}
