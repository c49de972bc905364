use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::trace::SelectionRecord;
use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::moe_attention::{
    attention_core, attention_entropy_reg, switchhead_forward, AttentionInputs, AttentionParams, RopeTable,
};
use crate::moe_ffn::{balancing_loss_from_logits, ffn_forward, ExpertSelection, FfnParams};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use super::config::{Arch, ModelConfig, NormScheme};
use super::schedule::{build_schedule, LayerSchedule};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Location of a layer normalization inside a block (or before the classifier).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormSite {
    Query,
    Key,
    FfnSelector,
    ValueSelector,
    OutputSelector,
    AttentionInput,
    FfnInput,
    AttentionOutput,
    FfnOutput,
    Final,
}

impl NormSite {
    pub fn label(self) -> &'static str {
        match self {
            NormSite::Query => "q",
            NormSite::Key => "k",
            NormSite::FfnSelector => "ffn_sel",
            NormSite::ValueSelector => "att_v_sel",
            NormSite::OutputSelector => "att_o_sel",
            NormSite::AttentionInput => "att_in",
            NormSite::FfnInput => "ffn_in",
            NormSite::AttentionOutput => "att_out",
            NormSite::FfnOutput => "ffn_out",
            NormSite::Final => "final",
        }
    }

    /// Norm sites inside one block for the given scheme and block family.
    pub fn block_sites(scheme: NormScheme, arch: Arch) -> &'static [NormSite] {
        match (scheme, arch) {
            (NormScheme::Peri, Arch::Moeut) => &[
                NormSite::Query,
                NormSite::Key,
                NormSite::ValueSelector,
                NormSite::OutputSelector,
                NormSite::FfnSelector,
            ],
            (NormScheme::Peri, Arch::Dense) => &[NormSite::Query, NormSite::Key],
            (NormScheme::Pre, _) => &[NormSite::AttentionInput, NormSite::FfnInput],
            (NormScheme::Post, _) => &[NormSite::AttentionOutput, NormSite::FfnOutput],
        }
    }

    /// Whether a final norm precedes the classifier.
    pub fn has_final(scheme: NormScheme) -> bool {
        !matches!(scheme, NormScheme::Post)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(vec![d], T::one()), false),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![d]), false),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseHeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockParams {
    Moe {
        attention: AttentionParams,
        ffn: FfnParams,
    },
    Dense {
        heads: Vec<DenseHeadParams>,
        w1: ParamId,
        w2: ParamId,
    },
}

/// Parameters of one group member. Every layer step that applies this member
/// uses these exact tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemberParams {
    pub block: BlockParams,
    pub norms: Vec<(NormSite, NormParams)>,
}

impl MemberParams {
    pub fn norm(&self, site: NormSite) -> Option<NormParams> {
        self.norms.iter().find(|(s, _)| *s == site).map(|(_, p)| *p)
    }
}

/// Which feedforward selections to record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TraceMode {
    #[default]
    Off,
    /// Only layer steps applying group member 0.
    FirstMember,
    AllMembers,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub trace: TraceMode,
    /// Keep a copy of the residual stream before the first block and after every block.
    pub capture_residuals: bool,
}

/// Result of one block.
#[derive(Clone, Debug)]
pub struct BlockOutput<T> {
    pub x: Var,
    /// Feedforward balancing loss for this layer step (MoE blocks only).
    pub ffn_balance: Option<Var>,
    /// Attention regularizer for this layer step, summed over heads and value/output.
    pub att_balance: Option<Var>,
    pub ffn_selection: Vec<ExpertSelection<T>>,
    /// Sorted expert ids of every routing decision (attention value, attention output,
    /// feedforward) in evaluation order.
    pub routing: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Var,
    /// Mean over layer steps of the feedforward balancing loss.
    pub ffn_aux: Option<Var>,
    /// Mean over layer steps of the attention regularizer.
    pub att_aux: Option<Var>,
    pub trace: Vec<SelectionRecord>,
    /// `n_layers + 1` snapshots when residual capture is enabled.
    pub residuals: Vec<Tensor<T>>,
    /// Residual stream node after the embedding and after each block.
    pub residual_vars: Vec<Var>,
    /// Concatenated [`BlockOutput::routing`] of all layer steps.
    pub routing: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    /// `ce + γ·ffn_aux + δ·att_aux`
    pub total: Var,
    pub ce: Var,
    pub forward: ForwardOutput<T>,
}

/// A MoEUT (or dense baseline) language model with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    schedule: LayerSchedule,
    store: ParamStore<T>,
    embedding: ParamId,
    classifier_w: ParamId,
    classifier_b: ParamId,
    final_norm: Option<NormParams>,
    members: Vec<MemberParams>,
    rope: RopeTable<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model; parameter initialization is a pure function of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = build_schedule(config.n_layers, config.group_size, config.pattern)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let std_d = (d as f64).powf(-0.5);

        let embedding = store.add("embedding", trunc_normal(&mut rng, &[config.vocab_size, d], std_d), true);
        let mut members = Vec::with_capacity(config.group_size);
        for m in 0..config.group_size {
            let prefix = format!("member{m}");
            let block = match config.arch {
                Arch::Moeut => BlockParams::Moe {
                    attention: AttentionParams::init(&mut store, &format!("{prefix}.att"), config.attention_dims(), &mut rng)?,
                    ffn: FfnParams::init(&mut store, &format!("{prefix}.ffn"), config.ffn_dims(), &mut rng)?,
                },
                Arch::Dense => {
                    let dh = config.d_head;
                    let heads = (0..config.n_heads)
                        .map(|h| {
                            let p = format!("{prefix}.att.head{h}");
                            DenseHeadParams {
                                wq: store.add(format!("{p}.wq"), trunc_normal(&mut rng, &[d, dh], std_d), true),
                                wk: store.add(format!("{p}.wk"), trunc_normal(&mut rng, &[d, dh], std_d), true),
                                wv: store.add(format!("{p}.wv"), trunc_normal(&mut rng, &[d, dh], std_d), true),
                                wo: store.add(
                                    format!("{p}.wo"),
                                    trunc_normal(&mut rng, &[dh, d], (dh as f64).powf(-0.5)),
                                    true,
                                ),
                            }
                        })
                        .collect();
                    let ff = config.d_ff;
                    BlockParams::Dense {
                        heads,
                        w1: store.add(format!("{prefix}.ffn.w1"), trunc_normal(&mut rng, &[d, ff], std_d), true),
                        w2: store.add(
                            format!("{prefix}.ffn.w2"),
                            trunc_normal(&mut rng, &[ff, d], (ff as f64).powf(-0.5)),
                            true,
                        ),
                    }
                }
            };
            let norms = NormSite::block_sites(config.norm_scheme, config.arch)
                .iter()
                .map(|&s| (s, NormParams::init(&mut store, &format!("{prefix}.norm.{}", s.label()), d)))
                .collect();
            members.push(MemberParams { block, norms });
        }
        let final_norm = NormSite::has_final(config.norm_scheme).then(|| NormParams::init(&mut store, "norm.final", d));
        let classifier_w = store.add("classifier.w", trunc_normal(&mut rng, &[d, config.vocab_size], std_d), true);
        let classifier_b = store.add("classifier.b", Tensor::zeros(vec![config.vocab_size]), false);
        let rope = RopeTable::new(config.d_head, config.context_length);
        Ok(Self {
            config,
            schedule,
            store,
            embedding,
            classifier_w,
            classifier_b,
            final_norm,
            members,
            rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schedule(&self) -> &LayerSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn member(&self, m: usize) -> &MemberParams {
        &self.members[m]
    }

    pub fn classifier(&self) -> (ParamId, ParamId) {
        (self.classifier_w, self.classifier_b)
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    /// Same architecture with parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            store: self.store.cast(),
            embedding: self.embedding,
            classifier_w: self.classifier_w,
            classifier_b: self.classifier_b,
            final_norm: self.final_norm,
            members: self.members.clone(),
            rope: RopeTable::new(self.config.d_head, self.config.context_length),
        }
    }

    fn apply_norm(&self, g: &mut Graph<T>, x: Var, params: NormParams, label: String) -> Result<Var> {
        let gain = g.param(&self.store, params.gain)?;
        let bias = g.param(&self.store, params.bias)?;
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
        g.set_label(y, label);
        Ok(y)
    }

    fn site_norm(&self, g: &mut Graph<T>, x: Var, member: usize, site: NormSite, layer: usize) -> Result<Var> {
        let p = self.members[member]
            .norm(site)
            .ok_or_else(|| Error::Config(format!("member {member} has no {} norm", site.label())))?;
        self.apply_norm(g, x, p, format!("L{layer}.{}", site.label()))
    }

    /// Applies group member `member` at layer step `layer` to the residual `x[T×d_model]`.
    pub fn block_forward(&self, g: &mut Graph<T>, x: Var, member: usize, layer: usize) -> Result<BlockOutput<T>> {
        let scheme = self.config.norm_scheme;
        match &self.members[member].block {
            BlockParams::Moe { attention, ffn } => {
                let heads = attention.bind(g, &self.store)?;
                let inputs = match scheme {
                    NormScheme::Peri => AttentionInputs {
                        query: self.site_norm(g, x, member, NormSite::Query, layer)?,
                        key: self.site_norm(g, x, member, NormSite::Key, layer)?,
                        value: x,
                        value_selector: self.site_norm(g, x, member, NormSite::ValueSelector, layer)?,
                        output_selector: self.site_norm(g, x, member, NormSite::OutputSelector, layer)?,
                    },
                    NormScheme::Pre => {
                        let n = self.site_norm(g, x, member, NormSite::AttentionInput, layer)?;
                        AttentionInputs {
                            query: n,
                            key: n,
                            value: n,
                            value_selector: n,
                            output_selector: n,
                        }
                    }
                    NormScheme::Post => AttentionInputs {
                        query: x,
                        key: x,
                        value: x,
                        value_selector: x,
                        output_selector: x,
                    },
                };
                let att = switchhead_forward(g, inputs, &heads, &self.rope)?;
                let att_balance = attention_entropy_reg(g, &att.selector_logits)?;
                let mut h = g.add(x, att.y)?;
                if scheme == NormScheme::Post {
                    h = self.site_norm(g, h, member, NormSite::AttentionOutput, layer)?;
                }

                let bank = ffn.bind(g, &self.store)?;
                let (expert_in, selector_in) = match scheme {
                    NormScheme::Peri => (h, self.site_norm(g, h, member, NormSite::FfnSelector, layer)?),
                    NormScheme::Pre => {
                        let n = self.site_norm(g, h, member, NormSite::FfnInput, layer)?;
                        (n, n)
                    }
                    NormScheme::Post => (h, h),
                };
                let f = ffn_forward(g, expert_in, selector_in, &bank, self.config.k)?;
                let ffn_balance = balancing_loss_from_logits(g, f.scores.logits)?;
                let mut out = g.add(h, f.y)?;
                if scheme == NormScheme::Post {
                    out = self.site_norm(g, out, member, NormSite::FfnOutput, layer)?;
                }
                let routing = att
                    .value_selections
                    .iter()
                    .chain(&att.output_selections)
                    .flatten()
                    .chain(&f.selection)
                    .flat_map(|s| s.sorted_indices())
                    .collect();
                Ok(BlockOutput {
                    x: out,
                    ffn_balance: Some(ffn_balance),
                    att_balance: Some(att_balance),
                    ffn_selection: f.selection,
                    routing,
                })
            }
            BlockParams::Dense { heads, w1, w2 } => {
                let (q_in, k_in, v_in) = match scheme {
                    NormScheme::Peri => (
                        self.site_norm(g, x, member, NormSite::Query, layer)?,
                        self.site_norm(g, x, member, NormSite::Key, layer)?,
                        x,
                    ),
                    NormScheme::Pre => {
                        let n = self.site_norm(g, x, member, NormSite::AttentionInput, layer)?;
                        (n, n, n)
                    }
                    NormScheme::Post => (x, x, x),
                };
                let mut y: Option<Var> = None;
                for hp in heads {
                    let wq = g.param(&self.store, hp.wq)?;
                    let wk = g.param(&self.store, hp.wk)?;
                    let wv = g.param(&self.store, hp.wv)?;
                    let wo = g.param(&self.store, hp.wo)?;
                    let q = g.matmul(q_in, wq)?;
                    let q = self.rope.apply(g, q)?;
                    let k = g.matmul(k_in, wk)?;
                    let k = self.rope.apply(g, k)?;
                    let v = g.matmul(v_in, wv)?;
                    let a = attention_core(g, q, k, v)?;
                    let o = g.matmul(a, wo)?;
                    y = Some(match y {
                        Some(acc) => g.add(acc, o)?,
                        None => o,
                    });
                }
                let y = y.ok_or_else(|| Error::Config("attention needs at least one head".into()))?;
                let mut h = g.add(x, y)?;
                if scheme == NormScheme::Post {
                    h = self.site_norm(g, h, member, NormSite::AttentionOutput, layer)?;
                }
                let ff_in = match scheme {
                    NormScheme::Pre => self.site_norm(g, h, member, NormSite::FfnInput, layer)?,
                    _ => h,
                };
                let w1 = g.param(&self.store, *w1)?;
                let w2 = g.param(&self.store, *w2)?;
                let hid = g.matmul(ff_in, w1)?;
                let hid = g.relu(hid)?;
                let f = g.matmul(hid, w2)?;
                let mut out = g.add(h, f)?;
                if scheme == NormScheme::Post {
                    out = self.site_norm(g, out, member, NormSite::FfnOutput, layer)?;
                }
                Ok(BlockOutput {
                    x: out,
                    ffn_balance: None,
                    att_balance: None,
                    ffn_selection: Vec::new(),
                    routing: Vec::new(),
                })
            }
        }
    }

    /// Embedding → scheduled blocks → (final norm) → classifier.
    pub fn forward(&self, g: &mut Graph<T>, tokens: &[usize], opts: &ForwardOptions) -> Result<ForwardOutput<T>> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if tokens.len() > cfg.context_length {
            return Err(Error::Argument(format!(
                "sequence length {} exceeds context length {}",
                tokens.len(),
                cfg.context_length
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Argument(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let table = g.param(&self.store, self.embedding)?;
        let mut x = g.embedding(table, tokens)?;
        let mut residuals = Vec::new();
        let mut residual_vars = vec![x];
        if opts.capture_residuals {
            residuals.push(g.value(x).clone());
        }
        let mut ffn_terms = Vec::new();
        let mut att_terms = Vec::new();
        let mut trace = Vec::new();
        let mut routing = Vec::new();
        for (layer, &member) in self.schedule.members().iter().enumerate() {
            let out = self
                .block_forward(g, x, member, layer)
                .map_err(|e| e.in_context(format!("layer step {layer} (member {member})")))?;
            x = out.x;
            residual_vars.push(x);
            if opts.capture_residuals {
                residuals.push(g.value(x).clone());
            }
            routing.extend_from_slice(&out.routing);
            ffn_terms.extend(out.ffn_balance);
            att_terms.extend(out.att_balance);
            let traced = match opts.trace {
                TraceMode::Off => false,
                TraceMode::FirstMember => member == 0,
                TraceMode::AllMembers => true,
            };
            if traced {
                for (position, sel) in out.ffn_selection.iter().enumerate() {
                    trace.push(SelectionRecord {
                        sequence: 0,
                        layer_step: layer,
                        member,
                        position,
                        token_id: tokens[position],
                        experts: sel.sorted_indices(),
                    });
                }
            }
        }
        if let Some(p) = self.final_norm {
            x = self.apply_norm(g, x, p, "final".into())?;
        }
        let wc = g.param(&self.store, self.classifier_w)?;
        let bc = g.param(&self.store, self.classifier_b)?;
        let logits = g.matmul(x, wc)?;
        let logits = g.add_row(logits, bc).map_err(|e| e.in_context("classifier"))?;
        let ffn_aux = mean_of(g, &ffn_terms)?;
        let att_aux = mean_of(g, &att_terms)?;
        Ok(ForwardOutput {
            logits,
            ffn_aux,
            att_aux,
            trace,
            residuals,
            residual_vars,
            routing,
        })
    }

    /// Next-token loss of one sequence: predicts `tokens[1..]` from `tokens[..n-1]`.
    pub fn loss(&self, g: &mut Graph<T>, tokens: &[usize], opts: &ForwardOptions) -> Result<LossOutput<T>> {
        self.loss_weighted(g, tokens, opts, self.config.gamma, self.config.delta)
    }

    /// [`Model::loss`] with explicit auxiliary-loss weights.
    pub fn loss_weighted(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        opts: &ForwardOptions,
        gamma: f64,
        delta: f64,
    ) -> Result<LossOutput<T>> {
        if tokens.len() < 2 {
            return Err(Error::Argument("loss needs at least two tokens".into()));
        }
        let n = tokens.len();
        let forward = self.forward(g, &tokens[..n - 1], opts)?;
        let ce = g.cross_entropy(forward.logits, &tokens[1..])?;
        let mut total = ce;
        if let Some(f) = forward.ffn_aux {
            let s = g.scale(f, gamma)?;
            total = g.add(total, s)?;
        }
        if let Some(a) = forward.att_aux {
            let s = g.scale(a, delta)?;
            total = g.add(total, s)?;
        }
        Ok(LossOutput { total, ce, forward })
    }
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)?))
}
