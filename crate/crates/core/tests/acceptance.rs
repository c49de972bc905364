//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line (visible with
//! `--nocapture`) and fails when its criterion is not met.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use moeut::analysis::{
    column_selection_iou, expert_layer_histogram, layer_position_score, token_expert_diversity,
    token_layer_specialization, SelectionRecord, SelectionTrace,
};
use moeut::model::accounting::{derive_by_rules, DEFAULT_D_EXPERT};
use moeut::model::{
    build_schedule, count_params, mac_breakdown, Arch, DenseSpec, ForwardOptions, Model, ModelConfig, NormScheme,
    Pattern, RowKind, REFERENCE_ROWS, REFERENCE_VOCAB,
};
use moeut::moe_attention::{
    attention_entropy_reg, output_moe, switchhead_forward, value_moe, AttentionDims, AttentionInputs,
    AttentionParams, RopeTable,
};
use moeut::moe_ffn::{balancing_loss_from_logits, ffn_forward, FfnDims, FfnParams};
use moeut::tensor::gradcheck::{check_param_gradients, GradCheckOptions};
use moeut::tensor::OpKind;
use moeut::training::{
    evaluate_perplexity, load_checkpoint, save_checkpoint, synthetic_grammar_corpus, unigram_entropy, Corpus,
    TrainConfig, TrainState, Vocabulary,
};
use moeut::{Error, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, start: Instant, limit: Option<Duration>, outcome: Result<String, String>) {
    let elapsed = start.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:.2?}, limit {l:?}")),
        (o, _) => o,
    };
    match outcome {
        Ok(detail) => println!("[PASS] criterion {id}: {name} ({detail}; {elapsed:.2?})"),
        Err(detail) => {
            println!("[FAIL] criterion {id}: {name} ({detail}; {elapsed:.2?})");
            panic!("criterion {id} failed: {detail}");
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// 1 ------------------------------------------------------------------------------------

#[test]
fn criterion_01_parameter_count_reproduction() {
    let start = Instant::now();
    let outcome = (|| {
        let mut worst: f64 = 0.0;
        let mut n = 0;
        for row in REFERENCE_ROWS.iter().filter(|r| r.kind != RowKind::Dense) {
            let got = count_params(&row.config(REFERENCE_VOCAB)) as f64;
            let want = row.reported_params();
            let rel = (got - want).abs() / want;
            let small = [44.0, 126.0, 243.0, 244.0].contains(&row.reported_millions);
            let tol = if small { 0.02 } else { 0.03 };
            ensure(rel <= tol, || {
                format!("{}: {got} vs {want} ({:.2}% > {:.0}%)", row.name(), rel * 100.0, tol * 100.0)
            })?;
            worst = worst.max(rel);
            n += 1;
        }
        Ok(format!("{n} rows, worst deviation {:.2}%", worst * 100.0))
    })();
    report(1, "parameter counts", start, Some(Duration::from_secs(1)), outcome);
}

// 2 ------------------------------------------------------------------------------------

#[test]
fn criterion_02_mac_matching() {
    let start = Instant::now();
    let outcome = (|| {
        let dense_row = REFERENCE_ROWS
            .iter()
            .find(|r| r.kind == RowKind::Dense && r.reported_millions == 244.0)
            .unwrap();
        let moe_row = REFERENCE_ROWS
            .iter()
            .find(|r| r.kind == RowKind::Moeut && r.reported_millions == 243.0)
            .unwrap();
        let dense = dense_row.config(REFERENCE_VOCAB);
        let moe = moe_row.config(REFERENCE_VOCAB);
        ensure(moe.n_heads == dense.n_heads / 4 && moe.d_head == 2 * dense.d_head && moe.k_att == 2, || {
            "244M row does not follow the head substitution".into()
        })?;
        ensure(moe.k == 2 * moe.d_model / moe.d_expert, || format!("K = {} != 2·d_model/d_expert", moe.k))?;
        let per_layer = |c: &ModelConfig| {
            let b = mac_breakdown(c, 1);
            (b.value_output / c.n_layers as u64, b.ffn / c.n_layers as u64)
        };
        let (vo_d, ffn_d) = per_layer(&dense);
        let (vo_m, ffn_m) = per_layer(&moe);
        ensure(vo_d == vo_m, || format!("value+output MACs {vo_m} != dense {vo_d}"))?;
        ensure(ffn_m == (2 * moe.d_model * moe.d_expert * moe.k) as u64, || "FFN MACs formula".into())?;
        let ratio = ffn_m as f64 / ffn_d as f64;
        let analytic = 2.0 * dense.d_model as f64 / dense.d_ff as f64;
        ensure((ratio - analytic).abs() < 1e-12, || format!("ratio {ratio} != 2·d_model/d_ff {analytic}"))?;
        ensure((ratio - 0.5).abs() <= 0.01, || format!("FFN MAC ratio {ratio:.4} not within 0.50 ± 0.01"))?;

        // The substitution rules keep value/output MACs equal for every dense baseline.
        for d in REFERENCE_ROWS.iter().filter(|r| r.kind == RowKind::Dense) {
            let dense_dims = DenseSpec {
                d_model: d.d_model,
                n_layers: d.n_layers,
                n_heads: d.n_heads,
                d_head: d.d_head,
                d_ff: d.d_ff,
                vocab_size: REFERENCE_VOCAB,
            };
            if d.n_heads % 4 != 0 {
                continue;
            }
            let m = derive_by_rules(&dense_dims, d.reported_params()).map_err(|e| e.to_string())?;
            let (a, _) = per_layer(&dense_dims.config());
            let (b, f) = per_layer(&m);
            ensure(a == b, || format!("{}: value/output MACs {b} vs dense {a}", d.name()))?;
            ensure(f == (2 * m.d_model * DEFAULT_D_EXPERT * m.k) as u64, || "FFN MACs formula".into())?;
        }
        Ok(format!("value/output MACs equal ({vo_m}/token/layer), FFN ratio {ratio:.4}"))
    })();
    report(2, "MAC matching", start, Some(Duration::from_secs(1)), outcome);
}

// 3 ------------------------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(x: &[f64], w: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += x[r] * w[r * cols + c] as f64;
        }
    }
    out
}

/// Indices of the `k` largest scores, or `None` when the k-th and (k+1)-th are too
/// close to be ranked reliably in single precision.
fn dense_mask(scores: &[f64], k: usize) -> Option<Vec<bool>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    if k < scores.len() && (scores[idx[k - 1]] - scores[idx[k]]).abs() < 1e-4 {
        return None;
    }
    let mut mask = vec![false; scores.len()];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    Some(mask)
}

/// Every expert evaluated for every token; unselected ones multiplied by zero.
fn dense_moe(
    x: &Tensor<f32>,
    sel_in: &Tensor<f32>,
    w_s: &[f32],
    n: usize,
    k: usize,
    expert: impl Fn(usize, &[f64]) -> Vec<f64>,
) -> Option<Vec<f64>> {
    let (t, d) = (x.rows(), sel_in.cols());
    let mut out = Vec::new();
    for r in 0..t {
        let xr: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
        let sr: Vec<f64> = sel_in.row(r).iter().map(|&v| v as f64).collect();
        let scores: Vec<f64> = matvec(&sr, w_s, d, n).into_iter().map(sigmoid).collect();
        let mask = dense_mask(&scores, k)?;
        let mut acc: Option<Vec<f64>> = None;
        for e in 0..n {
            let y = expert(e, &xr);
            let gate = if mask[e] { scores[e] } else { 0.0 };
            let acc = acc.get_or_insert_with(|| vec![0.0; y.len()]);
            for (a, v) in acc.iter_mut().zip(&y) {
                *a += gate * v;
            }
        }
        out.extend(acc.unwrap());
    }
    Some(out)
}

fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(&g, &w)| (g as f64 - w).powi(2)).sum::<f64>().sqrt();
    let den: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn ffn_case(seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=24);
    let de = rng.random_range(1..=16);
    let n = rng.random_range(1..=12);
    let k = rng.random_range(1..=n);
    let t = rng.random_range(1..=10);
    let dims = FfnDims {
        d_model: d,
        d_expert: de,
        n_experts: n,
        k,
    };
    let mut store = ParamStore::<f32>::new();
    let p = FfnParams::init(&mut store, "ffn", dims, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[t, d]);
    let sel = random_tensor(&mut rng, &[t, d]);
    let (w1, w2, ws) = (store.get(p.w1).clone(), store.get(p.w2).clone(), store.get(p.w_s).clone());
    let want = dense_moe(&x, &sel, ws.data(), n, k, |e, xr| {
        let h: Vec<f64> = matvec(xr, &w1.data()[e * d * de..(e + 1) * d * de], d, de)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        matvec(&h, &w2.data()[e * de * d..(e + 1) * de * d], de, d)
    })?;
    let mut g = Graph::new();
    let bank = p.bind(&mut g, &store).unwrap();
    let xv = g.input(x).unwrap();
    let sv = g.input(sel).unwrap();
    let out = ffn_forward(&mut g, xv, sv, &bank, k).unwrap();
    Some(rel_err(g.value(out.y).data(), &want))
}

fn attention_case(seed: u64, output_side: bool) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dh = 2 * rng.random_range(1..=8);
    let d = rng.random_range(2..=24);
    let n = rng.random_range(1..=8);
    let k = rng.random_range(1..=n);
    let t = rng.random_range(1..=10);
    let dims = AttentionDims {
        d_model: d,
        n_heads: 1,
        d_head: dh,
        n_experts: n,
        k,
    };
    let mut store = ParamStore::<f32>::new();
    let p = AttentionParams::init(&mut store, "att", dims, &mut rng).unwrap();
    let hp = &p.heads[0];
    let (in_dim, out_dim, w, ws) = if output_side {
        (dh, d, store.get(hp.wo).clone(), store.get(hp.wso).clone())
    } else {
        (d, dh, store.get(hp.wv).clone(), store.get(hp.wsv).clone())
    };
    let x = random_tensor(&mut rng, &[t, in_dim]);
    let sel = random_tensor(&mut rng, &[t, d]);
    let want = dense_moe(&x, &sel, ws.data(), n, k, |e, xr| {
        matvec(xr, &w.data()[e * in_dim * out_dim..(e + 1) * in_dim * out_dim], in_dim, out_dim)
    })?;
    let mut g = Graph::new();
    let head = p.bind(&mut g, &store).unwrap()[0];
    let xv = g.input(x).unwrap();
    let sv = g.input(sel).unwrap();
    let out = if output_side {
        output_moe(&mut g, xv, sv, &head).unwrap()
    } else {
        value_moe(&mut g, xv, sv, &head).unwrap()
    };
    Some(rel_err(g.value(out.out).data(), &want))
}

#[test]
fn criterion_03_sparse_dense_equivalence() {
    let start = Instant::now();
    let outcome = (|| {
        let mut summary = Vec::new();
        for (name, case) in [
            ("ffn_forward", &(|s| ffn_case(s)) as &dyn Fn(u64) -> Option<f64>),
            ("value_moe", &|s| attention_case(s, false)),
            ("output_moe", &|s| attention_case(s, true)),
        ] {
            let (mut cases, mut worst, mut seed) = (0, 0.0f64, 0u64);
            while cases < 120 {
                seed += 1;
                let Some(err) = case(seed) else { continue };
                ensure(err <= 1e-6, || format!("{name} seed {seed}: relative error {err:e}"))?;
                worst = worst.max(err);
                cases += 1;
            }
            summary.push(format!("{name} {cases} cases max {worst:.1e}"));
        }
        Ok(summary.join(", "))
    })();
    report(3, "sparse/dense routing equivalence", start, Some(Duration::from_secs(60)), outcome);
}

// 4 ------------------------------------------------------------------------------------

fn toy_config() -> ModelConfig {
    ModelConfig {
        arch: Arch::Moeut,
        d_model: 16,
        n_layers: 4,
        group_size: 2,
        pattern: Pattern::Cyclic,
        n_heads: 2,
        d_head: 8,
        n_att_experts: 2,
        k_att: 1,
        d_expert: 8,
        n_experts: 8,
        k: 2,
        d_ff: 0,
        vocab_size: 32,
        context_length: 16,
        norm_scheme: NormScheme::Peri,
        gamma: 0.01,
        delta: 0.001,
    }
}

#[test]
fn criterion_04_gradient_correctness() {
    let start = Instant::now();
    let outcome = (|| {
        let mut summary = (0.0f64, 0usize, 0usize, 0usize);
        for seed in 0..2u64 {
            let model = Model::<f64>::new(toy_config(), seed).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let tokens: Vec<usize> = (0..8).map(|_| rng.random_range(0..32)).collect();
            let mut m = model.clone();
            let report = check_param_gradients(model.params(), GradCheckOptions::default(), |store, g| {
                *m.params_mut() = store.clone();
                let out = m.loss(g, &tokens, &ForwardOptions::default())?;
                Ok((out.total, out.forward.routing))
            })
            .map_err(|e| e.to_string())?;
            for r in &report {
                ensure(r.rel_error < 1e-4, || {
                    format!("seed {seed} {}: relative error {:e}", r.name, r.rel_error)
                })?;
                ensure(r.checked * 2 >= r.checked + r.skipped, || {
                    format!("seed {seed} {}: only {} of {} coordinates comparable", r.name, r.checked, r.checked + r.skipped)
                })?;
                summary.0 = summary.0.max(r.rel_error);
                summary.1 += 1;
                summary.2 += r.checked;
                summary.3 += r.skipped;
            }
        }
        Ok(format!(
            "{} tensors, {} coordinates, {} skipped at routing boundaries/kinks, max rel error {:.1e}",
            summary.1, summary.2, summary.3, summary.0
        ))
    })();
    report(4, "gradient correctness", start, Some(Duration::from_secs(300)), outcome);
}

// 5 ------------------------------------------------------------------------------------

#[test]
fn criterion_05_balancing_bounds() {
    let start = Instant::now();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            let t = rng.random_range(1..=20);
            let n = rng.random_range(1..=64);
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let logits: Vec<f64> = (0..t * n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let mut g = Graph::<f64>::new();
            let l = g.input(Tensor::new(vec![t, n], logits).unwrap()).unwrap();
            let loss = balancing_loss_from_logits(&mut g, l).unwrap();
            let v = g.value(loss).item();
            let lo = -(n as f64).ln();
            ensure(v >= lo - 1e-12 && v <= 1e-12, || format!("input {i}: {v} outside [{lo}, 0]"))?;
        }
        for n in [1usize, 2, 7, 16, 387] {
            let mut g = Graph::<f64>::new();
            let l = g.input(Tensor::full(vec![5, n], 0.3)).unwrap();
            let loss = balancing_loss_from_logits(&mut g, l).unwrap();
            let v = g.value(loss).item();
            let want = -(n as f64).ln();
            ensure((v - want).abs() <= 1e-12 * want.abs().max(1.0), || {
                format!("uniform routing over {n}: {v} vs {want}")
            })?;
        }
        for (h, na) in [(1usize, 2usize), (2, 4), (4, 10)] {
            let dims = AttentionDims {
                d_model: 8,
                n_heads: h,
                d_head: 4,
                n_experts: na,
                k: 1,
            };
            let mut store = ParamStore::<f64>::new();
            let mut prng = ChaCha8Rng::seed_from_u64(h as u64);
            let p = AttentionParams::init(&mut store, "att", dims, &mut prng).unwrap();
            for hp in &p.heads {
                store.set(hp.wsv, Tensor::zeros(vec![8, na]));
                store.set(hp.wso, Tensor::zeros(vec![8, na]));
            }
            let mut g = Graph::new();
            let heads = p.bind(&mut g, &store).unwrap();
            let x = g.input(Tensor::full(vec![6, 8], 0.5)).unwrap();
            let inputs = AttentionInputs {
                query: x,
                key: x,
                value: x,
                value_selector: x,
                output_selector: x,
            };
            let rope = RopeTable::new(4, 6);
            let out = switchhead_forward(&mut g, inputs, &heads, &rope).unwrap();
            let reg = attention_entropy_reg(&mut g, &out.selector_logits).unwrap();
            let v = g.value(reg).item();
            let want = -2.0 * h as f64 * (na as f64).ln();
            ensure((v - want).abs() <= 1e-12 * want.abs(), || format!("H={h} N_A={na}: {v} vs {want}"))?;
        }
        Ok("1000 random inputs within bounds; uniform cases exact".into())
    })();
    report(5, "balancing-loss bounds", start, Some(Duration::from_secs(10)), outcome);
}

// 6 ------------------------------------------------------------------------------------

#[test]
fn criterion_06_schedules() {
    let start = Instant::now();
    let outcome = (|| {
        let s = build_schedule(8, 2, Pattern::Cyclic).unwrap();
        ensure(s.members() == [0, 1, 0, 1, 0, 1, 0, 1], || format!("ABAB: {:?}", s.members()))?;
        let s = build_schedule(6, 2, Pattern::Blocked).unwrap();
        ensure(s.members() == [0, 0, 0, 1, 1, 1], || format!("AAABBB: {:?}", s.members()))?;
        let mut checked = 0;
        for n in 1..=36usize {
            for g in 1..=36usize {
                let cyc = build_schedule(n, g, Pattern::Cyclic);
                let blk = build_schedule(n, g, Pattern::Blocked);
                if g > n || n % g != 0 {
                    ensure(matches!(cyc, Err(Error::Config(_))) && matches!(blk, Err(Error::Config(_))), || {
                        format!("({n},{g}) should be rejected")
                    })?;
                    continue;
                }
                let want_c: Vec<usize> = (0..n).map(|l| l % g).collect();
                let want_b: Vec<usize> = (0..n).map(|l| l / (n / g)).collect();
                ensure(cyc.unwrap().members() == want_c, || format!("cyclic ({n},{g})"))?;
                ensure(blk.unwrap().members() == want_b, || format!("blocked ({n},{g})"))?;
                checked += 2;
            }
        }
        Ok(format!("{checked} schedules"))
    })();
    report(6, "schedule correctness", start, None, outcome);
}

// 7 ------------------------------------------------------------------------------------

fn norm_structure(scheme: NormScheme) -> Result<String, String> {
    let cfg = ModelConfig {
        norm_scheme: scheme,
        ..toy_config()
    };
    let model = Model::<f32>::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &[1, 2, 3, 4, 5], &ForwardOptions::default())
        .map_err(|e| e.to_string())?;
    let nodes: Vec<_> = g.nodes().collect();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut consumers: HashMap<usize, Vec<OpKind>> = HashMap::new();
    for n in &nodes {
        for i in &n.inputs {
            consumers.entry(i.index()).or_default().push(n.kind);
        }
    }
    let mut norm_vars = BTreeSet::new();
    for n in nodes.iter().filter(|n| n.kind == OpKind::LayerNorm) {
        *labels.entry(n.label.unwrap_or("?").to_owned()).or_default() += 1;
        norm_vars.insert(n.var.index());
    }
    let sites: &[&str] = match scheme {
        NormScheme::Peri => &["q", "k", "att_v_sel", "att_o_sel", "ffn_sel"],
        NormScheme::Pre => &["att_in", "ffn_in"],
        NormScheme::Post => &["att_out", "ffn_out"],
    };
    let mut want: BTreeMap<String, usize> = BTreeMap::new();
    for l in 0..cfg.n_layers {
        for s in sites {
            want.insert(format!("L{l}.{s}"), 1);
        }
    }
    if scheme != NormScheme::Post {
        want.insert("final".into(), 1);
    }
    ensure(labels == want, || format!("{scheme}: norm sites {labels:?}, expected {want:?}"))?;

    // Residual stream: x_{l+1} = (x_l + attention) + feedforward, optionally normalized (post).
    for l in 0..cfg.n_layers {
        let before = out.residual_vars[l].index();
        let mut after = out.residual_vars[l + 1].index();
        let is_norm = norm_vars.contains(&after);
        ensure(is_norm == (scheme == NormScheme::Post), || {
            format!("{scheme}: residual after layer {l} normalized = {is_norm}")
        })?;
        let node = |i: usize| nodes.iter().find(|n| n.var.index() == i).unwrap();
        if is_norm {
            after = node(after).inputs[0].index();
        }
        let add = node(after);
        ensure(add.kind == OpKind::Add, || format!("{scheme}: layer {l} output is {:?}", add.kind))?;
        let mut h = add.inputs[0].index();
        if scheme == NormScheme::Post {
            ensure(norm_vars.contains(&h), || format!("post: attention sum of layer {l} not normalized"))?;
            h = node(h).inputs[0].index();
        }
        let mid = node(h);
        ensure(mid.kind == OpKind::Add && mid.inputs[0].index() == before, || {
            format!("{scheme}: layer {l} residual does not pass x_l through an addition")
        })?;
    }
    if scheme == NormScheme::Peri {
        // Norm outputs feed only projections and selectors (and the classifier), never the residual.
        for v in &norm_vars {
            let kinds = consumers.get(v).cloned().unwrap_or_default();
            ensure(kinds.iter().all(|k| *k == OpKind::MatMul), || {
                format!("peri norm output consumed by {kinds:?}")
            })?;
        }
    }
    Ok(format!("{scheme}: {} norms", norm_vars.len()))
}

#[test]
fn criterion_07_peri_norm_structure() {
    let start = Instant::now();
    let outcome = (|| {
        let parts = [NormScheme::Peri, NormScheme::Pre, NormScheme::Post]
            .into_iter()
            .map(norm_structure)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(parts.join(", "))
    })();
    report(7, "norm placement", start, None, outcome);
}

// 8 ------------------------------------------------------------------------------------

fn training_run(train: &Corpus) -> Result<(Vec<f64>, TrainState), String> {
    let cfg = TrainConfig {
        batch_size: 8,
        context_length: 256,
        steps: 500,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(ModelConfig::default(), cfg).map_err(|e| e.to_string())?;
    let mut losses = Vec::with_capacity(500);
    for _ in 0..500 {
        losses.push(state.step_on(train).map_err(|e| e.to_string())?.loss);
    }
    Ok((losses, state))
}

#[test]
fn criterion_08_training_sanity() {
    let start = Instant::now();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let text = synthetic_grammar_corpus(&mut rng, 1 << 20);
        let corpus = Corpus::from_text(&text, &Vocabulary::Bytes).map_err(|e| e.to_string())?;
        ensure(corpus.len() == 1 << 20, || "corpus is not 1MB".into())?;
        let (train, held) = corpus.split_holdout(0.05);
        let bound = unigram_entropy(&corpus.tokens).exp();

        let (losses, state) = training_run(&train)?;
        let avgs: Vec<f64> = losses.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        ensure(avgs.windows(2).all(|w| w[1] < w[0]), || {
            format!("100-step averages not strictly decreasing: {avgs:?}")
        })?;
        let ppl = evaluate_perplexity(&state.model, &held.tokens, 256).map_err(|e| e.to_string())?;
        ensure(ppl < bound, || format!("perplexity {ppl:.3} >= unigram bound {bound:.3}"))?;

        let (again, _) = training_run(&train)?;
        let same = losses.iter().zip(&again).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || "rerun with the same seed diverged".into())?;
        let avgs: Vec<String> = avgs.iter().map(|a| format!("{a:.3}")).collect();
        Ok(format!(
            "window means [{}], perplexity {ppl:.3} < {bound:.3}, rerun bitwise identical",
            avgs.join(", ")
        ))
    })();
    report(8, "training sanity", start, Some(Duration::from_secs(1800)), outcome);
}

// 9 ------------------------------------------------------------------------------------

fn synthetic_trace(seed: u64) -> (SelectionTrace, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_experts, k) = (16, 4);
    let steps = [0usize, 2, 4, 6, 8, 10, 12, 14];
    let mut trace = SelectionTrace::new(n_experts);
    for seq in 0..50 {
        for pos in 0..25 {
            // Skewed token distribution: low ids are frequent.
            let u: f64 = rng.random();
            let token = (u * u * 30.0) as usize;
            for &l in &steps {
                let mut set = BTreeSet::new();
                // Partially token- and layer-dependent routing.
                if rng.random_bool(0.6) {
                    set.insert((token + l) % n_experts);
                }
                while set.len() < k {
                    set.insert(rng.random_range(0..n_experts));
                }
                trace
                    .push(SelectionRecord {
                        sequence: seq,
                        layer_step: l,
                        member: 0,
                        position: pos,
                        token_id: token,
                        experts: set.into_iter().collect(),
                    })
                    .unwrap();
            }
        }
    }
    (trace, k)
}

#[test]
fn criterion_09_analysis_oracles() {
    let start = Instant::now();
    let outcome = (|| {
        let (trace, k) = synthetic_trace(9);
        ensure(trace.len() == 10_000, || format!("{} records", trace.len()))?;
        let recs = &trace.records;
        let steps: Vec<usize> = recs.iter().map(|r| r.layer_step).collect::<BTreeSet<_>>().into_iter().collect();

        // Histogram: direct tally.
        let hist = expert_layer_histogram(&trace).map_err(|e| e.to_string())?;
        for e in 0..16 {
            for &l in &steps {
                let want = recs.iter().filter(|r| r.layer_step == l && r.experts.contains(&e)).count() as u64;
                ensure(hist.count(e, l) == want, || format!("histogram[{e}][{l}]"))?;
            }
        }
        for &l in &steps {
            let tokens = recs.iter().filter(|r| r.layer_step == l).count() as u64;
            ensure(hist.column_sum(l) == tokens * k as u64, || format!("column sum at {l}"))?;
        }
        // Position score: weighted mean over records.
        for e in 0..16 {
            let mine: Vec<f64> = recs.iter().filter(|r| r.experts.contains(&e)).map(|r| r.layer_step as f64).collect();
            let want = (!mine.is_empty()).then(|| mine.iter().sum::<f64>() / mine.len() as f64);
            let got = layer_position_score(&hist, e);
            ensure(
                match (got, want) {
                    (Some(a), Some(b)) => (a - b).abs() <= 1e-12 * b.max(1.0),
                    (None, None) => true,
                    _ => false,
                },
                || format!("position score of expert {e}: {got:?} vs {want:?}"),
            )?;
        }
        // Diversity: set union per token.
        for &l in &steps {
            let got = token_expert_diversity(&trace, l, None);
            let mut want: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
            for r in recs.iter().filter(|r| r.layer_step == l) {
                want.entry(r.token_id).or_default().extend(&r.experts);
            }
            let want: BTreeMap<usize, usize> = want.into_iter().map(|(t, s)| (t, s.len())).collect();
            ensure(got == want, || format!("diversity at step {l}"))?;
            ensure(got.values().all(|&c| c >= k), || "diversity below K".into())?;
        }
        // IoU: pairwise over columns.
        let iou = column_selection_iou(&trace).map_err(|e| e.to_string())?;
        let mut cols: BTreeMap<(usize, usize), BTreeMap<usize, BTreeSet<usize>>> = BTreeMap::new();
        for r in recs {
            cols.entry((r.sequence, r.position))
                .or_default()
                .insert(r.layer_step, r.experts.iter().copied().collect());
        }
        for (a, &la) in steps.iter().enumerate() {
            ensure(iou.values[a][a] == 1.0, || "IoU diagonal".into())?;
            for (b, &lb) in steps.iter().enumerate() {
                ensure(iou.values[a][b] == iou.values[b][a], || "IoU asymmetric".into())?;
                ensure((0.0..=1.0).contains(&iou.values[a][b]), || "IoU out of range".into())?;
                if a == b {
                    continue;
                }
                let want = cols
                    .values()
                    .map(|c| {
                        let (x, y) = (&c[&la], &c[&lb]);
                        x.intersection(y).count() as f64 / x.union(y).count() as f64
                    })
                    .sum::<f64>()
                    / cols.len() as f64;
                ensure((iou.values[a][b] - want).abs() <= 1e-12, || format!("IoU[{la}][{lb}]"))?;
            }
        }
        // Specialization: set arithmetic per token, decreasing frequency.
        let profiles = token_layer_specialization(&trace, None);
        let mut freq: BTreeMap<usize, BTreeSet<(usize, usize)>> = BTreeMap::new();
        for r in recs {
            freq.entry(r.token_id).or_default().insert((r.sequence, r.position));
        }
        ensure(profiles.len() == freq.len(), || "specialization token count".into())?;
        ensure(profiles.windows(2).all(|w| w[0].count >= w[1].count), || "not in decreasing frequency".into())?;
        for s in &profiles {
            ensure(s.count == freq[&s.token_id].len(), || format!("frequency of token {}", s.token_id))?;
            let per: Vec<BTreeSet<usize>> = steps
                .iter()
                .map(|&l| {
                    recs.iter()
                        .filter(|r| r.token_id == s.token_id && r.layer_step == l)
                        .flat_map(|r| r.experts.iter().copied())
                        .collect()
                })
                .collect();
            let union: BTreeSet<usize> = per.iter().flatten().copied().collect();
            for (i, set) in per.iter().enumerate() {
                let want = set.len() as f64 / union.len() as f64;
                ensure(s.proportions[i] == want, || format!("specialization of token {}", s.token_id))?;
            }
            ensure(s.proportions.iter().all(|&p| p <= 1.0), || "proportion above 1".into())?;
            ensure(s.proportions.iter().sum::<f64>() >= 1.0, || "proportions sum below 1".into())?;
        }
        Ok(format!("{} records, {} tokens, {} layer steps", trace.len(), profiles.len(), steps.len()))
    })();
    report(9, "analysis oracles", start, Some(Duration::from_secs(60)), outcome);
}

// 10 -----------------------------------------------------------------------------------

#[test]
fn criterion_10_checkpoint_resume() {
    let start = Instant::now();
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let text = synthetic_grammar_corpus(&mut rng, 100_000);
        let corpus = Corpus::from_text(&text, &Vocabulary::Bytes).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            batch_size: 4,
            context_length: 64,
            steps: 20,
            warmup_steps: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let n = 10;
        let mut straight = TrainState::new(ModelConfig::default(), cfg.clone()).map_err(|e| e.to_string())?;
        let full: Vec<u64> = (0..2 * n)
            .map(|_| straight.step_on(&corpus).map(|m| m.loss.to_bits()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut first = TrainState::new(ModelConfig::default(), cfg).map_err(|e| e.to_string())?;
        let mut resumed: Vec<u64> = (0..n)
            .map(|_| first.step_on(&corpus).map(|m| m.loss.to_bits()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        save_checkpoint(&first, dir.path()).map_err(|e| e.to_string())?;
        drop(first);
        let mut second = load_checkpoint(dir.path()).map_err(|e| e.to_string())?;
        for _ in 0..n {
            resumed.push(second.step_on(&corpus).map_err(|e| e.to_string())?.loss.to_bits());
        }
        ensure(full == resumed, || "loss traces differ after resume".into())?;
        let same_params = straight
            .model
            .params()
            .ids()
            .all(|id| straight.model.params().get(id).data() == second.model.params().get(id).data());
        ensure(same_params, || "final parameters differ".into())?;
        Ok(format!("{} steps bitwise identical", 2 * n))
    })();
    report(10, "checkpoint resume equivalence", start, None, outcome);
}
