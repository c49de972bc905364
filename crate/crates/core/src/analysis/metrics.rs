//! Routing statistics computed from selection traces, and residual update norms.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::{Graph, Scalar};

use super::trace::{SelectionRecord, SelectionTrace};

fn write_rows<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

/// Activation counts per expert and layer step.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLayerHistogram {
    /// Layer steps in ascending order; column `c` of `counts` belongs to `layer_steps[c]`.
    pub layer_steps: Vec<usize>,
    /// `counts[e][c]`
    pub counts: Vec<Vec<u64>>,
}

impl ExpertLayerHistogram {
    pub fn n_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn column(&self, layer_step: usize) -> Option<usize> {
        self.layer_steps.binary_search(&layer_step).ok()
    }

    pub fn count(&self, expert: usize, layer_step: usize) -> u64 {
        self.column(layer_step).map_or(0, |c| self.counts[expert][c])
    }

    pub fn column_sum(&self, layer_step: usize) -> u64 {
        self.column(layer_step)
            .map_or(0, |c| self.counts.iter().map(|row| row[c]).sum())
    }

    /// CSV columns: `expert,layer_step,count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            expert: usize,
            layer_step: usize,
            count: u64,
        }
        write_rows(
            path,
            self.counts.iter().enumerate().flat_map(|(e, row)| {
                row.iter().zip(&self.layer_steps).map(move |(&count, &layer_step)| Row {
                    expert: e,
                    layer_step,
                    count,
                })
            }),
        )
    }
}

pub fn expert_layer_histogram(trace: &SelectionTrace) -> Result<ExpertLayerHistogram> {
    if trace.is_empty() {
        return Err(Error::Data("empty selection trace".into()));
    }
    let layer_steps = trace.layer_steps();
    let mut counts = vec![vec![0u64; layer_steps.len()]; trace.n_experts];
    for r in &trace.records {
        let c = layer_steps.binary_search(&r.layer_step).expect("step listed");
        for &e in &r.experts {
            counts[e][c] += 1;
        }
    }
    Ok(ExpertLayerHistogram { layer_steps, counts })
}

/// Activation-weighted mean layer step of `expert`; `None` if it was never selected.
pub fn layer_position_score(hist: &ExpertLayerHistogram, expert: usize) -> Option<f64> {
    let row = hist.counts.get(expert)?;
    let total: u64 = row.iter().sum();
    if total == 0 {
        return None;
    }
    let weighted: f64 = row
        .iter()
        .zip(&hist.layer_steps)
        .map(|(&c, &l)| c as f64 * l as f64)
        .sum();
    Some(weighted / total as f64)
}

/// Experts ordered by (position score, id); never-selected experts come last by id.
pub fn expert_order(hist: &ExpertLayerHistogram) -> Vec<(usize, Option<f64>)> {
    let mut v: Vec<(usize, Option<f64>)> = (0..hist.n_experts()).map(|e| (e, layer_position_score(hist, e))).collect();
    v.sort_by(|a, b| match (a.1, b.1) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.0.cmp(&b.0)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.0.cmp(&b.0),
    });
    v
}

/// CSV columns: `rank,expert,position_score` (empty score for unused experts).
pub fn write_expert_order_csv(hist: &ExpertLayerHistogram, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        rank: usize,
        expert: usize,
        position_score: Option<f64>,
    }
    write_rows(
        path,
        expert_order(hist)
            .into_iter()
            .enumerate()
            .map(|(rank, (expert, position_score))| Row {
                rank,
                expert,
                position_score,
            }),
    )
}

/// Occurrence counts per token id, counting each (sequence, position) once.
fn token_frequencies<'a>(records: impl Iterator<Item = &'a SelectionRecord>) -> HashMap<usize, usize> {
    let mut seen = HashMap::<usize, BTreeSet<(usize, usize)>>::new();
    for r in records {
        seen.entry(r.token_id).or_default().insert((r.sequence, r.position));
    }
    seen.into_iter().map(|(t, s)| (t, s.len())).collect()
}

/// Token ids sorted by decreasing frequency, ties by id, truncated to `cap`.
fn tokens_by_frequency(freq: &HashMap<usize, usize>, cap: Option<usize>) -> Vec<(usize, usize)> {
    let mut v: Vec<(usize, usize)> = freq.iter().map(|(&t, &c)| (t, c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    if let Some(cap) = cap {
        v.truncate(cap);
    }
    v
}

/// Number of distinct experts each token id was routed to at `layer_step`,
/// restricted to the `token_cap` most frequent tokens when given.
pub fn token_expert_diversity(
    trace: &SelectionTrace,
    layer_step: usize,
    token_cap: Option<usize>,
) -> BTreeMap<usize, usize> {
    let at_step = || trace.records.iter().filter(|r| r.layer_step == layer_step);
    let mut sets = HashMap::<usize, BTreeSet<usize>>::new();
    for r in at_step() {
        sets.entry(r.token_id).or_default().extend(r.experts.iter().copied());
    }
    let keep = tokens_by_frequency(&token_frequencies(at_step()), token_cap);
    keep.into_iter().map(|(t, _)| (t, sets[&t].len())).collect()
}

/// CSV columns: `layer_step,token_id,unique_experts`.
pub fn write_diversity_csv(trace: &SelectionTrace, token_cap: Option<usize>, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        layer_step: usize,
        token_id: usize,
        unique_experts: usize,
    }
    let mut rows = Vec::new();
    for l in trace.layer_steps() {
        for (token_id, unique_experts) in token_expert_diversity(trace, l, token_cap) {
            rows.push(Row {
                layer_step: l,
                token_id,
                unique_experts,
            });
        }
    }
    write_rows(path, rows)
}

fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean pairwise intersection-over-union between the expert sets chosen at different
/// layer steps for the same token.
#[derive(Clone, Debug, PartialEq)]
pub struct IouMatrix {
    pub layer_steps: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl IouMatrix {
    /// CSV columns: `layer_step_a,layer_step_b,iou`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            layer_step_a: usize,
            layer_step_b: usize,
            iou: f64,
        }
        let n = self.layer_steps.len();
        write_rows(
            path,
            (0..n).flat_map(|a| {
                (0..n).map(move |b| Row {
                    layer_step_a: self.layer_steps[a],
                    layer_step_b: self.layer_steps[b],
                    iou: self.values[a][b],
                })
            }),
        )
    }
}

/// Every (sequence, position) column must hold a record for every layer step in the trace.
pub fn column_selection_iou(trace: &SelectionTrace) -> Result<IouMatrix> {
    let layer_steps = trace.layer_steps();
    let n = layer_steps.len();
    let mut columns = BTreeMap::<(usize, usize), Vec<Option<&[usize]>>>::new();
    for r in &trace.records {
        let c = layer_steps.binary_search(&r.layer_step).expect("step listed");
        let col = columns.entry((r.sequence, r.position)).or_insert_with(|| vec![None; n]);
        if col[c].is_some() {
            return Err(Error::Data(format!(
                "duplicate record for sequence {} position {} layer step {}",
                r.sequence, r.position, r.layer_step
            )));
        }
        col[c] = Some(&r.experts);
    }
    let mut sums = vec![vec![0.0f64; n]; n];
    for ((seq, pos), col) in &columns {
        let sets: Vec<&[usize]> = col
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.ok_or_else(|| {
                    Error::Data(format!(
                        "sequence {seq} position {pos} has no record for layer step {}",
                        layer_steps[c]
                    ))
                })
            })
            .collect::<Result<_>>()?;
        for a in 0..n {
            for b in a + 1..n {
                sums[a][b] += iou(sets[a], sets[b]);
            }
        }
    }
    let m = columns.len().max(1) as f64;
    let mut values = vec![vec![1.0f64; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            values[a][b] = sums[a][b] / m;
            values[b][a] = values[a][b];
        }
    }
    Ok(IouMatrix { layer_steps, values })
}

/// Share of a token's experts (union over all layer steps) used at each layer step.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSpecialization {
    pub token_id: usize,
    /// Number of (sequence, position) occurrences.
    pub count: usize,
    /// Aligned with the trace's sorted layer steps.
    pub proportions: Vec<f64>,
}

/// Tokens in decreasing frequency order (ties by id), truncated to `token_cap`.
pub fn token_layer_specialization(trace: &SelectionTrace, token_cap: Option<usize>) -> Vec<TokenSpecialization> {
    let layer_steps = trace.layer_steps();
    let mut per_step = HashMap::<usize, Vec<BTreeSet<usize>>>::new();
    for r in &trace.records {
        let c = layer_steps.binary_search(&r.layer_step).expect("step listed");
        per_step
            .entry(r.token_id)
            .or_insert_with(|| vec![BTreeSet::new(); layer_steps.len()])[c]
            .extend(r.experts.iter().copied());
    }
    tokens_by_frequency(&token_frequencies(trace.records.iter()), token_cap)
        .into_iter()
        .map(|(token_id, count)| {
            let sets = &per_step[&token_id];
            let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
            let proportions = sets
                .iter()
                .map(|s| s.len() as f64 / union.len().max(1) as f64)
                .collect();
            TokenSpecialization {
                token_id,
                count,
                proportions,
            }
        })
        .collect()
}

/// CSV columns: `rank,token_id,count,layer_step,proportion`.
pub fn write_specialization_csv(trace: &SelectionTrace, token_cap: Option<usize>, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        rank: usize,
        token_id: usize,
        count: usize,
        layer_step: usize,
        proportion: f64,
    }
    let steps = trace.layer_steps();
    let mut rows = Vec::new();
    for (rank, s) in token_layer_specialization(trace, token_cap).into_iter().enumerate() {
        for (&layer_step, &proportion) in steps.iter().zip(&s.proportions) {
            rows.push(Row {
                rank,
                token_id: s.token_id,
                count: s.count,
                layer_step,
                proportion,
            });
        }
    }
    write_rows(path, rows)
}

/// Mean Euclidean norm of the residual update of one layer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerUpdateNorm {
    pub layer: usize,
    pub member: usize,
    pub mean_norm: f64,
}

/// Mean over all tokens of `‖x_after − x_before‖₂` for every layer step.
pub fn residual_update_norms<T: Scalar>(model: &Model<T>, sequences: &[Vec<usize>]) -> Result<Vec<LayerUpdateNorm>> {
    let members = model.schedule().members().to_vec();
    let mut sums = vec![0.0f64; members.len()];
    let mut tokens = 0usize;
    let opts = ForwardOptions {
        capture_residuals: true,
        ..ForwardOptions::default()
    };
    for seq in sequences {
        let mut g = Graph::new();
        let out = model.forward(&mut g, seq, &opts)?;
        let d = model.config().d_model;
        for (l, pair) in out.residuals.windows(2).enumerate() {
            for (before, after) in pair[0].data().chunks(d).zip(pair[1].data().chunks(d)) {
                let sq: f64 = before
                    .iter()
                    .zip(after)
                    .map(|(&b, &a)| {
                        let diff = a.as_f64() - b.as_f64();
                        diff * diff
                    })
                    .sum();
                sums[l] += sq.sqrt();
            }
        }
        tokens += seq.len();
    }
    if tokens == 0 {
        return Err(Error::Data("no tokens to measure".into()));
    }
    Ok(members
        .iter()
        .enumerate()
        .map(|(layer, &member)| LayerUpdateNorm {
            layer,
            member,
            mean_norm: sums[layer] / tokens as f64,
        })
        .collect())
}

/// CSV columns: `layer,member,mean_norm`.
pub fn write_update_norms_csv(norms: &[LayerUpdateNorm], path: &Path) -> Result<()> {
    write_rows(path, norms)
}
