//! Editing-quality metrics over the synthetic model, plus the gap-curve
//! harness comparing merge strategies against the joint edit.
//!
//! A layer induces a distribution over codebook objects for any key via a
//! softmax of negative squared distances, `P(o | k) ∝ exp(−‖W·k − v(o)‖²/τ)`.
//! Score-style metrics (ES/PS/NS) compare probabilities; accuracy-style
//! metrics (EA/PA/NA) compare argmaxes. Both families are invariant to the
//! temperature because the softmax is monotone in distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collab::{
    client_get_delta_and_kkt, server_baseline_merge, server_collab_merge, EditPacket,
    LayerStack, MergeStrategy,
};
use crate::editor::global_edit;
use crate::error::{Error, Result};
use crate::knowledge::{
    init_layer_with_mu, partition_by_client, sample_edit_requests, EditRequest, FeatureMapConfig,
    SyntheticLayer, Universe,
};
use crate::linalg;

pub const TAU_DEFAULT: f64 = 0.1;
pub const N_PARAPHRASES_DEFAULT: usize = 2;
pub const NEIGHBORS_PER_EDIT_DEFAULT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tau: f64,
    pub n_paraphrases: usize,
    pub neighbors_per_edit: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tau: TAU_DEFAULT,
            n_paraphrases: N_PARAPHRASES_DEFAULT,
            neighbors_per_edit: NEIGHBORS_PER_EDIT_DEFAULT,
        }
    }
}

/// Probability of every codebook object given a key; sums to one.
pub fn object_distribution(
    universe: &Universe,
    layer: &SyntheticLayer,
    key: &[f64],
    tau: f64,
) -> Vec<f64> {
    let out = layer.output(key);
    let logits: Vec<f64> = universe
        .codebook
        .iter()
        .map(|(_, v)| {
            let d2: f64 = out.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            -d2 / tau
        })
        .collect();
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn prob_of(
    universe: &Universe,
    layer: &SyntheticLayer,
    key: &[f64],
    object: u64,
    tau: f64,
) -> Result<f64> {
    if object as usize >= universe.codebook.len() {
        return Err(Error::UnknownObject {
            id: object,
            codebook_size: universe.codebook.len(),
        });
    }
    Ok(object_distribution(universe, layer, key, tau)[object as usize])
}

/// Object with the highest probability; ties break toward the lowest id.
pub fn argmax_object(universe: &Universe, layer: &SyntheticLayer, key: &[f64]) -> u64 {
    let out = layer.output(key);
    let mut best = (f64::INFINITY, 0u64);
    for (o, v) in universe.codebook.iter() {
        let d2: f64 = out.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.0 {
            best = (d2, o);
        }
    }
    best.1
}

fn percentage(hits: usize, total: usize) -> f64 {
    if total == 0 {
        100.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

fn paraphrase_seed(request: &EditRequest, idx: u64) -> u64 {
    request
        .fact
        .subject
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ request.fact.relation.wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ idx.wrapping_mul(0x1656_67b1_9e37_79f9)
}

/// Percentage of requests where the new object's probability is at least
/// the old object's.
pub fn efficacy_score(
    universe: &Universe,
    layer: &SyntheticLayer,
    requests: &[EditRequest],
    tau: f64,
) -> Result<f64> {
    if requests.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    for r in requests {
        let key = universe.key_of_fact(&r.fact);
        let dist = object_distribution(universe, layer, &key, tau);
        if dist[r.fact.object as usize] >= dist[r.old_object as usize] {
            hits += 1;
        }
    }
    Ok(percentage(hits, requests.len()))
}

/// Same comparison over perturbed keys, strict inequality, averaged over
/// `n_paraphrases` perturbations per request.
pub fn paraphrase_score(
    universe: &Universe,
    layer: &SyntheticLayer,
    requests: &[EditRequest],
    n_paraphrases: usize,
    tau: f64,
) -> Result<f64> {
    if requests.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for r in requests {
        let key = universe.key_of_fact(&r.fact);
        for p in 0..n_paraphrases {
            let perturbed = universe.perturb_key(&key, paraphrase_seed(r, p as u64));
            let dist = object_distribution(universe, layer, &perturbed, tau);
            if dist[r.fact.object as usize] > dist[r.old_object as usize] {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(percentage(hits, total))
}

/// Neighborhood facts of an edit: base facts sharing the relation and old
/// object. Falls back to padding with other (unedited) base facts when too
/// few exist; the returned flag counts padded entries.
fn neighbors_of<'a>(
    layer: &'a SyntheticLayer,
    edit: &EditRequest,
    per_edit: usize,
) -> (Vec<&'a crate::knowledge::Fact>, usize) {
    let mut found: Vec<_> = layer
        .base_facts
        .iter()
        .filter(|f| {
            f.relation == edit.fact.relation
                && f.object == edit.old_object
                && f.lookup() != edit.fact.lookup()
        })
        .take(per_edit)
        .collect();
    let mut fallback = 0usize;
    if found.len() < per_edit {
        for f in &layer.base_facts {
            if found.len() >= per_edit {
                break;
            }
            if f.lookup() != edit.fact.lookup() && !found.iter().any(|g| g.lookup() == f.lookup())
            {
                found.push(f);
                fallback += 1;
            }
        }
    }
    (found, fallback)
}

/// Percentage of neighborhood keys that still prefer their own object over
/// the edit's new object. Vacuously 100 when there is nothing to compare.
pub fn neighborhood_score(
    universe: &Universe,
    layer: &SyntheticLayer,
    edits: &[EditRequest],
    neighbors_per_edit: usize,
    tau: f64,
) -> Result<(f64, f64)> {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut fallbacks = 0usize;
    for edit in edits {
        let (neighbors, padded) = neighbors_of(layer, edit, neighbors_per_edit);
        fallbacks += padded;
        for n in neighbors {
            let key = universe.key_of(n.subject, n.relation);
            let dist = object_distribution(universe, layer, &key, tau);
            if dist[n.object as usize] > dist[edit.fact.object as usize] {
                hits += 1;
            }
            total += 1;
        }
    }
    let frac = if total == 0 {
        0.0
    } else {
        fallbacks as f64 / total as f64
    };
    Ok((percentage(hits, total), frac))
}

/// Argmax-based accuracy metrics: EA on original keys, PA on paraphrased
/// keys, NA on neighborhood keys (target: the neighbor's own object).
pub fn accuracy_metrics(
    universe: &Universe,
    layer: &SyntheticLayer,
    requests: &[EditRequest],
    opts: &EvalOptions,
) -> Result<(f64, f64, f64)> {
    if requests.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut ea = 0usize;
    let mut pa = 0usize;
    let mut pa_total = 0usize;
    let mut na = 0usize;
    let mut na_total = 0usize;
    for r in requests {
        let key = universe.key_of_fact(&r.fact);
        if argmax_object(universe, layer, &key) == r.fact.object {
            ea += 1;
        }
        for p in 0..opts.n_paraphrases {
            let perturbed = universe.perturb_key(&key, paraphrase_seed(r, p as u64));
            if argmax_object(universe, layer, &perturbed) == r.fact.object {
                pa += 1;
            }
            pa_total += 1;
        }
        let (neighbors, _) = neighbors_of(layer, r, opts.neighbors_per_edit);
        for n in neighbors {
            let nk = universe.key_of(n.subject, n.relation);
            if argmax_object(universe, layer, &nk) == n.object {
                na += 1;
            }
            na_total += 1;
        }
    }
    Ok((
        percentage(ea, requests.len()),
        percentage(pa, pa_total),
        percentage(na, na_total),
    ))
}

/// Harmonic mean of three percentages; zero if any component is zero.
pub fn harmonic3(a: f64, b: f64, c: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        0.0
    } else {
        3.0 / (1.0 / a + 1.0 / b + 1.0 / c)
    }
}

/// The full metric family for one request set against one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub es: f64,
    pub ps: f64,
    pub ns: f64,
    pub score: f64,
    pub ea: f64,
    pub pa: f64,
    pub na: f64,
    pub acc_score: f64,
    pub neighbor_fallback_frac: f64,
}

pub fn full_metrics(
    universe: &Universe,
    layer: &SyntheticLayer,
    requests: &[EditRequest],
    opts: &EvalOptions,
) -> Result<Metrics> {
    let es = efficacy_score(universe, layer, requests, opts.tau)?;
    let ps = paraphrase_score(universe, layer, requests, opts.n_paraphrases, opts.tau)?;
    let (ns, fallback) =
        neighborhood_score(universe, layer, requests, opts.neighbors_per_edit, opts.tau)?;
    let (ea, pa, na) = accuracy_metrics(universe, layer, requests, opts)?;
    Ok(Metrics {
        es,
        ps,
        ns,
        score: harmonic3(es, ps, ns),
        ea,
        pa,
        na,
        acc_score: harmonic3(ea, pa, na),
        neighbor_fallback_frac: fallback,
    })
}

/// One gap-curve cell: a merge strategy at a total edit count under one
/// seed, compared against the joint edit of the same requests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapCurveRow {
    pub size: usize,
    pub strategy: String,
    pub seed: u64,
    /// ‖W_strategy − W_joint‖_F / ‖W_joint‖_F after applying the merged
    /// update.
    pub weight_gap_rel: f64,
    pub score_strategy: f64,
    pub score_global: f64,
    pub score_gap: f64,
}

#[derive(Debug, Clone)]
pub struct GapCurveConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub strategies: Vec<MergeStrategy>,
    pub n_clients: usize,
    pub d_key: usize,
    pub d_val: usize,
    pub codebook_size: usize,
    pub n_init: usize,
    pub mu: f64,
    pub opts: EvalOptions,
}

impl Default for GapCurveConfig {
    fn default() -> Self {
        GapCurveConfig {
            sizes: vec![64, 128, 256, 512, 1024],
            seeds: vec![0, 1, 2, 3, 4],
            strategies: vec![
                MergeStrategy::CollabEdit,
                MergeStrategy::SimpleAverage,
                MergeStrategy::task_arithmetic(),
                MergeStrategy::ties_merging(),
            ],
            n_clients: 8,
            d_key: 64,
            d_val: 48,
            codebook_size: 256,
            n_init: 512,
            // desk-scale weighting: strong enough that editing visibly
            // moves outputs, so score differences are measurable
            mu: 1.5e2,
            opts: EvalOptions::default(),
        }
    }
}

/// One-round merge of every strategy against the joint edit, per total
/// edit count and seed.
pub fn gap_curve(cfg: &GapCurveConfig) -> Result<Vec<GapCurveRow>> {
    let cells: Vec<(usize, u64)> = cfg
        .sizes
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let per_cell: Vec<Vec<GapCurveRow>> = cells
        .par_iter()
        .map(|&(size, seed)| gap_curve_cell(cfg, size, seed))
        .collect::<Result<_>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

fn gap_curve_cell(cfg: &GapCurveConfig, size: usize, seed: u64) -> Result<Vec<GapCurveRow>> {
    let universe = Universe::new(FeatureMapConfig::new(
        cfg.d_key,
        cfg.d_val,
        seed.wrapping_mul(0x5851_f42d_4c95_7f2d).wrapping_add(size as u64),
        cfg.codebook_size,
    ));
    let (layer, _) = init_layer_with_mu(&universe, cfg.n_init, seed, cfg.mu)?;
    let requests = sample_edit_requests(&universe, size, cfg.n_clients, seed, &layer.base_facts)?;

    let snapshot = LayerStack::single(layer.clone());
    let priors = vec![layer.c0.clone()];
    let packets: Vec<EditPacket> = partition_by_client(&requests, cfg.n_clients)
        .iter()
        .enumerate()
        .map(|(i, reqs)| {
            client_get_delta_and_kkt(&universe, &snapshot, i as u32, 0, reqs, &priors)
        })
        .collect::<Result<_>>()?;

    let joint_delta = global_edit(&universe, &layer, &requests, &layer.c0)?;
    let w_joint = layer.weights.add(&joint_delta)?;
    let joint_layer = SyntheticLayer {
        weights: w_joint.clone(),
        ..layer.clone()
    };
    let score_global = full_metrics(&universe, &joint_layer, &requests, &cfg.opts)?.score;

    let prior_set = [(0u16, layer.c0.clone())];
    let mut rows = Vec::with_capacity(cfg.strategies.len());
    for strategy in &cfg.strategies {
        let merged = match strategy {
            MergeStrategy::CollabEdit => server_collab_merge(&packets, &prior_set)?,
            _ => server_baseline_merge(&packets, strategy)?,
        };
        let w_merged = layer.weights.add(&merged[0].1)?;
        let merged_layer = SyntheticLayer {
            weights: w_merged.clone(),
            ..layer.clone()
        };
        let score_strategy = full_metrics(&universe, &merged_layer, &requests, &cfg.opts)?.score;
        rows.push(GapCurveRow {
            size,
            strategy: strategy.name().to_string(),
            seed,
            weight_gap_rel: linalg::rel_frobenius(&w_merged, &w_joint),
            score_strategy,
            score_global,
            score_gap: score_global - score_strategy,
        });
    }
    Ok(rows)
}

/// One merge strategy's full metric row for a single-round comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergeBenchRow {
    pub strategy: String,
    pub metrics: Metrics,
    pub weight_gap_rel: f64,
}

/// One-round strategy comparison on a single layer: each strategy merges
/// the same client packets, and is scored on the full request set against
/// the joint edit of those requests.
pub fn merge_bench(
    universe: &Universe,
    layer: &SyntheticLayer,
    requests: &[EditRequest],
    n_clients: usize,
    strategies: &[MergeStrategy],
    opts: &EvalOptions,
) -> Result<Vec<MergeBenchRow>> {
    let snapshot = LayerStack::single(layer.clone());
    let priors = vec![layer.c0.clone()];
    let packets: Vec<EditPacket> = partition_by_client(requests, n_clients)
        .iter()
        .enumerate()
        .map(|(i, reqs)| client_get_delta_and_kkt(universe, &snapshot, i as u32, 0, reqs, &priors))
        .collect::<Result<_>>()?;

    let joint_delta = global_edit(universe, layer, requests, &layer.c0)?;
    let w_joint = layer.weights.add(&joint_delta)?;
    let joint_layer = SyntheticLayer {
        weights: w_joint.clone(),
        ..layer.clone()
    };
    let prior_set = [(0u16, layer.c0.clone())];

    let mut rows = Vec::with_capacity(strategies.len() + 1);
    rows.push(MergeBenchRow {
        strategy: "global_edit".into(),
        metrics: full_metrics(universe, &joint_layer, requests, opts)?,
        weight_gap_rel: 0.0,
    });
    for strategy in strategies {
        let merged = match strategy {
            MergeStrategy::CollabEdit => server_collab_merge(&packets, &prior_set)?,
            _ => server_baseline_merge(&packets, strategy)?,
        };
        let w_merged = layer.weights.add(&merged[0].1)?;
        let merged_layer = SyntheticLayer {
            weights: w_merged.clone(),
            ..layer.clone()
        };
        rows.push(MergeBenchRow {
            strategy: strategy.name().to_string(),
            metrics: full_metrics(universe, &merged_layer, requests, opts)?,
            weight_gap_rel: linalg::rel_frobenius(&w_merged, &w_joint),
        });
    }
    Ok(rows)
}

/// Median of a sample (averages the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
