//! The collaborative protocol: client-side packet computation, the exact
//! non-destructive server merge, destructive merge baselines, the gap
//! decomposition, and the multi-round loop with a dynamic covariance
//! statistic.
//!
//! The only thing that ever crosses the client/server boundary is an
//! [`EditPacket`]: per edited layer, the weight update `Δᵢ` and the key
//! Gram `Gᵢ = KᵢKᵢᵀ`. The server recombines them as
//! `Δ_G = Σᵢ Δᵢ·(C + Gᵢ)·(C + Σⱼ Gⱼ)⁻¹`, which reproduces the update a
//! joint edit over all clients' requests would have produced.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editor::{self, LayerEdit, PriorSpec};
use crate::error::{Error, Result};
use crate::knowledge::{EditRequest, Universe};
use crate::linalg::{self, Matrix};

pub use crate::editor::LayerStack;

/// One client's contribution for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPacket {
    pub client_id: u32,
    pub round: u32,
    pub entries: Vec<LayerEdit>,
}

impl EditPacket {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How the server combines client updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MergeStrategy {
    /// Exact recombination from `(Δᵢ, Gᵢ)` pairs.
    CollabEdit,
    /// Arithmetic mean of the client updates.
    SimpleAverage,
    /// `λ · Σᵢ Δᵢ`.
    TaskArithmetic { lambda: f64 },
    /// Trim to the largest-magnitude fraction per client, elect a sign per
    /// coordinate, average the agreeing survivors, scale by `λ`.
    TiesMerging { keep_frac: f64, lambda: f64 },
}

impl MergeStrategy {
    pub fn task_arithmetic() -> Self {
        MergeStrategy::TaskArithmetic { lambda: 1.0 }
    }

    pub fn ties_merging() -> Self {
        MergeStrategy::TiesMerging {
            keep_frac: 0.2,
            lambda: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MergeStrategy::CollabEdit => "collab_edit",
            MergeStrategy::SimpleAverage => "simple_average",
            MergeStrategy::TaskArithmetic { .. } => "task_arithmetic",
            MergeStrategy::TiesMerging { .. } => "ties_merging",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MergeStrategy::TiesMerging { keep_frac, .. }
                if !(*keep_frac > 0.0 && *keep_frac <= 1.0) =>
            {
                Err(Error::InvalidConfig(format!(
                    "ties keep_frac must be in (0, 1], got {keep_frac}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Compute one client's packet from a snapshot of the global stack.
///
/// The requests themselves never leave this function; only the per-layer
/// `(Δ, K·Kᵀ)` pairs do. An empty request list yields an empty packet (the
/// client skips the round).
pub fn client_get_delta_and_kkt(
    universe: &Universe,
    snapshot: &LayerStack,
    client_id: u32,
    round: u32,
    requests: &[EditRequest],
    priors: &[Matrix],
) -> Result<EditPacket> {
    for r in requests {
        if r.client_id != client_id {
            return Err(Error::InconsistentPackets(format!(
                "request for client {} routed to client {}",
                r.client_id, client_id
            )));
        }
        if r.round != round {
            return Err(Error::StaleRound {
                expected: round,
                got: r.round,
            });
        }
    }
    if requests.is_empty() {
        return Ok(EditPacket {
            client_id,
            round,
            entries: Vec::new(),
        });
    }
    let mut local = snapshot.clone();
    let entries =
        editor::stack_edit_requests(universe, &mut local, requests, &PriorSpec::Explicit(priors))?;
    Ok(EditPacket {
        client_id,
        round,
        entries,
    })
}

/// Exact merge for a single layer from `(Δᵢ, Gᵢ)` pairs, accumulated in the
/// order given.
pub fn merge_collab_layer(entries: &[(&Matrix, &Matrix)], prior: &Matrix) -> Result<Matrix> {
    let d_key = prior.rows();
    let mut a = prior.clone();
    let mut numerator: Option<Matrix> = None;
    for (delta, gram) in entries {
        if gram.rows() != d_key || gram.cols() != d_key {
            return Err(Error::InconsistentPackets(format!(
                "gram is {}x{}, prior is {}x{}",
                gram.rows(),
                gram.cols(),
                d_key,
                d_key
            )));
        }
        a.add_assign(gram)?;
        let weighted = linalg::matmul(delta, &prior.add(gram)?)?;
        match numerator.as_mut() {
            Some(n) => n.add_assign(&weighted)?,
            None => numerator = Some(weighted),
        }
    }
    match numerator {
        Some(n) => linalg::solve_spd_right(&a, &n),
        None => Ok(Matrix::zeros(0, 0)),
    }
}

/// Destructive merge of per-client updates for a single layer.
pub fn merge_baseline_layer(deltas: &[&Matrix], strategy: &MergeStrategy) -> Result<Matrix> {
    assert!(!deltas.is_empty(), "baseline merge needs at least one delta");
    strategy.validate()?;
    let (rows, cols) = (deltas[0].rows(), deltas[0].cols());
    match strategy {
        MergeStrategy::CollabEdit => Err(Error::InvalidConfig(
            "collab_edit is not a destructive baseline".into(),
        )),
        MergeStrategy::SimpleAverage => {
            let mut sum = Matrix::zeros(rows, cols);
            for d in deltas {
                sum.add_assign(d)?;
            }
            Ok(sum.scale(1.0 / deltas.len() as f64))
        }
        MergeStrategy::TaskArithmetic { lambda } => {
            let mut sum = Matrix::zeros(rows, cols);
            for d in deltas {
                sum.add_assign(d)?;
            }
            Ok(sum.scale(*lambda))
        }
        MergeStrategy::TiesMerging { keep_frac, lambda } => {
            let len = rows * cols;
            let keep = ((keep_frac * len as f64).ceil() as usize).clamp(1, len);
            let mut trimmed: Vec<Vec<f64>> = Vec::with_capacity(deltas.len());
            for d in deltas {
                let mut idx: Vec<usize> = (0..len).collect();
                idx.sort_by(|&a, &b| {
                    d.data()[b]
                        .abs()
                        .partial_cmp(&d.data()[a].abs())
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let mut t = vec![0.0; len];
                for &i in idx.iter().take(keep) {
                    t[i] = d.data()[i];
                }
                trimmed.push(t);
            }
            let mut merged = vec![0.0; len];
            for i in 0..len {
                let total: f64 = trimmed.iter().map(|t| t[i]).sum();
                if total == 0.0 {
                    continue;
                }
                let sign = total.signum();
                let mut acc = 0.0;
                let mut count = 0usize;
                for t in &trimmed {
                    if t[i] != 0.0 && t[i].signum() == sign {
                        acc += t[i];
                        count += 1;
                    }
                }
                if count > 0 {
                    merged[i] = lambda * acc / count as f64;
                }
            }
            Ok(Matrix::new(rows, cols, merged))
        }
    }
}

/// Gap between the exact merge and task arithmetic, evaluated directly as
/// `Σᵢ Δᵢ·[(C + Gᵢ)·(C + Σⱼ Gⱼ)⁻¹ − λI]` for one layer.
///
/// This takes a different algebraic route than subtracting the two merge
/// results, so agreement between the two is a real consistency check.
pub fn gap_layer(entries: &[(&Matrix, &Matrix)], prior: &Matrix, lambda: f64) -> Result<Matrix> {
    assert!(!entries.is_empty(), "gap evaluation needs at least one client");
    let d_key = prior.rows();
    let mut a = prior.clone();
    for (_, gram) in entries {
        a.add_assign(gram)?;
    }
    let (d_val, _) = (entries[0].0.rows(), entries[0].0.cols());
    let mut total = Matrix::zeros(d_val, d_key);
    for (delta, gram) in entries {
        let b = prior.add(gram)?;
        // X = B·A⁻¹ via the symmetric solve A·Xᵀ = Bᵀ
        let mut coeff = linalg::solve_spd_right(&a, &b)?;
        for i in 0..d_key {
            coeff.set(i, i, coeff.get(i, i) - lambda);
        }
        total.add_assign(&linalg::matmul(delta, &coeff)?)?;
    }
    Ok(total)
}

fn sorted_nonempty(packets: &[EditPacket]) -> Result<Vec<&EditPacket>> {
    let mut live: Vec<&EditPacket> = packets.iter().filter(|p| !p.is_empty()).collect();
    live.sort_by_key(|p| p.client_id);
    if let Some(first) = live.first() {
        let layout: Vec<u16> = first.entries.iter().map(|e| e.layer_id).collect();
        for p in &live {
            if p.round != first.round {
                return Err(Error::InconsistentPackets(format!(
                    "packets span rounds {} and {}",
                    first.round, p.round
                )));
            }
            let ids: Vec<u16> = p.entries.iter().map(|e| e.layer_id).collect();
            if ids != layout {
                return Err(Error::InconsistentPackets(format!(
                    "client {} edited layers {:?}, expected {:?}",
                    p.client_id, ids, layout
                )));
            }
        }
    }
    Ok(live)
}

/// Exact server-side merge across packets; returns `(layer_id, Δ_G)` per
/// edited layer. Clients are accumulated in ascending client id so the
/// result is deterministic.
pub fn server_collab_merge(
    packets: &[EditPacket],
    priors: &[(u16, Matrix)],
) -> Result<Vec<(u16, Matrix)>> {
    let live = sorted_nonempty(packets)?;
    let Some(first) = live.first() else {
        return Ok(Vec::new());
    };
    let mut merged = Vec::with_capacity(first.entries.len());
    for (idx, entry) in first.entries.iter().enumerate() {
        let prior = prior_for(priors, entry.layer_id)?;
        let layer_entries: Vec<(&Matrix, &Matrix)> = live
            .iter()
            .map(|p| (&p.entries[idx].delta, &p.entries[idx].gram))
            .collect();
        merged.push((entry.layer_id, merge_collab_layer(&layer_entries, prior)?));
    }
    Ok(merged)
}

/// Destructive server-side merge across packets.
pub fn server_baseline_merge(
    packets: &[EditPacket],
    strategy: &MergeStrategy,
) -> Result<Vec<(u16, Matrix)>> {
    let live = sorted_nonempty(packets)?;
    let Some(first) = live.first() else {
        return Ok(Vec::new());
    };
    let mut merged = Vec::with_capacity(first.entries.len());
    for (idx, entry) in first.entries.iter().enumerate() {
        let deltas: Vec<&Matrix> = live.iter().map(|p| &p.entries[idx].delta).collect();
        merged.push((entry.layer_id, merge_baseline_layer(&deltas, strategy)?));
    }
    Ok(merged)
}

/// Direct evaluation of the merge/task-arithmetic gap across packets.
pub fn gap_formula(
    packets: &[EditPacket],
    priors: &[(u16, Matrix)],
    lambda: f64,
) -> Result<Vec<(u16, Matrix)>> {
    let live = sorted_nonempty(packets)?;
    let Some(first) = live.first() else {
        return Ok(Vec::new());
    };
    let mut gaps = Vec::with_capacity(first.entries.len());
    for (idx, entry) in first.entries.iter().enumerate() {
        let prior = prior_for(priors, entry.layer_id)?;
        let layer_entries: Vec<(&Matrix, &Matrix)> = live
            .iter()
            .map(|p| (&p.entries[idx].delta, &p.entries[idx].gram))
            .collect();
        gaps.push((entry.layer_id, gap_layer(&layer_entries, prior, lambda)?));
    }
    Ok(gaps)
}

fn prior_for<'a>(priors: &'a [(u16, Matrix)], layer_id: u16) -> Result<&'a Matrix> {
    priors
        .iter()
        .find(|(id, _)| *id == layer_id)
        .map(|(_, m)| m)
        .ok_or_else(|| {
            Error::InconsistentPackets(format!("no prior registered for layer {layer_id}"))
        })
}

/// Which statistic seeds the server's per-layer prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorMode {
    /// Each edited layer starts from its own key covariance statistic.
    Covariance,
    /// Every edited layer starts from `kappa·I`.
    Identity { kappa: f64 },
}

impl Default for PriorMode {
    fn default() -> Self {
        PriorMode::Covariance
    }
}

pub const KAPPA_DEFAULT: f64 = 1e3;

/// Per-round, per-layer summary destined for the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRoundStats {
    pub layer_id: u16,
    pub delta_norm: f64,
    /// Relative Frobenius distance between the merged update and the joint
    /// edit of all requests on the same snapshot.
    pub gap_to_global: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub strategy: String,
    pub n_clients: usize,
    pub n_requests: usize,
    pub per_layer: Vec<LayerRoundStats>,
    pub elapsed_micros: u128,
}

/// Global model plus the server-side merge state.
///
/// Clients always edit from the latest global snapshot; requests stamped
/// with any other round are rejected rather than merged.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub universe: Universe,
    pub stack: LayerStack,
    /// Current prior per layer of the edit range. Starts at `beta0` times
    /// the base statistic and, when `dynamic_c` is set, grows by `beta1`
    /// times every merged Gram.
    pub c_dyn: Vec<(u16, Matrix)>,
    pub beta0: f64,
    pub beta1: f64,
    pub dynamic_c: bool,
    pub round: u32,
    pub packet_log: Vec<EditPacket>,
}

impl ServerState {
    pub fn new(
        universe: Universe,
        stack: LayerStack,
        prior_mode: &PriorMode,
        beta0: f64,
        beta1: f64,
        dynamic_c: bool,
    ) -> Self {
        let c_dyn = stack
            .edit_range
            .clone()
            .map(|l| {
                let base = match prior_mode {
                    PriorMode::Covariance => stack.layers[l].c0.clone(),
                    PriorMode::Identity { kappa } => {
                        Matrix::scaled_identity(stack.layers[l].d_key(), *kappa)
                    }
                };
                (l as u16, base.scale(beta0))
            })
            .collect();
        ServerState {
            universe,
            stack,
            c_dyn,
            beta0,
            beta1,
            dynamic_c,
            round: 0,
            packet_log: Vec::new(),
        }
    }

    /// Priors aligned with the edit range, in range order.
    pub fn priors(&self) -> Vec<Matrix> {
        self.c_dyn.iter().map(|(_, m)| m.clone()).collect()
    }

    /// Run one protocol round: snapshot, per-client packets (computed in
    /// parallel), merge, apply, and — when enabled — fold the merged Grams
    /// into the dynamic prior.
    pub fn run_round(
        &mut self,
        requests_per_client: &[Vec<EditRequest>],
        strategy: &MergeStrategy,
    ) -> Result<RoundReport> {
        let started = Instant::now();
        strategy.validate()?;
        for (slot, requests) in requests_per_client.iter().enumerate() {
            for r in requests {
                if r.round != self.round {
                    return Err(Error::StaleRound {
                        expected: self.round,
                        got: r.round,
                    });
                }
                if r.client_id as usize != slot {
                    return Err(Error::InconsistentPackets(format!(
                        "request for client {} found in slot {slot}",
                        r.client_id
                    )));
                }
            }
        }

        let snapshot = self.stack.clone();
        let priors = self.priors();
        let round = self.round;
        let universe = &self.universe;
        let packets: Vec<EditPacket> = requests_per_client
            .par_iter()
            .enumerate()
            .map(|(i, reqs)| {
                client_get_delta_and_kkt(universe, &snapshot, i as u32, round, reqs, &priors)
            })
            .collect::<Result<_>>()?;

        let merged = match strategy {
            MergeStrategy::CollabEdit => server_collab_merge(&packets, &self.c_dyn)?,
            _ => server_baseline_merge(&packets, strategy)?,
        };

        // reference joint edit on the same snapshot, for reporting only
        let all_requests: Vec<EditRequest> = requests_per_client
            .iter()
            .flat_map(|r| r.iter().copied())
            .collect();
        let global = if all_requests.is_empty() {
            Vec::new()
        } else {
            let mut reference = snapshot.clone();
            editor::stack_edit_requests(
                universe,
                &mut reference,
                &all_requests,
                &PriorSpec::Explicit(&priors),
            )?
        };

        let mut per_layer = Vec::with_capacity(merged.len());
        for (layer_id, delta) in &merged {
            let gap = global
                .iter()
                .find(|e| e.layer_id == *layer_id)
                .map(|e| linalg::rel_frobenius(delta, &e.delta))
                .unwrap_or(0.0);
            per_layer.push(LayerRoundStats {
                layer_id: *layer_id,
                delta_norm: linalg::frobenius_norm(delta),
                gap_to_global: gap,
            });
            self.stack.layers[*layer_id as usize]
                .weights
                .add_assign(delta)?;
        }

        if self.dynamic_c {
            for packet in &packets {
                for entry in &packet.entries {
                    let slot = self
                        .c_dyn
                        .iter_mut()
                        .find(|(id, _)| *id == entry.layer_id)
                        .ok_or_else(|| {
                            Error::InconsistentPackets(format!(
                                "packet touches layer {} outside the edit range",
                                entry.layer_id
                            ))
                        })?;
                    slot.1.add_assign(&entry.gram.scale(self.beta1))?;
                }
            }
        }

        let n_requests = requests_per_client.iter().map(|r| r.len()).sum();
        self.packet_log.extend(packets);
        self.round += 1;
        Ok(RoundReport {
            round,
            strategy: strategy.name().to_string(),
            n_clients: requests_per_client.len(),
            n_requests,
            per_layer,
            elapsed_micros: started.elapsed().as_micros(),
        })
    }
}
