//! Harnesses for the three intervention studies: overlap detection via the
//! residual recurrence, conflict generation / detection / resolution, and
//! the forgetting experiment.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collab::{server_collab_merge, EditPacket, MergeStrategy, ServerState};
use crate::editor::{self, EditBatch, PriorSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, Metrics};
use crate::knowledge::{sample_edit_requests, EditRequest, Fact, SyntheticLayer, Universe};
use crate::linalg::{self, Matrix};

pub const THETA_DEFAULT: f64 = 0.01;
pub const AUGMENTATION_DEFAULT: usize = 8;

/// Residual norms of a repeated edit, simulated and predicted.
///
/// Index 0 is the pre-edit residual; index t is the norm after t
/// applications of the identical batch. The prediction iterates the closed
/// recurrence `R ← R·(I − Kᵀ(C + K·Kᵀ)⁻¹K)` independently of the simulated
/// weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapTrace {
    pub simulated: Vec<f64>,
    pub predicted: Vec<f64>,
    pub theta: f64,
    pub theta_relative: bool,
}

impl OverlapTrace {
    /// Threshold in absolute residual units. In relative mode the
    /// configured theta scales the initial residual norm, which makes the
    /// detector scale-free.
    pub fn effective_theta(&self) -> f64 {
        if self.theta_relative {
            self.theta * self.simulated[0]
        } else {
            self.theta
        }
    }
}

/// Tolerance for the simulated-vs-predicted residual agreement, relative
/// to the initial residual norm.
pub const RECURRENCE_TOL: f64 = 1e-10;

/// Apply the identical edit batch `repetitions` times, recording the
/// residual norm after each application, and verify every step against the
/// closed recurrence.
pub fn overlap_run(
    universe: &Universe,
    layer: &SyntheticLayer,
    requests: &[EditRequest],
    repetitions: usize,
    prior: &Matrix,
    theta: f64,
    theta_relative: bool,
) -> Result<OverlapTrace> {
    assert!(repetitions >= 1, "need at least one repetition");
    let batch = editor::compute_batch(universe, layer, requests)?;
    let keys = batch.keys.clone();
    let values = batch.values.clone();

    let a = prior.add(&linalg::gram(&keys))?;
    // contraction map on the residual: M = I − Kᵀ·A⁻¹·K
    let y = linalg::solve_spd(&a, &keys)?;
    let mut contraction = linalg::matmul_bt(&keys.transpose(), &y.transpose())?;
    for i in 0..contraction.rows() {
        for j in 0..contraction.cols() {
            let v = if i == j { 1.0 } else { 0.0 } - contraction.get(i, j);
            contraction.set(i, j, v);
        }
    }

    let mut weights = layer.weights.clone();
    let mut predicted_r = batch.residual.clone();
    let r0 = linalg::frobenius_norm(&predicted_r);
    let mut simulated = vec![r0];
    let mut predicted = vec![r0];
    let tol = RECURRENCE_TOL * r0.max(1.0);

    for step in 1..=repetitions {
        let wk = linalg::matmul(&weights, &keys)?;
        let residual = values.sub(&wk)?;
        let step_batch = EditBatch {
            keys: keys.clone(),
            values: values.clone(),
            residual,
        };
        let delta = editor::edit_delta(&step_batch, prior)?;
        weights.add_assign(&delta)?;
        let sim = linalg::frobenius_norm(&values.sub(&linalg::matmul(&weights, &keys)?)?);

        predicted_r = linalg::matmul(&predicted_r, &contraction)?;
        let pred = linalg::frobenius_norm(&predicted_r);

        if (sim - pred).abs() > tol {
            return Err(Error::RecurrenceMismatch {
                step,
                simulated: sim,
                predicted: pred,
            });
        }
        simulated.push(sim);
        predicted.push(pred);
    }
    Ok(OverlapTrace {
        simulated,
        predicted,
        theta,
        theta_relative,
    })
}

/// First index whose norm falls below the threshold, if any.
pub fn detect_crossing(norms: &[f64], theta_abs: f64) -> Option<usize> {
    norms.iter().position(|&n| n < theta_abs)
}

/// Overlap flag for a trace: true once the residual has crossed the
/// trace's threshold.
pub fn overlap_detect(trace: &OverlapTrace) -> (bool, Option<usize>) {
    let idx = detect_crossing(&trace.simulated, trace.effective_theta());
    (idx.is_some(), idx)
}

/// Arrival-order conflict policies. Both names select the earliest round
/// (ties broken by the lowest client id); under a single queue ordering
/// first-come-first-served and first-in-first-out coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPolicy {
    Fcfs,
    Fifo,
}

/// Requests that rewrite the same (subject, relation) to different objects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictGroup {
    pub subject: u64,
    pub relation: u64,
    pub requests: Vec<EditRequest>,
    pub winner: Option<EditRequest>,
    pub policy: ConflictPolicy,
}

impl ConflictGroup {
    pub fn loser_objects(&self) -> Vec<u64> {
        let winner = self.winner.as_ref().map(|w| w.fact.object);
        self.requests
            .iter()
            .map(|r| r.fact.object)
            .filter(|o| Some(*o) != winner)
            .collect()
    }
}

/// Pair a fraction of the requests with a conflicting edit: same subject,
/// relation and old object, a different new object, assigned to a
/// different client in the same round. Returns the augmented request list
/// and the injected groups.
pub fn conflict_inject(
    universe: &Universe,
    requests: &[EditRequest],
    fraction: f64,
    n_clients: usize,
    seed: u64,
) -> (Vec<EditRequest>, Vec<ConflictGroup>) {
    use rand::Rng;
    assert!((0.0..=1.0).contains(&fraction), "fraction must be in [0, 1]");
    let count = (fraction * requests.len() as f64).round() as usize;
    let mut rng = linalg::seeded_rng(universe.cfg.universe_seed, &[0x636e_66, seed]);
    let codebook = universe.cfg.codebook_size as u64;
    let mut augmented = requests.to_vec();
    let mut groups = Vec::with_capacity(count);
    for r in requests.iter().take(count) {
        let mut object = rng.gen_range(0..codebook);
        while object == r.fact.object || object == r.old_object {
            object = (object + 1) % codebook;
        }
        let client_id = if n_clients > 1 {
            let shift = 1 + rng.gen_range(0..(n_clients as u32 - 1));
            (r.client_id + shift) % n_clients as u32
        } else {
            r.client_id
        };
        let rival = EditRequest {
            fact: Fact {
                subject: r.fact.subject,
                relation: r.fact.relation,
                object,
            },
            old_object: r.old_object,
            client_id,
            round: r.round,
        };
        augmented.push(rival);
        groups.push(ConflictGroup {
            subject: r.fact.subject,
            relation: r.fact.relation,
            requests: vec![*r, rival],
            winner: None,
            policy: ConflictPolicy::Fcfs,
        });
    }
    (augmented, groups)
}

/// Salted fingerprint of a lookup pair. Equal pairs agree under the same
/// salt; nothing else about the pair is recoverable, and different salts
/// give unrelated fingerprints.
pub fn fingerprint(salt: u64, subject: u64, relation: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(salt.to_le_bytes());
    hasher.update(subject.to_le_bytes());
    hasher.update(relation.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// What a client reports for each request whose post-merge check failed:
/// the salted lookup fingerprint, never the raw ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: u32,
    pub fingerprint: u64,
}

/// A fingerprint reported by at least two distinct clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedConflict {
    pub fingerprint: u64,
    pub clients: Vec<u32>,
}

/// Group failure reports by fingerprint; flag groups spanning two or more
/// clients. A single client reporting the same fingerprint twice is its
/// own overwrite case, not a cross-client conflict, and is dropped here.
pub fn conflict_detect(reports: &[ClientReport]) -> Vec<DetectedConflict> {
    let mut by_fp: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for r in reports {
        by_fp.entry(r.fingerprint).or_default().push(r.client_id);
    }
    let mut out = Vec::new();
    for (fp, mut clients) in by_fp {
        clients.sort_unstable();
        clients.dedup();
        if clients.len() >= 2 {
            out.push(DetectedConflict {
                fingerprint: fp,
                clients,
            });
        }
    }
    out
}

/// Winner under an arrival-order policy: earliest round, then lowest
/// client id, then list position.
pub fn select_winner(group: &ConflictGroup, _policy: ConflictPolicy) -> Result<EditRequest> {
    group
        .requests
        .iter()
        .min_by_key(|r| (r.round, r.client_id))
        .copied()
        .ok_or(Error::EmptyGroup)
}

/// Resolve one conflict group: re-edit the winning request as an augmented
/// batch of `augmentation_factor` key variants (the original key plus
/// perturbed copies), all targeting the winning value, merged through the
/// collaborative path. Losers are not explicitly erased; the augmented
/// edit overwrites them.
pub fn conflict_resolve(
    state: &mut ServerState,
    group: &ConflictGroup,
    policy: ConflictPolicy,
    augmentation_factor: usize,
) -> Result<EditRequest> {
    assert!(augmentation_factor >= 1, "augmentation factor must be >= 1");
    let winner = select_winner(group, policy)?;
    let universe = state.universe.clone();
    let key = universe.key_of_fact(&winner.fact);
    let mut key_cols = vec![key.clone()];
    for i in 1..augmentation_factor {
        let seed = winner
            .fact
            .subject
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ winner.fact.relation.rotate_left(23)
            ^ (i as u64).wrapping_mul(0xda94_2042_e4dd_58b5);
        key_cols.push(universe.perturb_key(&key, seed));
    }
    let value = universe.value_of(winner.fact.object)?;
    let keys = Matrix::from_columns(&key_cols);
    let z = Matrix::from_columns(&vec![value; augmentation_factor]);

    let priors = state.priors();
    let mut local = state.stack.clone();
    let entries = editor::stack_edit_from_keys(&mut local, &keys, &z, &PriorSpec::Explicit(&priors))?;
    let packet = EditPacket {
        client_id: winner.client_id,
        round: state.round,
        entries,
    };
    let merged = server_collab_merge(std::slice::from_ref(&packet), &state.c_dyn)?;
    for (layer_id, delta) in &merged {
        state.stack.layers[*layer_id as usize]
            .weights
            .add_assign(delta)?;
    }
    if state.dynamic_c {
        for entry in &packet.entries {
            if let Some(slot) = state
                .c_dyn
                .iter_mut()
                .find(|(id, _)| *id == entry.layer_id)
            {
                slot.1.add_assign(&entry.gram.scale(state.beta1))?;
            }
        }
    }
    state.packet_log.push(packet);
    Ok(winner)
}

#[derive(Debug, Clone)]
pub struct ConflictStudyConfig {
    pub n_groups: usize,
    pub n_clients: usize,
    pub augmentation_factor: usize,
    pub policy: ConflictPolicy,
    pub opts: EvalOptions,
    pub salt_seed: u64,
    pub inject_seed: u64,
    /// Grow the covariance statistic with every merged Gram, so the many
    /// sequential resolutions do not trample one another. At desk-scale
    /// dimensions the cross-key coupling is orders of magnitude larger
    /// than at LLM width, which makes this protection necessary rather
    /// than optional.
    pub dynamic_c: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictGroupOutcome {
    pub group_id: usize,
    pub winner_client: u32,
    pub detected: bool,
    /// P(winner object) − P(losing object) at the conflicted key.
    pub pre_margin: f64,
    pub post_margin: f64,
    pub pre_winner_argmax: bool,
    pub post_winner_argmax: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictStudyReport {
    pub outcomes: Vec<ConflictGroupOutcome>,
    pub merge_round: crate::collab::RoundReport,
    pub detected_groups: usize,
    pub pre_winner_rate: f64,
    pub post_winner_rate: f64,
    pub pre_margin_mean: f64,
    pub post_margin_mean: f64,
    /// Fraction of base facts whose argmax survived the whole study.
    pub base_preserved_rate: f64,
}

/// The full two-stage conflict study: inject a rival for every request,
/// merge everything collaboratively, let clients report failing requests
/// as salted fingerprints, detect cross-client groups, resolve each with
/// an augmented winner re-edit, and measure margins plus base-fact
/// stability.
pub fn conflict_study(
    universe: &Universe,
    layer: &SyntheticLayer,
    requests: &[EditRequest],
    cfg: &ConflictStudyConfig,
) -> Result<ConflictStudyReport> {
    use rand::Rng;
    let (all, mut groups) =
        conflict_inject(universe, requests, 1.0, cfg.n_clients, cfg.inject_seed);
    let mut state = ServerState::new(
        universe.clone(),
        crate::editor::LayerStack::single(layer.clone()),
        &crate::collab::PriorMode::Covariance,
        1.0,
        1.0,
        false,
    );
    let per_client = crate::knowledge::partition_by_client(&all, cfg.n_clients);
    let merge_round = state.run_round(&per_client, &MergeStrategy::CollabEdit)?;

    let base_argmax_before: Vec<u64> = layer
        .base_facts
        .iter()
        .map(|f| eval::argmax_object(universe, &state.stack.layers[0], &universe.key_of_fact(f)))
        .collect();

    // stage one: clients check their own requests post-merge and report
    // failures as salted fingerprints
    let salt = linalg::seeded_rng(cfg.salt_seed, &[0x7361_6c74]).gen::<u64>();
    let mut reports = Vec::new();
    for r in &all {
        let key = universe.key_of_fact(&r.fact);
        if eval::argmax_object(universe, &state.stack.layers[0], &key) != r.fact.object {
            reports.push(ClientReport {
                client_id: r.client_id,
                fingerprint: fingerprint(salt, r.fact.subject, r.fact.relation),
            });
        }
    }
    let detected = conflict_detect(&reports);
    let detected_fps: HashSet<u64> = detected.iter().map(|d| d.fingerprint).collect();

    // margin of the winning object over the best losing object at the
    // conflicted key
    let margin_of = |lyr: &SyntheticLayer, group: &ConflictGroup| -> (f64, bool) {
        let winner = group.winner.expect("winner selected");
        let key = universe.key_of_fact(&winner.fact);
        let dist = eval::object_distribution(universe, lyr, &key, cfg.opts.tau);
        let p_winner = dist[winner.fact.object as usize];
        let p_loser = group
            .loser_objects()
            .iter()
            .map(|&o| dist[o as usize])
            .fold(0.0_f64, f64::max);
        let argmax_ok = eval::argmax_object(universe, lyr, &key) == winner.fact.object;
        (p_winner - p_loser, argmax_ok)
    };

    for group in groups.iter_mut() {
        group.winner = Some(select_winner(group, cfg.policy)?);
    }
    let pre: Vec<(f64, bool)> = groups
        .iter()
        .map(|g| margin_of(&state.stack.layers[0], g))
        .collect();

    // stage two: every injected group gets resolved (the harness owns the
    // ground truth); the detected count reports stage-one coverage
    for group in groups.iter() {
        conflict_resolve(&mut state, group, cfg.policy, cfg.augmentation_factor)?;
    }
    let post: Vec<(f64, bool)> = groups
        .iter()
        .map(|g| margin_of(&state.stack.layers[0], g))
        .collect();

    let mut outcomes = Vec::with_capacity(groups.len());
    let mut pre_hits = 0usize;
    let mut post_hits = 0usize;
    let mut pre_margin_sum = 0.0;
    let mut post_margin_sum = 0.0;
    for (group_id, group) in groups.iter().enumerate() {
        let winner = group.winner.expect("winner selected");
        let (pre_margin, pre_winner_argmax) = pre[group_id];
        let (post_margin, post_winner_argmax) = post[group_id];
        pre_hits += pre_winner_argmax as usize;
        post_hits += post_winner_argmax as usize;
        pre_margin_sum += pre_margin;
        post_margin_sum += post_margin;
        outcomes.push(ConflictGroupOutcome {
            group_id,
            winner_client: winner.client_id,
            detected: detected_fps.contains(&fingerprint(salt, group.subject, group.relation)),
            pre_margin,
            post_margin,
            pre_winner_argmax,
            post_winner_argmax,
        });
    }

    let preserved = layer
        .base_facts
        .iter()
        .zip(&base_argmax_before)
        .filter(|(f, &prev)| {
            eval::argmax_object(universe, &state.stack.layers[0], &universe.key_of_fact(f))
                == prev
        })
        .count();

    let n = groups.len().max(1) as f64;
    Ok(ConflictStudyReport {
        outcomes,
        merge_round,
        detected_groups: detected.len(),
        pre_winner_rate: 100.0 * pre_hits as f64 / n,
        post_winner_rate: 100.0 * post_hits as f64 / n,
        pre_margin_mean: pre_margin_sum / n,
        post_margin_mean: post_margin_sum / n,
        base_preserved_rate: 100.0 * preserved as f64 / layer.base_facts.len().max(1) as f64,
    })
}

/// The forgetting study: edit an old request set, run many rounds of fresh
/// edits (aggregated globally per round), and compare the old set's
/// metrics before and after, with the covariance statistic either frozen
/// or growing with every merged Gram.
#[derive(Debug, Clone)]
pub struct ForgettingConfig {
    pub old_requests: Vec<EditRequest>,
    pub new_request_rounds: Vec<Vec<EditRequest>>,
    pub dynamic_c: bool,
    pub beta0: f64,
    pub beta1: f64,
    pub opts: EvalOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub before: Metrics,
    pub after: Metrics,
    /// Old-set metrics after each round of new edits.
    pub per_round: Vec<Metrics>,
}

/// Sample a forgetting configuration whose new requests are disjoint from
/// the old ones and from each other.
pub fn sample_forgetting_config(
    universe: &Universe,
    layer: &SyntheticLayer,
    n_old: usize,
    rounds: usize,
    per_round: usize,
    seed: u64,
    dynamic_c: bool,
) -> Result<ForgettingConfig> {
    let old_requests =
        sample_edit_requests(universe, n_old, 1, seed, &layer.base_facts)?;
    let mut taken: Vec<Fact> = layer.base_facts.clone();
    taken.extend(old_requests.iter().map(|r| r.fact));
    let mut new_request_rounds = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let batch = sample_edit_requests(
            universe,
            per_round,
            1,
            seed.wrapping_mul(1000).wrapping_add(round as u64 + 1),
            &taken,
        )?;
        taken.extend(batch.iter().map(|r| r.fact));
        new_request_rounds.push(batch);
    }
    Ok(ForgettingConfig {
        old_requests,
        new_request_rounds,
        dynamic_c,
        beta0: 1.0,
        beta1: 1.0,
        opts: EvalOptions::default(),
    })
}

/// Run the forgetting protocol on a fresh layer.
pub fn forgetting_experiment(
    universe: &Universe,
    layer: &SyntheticLayer,
    cfg: &ForgettingConfig,
) -> Result<ForgettingReport> {
    let old_lookups: HashSet<(u64, u64)> =
        cfg.old_requests.iter().map(|r| r.fact.lookup()).collect();
    for batch in &cfg.new_request_rounds {
        for r in batch {
            if old_lookups.contains(&r.fact.lookup()) {
                return Err(Error::InvalidConfig(format!(
                    "new request ({}, {}) collides with an old request",
                    r.fact.subject, r.fact.relation
                )));
            }
        }
    }

    let mut state = ServerState::new(
        universe.clone(),
        crate::editor::LayerStack::single(layer.clone()),
        &crate::collab::PriorMode::Covariance,
        cfg.beta0,
        cfg.beta1,
        cfg.dynamic_c,
    );

    let restamp = |requests: &[EditRequest], round: u32| -> Vec<EditRequest> {
        requests
            .iter()
            .map(|r| EditRequest {
                client_id: 0,
                round,
                ..*r
            })
            .collect()
    };

    let old = restamp(&cfg.old_requests, 0);
    state.run_round(&[old.clone()], &MergeStrategy::CollabEdit)?;
    let before = eval::full_metrics(universe, &state.stack.layers[0], &old, &cfg.opts)?;

    let mut per_round = Vec::with_capacity(cfg.new_request_rounds.len());
    for batch in &cfg.new_request_rounds {
        let stamped = restamp(batch, state.round);
        state.run_round(&[stamped], &MergeStrategy::CollabEdit)?;
        per_round.push(eval::full_metrics(
            universe,
            &state.stack.layers[0],
            &old,
            &cfg.opts,
        )?);
    }
    let after = per_round.last().copied().unwrap_or(before);
    Ok(ForgettingReport {
        before,
        after,
        per_round,
    })
}
