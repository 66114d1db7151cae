//! Synthetic stand-in for a language model's MLP memory: a fact universe,
//! deterministic feature maps for keys and values, and layer initialization
//! with existing-knowledge statistics.
//!
//! Keys and values are seeded-Gaussian unit vectors. The editing math only
//! needs `K`, `V`, and `C` to be matrices, so this keeps every identity in
//! the collaborative protocol checkable while staying far away from real
//! tokenizers or activations.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Weighting factor applied to the existing-knowledge key statistic; the
/// conventional value used by closed-form editors at LLM scale.
pub const MU_DEFAULT: f64 = 1.5e4;
/// Ridge added when fitting the initial weights so rank deficiency never
/// breaks the solve.
pub const INIT_RIDGE: f64 = 1e-6;
/// Ridge added to the key covariance so it stays positive-definite.
pub const C0_RIDGE: f64 = 1e-8;
/// Default paraphrase perturbation scale.
pub const PARAPHRASE_SIGMA_DEFAULT: f64 = 0.05;

/// Relations are drawn from a small pool so distinct facts can share a
/// relation (neighborhood evaluation needs that); subjects come from a
/// large pool so fresh (subject, relation) pairs are always available.
pub const RELATION_POOL: u64 = 8;
pub const SUBJECT_POOL: u64 = 1 << 20;

const TAG_KEY: u64 = 0x6b65_79;
const TAG_VALUE: u64 = 0x7661_6c;
const TAG_PERTURB: u64 = 0x7065_72;
const TAG_FACTS: u64 = 0x6661_63;
const TAG_REQUESTS: u64 = 0x7265_71;

/// One (subject, relation, object) triple. `(subject, relation)` is the
/// lookup key; the object is what editing rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: u64,
    pub relation: u64,
    pub object: u64,
}

impl Fact {
    pub fn lookup(&self) -> (u64, u64) {
        (self.subject, self.relation)
    }
}

/// A request to rewrite the object of `(subject, relation)` from
/// `old_object` to `fact.object`, stamped with the issuing client and the
/// protocol round it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub fact: Fact,
    pub old_object: u64,
    pub client_id: u32,
    pub round: u32,
}

/// Dimensions and seeds for the feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapConfig {
    pub d_key: usize,
    pub d_val: usize,
    pub universe_seed: u64,
    pub paraphrase_sigma: f64,
    pub codebook_size: usize,
}

impl FeatureMapConfig {
    pub fn new(d_key: usize, d_val: usize, universe_seed: u64, codebook_size: usize) -> Self {
        assert!(d_key >= 2 && d_val >= 2, "feature dimensions must be >= 2");
        assert!(codebook_size >= 2, "codebook needs at least 2 objects");
        FeatureMapConfig {
            d_key,
            d_val,
            universe_seed,
            paraphrase_sigma: PARAPHRASE_SIGMA_DEFAULT,
            codebook_size,
        }
    }
}

impl Default for FeatureMapConfig {
    fn default() -> Self {
        FeatureMapConfig::new(64, 48, 0, 256)
    }
}

/// Deterministic unit-norm value vector per object id.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCodebook {
    vectors: Vec<Vec<f64>>,
}

impl ObjectCodebook {
    pub fn build(cfg: &FeatureMapConfig) -> Self {
        let vectors = (0..cfg.codebook_size as u64)
            .map(|o| unit_gaussian(cfg.d_val, cfg.universe_seed, &[TAG_VALUE, o]))
            .collect();
        ObjectCodebook { vectors }
    }

    /// Explicit codebook, used by tests that need hand-constructed values.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        assert!(!vectors.is_empty());
        ObjectCodebook { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn value(&self, object: u64) -> Result<&[f64]> {
        self.vectors
            .get(object as usize)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownObject {
                id: object,
                codebook_size: self.vectors.len(),
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u64, v.as_slice()))
    }
}

/// Feature maps plus codebook; shared by every layer built from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    pub cfg: FeatureMapConfig,
    pub codebook: ObjectCodebook,
}

impl Universe {
    pub fn new(cfg: FeatureMapConfig) -> Self {
        let codebook = ObjectCodebook::build(&cfg);
        Universe { cfg, codebook }
    }

    pub fn with_codebook(cfg: FeatureMapConfig, codebook: ObjectCodebook) -> Self {
        Universe { cfg, codebook }
    }

    /// Unit-norm key for a (subject, relation) pair, deterministic in the
    /// universe seed.
    pub fn key_of(&self, subject: u64, relation: u64) -> Vec<f64> {
        unit_gaussian(
            self.cfg.d_key,
            self.cfg.universe_seed,
            &[TAG_KEY, subject, relation],
        )
    }

    pub fn key_of_fact(&self, fact: &Fact) -> Vec<f64> {
        self.key_of(fact.subject, fact.relation)
    }

    pub fn value_of(&self, object: u64) -> Result<Vec<f64>> {
        Ok(self.codebook.value(object)?.to_vec())
    }

    /// Paraphrase model: nudge the key along a seeded unit Gaussian
    /// direction and renormalize. `sigma = 0` returns the key unchanged.
    pub fn perturb_key(&self, key: &[f64], seed: u64) -> Vec<f64> {
        if self.cfg.paraphrase_sigma == 0.0 {
            return key.to_vec();
        }
        let g = unit_gaussian(key.len(), self.cfg.universe_seed, &[TAG_PERTURB, seed]);
        let mut out: Vec<f64> = key
            .iter()
            .zip(&g)
            .map(|(k, gi)| k + self.cfg.paraphrase_sigma * gi)
            .collect();
        linalg::normalize(&mut out);
        out
    }
}

fn unit_gaussian(dim: usize, seed: u64, tags: &[u64]) -> Vec<f64> {
    let m = linalg::random_gaussian(dim, 1, seed, tags);
    let mut v = m.column(0);
    linalg::normalize(&mut v);
    v
}

/// The associations a layer was initialized with; kept around so tests and
/// harnesses can reconstruct the exact existing-knowledge statistics.
#[derive(Debug, Clone)]
pub struct BaseKnowledge {
    pub facts: Vec<Fact>,
    /// d_key × n_init, column i is the key of facts[i].
    pub keys: Matrix,
    /// d_val × n_init, column i is the value of facts[i].object.
    pub values: Matrix,
}

/// A d_val×d_key linear key→value memory plus its existing-knowledge
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayer {
    pub weights: Matrix,
    /// SPD covariance statistic of the base keys:
    /// `mu·(1/n_init)·K_init·K_initᵀ + ridge·I`.
    pub c0: Matrix,
    pub mu: f64,
    pub base_facts: Vec<Fact>,
}

impl SyntheticLayer {
    pub fn d_key(&self) -> usize {
        self.weights.cols()
    }

    pub fn d_val(&self) -> usize {
        self.weights.rows()
    }

    /// Hand-assembled layer for tests.
    pub fn from_parts(weights: Matrix, c0: Matrix, mu: f64, base_facts: Vec<Fact>) -> Self {
        SyntheticLayer {
            weights,
            c0,
            mu,
            base_facts,
        }
    }

    pub fn output(&self, key: &[f64]) -> Vec<f64> {
        linalg::matvec(&self.weights, key)
    }
}

/// Initialize a layer that memorizes `n_init` sampled base facts.
///
/// The weights solve `W·(K_init·K_initᵀ + ridge·I) = V_init·K_initᵀ`, a
/// ridge fit that interpolates the base associations whenever
/// `n_init <= d_key` and least-squares-fits them beyond capacity.
pub fn init_layer(universe: &Universe, n_init: usize, seed: u64) -> Result<(SyntheticLayer, BaseKnowledge)> {
    init_layer_with_mu(universe, n_init, seed, MU_DEFAULT)
}

pub fn init_layer_with_mu(
    universe: &Universe,
    n_init: usize,
    seed: u64,
    mu: f64,
) -> Result<(SyntheticLayer, BaseKnowledge)> {
    if n_init < universe.cfg.d_key {
        log::warn!(
            "n_init = {} is below d_key = {}; base statistics will be rank-deficient",
            n_init,
            universe.cfg.d_key
        );
    }
    let facts = sample_facts(universe, n_init, seed, &HashSet::new())?;
    let key_cols: Vec<Vec<f64>> = facts.iter().map(|f| universe.key_of_fact(f)).collect();
    let val_cols: Vec<Vec<f64>> = facts
        .iter()
        .map(|f| universe.value_of(f.object))
        .collect::<Result<_>>()?;
    let keys = Matrix::from_columns(&key_cols);
    let values = Matrix::from_columns(&val_cols);

    let kkt = linalg::gram(&keys);
    let mut fit = kkt.clone();
    for i in 0..fit.rows() {
        fit.set(i, i, fit.get(i, i) + INIT_RIDGE);
    }
    let vkt = linalg::matmul_bt(&values, &keys)?;
    let weights = linalg::solve_spd_right(&fit, &vkt)?;

    let mut c0 = kkt.scale(mu / n_init as f64);
    for i in 0..c0.rows() {
        c0.set(i, i, c0.get(i, i) + C0_RIDGE);
    }

    let layer = SyntheticLayer {
        weights,
        c0,
        mu,
        base_facts: facts.clone(),
    };
    let base = BaseKnowledge {
        facts,
        keys,
        values,
    };
    Ok((layer, base))
}

/// Sample `n` facts with distinct (subject, relation) pairs, also disjoint
/// from `taken`.
pub fn sample_facts(
    universe: &Universe,
    n: usize,
    seed: u64,
    taken: &HashSet<(u64, u64)>,
) -> Result<Vec<Fact>> {
    sample_facts_from_pools(universe, n, seed, taken, SUBJECT_POOL, RELATION_POOL)
}

fn sample_facts_from_pools(
    universe: &Universe,
    n: usize,
    seed: u64,
    taken: &HashSet<(u64, u64)>,
    subject_pool: u64,
    relation_pool: u64,
) -> Result<Vec<Fact>> {
    use rand::Rng;
    let capacity = (subject_pool as u128 * relation_pool as u128) as usize;
    if n + taken.len() > capacity {
        return Err(Error::UniverseExhausted {
            needed: n,
            capacity,
        });
    }
    let mut rng = linalg::seeded_rng(universe.cfg.universe_seed, &[TAG_FACTS, seed]);
    let mut used: HashSet<(u64, u64)> = taken.clone();
    let mut facts = Vec::with_capacity(n);
    let max_attempts = 64 * (n + 16);
    let mut attempts = 0usize;
    while facts.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::UniverseExhausted {
                needed: n,
                capacity,
            });
        }
        let subject = rng.gen_range(0..subject_pool);
        let relation = rng.gen_range(0..relation_pool);
        if !used.insert((subject, relation)) {
            continue;
        }
        let object = rng.gen_range(0..universe.cfg.codebook_size as u64);
        facts.push(Fact {
            subject,
            relation,
            object,
        });
    }
    Ok(facts)
}

/// Sample `n` edit requests partitioned across `clients` clients.
///
/// Lookup pairs are disjoint from `disjoint_from` and from each other
/// (fresh subjects guarantee this). When the disjoint set is nonempty, the
/// relation and old object of each request are copied from one of its
/// facts, so each edit has at least one neighborhood fact sharing
/// `(relation, old object)`. Requests are stamped with round 0; the round
/// loop restamps them. When `clients` does not divide `n` evenly the
/// remainder goes to the last client.
pub fn sample_edit_requests(
    universe: &Universe,
    n: usize,
    clients: usize,
    seed: u64,
    disjoint_from: &[Fact],
) -> Result<Vec<EditRequest>> {
    use rand::Rng;
    assert!(clients >= 1, "need at least one client");
    let mut rng = linalg::seeded_rng(universe.cfg.universe_seed, &[TAG_REQUESTS, seed]);
    let mut used: HashSet<(u64, u64)> = disjoint_from.iter().map(|f| f.lookup()).collect();
    let capacity = (SUBJECT_POOL as u128 * RELATION_POOL as u128) as usize;
    if n + used.len() > capacity {
        return Err(Error::UniverseExhausted {
            needed: n,
            capacity,
        });
    }
    let codebook = universe.cfg.codebook_size as u64;
    let per_client = n / clients;
    let mut requests = Vec::with_capacity(n);
    let max_attempts = 64 * (n + 16);
    let mut attempts = 0usize;
    while requests.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::UniverseExhausted {
                needed: n,
                capacity,
            });
        }
        let (relation, old_object) = if disjoint_from.is_empty() {
            (rng.gen_range(0..RELATION_POOL), rng.gen_range(0..codebook))
        } else {
            let f = &disjoint_from[rng.gen_range(0..disjoint_from.len())];
            (f.relation, f.object)
        };
        let subject = rng.gen_range(0..SUBJECT_POOL);
        if !used.insert((subject, relation)) {
            continue;
        }
        let mut new_object = rng.gen_range(0..codebook);
        if new_object == old_object {
            new_object = (new_object + 1) % codebook;
        }
        let idx = requests.len();
        let client_id = (idx / per_client.max(1)).min(clients - 1) as u32;
        requests.push(EditRequest {
            fact: Fact {
                subject,
                relation,
                object: new_object,
            },
            old_object,
            client_id,
            round: 0,
        });
    }
    Ok(requests)
}

/// Group requests by client id (ascending), preserving request order.
pub fn partition_by_client(requests: &[EditRequest], clients: usize) -> Vec<Vec<EditRequest>> {
    let mut out = vec![Vec::new(); clients];
    for r in requests {
        let c = r.client_id as usize;
        assert!(c < clients, "client id {c} out of range {clients}");
        out[c].push(*r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm2};

    fn small_universe() -> Universe {
        Universe::new(FeatureMapConfig::new(16, 12, 7, 32))
    }

    #[test]
    fn key_of_is_deterministic_and_unit() {
        let u = small_universe();
        let k1 = u.key_of(1, 2);
        let k2 = u.key_of(1, 2);
        assert_eq!(k1, k2);
        assert!((norm2(&k1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_pairs_are_nearly_orthogonal() {
        let u = small_universe();
        let a = u.key_of(1, 2);
        let b = u.key_of(2, 1);
        assert!(dot(&a, &b).abs() < 0.9);
    }

    #[test]
    fn value_of_determinism_and_errors() {
        let u = small_universe();
        let v1 = u.value_of(3).unwrap();
        let v2 = u.value_of(3).unwrap();
        assert_eq!(v1, v2);
        assert!((norm2(&v1) - 1.0).abs() < 1e-12);
        assert!(matches!(
            u.value_of(1000),
            Err(Error::UnknownObject { id: 1000, .. })
        ));
        // near-orthogonality for a larger value dimension
        let big = Universe::new(FeatureMapConfig::new(16, 64, 7, 32));
        let a = big.value_of(0).unwrap();
        let b = big.value_of(1).unwrap();
        assert!(dot(&a, &b).abs() < 0.9);
    }

    #[test]
    fn perturb_sigma_zero_is_identity() {
        let mut cfg = FeatureMapConfig::new(16, 12, 7, 32);
        cfg.paraphrase_sigma = 0.0;
        let u = Universe::new(cfg);
        let k = u.key_of(4, 2);
        assert_eq!(u.perturb_key(&k, 9), k);
    }

    #[test]
    fn perturb_is_deterministic_and_stays_close() {
        let u = small_universe();
        let k = u.key_of(4, 2);
        let p1 = u.perturb_key(&k, 9);
        let p2 = u.perturb_key(&k, 9);
        assert_eq!(p1, p2);
        assert!((norm2(&p1) - 1.0).abs() < 1e-12);

        // 5th percentile of the cosine over many perturbation seeds
        let mut cosines: Vec<f64> = (0..1000).map(|s| dot(&k, &u.perturb_key(&k, s))).collect();
        cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(cosines[50] >= 0.99, "p5 cosine = {}", cosines[50]);
    }

    #[test]
    fn init_memorizes_within_capacity() {
        // n_init <= d_key: the ridge fit interpolates, so argmin over the
        // codebook recovers every base object.
        let u = Universe::new(FeatureMapConfig::new(32, 24, 3, 64));
        let (layer, base) = init_layer(&u, 32, 5).unwrap();
        let mut hits = 0usize;
        for f in &base.facts {
            let out = layer.output(&u.key_of_fact(f));
            let mut best = (f64::INFINITY, 0u64);
            for (o, v) in u.codebook.iter() {
                let d2: f64 = out.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < best.0 {
                    best = (d2, o);
                }
            }
            if best.1 == f.object {
                hits += 1;
            }
        }
        assert!(hits * 100 >= base.facts.len() * 99, "recall {hits}/32");
    }

    #[test]
    fn c0_is_spd_by_construction() {
        let u = small_universe();
        let (layer, _) = init_layer(&u, 64, 5).unwrap();
        for i in 0..layer.c0.rows() {
            for j in 0..i {
                assert_eq!(layer.c0.get(i, j), layer.c0.get(j, i));
            }
        }
        // positive-definite iff the SPD solve path accepts it
        let rhs = Matrix::identity(layer.c0.rows());
        assert!(linalg::solve_spd(&layer.c0, &rhs).is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let u = small_universe();
        let (l1, _) = init_layer(&u, 40, 11).unwrap();
        let (l2, _) = init_layer(&u, 40, 11).unwrap();
        assert_eq!(l1.weights, l2.weights);
        assert_eq!(l1.c0, l2.c0);
    }

    #[test]
    fn base_statistic_dominates_edit_grams() {
        // The existing-knowledge statistic is much larger than the Gram of
        // a 100-edit batch under default dimensions.
        let u = Universe::new(FeatureMapConfig::default());
        let (layer, base) = init_layer(&u, 512, 1).unwrap();
        let reqs = sample_edit_requests(&u, 100, 1, 2, &base.facts).unwrap();
        let cols: Vec<Vec<f64>> = reqs.iter().map(|r| u.key_of_fact(&r.fact)).collect();
        let k = Matrix::from_columns(&cols);
        let ratio =
            linalg::frobenius_norm(&layer.c0) / linalg::frobenius_norm(&linalg::gram(&k));
        assert!(ratio > 10.0, "ratio = {ratio}");
    }

    #[test]
    fn sampler_partitions_evenly() {
        let u = small_universe();
        let reqs = sample_edit_requests(&u, 10, 5, 1, &[]).unwrap();
        for c in 0..5u32 {
            assert_eq!(reqs.iter().filter(|r| r.client_id == c).count(), 2);
        }
        let lookups: HashSet<_> = reqs.iter().map(|r| r.fact.lookup()).collect();
        assert_eq!(lookups.len(), 10);
        for r in &reqs {
            assert_ne!(r.fact.object, r.old_object);
        }
    }

    #[test]
    fn sampler_remainder_goes_to_last_client() {
        let u = small_universe();
        let reqs = sample_edit_requests(&u, 7, 3, 1, &[]).unwrap();
        let counts: Vec<usize> = (0..3u32)
            .map(|c| reqs.iter().filter(|r| r.client_id == c).count())
            .collect();
        assert_eq!(counts, vec![2, 2, 3]);
    }

    #[test]
    fn sampler_differs_across_seeds_and_respects_disjoint() {
        let u = small_universe();
        let base = sample_facts(&u, 20, 0, &HashSet::new()).unwrap();
        let r1 = sample_edit_requests(&u, 8, 2, 1, &base).unwrap();
        let r2 = sample_edit_requests(&u, 8, 2, 2, &base).unwrap();
        assert_ne!(r1, r2);
        let base_lookups: HashSet<_> = base.iter().map(|f| f.lookup()).collect();
        for r in r1.iter().chain(r2.iter()) {
            assert!(!base_lookups.contains(&r.fact.lookup()));
        }
    }

    #[test]
    fn exhausted_universe_is_reported() {
        let u = small_universe();
        let err = sample_facts_from_pools(&u, 10, 1, &HashSet::new(), 2, 2).unwrap_err();
        assert!(matches!(err, Error::UniverseExhausted { .. }));
    }
}
