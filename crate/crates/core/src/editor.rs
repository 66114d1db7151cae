//! Single-model knowledge editing: the closed-form weight update, residual
//! computation, and residual spreading across a small residual-stream
//! stack.
//!
//! For a layer `W` with existing-knowledge statistic `C`, a batch of keys
//! `K` and desired values `V` yields the update
//! `Δ = R·Kᵀ·(C + K·Kᵀ)⁻¹` with `R = V − W·K`. The inverse is always
//! applied as a solve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{EditRequest, SyntheticLayer, Universe};
use crate::linalg::{self, Matrix};

/// One batch of edits against a specific layer snapshot.
#[derive(Debug, Clone)]
pub struct EditBatch {
    /// d_key × E, one key column per request.
    pub keys: Matrix,
    /// d_val × E, desired output per request.
    pub values: Matrix,
    /// d_val × E, `values − W·keys` for the layer the batch was built on.
    pub residual: Matrix,
}

impl EditBatch {
    pub fn len(&self) -> usize {
        self.keys.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.cols() == 0
    }

    /// Assemble a batch from explicit keys and values against a layer.
    pub fn from_parts(layer: &SyntheticLayer, keys: Matrix, values: Matrix) -> Result<Self> {
        if keys.cols() != values.cols() {
            return Err(Error::ShapeMismatch {
                op: "edit_batch",
                lhs_rows: keys.rows(),
                lhs_cols: keys.cols(),
                rhs_rows: values.rows(),
                rhs_cols: values.cols(),
            });
        }
        let wk = linalg::matmul(&layer.weights, &keys)?;
        let residual = values.sub(&wk)?;
        Ok(EditBatch {
            keys,
            values,
            residual,
        })
    }
}

/// Keys from the feature map, values from the codebook, residual against
/// the layer's current weights.
pub fn compute_batch(
    universe: &Universe,
    layer: &SyntheticLayer,
    requests: &[EditRequest],
) -> Result<EditBatch> {
    if requests.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let key_cols: Vec<Vec<f64>> = requests
        .iter()
        .map(|r| universe.key_of_fact(&r.fact))
        .collect();
    let val_cols: Vec<Vec<f64>> = requests
        .iter()
        .map(|r| universe.value_of(r.fact.object))
        .collect::<Result<_>>()?;
    EditBatch::from_parts(layer, Matrix::from_columns(&key_cols), Matrix::from_columns(&val_cols))
}

/// Closed-form weight update `Δ = R·Kᵀ·(C + K·Kᵀ)⁻¹`.
///
/// With `C → 0` and full-column-rank `K` the updated weights interpolate
/// the batch; with `C ≻ 0` the update trades new associations off against
/// preserving the ones `C` summarizes.
pub fn edit_delta(batch: &EditBatch, c: &Matrix) -> Result<Matrix> {
    let a = c.add(&linalg::gram(&batch.keys))?;
    let rkt = linalg::matmul_bt(&batch.residual, &batch.keys)?;
    linalg::solve_spd_right(&a, &rkt)
}

/// The non-private reference: edit the concatenation of every client's
/// requests in one pass.
pub fn global_edit(
    universe: &Universe,
    layer: &SyntheticLayer,
    all_requests: &[EditRequest],
    c: &Matrix,
) -> Result<Matrix> {
    let batch = compute_batch(universe, layer, all_requests)?;
    edit_delta(&batch, c)
}

/// How the existing-knowledge statistic for each edited layer is chosen.
#[derive(Debug, Clone)]
pub enum PriorSpec<'a> {
    /// Each layer uses its own stored covariance statistic.
    LayerC0,
    /// Explicit matrices, one per layer of the stack's edit range.
    Explicit(&'a [Matrix]),
    /// `kappa·I` for every layer.
    Identity(f64),
}

impl PriorSpec<'_> {
    /// Prior matrix for the layer at `offset` within the edit range.
    pub fn resolve(&self, offset: usize, layer: &SyntheticLayer) -> Matrix {
        match self {
            PriorSpec::LayerC0 => layer.c0.clone(),
            PriorSpec::Explicit(mats) => mats[offset].clone(),
            PriorSpec::Identity(kappa) => Matrix::scaled_identity(layer.d_key(), *kappa),
        }
    }
}

/// The per-layer artifacts of an edit pass: the weight update that was
/// applied and the Gram matrix of the keys it was computed from. This pair
/// is all a client ever shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEdit {
    pub layer_id: u16,
    pub delta: Matrix,
    pub gram: Matrix,
}

/// An ordered stack of layers with a residual-stream forward pass
/// `h ← h + W·h` between layers, and a contiguous range of layers open for
/// editing. Stacks deeper than one layer must be square.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<SyntheticLayer>,
    pub edit_range: std::ops::Range<usize>,
}

impl LayerStack {
    pub fn single(layer: SyntheticLayer) -> Self {
        LayerStack {
            layers: vec![layer],
            edit_range: 0..1,
        }
    }

    pub fn new(layers: Vec<SyntheticLayer>, edit_range: std::ops::Range<usize>) -> Self {
        assert!(!layers.is_empty(), "stack needs at least one layer");
        assert!(
            edit_range.start < edit_range.end && edit_range.end <= layers.len(),
            "edit range {edit_range:?} out of bounds for depth {}",
            layers.len()
        );
        if layers.len() > 1 {
            let d = layers[0].d_key();
            for l in &layers {
                assert!(
                    l.d_key() == d && l.d_val() == d,
                    "multi-layer stacks must be square and share a width"
                );
            }
        }
        LayerStack { layers, edit_range }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Width of the hidden state entering the first layer.
    pub fn d_key(&self) -> usize {
        self.layers[0].d_key()
    }

    /// Keys seen by layer `l`: the hidden state after the first `l` layers,
    /// using the current (possibly already edited) weights.
    pub fn keys_at_layer(&self, keys0: &Matrix, l: usize) -> Result<Matrix> {
        let mut h = keys0.clone();
        for j in 0..l {
            let m = linalg::matmul(&self.layers[j].weights, &h)?;
            h.add_assign(&m)?;
        }
        Ok(h)
    }

    /// Output of layer `l` (its own `W·k`, not the residual-stream state)
    /// for initial keys `keys0`.
    pub fn layer_output(&self, keys0: &Matrix, l: usize) -> Result<Matrix> {
        let k = self.keys_at_layer(keys0, l)?;
        linalg::matmul(&self.layers[l].weights, &k)
    }
}

/// Edit every layer in the stack's range, spreading the target residual
/// evenly over the layers that remain.
///
/// Layers are visited in ascending order. At layer `l` the keys are
/// recomputed through the already-edited earlier layers, the per-request
/// residual is `(z − W·k) / (remaining layer count)`, and the closed-form
/// update is applied before moving on. Returns the applied per-layer
/// updates together with their key Grams.
pub fn stack_edit_from_keys(
    stack: &mut LayerStack,
    keys0: &Matrix,
    z_targets: &Matrix,
    prior: &PriorSpec,
) -> Result<Vec<LayerEdit>> {
    let range = stack.edit_range.clone();
    let last = range.end - 1;
    if keys0.rows() != stack.d_key() {
        return Err(Error::ShapeMismatch {
            op: "stack_edit_keys",
            lhs_rows: keys0.rows(),
            lhs_cols: keys0.cols(),
            rhs_rows: stack.d_key(),
            rhs_cols: keys0.cols(),
        });
    }
    if z_targets.rows() != stack.layers[last].d_val() || z_targets.cols() != keys0.cols() {
        return Err(Error::ShapeMismatch {
            op: "stack_edit_targets",
            lhs_rows: z_targets.rows(),
            lhs_cols: z_targets.cols(),
            rhs_rows: stack.layers[last].d_val(),
            rhs_cols: keys0.cols(),
        });
    }
    let mut edits = Vec::with_capacity(range.len());
    for (offset, l) in range.clone().enumerate() {
        let keys = stack.keys_at_layer(keys0, l)?;
        let wk = linalg::matmul(&stack.layers[l].weights, &keys)?;
        let spread = (last - l + 1) as f64;
        let residual = z_targets.sub(&wk)?.scale(1.0 / spread);
        let values = wk.add(&residual)?;
        let gram = linalg::gram(&keys);
        let batch = EditBatch {
            keys,
            values,
            residual,
        };
        let c = prior.resolve(offset, &stack.layers[l]);
        let delta = edit_delta(&batch, &c)?;
        stack.layers[l].weights.add_assign(&delta)?;
        edits.push(LayerEdit {
            layer_id: l as u16,
            delta,
            gram,
        });
    }
    Ok(edits)
}

/// Target matrix for request-based stack edits: column i is the value
/// embedding of request i's new object.
pub fn z_targets_for(universe: &Universe, requests: &[EditRequest]) -> Result<Matrix> {
    if requests.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cols: Vec<Vec<f64>> = requests
        .iter()
        .map(|r| universe.value_of(r.fact.object))
        .collect::<Result<_>>()?;
    Ok(Matrix::from_columns(&cols))
}

/// Initial key matrix for a request batch.
pub fn keys_for(universe: &Universe, requests: &[EditRequest]) -> Result<Matrix> {
    if requests.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cols: Vec<Vec<f64>> = requests
        .iter()
        .map(|r| universe.key_of_fact(&r.fact))
        .collect();
    Ok(Matrix::from_columns(&cols))
}

/// Request-based stack edit: desired final-layer output is the value
/// embedding of each request's new object.
pub fn stack_edit_requests(
    universe: &Universe,
    stack: &mut LayerStack,
    requests: &[EditRequest],
    prior: &PriorSpec,
) -> Result<Vec<LayerEdit>> {
    let keys0 = keys_for(universe, requests)?;
    let z = z_targets_for(universe, requests)?;
    stack_edit_from_keys(stack, &keys0, &z, prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{init_layer, sample_edit_requests, Fact, FeatureMapConfig};
    use crate::linalg::{frobenius_norm, matmul, matmul_bt, rel_frobenius, solve_spd_right};

    fn universe(d_key: usize, d_val: usize) -> Universe {
        Universe::new(FeatureMapConfig::new(d_key, d_val, 21, 64))
    }

    #[test]
    fn satisfied_request_has_zero_residual() {
        let u = universe(8, 8);
        let (layer, _) = init_layer(&u, 16, 3).unwrap();
        // build a request whose "new value" is exactly what W already maps
        // the key to, by injecting that output as an explicit value column
        let k = u.key_of(500, 1);
        let v = layer.output(&k);
        let batch = EditBatch::from_parts(
            &layer,
            Matrix::from_columns(&[k]),
            Matrix::from_columns(&[v]),
        )
        .unwrap();
        assert!(frobenius_norm(&batch.residual) < 1e-14);
        let delta = edit_delta(&batch, &layer.c0).unwrap();
        assert!(frobenius_norm(&delta) < 1e-12);
    }

    #[test]
    fn single_request_shapes() {
        let u = universe(8, 6);
        let (layer, base) = init_layer(&u, 16, 3).unwrap();
        let reqs = sample_edit_requests(&u, 1, 1, 5, &base.facts).unwrap();
        let batch = compute_batch(&u, &layer, &reqs).unwrap();
        assert_eq!(batch.keys.rows(), 8);
        assert_eq!(batch.keys.cols(), 1);
        assert_eq!(batch.values.rows(), 6);
    }

    #[test]
    fn residual_matches_hand_arithmetic() {
        // 2x4 weights, explicit key and value; R = V - W·K entry by entry.
        let w = Matrix::from_rows(&[vec![1.0, 0.0, 2.0, 0.0], vec![0.0, 1.0, 0.0, -1.0]]);
        let layer = SyntheticLayer::from_parts(w, Matrix::identity(4), 1.0, vec![]);
        let k = Matrix::from_columns(&[vec![1.0, 2.0, 0.5, 0.0]]);
        let v = Matrix::from_columns(&[vec![3.0, -1.0]]);
        let batch = EditBatch::from_parts(&layer, k, v).unwrap();
        // W·k = (1 + 1, 2 - 0) = (2, 2); R = (3 - 2, -1 - 2) = (1, -3)
        assert!((batch.residual.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((batch.residual.get(1, 0) + 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_request_list_is_rejected() {
        let u = universe(8, 6);
        let (layer, _) = init_layer(&u, 16, 3).unwrap();
        assert!(matches!(
            compute_batch(&u, &layer, &[]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn rank_one_update_with_identity_prior() {
        // C = I, one unit key along the first axis: the solve reduces to
        // dividing the residual outer product by two.
        let layer = SyntheticLayer::from_parts(
            Matrix::zeros(3, 3),
            Matrix::identity(3),
            1.0,
            vec![],
        );
        let k = Matrix::from_columns(&[vec![1.0, 0.0, 0.0]]);
        let v = Matrix::from_columns(&[vec![1.0, 2.0, 3.0]]);
        let batch = EditBatch::from_parts(&layer, k, v).unwrap();
        let delta = edit_delta(&batch, &layer.c0).unwrap();
        let expected = Matrix::from_rows(&[
            vec![0.5, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.5, 0.0, 0.0],
        ]);
        assert!(rel_frobenius(&delta, &expected) < 1e-12);
    }

    #[test]
    fn interpolation_limit_reaches_targets() {
        let u = universe(8, 6);
        let (layer, base) = init_layer(&u, 16, 3).unwrap();
        let reqs = sample_edit_requests(&u, 4, 1, 5, &base.facts).unwrap();
        let batch = compute_batch(&u, &layer, &reqs).unwrap();
        let c = Matrix::scaled_identity(8, 1e-10);
        let delta = edit_delta(&batch, &c).unwrap();
        let w_new = layer.weights.add(&delta).unwrap();
        let out = matmul(&w_new, &batch.keys).unwrap();
        assert!(frobenius_norm(&out.sub(&batch.values).unwrap()) <= 1e-6);
    }

    #[test]
    fn delta_minimizes_joint_least_squares() {
        // Brute-force oracle: the update must agree with the normal-equation
        // solution of fitting old pairs (K_init, W·K_init) and new pairs
        // (K, V) jointly, when C is exactly K_init·K_initᵀ.
        let u = universe(6, 5);
        let (layer, _) = init_layer(&u, 8, 9).unwrap();
        // enough explicit base keys to make the statistic full rank
        let k_init_cols: Vec<Vec<f64>> =
            (0..8).map(|i| u.key_of(9000 + i, i % 3)).collect();
        let k_init = Matrix::from_columns(&k_init_cols);
        let m_init = matmul(&layer.weights, &k_init).unwrap();
        let k_cols: Vec<Vec<f64>> = (0..2).map(|i| u.key_of(9500 + i, i % 3)).collect();
        let k = Matrix::from_columns(&k_cols);
        let v = Matrix::from_columns(&[u.value_of(1).unwrap(), u.value_of(2).unwrap()]);

        let c = crate::linalg::gram(&k_init);
        let batch = EditBatch::from_parts(&layer, k.clone(), v.clone()).unwrap();
        let delta = edit_delta(&batch, &c).unwrap();

        // normal equation over the stacked problem
        let lhs = c.add(&crate::linalg::gram(&k)).unwrap();
        let rhs = matmul_bt(&m_init, &k_init)
            .unwrap()
            .add(&matmul_bt(&v, &k).unwrap())
            .unwrap();
        let w_hat = solve_spd_right(&lhs, &rhs).unwrap();
        let delta_oracle = w_hat.sub(&layer.weights).unwrap();
        assert!(
            rel_frobenius(&delta, &delta_oracle) < 1e-8,
            "rel err {}",
            rel_frobenius(&delta, &delta_oracle)
        );
    }

    #[test]
    fn stronger_prior_perturbs_base_outputs_less() {
        let u = universe(16, 12);
        let (layer, base) = init_layer(&u, 64, 3).unwrap();
        let reqs = sample_edit_requests(&u, 8, 1, 4, &base.facts).unwrap();
        let batch = compute_batch(&u, &layer, &reqs).unwrap();
        let kkt = crate::linalg::gram(&base.keys);
        let mut previous = f64::INFINITY;
        for mu in [1e2, 1e3, 1e4, 1e5] {
            let mut c = kkt.scale(mu / base.facts.len() as f64);
            for i in 0..c.rows() {
                c.set(i, i, c.get(i, i) + crate::knowledge::C0_RIDGE);
            }
            let delta = edit_delta(&batch, &c).unwrap();
            let disturbance = frobenius_norm(&matmul(&delta, &base.keys).unwrap());
            assert!(
                disturbance < previous,
                "mu={mu}: {disturbance} !< {previous}"
            );
            previous = disturbance;
        }
    }

    #[test]
    fn global_edit_is_permutation_invariant() {
        let u = universe(8, 6);
        let (layer, base) = init_layer(&u, 16, 3).unwrap();
        let reqs = sample_edit_requests(&u, 6, 2, 5, &base.facts).unwrap();
        let mut shuffled = reqs.clone();
        shuffled.reverse();
        let d1 = global_edit(&u, &layer, &reqs, &layer.c0).unwrap();
        let d2 = global_edit(&u, &layer, &shuffled, &layer.c0).unwrap();
        assert!(rel_frobenius(&d1, &d2) <= 1e-12);
    }

    fn square_stack(depth: usize, edit_range: std::ops::Range<usize>) -> (Universe, LayerStack) {
        let u = universe(10, 10);
        let mut layers = Vec::new();
        for l in 0..depth {
            let w = linalg::random_gaussian(10, 10, 100 + l as u64, &[l as u64]).scale(0.05);
            layers.push(SyntheticLayer::from_parts(
                w,
                Matrix::scaled_identity(10, 1e-10),
                1.0,
                vec![],
            ));
        }
        (u, LayerStack::new(layers, edit_range))
    }

    #[test]
    fn single_layer_range_reduces_to_plain_edit() {
        let (u, stack) = square_stack(3, 1..2);
        let reqs = sample_edit_requests(&u, 2, 1, 5, &[]).unwrap();
        let keys0 = keys_for(&u, &reqs).unwrap();
        let z = z_targets_for(&u, &reqs).unwrap();

        let mut edited = stack.clone();
        let edits = stack_edit_from_keys(&mut edited, &keys0, &z, &PriorSpec::LayerC0).unwrap();
        assert_eq!(edits.len(), 1);

        // direct single-layer edit with the full residual at the same keys
        let k1 = stack.keys_at_layer(&keys0, 1).unwrap();
        let batch = EditBatch::from_parts(&stack.layers[1], k1, z).unwrap();
        let delta = edit_delta(&batch, &stack.layers[1].c0).unwrap();
        assert!(rel_frobenius(&edits[0].delta, &delta) < 1e-12);
    }

    #[test]
    fn full_range_edit_reaches_targets() {
        let (u, mut stack) = square_stack(3, 0..3);
        let reqs = sample_edit_requests(&u, 2, 1, 6, &[]).unwrap();
        let keys0 = keys_for(&u, &reqs).unwrap();
        let z = z_targets_for(&u, &reqs).unwrap();
        stack_edit_from_keys(&mut stack, &keys0, &z, &PriorSpec::LayerC0).unwrap();
        let out = stack.layer_output(&keys0, 2).unwrap();
        assert!(
            frobenius_norm(&out.sub(&z).unwrap()) <= 1e-6,
            "final output off by {}",
            frobenius_norm(&out.sub(&z).unwrap())
        );
    }

    #[test]
    fn first_layer_absorbs_half_the_residual() {
        let (u, stack) = square_stack(2, 0..2);
        let reqs = sample_edit_requests(&u, 2, 1, 7, &[]).unwrap();
        let keys0 = keys_for(&u, &reqs).unwrap();
        let z = z_targets_for(&u, &reqs).unwrap();

        // instrument: run only the first layer of the spread manually
        let mut edited = stack.clone();
        let keys = edited.keys_at_layer(&keys0, 0).unwrap();
        let wk = matmul(&edited.layers[0].weights, &keys).unwrap();
        let residual = z.sub(&wk).unwrap().scale(0.5);
        let values = wk.add(&residual).unwrap();
        let batch = EditBatch {
            keys: keys.clone(),
            values,
            residual: residual.clone(),
        };
        let delta = edit_delta(&batch, &edited.layers[0].c0).unwrap();
        edited.layers[0].weights.add_assign(&delta).unwrap();

        // before the second layer is touched, the first layer's output has
        // moved to the midpoint between its old output and the target
        let out_new = matmul(&edited.layers[0].weights, &keys).unwrap();
        let midpoint = wk.add(&z.sub(&wk).unwrap().scale(0.5)).unwrap();
        assert!(frobenius_norm(&out_new.sub(&midpoint).unwrap()) <= 1e-6);
    }

    #[test]
    fn mismatched_targets_are_rejected() {
        let (u, mut stack) = square_stack(2, 0..2);
        let reqs = sample_edit_requests(&u, 2, 1, 7, &[]).unwrap();
        let keys0 = keys_for(&u, &reqs).unwrap();
        let bad_z = Matrix::zeros(4, 2);
        assert!(matches!(
            stack_edit_from_keys(&mut stack, &keys0, &bad_z, &PriorSpec::LayerC0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn hand_fact_constructor() {
        let f = Fact {
            subject: 3,
            relation: 1,
            object: 9,
        };
        assert_eq!(f.lookup(), (3, 1));
    }
}
