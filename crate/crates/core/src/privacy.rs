//! Numerical verification of the Gram-sharing privacy argument: any
//! orthogonal right-rotation of the key matrix leaves `K·Kᵀ` unchanged, so
//! infinitely many key matrices share one Gram and the shared product does
//! not determine the keys.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

pub use crate::linalg::gram;

/// Distances between an original key matrix and a confused variant that
/// shares its Gram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    /// ‖K′K′ᵀ − KKᵀ‖_F
    pub gram_distance: f64,
    /// ‖K′ − K‖_F
    pub key_distance: f64,
    /// Number of key columns.
    pub n_keys: usize,
}

/// Rotate the key columns by a seeded orthogonal matrix: `K′ = K·Q`.
///
/// Refused for fewer than two columns — a single column only admits sign
/// flips, which do not hide the key.
pub fn orthogonal_confusion(keys: &Matrix, seed: u64) -> Result<(Matrix, GramReport)> {
    let n_keys = keys.cols();
    if n_keys < 2 {
        return Err(Error::InsufficientKeyColumns { cols: n_keys });
    }
    let q = linalg::random_orthogonal(n_keys, seed);
    let confused = linalg::matmul(keys, &q)?;
    let g = gram(keys);
    let g2 = gram(&confused);
    let report = GramReport {
        gram_distance: linalg::frobenius_norm(&g2.sub(&g)?),
        key_distance: linalg::frobenius_norm(&confused.sub(keys)?),
        n_keys,
    };
    Ok((confused, report))
}

/// One row of the ambiguity sweep: how far apart key matrices sharing one
/// Gram can be, at a given column count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_keys: usize,
    pub min_key_distance: f64,
    pub median_key_distance: f64,
    pub max_gram_distance_rel: f64,
}

/// For each column count, confuse a sampled key matrix under many seeds
/// and tabulate the spread of key distances at (numerically) fixed Gram.
pub fn gram_ambiguity_sweep(
    d: usize,
    key_counts: &[usize],
    n_seeds: usize,
    sample_seed: u64,
) -> Result<Vec<SweepRow>> {
    assert!(n_seeds >= 1, "sweep needs at least one seed");
    let mut rows = Vec::with_capacity(key_counts.len());
    for &e in key_counts {
        let keys = sample_keys(d, e, sample_seed);
        let gram_norm = linalg::frobenius_norm(&gram(&keys));
        let mut key_distances = Vec::with_capacity(n_seeds);
        let mut max_gram_rel = 0.0_f64;
        for seed in 0..n_seeds as u64 {
            let (_, report) = orthogonal_confusion(&keys, seed)?;
            key_distances.push(report.key_distance);
            max_gram_rel = max_gram_rel.max(report.gram_distance / gram_norm);
        }
        key_distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.push(SweepRow {
            n_keys: e,
            min_key_distance: key_distances[0],
            median_key_distance: key_distances[key_distances.len() / 2],
            max_gram_distance_rel: max_gram_rel,
        });
    }
    Ok(rows)
}

/// Unit-norm key columns sampled like the feature maps produce them.
pub fn sample_keys(d: usize, e: usize, seed: u64) -> Matrix {
    let g = linalg::random_gaussian(d, e, seed, &[0x7072_6976]);
    let cols: Vec<Vec<f64>> = (0..e)
        .map(|j| {
            let mut c = g.column(j);
            linalg::normalize(&mut c);
            c
        })
        .collect();
    Matrix::from_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_norm;

    #[test]
    fn gram_of_zero_is_zero() {
        assert_eq!(gram(&Matrix::zeros(3, 2)), Matrix::zeros(3, 3));
    }

    #[test]
    fn gram_of_unit_column_is_rank_one_with_unit_trace() {
        let k = Matrix::from_columns(&[vec![0.6, 0.8]]);
        let g = gram(&k);
        let trace = g.get(0, 0) + g.get(1, 1);
        assert!((trace - 1.0).abs() < 1e-15);
        // rank one: determinant vanishes
        let det = g.get(0, 0) * g.get(1, 1) - g.get(0, 1) * g.get(1, 0);
        assert!(det.abs() < 1e-15);
    }

    #[test]
    fn gram_hand_instance() {
        let k = Matrix::from_columns(&[vec![1.0, 0.0, 1.0, 2.0], vec![2.0, 1.0, 0.0, 1.0]]);
        let expected = Matrix::from_rows(&[
            vec![5.0, 2.0, 1.0, 4.0],
            vec![2.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0, 2.0],
            vec![4.0, 1.0, 2.0, 5.0],
        ]);
        assert_eq!(gram(&k), expected);
    }

    #[test]
    fn confusion_preserves_gram_and_moves_keys() {
        let keys = sample_keys(16, 8, 3);
        let gram_norm = frobenius_norm(&gram(&keys));
        let mut moved = 0usize;
        for seed in 0..1000u64 {
            let (_, report) = orthogonal_confusion(&keys, seed).unwrap();
            assert!(report.gram_distance <= 1e-9 * gram_norm);
            if report.key_distance > 0.1 * frobenius_norm(&keys) {
                moved += 1;
            }
        }
        assert!(moved >= 990, "only {moved}/1000 seeds moved the keys");
    }

    #[test]
    fn single_column_is_refused() {
        let keys = sample_keys(8, 1, 0);
        assert!(matches!(
            orthogonal_confusion(&keys, 1),
            Err(Error::InsufficientKeyColumns { cols: 1 })
        ));
    }

    #[test]
    fn many_distinct_variants_share_one_gram() {
        let keys = sample_keys(12, 4, 5);
        let variants: Vec<Matrix> = (0..100u64)
            .map(|s| orthogonal_confusion(&keys, s).unwrap().0)
            .collect();
        for i in 0..variants.len() {
            for j in (i + 1)..variants.len() {
                let d = frobenius_norm(&variants[i].sub(&variants[j]).unwrap());
                assert!(d > 1e-6, "variants {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn identity_holds_across_shapes() {
        for (d, e) in [(4usize, 2usize), (16, 8), (64, 32), (128, 64)] {
            let keys = sample_keys(d, e, 7);
            let gram_norm = frobenius_norm(&gram(&keys));
            let (_, report) = orthogonal_confusion(&keys, 11).unwrap();
            assert!(
                report.gram_distance <= 1e-9 * gram_norm,
                "d={d} e={e}: {}",
                report.gram_distance
            );
        }
    }

    #[test]
    fn sweep_rows_and_determinism() {
        let rows = gram_ambiguity_sweep(8, &[2, 4, 8], 16, 1).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.min_key_distance > 0.0));
        let rows2 = gram_ambiguity_sweep(8, &[2, 4, 8], 16, 1).unwrap();
        for (a, b) in rows.iter().zip(&rows2) {
            assert_eq!(a.min_key_distance.to_bits(), b.min_key_distance.to_bits());
            assert_eq!(
                a.median_key_distance.to_bits(),
                b.median_key_distance.to_bits()
            );
        }
    }
}
