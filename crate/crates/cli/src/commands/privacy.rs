//! Gram identity check plus the key-ambiguity sweep: how far apart key
//! matrices sharing one Gram can be, per column count. This geometric
//! proxy stands in for attack-based leakage measurements, which need a
//! trained attacker model and are out of scope at desk scale.

use collabedit_core::config::RunConfig;
use collabedit_core::privacy::{gram_ambiguity_sweep, orthogonal_confusion, sample_keys};

use crate::output::{fmt_f64, CommandOutput};

pub fn run(
    cfg: &RunConfig,
    key_counts: Option<Vec<usize>>,
    sweep_seeds: usize,
    out: &CommandOutput,
) -> anyhow::Result<()> {
    let key_counts = key_counts.unwrap_or_else(|| vec![2, 4, 8, 16, 32, 64]);
    let rows = gram_ambiguity_sweep(cfg.d_key, &key_counts, sweep_seeds, cfg.seed)?;

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_keys.to_string(),
                fmt_f64(r.min_key_distance),
                fmt_f64(r.median_key_distance),
                fmt_f64(r.max_gram_distance_rel),
            ]
        })
        .collect();
    out.write_csv(
        &[
            "n_keys",
            "min_key_distance",
            "median_key_distance",
            "max_gram_distance_rel",
        ],
        &csv_rows,
    )?;

    // the single-column refusal is part of the contract; demonstrate it
    let single = sample_keys(cfg.d_key, 1, cfg.seed);
    let single_refused = orthogonal_confusion(&single, 0).is_err();
    let max_gram_rel = rows
        .iter()
        .map(|r| r.max_gram_distance_rel)
        .fold(0.0_f64, f64::max);
    out.write_summary(
        cfg,
        serde_json::json!({
            "key_counts": key_counts,
            "sweep_seeds": sweep_seeds,
            "max_gram_distance_rel": max_gram_rel,
            "single_column_refused": single_refused,
        }),
    )?;
    Ok(())
}
