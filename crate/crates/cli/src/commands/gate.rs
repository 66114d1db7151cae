//! Gap curves per total edit count: every merge strategy against the
//! joint edit, medians over seeds.

use std::collections::BTreeMap;

use collabedit_core::config::RunConfig;
use collabedit_core::eval::{gap_curve, median, GapCurveConfig};

use crate::output::{fmt_f64, CommandOutput};

pub fn run(
    cfg: &RunConfig,
    sizes: Option<Vec<usize>>,
    eval_seeds: usize,
    out: &CommandOutput,
) -> anyhow::Result<()> {
    let sizes = sizes.unwrap_or_else(|| vec![64, 128, 256, 512, 1024]);
    let seeds: Vec<u64> = (0..eval_seeds as u64)
        .map(|i| cfg.seed.wrapping_mul(1000).wrapping_add(i))
        .collect();
    let curve_cfg = GapCurveConfig {
        sizes: sizes.clone(),
        seeds,
        n_clients: cfg.n_clients,
        d_key: cfg.d_key,
        d_val: cfg.d_val,
        codebook_size: cfg.codebook_size,
        n_init: cfg.n_init,
        mu: cfg.mu,
        opts: cfg.eval_options(),
        ..GapCurveConfig::default()
    };
    let rows = gap_curve(&curve_cfg)?;

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.size.to_string(),
                r.strategy.clone(),
                r.seed.to_string(),
                fmt_f64(r.weight_gap_rel),
                fmt_f64(r.score_strategy),
                fmt_f64(r.score_global),
                fmt_f64(r.score_gap),
            ]
        })
        .collect();
    out.write_csv(
        &[
            "size",
            "strategy",
            "seed",
            "weight_gap_rel",
            "score_strategy",
            "score_global",
            "score_gap",
        ],
        &csv_rows,
    )?;

    // medians per (strategy, size)
    let mut grouped: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        let slot = grouped.entry((r.strategy.clone(), r.size)).or_default();
        slot.0.push(r.weight_gap_rel);
        slot.1.push(r.score_gap);
    }
    let medians: Vec<serde_json::Value> = grouped
        .iter()
        .map(|((strategy, size), (gaps, scores))| {
            serde_json::json!({
                "strategy": strategy,
                "size": size,
                "weight_gap_rel_median": median(gaps),
                "score_gap_median": median(scores),
            })
        })
        .collect();
    out.write_summary(
        cfg,
        serde_json::json!({
            "sizes": sizes,
            "eval_seeds": eval_seeds,
            "medians": medians,
        }),
    )?;
    Ok(())
}
