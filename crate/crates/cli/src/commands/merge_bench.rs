//! One-round strategy comparison: the joint edit plus every merge
//! strategy, scored with the full metric family.

use collabedit_core::collab::MergeStrategy;
use collabedit_core::config::RunConfig;
use collabedit_core::eval::merge_bench;
use collabedit_core::knowledge::sample_edit_requests;

use crate::output::{fmt_f64, CommandOutput};

pub fn run(cfg: &RunConfig, out: &CommandOutput) -> anyhow::Result<()> {
    let universe = cfg.universe();
    let (stack, _) = cfg.build_stack(&universe)?;
    let layer = stack.layers[cfg.edit_range[0]].clone();
    let total = cfg.n_clients * cfg.edits_per_client;
    let requests =
        sample_edit_requests(&universe, total, cfg.n_clients, cfg.seed, &layer.base_facts)?;
    let strategies = vec![
        MergeStrategy::CollabEdit,
        MergeStrategy::SimpleAverage,
        MergeStrategy::task_arithmetic(),
        MergeStrategy::ties_merging(),
    ];
    let rows = merge_bench(
        &universe,
        &layer,
        &requests,
        cfg.n_clients,
        &strategies,
        &cfg.eval_options(),
    )?;

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.clone(),
                fmt_f64(r.metrics.es),
                fmt_f64(r.metrics.ps),
                fmt_f64(r.metrics.ns),
                fmt_f64(r.metrics.score),
                fmt_f64(r.metrics.ea),
                fmt_f64(r.metrics.pa),
                fmt_f64(r.metrics.na),
                fmt_f64(r.metrics.acc_score),
                fmt_f64(r.weight_gap_rel),
            ]
        })
        .collect();
    out.write_csv(
        &[
            "strategy",
            "es",
            "ps",
            "ns",
            "score",
            "ea",
            "pa",
            "na",
            "acc_score",
            "weight_gap_rel",
        ],
        &csv_rows,
    )?;
    out.write_summary(
        cfg,
        serde_json::json!({
            "total_edits": total,
            "rows": rows,
        }),
    )?;
    Ok(())
}
