//! Conflict study: inject a rival edit for every request, merge
//! collaboratively, detect conflicts from client failure reports, resolve
//! by arrival order with augmented re-edits, and report margins.

use collabedit_core::config::RunConfig;
use collabedit_core::interventions::{conflict_study, ConflictPolicy, ConflictStudyConfig};
use collabedit_core::knowledge::sample_edit_requests;

use crate::output::{fmt_bool, fmt_f64, CommandOutput};

pub fn run(cfg: &RunConfig, groups: usize, out: &CommandOutput) -> anyhow::Result<()> {
    let universe = cfg.universe();
    let (stack, _) = cfg.build_stack(&universe)?;
    let layer = stack.layers[cfg.edit_range[0]].clone();
    let requests =
        sample_edit_requests(&universe, groups, cfg.n_clients, cfg.seed, &layer.base_facts)?;
    let study_cfg = ConflictStudyConfig {
        n_groups: groups,
        n_clients: cfg.n_clients,
        augmentation_factor: cfg.augmentation_factor,
        policy: ConflictPolicy::Fcfs,
        opts: cfg.eval_options(),
        salt_seed: cfg.seed,
        inject_seed: cfg.seed.wrapping_add(1),
    };
    let report = conflict_study(&universe, &layer, &requests, &study_cfg)?;

    // metrics stream: the merge round as one JSON object
    println!("{}", serde_json::to_string(&report.merge_round)?);

    let csv_rows: Vec<Vec<String>> = report
        .outcomes
        .iter()
        .map(|o| {
            vec![
                o.group_id.to_string(),
                o.winner_client.to_string(),
                fmt_bool(o.detected),
                fmt_f64(o.pre_margin),
                fmt_f64(o.post_margin),
                fmt_bool(o.pre_winner_argmax),
                fmt_bool(o.post_winner_argmax),
            ]
        })
        .collect();
    out.write_csv(
        &[
            "group_id",
            "winner_client",
            "detected",
            "pre_margin",
            "post_margin",
            "pre_winner_argmax",
            "post_winner_argmax",
        ],
        &csv_rows,
    )?;
    out.write_summary(
        cfg,
        serde_json::json!({
            "groups": groups,
            "detected_groups": report.detected_groups,
            "pre_winner_rate": report.pre_winner_rate,
            "post_winner_rate": report.post_winner_rate,
            "pre_margin_mean": report.pre_margin_mean,
            "post_margin_mean": report.post_margin_mean,
            "base_preserved_rate": report.base_preserved_rate,
        }),
    )?;
    Ok(())
}
