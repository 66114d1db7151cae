//! Repeated-edit residual trace with the closed-recurrence check and the
//! overlap detector.

use collabedit_core::config::RunConfig;
use collabedit_core::interventions::{overlap_detect, overlap_run};
use collabedit_core::knowledge::sample_edit_requests;

use crate::output::{fmt_bool, fmt_f64, CommandOutput};

pub fn run(
    cfg: &RunConfig,
    repetitions: usize,
    batch: usize,
    out: &CommandOutput,
) -> anyhow::Result<()> {
    let universe = cfg.universe();
    let (stack, _) = cfg.build_stack(&universe)?;
    let layer = stack.layers[cfg.edit_range[0]].clone();
    let requests = sample_edit_requests(&universe, batch, 1, cfg.seed, &layer.base_facts)?;
    let trace = overlap_run(
        &universe,
        &layer,
        &requests,
        repetitions,
        &layer.c0,
        cfg.theta,
        cfg.theta_relative,
    )?;
    let (crossed, crossing_index) = overlap_detect(&trace);

    let csv_rows: Vec<Vec<String>> = trace
        .simulated
        .iter()
        .zip(&trace.predicted)
        .enumerate()
        .map(|(t, (s, p))| vec![t.to_string(), fmt_f64(*s), fmt_f64(*p)])
        .collect();
    out.write_csv(&["repetition", "residual_simulated", "residual_predicted"], &csv_rows)?;
    out.write_summary(
        cfg,
        serde_json::json!({
            "repetitions": repetitions,
            "batch": batch,
            "theta_effective": trace.effective_theta(),
            "crossed": fmt_bool(crossed),
            "crossing_index": crossing_index,
            "initial_residual": trace.simulated[0],
            "final_residual": trace.simulated[trace.simulated.len() - 1],
        }),
    )?;
    Ok(())
}
