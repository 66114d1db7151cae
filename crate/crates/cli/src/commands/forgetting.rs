//! Forgetting study: track old-request quality across many rounds of new
//! edits, with the covariance statistic frozen vs dynamic, paired per
//! seed.

use collabedit_core::config::RunConfig;
use collabedit_core::interventions::{forgetting_experiment, sample_forgetting_config, ForgettingConfig};
use collabedit_core::knowledge::{init_layer_with_mu, FeatureMapConfig, Universe};

use crate::output::{fmt_f64, CommandOutput};

pub fn run(
    cfg: &RunConfig,
    rounds: usize,
    per_round: usize,
    n_old: usize,
    eval_seeds: usize,
    out: &CommandOutput,
) -> anyhow::Result<()> {
    let mut csv_rows: Vec<Vec<String>> = Vec::new();
    let mut seed_summaries = Vec::new();

    for i in 0..eval_seeds as u64 {
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(i);
        let universe = Universe::new(FeatureMapConfig {
            universe_seed: seed,
            ..cfg.feature_map()
        });
        let (layer, _) = init_layer_with_mu(&universe, cfg.n_init, seed, cfg.mu)?;
        let frozen_cfg = ForgettingConfig {
            beta0: cfg.beta0,
            beta1: cfg.beta1,
            opts: cfg.eval_options(),
            ..sample_forgetting_config(&universe, &layer, n_old, rounds, per_round, seed, false)?
        };
        let dynamic_cfg = ForgettingConfig {
            dynamic_c: true,
            ..frozen_cfg.clone()
        };

        for (mode, run_cfg) in [("immutable", &frozen_cfg), ("dynamic", &dynamic_cfg)] {
            let report = forgetting_experiment(&universe, &layer, run_cfg)?;
            // metrics stream: one JSON object per round
            for (round, m) in report.per_round.iter().enumerate() {
                println!(
                    "{}",
                    serde_json::json!({
                        "seed": seed, "mode": mode, "round": round + 1,
                        "acc_score": m.acc_score, "score": m.score,
                    })
                );
            }
            csv_rows.push(vec![
                seed.to_string(),
                mode.to_string(),
                "before".into(),
                fmt_f64(report.before.ea),
                fmt_f64(report.before.pa),
                fmt_f64(report.before.na),
                fmt_f64(report.before.acc_score),
                fmt_f64(report.before.score),
            ]);
            csv_rows.push(vec![
                seed.to_string(),
                mode.to_string(),
                "after".into(),
                fmt_f64(report.after.ea),
                fmt_f64(report.after.pa),
                fmt_f64(report.after.na),
                fmt_f64(report.after.acc_score),
                fmt_f64(report.after.score),
            ]);
            seed_summaries.push(serde_json::json!({
                "seed": seed,
                "mode": mode,
                "before_acc_score": report.before.acc_score,
                "after_acc_score": report.after.acc_score,
            }));
        }
    }

    out.write_csv(
        &["seed", "mode", "phase", "ea", "pa", "na", "acc_score", "score"],
        &csv_rows,
    )?;
    out.write_summary(
        cfg,
        serde_json::json!({
            "rounds": rounds,
            "per_round": per_round,
            "n_old": n_old,
            "eval_seeds": eval_seeds,
            "runs": seed_summaries,
        }),
    )?;
    Ok(())
}
