//! Run configuration shared by the CLI commands: dimensions, protocol
//! parameters, and evaluation knobs, all serializable so every result file
//! can echo the exact configuration that produced it.

use serde::{Deserialize, Serialize};

use crate::collab::{MergeStrategy, PriorMode, ServerState, KAPPA_DEFAULT};
use crate::editor::LayerStack;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::interventions::{AUGMENTATION_DEFAULT, THETA_DEFAULT};
use crate::knowledge::{
    init_layer_with_mu, BaseKnowledge, FeatureMapConfig, SyntheticLayer, Universe,
    MU_DEFAULT, PARAPHRASE_SIGMA_DEFAULT,
};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub d_key: usize,
    pub d_val: usize,
    pub codebook_size: usize,
    pub n_init: usize,
    pub n_clients: usize,
    pub edits_per_client: usize,
    pub rounds: usize,
    pub strategy: MergeStrategy,
    pub mu: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub dynamic_c: bool,
    pub prior_mode: PriorMode,
    pub paraphrase_sigma: f64,
    pub tau: f64,
    pub theta: f64,
    pub theta_relative: bool,
    pub augmentation_factor: usize,
    /// Half-open [start, end) range of editable layers.
    pub edit_range: [usize; 2],
    pub stack_depth: usize,
    pub n_paraphrases: usize,
    pub neighbors_per_edit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            d_key: 64,
            d_val: 48,
            codebook_size: 256,
            n_init: 512,
            n_clients: 4,
            edits_per_client: 16,
            rounds: 1,
            strategy: MergeStrategy::CollabEdit,
            mu: MU_DEFAULT,
            beta0: 1.0,
            beta1: 1.0,
            dynamic_c: false,
            prior_mode: PriorMode::Covariance,
            paraphrase_sigma: PARAPHRASE_SIGMA_DEFAULT,
            tau: 0.1,
            theta: THETA_DEFAULT,
            theta_relative: true,
            augmentation_factor: AUGMENTATION_DEFAULT,
            edit_range: [0, 1],
            stack_depth: 1,
            n_paraphrases: 2,
            neighbors_per_edit: 5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d_key < 2 || self.d_val < 2 {
            return fail(format!(
                "d_key and d_val must be >= 2 (got {} and {})",
                self.d_key, self.d_val
            ));
        }
        if self.codebook_size < 2 {
            return fail(format!("codebook_size must be >= 2 (got {})", self.codebook_size));
        }
        if self.n_init == 0 {
            return fail("n_init must be positive".into());
        }
        if self.n_clients == 0 {
            return fail("n_clients must be positive".into());
        }
        if self.mu <= 0.0 || !self.mu.is_finite() {
            return fail(format!("mu must be positive and finite (got {})", self.mu));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return fail(format!("tau must be positive and finite (got {})", self.tau));
        }
        if self.theta < 0.0 || !self.theta.is_finite() {
            return fail(format!("theta must be nonnegative (got {})", self.theta));
        }
        if self.paraphrase_sigma < 0.0 {
            return fail(format!(
                "paraphrase_sigma must be nonnegative (got {})",
                self.paraphrase_sigma
            ));
        }
        if self.augmentation_factor == 0 {
            return fail("augmentation_factor must be >= 1".into());
        }
        if self.stack_depth == 0 {
            return fail("stack_depth must be >= 1".into());
        }
        if self.edit_range[0] >= self.edit_range[1] || self.edit_range[1] > self.stack_depth {
            return fail(format!(
                "edit_range {:?} is invalid for stack_depth {}",
                self.edit_range, self.stack_depth
            ));
        }
        if self.stack_depth > 1 && self.d_key != self.d_val {
            return fail(format!(
                "stacks deeper than one layer need d_key == d_val (got {} and {})",
                self.d_key, self.d_val
            ));
        }
        if let PriorMode::Identity { kappa } = self.prior_mode {
            if kappa <= 0.0 || !kappa.is_finite() {
                return fail(format!("identity prior kappa must be positive (got {kappa})"));
            }
        }
        self.strategy.validate()?;
        if self.n_paraphrases == 0 {
            return fail("n_paraphrases must be >= 1".into());
        }
        Ok(())
    }

    pub fn feature_map(&self) -> FeatureMapConfig {
        FeatureMapConfig {
            d_key: self.d_key,
            d_val: self.d_val,
            universe_seed: self.seed,
            paraphrase_sigma: self.paraphrase_sigma,
            codebook_size: self.codebook_size,
        }
    }

    pub fn universe(&self) -> Universe {
        Universe::new(self.feature_map())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            tau: self.tau,
            n_paraphrases: self.n_paraphrases,
            neighbors_per_edit: self.neighbors_per_edit,
        }
    }

    pub fn identity_kappa(&self) -> f64 {
        match self.prior_mode {
            PriorMode::Identity { kappa } => kappa,
            PriorMode::Covariance => KAPPA_DEFAULT,
        }
    }

    /// Build the layer (or stack) this configuration describes.
    pub fn build_stack(&self, universe: &Universe) -> Result<(LayerStack, BaseKnowledge)> {
        if self.stack_depth == 1 {
            let (layer, base) = init_layer_with_mu(universe, self.n_init, self.seed, self.mu)?;
            return Ok((LayerStack::single(layer), base));
        }
        init_square_stack(
            universe,
            self.stack_depth,
            self.edit_range[0]..self.edit_range[1],
            self.n_init,
            self.seed,
            self.mu,
        )
    }

    pub fn build_server(&self) -> Result<(Universe, ServerState, BaseKnowledge)> {
        self.validate()?;
        let universe = self.universe();
        let (stack, base) = self.build_stack(&universe)?;
        let state = ServerState::new(
            universe.clone(),
            stack,
            &self.prior_mode,
            self.beta0,
            self.beta1,
            self.dynamic_c,
        );
        Ok((universe, state, base))
    }
}

/// Square residual-stream stack for multi-layer experiments: small random
/// weights per layer, base facts sampled once, and each layer's covariance
/// statistic built from the base keys it actually sees after propagation
/// through the earlier layers.
pub fn init_square_stack(
    universe: &Universe,
    depth: usize,
    edit_range: std::ops::Range<usize>,
    n_init: usize,
    seed: u64,
    mu: f64,
) -> Result<(LayerStack, BaseKnowledge)> {
    assert!(depth >= 2, "use init_layer for single layers");
    let d = universe.cfg.d_key;
    assert_eq!(d, universe.cfg.d_val, "square stacks need d_key == d_val");

    let facts = crate::knowledge::sample_facts(universe, n_init, seed, &Default::default())?;
    let key_cols: Vec<Vec<f64>> = facts.iter().map(|f| universe.key_of_fact(f)).collect();
    let val_cols: Vec<Vec<f64>> = facts
        .iter()
        .map(|f| universe.value_of(f.object))
        .collect::<Result<_>>()?;
    let keys = Matrix::from_columns(&key_cols);
    let values = Matrix::from_columns(&val_cols);

    let mut layers = Vec::with_capacity(depth);
    let mut hidden = keys.clone();
    for l in 0..depth {
        let scale = 0.5 / (d as f64).sqrt();
        let weights = linalg::random_gaussian(d, d, seed, &[0x7374_6b, l as u64]).scale(scale);
        let mut c0 = linalg::gram(&hidden).scale(mu / n_init as f64);
        for i in 0..d {
            c0.set(i, i, c0.get(i, i) + crate::knowledge::C0_RIDGE);
        }
        let next = hidden.add(&linalg::matmul(&weights, &hidden)?)?;
        layers.push(SyntheticLayer {
            weights,
            c0,
            mu,
            base_facts: facts.clone(),
        });
        hidden = next;
    }
    Ok((
        LayerStack::new(layers, edit_range),
        BaseKnowledge {
            facts,
            keys,
            values,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip_preserves_everything() {
        let cfg = RunConfig {
            strategy: MergeStrategy::TiesMerging {
                keep_frac: 0.3,
                lambda: 0.9,
            },
            prior_mode: PriorMode::Identity { kappa: 500.0 },
            dynamic_c: true,
            ..RunConfig::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9, "d_key": 16}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.d_key, 16);
        assert_eq!(cfg.d_val, 48);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            RunConfig {
                d_key: 1,
                ..RunConfig::default()
            },
            RunConfig {
                tau: 0.0,
                ..RunConfig::default()
            },
            RunConfig {
                mu: -1.0,
                ..RunConfig::default()
            },
            RunConfig {
                edit_range: [1, 1],
                ..RunConfig::default()
            },
            RunConfig {
                stack_depth: 3,
                edit_range: [0, 2],
                ..RunConfig::default()
            },
            RunConfig {
                strategy: MergeStrategy::TiesMerging {
                    keep_frac: 2.0,
                    lambda: 1.0,
                },
                ..RunConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "config accepted: {cfg:?}");
        }
    }

    #[test]
    fn square_stack_builds_and_propagates() {
        let cfg = RunConfig {
            d_key: 12,
            d_val: 12,
            stack_depth: 3,
            edit_range: [1, 3],
            n_init: 24,
            codebook_size: 16,
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        let universe = cfg.universe();
        let (stack, base) = cfg.build_stack(&universe).unwrap();
        assert_eq!(stack.depth(), 3);
        assert_eq!(stack.edit_range, 1..3);
        assert_eq!(base.keys.cols(), 24);
        // per-layer statistics differ because the propagated keys differ
        assert_ne!(stack.layers[0].c0, stack.layers[1].c0);
    }

    #[test]
    fn server_builder_wires_the_prior_mode() {
        let cfg = RunConfig {
            d_key: 8,
            d_val: 8,
            n_init: 16,
            codebook_size: 16,
            prior_mode: PriorMode::Identity { kappa: 250.0 },
            ..RunConfig::default()
        };
        let (_, state, _) = cfg.build_server().unwrap();
        assert_eq!(state.c_dyn.len(), 1);
        assert_eq!(state.c_dyn[0].1.get(0, 0), 250.0);
        assert_eq!(state.c_dyn[0].1.get(0, 1), 0.0);
    }
}
