//! Direct alignment runs.

use rlhf_kernel::dpo::{train_dpo, DpoBatch, DpoVariant};
use rlhf_kernel::policy::BigramPolicy;

use crate::config::{Algorithm, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsTable;
use crate::runners::rm::load_preferences;

#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub metrics: MetricsTable,
    pub policy: BigramPolicy<f64>,
}

pub const DPO_COLUMNS: [&str; 5] = [
    "dpo_loss",
    "margin",
    "logp_chosen",
    "logp_rejected",
    "implicit_reward_accuracy",
];

pub fn variant(config: &ExperimentConfig) -> Result<DpoVariant<f64>> {
    Ok(match config.algorithm.unwrap_or(Algorithm::Dpo) {
        Algorithm::Dpo => DpoVariant::Dpo,
        Algorithm::Ipo => DpoVariant::Ipo { tau: config.tau },
        Algorithm::Cdpo => DpoVariant::Cdpo {
            label_noise_eps: config.label_noise_eps,
        },
        Algorithm::DpoNll => DpoVariant::DpoNll {
            alpha: config.nll_alpha,
        },
        _ => {
            return Err(HarnessError::validation(
                "algorithm",
                "train-dpo needs dpo, ipo, cdpo or dpo_nll",
            ))
        }
    })
}

/// Full-batch descent against the initial policy as reference.
pub fn run_dpo(config: &ExperimentConfig) -> Result<DpoOutcome> {
    config.validate()?;
    let variant = variant(config)?;
    let records = load_preferences(config, "train-dpo")?;
    if config.beta <= 0.0 {
        return Err(HarnessError::validation(
            "beta",
            "must be positive for direct alignment",
        ));
    }
    let batch = DpoBatch::new(records, config.beta)?;
    let mut policy = config.initial_policy()?;
    let reference = policy.clone();
    let trace = train_dpo(
        &mut policy,
        &reference,
        &batch,
        variant,
        config.learning_rate(),
        config.steps,
    )?;
    let mut metrics = MetricsTable::with_step(&DPO_COLUMNS);
    for (i, (loss, s)) in trace.into_iter().enumerate() {
        metrics.push(vec![
            i as f64,
            loss,
            s.margin,
            s.logp_chosen,
            s.logp_rejected,
            s.implicit_reward_accuracy,
        ]);
    }
    Ok(DpoOutcome { metrics, policy })
}
