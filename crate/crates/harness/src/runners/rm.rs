//! Bradley-Terry reward-model training.

use rlhf_kernel::data::PreferenceRecord;
use rlhf_kernel::reward_models::{pairwise_accuracy, train_bt, FeatureSpec, HeadKind, LinearRewardModel};

use crate::config::{read_jsonl, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsTable;

#[derive(Debug, Clone)]
pub struct RmOutcome {
    pub metrics: MetricsTable,
    pub model: LinearRewardModel<f64>,
    pub train_accuracy: f64,
}

pub fn load_preferences(config: &ExperimentConfig, command: &str) -> Result<Vec<PreferenceRecord>> {
    let path = config
        .preference_data
        .as_ref()
        .ok_or_else(|| HarnessError::validation("preference_data", format!("required for {command}")))?;
    let records: Vec<PreferenceRecord> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(HarnessError::validation("preference_data", "dataset is empty"));
    }
    let vocab = config.vocab()?;
    for (i, r) in records.iter().enumerate() {
        r.validate(&vocab)
            .map_err(|e| HarnessError::validation("preference_data", format!("line {}: {e}", i + 1)))?;
    }
    Ok(records)
}

pub fn run_rm(config: &ExperimentConfig) -> Result<RmOutcome> {
    config.validate()?;
    let records = load_preferences(config, "train-rm")?;
    let spec = config.feature_spec.unwrap_or(FeatureSpec::counts(config.vocab_size));
    let mut model = LinearRewardModel::zeros(HeadKind::Sequence, spec);
    let losses = train_bt(
        &mut model,
        &records,
        config.learning_rate(),
        config.epochs,
        config.batch_size,
    )?;
    let mut metrics = MetricsTable::with_step(&["loss"]);
    for (i, l) in losses.into_iter().enumerate() {
        metrics.push(vec![i as f64, l]);
    }
    let train_accuracy = pairwise_accuracy(&model, &records)?;
    Ok(RmOutcome {
        metrics,
        model,
        train_accuracy,
    })
}
