//! Supervised fine-tuning on chat records.

use rlhf_kernel::policy::BigramPolicy;
use rlhf_kernel::sft::{nll_loss, LossMask, SftRecord};
use rlhf_kernel::Token;

use crate::config::{read_jsonl, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsTable;

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub metrics: MetricsTable,
    pub policy: BigramPolicy<f64>,
}

/// Flattened examples with their loss masks.
pub fn sft_examples(records: &[SftRecord]) -> Result<Vec<(Vec<Token>, LossMask)>> {
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let (tokens, mask) = r
            .conversation()
            .build_mask(r.strategy)
            .map_err(|e| HarnessError::validation("sft_data", format!("line {}: {e}", i + 1)))?;
        if mask.count() == 0 {
            return Err(HarnessError::validation(
                "sft_data",
                format!("line {}: no assistant tokens", i + 1),
            ));
        }
        out.push((tokens, mask));
    }
    Ok(out)
}

/// Minibatch gradient descent on the masked NLL, one row per step.
pub fn run_sft(config: &ExperimentConfig) -> Result<SftOutcome> {
    config.validate()?;
    let path = config
        .sft_data
        .as_ref()
        .ok_or_else(|| HarnessError::validation("sft_data", "required for train-sft"))?;
    let records: Vec<SftRecord> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(HarnessError::validation("sft_data", "dataset is empty"));
    }
    let examples = sft_examples(&records)?;
    let vocab = config.vocab()?;
    for (i, (tokens, _)) in examples.iter().enumerate() {
        if let Some(t) = tokens.iter().find(|&&t| !vocab.contains(t)) {
            return Err(HarnessError::validation(
                "sft_data",
                format!("line {}: token {t} outside the vocabulary", i + 1),
            ));
        }
    }
    let mut policy = config.initial_policy()?;
    let lr = config.learning_rate();
    let mut metrics = MetricsTable::with_step(&["loss"]);
    let mut step = 0usize;
    for _ in 0..config.epochs {
        for chunk in examples.chunks(config.batch_size) {
            let inv = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            let mut grad = vec![0.0; policy.num_params()];
            for (tokens, mask) in chunk {
                let (l, g) = nll_loss(&policy, tokens, mask)?;
                loss += inv * l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += inv * b;
                }
            }
            policy.descend(&grad, lr);
            metrics.push(vec![step as f64, loss]);
            step += 1;
        }
    }
    Ok(SftOutcome { metrics, policy })
}
