//! One rejection-sampling round: generate, score, select, fine-tune.

use rlhf_kernel::policy::BigramPolicy;
use rlhf_kernel::selection::{
    finetune_on_selected, generate_matrix, select_top_k_overall, select_top_per_prompt, SelectedRecord,
};
use rlhf_kernel::{Seed, TokenSequence};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsTable;
use crate::runners::rl::gated_reward;

#[derive(Debug, Clone)]
pub struct RejectOutcome {
    pub metrics: MetricsTable,
    pub policy: BigramPolicy<f64>,
    pub selected: Vec<SelectedRecord>,
}

/// Per-prompt argmax by default; the `top_k` best cells overall when set.
pub fn run_rejection_sampling(config: &ExperimentConfig) -> Result<RejectOutcome> {
    config.validate()?;
    if config.prompts.is_empty() {
        return Err(HarnessError::validation("prompts", "need at least one prompt"));
    }
    let rm = config.reward_model()?;
    let policy = config.initial_policy()?;
    let eos = policy.vocab().eos();
    let matrix = generate_matrix(
        &policy,
        &config.prompts,
        config.n_samples,
        config.temperature,
        config.max_len,
        Seed::new(config.seed).derive("rejection"),
    )?;
    let mut rewards = ndarray::Array2::zeros((matrix.rows(), matrix.cols()));
    for i in 0..matrix.rows() {
        for j in 0..matrix.cols() {
            let seq = matrix.get(i, j);
            rewards[(i, j)] = gated_reward(seq, eos, config.truncation_penalty, |q| {
                Ok(rm.score(&q.prompt, &q.completion)?)
            })?;
        }
    }
    let cells: Vec<(usize, usize)> = match config.top_k {
        Some(k) => select_top_k_overall(&rewards, k)?,
        None => select_top_per_prompt(&rewards)?.into_iter().enumerate().collect(),
    };
    let mut seen = std::collections::HashSet::new();
    let mut selected = Vec::with_capacity(cells.len());
    let mut seqs: Vec<TokenSequence> = Vec::with_capacity(cells.len());
    for &(i, j) in &cells {
        let seq = matrix.get(i, j);
        if config.dedup && !seen.insert(seq.clone()) {
            continue;
        }
        selected.push(SelectedRecord::new(seq, i, j, rewards[(i, j)]));
        seqs.push(seq.clone());
    }
    if seqs.is_empty() {
        return Err(HarnessError::validation("top_k", "selection is empty"));
    }
    let (policy, trace) = finetune_on_selected(&policy, &seqs, config.epochs, config.learning_rate())?;
    let mut metrics = MetricsTable::with_step(&["loss"]);
    for (i, l) in trace.into_iter().enumerate() {
        metrics.push(vec![i as f64, l]);
    }
    Ok(RejectOutcome {
        metrics,
        policy,
        selected,
    })
}
