//! The sample → score → advantage → update loop.

use ndarray::Array2;
use rlhf_kernel::advantage::{gae, grpo_advantage, grpo_eps, rloo_advantage, value_loss};
use rlhf_kernel::environments::{verifiable_reward, VerifiableTask};
use rlhf_kernel::policy::{BigramPolicy, Context, Frozen};
use rlhf_kernel::policy_gradient::{
    aggregate_loss, backprop_to_policy, batch_logprobs, broadcast_advantages, cispo_loss, grpo_loss, gspo_loss,
    ppo_loss, reinforce_loss, KlPlacement, SurrogateOutput, TrajectoryBatch,
};
use rlhf_kernel::reward_models::LinearRewardModel;
use rlhf_kernel::sft::{nll_loss, LossMask};
use rlhf_kernel::{Seed, Token, TokenSequence};
use serde::{Deserialize, Serialize};

use crate::config::{read_jsonl, Algorithm, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsTable;

/// One line of a pretraining corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub tokens: Vec<Token>,
}

/// Where sequence rewards come from.
#[derive(Debug, Clone)]
pub enum RewardFn {
    Model(LinearRewardModel<f64>),
    /// One task per prompt, in prompt order.
    Verifiable(Vec<VerifiableTask>),
}

impl RewardFn {
    fn raw(&self, prompt_index: usize, seq: &TokenSequence) -> Result<f64> {
        match self {
            RewardFn::Model(rm) => Ok(rm.score(&seq.prompt, &seq.completion)?),
            RewardFn::Verifiable(tasks) => Ok(verifiable_reward(&tasks[prompt_index], &seq.completion)),
        }
    }
}

/// The reward model sees only EOS-terminated completions; anything else
/// gets the truncation penalty.
pub fn gated_reward(
    seq: &TokenSequence,
    eos: Token,
    truncation_penalty: f64,
    score: impl FnOnce(&TokenSequence) -> Result<f64>,
) -> Result<f64> {
    if seq.is_terminated(eos) {
        score(seq)
    } else {
        Ok(truncation_penalty)
    }
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub metrics: MetricsTable,
    pub policy: BigramPolicy<f64>,
    pub reference: Frozen<f64>,
}

pub const RL_COLUMNS: [&str; 7] = [
    "objective",
    "loss",
    "mean_reward",
    "kl_to_ref",
    "clip_fraction",
    "approx_kl",
    "value_loss",
];

fn prompts_and_reward(config: &ExperimentConfig, alg: Algorithm) -> Result<(Vec<Vec<Token>>, RewardFn)> {
    if alg == Algorithm::Rlvr {
        if config.verifiable.is_empty() {
            return Err(HarnessError::validation("verifiable", "rlvr needs at least one task"));
        }
        let prompts = config.verifiable.iter().map(|t| t.prompt.clone()).collect();
        Ok((prompts, RewardFn::Verifiable(config.verifiable.clone())))
    } else {
        if config.prompts.is_empty() {
            return Err(HarnessError::validation("prompts", "need at least one prompt"));
        }
        Ok((config.prompts.clone(), RewardFn::Model(config.reward_model()?)))
    }
}

pub fn load_corpus(config: &ExperimentConfig) -> Result<Option<Vec<Vec<Token>>>> {
    let Some(path) = &config.pretrain_corpus else {
        return Ok(None);
    };
    let docs: Vec<CorpusRecord> = read_jsonl(path)?;
    let vocab = config.vocab()?;
    if docs.is_empty() {
        return Err(HarnessError::validation("pretrain_corpus", "corpus is empty"));
    }
    for (i, d) in docs.iter().enumerate() {
        if d.tokens.is_empty() || d.tokens.iter().any(|&t| !vocab.contains(t)) {
            return Err(HarnessError::validation(
                "pretrain_corpus",
                format!("line {}: empty or out-of-vocabulary", i + 1),
            ));
        }
    }
    Ok(Some(docs.into_iter().map(|d| d.tokens).collect()))
}

/// Mean per-token NLL over the corpus and its gradient.
pub fn corpus_nll(policy: &BigramPolicy<f64>, corpus: &[Vec<Token>]) -> Result<(f64, Vec<f64>)> {
    let inv = 1.0 / corpus.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.num_params()];
    for doc in corpus {
        let (l, g) = nll_loss(policy, doc, &LossMask(vec![true; doc.len()]))?;
        loss += inv * l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += inv * b;
        }
    }
    Ok((loss, grad))
}

/// Tabular critic: one value per policy context row.
fn context_values(table: &[f64], seqs: &[TokenSequence], mask: &Array2<bool>) -> Array2<f64> {
    let mut v = Array2::zeros(mask.dim());
    for (i, s) in seqs.iter().enumerate() {
        let mut ctx = Context::of_prefix(&s.prompt);
        for (t, &tok) in s.completion.iter().enumerate() {
            v[(i, t)] = table[ctx.row()];
            ctx = Context::After(tok);
        }
    }
    v
}

fn scatter_value_grad(grad: &Array2<f64>, seqs: &[TokenSequence], rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for (i, s) in seqs.iter().enumerate() {
        let mut ctx = Context::of_prefix(&s.prompt);
        for (t, &tok) in s.completion.iter().enumerate() {
            out[ctx.row()] += grad[(i, t)];
            ctx = Context::After(tok);
        }
    }
    out
}

/// Runs the configured policy-gradient algorithm. With `pretrain_corpus`
/// set, the corpus NLL is logged every step and, when `gamma_mix > 0`,
/// mixed into the loss.
pub fn run_rlhf(config: &ExperimentConfig) -> Result<RlOutcome> {
    config.validate()?;
    let alg = config.algorithm()?;
    if !alg.is_rl() {
        return Err(HarnessError::validation(
            "algorithm",
            "train-rl needs ppo, grpo, rloo, gspo, cispo or rlvr",
        ));
    }
    let (prompts, reward) = prompts_and_reward(config, alg)?;
    let corpus = load_corpus(config)?;
    let vocab = config.vocab()?;
    let eos = vocab.eos();
    let mut policy = config.initial_policy()?;
    let reference = policy.snapshot();
    let root = Seed::new(config.seed);
    let g = config.group_size;
    let beta = config.beta;
    let lr = config.learning_rate();
    let clip = config.clip();
    clip.validate()?;
    let agg = config.aggregation;
    let placement = config.kl_placement();
    let est = config.kl_estimator();
    let reward_beta = if placement == KlPlacement::RewardLevel {
        beta
    } else {
        0.0
    };
    let loss_beta = if placement == KlPlacement::LossLevel { beta } else { 0.0 };
    let mut critic = vec![0.0; vocab.size() + 1];

    let mut columns: Vec<&str> = RL_COLUMNS.to_vec();
    if corpus.is_some() {
        columns.push("corpus_nll");
    }
    let mut table = MetricsTable::with_step(&columns);
    let mut step_index = 0usize;

    for s in 0..config.steps {
        let rollout = root.derive("rollout").derive(&s.to_string());
        let mut seqs = Vec::with_capacity(prompts.len() * g);
        let mut rewards = Vec::with_capacity(prompts.len() * g);
        for (i, p) in prompts.iter().enumerate() {
            for j in 0..g {
                let seq = policy.sample_completion(
                    p,
                    config.temperature,
                    config.max_len,
                    rollout.index((i * g + j) as u64),
                )?;
                rewards.push(gated_reward(&seq, eos, config.truncation_penalty, |q| {
                    reward.raw(i, q)
                })?);
                seqs.push(seq);
            }
        }
        let (old, mask) = batch_logprobs(&policy, &seqs)?;
        let (ref_lp, _) = batch_logprobs(&reference, &seqs)?;
        let n = seqs.len() as f64;
        let mut kl_to_ref = 0.0;
        let mut shaped = rewards.clone();
        let mut token_kl = Array2::zeros(mask.dim());
        for (i, row) in mask.rows().into_iter().enumerate() {
            let mut seq_k1 = 0.0;
            let mut seq_pen = 0.0;
            for (t, &m) in row.iter().enumerate() {
                if m {
                    let lr_t = old[(i, t)] - ref_lp[(i, t)];
                    seq_k1 += lr_t;
                    token_kl[(i, t)] = est.pointwise(lr_t);
                    seq_pen += token_kl[(i, t)];
                }
            }
            kl_to_ref += seq_k1 / n;
            shaped[i] -= reward_beta * seq_pen;
        }
        let mean_reward = rewards.iter().sum::<f64>() / n;
        let objective = mean_reward - beta * kl_to_ref;

        let mut value_loss_logged = 0.0;
        let advantages = match alg {
            Algorithm::Ppo => {
                let mut r = Array2::zeros(mask.dim());
                let mut done = Array2::from_elem(mask.dim(), false);
                for (i, seq) in seqs.iter().enumerate() {
                    let last = seq.completion.len() - 1;
                    r[(i, last)] = rewards[i];
                    done[(i, last)] = true;
                    for t in 0..=last {
                        r[(i, t)] -= reward_beta * token_kl[(i, t)];
                    }
                }
                let values = context_values(&critic, &seqs, &mask);
                let out = gae(&r, &values, &done, config.gamma, config.lam)?;
                let vl = value_loss(&values, &values, &out.targets, &mask, config.value_clip)?;
                value_loss_logged = vl.loss;
                let vg = scatter_value_grad(&vl.grad, &seqs, critic.len());
                for (c, d) in critic.iter_mut().zip(vg) {
                    *c -= config.value_learning_rate * d;
                }
                let mut adv = out.advantages;
                rlhf_kernel::advantage::apply_mask(&mut adv, &mask);
                adv
            }
            Algorithm::Rloo => {
                let mut per_seq = Vec::with_capacity(seqs.len());
                for group in shaped.chunks(g) {
                    if g < 2 {
                        return Err(HarnessError::validation(
                            "group_size",
                            "rloo needs at least 2 samples per prompt",
                        ));
                    }
                    per_seq.extend(rloo_advantage(group)?);
                }
                broadcast_advantages(&per_seq, &mask)?
            }
            _ => {
                let mut per_seq = Vec::with_capacity(seqs.len());
                for group in shaped.chunks(g) {
                    per_seq.extend(grpo_advantage(group, config.group_norm, grpo_eps())?);
                }
                broadcast_advantages(&per_seq, &mask)?
            }
        };

        for _ in 0..config.update_epochs {
            let (new, _) = batch_logprobs(&policy, &seqs)?;
            let batch = TrajectoryBatch {
                new_logprobs: new,
                old_logprobs: old.clone(),
                ref_logprobs: ref_lp.clone(),
                advantages: advantages.clone(),
                completion_mask: mask.clone(),
                group_size: g,
                kl_estimator: est,
            };
            let SurrogateOutput {
                mut loss,
                mut grad,
                diagnostics,
            } = match alg {
                Algorithm::Grpo | Algorithm::Rlvr => grpo_loss(&batch, &clip, loss_beta, agg)?,
                Algorithm::Ppo => ppo_loss(&batch, &clip, agg)?,
                Algorithm::Gspo => gspo_loss(&batch, &clip, agg)?,
                Algorithm::Cispo => cispo_loss(&batch, &clip)?,
                _ => reinforce_loss(&batch, agg)?,
            };
            if loss_beta > 0.0 && !matches!(alg, Algorithm::Grpo | Algorithm::Rlvr) {
                let (kl_loss, w) = aggregate_loss(&batch.per_token_kl(), &mask, agg)?;
                loss += loss_beta * kl_loss;
                let lr_tok = &batch.new_logprobs - &batch.ref_logprobs;
                grad = grad + (&w * &lr_tok.mapv(|x| est.d_log_p(x))).mapv(|x| loss_beta * x);
            }
            let mut theta_grad = backprop_to_policy(&policy, &seqs, &grad);
            let mut extra = Vec::new();
            if let Some(docs) = &corpus {
                let (nll, g_nll) = corpus_nll(&policy, docs)?;
                if config.gamma_mix > 0.0 {
                    loss += config.gamma_mix * nll;
                    for (a, b) in theta_grad.iter_mut().zip(g_nll) {
                        *a += config.gamma_mix * b;
                    }
                }
                extra.push(nll);
            }
            policy.descend(&theta_grad, lr);
            let mut row = vec![
                step_index as f64,
                objective,
                loss,
                mean_reward,
                kl_to_ref,
                diagnostics.clip_fraction,
                diagnostics.approx_kl,
                value_loss_logged,
            ];
            row.extend(extra);
            table.push(row);
            step_index += 1;
        }
    }
    Ok(RlOutcome {
        metrics: table,
        policy,
        reference,
    })
}

/// Same loop, but the corpus is required.
pub fn run_pretrain_mix(config: &ExperimentConfig) -> Result<RlOutcome> {
    if config.pretrain_corpus.is_none() {
        return Err(HarnessError::validation(
            "pretrain_corpus",
            "required for pretraining-gradient mixing",
        ));
    }
    run_rlhf(config)
}
