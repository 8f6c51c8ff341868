//! Train/test reward-model over-optimization with exact expectations.
//!
//! Two reward models are fit on disjoint halves of a preference set; the
//! policy climbs the first by exact enumerated gradient while both are
//! scored under the current completion distribution.

use rlhf_kernel::data::PreferenceRecord;
use rlhf_kernel::environments::PreferenceOracle;
use rlhf_kernel::policy::BigramPolicy;
use rlhf_kernel::reward_models::{train_bt, FeatureSpec, HeadKind, LinearRewardModel};
use rlhf_kernel::{Seed, Token, TokenSequence};

use crate::config::{read_jsonl, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsTable;
use crate::runners::rl::gated_reward;

#[derive(Debug, Clone)]
pub struct OveroptOutcome {
    /// step, train_rm, test_rm, kl
    pub metrics: MetricsTable,
    /// kl, train_rm, test_rm
    pub kl_curve: MetricsTable,
    pub policy: BigramPolicy<f64>,
    pub train_rm: LinearRewardModel<f64>,
    pub test_rm: LinearRewardModel<f64>,
}

/// Token counts plus a penalty on adjacent repeats. The first non-EOS token
/// is worth 2, the second 1 and the rest 0.5, so a counts-only proxy prefers
/// repeating the first token while the latent reward punishes it.
pub fn default_latent(vocab_size: usize, eos: Token) -> LinearRewardModel<f64> {
    let spec = FeatureSpec {
        repeat_count: true,
        ..FeatureSpec::counts(vocab_size)
    };
    let mut rank = 0;
    let mut weights: Vec<f64> = (0..vocab_size)
        .map(|t| {
            if t as Token == eos {
                return 0.0;
            }
            rank += 1;
            match rank {
                1 => 2.0,
                2 => 1.0,
                _ => 0.5,
            }
        })
        .collect();
    weights.push(-3.0);
    LinearRewardModel::new(HeadKind::Sequence, spec, weights).expect("latent dimensions")
}

/// Pairs of distinct reference samples labeled by the latent model.
pub fn synthetic_preferences(
    reference: &BigramPolicy<f64>,
    oracle: &PreferenceOracle<f64>,
    prompts: &[Vec<Token>],
    pairs: usize,
    max_len: usize,
    seed: Seed,
) -> Result<Vec<PreferenceRecord>> {
    let draws = seed.derive("pairs");
    let labels = seed.derive("labels");
    let mut out = Vec::with_capacity(pairs);
    let mut k = 0u64;
    let mut attempts = 0usize;
    while out.len() < pairs {
        attempts += 1;
        if attempts > 50 * pairs + 1000 {
            return Err(HarnessError::validation(
                "overopt.pairs",
                "could not draw enough distinct completion pairs",
            ));
        }
        let prompt = &prompts[out.len() % prompts.len()];
        let a = reference.sample_completion(prompt, 1.0, max_len, draws.index(2 * k))?;
        let b = reference.sample_completion(prompt, 1.0, max_len, draws.index(2 * k + 1))?;
        k += 1;
        if a.completion == b.completion {
            continue;
        }
        out.push(oracle.sample_preference(prompt, &a.completion, &b.completion, labels.index(k))?);
    }
    Ok(out)
}

struct Expectations {
    train: f64,
    test: f64,
    kl: f64,
    grad: Vec<f64>,
}

/// Exact expectations over every leaf and the gradient of
/// `E[r_train] − β KL(π‖π_ref)`.
fn expectations(
    policy: &BigramPolicy<f64>,
    reference: &BigramPolicy<f64>,
    prompts: &[Vec<Token>],
    train: &LinearRewardModel<f64>,
    test: &LinearRewardModel<f64>,
    config: &ExperimentConfig,
) -> Result<Expectations> {
    let eos = policy.vocab().eos();
    let inv = 1.0 / prompts.len() as f64;
    let mut e = Expectations {
        train: 0.0,
        test: 0.0,
        kl: 0.0,
        grad: vec![0.0; policy.num_params()],
    };
    for prompt in prompts {
        for (seq, _) in policy.enumerate_paths(prompt, config.max_len)? {
            let lp = policy.sequence_logprob(&seq)?.total;
            let p = lp.exp();
            let lr = lp - reference.sequence_logprob(&seq)?.total;
            let score = |rm: &LinearRewardModel<f64>, s: &TokenSequence| {
                gated_reward(s, eos, config.truncation_penalty, |q| {
                    Ok(rm.score(&q.prompt, &q.completion)?)
                })
            };
            let r_train = score(train, &seq)?;
            let r_test = score(test, &seq)?;
            e.train += inv * p * r_train;
            e.test += inv * p * r_test;
            e.kl += inv * p * lr;
            let w = -inv * p * (r_train - config.beta * lr);
            let ones = vec![w; seq.completion.len()];
            policy.accumulate_sequence_grad(&seq, &ones, &mut e.grad);
        }
    }
    Ok(e)
}

pub fn run_overoptimization(config: &ExperimentConfig) -> Result<OveroptOutcome> {
    config.validate()?;
    let o = &config.overopt;
    let vocab = config.vocab()?;
    if config.prompts.is_empty() {
        return Err(HarnessError::validation("prompts", "need at least one prompt"));
    }
    let mut policy = config.initial_policy()?;
    let reference = policy.clone();
    let root = Seed::new(config.seed);
    let latent = o
        .latent
        .clone()
        .unwrap_or_else(|| default_latent(vocab.size(), vocab.eos()));
    latent.validate()?;
    if latent.feature_spec.vocab_size != vocab.size() {
        return Err(HarnessError::validation(
            "overopt.latent",
            "vocab_size differs from the config",
        ));
    }
    let records = match &config.preference_data {
        Some(path) => read_jsonl(path)?,
        None => synthetic_preferences(
            &reference,
            &PreferenceOracle::new(latent.clone()),
            &config.prompts,
            o.pairs,
            config.max_len,
            root.derive("preferences"),
        )?,
    };
    for r in &records {
        r.validate(&vocab)?;
    }
    if records.len() < 2 * o.min_split {
        return Err(HarnessError::validation(
            "preference_data",
            format!("{} records, need at least {}", records.len(), 2 * o.min_split),
        ));
    }
    let half = records.len() / 2;
    let (first, second) = records.split_at(half);
    let test_data = if o.identical_halves { first } else { &second[..half] };

    let train_spec = o.train_features.unwrap_or(FeatureSpec::counts(vocab.size()));
    // The control run shares data and model class, so both curves coincide.
    let test_spec = match (o.test_features, o.identical_halves) {
        (Some(spec), _) => spec,
        (None, true) => train_spec,
        (None, false) => latent.feature_spec,
    };
    let mut train_rm = LinearRewardModel::zeros(HeadKind::Sequence, train_spec);
    let mut test_rm = LinearRewardModel::zeros(HeadKind::Sequence, test_spec);
    train_bt(&mut train_rm, first, o.rm_learning_rate, o.rm_epochs, config.batch_size)?;
    train_bt(
        &mut test_rm,
        test_data,
        o.rm_learning_rate,
        o.rm_epochs,
        config.batch_size,
    )?;

    let mut metrics = MetricsTable::with_step(&["train_rm", "test_rm", "kl"]);
    let mut kl_curve = MetricsTable::plain(&["kl", "train_rm", "test_rm"]);
    let lr = config.learning_rate();
    for s in 0..config.steps {
        let e = expectations(&policy, &reference, &config.prompts, &train_rm, &test_rm, config)?;
        metrics.push(vec![s as f64, e.train, e.test, e.kl]);
        kl_curve.push(vec![e.kl, e.train, e.test]);
        policy.descend(&e.grad, lr);
    }
    Ok(OveroptOutcome {
        metrics,
        kl_curve,
        policy,
        train_rm,
        test_rm,
    })
}
