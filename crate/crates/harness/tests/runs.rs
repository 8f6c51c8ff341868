use std::cell::Cell;
use std::fs;

use rlhf_harness::config::{Algorithm, RewardSource};
use rlhf_harness::runners::overopt::run_overoptimization;
use rlhf_harness::runners::rl::{corpus_nll, gated_reward, run_pretrain_mix, run_rlhf};
use rlhf_harness::ExperimentConfig;
use rlhf_kernel::dpo::ExplicitDistribution;
use rlhf_kernel::numerics::{finite_diff_grad, max_relative_error};
use rlhf_kernel::policy::total_variation;
use rlhf_kernel::policy_gradient::KlPlacement;
use rlhf_kernel::reward_models::{FeatureSpec, HeadKind, LinearRewardModel};
use rlhf_kernel::{TokenSequence, Vocab};
use tempfile::TempDir;

fn rm(weights: &[f64]) -> RewardSource {
    RewardSource::Inline(
        LinearRewardModel::new(HeadKind::Sequence, FeatureSpec::counts(weights.len()), weights.to_vec()).unwrap(),
    )
}

fn config(alg: Algorithm) -> ExperimentConfig {
    ExperimentConfig {
        algorithm: Some(alg),
        reward_model: Some(rm(&[0.0, 1.0, -0.5, 0.3, 0.2, -1.0])),
        steps: 20,
        seed: 17,
        ..ExperimentConfig::default()
    }
}

/// Exact expected reward of a policy over every prompt's leaves, gated.
fn expected_reward(c: &ExperimentConfig, policy: &rlhf_kernel::policy::BigramPolicy<f64>) -> f64 {
    let rm = c.reward_model().unwrap();
    let mut total = 0.0;
    for p in &c.prompts {
        for (seq, prob) in policy.enumerate_paths(p, c.max_len).unwrap() {
            let r = gated_reward(&seq, 0, c.truncation_penalty, |q| {
                Ok(rm.score(&q.prompt, &q.completion)?)
            })
            .unwrap();
            total += prob * r;
        }
    }
    total / c.prompts.len() as f64
}

#[test]
fn large_beta_stays_near_reference() {
    for (alg, placement) in [
        (Algorithm::Grpo, KlPlacement::LossLevel),
        (Algorithm::Ppo, KlPlacement::RewardLevel),
    ] {
        let c = ExperimentConfig {
            beta: 1000.0,
            learning_rate: Some(1e-4),
            kl_placement: Some(placement),
            steps: 30,
            ..config(alg)
        };
        let out = run_rlhf(&c).unwrap();
        let reference = c.initial_policy().unwrap();
        for p in &c.prompts {
            let a = ExplicitDistribution::of_policy(&out.policy, p, c.max_len).unwrap();
            let b = ExplicitDistribution::of_policy(&reference, p, c.max_len).unwrap();
            let tv = total_variation(&a.probs(), &b.probs());
            assert!(tv < 0.05, "{alg:?}: TV {tv}");
        }
    }
}

#[test]
fn zero_beta_improves_reward() {
    // Token 1 is the only rewarded token; everything else costs.
    let c = ExperimentConfig {
        beta: 0.0,
        learning_rate: Some(0.05),
        reward_model: Some(rm(&[0.0, 1.0, -1.0, -1.0, -1.0, -1.0])),
        ..config(Algorithm::Grpo)
    };
    // Exact expected reward after 0, 10, ..., 50 steps of the same run.
    let curve: Vec<f64> = (0..=5)
        .map(|k| {
            let ck = ExperimentConfig {
                steps: 10 * k,
                ..c.clone()
            };
            expected_reward(&ck, &run_rlhf(&ck).unwrap().policy)
        })
        .collect();
    assert!(curve.windows(2).all(|w| w[1] > w[0]), "{curve:?}");
}

#[test]
fn objective_recomputes_from_logged_columns() {
    for alg in [
        Algorithm::Ppo,
        Algorithm::Grpo,
        Algorithm::Rloo,
        Algorithm::Gspo,
        Algorithm::Cispo,
    ] {
        let c = ExperimentConfig {
            beta: 0.3,
            ..config(alg)
        };
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.csv");
        run_rlhf(&c).unwrap().metrics.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
        let (o, r, k) = (col("objective"), col("mean_reward"), col("kl_to_ref"));
        let mut steps = Vec::new();
        for l in lines {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            assert!((v[o] - (v[r] - c.beta * v[k])).abs() < 1e-10, "{alg:?}: {l}");
            steps.push(v[0]);
        }
        assert_eq!(steps, (0..c.steps).map(|s| s as f64).collect::<Vec<_>>());
    }
}

#[test]
fn truncated_completions_never_reach_the_reward_model() {
    let called = Cell::new(false);
    let seq = TokenSequence::new(vec![1], vec![2, 3]);
    let r = gated_reward(&seq, 0, -2.5, |_| {
        called.set(true);
        Ok(10.0)
    })
    .unwrap();
    assert_eq!(r, -2.5);
    assert!(!called.get());
    let done = TokenSequence::new(vec![1], vec![2, 0]);
    assert_eq!(gated_reward(&done, 0, -2.5, |_| Ok(10.0)).unwrap(), 10.0);

    // With max_len 1 every sample is either EOS alone or truncated; the RM
    // scores 0 for EOS, so each logged mean is a multiple of the penalty.
    let c = ExperimentConfig {
        max_len: 1,
        truncation_penalty: -0.75,
        steps: 10,
        ..config(Algorithm::Grpo)
    };
    let n = (c.prompts.len() * c.group_size) as f64;
    for r in run_rlhf(&c).unwrap().metrics.column("mean_reward").unwrap() {
        let count = r * n / -0.75;
        assert!((count - count.round()).abs() < 1e-9, "{r}");
    }
}

fn with_corpus(dir: &TempDir, gamma_mix: f64) -> ExperimentConfig {
    // Text the reward model dislikes, so mixing it in pulls against reward.
    let path = dir.path().join("corpus.jsonl");
    fs::write(
        &path,
        "{\"tokens\": [5, 5, 2, 0]}\n{\"tokens\": [2, 5, 0]}\n{\"tokens\": [5, 2, 5, 0]}\n",
    )
    .unwrap();
    ExperimentConfig {
        pretrain_corpus: Some(path),
        gamma_mix,
        ..config(Algorithm::Grpo)
    }
}

#[test]
fn zero_mix_reproduces_plain_run() {
    let dir = TempDir::new().unwrap();
    let mixed = run_pretrain_mix(&with_corpus(&dir, 0.0)).unwrap();
    let plain = run_rlhf(&config(Algorithm::Grpo)).unwrap();
    for name in plain.metrics.columns.clone() {
        assert_eq!(
            mixed.metrics.column(&name).unwrap(),
            plain.metrics.column(&name).unwrap(),
            "{name}"
        );
    }
    assert_eq!(mixed.policy, plain.policy);
    assert!(run_pretrain_mix(&config(Algorithm::Grpo)).is_err());
}

#[test]
fn mixed_gradient_is_sum_of_parts() {
    let dir = TempDir::new().unwrap();
    let gamma = 0.7;
    let lr = 0.1;
    let base = ExperimentConfig {
        steps: 1,
        learning_rate: Some(lr),
        ..with_corpus(&dir, 0.0)
    };
    let mixed = ExperimentConfig {
        gamma_mix: gamma,
        ..base.clone()
    };
    let p0 = base.initial_policy().unwrap();
    let corpus = rlhf_harness::runners::rl::load_corpus(&base).unwrap().unwrap();
    let (_, g_nll) = corpus_nll(&p0, &corpus).unwrap();
    let a = run_rlhf(&base).unwrap().policy;
    let b = run_rlhf(&mixed).unwrap().policy;
    for ((x, y), g) in a.params().iter().zip(b.params()).zip(&g_nll) {
        assert!((y - (x - lr * gamma * g)).abs() < 1e-12);
    }
    let fd = finite_diff_grad(
        |t: &[f64]| corpus_nll(&p0.with_params(t), &corpus).unwrap().0,
        p0.params(),
        1e-5,
    )
    .unwrap();
    assert!(max_relative_error(&g_nll, &fd, 1e-3) < 1e-6);
}

#[test]
fn heavy_mix_keeps_corpus_likelihood() {
    let dir = TempDir::new().unwrap();
    let heavy = ExperimentConfig {
        gamma_mix: 5.0,
        steps: 50,
        learning_rate: Some(0.05),
        ..with_corpus(&dir, 0.0)
    };
    let light = ExperimentConfig {
        gamma_mix: 0.0,
        ..heavy.clone()
    };
    let nll = run_pretrain_mix(&heavy).unwrap().metrics.column("corpus_nll").unwrap();
    assert!(nll.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{nll:?}");
    let start = expected_reward(&heavy, &heavy.initial_policy().unwrap());
    let h = expected_reward(&heavy, &run_pretrain_mix(&heavy).unwrap().policy) - start;
    let l = expected_reward(&light, &run_pretrain_mix(&light).unwrap().policy) - start;
    assert!(h < l, "reward gain {h} with mixing vs {l} without");
}

#[test]
fn every_rl_algorithm_runs() {
    let vocab = Vocab::new(6, 0, 5).unwrap();
    let task = rlhf_kernel::environments::VerifiableTask::new(vec![1], 3, 4, vocab.size()).unwrap();
    for alg in [
        Algorithm::Ppo,
        Algorithm::Grpo,
        Algorithm::Rloo,
        Algorithm::Gspo,
        Algorithm::Cispo,
        Algorithm::Rlvr,
    ] {
        let mut c = ExperimentConfig {
            steps: 3,
            update_epochs: 2,
            ..config(alg)
        };
        if alg == Algorithm::Rlvr {
            c.verifiable = vec![task.clone()];
        }
        let out = run_rlhf(&c).unwrap();
        assert_eq!(out.metrics.rows.len(), 6, "{alg:?}");
        assert!(out.metrics.rows.iter().flatten().all(|x| x.is_finite()));
    }
    assert!(run_rlhf(&config(Algorithm::Dpo)).is_err());
    assert!(run_rlhf(&ExperimentConfig {
        group_size: 1,
        ..config(Algorithm::Rloo)
    })
    .is_err());
}

#[test]
fn identical_halves_give_identical_curves() {
    let c = ExperimentConfig {
        steps: 20,
        learning_rate: Some(2.0),
        beta: 0.0,
        ..ExperimentConfig::default()
    };
    let mut control = c.clone();
    control.overopt.identical_halves = true;
    let out = run_overoptimization(&control).unwrap();
    assert_eq!(out.metrics.column("train_rm"), out.metrics.column("test_rm"));
    let split = run_overoptimization(&c).unwrap();
    assert_ne!(split.metrics.column("train_rm"), split.metrics.column("test_rm"));
}
