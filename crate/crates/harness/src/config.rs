//! Experiment configuration: one JSON object with snake_case keys.

use std::fs;
use std::path::{Path, PathBuf};

use rlhf_kernel::advantage::GroupNorm;
use rlhf_kernel::environments::{CartPoleParams, CartPoleState, Push, ThermostatParams, VerifiableTask};
use rlhf_kernel::numerics::KlEstimator;
use rlhf_kernel::policy::{BigramPolicy, PolicyDocument};
use rlhf_kernel::policy_gradient::{Aggregation, ClipConfig, KlPlacement};
use rlhf_kernel::reward_models::{FeatureSpec, HeadKind, LinearRewardModel};
use rlhf_kernel::{Token, Vocab};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Environment variable that overrides the config seed.
pub const SEED_ENV: &str = "RLHF_KERNEL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sft,
    Rm,
    Ppo,
    Grpo,
    Rloo,
    Gspo,
    Cispo,
    Dpo,
    Ipo,
    Cdpo,
    DpoNll,
    RejectionSampling,
    Rlvr,
}

impl Algorithm {
    /// The config spelling, e.g. `dpo_nll`.
    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }

    pub fn is_rl(self) -> bool {
        matches!(
            self,
            Algorithm::Ppo | Algorithm::Grpo | Algorithm::Rloo | Algorithm::Gspo | Algorithm::Cispo | Algorithm::Rlvr
        )
    }

    pub fn is_direct_alignment(self) -> bool {
        matches!(
            self,
            Algorithm::Dpo | Algorithm::Ipo | Algorithm::Cdpo | Algorithm::DpoNll
        )
    }

    pub fn default_kl_placement(self) -> KlPlacement {
        match self {
            Algorithm::Ppo | Algorithm::Rloo => KlPlacement::RewardLevel,
            _ => KlPlacement::LossLevel,
        }
    }
}

/// A reward model given inline or as a path to a model JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardSource {
    Path(PathBuf),
    Inline(LinearRewardModel<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvironmentConfig {
    Cartpole {
        #[serde(default)]
        params: CartPoleParams<f64>,
        #[serde(default)]
        initial_state: CartPoleState<f64>,
        /// Fixed action sequence; without it the cart is pushed toward the
        /// side the pole leans to.
        #[serde(default)]
        actions: Option<Vec<Push>>,
        steps: usize,
    },
    Thermostat {
        #[serde(default)]
        params: ThermostatParams<f64>,
        initial_temperature: f64,
        steps: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OveroptConfig {
    /// Preference pairs generated when no dataset is given.
    pub pairs: usize,
    pub min_split: usize,
    /// Latent reward the synthetic labels come from.
    pub latent: Option<LinearRewardModel<f64>>,
    pub train_features: Option<FeatureSpec>,
    /// Defaults to the latent model's features.
    pub test_features: Option<FeatureSpec>,
    /// Train both reward models on the same half.
    pub identical_halves: bool,
    pub rm_learning_rate: f64,
    pub rm_epochs: usize,
}

impl Default for OveroptConfig {
    fn default() -> Self {
        OveroptConfig {
            pairs: 2000,
            min_split: 100,
            latent: None,
            train_features: None,
            test_features: None,
            identical_halves: false,
            rm_learning_rate: 0.5,
            rm_epochs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Option<Algorithm>,
    pub vocab_size: usize,
    pub eos_id: Token,
    /// Defaults to the last token id.
    pub pad_id: Option<Token>,
    pub max_len: usize,
    pub prompts: Vec<Vec<Token>>,
    pub group_size: usize,
    pub beta: f64,
    pub gamma: f64,
    pub lam: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub value_clip: Option<f64>,
    pub value_learning_rate: f64,
    pub kl_placement: Option<KlPlacement>,
    pub kl_estimator: Option<KlEstimator>,
    pub aggregation: Aggregation,
    pub group_norm: GroupNorm,
    /// Defaults to 5e-3 for direct alignment and 0.1 otherwise.
    pub learning_rate: Option<f64>,
    pub steps: usize,
    pub update_epochs: usize,
    pub seed: u64,
    pub temperature: f64,
    pub truncation_penalty: f64,
    pub init_scale: f64,
    pub initial_policy: Option<PathBuf>,
    pub reward_model: Option<RewardSource>,
    pub verifiable: Vec<VerifiableTask>,
    pub preference_data: Option<PathBuf>,
    pub sft_data: Option<PathBuf>,
    pub pretrain_corpus: Option<PathBuf>,
    pub gamma_mix: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub feature_spec: Option<FeatureSpec>,
    pub tau: f64,
    pub label_noise_eps: f64,
    pub nll_alpha: f64,
    pub n_samples: usize,
    pub top_k: Option<usize>,
    pub dedup: bool,
    pub environment: Option<EnvironmentConfig>,
    pub overopt: OveroptConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: None,
            vocab_size: 6,
            eos_id: 0,
            pad_id: None,
            max_len: 4,
            prompts: vec![vec![1], vec![2]],
            group_size: 4,
            beta: 0.05,
            gamma: 1.0,
            lam: 0.95,
            eps_low: 0.2,
            eps_high: 0.2,
            value_clip: Some(0.2),
            value_learning_rate: 0.1,
            kl_placement: None,
            kl_estimator: None,
            aggregation: Aggregation::PerSequence,
            group_norm: GroupNorm::Grpo,
            learning_rate: None,
            steps: 50,
            update_epochs: 1,
            seed: 0,
            temperature: 1.0,
            truncation_penalty: -1.0,
            init_scale: 0.5,
            initial_policy: None,
            reward_model: None,
            verifiable: Vec::new(),
            preference_data: None,
            sft_data: None,
            pretrain_corpus: None,
            gamma_mix: 0.0,
            epochs: 1,
            batch_size: 32,
            feature_spec: None,
            tau: 0.1,
            label_noise_eps: 0.1,
            nll_alpha: 1.0,
            n_samples: 4,
            top_k: None,
            dedup: false,
            environment: None,
            overopt: OveroptConfig::default(),
        }
    }
}

fn check(ok: bool, field: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(HarnessError::validation(field, message))
    }
}

fn check_file(path: &Option<PathBuf>, field: &str) -> Result<()> {
    match path {
        Some(p) if !p.is_file() => Err(HarnessError::validation(
            field,
            format!("file {} does not exist", p.display()),
        )),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Parse { source, .. } => HarnessError::Parse {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    /// Parses without touching the filesystem; file fields are checked by
    /// [`ExperimentConfig::validate`].
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| HarnessError::Parse {
            path: PathBuf::from("<config>"),
            source,
        })
    }

    /// `--seed` beats the environment variable, which beats the file.
    pub fn apply_seed_override(&mut self, cli_seed: Option<u64>, env_seed: Option<String>) -> Result<()> {
        if let Some(s) = cli_seed {
            self.seed = s;
        } else if let Some(raw) = env_seed {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| HarnessError::validation(SEED_ENV, format!("`{raw}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        self.algorithm
            .ok_or_else(|| HarnessError::validation("algorithm", "required for this command"))
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.algorithm {
            Some(a) if a.is_direct_alignment() => rlhf_kernel::dpo::DEFAULT_DPO_LR,
            _ => 0.1,
        })
    }

    pub fn kl_placement(&self) -> KlPlacement {
        self.kl_placement.unwrap_or_else(|| {
            self.algorithm
                .map_or(KlPlacement::RewardLevel, Algorithm::default_kl_placement)
        })
    }

    /// k3 when the penalty sits in the loss, k1 when it shapes rewards.
    pub fn kl_estimator(&self) -> KlEstimator {
        self.kl_estimator.unwrap_or(match self.kl_placement() {
            KlPlacement::LossLevel => KlEstimator::K3,
            KlPlacement::RewardLevel => KlEstimator::K1,
        })
    }

    pub fn clip(&self) -> ClipConfig<f64> {
        ClipConfig {
            eps_low: self.eps_low,
            eps_high: self.eps_high,
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let pad = self.pad_id.unwrap_or(self.vocab_size.saturating_sub(1) as Token);
        Ok(Vocab::new(self.vocab_size, self.eos_id, pad)?)
    }

    /// Range checks shared by every command, plus file existence.
    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocab()?;
        check(self.max_len >= 1, "max_len", "must be at least 1")?;
        for (i, p) in self.prompts.iter().enumerate() {
            if let Some(t) = p.iter().find(|&&t| !vocab.contains(t)) {
                return Err(HarnessError::validation(
                    "prompts",
                    format!("prompt {i} has token {t} outside the vocabulary"),
                ));
            }
        }
        check(self.group_size >= 1, "group_size", "must be at least 1")?;
        check(
            self.beta >= 0.0 && self.beta.is_finite(),
            "beta",
            "must be non-negative",
        )?;
        check((0.0..=1.0).contains(&self.gamma), "gamma", "must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.lam), "lam", "must lie in [0, 1]")?;
        check(
            self.eps_low > 0.0 && self.eps_low < 1.0,
            "eps_low",
            "must lie in (0, 1)",
        )?;
        check(
            self.eps_high > 0.0 && self.eps_high.is_finite(),
            "eps_high",
            "must be positive",
        )?;
        if let Some(v) = self.value_clip {
            check(v > 0.0, "value_clip", "must be positive")?;
        }
        check(
            self.value_learning_rate >= 0.0,
            "value_learning_rate",
            "must be non-negative",
        )?;
        if let Some(lr) = self.learning_rate {
            check(lr >= 0.0 && lr.is_finite(), "learning_rate", "must be non-negative")?;
        }
        if let Aggregation::FixedLength(l) = self.aggregation {
            check(
                l >= self.max_len,
                "aggregation",
                "fixed length must be at least max_len",
            )?;
        }
        check(self.update_epochs >= 1, "update_epochs", "must be at least 1")?;
        check(
            self.temperature >= 0.0 && self.temperature.is_finite(),
            "temperature",
            "must be non-negative",
        )?;
        check(
            self.truncation_penalty.is_finite(),
            "truncation_penalty",
            "must be finite",
        )?;
        check(self.init_scale >= 0.0, "init_scale", "must be non-negative")?;
        check(self.gamma_mix >= 0.0, "gamma_mix", "must be non-negative")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(self.tau > 0.0, "tau", "must be positive")?;
        check(
            (0.0..0.5).contains(&self.label_noise_eps),
            "label_noise_eps",
            "must lie in [0, 0.5)",
        )?;
        check(self.nll_alpha >= 0.0, "nll_alpha", "must be non-negative")?;
        check(self.n_samples >= 1, "n_samples", "must be at least 1")?;
        check(self.overopt.min_split >= 1, "overopt.min_split", "must be at least 1")?;
        check(
            self.overopt.rm_learning_rate > 0.0,
            "overopt.rm_learning_rate",
            "must be positive",
        )?;
        for (i, t) in self.verifiable.iter().enumerate() {
            VerifiableTask::new(t.prompt.clone(), t.answer_token, t.marker, self.vocab_size)
                .map_err(|e| HarnessError::validation(format!("verifiable[{i}]"), e.to_string()))?;
        }
        if let Some(spec) = &self.feature_spec {
            check(
                spec.vocab_size == self.vocab_size,
                "feature_spec",
                "vocab_size differs from the config",
            )?;
        }
        check_file(&self.initial_policy, "initial_policy")?;
        check_file(&self.preference_data, "preference_data")?;
        check_file(&self.sft_data, "sft_data")?;
        check_file(&self.pretrain_corpus, "pretrain_corpus")?;
        if let Some(RewardSource::Path(p)) = &self.reward_model {
            check_file(&Some(p.clone()), "reward_model")?;
        }
        if let Some(RewardSource::Inline(rm)) = &self.reward_model {
            rm.validate()
                .map_err(|e| HarnessError::validation("reward_model", e.to_string()))?;
        }
        if let Some(EnvironmentConfig::Cartpole { params, .. }) = &self.environment {
            params.validate()?;
        }
        Ok(())
    }

    /// The starting policy: loaded from `initial_policy` or drawn from the seed.
    pub fn initial_policy(&self) -> Result<BigramPolicy<f64>> {
        let vocab = self.vocab()?;
        match &self.initial_policy {
            Some(path) => {
                let doc: PolicyDocument<f64> = read_json(path)?;
                let policy = BigramPolicy::from_document(doc)?;
                check(
                    policy.vocab() == &vocab,
                    "initial_policy",
                    "vocabulary differs from the config",
                )?;
                Ok(policy)
            }
            None => Ok(BigramPolicy::random(
                vocab,
                self.init_scale,
                rlhf_kernel::Seed::new(self.seed).derive("init-policy"),
            )),
        }
    }

    pub fn reward_model(&self) -> Result<LinearRewardModel<f64>> {
        let rm = match &self.reward_model {
            Some(RewardSource::Inline(rm)) => rm.clone(),
            Some(RewardSource::Path(p)) => read_json(p)?,
            None => return Err(HarnessError::validation("reward_model", "required for this command")),
        };
        rm.validate()?;
        check(
            rm.head_kind == HeadKind::Sequence,
            "reward_model",
            "must have a sequence head",
        )?;
        check(
            rm.feature_spec.vocab_size == self.vocab_size,
            "reward_model",
            "vocab_size differs from the config",
        )?;
        Ok(rm)
    }
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_jsonl<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let file = fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(rlhf_kernel::data::read_jsonl(std::io::BufReader::new(file))?)
}
