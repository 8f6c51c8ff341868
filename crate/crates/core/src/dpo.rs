//! Direct alignment from preference pairs: DPO and its IPO, cDPO and
//! DPO+NLL variants, implicit rewards and the closed-form optimum of the
//! KL-regularized objective.

use serde::{Deserialize, Serialize};

use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::numerics::{logsumexp, sigmoid, softplus};
use crate::policy::{BigramPolicy, Token, TokenSequence};
use crate::scalar::{lit, Scalar};

/// Learning rate used by the DPO runners unless overridden.
pub const DEFAULT_DPO_LR: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct DpoBatch<T> {
    pub records: Vec<PreferenceRecord>,
    pub beta: T,
    /// Per-record weights for a weighted mean; uniform when absent.
    pub weights: Option<Vec<T>>,
}

impl<T: Scalar> DpoBatch<T> {
    pub fn new(records: Vec<PreferenceRecord>, beta: T) -> Result<Self> {
        let batch = DpoBatch {
            records,
            beta,
            weights: None,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn with_weights(mut self, weights: Vec<T>) -> Result<Self> {
        self.weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > T::zero()) || !self.beta.is_finite() {
            return Err(Error::validation("beta", "must be positive"));
        }
        if self.records.is_empty() {
            return Err(Error::invalid("empty preference batch"));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.chosen == r.rejected {
                return Err(Error::validation(
                    "records",
                    format!("record {i}: chosen equals rejected"),
                ));
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != self.records.len() {
                return Err(Error::validation("weights", "one weight per record"));
            }
            if w.iter().any(|x| !(*x >= T::zero())) || w.iter().all(|x| *x == T::zero()) {
                return Err(Error::validation("weights", "must be non-negative with a positive sum"));
            }
        }
        Ok(())
    }

    fn normalized_weights(&self) -> Vec<T> {
        match &self.weights {
            Some(w) => {
                let s: T = w.iter().copied().sum();
                w.iter().map(|&x| x / s).collect()
            }
            None => {
                let n = T::from_usize(self.records.len()).unwrap();
                vec![T::one() / n; self.records.len()]
            }
        }
    }
}

/// Reference log-probabilities of each record's chosen and rejected
/// completions, computed once and reused across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLogProbs<T> {
    pub chosen: Vec<T>,
    pub rejected: Vec<T>,
}

impl<T: Scalar> ReferenceLogProbs<T> {
    pub fn compute(reference: &BigramPolicy<T>, records: &[PreferenceRecord]) -> Result<Self> {
        let mut chosen = Vec::with_capacity(records.len());
        let mut rejected = Vec::with_capacity(records.len());
        for r in records {
            chosen.push(reference.sequence_logprob(&r.chosen_sequence())?.total);
            rejected.push(reference.sequence_logprob(&r.rejected_sequence())?.total);
        }
        Ok(ReferenceLogProbs { chosen, rejected })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DpoVariant<T> {
    Dpo,
    Ipo { tau: T },
    Cdpo { label_noise_eps: T },
    DpoNll { alpha: T },
}

impl<T: Scalar> DpoVariant<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DpoVariant::Dpo => Ok(()),
            DpoVariant::Ipo { tau } if tau > T::zero() && tau.is_finite() => Ok(()),
            DpoVariant::Ipo { .. } => Err(Error::validation("tau", "must be positive")),
            DpoVariant::Cdpo { label_noise_eps: e } if e >= T::zero() && e < lit(0.5) => Ok(()),
            DpoVariant::Cdpo { .. } => Err(Error::invalid("label_noise_eps must lie in [0, 0.5)")),
            DpoVariant::DpoNll { alpha } if alpha >= T::zero() && alpha.is_finite() => Ok(()),
            DpoVariant::DpoNll { .. } => Err(Error::validation("alpha", "must be non-negative")),
        }
    }
}

/// Batch-level quantities tracked during training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DpoStats<T> {
    /// Mean implicit reward margin `β h`.
    pub margin: T,
    pub logp_chosen: T,
    pub logp_rejected: T,
    /// Fraction of records whose implicit reward ranks chosen above rejected.
    pub implicit_reward_accuracy: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoOutput<T> {
    pub loss: T,
    pub grad: Vec<T>,
    pub stats: DpoStats<T>,
}

/// The variant's loss on a batch against cached reference log-probs.
pub fn direct_alignment_loss<T: Scalar>(
    policy: &BigramPolicy<T>,
    reference: &ReferenceLogProbs<T>,
    batch: &DpoBatch<T>,
    variant: DpoVariant<T>,
) -> Result<DpoOutput<T>> {
    batch.validate()?;
    variant.validate()?;
    let n = batch.records.len();
    if reference.chosen.len() != n || reference.rejected.len() != n {
        return Err(Error::invalid("reference log-probs do not match the batch"));
    }
    let beta = batch.beta;
    let weights = batch.normalized_weights();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); policy.num_params()];
    let mut stats = DpoStats::default();
    let inv_n = T::one() / T::from_usize(n).unwrap();
    for (i, rec) in batch.records.iter().enumerate() {
        let c = rec.chosen_sequence();
        let r = rec.rejected_sequence();
        let lc = policy.sequence_logprob(&c)?.total;
        let lr = policy.sequence_logprob(&r)?.total;
        let h = (lc - reference.chosen[i]) - (lr - reference.rejected[i]);
        let z = beta * h;
        let (li, dh) = match variant {
            DpoVariant::Dpo | DpoVariant::DpoNll { .. } => (softplus(-z), -beta * sigmoid(-z)),
            DpoVariant::Ipo { tau } => {
                let d = h - T::one() / (lit::<T>(2.0) * tau);
                (d * d, lit::<T>(2.0) * d)
            }
            DpoVariant::Cdpo { label_noise_eps: e } => (
                (T::one() - e) * softplus(-z) + e * softplus(z),
                beta * (e * sigmoid(z) - (T::one() - e) * sigmoid(-z)),
            ),
        };
        let w = weights[i];
        loss += w * li;
        let gc = vec![w * dh; c.completion.len()];
        policy.accumulate_sequence_grad(&c, &gc, &mut grad);
        let gr = vec![-w * dh; r.completion.len()];
        policy.accumulate_sequence_grad(&r, &gr, &mut grad);

        if let DpoVariant::DpoNll { alpha } = variant {
            if alpha != T::zero() {
                let (nll, ng) = length_normalized_nll(policy, &c)?;
                loss += w * alpha * nll;
                for (g, x) in grad.iter_mut().zip(ng) {
                    *g += w * alpha * x;
                }
            }
        }

        stats.margin += inv_n * z;
        stats.logp_chosen += inv_n * lc;
        stats.logp_rejected += inv_n * lr;
        if h > T::zero() {
            stats.implicit_reward_accuracy += inv_n;
        }
    }
    Ok(DpoOutput { loss, grad, stats })
}

/// `−log π(prompt ++ completion) / (|prompt| + |completion|)`, scored from
/// the begin row, with its gradient.
fn length_normalized_nll<T: Scalar>(policy: &BigramPolicy<T>, seq: &TokenSequence) -> Result<(T, Vec<T>)> {
    let full = seq.full_tokens();
    let len = T::from_usize(full.len()).unwrap();
    let lp = policy.stream_logprob(&full)?.total;
    let mut g = vec![T::zero(); policy.num_params()];
    let w = vec![-T::one() / len; full.len()];
    policy.accumulate_sequence_grad(&TokenSequence::new(Vec::new(), full), &w, &mut g);
    Ok((-lp / len, g))
}

/// Mean of `−log σ(β[Δ log π_θ − Δ log π_ref])`, evaluating the reference
/// policy on every call.
pub fn dpo_loss<T: Scalar>(
    policy: &BigramPolicy<T>,
    reference: &BigramPolicy<T>,
    batch: &DpoBatch<T>,
) -> Result<DpoOutput<T>> {
    let refs = ReferenceLogProbs::compute(reference, &batch.records)?;
    direct_alignment_loss(policy, &refs, batch, DpoVariant::Dpo)
}

/// Mean of `(h − 1/(2τ))²`.
pub fn ipo_loss<T: Scalar>(
    policy: &BigramPolicy<T>,
    reference: &BigramPolicy<T>,
    batch: &DpoBatch<T>,
    tau: T,
) -> Result<DpoOutput<T>> {
    let refs = ReferenceLogProbs::compute(reference, &batch.records)?;
    direct_alignment_loss(policy, &refs, batch, DpoVariant::Ipo { tau })
}

/// DPO with an `eps` share of the labels assumed flipped.
pub fn cdpo_loss<T: Scalar>(
    policy: &BigramPolicy<T>,
    reference: &BigramPolicy<T>,
    batch: &DpoBatch<T>,
    label_noise_eps: T,
) -> Result<DpoOutput<T>> {
    let refs = ReferenceLogProbs::compute(reference, &batch.records)?;
    direct_alignment_loss(policy, &refs, batch, DpoVariant::Cdpo { label_noise_eps })
}

/// DPO plus `α` times the chosen sequence's per-token NLL.
pub fn dpo_nll_loss<T: Scalar>(
    policy: &BigramPolicy<T>,
    reference: &BigramPolicy<T>,
    batch: &DpoBatch<T>,
    alpha: T,
) -> Result<DpoOutput<T>> {
    let refs = ReferenceLogProbs::compute(reference, &batch.records)?;
    direct_alignment_loss(policy, &refs, batch, DpoVariant::DpoNll { alpha })
}

/// `β (log π_θ(y|x) − log π_ref(y|x))`.
pub fn implicit_reward<T: Scalar>(
    policy: &BigramPolicy<T>,
    reference: &BigramPolicy<T>,
    seq: &TokenSequence,
    beta: T,
) -> Result<T> {
    Ok(beta * (policy.sequence_logprob(seq)?.total - reference.sequence_logprob(seq)?.total))
}

/// An explicit distribution over every leaf of a prompt's generation tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitDistribution<T> {
    pub entries: Vec<(TokenSequence, T)>,
    /// `Z(x)` for tilted distributions, 1 otherwise.
    pub partition: T,
}

impl<T: Scalar> ExplicitDistribution<T> {
    /// Leaf probabilities of `policy`, in enumeration order.
    pub fn of_policy(policy: &BigramPolicy<T>, prompt: &[Token], max_len: usize) -> Result<Self> {
        Ok(ExplicitDistribution {
            entries: policy.enumerate_paths(prompt, max_len)?,
            partition: T::one(),
        })
    }

    pub fn probs(&self) -> Vec<T> {
        self.entries.iter().map(|(_, p)| *p).collect()
    }
}

/// `Z(x) = Σ_y π_ref(y|x) exp(r(x,y)/β)` over the enumerable completions.
pub fn partition_function<T: Scalar>(
    reference: &BigramPolicy<T>,
    reward: impl Fn(&TokenSequence) -> T,
    beta: T,
    prompt: &[Token],
    max_len: usize,
) -> Result<T> {
    Ok(optimal_policy(reference, reward, beta, prompt, max_len)?.partition)
}

/// `π*(y|x) = π_ref(y|x) exp(r(x,y)/β) / Z(x)` as an explicit table.
pub fn optimal_policy<T: Scalar>(
    reference: &BigramPolicy<T>,
    reward: impl Fn(&TokenSequence) -> T,
    beta: T,
    prompt: &[Token],
    max_len: usize,
) -> Result<ExplicitDistribution<T>> {
    if !(beta > T::zero()) || !beta.is_finite() {
        return Err(Error::validation("beta", "must be positive"));
    }
    let paths = reference.enumerate_paths(prompt, max_len)?;
    let mut seqs = Vec::with_capacity(paths.len());
    let mut log_w = Vec::with_capacity(paths.len());
    for (seq, _) in paths {
        log_w.push(reference.sequence_logprob(&seq)?.total + reward(&seq) / beta);
        seqs.push(seq);
    }
    let log_z = logsumexp(&log_w);
    let entries = seqs
        .into_iter()
        .zip(log_w)
        .map(|(s, lw)| (s, (lw - log_z).exp()))
        .collect();
    Ok(ExplicitDistribution {
        entries,
        partition: log_z.exp(),
    })
}

/// Plain gradient descent on one batch; the reference log-probs are cached
/// up front. Returns the loss and stats before each step.
pub fn train_dpo<T: Scalar>(
    policy: &mut BigramPolicy<T>,
    reference: &BigramPolicy<T>,
    batch: &DpoBatch<T>,
    variant: DpoVariant<T>,
    lr: T,
    steps: usize,
) -> Result<Vec<(T, DpoStats<T>)>> {
    let refs = ReferenceLogProbs::compute(reference, &batch.records)?;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let out = direct_alignment_loss(policy, &refs, batch, variant)?;
        policy.descend(&out.grad, lr);
        trace.push((out.loss, out.stats));
    }
    Ok(trace)
}
