//! Policy-gradient surrogates over batches of sampled completions.
//!
//! Every surrogate works on `B × L` matrices of per-token log-probabilities
//! and returns the scalar loss together with `∂loss/∂new_logprobs`; the
//! policy-parameter gradient follows by [`backprop_to_policy`]. Old and
//! reference log-probabilities are constants throughout.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::KlEstimator;
use crate::policy::{BigramPolicy, TokenSequence};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig<T> {
    pub eps_low: T,
    pub eps_high: T,
}

impl<T: Scalar> Default for ClipConfig<T> {
    fn default() -> Self {
        ClipConfig::symmetric(lit(0.2))
    }
}

impl<T: Scalar> ClipConfig<T> {
    pub fn symmetric(eps: T) -> Self {
        ClipConfig {
            eps_low: eps,
            eps_high: eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > T::zero()) || !self.eps_low.is_finite() {
            return Err(Error::validation("eps_low", "must be positive"));
        }
        if !(self.eps_high > T::zero()) || !self.eps_high.is_finite() {
            return Err(Error::validation("eps_high", "must be positive"));
        }
        Ok(())
    }

    pub fn lower(&self) -> T {
        T::one() - self.eps_low
    }

    pub fn upper(&self) -> T {
        T::one() + self.eps_high
    }

    pub fn clip(&self, ratio: T) -> T {
        ratio.max(self.lower()).min(self.upper())
    }
}

/// How per-token losses are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over each row's tokens, then mean over rows.
    #[default]
    PerSequence,
    /// Sum over all tokens divided by the total token count.
    PerToken,
    /// Row sums divided by a constant length, then mean over rows.
    FixedLength(usize),
}

fn row_counts(mask: &Array2<bool>) -> Vec<usize> {
    mask.rows()
        .into_iter()
        .map(|r| r.iter().filter(|&&m| m).count())
        .collect()
}

/// The aggregated loss and its derivative with respect to each entry.
pub fn aggregate_loss<T: Scalar>(
    per_token: &Array2<T>,
    mask: &Array2<bool>,
    strategy: Aggregation,
) -> Result<(T, Array2<T>)> {
    if per_token.dim() != mask.dim() {
        return Err(Error::invalid(format!(
            "loss shape {:?} vs mask {:?}",
            per_token.dim(),
            mask.dim()
        )));
    }
    let (b, l) = per_token.dim();
    if b == 0 {
        return Err(Error::invalid("aggregate_loss: empty batch"));
    }
    let counts = row_counts(mask);
    let total: usize = counts.iter().sum();
    let rows = T::from_usize(b).unwrap();
    let mut weights = Array2::zeros((b, l));
    for i in 0..b {
        let w = match strategy {
            Aggregation::PerSequence => {
                if counts[i] == 0 {
                    return Err(Error::invalid(format!("row {i} has no completion tokens")));
                }
                T::one() / (T::from_usize(counts[i]).unwrap() * rows)
            }
            Aggregation::PerToken => {
                if total == 0 {
                    return Err(Error::invalid("aggregate_loss: mask selects no tokens"));
                }
                T::one() / T::from_usize(total).unwrap()
            }
            Aggregation::FixedLength(l_max) => {
                if l_max == 0 || counts[i] > l_max {
                    return Err(Error::invalid(format!(
                        "fixed length {l_max} shorter than row {i} ({} tokens)",
                        counts[i]
                    )));
                }
                T::one() / (T::from_usize(l_max).unwrap() * rows)
            }
        };
        for t in 0..l {
            if mask[(i, t)] {
                weights[(i, t)] = w;
            }
        }
    }
    // Row-by-row accumulation keeps the per-sequence arithmetic close to the
    // written formula.
    let mut loss = T::zero();
    for i in 0..b {
        let mut row = T::zero();
        for t in 0..l {
            if mask[(i, t)] {
                row += per_token[(i, t)] * weights[(i, t)];
            }
        }
        loss += row;
    }
    Ok((loss, weights))
}

/// Masked mean over every token of the batch.
pub fn masked_mean<T: Scalar>(x: &Array2<T>, mask: &Array2<bool>) -> T {
    let mut s = T::zero();
    let mut n = 0usize;
    for (v, &m) in x.iter().zip(mask) {
        if m {
            s += *v;
            n += 1;
        }
    }
    s / T::from_usize(n.max(1)).unwrap()
}

/// `exp(new − old)` elementwise.
pub fn policy_ratio<T: Scalar>(new_logprobs: &Array2<T>, old_logprobs: &Array2<T>) -> Result<Array2<T>> {
    if new_logprobs.dim() != old_logprobs.dim() {
        return Err(Error::invalid("policy_ratio: shape mismatch"));
    }
    Ok((new_logprobs - old_logprobs).mapv(T::exp))
}

/// Sampled completions with everything the surrogates need.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch<T> {
    /// Under the policy being optimized.
    pub new_logprobs: Array2<T>,
    /// Under the policy that generated the samples.
    pub old_logprobs: Array2<T>,
    /// Under the frozen reference policy.
    pub ref_logprobs: Array2<T>,
    pub advantages: Array2<T>,
    pub completion_mask: Array2<bool>,
    pub group_size: usize,
    /// Estimator for the loss-level KL term.
    pub kl_estimator: KlEstimator,
}

impl<T: Scalar> TrajectoryBatch<T> {
    pub fn validate(&self) -> Result<()> {
        let d = self.completion_mask.dim();
        for (name, m) in [
            ("new_logprobs", &self.new_logprobs),
            ("old_logprobs", &self.old_logprobs),
            ("ref_logprobs", &self.ref_logprobs),
            ("advantages", &self.advantages),
        ] {
            if m.dim() != d {
                return Err(Error::invalid(format!("{name} shape {:?} vs mask {:?}", m.dim(), d)));
            }
        }
        if self.group_size == 0 || !d.0.is_multiple_of(self.group_size) {
            return Err(Error::invalid(format!(
                "group size {} does not divide batch of {}",
                self.group_size, d.0
            )));
        }
        Ok(())
    }

    /// `estimator(new − ref)` per token; zero off the mask.
    pub fn per_token_kl(&self) -> Array2<T> {
        let mut kl = Array2::zeros(self.completion_mask.dim());
        for ((idx, &m), k) in self.completion_mask.indexed_iter().zip(kl.iter_mut()) {
            if m {
                *k = self
                    .kl_estimator
                    .pointwise(self.new_logprobs[idx] - self.ref_logprobs[idx]);
            }
        }
        kl
    }

    pub fn ratio(&self) -> Array2<T> {
        (&self.new_logprobs - &self.old_logprobs).mapv(T::exp)
    }
}

/// One advantage per sequence copied to every completion token.
pub fn broadcast_advantages<T: Scalar>(per_sequence: &[T], mask: &Array2<bool>) -> Result<Array2<T>> {
    if per_sequence.len() != mask.nrows() {
        return Err(Error::invalid(format!(
            "{} advantages for {} rows",
            per_sequence.len(),
            mask.nrows()
        )));
    }
    Ok(Array2::from_shape_fn(mask.dim(), |(i, t)| {
        if mask[(i, t)] {
            per_sequence[i]
        } else {
            T::zero()
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Diagnostics<T> {
    /// Masked fraction of tokens where the clipped branch is strictly larger.
    pub clip_fraction: T,
    /// Masked mean of `0.5 (new − old)²`.
    pub approx_kl: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput<T> {
    pub loss: T,
    /// `∂loss/∂new_logprobs`.
    pub grad: Array2<T>,
    pub diagnostics: Diagnostics<T>,
}

fn approx_kl<T: Scalar>(batch: &TrajectoryBatch<T>) -> T {
    let half: T = lit(0.5);
    let d = (&batch.new_logprobs - &batch.old_logprobs).mapv(|x| half * x * x);
    masked_mean(&d, &batch.completion_mask)
}

/// Clip fraction and approximate KL as logged during PPO-style training.
pub fn diagnostics<T: Scalar>(batch: &TrajectoryBatch<T>, clip: &ClipConfig<T>) -> Result<Diagnostics<T>> {
    batch.validate()?;
    let ratio = batch.ratio();
    let mut clipped = T::zero();
    for ((idx, &m), &r) in batch.completion_mask.indexed_iter().zip(&ratio) {
        let a = batch.advantages[idx];
        if m && -a * clip.clip(r) > -a * r {
            clipped += T::one();
        }
    }
    let n = batch.completion_mask.iter().filter(|&&m| m).count().max(1);
    Ok(Diagnostics {
        clip_fraction: clipped / T::from_usize(n).unwrap(),
        approx_kl: approx_kl(batch),
    })
}

/// `−A · log π`, aggregated. Differentiated with the advantages fixed.
pub fn reinforce_loss<T: Scalar>(batch: &TrajectoryBatch<T>, agg: Aggregation) -> Result<SurrogateOutput<T>> {
    batch.validate()?;
    let per_token = -(&batch.advantages * &batch.new_logprobs);
    let (loss, w) = aggregate_loss(&per_token, &batch.completion_mask, agg)?;
    let grad = -(&w * &batch.advantages);
    Ok(SurrogateOutput {
        loss,
        grad,
        diagnostics: Diagnostics {
            clip_fraction: T::zero(),
            approx_kl: approx_kl(batch),
        },
    })
}

/// Per token `max(−Aρ, −A·clip(ρ))` and its derivative in `new_logprobs`.
fn clipped_terms<T: Scalar>(batch: &TrajectoryBatch<T>, clip: &ClipConfig<T>) -> (Array2<T>, Array2<T>) {
    let ratio = batch.ratio();
    let dim = ratio.dim();
    let mut loss = Array2::zeros(dim);
    let mut dloss = Array2::zeros(dim);
    for (idx, &r) in ratio.indexed_iter() {
        let a = batch.advantages[idx];
        let pg1 = -a * r;
        let pg2 = -a * clip.clip(r);
        if pg2 > pg1 {
            // Clipped branch: constant in θ.
            loss[idx] = pg2;
        } else {
            loss[idx] = pg1;
            // d(−A e^{new−old})/d new
            dloss[idx] = -a * r;
        }
    }
    (loss, dloss)
}

/// The clipped surrogate, aggregated.
pub fn ppo_loss<T: Scalar>(
    batch: &TrajectoryBatch<T>,
    clip: &ClipConfig<T>,
    agg: Aggregation,
) -> Result<SurrogateOutput<T>> {
    grpo_loss(batch, clip, T::zero(), agg)
}

/// The clipped surrogate plus `β · per_token_kl` inside the per-token loss,
/// aggregated by `agg`.
pub fn grpo_loss<T: Scalar>(
    batch: &TrajectoryBatch<T>,
    clip: &ClipConfig<T>,
    beta: T,
    agg: Aggregation,
) -> Result<SurrogateOutput<T>> {
    batch.validate()?;
    clip.validate()?;
    let (mut per_token, mut dtoken) = clipped_terms(batch, clip);
    if beta != T::zero() {
        for (idx, &m) in batch.completion_mask.indexed_iter() {
            if m {
                let lr = batch.new_logprobs[idx] - batch.ref_logprobs[idx];
                per_token[idx] += beta * batch.kl_estimator.pointwise(lr);
                dtoken[idx] += beta * batch.kl_estimator.d_log_p(lr);
            }
        }
    }
    let (loss, w) = aggregate_loss(&per_token, &batch.completion_mask, agg)?;
    Ok(SurrogateOutput {
        loss,
        grad: &w * &dtoken,
        diagnostics: diagnostics(batch, clip)?,
    })
}

/// Length-normalized sequence ratios `exp(mean_t (new − old))`.
pub fn gspo_ratios<T: Scalar>(batch: &TrajectoryBatch<T>) -> Result<Vec<T>> {
    batch.validate()?;
    let mut out = Vec::with_capacity(batch.completion_mask.nrows());
    for i in 0..batch.completion_mask.nrows() {
        let mut s = T::zero();
        let mut n = 0usize;
        for t in 0..batch.completion_mask.ncols() {
            if batch.completion_mask[(i, t)] {
                s += batch.new_logprobs[(i, t)] - batch.old_logprobs[(i, t)];
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid(format!("row {i} has no completion tokens")));
        }
        out.push((s / T::from_usize(n).unwrap()).exp());
    }
    Ok(out)
}

fn sequence_advantage<T: Scalar>(batch: &TrajectoryBatch<T>, i: usize) -> T {
    (0..batch.completion_mask.ncols())
        .find(|&t| batch.completion_mask[(i, t)])
        .map_or(T::zero(), |t| batch.advantages[(i, t)])
}

/// Sequence-level clipped surrogate. The advantage of a row is read from
/// its first completion token; each token carries the sequence loss, so the
/// default per-sequence aggregation gives the mean over sequences.
pub fn gspo_loss<T: Scalar>(
    batch: &TrajectoryBatch<T>,
    clip: &ClipConfig<T>,
    agg: Aggregation,
) -> Result<SurrogateOutput<T>> {
    clip.validate()?;
    let rho = gspo_ratios(batch)?;
    let counts = row_counts(&batch.completion_mask);
    let dim = batch.completion_mask.dim();
    let mut per_token = Array2::zeros(dim);
    let mut d_rho = vec![T::zero(); dim.0];
    let mut clipped_rows = 0usize;
    for i in 0..dim.0 {
        let a = sequence_advantage(batch, i);
        let pg1 = -a * rho[i];
        let pg2 = -a * clip.clip(rho[i]);
        let seq_loss = if pg2 > pg1 {
            clipped_rows += counts[i];
            pg2
        } else {
            d_rho[i] = -a;
            pg1
        };
        for t in 0..dim.1 {
            if batch.completion_mask[(i, t)] {
                per_token[(i, t)] = seq_loss;
            }
        }
    }
    let (loss, w) = aggregate_loss(&per_token, &batch.completion_mask, agg)?;
    // ∂ρ_i/∂new_{i,t} = ρ_i / |a_i|; every token of row i feeds every copy of
    // the row's loss.
    let mut grad = Array2::zeros(dim);
    for i in 0..dim.0 {
        let row_weight: T = (0..dim.1).map(|t| w[(i, t)]).sum();
        let g = row_weight * d_rho[i] * rho[i] / T::from_usize(counts[i]).unwrap();
        for t in 0..dim.1 {
            if batch.completion_mask[(i, t)] {
                grad[(i, t)] = g;
            }
        }
    }
    let total: usize = counts.iter().sum();
    Ok(SurrogateOutput {
        loss,
        grad,
        diagnostics: Diagnostics {
            clip_fraction: T::from_usize(clipped_rows).unwrap() / T::from_usize(total.max(1)).unwrap(),
            approx_kl: approx_kl(batch),
        },
    })
}

/// `−Σ sg(clip(ρ)) · A · log π / Σ|a_i|`. The clipped weight is a constant
/// for differentiation, so every token keeps a gradient.
pub fn cispo_loss<T: Scalar>(batch: &TrajectoryBatch<T>, clip: &ClipConfig<T>) -> Result<SurrogateOutput<T>> {
    batch.validate()?;
    clip.validate()?;
    let ratio = batch.ratio();
    let weights = cispo_weights(&ratio, clip);
    let per_token = -(&weights * &batch.advantages * &batch.new_logprobs);
    let (loss, w) = aggregate_loss(&per_token, &batch.completion_mask, Aggregation::PerToken)?;
    let grad = -(&w * &weights * &batch.advantages);
    let mut clipped = T::zero();
    for ((idx, &m), &r) in batch.completion_mask.indexed_iter().zip(&ratio) {
        if m && clip.clip(r) != r {
            clipped += T::one();
        }
        let _ = idx;
    }
    let n = batch.completion_mask.iter().filter(|&&m| m).count().max(1);
    Ok(SurrogateOutput {
        loss,
        grad,
        diagnostics: Diagnostics {
            clip_fraction: clipped / T::from_usize(n).unwrap(),
            approx_kl: approx_kl(batch),
        },
    })
}

/// `clip(ρ, 1 − ε_low, 1 + ε_high)` elementwise.
pub fn cispo_weights<T: Scalar>(ratio: &Array2<T>, clip: &ClipConfig<T>) -> Array2<T> {
    ratio.mapv(|r| clip.clip(r))
}

/// Where the KL penalty enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlPlacement {
    /// Subtracted from per-token rewards before advantages are computed.
    #[default]
    RewardLevel,
    /// Added to the loss.
    LossLevel,
}

/// `rewards − β · kl` per token.
pub fn kl_penalized_rewards<T: Scalar>(rewards: &Array2<T>, per_token_kl: &Array2<T>, beta: T) -> Result<Array2<T>> {
    if rewards.dim() != per_token_kl.dim() {
        return Err(Error::invalid("kl_penalized_rewards: shape mismatch"));
    }
    Ok(rewards - &per_token_kl.mapv(|k| beta * k))
}

/// `loss + β · masked-mean(kl)`.
pub fn kl_penalized_loss<T: Scalar>(loss: T, per_token_kl: &Array2<T>, mask: &Array2<bool>, beta: T) -> Result<T> {
    if mask.dim() != per_token_kl.dim() {
        return Err(Error::invalid("kl_penalized_loss: shape mismatch"));
    }
    Ok(loss + beta * masked_mean(per_token_kl, mask))
}

/// Per-token log-probabilities of each completion under `policy`, padded
/// into a `B × L` matrix with its completion mask.
pub fn batch_logprobs<T: Scalar>(
    policy: &BigramPolicy<T>,
    seqs: &[TokenSequence],
) -> Result<(Array2<T>, Array2<bool>)> {
    let l = seqs.iter().map(|s| s.completion.len()).max().unwrap_or(0);
    let mut lp = Array2::zeros((seqs.len(), l));
    let mut mask = Array2::from_elem((seqs.len(), l), false);
    for (i, s) in seqs.iter().enumerate() {
        let per = policy.sequence_logprob(s)?.per_token;
        for (t, x) in per.into_iter().enumerate() {
            lp[(i, t)] = x;
            mask[(i, t)] = true;
        }
    }
    Ok((lp, mask))
}

/// Chains `∂loss/∂new_logprobs` through the policy's log-probabilities.
pub fn backprop_to_policy<T: Scalar>(policy: &BigramPolicy<T>, seqs: &[TokenSequence], grad: &Array2<T>) -> Vec<T> {
    let mut out = vec![T::zero(); policy.num_params()];
    for (i, s) in seqs.iter().enumerate() {
        let w: Vec<T> = (0..s.completion.len()).map(|t| grad[(i, t)]).collect();
        policy.accumulate_sequence_grad(s, &w, &mut out);
    }
    out
}
