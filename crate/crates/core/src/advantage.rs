//! Returns and advantages: Monte-Carlo returns, leave-one-out and group
//! baselines, TD residuals, GAE and the clipped value-regression loss.
//!
//! Batched quantities are `B × L` matrices, one row per completion.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean, population_std, sample_std, STD_EPS};
use crate::scalar::{lit, Scalar};

fn check_unit<T: Scalar>(name: &str, x: T) -> Result<()> {
    if !(x >= T::zero() && x <= T::one()) {
        return Err(Error::invalid(format!("{name} = {x} outside [0, 1]")));
    }
    Ok(())
}

fn check_shape<T, U>(what: &str, a: &Array2<T>, b: &Array2<U>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("{what}: shape {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn indicator<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

/// Per-token rewards with terminal and completion flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGrid<T> {
    pub rewards: Array2<T>,
    pub done: Array2<bool>,
    pub completion_mask: Array2<bool>,
}

impl<T: Scalar> RewardGrid<T> {
    pub fn new(rewards: Array2<T>, done: Array2<bool>, completion_mask: Array2<bool>) -> Result<Self> {
        check_shape("done", &rewards, &done)?;
        check_shape("completion_mask", &rewards, &completion_mask)?;
        Ok(RewardGrid {
            rewards,
            done,
            completion_mask,
        })
    }

    /// Terminal flag on the last completion token of each row.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let l = rows.iter().map(Vec::len).max().unwrap_or(0);
        let b = rows.len();
        let mut rewards = Array2::zeros((b, l));
        let mut done = Array2::from_elem((b, l), false);
        let mut mask = Array2::from_elem((b, l), false);
        for (i, r) in rows.iter().enumerate() {
            for (t, &x) in r.iter().enumerate() {
                rewards[(i, t)] = x;
                mask[(i, t)] = true;
            }
            if !r.is_empty() {
                done[(i, r.len() - 1)] = true;
            }
        }
        RewardGrid {
            rewards,
            done,
            completion_mask: mask,
        }
    }
}

/// `G_t = r_t + γ (1 − done_t) G_{t+1}`, right to left, zero off the mask.
pub fn mc_returns<T: Scalar>(grid: &RewardGrid<T>, gamma: T) -> Result<Array2<T>> {
    check_unit("gamma", gamma)?;
    let (b, l) = grid.rewards.dim();
    let mut out = Array2::zeros((b, l));
    for i in 0..b {
        let mut running = T::zero();
        for t in (0..l).rev() {
            running = grid.rewards[(i, t)] + gamma * (T::one() - indicator::<T>(grid.done[(i, t)])) * running;
            out[(i, t)] = if grid.completion_mask[(i, t)] {
                running
            } else {
                T::zero()
            };
        }
    }
    Ok(out)
}

fn check_group<T>(rewards: &[T]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!(
            "group of {} rewards; need at least 2",
            rewards.len()
        )));
    }
    Ok(())
}

/// `A_k = r_k − mean of the other K − 1 rewards`.
pub fn rloo_advantage<T: Scalar>(rewards: &[T]) -> Result<Vec<T>> {
    check_group(rewards)?;
    let k = T::from_usize(rewards.len()).unwrap();
    let total: T = rewards.iter().copied().sum();
    Ok(rewards.iter().map(|&r| r - (total - r) / (k - T::one())).collect())
}

/// The same advantage written as `K/(K−1) · (r_k − mean)`.
pub fn rloo_advantage_scaled_mean<T: Scalar>(rewards: &[T]) -> Result<Vec<T>> {
    check_group(rewards)?;
    let k = T::from_usize(rewards.len()).unwrap();
    let m = mean(rewards);
    Ok(rewards.iter().map(|&r| k / (k - T::one()) * (r - m)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupNorm {
    /// `(r − mean) / (std + eps)`
    #[default]
    Grpo,
    /// `r − mean`
    DrGrpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// n − 1 denominator.
    #[default]
    Sample,
    Population,
}

pub fn grpo_advantage<T: Scalar>(rewards: &[T], mode: GroupNorm, eps: T) -> Result<Vec<T>> {
    grpo_advantage_with(rewards, mode, eps, StdKind::Sample)
}

pub fn grpo_advantage_with<T: Scalar>(rewards: &[T], mode: GroupNorm, eps: T, std: StdKind) -> Result<Vec<T>> {
    check_group(rewards)?;
    let m = mean(rewards);
    let centered = rewards.iter().map(|&r| r - m);
    Ok(match mode {
        GroupNorm::DrGrpo => centered.collect(),
        GroupNorm::Grpo => {
            let sd = match std {
                StdKind::Sample => sample_std(rewards),
                StdKind::Population => population_std(rewards),
            };
            centered.map(|c| c / (sd + eps)).collect()
        }
    })
}

/// Default guard for [`grpo_advantage`].
pub fn grpo_eps<T: Scalar>() -> T {
    lit(STD_EPS)
}

/// Process supervision: every step reward in the group is normalized by the
/// group's pooled mean and standard deviation, then each step's advantage is
/// the sum of normalized rewards from that step to the end of its completion.
pub fn process_grpo_advantage<T: Scalar>(step_rewards: &[Vec<T>], eps: T) -> Result<Vec<Vec<T>>> {
    if step_rewards.len() < 2 {
        return Err(Error::invalid(
            "process advantages need a group of at least 2 completions",
        ));
    }
    let pooled: Vec<T> = step_rewards.iter().flatten().copied().collect();
    if pooled.is_empty() {
        return Err(Error::invalid("process advantages need at least one step reward"));
    }
    let m = mean(&pooled);
    let sd = sample_std(&pooled);
    Ok(step_rewards
        .iter()
        .map(|steps| {
            let mut acc = T::zero();
            let mut out: Vec<T> = steps
                .iter()
                .rev()
                .map(|&r| {
                    acc += (r - m) / (sd + eps);
                    acc
                })
                .collect();
            out.reverse();
            out
        })
        .collect())
}

/// `δ_t = r_t + γ (1 − done_t) V_{t+1} − V_t`, with `V_{L} = 0`.
pub fn td_residual<T: Scalar>(
    rewards: &Array2<T>,
    values: &Array2<T>,
    done: &Array2<bool>,
    gamma: T,
) -> Result<Array2<T>> {
    check_shape("values", rewards, values)?;
    check_shape("done", rewards, done)?;
    check_unit("gamma", gamma)?;
    let (b, l) = rewards.dim();
    let mut out = Array2::zeros((b, l));
    for i in 0..b {
        for t in 0..l {
            let next = if t + 1 < l { values[(i, t + 1)] } else { T::zero() };
            let not_done = T::one() - indicator::<T>(done[(i, t)]);
            out[(i, t)] = rewards[(i, t)] + gamma * not_done * next - values[(i, t)];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaeOutput<T> {
    pub advantages: Array2<T>,
    /// `advantages + values`, the regression targets for the critic.
    pub targets: Array2<T>,
}

/// Generalized advantage estimation by the backward recursion with resets at
/// terminal tokens.
pub fn gae<T: Scalar>(
    rewards: &Array2<T>,
    values: &Array2<T>,
    done: &Array2<bool>,
    gamma: T,
    lam: T,
) -> Result<GaeOutput<T>> {
    check_shape("values", rewards, values)?;
    check_shape("done", rewards, done)?;
    check_unit("gamma", gamma)?;
    check_unit("lam", lam)?;
    let (b, l) = rewards.dim();
    let mut adv = Array2::zeros((b, l));
    for i in 0..b {
        let mut next_v = T::zero();
        let mut acc = T::zero();
        for t in (0..l).rev() {
            let not_done = T::one() - indicator::<T>(done[(i, t)]);
            let delta = rewards[(i, t)] + gamma * not_done * next_v - values[(i, t)];
            acc = delta + gamma * lam * not_done * acc;
            adv[(i, t)] = acc;
            next_v = values[(i, t)];
        }
    }
    let targets = &adv + values;
    Ok(GaeOutput {
        advantages: adv,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueLoss<T> {
    pub loss: T,
    /// `targets − values`, for the policy loss.
    pub advantages: Array2<T>,
    /// `∂loss / ∂values`.
    pub grad: Array2<T>,
    /// Fraction of masked tokens where the clipped branch is strictly larger.
    pub clip_fraction: T,
}

/// `0.5 · max((v − y)², (clip(v, v_old ± eps_v) − y)²)`, masked mean per row
/// then mean over rows. `eps_v = None` disables clipping.
pub fn value_loss<T: Scalar>(
    values: &Array2<T>,
    old_values: &Array2<T>,
    targets: &Array2<T>,
    completion_mask: &Array2<bool>,
    eps_v: Option<T>,
) -> Result<ValueLoss<T>> {
    check_shape("old_values", values, old_values)?;
    check_shape("targets", values, targets)?;
    check_shape("completion_mask", values, completion_mask)?;
    let (b, l) = values.dim();
    if b == 0 {
        return Err(Error::invalid("value_loss: empty batch"));
    }
    let half: T = lit(0.5);
    let rows = T::from_usize(b).unwrap();
    let mut loss = T::zero();
    let mut grad = Array2::zeros((b, l));
    let (mut clipped, mut counted) = (0usize, 0usize);
    for i in 0..b {
        let n = (0..l).filter(|&t| completion_mask[(i, t)]).count().max(1);
        let denom = T::from_usize(n).unwrap();
        let mut row = T::zero();
        for t in 0..l {
            if !completion_mask[(i, t)] {
                continue;
            }
            let (v, y) = (values[(i, t)], targets[(i, t)]);
            let unclipped = half * (v - y) * (v - y);
            let (vc, d_vc) = match eps_v {
                Some(e) => {
                    let lo = old_values[(i, t)] - e;
                    let hi = old_values[(i, t)] + e;
                    if v < lo {
                        (lo, T::zero())
                    } else if v > hi {
                        (hi, T::zero())
                    } else {
                        (v, T::one())
                    }
                }
                None => (v, T::one()),
            };
            let clipped_l = half * (vc - y) * (vc - y);
            counted += 1;
            let d = if clipped_l > unclipped {
                clipped += 1;
                row += clipped_l;
                (vc - y) * d_vc
            } else {
                row += unclipped;
                v - y
            };
            grad[(i, t)] = d / (denom * rows);
        }
        loss += row / denom;
    }
    let advantages = targets - values;
    Ok(ValueLoss {
        loss: loss / rows,
        advantages,
        grad,
        clip_fraction: T::from_usize(clipped).unwrap() / T::from_usize(counted.max(1)).unwrap(),
    })
}

/// Zero out entries where the mask is false.
pub fn apply_mask<T: Scalar>(x: &mut Array2<T>, mask: &Array2<bool>) {
    Zip::from(x).and(mask).for_each(|v, &m| {
        if !m {
            *v = T::zero();
        }
    });
}
