//! Scalar and vector math shared by every loss: the softmax family, KL
//! divergence with its Monte-Carlo estimators, masked whitening and the
//! central-difference gradient oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Denominator guard for whitening and group-normalized advantages.
pub const STD_EPS: f64 = 1e-4;

fn ensure_finite<T: Scalar>(xs: &[T], what: &str) -> Result<()> {
    if let Some(i) = xs.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what}: non-finite entry at index {i}")));
    }
    Ok(())
}

/// `log Σ exp(x)` with max subtraction.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::invalid("log_softmax: empty logits"));
    }
    ensure_finite(logits, "log_softmax")?;
    let lse = logsumexp(logits);
    Ok(logits.iter().map(|&x| x - lse).collect())
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    Ok(log_softmax(logits)?.into_iter().map(T::exp).collect())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)`, stable for large |x|.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    -softplus(-x)
}

/// `log(1 + e^x)`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    let n = T::from_usize(xs.len()).unwrap();
    xs.iter().copied().sum::<T>() / n
}

/// Sample standard deviation (n − 1 denominator). Zero for fewer than two values.
pub fn sample_std<T: Scalar>(xs: &[T]) -> T {
    if xs.len() < 2 {
        return T::zero();
    }
    let m = mean(xs);
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / T::from_usize(xs.len() - 1).unwrap()).sqrt()
}

/// Population standard deviation (n denominator).
pub fn population_std<T: Scalar>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::zero();
    }
    let m = mean(xs);
    let ss: T = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / T::from_usize(xs.len()).unwrap()).sqrt()
}

/// A categorical distribution over a finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<T>(Vec<T>);

impl<T: Scalar> ProbVector<T> {
    pub fn new(entries: Vec<T>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if let Some(i) = entries.iter().position(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::invalid(format!(
                "probability entry {i} is negative or non-finite"
            )));
        }
        let total: T = entries.iter().copied().sum();
        if (total - T::one()).abs() > T::sum_tolerance(entries.len()) {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(ProbVector(entries))
    }

    pub fn from_logits(logits: &[T]) -> Result<Self> {
        Ok(ProbVector(softmax(logits)?))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// `Σ p log(p/q)` with `0 · log(0/q) = 0`.
pub fn kl_categorical<T: Scalar>(p: &ProbVector<T>, q: &ProbVector<T>) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "kl_categorical: support sizes differ ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let mut acc = T::zero();
    for (i, (&pi, &qi)) in p.0.iter().zip(q.0.iter()).enumerate() {
        if pi == T::zero() {
            continue;
        }
        if qi == T::zero() {
            return Err(Error::InfiniteDivergence { index: i });
        }
        acc += pi * (pi.ln() - qi.ln());
    }
    // Rounding can leave a tiny negative value when p ≈ q.
    Ok(acc.max(T::zero()))
}

/// Sample-based KL estimators for `KL(p‖q)` from draws `x ~ p`, written in
/// terms of the log-ratio `lr = log p(x) − log q(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlEstimator {
    /// `lr`; unbiased, can be negative per sample.
    #[default]
    K1,
    /// `lr² / 2`.
    K2,
    /// `e^{−lr} − 1 + lr`; unbiased and non-negative.
    K3,
}

impl KlEstimator {
    #[inline]
    pub fn pointwise<T: Scalar>(self, lr: T) -> T {
        match self {
            KlEstimator::K1 => lr,
            KlEstimator::K2 => lr * lr / lit(2.0),
            KlEstimator::K3 => (-lr).exp() - T::one() + lr,
        }
    }

    /// Derivative of [`pointwise`](Self::pointwise) with respect to `log p`
    /// (the sampled-from model), holding `log q` fixed.
    #[inline]
    pub fn d_log_p<T: Scalar>(self, lr: T) -> T {
        match self {
            KlEstimator::K1 => T::one(),
            KlEstimator::K2 => lr,
            KlEstimator::K3 => T::one() - (-lr).exp(),
        }
    }
}

pub fn kl_mc_estimate<T: Scalar>(log_ratios: &[T], variant: KlEstimator) -> Result<T> {
    if log_ratios.is_empty() {
        return Err(Error::invalid("kl_mc_estimate: empty sample"));
    }
    let total: T = log_ratios.iter().map(|&lr| variant.pointwise(lr)).sum();
    Ok(total / T::from_usize(log_ratios.len()).unwrap())
}

/// Standardizes the masked entries to zero mean and unit sample standard
/// deviation; unmasked entries come back as zero. If the masked standard
/// deviation is at or below [`STD_EPS`] the masked entries are zeroed.
pub fn whiten<T: Scalar>(values: &[T], mask: &[bool]) -> Result<Vec<T>> {
    if values.len() != mask.len() {
        return Err(Error::invalid(format!(
            "whiten: {} values but {} mask flags",
            values.len(),
            mask.len()
        )));
    }
    let kept: Vec<T> = values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if kept.len() < 2 {
        return Err(Error::invalid("whiten: mask selects fewer than 2 entries"));
    }
    let mu = mean(&kept);
    let sd = sample_std(&kept);
    let guard = sd <= lit(STD_EPS);
    Ok(values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if !m || guard { T::zero() } else { (v - mu) / sd })
        .collect())
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn finite_diff_grad<T, F>(f: F, x: &[T], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
{
    if !(h > T::zero()) {
        return Err(Error::invalid("finite_diff_grad: step must be positive"));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!(
                "objective is non-finite around coordinate {i}"
            )));
        }
        grad.push((up - down) / (h + h));
    }
    Ok(grad)
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error<T: Scalar>(a: &[T], b: &[T], floor: T) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(T::zero(), T::max)
}
