//! Linear reward models and their training losses: Bradley-Terry in both
//! algebraic forms, the margin and per-prompt weighted variants,
//! Plackett-Luce rankings, outcome (per-token BCE) and process (per-step
//! 3-class) heads, plus inference-time aggregation of per-token scores.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::PreferenceRecord;
use crate::error::{Error, Result};
use crate::numerics::{log_sigmoid, logsumexp, sigmoid, softmax, softplus};
use crate::policy::Token;
use crate::scalar::Scalar;

/// Label value meaning "no loss at this position".
pub const IGNORE_INDEX: i64 = -100;

/// Which features a reward model reads from a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub vocab_size: usize,
    #[serde(default = "yes")]
    pub token_counts: bool,
    /// Transition counts, including the step from the last prompt token.
    #[serde(default)]
    pub bigram_counts: bool,
    /// Number of adjacent positions holding the same token.
    #[serde(default)]
    pub repeat_count: bool,
    #[serde(default)]
    pub length: bool,
    #[serde(default)]
    pub bias: bool,
}

fn yes() -> bool {
    true
}

impl FeatureSpec {
    /// Per-token counts only.
    pub fn counts(vocab_size: usize) -> Self {
        FeatureSpec {
            vocab_size,
            token_counts: true,
            bigram_counts: false,
            repeat_count: false,
            length: false,
            bias: false,
        }
    }

    pub fn dim(&self) -> usize {
        let v = self.vocab_size;
        let mut d = 0;
        if self.token_counts {
            d += v;
        }
        if self.bigram_counts {
            d += v * v;
        }
        d + self.repeat_count as usize + self.length as usize + self.bias as usize
    }

    pub fn features<T: Scalar>(&self, prompt: &[Token], completion: &[Token]) -> Vec<T> {
        let v = self.vocab_size;
        let mut f = Vec::with_capacity(self.dim());
        if self.token_counts {
            let mut c = vec![T::zero(); v];
            for &t in completion {
                c[t as usize] += T::one();
            }
            f.extend(c);
        }
        let mut prev = prompt.last().copied();
        let mut bigrams = vec![T::zero(); if self.bigram_counts { v * v } else { 0 }];
        let mut repeats = T::zero();
        for &t in completion {
            if let Some(p) = prev {
                if self.bigram_counts {
                    bigrams[p as usize * v + t as usize] += T::one();
                }
                if p == t {
                    repeats += T::one();
                }
            }
            prev = Some(t);
        }
        f.extend(bigrams);
        if self.repeat_count {
            f.push(repeats);
        }
        if self.length {
            f.push(T::from_usize(completion.len()).unwrap());
        }
        if self.bias {
            f.push(T::one());
        }
        f
    }

    /// One feature row per position: the features of `tokens[..=t]`.
    pub fn prefix_features<T: Scalar>(&self, tokens: &[Token]) -> Vec<Vec<T>> {
        (0..tokens.len()).map(|t| self.features(&[], &tokens[..=t])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One logit per (prompt, completion).
    Sequence,
    /// One correctness logit per token prefix.
    Outcome,
    /// Three class logits (−1, 0, +1) per step boundary.
    Process,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Process => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRewardModel<T> {
    pub head_kind: HeadKind,
    pub feature_spec: FeatureSpec,
    pub weights: Vec<T>,
}

/// A loss value and its gradient with respect to the model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl<T: Scalar> LinearRewardModel<T> {
    pub fn zeros(head_kind: HeadKind, feature_spec: FeatureSpec) -> Self {
        LinearRewardModel {
            head_kind,
            feature_spec,
            weights: vec![T::zero(); feature_spec.dim() * head_kind.outputs()],
        }
    }

    pub fn new(head_kind: HeadKind, feature_spec: FeatureSpec, weights: Vec<T>) -> Result<Self> {
        let rm = LinearRewardModel {
            head_kind,
            feature_spec,
            weights,
        };
        rm.validate()?;
        Ok(rm)
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.feature_spec.dim() * self.head_kind.outputs();
        if self.weights.len() != want {
            return Err(Error::validation(
                "weights",
                format!("expected {want} weights, got {}", self.weights.len()),
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::validation("weights", "non-finite weight"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.feature_spec.dim()
    }

    fn require(&self, kind: HeadKind) -> Result<()> {
        if self.head_kind != kind {
            return Err(Error::invalid(format!(
                "operation needs a {kind:?} head, model has {:?}",
                self.head_kind
            )));
        }
        Ok(())
    }

    /// The reward logit `r(y | x)`.
    pub fn score(&self, prompt: &[Token], completion: &[Token]) -> Result<T> {
        self.require(HeadKind::Sequence)?;
        Ok(dot(&self.weights, &self.feature_spec.features::<T>(prompt, completion)))
    }

    /// Per-prefix correctness probabilities from an outcome head.
    pub fn outcome_probs(&self, tokens: &[Token]) -> Result<Vec<T>> {
        self.require(HeadKind::Outcome)?;
        Ok(self
            .feature_spec
            .prefix_features::<T>(tokens)
            .iter()
            .map(|f| sigmoid(dot(&self.weights, f)))
            .collect())
    }

    /// `θ ← θ − lr · grad`.
    pub fn descend(&mut self, grad: &[T], lr: T) {
        axpy(-lr, grad, &mut self.weights);
    }
}

/// `P(i ≻ j) = σ(r_i − r_j)`.
pub fn preference_probability<T: Scalar>(r_i: T, r_j: T) -> T {
    sigmoid(r_i - r_j)
}

/// Algebraic form of the pairwise loss. Both give the same value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BtForm {
    /// `−log σ(r_c − r_r)`
    #[default]
    Sigmoid,
    /// `log(1 + exp(r_r − r_c))`
    LogExp,
}

/// How comparisons from prompts with K completions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairNormalization {
    /// Each pair weighted 1/C(K,2) inside its prompt, then prompts averaged.
    #[default]
    WithinPrompt,
    /// Plain mean over every pair in the batch.
    GlobalPairs,
}

struct Pair<T> {
    diff: Vec<T>,
    margin: T,
    weight: T,
}

fn pair_loss<T: Scalar>(rm: &LinearRewardModel<T>, pairs: &[Pair<T>], form: BtForm) -> LossGrad<T> {
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); rm.weights.len()];
    for p in pairs {
        let z = dot(&rm.weights, &p.diff) - p.margin;
        let l = match form {
            BtForm::Sigmoid => -log_sigmoid(z),
            BtForm::LogExp => softplus(-z),
        };
        loss += p.weight * l;
        // d/dz −log σ(z) = −σ(−z)
        axpy(-p.weight * sigmoid(-z), &p.diff, &mut grad);
    }
    LossGrad { loss, grad }
}

fn record_pair<T: Scalar>(rm: &LinearRewardModel<T>, r: &PreferenceRecord, margin: T, weight: T) -> Pair<T> {
    let fc = rm.feature_spec.features::<T>(&r.prompt, &r.chosen);
    let fr = rm.feature_spec.features::<T>(&r.prompt, &r.rejected);
    Pair {
        diff: fc.iter().zip(&fr).map(|(&a, &b)| a - b).collect(),
        margin,
        weight,
    }
}

fn batch_weight<T: Scalar>(n: usize) -> Result<T> {
    if n == 0 {
        return Err(Error::invalid("empty preference batch"));
    }
    Ok(T::one() / T::from_usize(n).unwrap())
}

/// Mean Bradley-Terry loss `−log σ(r(y_c|x) − r(y_r|x))` over the batch.
pub fn bt_loss<T: Scalar>(rm: &LinearRewardModel<T>, batch: &[PreferenceRecord], form: BtForm) -> Result<LossGrad<T>> {
    rm.require(HeadKind::Sequence)?;
    let w = batch_weight(batch.len())?;
    let pairs: Vec<_> = batch.iter().map(|r| record_pair(rm, r, T::zero(), w)).collect();
    Ok(pair_loss(rm, &pairs, form))
}

/// Mean of `−log σ(Δr − m)` with one margin per record.
pub fn bt_margin_loss<T: Scalar>(
    rm: &LinearRewardModel<T>,
    batch: &[PreferenceRecord],
    margins: &[T],
) -> Result<LossGrad<T>> {
    rm.require(HeadKind::Sequence)?;
    if margins.len() != batch.len() {
        return Err(Error::invalid(format!(
            "{} margins for {} records",
            margins.len(),
            batch.len()
        )));
    }
    if margins.iter().any(|m| !m.is_finite()) {
        return Err(Error::invalid("non-finite margin"));
    }
    let w = batch_weight(batch.len())?;
    let pairs: Vec<_> = batch
        .iter()
        .zip(margins)
        .map(|(r, &m)| record_pair(rm, r, m, w))
        .collect();
    Ok(pair_loss(rm, &pairs, BtForm::Sigmoid))
}

/// Margin loss with margins taken from the records' ratings.
pub fn bt_margin_loss_from_ratings<T: Scalar>(
    rm: &LinearRewardModel<T>,
    batch: &[PreferenceRecord],
) -> Result<LossGrad<T>> {
    let margins: Vec<T> = batch.iter().map(PreferenceRecord::margin).collect();
    bt_margin_loss(rm, batch, &margins)
}

/// All pairwise comparisons among K completions of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    pub k: usize,
    pub pairs: Vec<PreferenceRecord>,
}

impl PromptGroup {
    pub fn num_pairs(&self) -> usize {
        self.k * self.k.saturating_sub(1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::validation("k", "a prompt group needs at least 2 completions"));
        }
        let mut completions: HashSet<&[Token]> = HashSet::new();
        let mut seen: HashSet<(&[Token], &[Token])> = HashSet::new();
        for r in &self.pairs {
            if r.prompt != self.pairs[0].prompt {
                return Err(Error::validation("pairs", "records in a group must share a prompt"));
            }
            let (a, b) = if r.chosen <= r.rejected {
                (&r.chosen[..], &r.rejected[..])
            } else {
                (&r.rejected[..], &r.chosen[..])
            };
            if a == b || !seen.insert((a, b)) {
                return Err(Error::validation("pairs", "repeated or degenerate comparison"));
            }
            completions.insert(a);
            completions.insert(b);
        }
        if completions.len() != self.k || self.pairs.len() != self.num_pairs() {
            return Err(Error::validation(
                "pairs",
                format!(
                    "expected all {} pairs over {} completions, got {} pairs over {}",
                    self.num_pairs(),
                    self.k,
                    self.pairs.len(),
                    completions.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Bradley-Terry loss with per-prompt comparison weighting.
pub fn bt_weighted_loss<T: Scalar>(
    rm: &LinearRewardModel<T>,
    groups: &[PromptGroup],
    normalization: PairNormalization,
) -> Result<LossGrad<T>> {
    rm.require(HeadKind::Sequence)?;
    if groups.is_empty() {
        return Err(Error::invalid("empty preference batch"));
    }
    for g in groups {
        g.validate()?;
    }
    let total_pairs: usize = groups.iter().map(|g| g.pairs.len()).sum();
    let mut pairs = Vec::with_capacity(total_pairs);
    for g in groups {
        let w = match normalization {
            PairNormalization::WithinPrompt => T::one() / T::from_usize(g.num_pairs() * groups.len()).unwrap(),
            PairNormalization::GlobalPairs => T::one() / T::from_usize(total_pairs).unwrap(),
        };
        pairs.extend(g.pairs.iter().map(|r| record_pair(rm, r, T::zero(), w)));
    }
    Ok(pair_loss(rm, &pairs, BtForm::Sigmoid))
}

/// K completions of one prompt with a full ranking; `ranking[0]` indexes the
/// most preferred completion.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedGroup {
    pub prompt: Vec<Token>,
    pub completions: Vec<Vec<Token>>,
    pub ranking: Vec<usize>,
}

/// `−log Π_k exp(r_σ(k)) / Σ_{j≥k} exp(r_σ(j))` and its gradient.
pub fn plackett_luce_loss<T: Scalar>(rm: &LinearRewardModel<T>, group: &RankedGroup) -> Result<LossGrad<T>> {
    rm.require(HeadKind::Sequence)?;
    let k = group.completions.len();
    if k < 2 {
        return Err(Error::invalid("plackett_luce_loss needs K >= 2"));
    }
    let mut sorted = group.ranking.clone();
    sorted.sort_unstable();
    if group.ranking.len() != k || sorted.iter().enumerate().any(|(i, &s)| i != s) {
        return Err(Error::invalid("ranking is not a permutation of the completions"));
    }
    let feats: Vec<Vec<T>> = group
        .ranking
        .iter()
        .map(|&i| rm.feature_spec.features(&group.prompt, &group.completions[i]))
        .collect();
    let scores: Vec<T> = feats.iter().map(|f| dot(&rm.weights, f)).collect();
    let mut d_scores = vec![T::zero(); k];
    let mut loss = T::zero();
    // The final stage has a single candidate and contributes nothing.
    for stage in 0..k - 1 {
        let tail = &scores[stage..];
        loss += logsumexp(tail) - scores[stage];
        let p = softmax(tail)?;
        for (j, pj) in p.into_iter().enumerate() {
            d_scores[stage + j] += pj;
        }
        d_scores[stage] -= T::one();
    }
    let mut grad = vec![T::zero(); rm.weights.len()];
    for (f, &d) in feats.iter().zip(&d_scores) {
        axpy(d, f, &mut grad);
    }
    Ok(LossGrad { loss, grad })
}

/// Binary cross-entropy of per-row logits `w · f` against 0/1 labels;
/// [`IGNORE_INDEX`] rows are skipped. Mean over labeled rows.
pub fn orm_loss_from_features<T: Scalar>(weights: &[T], rows: &[Vec<T>], labels: &[i64]) -> Result<LossGrad<T>> {
    if rows.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); weights.len()];
    let mut n = 0usize;
    for (f, &y) in rows.iter().zip(labels) {
        if y == IGNORE_INDEX {
            continue;
        }
        if y != 0 && y != 1 {
            return Err(Error::invalid(format!(
                "outcome label {y} not in {{0, 1, {IGNORE_INDEX}}}"
            )));
        }
        let z = dot(weights, f);
        let yt = T::from_i64(y).unwrap();
        loss += softplus(z) - yt * z;
        axpy(sigmoid(z) - yt, f, &mut grad);
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("orm_loss: every position is ignored"));
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossGrad { loss: loss * inv, grad })
}

/// Outcome-head loss on a token stream with one label per position.
pub fn orm_loss<T: Scalar>(rm: &LinearRewardModel<T>, tokens: &[Token], labels: &[i64]) -> Result<LossGrad<T>> {
    rm.require(HeadKind::Outcome)?;
    orm_loss_from_features(&rm.weights, &rm.feature_spec.prefix_features(tokens), labels)
}

/// Maps a step label to its class index: −1 → 0, 0 → 1, +1 → 2.
pub fn prm_class(label: i64) -> Option<usize> {
    match label {
        -1 => Some(0),
        0 => Some(1),
        1 => Some(2),
        _ => None,
    }
}

/// 3-class cross-entropy at labeled (step-boundary) rows. Weights are three
/// stacked blocks of length D, one per class. Mean over boundaries.
pub fn prm_loss_from_features<T: Scalar>(weights: &[T], rows: &[Vec<T>], labels: &[i64]) -> Result<LossGrad<T>> {
    if rows.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let d = weights.len() / 3;
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); weights.len()];
    let mut n = 0usize;
    for (f, &y) in rows.iter().zip(labels) {
        if y == IGNORE_INDEX {
            continue;
        }
        let class = prm_class(y).ok_or_else(|| Error::invalid(format!("step label {y} not in {{-1, 0, 1}}")))?;
        let logits: Vec<T> = (0..3).map(|c| dot(&weights[c * d..(c + 1) * d], f)).collect();
        loss += logsumexp(&logits) - logits[class];
        let mut p = softmax(&logits)?;
        p[class] -= T::one();
        for (c, pc) in p.into_iter().enumerate() {
            axpy(pc, f, &mut grad[c * d..(c + 1) * d]);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("prm_loss: no step boundaries"));
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(LossGrad { loss: loss * inv, grad })
}

/// Process-head loss on a token stream; label [`IGNORE_INDEX`] marks
/// positions that are not step boundaries.
pub fn prm_loss<T: Scalar>(rm: &LinearRewardModel<T>, tokens: &[Token], step_labels: &[i64]) -> Result<LossGrad<T>> {
    rm.require(HeadKind::Process)?;
    prm_loss_from_features(&rm.weights, &rm.feature_spec.prefix_features(tokens), step_labels)
}

/// Ways to collapse per-token correctness probabilities into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenAggregation {
    Mean,
    Min,
    /// Log of the product.
    SumLog,
    /// Mean of the final `m` positions.
    LastM(usize),
}

pub fn aggregate_token_scores<T: Scalar>(probs: &[T], method: TokenAggregation) -> Result<T> {
    if probs.is_empty() {
        return Err(Error::invalid("aggregate_token_scores: no positions"));
    }
    if probs.iter().any(|&p| !(p > T::zero() && p <= T::one())) {
        return Err(Error::invalid(
            "aggregate_token_scores: probabilities must lie in (0, 1]",
        ));
    }
    let n = probs.len();
    Ok(match method {
        TokenAggregation::Mean => crate::numerics::mean(probs),
        TokenAggregation::Min => probs.iter().copied().fold(T::infinity(), T::min),
        TokenAggregation::SumLog => probs.iter().map(|p| p.ln()).sum(),
        TokenAggregation::LastM(m) => {
            if m == 0 {
                return Err(Error::invalid("last_m needs m >= 1"));
            }
            crate::numerics::mean(&probs[n.saturating_sub(m)..])
        }
    })
}

/// Minibatch gradient descent on the Bradley-Terry loss, records visited in
/// order. Returns the loss of every step.
pub fn train_bt<T: Scalar>(
    rm: &mut LinearRewardModel<T>,
    records: &[PreferenceRecord],
    lr: T,
    epochs: usize,
    batch_size: usize,
) -> Result<Vec<T>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size", "must be at least 1"));
    }
    let mut history = Vec::new();
    for _ in 0..epochs {
        for chunk in records.chunks(batch_size) {
            let lg = bt_loss(rm, chunk, BtForm::Sigmoid)?;
            rm.descend(&lg.grad, lr);
            history.push(lg.loss);
        }
    }
    Ok(history)
}

/// Fraction of records where the chosen completion scores strictly higher.
pub fn pairwise_accuracy<T: Scalar>(rm: &LinearRewardModel<T>, records: &[PreferenceRecord]) -> Result<T> {
    let mut hits = 0usize;
    for r in records {
        if rm.score(&r.prompt, &r.chosen)? > rm.score(&r.prompt, &r.rejected)? {
            hits += 1;
        }
    }
    Ok(T::from_usize(hits).unwrap() / T::from_usize(records.len().max(1)).unwrap())
}

/// Kendall's τ-b between two score lists over the same items.
pub fn kendall_tau_b<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "kendall_tau_b needs two equal-length lists of at least 2",
        ));
    }
    let (mut conc, mut disc, mut tie_a, mut tie_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i].partial_cmp(&a[j]).unwrap();
            let db = b[i].partial_cmp(&b[j]).unwrap();
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {}
                (Equal, _) => tie_a += 1,
                (_, Equal) => tie_b += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let n1 = (conc + disc + tie_a) as f64;
    let n2 = (conc + disc + tie_b) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::invalid("kendall_tau_b undefined: a list is constant"));
    }
    Ok(T::lit((conc - disc) as f64 / (n1 * n2).sqrt()))
}
