//! Rejection sampling and best-of-N.
//!
//! Indices are 0-based throughout. Ties go to the lowest index.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{BigramPolicy, Token, TokenSequence};
use crate::rng::Seed;
use crate::scalar::Scalar;
use crate::sft::{nll_loss, LossMask, MaskStrategy, Message, Role, SftRecord};

/// `completions[i][j]` is the j-th sample for `prompts[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionMatrix {
    pub prompts: Vec<Vec<Token>>,
    pub completions: Vec<Vec<TokenSequence>>,
}

impl CompletionMatrix {
    pub fn rows(&self) -> usize {
        self.prompts.len()
    }

    pub fn cols(&self) -> usize {
        self.completions.first().map_or(0, Vec::len)
    }

    pub fn get(&self, row: usize, col: usize) -> &TokenSequence {
        &self.completions[row][col]
    }
}

/// Independent samples for each (prompt, column) cell, each with its own
/// derived seed.
pub fn generate_matrix<T: Scalar>(
    policy: &BigramPolicy<T>,
    prompts: &[Vec<Token>],
    n: usize,
    temperature: T,
    max_len: usize,
    seed: Seed,
) -> Result<CompletionMatrix> {
    if n == 0 {
        return Err(Error::invalid("need at least one completion per prompt"));
    }
    let cells = seed.derive("completion-matrix");
    let mut completions = Vec::with_capacity(prompts.len());
    for (i, prompt) in prompts.iter().enumerate() {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            row.push(policy.sample_completion(
                prompt,
                temperature,
                max_len,
                cells.index(flat_index(i, j, n) as u64),
            )?);
        }
        completions.push(row);
    }
    Ok(CompletionMatrix {
        prompts: prompts.to_vec(),
        completions,
    })
}

/// Reward of every cell.
pub fn score_matrix<T: Scalar>(matrix: &CompletionMatrix, score: impl Fn(&TokenSequence) -> T) -> Array2<T> {
    Array2::from_shape_fn((matrix.rows(), matrix.cols()), |(i, j)| score(matrix.get(i, j)))
}

pub fn flat_index(row: usize, col: usize, n_cols: usize) -> usize {
    row * n_cols + col
}

pub fn unflatten(k: usize, n_cols: usize) -> (usize, usize) {
    (k / n_cols, k % n_cols)
}

fn argmax_lowest<T: Scalar>(xs: impl IntoIterator<Item = T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in xs.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Column of the largest reward in each row.
pub fn select_top_per_prompt<T: Scalar>(rewards: &Array2<T>) -> Result<Vec<usize>> {
    if rewards.ncols() == 0 {
        return Err(Error::invalid("reward matrix has no columns"));
    }
    Ok(rewards
        .rows()
        .into_iter()
        .map(|r| argmax_lowest(r.iter().copied()).unwrap())
        .collect())
}

/// The `k` largest cells of the row-major flattening, largest first; equal
/// values in ascending flat order.
pub fn select_top_k_overall<T: Scalar>(rewards: &Array2<T>, k: usize) -> Result<Vec<(usize, usize)>> {
    let total = rewards.len();
    if k > total {
        return Err(Error::invalid(format!("k = {k} exceeds the {total} cells")));
    }
    let n = rewards.ncols();
    let flat: Vec<T> = rewards.iter().copied().collect();
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| {
        flat[b]
            .partial_cmp(&flat[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order[..k].iter().map(|&f| unflatten(f, n)).collect())
}

/// Index of the best of `n` candidate rewards.
pub fn best_of_n<T: Scalar>(rewards: &[T]) -> Result<usize> {
    argmax_lowest(rewards.iter().copied()).ok_or_else(|| Error::invalid("best_of_n needs at least one candidate"))
}

/// Drops repeated sequences, keeping the first occurrence.
pub fn dedup_selected(selected: &[TokenSequence]) -> Vec<TokenSequence> {
    let mut seen = HashSet::new();
    selected.iter().filter(|s| seen.insert((*s).clone())).cloned().collect()
}

/// Gradient descent on the mean prompt-masked NLL of the selected
/// sequences, one full-batch step per epoch. Returns the updated policy and
/// the loss before each step.
pub fn finetune_on_selected<T: Scalar>(
    policy: &BigramPolicy<T>,
    selected: &[TokenSequence],
    epochs: usize,
    lr: T,
) -> Result<(BigramPolicy<T>, Vec<T>)> {
    if selected.is_empty() {
        return Err(Error::invalid("nothing selected to fine-tune on"));
    }
    let examples: Vec<(Vec<Token>, LossMask)> = selected
        .iter()
        .map(|s| {
            let full = s.full_tokens();
            let mask = LossMask::completion_only(s.prompt.len(), full.len());
            (full, mask)
        })
        .collect();
    let inv = T::one() / T::from_usize(examples.len()).unwrap();
    let mut out = policy.clone();
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut loss = T::zero();
        let mut grad = vec![T::zero(); out.num_params()];
        for (tokens, mask) in &examples {
            let (l, g) = nll_loss(&out, tokens, mask)?;
            loss += l * inv;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b * inv;
            }
        }
        out.descend(&grad, lr);
        trace.push(loss);
    }
    Ok((out, trace))
}

/// A selected completion as an SFT line with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRecord {
    #[serde(flatten)]
    pub record: SftRecord,
    pub source_row: usize,
    pub source_col: usize,
    pub reward: f64,
}

impl SelectedRecord {
    pub fn new(seq: &TokenSequence, row: usize, col: usize, reward: f64) -> Self {
        SelectedRecord {
            record: SftRecord {
                messages: vec![
                    Message::new(Role::User, seq.prompt.clone()),
                    Message::new(Role::Assistant, seq.completion.clone()),
                ],
                strategy: MaskStrategy::FinalTurnOnly,
            },
            source_row: row,
            source_col: col,
            reward,
        }
    }
}
