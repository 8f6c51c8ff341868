//! A bigram softmax language model small enough to enumerate.
//!
//! Parameters are laid out as one flat vector: the begin-of-sequence row
//! (`init_logits`, length V) followed by the V×V transition matrix in
//! row-major order, row = previous token. The next-token distribution
//! depends only on the previous token, so every sequence probability,
//! expectation and partition function over completions up to a modest
//! length is exactly computable.

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, logsumexp, softmax};
use crate::rng::Seed;
use crate::scalar::{lit, Scalar};

pub type Token = u32;

/// Upper bound on `V^max_len` for exhaustive enumeration.
pub const ENUMERATION_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: Token,
    pad: Token,
}

impl Vocab {
    pub fn new(size: usize, eos: Token, pad: Token) -> Result<Self> {
        if !(2..=64).contains(&size) {
            return Err(Error::validation("vocab_size", format!("{size} not in [2, 64]")));
        }
        if eos as usize >= size {
            return Err(Error::validation("eos_id", format!("{eos} >= vocab size {size}")));
        }
        if pad as usize >= size {
            return Err(Error::validation("pad_id", format!("{pad} >= vocab size {size}")));
        }
        if eos == pad {
            return Err(Error::validation("pad_id", "must differ from eos_id"));
        }
        Ok(Vocab { size, eos, pad })
    }

    pub fn size(&self) -> usize {
        self.size
    }
    pub fn eos(&self) -> Token {
        self.eos
    }
    pub fn pad(&self) -> Token {
        self.pad
    }
    pub fn contains(&self, t: Token) -> bool {
        (t as usize) < self.size
    }
}

/// A prompt and the completion generated after it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub prompt: Vec<Token>,
    pub completion: Vec<Token>,
}

impl TokenSequence {
    pub fn new(prompt: Vec<Token>, completion: Vec<Token>) -> Self {
        TokenSequence { prompt, completion }
    }

    /// Ends with EOS (as opposed to hitting the length cap).
    pub fn is_terminated(&self, eos: Token) -> bool {
        self.completion.last() == Some(&eos)
    }

    pub fn full_tokens(&self) -> Vec<Token> {
        let mut out = self.prompt.clone();
        out.extend_from_slice(&self.completion);
        out
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        for &t in self.prompt.iter().chain(&self.completion) {
            if !vocab.contains(t) {
                return Err(Error::invalid(format!(
                    "token {t} outside vocab of size {}",
                    vocab.size()
                )));
            }
        }
        if self.prompt.contains(&vocab.eos()) {
            return Err(Error::invalid("prompt contains eos"));
        }
        if let Some(i) = self.completion.iter().position(|&t| t == vocab.eos()) {
            if i + 1 != self.completion.len() {
                return Err(Error::invalid("eos before the end of the completion"));
            }
        }
        Ok(())
    }
}

/// Conditioning state for the next token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Context {
    Bos,
    After(Token),
}

impl Context {
    pub fn of_prefix(prefix: &[Token]) -> Self {
        prefix.last().map_or(Context::Bos, |&t| Context::After(t))
    }

    /// Row index in `0..=V`: 0 is the begin row, `t + 1` is the row after token `t`.
    pub fn row(self) -> usize {
        match self {
            Context::Bos => 0,
            Context::After(t) => t as usize + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogProb<T> {
    pub total: T,
    pub per_token: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramPolicy<T> {
    vocab: Vocab,
    params: Vec<T>,
}

/// On-disk layout of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument<T> {
    pub vocab_size: usize,
    pub eos_id: Token,
    pub pad_id: Token,
    pub init_logits: Vec<T>,
    pub trans_logits: Vec<Vec<T>>,
}

impl<T: Scalar> BigramPolicy<T> {
    /// All logits zero: every next-token distribution is uniform.
    pub fn uniform(vocab: Vocab) -> Self {
        let v = vocab.size();
        BigramPolicy {
            vocab,
            params: vec![T::zero(); v + v * v],
        }
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab: Vocab, scale: T, seed: Seed) -> Self {
        let mut rng = seed.rng();
        let mut p = Self::uniform(vocab);
        for x in &mut p.params {
            let u: f64 = rng.gen_range(-1.0..=1.0);
            *x = T::lit(u) * scale;
        }
        p
    }

    pub fn from_parts(vocab: Vocab, init_logits: Vec<T>, trans_logits: Vec<Vec<T>>) -> Result<Self> {
        let v = vocab.size();
        if init_logits.len() != v {
            return Err(Error::validation(
                "init_logits",
                format!("length {} != {v}", init_logits.len()),
            ));
        }
        if trans_logits.len() != v || trans_logits.iter().any(|r| r.len() != v) {
            return Err(Error::validation("trans_logits", format!("must be {v}x{v}")));
        }
        let mut params = init_logits;
        for row in trans_logits {
            params.extend(row);
        }
        Self::from_flat(vocab, params)
    }

    pub fn from_flat(vocab: Vocab, params: Vec<T>) -> Result<Self> {
        let v = vocab.size();
        if params.len() != v + v * v {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                v + v * v,
                params.len()
            )));
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite policy parameter"));
        }
        Ok(BigramPolicy { vocab, params })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Same vocabulary, different parameters.
    pub fn with_params(&self, params: &[T]) -> Self {
        assert_eq!(params.len(), self.params.len(), "parameter length mismatch");
        BigramPolicy {
            vocab: self.vocab,
            params: params.to_vec(),
        }
    }

    /// `θ ← θ − lr · grad`.
    pub fn descend(&mut self, grad: &[T], lr: T) {
        assert_eq!(grad.len(), self.params.len(), "gradient length mismatch");
        for (p, g) in self.params.iter_mut().zip(grad) {
            *p -= lr * *g;
        }
    }

    fn row_offset(&self, ctx: Context) -> usize {
        ctx.row() * self.vocab.size()
    }

    pub fn logits(&self, ctx: Context) -> &[T] {
        let o = self.row_offset(ctx);
        &self.params[o..o + self.vocab.size()]
    }

    pub fn log_probs(&self, ctx: Context) -> Vec<T> {
        log_softmax(self.logits(ctx)).expect("policy logits are finite")
    }

    pub fn probs(&self, ctx: Context) -> Vec<T> {
        softmax(self.logits(ctx)).expect("policy logits are finite")
    }

    pub fn token_logprob(&self, ctx: Context, token: Token) -> T {
        let row = self.logits(ctx);
        row[token as usize] - logsumexp(row)
    }

    /// Log-probability of the completion given the prompt, token by token.
    pub fn sequence_logprob(&self, seq: &TokenSequence) -> Result<SequenceLogProb<T>> {
        for &t in seq.prompt.iter().chain(&seq.completion) {
            if !self.vocab.contains(t) {
                return Err(Error::invalid(format!("token {t} outside vocab")));
            }
        }
        let mut ctx = Context::of_prefix(&seq.prompt);
        let mut per_token = Vec::with_capacity(seq.completion.len());
        for &t in &seq.completion {
            per_token.push(self.token_logprob(ctx, t));
            ctx = Context::After(t);
        }
        let total = per_token.iter().copied().sum();
        Ok(SequenceLogProb { total, per_token })
    }

    /// Log-probability of a whole token stream scored from the begin row.
    pub fn stream_logprob(&self, tokens: &[Token]) -> Result<SequenceLogProb<T>> {
        self.sequence_logprob(&TokenSequence::new(Vec::new(), tokens.to_vec()))
    }

    /// `grad += weight · ∇θ log π(token | ctx)`.
    pub fn accumulate_token_grad(&self, ctx: Context, token: Token, weight: T, grad: &mut [T]) {
        if weight == T::zero() {
            return;
        }
        let o = self.row_offset(ctx);
        let probs = self.probs(ctx);
        for (g, p) in grad[o..o + self.vocab.size()].iter_mut().zip(probs) {
            *g -= weight * p;
        }
        grad[o + token as usize] += weight;
    }

    /// `grad += Σ_t weights[t] · ∇θ log π(y_t | ·)` over completion tokens.
    pub fn accumulate_sequence_grad(&self, seq: &TokenSequence, weights: &[T], grad: &mut [T]) {
        let mut ctx = Context::of_prefix(&seq.prompt);
        for (&t, &w) in seq.completion.iter().zip(weights) {
            self.accumulate_token_grad(ctx, t, w, grad);
            ctx = Context::After(t);
        }
    }

    /// Gradient of the completion log-probability.
    pub fn sequence_logprob_grad(&self, seq: &TokenSequence) -> Vec<T> {
        let mut grad = vec![T::zero(); self.num_params()];
        let ones = vec![T::one(); seq.completion.len()];
        self.accumulate_sequence_grad(seq, &ones, &mut grad);
        grad
    }

    /// Samples until EOS or `max_len` tokens. Temperature 0 is greedy with
    /// lowest-index tie-break.
    pub fn sample_completion(
        &self,
        prompt: &[Token],
        temperature: T,
        max_len: usize,
        seed: Seed,
    ) -> Result<TokenSequence> {
        if max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        if !(temperature >= T::zero()) || !temperature.is_finite() {
            return Err(Error::invalid("temperature must be finite and non-negative"));
        }
        let mut rng = seed.rng();
        let mut ctx = Context::of_prefix(prompt);
        let mut completion = Vec::new();
        while completion.len() < max_len {
            let tok = if temperature == T::zero() {
                argmax_lowest(self.logits(ctx))
            } else {
                let scaled: Vec<T> = self.logits(ctx).iter().map(|&z| z / temperature).collect();
                let probs = softmax(&scaled)?;
                let u: T = lit(rng.gen::<f64>());
                draw_index(&probs, u)
            } as Token;
            completion.push(tok);
            if tok == self.vocab.eos() {
                break;
            }
            ctx = Context::After(tok);
        }
        Ok(TokenSequence::new(prompt.to_vec(), completion))
    }

    pub fn greedy(&self, prompt: &[Token], max_len: usize) -> Result<TokenSequence> {
        self.sample_completion(prompt, T::zero(), max_len, Seed::new(0))
    }

    /// Every leaf of the generation tree: each EOS-terminated completion of
    /// length ≤ `max_len` and each length-`max_len` completion without EOS.
    pub fn enumerate_paths(&self, prompt: &[Token], max_len: usize) -> Result<Vec<(TokenSequence, T)>> {
        check_enumerable(self.vocab.size(), max_len)?;
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(max_len);
        self.walk(
            prompt,
            Context::of_prefix(prompt),
            T::zero(),
            max_len,
            &mut prefix,
            &mut out,
        );
        Ok(out)
    }

    fn walk(
        &self,
        prompt: &[Token],
        ctx: Context,
        logp: T,
        max_len: usize,
        prefix: &mut Vec<Token>,
        out: &mut Vec<(TokenSequence, T)>,
    ) {
        let lp = self.log_probs(ctx);
        for tok in 0..self.vocab.size() as Token {
            let next = logp + lp[tok as usize];
            prefix.push(tok);
            if tok == self.vocab.eos() || prefix.len() == max_len {
                out.push((TokenSequence::new(prompt.to_vec(), prefix.clone()), next.exp()));
            } else {
                self.walk(prompt, Context::After(tok), next, max_len, prefix, out);
            }
            prefix.pop();
        }
    }

    /// EOS-terminated completions individually, truncated ones pooled into a
    /// single bucket (last entry, present whenever truncation is possible).
    pub fn enumerate_completions(&self, prompt: &[Token], max_len: usize) -> Result<Vec<Outcome<T>>> {
        let eos = self.vocab.eos();
        let mut outcomes = Vec::new();
        let mut members = Vec::new();
        for (seq, p) in self.enumerate_paths(prompt, max_len)? {
            if seq.is_terminated(eos) {
                outcomes.push(Outcome::Terminated {
                    sequence: seq,
                    probability: p,
                });
            } else {
                members.push((seq, p));
            }
        }
        if !members.is_empty() {
            let probability = members.iter().map(|(_, p)| *p).sum();
            outcomes.push(Outcome::TruncationBucket { probability, members });
        }
        Ok(outcomes)
    }

    pub fn snapshot(&self) -> Frozen<T> {
        Frozen(Arc::new(self.clone()))
    }

    pub fn to_document(&self) -> PolicyDocument<T> {
        let v = self.vocab.size();
        PolicyDocument {
            vocab_size: v,
            eos_id: self.vocab.eos(),
            pad_id: self.vocab.pad(),
            init_logits: self.params[..v].to_vec(),
            trans_logits: self.params[v..].chunks(v).map(<[T]>::to_vec).collect(),
        }
    }

    pub fn from_document(doc: PolicyDocument<T>) -> Result<Self> {
        let vocab = Vocab::new(doc.vocab_size, doc.eos_id, doc.pad_id)?;
        Self::from_parts(vocab, doc.init_logits, doc.trans_logits)
    }
}

pub(crate) fn check_enumerable(vocab_size: usize, max_len: usize) -> Result<()> {
    let needed = (vocab_size as f64).powi(max_len as i32);
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    if needed > ENUMERATION_LIMIT {
        return Err(Error::Capacity {
            what: "completion enumeration (V^max_len)",
            needed,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(())
}

fn argmax_lowest<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw in ascending index order.
fn draw_index<T: Scalar>(probs: &[T], u: T) -> usize {
    let mut acc = T::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the final partial sum
    probs.iter().rposition(|&p| p > T::zero()).unwrap_or(probs.len() - 1)
}

/// One cell of the enumerated completion space.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome<T> {
    Terminated {
        sequence: TokenSequence,
        probability: T,
    },
    TruncationBucket {
        probability: T,
        members: Vec<(TokenSequence, T)>,
    },
}

impl<T: Scalar> Outcome<T> {
    pub fn probability(&self) -> T {
        match self {
            Outcome::Terminated { probability, .. } | Outcome::TruncationBucket { probability, .. } => *probability,
        }
    }

    pub fn is_truncation(&self) -> bool {
        matches!(self, Outcome::TruncationBucket { .. })
    }
}

/// A read-only copy of a policy. Later updates to the source do not reach it.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen<T>(Arc<BigramPolicy<T>>);

impl<T: Scalar> Frozen<T> {
    pub fn snapshot(&self) -> Frozen<T> {
        self.clone()
    }

    /// A mutable copy to continue training from.
    pub fn thaw(&self) -> BigramPolicy<T> {
        (*self.0).clone()
    }
}

impl<T> Deref for Frozen<T> {
    type Target = BigramPolicy<T>;
    fn deref(&self) -> &BigramPolicy<T> {
        &self.0
    }
}

/// Total-variation distance between two distributions over the same list of outcomes.
pub fn total_variation<T: Scalar>(p: &[T], q: &[T]) -> T {
    assert_eq!(p.len(), q.len());
    p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<T>() / lit(2.0)
}
