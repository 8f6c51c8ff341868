//! Instruction fine-tuning: conversations, loss masks, masked NLL,
//! distillation from a teacher policy and the chat-template renderer.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{BigramPolicy, Context, Token, TokenSequence};
use crate::scalar::Scalar;

pub const IM_START: &str = "<|im_start|>";
pub const IM_END: &str = "<|im_end|>";
pub const ALTERNATION_ERROR: &str = "Conversation roles must alternate user/assistant/user/assistant/...";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message<C = Vec<Token>> {
    pub role: Role,
    pub content: C,
}

impl<C> Message<C> {
    pub fn new(role: Role, content: C) -> Self {
        Message { role, content }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Conversation<C = Vec<Token>> {
    pub messages: Vec<Message<C>>,
}

/// Message content that the template can print.
pub trait ChatContent {
    fn to_text(&self) -> String;
}

impl ChatContent for String {
    fn to_text(&self) -> String {
        self.clone()
    }
}

impl ChatContent for &str {
    fn to_text(&self) -> String {
        (*self).to_string()
    }
}

/// Token ids print as space-separated integers.
impl ChatContent for Vec<Token> {
    fn to_text(&self) -> String {
        self.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
    }
}

impl<C> Conversation<C> {
    pub fn new(messages: Vec<Message<C>>) -> Self {
        Conversation { messages }
    }

    /// An optional leading system message, then user and assistant turns in
    /// strict alternation starting with user. Tool messages sit outside the
    /// alternation and may only follow an assistant or another tool message.
    pub fn validate(&self) -> Result<()> {
        let mut expect_user = true;
        let mut prev: Option<Role> = None;
        for (i, m) in self.messages.iter().enumerate() {
            match m.role {
                Role::System if i == 0 => {}
                Role::System => {
                    return Err(Error::validation(
                        "messages",
                        format!("system message at position {i}; {ALTERNATION_ERROR}"),
                    ));
                }
                Role::Tool => {
                    if !matches!(prev, Some(Role::Assistant | Role::Tool)) {
                        return Err(Error::validation(
                            "messages",
                            format!("tool message at position {i} must follow an assistant turn"),
                        ));
                    }
                }
                Role::User | Role::Assistant => {
                    if (m.role == Role::User) != expect_user {
                        return Err(Error::validation(
                            "messages",
                            format!("{ALTERNATION_ERROR} (position {i})"),
                        ));
                    }
                    expect_user = !expect_user;
                }
            }
            prev = Some(m.role);
        }
        Ok(())
    }
}

/// Which assistant turns are trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    FinalTurnOnly,
    AssistantAll,
}

/// One flag per position of a flattened token stream; `true` = trained on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Everything after the first `prompt_len` positions.
    pub fn completion_only(prompt_len: usize, total: usize) -> Self {
        LossMask((0..total).map(|i| i >= prompt_len).collect())
    }
}

impl Conversation<Vec<Token>> {
    pub fn flatten(&self) -> Vec<Token> {
        self.messages.iter().flat_map(|m| m.content.iter().copied()).collect()
    }

    /// The flattened token stream and its loss mask.
    pub fn build_mask(&self, strategy: MaskStrategy) -> Result<(Vec<Token>, LossMask)> {
        self.validate()?;
        let last_assistant = self.messages.iter().rposition(|m| m.role == Role::Assistant);
        let mut tokens = Vec::new();
        let mut flags = Vec::new();
        for (i, m) in self.messages.iter().enumerate() {
            let on = m.role == Role::Assistant
                && match strategy {
                    MaskStrategy::AssistantAll => true,
                    MaskStrategy::FinalTurnOnly => Some(i) == last_assistant,
                };
            tokens.extend_from_slice(&m.content);
            flags.extend(std::iter::repeat_n(on, m.content.len()));
        }
        Ok((tokens, LossMask(flags)))
    }

    /// One training example per assistant turn, each predicting that turn
    /// with all earlier messages as masked context.
    pub fn unroll(&self) -> Result<Vec<(Vec<Token>, LossMask)>> {
        self.validate()?;
        let mut out = Vec::new();
        for (i, m) in self.messages.iter().enumerate() {
            if m.role == Role::Assistant {
                let prefix = Conversation::new(self.messages[..=i].to_vec());
                out.push(prefix.build_mask(MaskStrategy::FinalTurnOnly)?);
            }
        }
        Ok(out)
    }
}

/// Renders `<|im_start|>role\ncontent<|im_end|>\n` per message, optionally
/// followed by the assistant cue. Content is trimmed.
pub fn render_chat_template<C: ChatContent>(conv: &Conversation<C>, add_generation_cue: bool) -> Result<String> {
    conv.validate()?;
    let mut out = String::new();
    for m in &conv.messages {
        let _ = write!(
            out,
            "{IM_START}{}\n{}{IM_END}\n",
            m.role.as_str(),
            m.content.to_text().trim()
        );
    }
    if add_generation_cue {
        let _ = writeln!(out, "{IM_START}assistant");
    }
    Ok(out)
}

/// Masked mean negative log-likelihood of a token stream scored from the
/// begin row, with its gradient.
pub fn nll_loss<T: Scalar>(policy: &BigramPolicy<T>, tokens: &[Token], mask: &LossMask) -> Result<(T, Vec<T>)> {
    if mask.len() != tokens.len() {
        return Err(Error::invalid(format!(
            "mask length {} != token count {}",
            mask.len(),
            tokens.len()
        )));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::invalid("nll_loss: mask selects no positions"));
    }
    let lp = policy.stream_logprob(tokens)?;
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut loss = T::zero();
    for (l, &m) in lp.per_token.iter().zip(&mask.0) {
        if m {
            loss -= *l;
        }
    }
    let weights: Vec<T> = mask.0.iter().map(|&m| if m { -inv } else { T::zero() }).collect();
    let mut grad = vec![T::zero(); policy.num_params()];
    policy.accumulate_sequence_grad(&TokenSequence::new(Vec::new(), tokens.to_vec()), &weights, &mut grad);
    Ok((loss * inv, grad))
}

/// `−Σ_i w_i log π(y_i | x_i)` over completions, with its gradient.
pub fn weighted_sequence_nll<T: Scalar>(policy: &BigramPolicy<T>, items: &[(TokenSequence, T)]) -> Result<(T, Vec<T>)> {
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); policy.num_params()];
    for (seq, w) in items {
        loss -= *w * policy.sequence_logprob(seq)?.total;
        let weights = vec![-*w; seq.completion.len()];
        policy.accumulate_sequence_grad(seq, &weights, &mut grad);
    }
    Ok((loss, grad))
}

/// Masked mean of the cross-entropy from the teacher's next-token
/// distribution to the student's, at each position's context.
pub fn kd_loss<T: Scalar>(
    student: &BigramPolicy<T>,
    teacher: &BigramPolicy<T>,
    tokens: &[Token],
    mask: &LossMask,
) -> Result<(T, Vec<T>)> {
    if student.vocab() != teacher.vocab() {
        return Err(Error::invalid("kd_loss: student and teacher vocabularies differ"));
    }
    if mask.len() != tokens.len() {
        return Err(Error::invalid(format!(
            "mask length {} != token count {}",
            mask.len(),
            tokens.len()
        )));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::invalid("kd_loss: mask selects no positions"));
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    let v = student.vocab().size();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); student.num_params()];
    for (t, &m) in mask.0.iter().enumerate() {
        if !m {
            continue;
        }
        let ctx = Context::of_prefix(&tokens[..t]);
        let pt = teacher.probs(ctx);
        let ls = student.log_probs(ctx);
        let row = ctx.row() * v;
        for k in 0..v {
            loss -= pt[k] * ls[k];
            grad[row + k] += inv * (ls[k].exp() - pt[k]);
        }
    }
    Ok((loss * inv, grad))
}

/// One line of an SFT dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<Message<Vec<Token>>>,
    #[serde(default)]
    pub strategy: MaskStrategy,
}

impl SftRecord {
    pub fn conversation(&self) -> Conversation<Vec<Token>> {
        Conversation::new(self.messages.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, kl_categorical, max_relative_error, ProbVector};
    use crate::policy::Vocab;
    use crate::rng::Seed;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::new(5, 0, 1).unwrap()
    }

    fn msg(role: Role, c: &[Token]) -> Message {
        Message::new(role, c.to_vec())
    }

    #[test]
    fn pirate_example_renders_exactly() {
        let conv = Conversation::new(vec![
            Message::new(
                Role::System,
                "You are a friendly chatbot who always responds in the style of a pirate",
            ),
            Message::new(Role::User, "How many helicopters can a human eat in one sitting?"),
        ]);
        let expected = "<|im_start|>system\nYou are a friendly chatbot who always responds in the style of a pirate<|im_end|>\n<|im_start|>user\nHow many helicopters can a human eat in one sitting?<|im_end|>\n<|im_start|>assistant\n";
        assert_eq!(render_chat_template(&conv, true).unwrap(), expected);
    }

    #[test]
    fn template_edge_cases() {
        let empty: Conversation<String> = Conversation::default();
        assert_eq!(render_chat_template(&empty, true).unwrap(), "<|im_start|>assistant\n");
        assert_eq!(render_chat_template(&empty, false).unwrap(), "");
        let bad = Conversation::new(vec![Message::new(Role::User, "a"), Message::new(Role::User, "b")]);
        let err = render_chat_template(&bad, false).unwrap_err();
        assert!(err.to_string().contains("Conversation roles must alternate"));
        let trimmed = Conversation::new(vec![Message::new(Role::User, "  hi \n")]);
        assert_eq!(
            render_chat_template(&trimmed, false).unwrap(),
            "<|im_start|>user\nhi<|im_end|>\n"
        );
        let late_system = Conversation::new(vec![msg(Role::User, &[2]), msg(Role::System, &[3])]);
        assert!(late_system.validate().is_err());
        let assistant_first = Conversation::new(vec![msg(Role::Assistant, &[2])]);
        assert!(assistant_first.validate().is_err());
    }

    #[test]
    fn masks_by_strategy() {
        let single = Conversation::new(vec![msg(Role::User, &[2, 3]), msg(Role::Assistant, &[4, 0])]);
        let (tokens, mask) = single.build_mask(MaskStrategy::FinalTurnOnly).unwrap();
        assert_eq!(tokens, vec![2, 3, 4, 0]);
        assert_eq!(mask.0, vec![false, false, true, true]);

        let multi = Conversation::new(vec![
            msg(Role::System, &[1]),
            msg(Role::User, &[2]),
            msg(Role::Assistant, &[3, 3]),
            msg(Role::Tool, &[4, 4, 4]),
            msg(Role::User, &[2]),
            msg(Role::Assistant, &[4]),
        ]);
        let (_, last) = multi.build_mask(MaskStrategy::FinalTurnOnly).unwrap();
        let (_, all) = multi.build_mask(MaskStrategy::AssistantAll).unwrap();
        assert_eq!(
            last.0,
            vec![false, false, false, false, false, false, false, false, true]
        );
        assert_eq!(all.0, vec![false, false, true, true, false, false, false, false, true]);
        let unrolled = multi.unroll().unwrap();
        assert_eq!(unrolled.len(), 2);
        assert_eq!(unrolled[0].0, vec![1, 2, 3, 3]);
        assert_eq!(unrolled[0].1 .0, vec![false, false, true, true]);
        assert_eq!(unrolled[1].1.count(), 1);
        let orphan_tool = Conversation::new(vec![msg(Role::User, &[2]), msg(Role::Tool, &[3])]);
        assert!(orphan_tool.build_mask(MaskStrategy::AssistantAll).is_err());
    }

    #[test]
    fn nll_cases() {
        let u = BigramPolicy::<f64>::uniform(vocab());
        let mask = LossMask(vec![false, true, true]);
        let (l, _) = nll_loss(&u, &[2, 3, 4], &mask).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
        assert!(nll_loss(&u, &[2, 3, 4], &LossMask(vec![false; 3])).is_err());

        // Near-deterministic fit: 3 → 4 with overwhelming logit.
        let mut sharp = u.clone();
        sharp.params_mut()[4 * 5 + 4] = 60.0;
        let (l, _) = nll_loss(&sharp, &[2, 3, 4], &LossMask(vec![false, false, true])).unwrap();
        assert!(l < 1e-20);

        let p = BigramPolicy::<f64>::random(vocab(), 1.0, Seed::new(3));
        let toks = [2, 3, 3, 4, 2, 0];
        let m = LossMask(vec![false, false, true, true, false, true]);
        let (_, g) = nll_loss(&p, &toks, &m).unwrap();
        let fd = finite_diff_grad(
            |x: &[f64]| nll_loss(&p.with_params(x), &toks, &m).unwrap().0,
            p.params(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&g, &fd, 1e-3) < 1e-6);
    }

    #[test]
    fn kd_cases() {
        let teacher = BigramPolicy::<f64>::random(vocab(), 1.5, Seed::new(4));
        let toks = [2, 3, 4, 0];
        let m = LossMask(vec![false, true, true, true]);
        let (l, g) = kd_loss(&teacher, &teacher, &toks, &m).unwrap();
        let mut entropy = 0.0;
        for t in 1..4 {
            let p = teacher.probs(Context::After(toks[t - 1]));
            entropy -= p.iter().map(|x| x * x.ln()).sum::<f64>();
        }
        assert!((l - entropy / 3.0).abs() < 1e-14);
        assert!(g.iter().all(|x| x.abs() < 1e-8));

        let student = BigramPolicy::<f64>::random(vocab(), 1.0, Seed::new(5));
        let (ls, gs) = kd_loss(&student, &teacher, &toks, &m).unwrap();
        assert!(ls > l);
        let fd = finite_diff_grad(
            |x: &[f64]| kd_loss(&student.with_params(x), &teacher, &toks, &m).unwrap().0,
            student.params(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&gs, &fd, 1e-3) < 1e-6);

        let other = BigramPolicy::<f64>::uniform(Vocab::new(6, 0, 1).unwrap());
        assert!(kd_loss(&other, &teacher, &toks, &m).is_err());
    }

    #[test]
    fn forward_kl_identity() {
        // NLL under π* minus KL(π* ‖ π_θ) is the entropy of π*, whatever θ is.
        let target = BigramPolicy::<f64>::random(vocab(), 1.5, Seed::new(6));
        let paths = target.enumerate_paths(&[2], 3).unwrap();
        let p_star: Vec<f64> = paths.iter().map(|(_, p)| *p).collect();
        let mut constant = None;
        for s in 0..10 {
            let theta = BigramPolicy::<f64>::random(vocab(), 2.0, Seed::new(100 + s));
            let (nll, _) = weighted_sequence_nll(&theta, &paths).unwrap();
            let q: Vec<f64> = paths
                .iter()
                .map(|(seq, _)| theta.sequence_logprob(seq).unwrap().total.exp())
                .collect();
            let kl = kl_categorical(&ProbVector::new(p_star.clone()).unwrap(), &ProbVector::new(q).unwrap()).unwrap();
            let c = nll - kl;
            match constant {
                None => constant = Some(c),
                Some(c0) => assert!((c - c0).abs() < 1e-10, "{c} vs {c0}"),
            }
        }
        let entropy: f64 = -p_star.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((constant.unwrap() - entropy).abs() < 1e-10);
    }

    #[test]
    fn sft_record_json() {
        let line = r#"{"messages":[{"role":"user","content":[2,3]},{"role":"assistant","content":[4,0]}],"strategy":"assistant_all"}"#;
        let rec: SftRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.strategy, MaskStrategy::AssistantAll);
        assert_eq!(serde_json::to_string(&rec).unwrap(), line);
    }

    fn conversation_strategy() -> impl Strategy<Value = Conversation> {
        (
            any::<bool>(),
            proptest::collection::vec(proptest::collection::vec(0u32..3, 0..3), 1..5),
        )
            .prop_map(|(system, turns)| {
                let mut msgs = Vec::new();
                if system {
                    msgs.push(msg(Role::System, &[1]));
                }
                for (i, t) in turns.into_iter().enumerate() {
                    let role = if i % 2 == 0 { Role::User } else { Role::Assistant };
                    msgs.push(Message::new(role, t));
                }
                Conversation::new(msgs)
            })
    }

    proptest! {
        #[test]
        fn nll_ignores_masked_out_tokens(seed in 0u64..100, replacement in 1u32..5) {
            let p = BigramPolicy::<f64>::random(vocab(), 1.0, Seed::new(seed));
            // Position 0 is masked and nothing depends on it except position 1's context,
            // so perturb the final masked-out position instead.
            let toks = vec![2, 3, 4, 2];
            let m = LossMask(vec![false, true, true, false]);
            let mut other = toks.clone();
            other[3] = replacement;
            prop_assert_eq!(nll_loss(&p, &toks, &m).unwrap(), nll_loss(&p, &other, &m).unwrap());
        }

        #[test]
        fn template_is_injective(a in conversation_strategy(), b in conversation_strategy()) {
            let ra = render_chat_template(&a, false).unwrap();
            let rb = render_chat_template(&b, false).unwrap();
            prop_assert_eq!(a == b, ra == rb);
        }
    }
}
