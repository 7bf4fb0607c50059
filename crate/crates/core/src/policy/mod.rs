//! A small trainable tutor policy with exact log-probabilities over
//! structured annotations.
//!
//! The policy factorizes an annotation's probability into three
//! classification heads (evaluation, action, subproblem state) conditioned
//! on a hashed context bucket, plus an action-group-conditioned bigram model
//! over utterance tokens. Guidance actions (1, 4) and direct-solution
//! actions (2, 5) get separate token tables so the two response styles are
//! distinguishable; everything else shares a third table.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{lr_scale, optimizer_step, OptimizerState, TrainConfig};
pub use train::{accumulate_logprob_grad, lhp_param_grads, lhp_train, mean_margin, sft_train};

use std::collections::HashMap;

use thiserror::Error;

use crate::math::log_sum_exp;
use crate::prefgen::Context;
use crate::schema::{ActionCode, EvalCode, SubproblemState, TutorAnnotation};

pub const N_EVAL: usize = 7;
pub const N_ACTION: usize = 12;
pub const N_SUBSTATE: usize = 4;
pub const N_GROUPS: usize = 3;

/// Hard cap on greedily decoded utterance length, in tokens.
pub const MAX_DECODE_TOKENS: usize = 64;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("parameter/gradient shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Whitespace-and-lowercase tokenizer used everywhere in the policy.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token vocabulary with reserved sentinel entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const BOS: usize = 0;
    pub const UNK: usize = 1;
    pub const EOS: usize = 2;

    /// Builds a vocabulary from corpus texts, first-seen order, minimum
    /// frequency one.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocab::reserved();
        for text in texts {
            for tok in tokenize(text) {
                vocab.intern(tok);
            }
        }
        vocab
    }

    fn reserved() -> Self {
        let mut vocab = Vocab { tokens: Vec::new(), index: HashMap::new() };
        for tok in ["<s>", "<unk>", "</s>"] {
            vocab.intern(tok.to_string());
        }
        vocab
    }

    /// Rebuilds from an ordered token list (checkpoint load).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, PolicyError> {
        if tokens.len() < 3 || tokens[0] != "<s>" || tokens[1] != "<unk>" || tokens[2] != "</s>" {
            return Err(PolicyError::BadCheckpoint(
                "vocabulary must start with the reserved <s>, <unk>, </s> tokens".into(),
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { tokens, index })
    }

    fn intern(&mut self, tok: String) -> usize {
        if let Some(&i) = self.index.get(&tok) {
            return i;
        }
        let i = self.tokens.len();
        self.index.insert(tok.clone(), i);
        self.tokens.push(tok);
        i
    }

    /// Token id with UNK fallback.
    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Token-model conditioning group derived from the action code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionGroup {
    Guidance,
    Direct,
    Other,
}

impl ActionGroup {
    pub fn of(action: ActionCode) -> Self {
        if action.is_guidance() {
            ActionGroup::Guidance
        } else if action.is_direct() {
            ActionGroup::Direct
        } else {
            ActionGroup::Other
        }
    }

    pub fn index(self) -> usize {
        match self {
            ActionGroup::Guidance => 0,
            ActionGroup::Direct => 1,
            ActionGroup::Other => 2,
        }
    }
}

/// The policy's trainable tensors, also reused as gradient and optimizer
/// moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub eval: Vec<f64>,
    pub action: Vec<f64>,
    pub substate: Vec<f64>,
    pub token: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(n_buckets: usize, vocab_len: usize) -> Self {
        ParamSet {
            eval: vec![0.0; n_buckets * N_EVAL],
            action: vec![0.0; n_buckets * N_ACTION],
            substate: vec![0.0; n_buckets * N_SUBSTATE],
            token: vec![0.0; N_GROUPS * vocab_len * vocab_len],
        }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        ParamSet {
            eval: vec![0.0; other.eval.len()],
            action: vec![0.0; other.action.len()],
            substate: vec![0.0; other.substate.len()],
            token: vec![0.0; other.token.len()],
        }
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.eval.len() == other.eval.len()
            && self.action.len() == other.action.len()
            && self.substate.len() == other.substate.len()
            && self.token.len() == other.token.len()
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.eval, &self.action, &self.substate, &self.token]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.eval,
            &mut self.action,
            &mut self.substate,
            &mut self.token,
        ]
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|w| *w = value);
        }
    }

    /// Total parameter count across all tensors.
    pub fn flat_len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn get_flat(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn add_flat(&mut self, mut i: usize, delta: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] += delta;
                return;
            }
            i -= t.len();
        }
        panic!("flat index out of range");
    }
}

/// The trainable tutor policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTutorPolicy {
    pub n_buckets: usize,
    pub vocab: Vocab,
    pub weights: ParamSet,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= b as u64;
        *hash = hash.wrapping_mul(FNV_PRIME);
    }
}

/// Deterministic context bucket: FNV-1a over the last student utterance's
/// tokens and the previous tutor action (when any), modulo `n_buckets`.
pub fn featurize_context(ctx: &Context, n_buckets: usize) -> usize {
    assert!(n_buckets >= 1, "n_buckets must be at least 1");
    let mut hash = FNV_OFFSET;
    if let Some(last) = ctx.student_utterances.last() {
        for tok in tokenize(last) {
            fnv1a(&mut hash, tok.as_bytes());
            fnv1a(&mut hash, &[0x1f]);
        }
    }
    if let Some(prev) = ctx.tutor_annotations.last() {
        fnv1a(&mut hash, &[0x1e, prev.action.get()]);
    }
    (hash % n_buckets as u64) as usize
}

impl ToyTutorPolicy {
    /// A fresh policy with zero weights: every head and token row is an
    /// exactly uniform distribution.
    pub fn new(vocab: Vocab, n_buckets: usize) -> Self {
        assert!(n_buckets >= 1, "n_buckets must be at least 1");
        let weights = ParamSet::zeros(n_buckets, vocab.len());
        ToyTutorPolicy { n_buckets, vocab, weights }
    }

    fn head_row(weights: &[f64], width: usize, bucket: usize) -> &[f64] {
        &weights[bucket * width..(bucket + 1) * width]
    }

    fn token_row(&self, group: usize, prev: usize) -> &[f64] {
        let v = self.vocab.len();
        let base = (group * v + prev) * v;
        &self.weights.token[base..base + v]
    }

    /// Log-probability of the three classification codes given the context
    /// bucket.
    pub fn classification_logprob(&self, bucket: usize, ann: &TutorAnnotation) -> f64 {
        let eval_row = Self::head_row(&self.weights.eval, N_EVAL, bucket);
        let action_row = Self::head_row(&self.weights.action, N_ACTION, bucket);
        let substate_row = Self::head_row(&self.weights.substate, N_SUBSTATE, bucket);
        (eval_row[ann.eval.index()] - log_sum_exp(eval_row))
            + (action_row[ann.action.index()] - log_sum_exp(action_row))
            + (substate_row[ann.substate.index()] - log_sum_exp(substate_row))
    }

    /// Utterance token ids as a bigram chain `<s> t1 .. tk </s>`.
    pub(crate) fn token_chain(&self, utterance: &str) -> Vec<usize> {
        let mut chain = vec![Vocab::BOS];
        chain.extend(tokenize(utterance).iter().map(|t| self.vocab.id(t)));
        chain.push(Vocab::EOS);
        chain
    }

    /// Per-transition log-probabilities of the utterance tokens under the
    /// annotation's action group, ending with the end-of-utterance
    /// transition.
    pub fn utterance_token_logprobs(&self, ann: &TutorAnnotation) -> Vec<f64> {
        let group = ActionGroup::of(ann.action).index();
        let chain = self.token_chain(&ann.utterance);
        chain
            .windows(2)
            .map(|w| {
                let row = self.token_row(group, w[0]);
                row[w[1]] - log_sum_exp(row)
            })
            .collect()
    }

    /// Total log-probability of an annotation given a context: the three
    /// classification heads plus the utterance bigram chain.
    pub fn annotation_logprob(&self, ctx: &Context, ann: &TutorAnnotation) -> f64 {
        let bucket = featurize_context(ctx, self.n_buckets);
        self.classification_logprob(bucket, ann)
            + self.utterance_token_logprobs(ann).iter().sum::<f64>()
    }

    /// Deterministic prediction: argmax over each head (ties broken toward
    /// the lowest code) and a greedy utterance decode under the predicted
    /// action's group, capped at [`MAX_DECODE_TOKENS`].
    pub fn annotate(&self, ctx: &Context) -> TutorAnnotation {
        let bucket = featurize_context(ctx, self.n_buckets);
        let eval_idx = argmax(Self::head_row(&self.weights.eval, N_EVAL, bucket));
        let action_idx = argmax(Self::head_row(&self.weights.action, N_ACTION, bucket));
        let substate_idx = argmax(Self::head_row(&self.weights.substate, N_SUBSTATE, bucket));

        let action = ActionCode::from_index(action_idx).expect("argmax index is in range");
        let group = ActionGroup::of(action).index();

        let mut tokens = Vec::new();
        let mut prev = Vocab::BOS;
        for _ in 0..MAX_DECODE_TOKENS {
            let row = self.token_row(group, prev);
            // BOS can never be emitted.
            let next = 1 + argmax(&row[1..]);
            if next == Vocab::EOS {
                break;
            }
            tokens.push(self.vocab.token(next).to_string());
            prev = next;
        }
        let utterance = if tokens.is_empty() {
            self.vocab.token(Vocab::UNK).to_string()
        } else {
            tokens.join(" ")
        };

        TutorAnnotation {
            eval: EvalCode::from_index(eval_idx).expect("argmax index is in range"),
            action,
            substate: SubproblemState::from_index(substate_idx).expect("argmax index is in range"),
            subproblem: String::new(),
            utterance,
        }
    }
}

/// Index of the first maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &w) in row.iter().enumerate() {
        if w > row[best] {
            best = i;
        }
    }
    best
}
