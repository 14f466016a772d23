//! The student model: tokenizer, exact sequence log-probability, temperature
//! sampling, and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, Phase};
pub use model::{Arch, DecodeState, ParamSpec, PolicyModel};
pub use vocab::{TokenId, Vocabulary, BOS, EOS, PAD, SEP, UNK};

use crate::error::{Error, Result};

/// Anything that assigns next-token log-probabilities to token sequences.
pub trait LanguageModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn context_length(&self) -> usize;

    /// An empty decoding state.
    fn start(&self) -> Self::State;

    /// Appends `token` to the state and returns the next-token
    /// log-probabilities.
    fn feed(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f64>>;

    /// `sum_t log p(continuation[t] | prompt ++ continuation[..t])`.
    fn sequence_log_prob(&self, prompt: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
        check_fits(prompt.len() + continuation.len(), self.context_length())?;
        if continuation.is_empty() {
            return Ok(0.0);
        }
        if prompt.is_empty() {
            return Err(Error::Precondition("a continuation needs a non-empty prompt".into()));
        }
        let mut state = self.start();
        let mut next = Vec::new();
        for &t in prompt {
            next = self.feed(&mut state, t)?;
        }
        let mut total = 0.0;
        for (i, &t) in continuation.iter().enumerate() {
            total += next[t as usize];
            if i + 1 < continuation.len() {
                next = self.feed(&mut state, t)?;
            }
        }
        Ok(total)
    }
}

/// A language model with a text interface.
pub trait Policy: LanguageModel {
    fn vocab(&self) -> &Vocabulary;
}

fn check_fits(len: usize, limit: usize) -> Result<()> {
    if len > limit {
        return Err(Error::ContextOverflow {
            len,
            limit,
            record: None,
        });
    }
    Ok(())
}

impl LanguageModel for PolicyModel {
    type State = DecodeState;

    fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    fn context_length(&self) -> usize {
        self.arch().context_length
    }

    fn start(&self) -> DecodeState {
        DecodeState::default()
    }

    fn feed(&self, state: &mut DecodeState, token: TokenId) -> Result<Vec<f64>> {
        let logits = self.step_logits(state, token)?;
        Ok(model::log_softmax(&logits))
    }

    /// One batched forward pass over `prompt ++ continuation`.
    fn sequence_log_prob(&self, prompt: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
        check_fits(prompt.len() + continuation.len(), self.context_length())?;
        if continuation.is_empty() {
            return Ok(0.0);
        }
        if prompt.is_empty() {
            return Err(Error::Precondition("a continuation needs a non-empty prompt".into()));
        }
        let (tokens, weights) = continuation_weights(prompt, continuation);
        self.weighted_log_prob(&tokens, &weights)
    }
}

impl Policy for PolicyModel {
    fn vocab(&self) -> &Vocabulary {
        PolicyModel::vocab(self)
    }
}

/// Concatenated tokens and a weight vector selecting only the continuation
/// predictions.
pub fn continuation_weights(prompt: &[TokenId], continuation: &[TokenId]) -> (Vec<TokenId>, Vec<f64>) {
    let mut tokens = Vec::with_capacity(prompt.len() + continuation.len());
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(continuation);
    let mut weights = vec![0.0; tokens.len().saturating_sub(1)];
    for w in weights.iter_mut().skip(prompt.len().saturating_sub(1)) {
        *w = 1.0;
    }
    (tokens, weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.1,
            max_new_tokens: 96,
            seed: 0,
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(log_probs: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(log_probs);
    }
    let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_probs.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    argmax(log_probs)
}

/// Autoregressive sampling until `<eos>`, the token budget, or the end of the
/// context window. The returned tokens exclude `<eos>`.
pub fn generate_tokens<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    config: &GenerationConfig,
) -> Result<Vec<TokenId>> {
    check_fits(prompt.len(), model.context_length())?;
    if prompt.is_empty() {
        return Err(Error::Precondition("generation needs a non-empty prompt".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = model.start();
    let mut next = Vec::new();
    for &t in prompt {
        next = model.feed(&mut state, t)?;
    }
    let mut out = Vec::new();
    let mut len = prompt.len();
    while out.len() < config.max_new_tokens {
        let tok = sample(&next, config.temperature, &mut rng) as TokenId;
        if tok == EOS {
            break;
        }
        out.push(tok);
        if len >= model.context_length() || out.len() == config.max_new_tokens {
            break;
        }
        next = model.feed(&mut state, tok)?;
        len += 1;
    }
    Ok(out)
}

/// Generates an answer to `prompt_text` (wrapped as `<bos> text <sep>`).
pub fn generate<P: Policy + ?Sized>(policy: &P, prompt_text: &str, config: &GenerationConfig) -> Result<String> {
    let prompt = policy.vocab().encode_prompt(prompt_text);
    let tokens = generate_tokens(policy, &prompt, config)?;
    Ok(policy.vocab().decode(&tokens))
}

/// Log-probability of `answer_text` as a continuation of `prompt_text`.
pub fn text_log_prob<P: Policy + ?Sized>(policy: &P, prompt_text: &str, answer_text: &str) -> Result<f64> {
    let prompt = policy.vocab().encode_prompt(prompt_text);
    let answer = policy.vocab().encode_answer(answer_text);
    policy.sequence_log_prob(&prompt, &answer)
}
