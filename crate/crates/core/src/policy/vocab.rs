//! Vocabulary and greedy longest-match tokenizer.
//!
//! Every single character seen while building is a token, so any covered
//! text round-trips exactly. Answer labels (`A)`..`E)`), frequent words, and
//! then frequent adjacent-token merges within a line are added as
//! multi-character tokens to keep sequences short.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const UNK: TokenId = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];

pub const MAX_VOCAB: usize = 512;

const LABEL_TOKENS: [&str; 5] = ["A)", "B)", "C)", "D)", "E)"];

/// Merged tokens never exceed this many characters.
const MAX_MERGE_CHARS: usize = 48;

/// A pair must occur at least this often to be merged.
const MIN_MERGE_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    #[serde(skip)]
    max_chars: usize,
}

/// Result of encoding: token ids plus the characters that fell back to `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<TokenId>,
    pub unknown: Vec<char>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list whose first entries
    /// are the special tokens in canonical order.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, limit is {MAX_VOCAB}",
                tokens.len()
            )));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("special token `{s}` must have id {i}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut max_chars = 1;
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Config(format!("token {i} is empty")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate token `{t}`")));
            }
            if i >= SPECIALS.len() {
                max_chars = max_chars.max(t.chars().count());
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            max_chars,
        })
    }

    /// Characters of `texts`, the answer-label tokens, the most frequent
    /// words (with and without a leading space), then frequent merges of
    /// adjacent tokens within a line, up to the size limit.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        let max_size = max_size.min(MAX_VOCAB);
        let mut chars = BTreeSet::new();
        let mut words: HashMap<String, usize> = HashMap::new();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for text in texts {
            chars.extend(text.chars());
            for w in word_pieces(text) {
                if w.trim_start().chars().count() > 1 {
                    *words.entry(w).or_default() += 1;
                }
            }
            for line in text.split_inclusive('\n') {
                *lines.entry(line.to_string()).or_default() += 1;
            }
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        for l in LABEL_TOKENS {
            if !tokens.iter().any(|t| t == l) {
                tokens.push(l.to_string());
            }
        }
        if tokens.len() > max_size {
            return Err(Error::Config(format!(
                "{} characters and labels exceed the vocabulary limit {max_size}",
                tokens.len()
            )));
        }
        let room = max_size - tokens.len();
        let mut ranked: Vec<(String, usize)> = words.into_iter().filter(|(_, n)| *n >= 2).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut chosen: Vec<String> = ranked.into_iter().take(room).map(|(w, _)| w).collect();
        chosen.sort();
        tokens.extend(chosen);
        let base = Vocabulary::new(tokens)?;
        let mut lines: Vec<(String, usize)> = lines.into_iter().collect();
        lines.sort();
        let merges = merge_tokens(&base, &lines, max_size - base.len());
        let mut tokens = base.tokens;
        tokens.extend(merges);
        Vocabulary::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Hex SHA-256 over the token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Greedy longest-match encoding. Specials are never produced from text.
    pub fn encode(&self, text: &str) -> Encoded {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut ids = Vec::with_capacity(chars.len());
        let mut unknown = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let mut matched = None;
            let longest = self.max_chars.min(chars.len() - i);
            for len in (1..=longest).rev() {
                let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                if let Some(&id) = self.index.get(&text[start..end]) {
                    if id as usize >= SPECIALS.len() {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    i += len;
                }
                None => {
                    ids.push(UNK);
                    unknown.push(chars[i].1);
                    i += 1;
                }
            }
        }
        if !unknown.is_empty() {
            log::warn!(
                "{} uncovered character(s) mapped to <unk>: {:?}",
                unknown.len(),
                unknown.iter().collect::<String>()
            );
        }
        Encoded { ids, unknown }
    }

    /// Concatenates token strings. Control specials decode to nothing and
    /// `<unk>` to U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                UNK => s.push('\u{FFFD}'),
                PAD | BOS | EOS | SEP => {}
                _ => {
                    if let Some(t) = self.token(id) {
                        s.push_str(t);
                    }
                }
            }
        }
        s
    }

    /// `<bos> text <sep>`: the conditioning prefix for an answer.
    pub fn encode_prompt(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text).ids);
        ids.push(SEP);
        ids
    }

    /// `text <eos>`: an answer continuation.
    pub fn encode_answer(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.encode(text).ids;
        ids.push(EOS);
        ids
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Repeatedly fuses the most frequent adjacent token pair over the encoded
/// `lines` (weighted by multiplicity) and returns the new token strings in
/// merge order. Ties go to the lexicographically smaller string. Answer
/// labels stay atomic so every label is its own token.
fn merge_tokens(base: &Vocabulary, lines: &[(String, usize)], room: usize) -> Vec<String> {
    let mut strings: Vec<String> = base.tokens.clone();
    let mut known: HashMap<String, TokenId> = base.index.clone();
    let mut seqs: Vec<(Vec<TokenId>, usize)> = lines
        .iter()
        .map(|(l, n)| (base.encode(l).ids, *n))
        .filter(|(ids, _)| ids.len() > 1)
        .collect();
    let atomic: Vec<TokenId> = LABEL_TOKENS.iter().filter_map(|l| base.id(l)).collect();
    let mut out = Vec::new();
    while out.len() < room {
        let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
        for (ids, n) in &seqs {
            for w in ids.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, n)| n >= MIN_MERGE_COUNT)
            .filter_map(|((a, b), n)| {
                let (sa, sb) = (&strings[a as usize], &strings[b as usize]);
                let joined = format!("{sa}{sb}");
                let ok = a as usize >= SPECIALS.len()
                    && b as usize >= SPECIALS.len()
                    && !atomic.contains(&a)
                    && !atomic.contains(&b)
                    && joined.chars().count() <= MAX_MERGE_CHARS
                    && !known.contains_key(&joined);
                ok.then_some((n, joined, a, b))
            })
            .max_by(|x, y| x.0.cmp(&y.0).then_with(|| y.1.cmp(&x.1)));
        let Some((_, joined, a, b)) = best else { break };
        let id = strings.len() as TokenId;
        strings.push(joined.clone());
        known.insert(joined.clone(), id);
        out.push(joined);
        for (ids, _) in &mut seqs {
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            *ids = merged;
        }
        seqs.retain(|(ids, _)| ids.len() > 1);
    }
    out
}

/// Alphabetic runs, each optionally carrying the single space before it.
fn word_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut prev_space = false;
    let mut word_has_space = false;
    for c in text.chars() {
        if c.is_alphabetic() || (c == '\'' && !current.is_empty()) {
            if current.is_empty() {
                word_has_space = prev_space;
            }
            current.push(c);
        } else {
            if !current.is_empty() {
                push_word(&mut out, &current, word_has_space);
                current.clear();
            }
        }
        prev_space = c == ' ';
    }
    if !current.is_empty() {
        push_word(&mut out, &current, word_has_space);
    }
    out
}

fn push_word(out: &mut Vec<String>, w: &str, spaced: bool) {
    if spaced {
        out.push(format!(" {w}"));
    } else {
        out.push(w.to_string());
    }
}
