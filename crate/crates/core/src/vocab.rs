//! Token vocabulary, identifier delimiters, and mask generation over the vocabulary.
//!
//! Token strings are matched byte-wise. A suggestion state admits a token when the
//! token is a non-empty prefix of some residual `w`, or when the token is `w`
//! followed by a delimiter and then anything at all.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::par::Execution;

pub type TokenId = u32;

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("vocabulary is empty")]
    Empty,
    #[error("token {0} is the empty string")]
    EmptyToken(usize),
    #[error("token {id} duplicates token {first} ({text:?})")]
    Duplicate { id: usize, first: usize, text: String },
    #[error("special token id {id} for {role} is out of range (vocabulary size {size})")]
    SpecialOutOfRange { role: &'static str, id: TokenId, size: usize },
    #[error("no token covers byte {byte:#04x} at offset {offset}")]
    Uncoverable { offset: usize, byte: u8 },
    #[error("token id {id} out of range (vocabulary size {size})")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("exhausted suggestions")]
    ExhaustedSuggestions,
    #[error("delimiter set is empty")]
    EmptyDelimiters,
    #[error("delimiter set contains identifier character {0:?}")]
    IdentifierDelimiter(char),
    #[error("reading vocabulary: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing vocabulary: {0}")]
    Json(#[from] serde_json::Error),
}

/// Sentinel token ids for fill-in-the-middle prompting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FimSentinels {
    pub prefix: TokenId,
    pub suffix: TokenId,
    pub middle: TokenId,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fim: Option<FimSentinels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eos: Option<TokenId>,
}

/// The language model's token table. Ids are dense `0..len()`.
///
/// Special tokens (FIM sentinels, end-of-sequence) are never produced by
/// [`Vocabulary::tokenize_greedy`] and never admitted by [`maskgen`].
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    special: Vec<bool>,
    lookup: HashMap<Vec<u8>, TokenId>,
    max_len: usize,
    fim: Option<FimSentinels>,
    eos: Option<TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, VocabError> {
        Self::with_specials(tokens, None, None)
    }

    pub fn with_specials(
        tokens: Vec<String>,
        fim: Option<FimSentinels>,
        eos: Option<TokenId>,
    ) -> Result<Self, VocabError> {
        if tokens.is_empty() {
            return Err(VocabError::Empty);
        }
        let size = tokens.len();
        let mut special = vec![false; size];
        let mut mark = |role: &'static str, id: TokenId| {
            if id as usize >= size {
                return Err(VocabError::SpecialOutOfRange { role, id, size });
            }
            special[id as usize] = true;
            Ok(())
        };
        if let Some(f) = fim {
            mark("fim prefix", f.prefix)?;
            mark("fim suffix", f.suffix)?;
            mark("fim middle", f.middle)?;
        }
        if let Some(e) = eos {
            mark("eos", e)?;
        }

        let mut lookup = HashMap::with_capacity(size);
        let mut max_len = 0;
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(VocabError::EmptyToken(id));
            }
            if let Some(&first) = lookup.get(tok.as_bytes()) {
                return Err(VocabError::Duplicate {
                    id,
                    first: first as usize,
                    text: tok.clone(),
                });
            }
            lookup.insert(tok.as_bytes().to_vec(), id as TokenId);
            if !special[id] {
                max_len = max_len.max(tok.len());
            }
        }
        Ok(Self {
            tokens,
            special,
            lookup,
            max_len,
            fim,
            eos,
        })
    }

    /// Parses `{"tokens": [...], "fim": {...}?, "eos": id?}`.
    pub fn from_json(text: &str) -> Result<Self, VocabError> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::with_specials(file.tokens, file.fim, file.eos)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
            fim: self.fim,
            eos: self.eos,
        })
        .expect("vocabulary serializes")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        self.lookup.get(text.as_bytes()).copied()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special.get(id as usize).copied().unwrap_or(false)
    }

    pub fn fim(&self) -> Option<FimSentinels> {
        self.fim
    }

    pub fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    /// Leftmost-longest encoding over the non-special tokens.
    pub fn tokenize_greedy(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let longest = self.max_len.min(bytes.len() - pos);
            let hit = (1..=longest).rev().find_map(|len| {
                self.lookup
                    .get(&bytes[pos..pos + len])
                    .copied()
                    .filter(|&id| !self.special[id as usize])
                    .map(|id| (id, len))
            });
            match hit {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => {
                    return Err(VocabError::Uncoverable {
                        offset: pos,
                        byte: bytes[pos],
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token(id).ok_or(VocabError::IdOutOfRange {
                id,
                size: self.len(),
            })?);
        }
        Ok(out)
    }
}

/// Bytes that end an identifier.
#[derive(Clone, PartialEq, Eq)]
pub struct DelimiterSet {
    members: [bool; 256],
}

/// Java identifier-continue bytes: `[A-Za-z0-9_$]`.
pub fn is_identifier_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'$'
}

impl DelimiterSet {
    /// Every byte outside `[A-Za-z0-9_$]`.
    pub fn java() -> Self {
        let mut members = [false; 256];
        for (b, m) in members.iter_mut().enumerate() {
            *m = !is_identifier_byte(b as u8);
        }
        Self { members }
    }

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self, VocabError> {
        let mut members = [false; 256];
        let mut any = false;
        for c in chars {
            if !c.is_ascii() {
                // Multi-byte characters delimit through their lead byte.
                let mut buf = [0u8; 4];
                members[c.encode_utf8(&mut buf).as_bytes()[0] as usize] = true;
            } else if is_identifier_byte(c as u8) {
                return Err(VocabError::IdentifierDelimiter(c));
            } else {
                members[c as usize] = true;
            }
            any = true;
        }
        if !any {
            return Err(VocabError::EmptyDelimiters);
        }
        Ok(Self { members })
    }

    #[inline]
    pub fn contains(&self, b: u8) -> bool {
        self.members[b as usize]
    }

    pub fn any_in(&self, s: &str) -> bool {
        s.bytes().any(|b| self.contains(b))
    }
}

impl Default for DelimiterSet {
    fn default() -> Self {
        Self::java()
    }
}

impl fmt::Debug for DelimiterSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.members.iter().filter(|m| **m).count();
        write!(f, "DelimiterSet({n} bytes)")
    }
}

/// Residual identifier suffixes. Sorted and deduplicated; may hold the empty string.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SuggestionSet {
    residuals: BTreeSet<String>,
}

impl SuggestionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn contains(&self, w: &str) -> bool {
        self.residuals.contains(w)
    }

    pub fn insert(&mut self, w: impl Into<String>) -> bool {
        self.residuals.insert(w.into())
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.residuals.iter().map(String::as_str)
    }

    /// Residuals that start with `token`, with `token` stripped.
    pub fn strip_prefix(&self, token: &str) -> SuggestionSet {
        self.residuals
            .range::<str, _>((std::ops::Bound::Included(token), std::ops::Bound::Unbounded))
            .take_while(|w| w.starts_with(token))
            .map(|w| w[token.len()..].to_string())
            .collect()
    }

    /// True when `token` is a non-empty prefix of some residual.
    pub fn has_prefix(&self, token: &str) -> bool {
        !token.is_empty()
            && self
                .residuals
                .range::<str, _>((std::ops::Bound::Included(token), std::ops::Bound::Unbounded))
                .next()
                .is_some_and(|w| w.starts_with(token))
    }

    /// The rule by which `token` is admitted under this state, if any.
    pub fn admits(&self, token: &str, delims: &DelimiterSet) -> Option<AdmitRule> {
        if self.has_prefix(token) {
            return Some(AdmitRule::Prefix);
        }
        // Positions inside a multi-byte char cannot end a residual.
        token
            .bytes()
            .enumerate()
            .any(|(i, b)| {
                delims.contains(b) && token.is_char_boundary(i) && self.residuals.contains(&token[..i])
            })
            .then_some(AdmitRule::Terminated)
    }
}

impl FromIterator<String> for SuggestionSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        Self {
            residuals: iter.into_iter().collect(),
        }
    }
}

impl<'a> FromIterator<&'a str> for SuggestionSet {
    fn from_iter<I: IntoIterator<Item = &'a str>>(iter: I) -> Self {
        iter.into_iter().map(str::to_string).collect()
    }
}

/// Why a token passed the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitRule {
    /// The token is a non-empty prefix of a residual.
    Prefix,
    /// The token is a full residual followed by a delimiter and anything.
    Terminated,
}

/// One bit per vocabulary token.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    words: Vec<u64>,
    len: usize,
}

impl Mask {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = Self::zeros(len);
        for id in 0..len {
            m.set(id as TokenId, true);
        }
        m
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            m.set(i as TokenId, b);
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, id: TokenId) -> bool {
        let i = id as usize;
        i < self.len && (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, id: TokenId, on: bool) {
        let i = id as usize;
        assert!(i < self.len, "mask index {i} out of range {}", self.len);
        if on {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn allowed(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len as TokenId).filter(|&id| self.get(id))
    }

    /// Short stable hash of the bit contents, for event logs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len as u64).to_le_bytes());
        for w in &self.words {
            h.update(w.to_le_bytes());
        }
        let out = h.finalize();
        out[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}/{} allowed)", self.count_ones(), self.len)
    }
}

fn mask_word(state: &SuggestionSet, vocab: &Vocabulary, delims: &DelimiterSet, word: usize) -> u64 {
    let start = word * 64;
    let end = (start + 64).min(vocab.len());
    let mut bits = 0u64;
    for id in start..end {
        if !vocab.special[id] && state.admits(&vocab.tokens[id], delims).is_some() {
            bits |= 1 << (id - start);
        }
    }
    bits
}

/// Mask of tokens consistent with the residual suggestions in `state`.
pub fn maskgen(
    state: &SuggestionSet,
    vocab: &Vocabulary,
    delims: &DelimiterSet,
) -> Result<Mask, VocabError> {
    maskgen_with(state, vocab, delims, Execution::default())
}

pub fn maskgen_with(
    state: &SuggestionSet,
    vocab: &Vocabulary,
    delims: &DelimiterSet,
    exec: Execution,
) -> Result<Mask, VocabError> {
    if state.is_empty() {
        return Err(VocabError::ExhaustedSuggestions);
    }
    let n_words = vocab.len().div_ceil(64);
    let words = crate::par::map_range(n_words, exec, |w| mask_word(state, vocab, delims, w));
    Ok(Mask {
        words,
        len: vocab.len(),
    })
}
