//! Corpus ingestion: sentence loading, tokenization, and vocabulary construction.
//!
//! Sentences live one per line in UTF-8 text files. Tokenization is pluggable
//! through [`Tokenizer`]; the default lowercases, splits on whitespace and
//! detaches punctuation into separate tokens. Whatever tokenizer encodes the
//! training targets must also be used for encoding and for scoring, so the
//! toolkit threads a single tokenizer through all three places.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Reserved low vocabulary ids, in fixed order.
pub const PAD_ID: u32 = 0;
pub const SOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const SOS_TOKEN: &str = "<sos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// The four specials, index == id.
pub const SPECIAL_TOKENS: [&str; 4] = [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line} is not valid UTF-8")]
    Encoding { path: String, line: usize },
    #[error("vocabulary max_size must be at least 5 (four specials plus one token), got {0}")]
    MaxSizeTooSmall(usize),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("special token {0:?} may not appear inside a token sequence")]
    SpecialInSequence(String),
    #[error("tokens and ids have different lengths ({tokens} vs {ids})")]
    LengthMismatch { tokens: usize, ids: usize },
    #[error("vocabulary file {path} is malformed: {reason}")]
    BadVocabFile { path: String, reason: String },
}

/// One line of a corpus file, before tokenization.
///
/// `line_index` is the zero-based position in the original file and is kept
/// stable across filtering so precomputed embedding files stay aligned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSentence {
    pub text: String,
    pub line_index: usize,
}

/// An ordered token sequence with vocabulary ids.
///
/// Specials are never part of a sequence; they are added by the decoder when
/// it builds training targets. Out-of-vocabulary tokens keep their surface
/// form but map to [`UNK_ID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>, ids: Vec<u32>) -> Result<Self, CorpusError> {
        if tokens.len() != ids.len() {
            return Err(CorpusError::LengthMismatch {
                tokens: tokens.len(),
                ids: ids.len(),
            });
        }
        for t in &tokens {
            if t == PAD_TOKEN || t == SOS_TOKEN || t == EOS_TOKEN {
                return Err(CorpusError::SpecialInSequence(t.clone()));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Surface form, tokens joined with single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.text())
    }
}

/// Splits text into tokens. Implementations must be deterministic.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Default tokenizer: optional lowercasing, whitespace splitting, punctuation
/// detached into single-character tokens. Apostrophes count as word
/// characters so clitics like `'m` survive as one token.
#[derive(Debug, Clone, Copy)]
pub struct WhitespaceTokenizer {
    pub lowercase: bool,
}

impl Default for WhitespaceTokenizer {
    fn default() -> Self {
        Self { lowercase: true }
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text, self.lowercase)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Lowercase (optionally), split on whitespace, detach punctuation.
///
/// Within a whitespace-separated chunk, maximal runs of word characters
/// (alphanumerics and apostrophes) become tokens and every other character
/// becomes its own single-character token.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let text = if lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut run = String::new();
        for c in chunk.chars() {
            if is_word_char(c) {
                run.push(c);
            } else {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(c.to_string());
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

/// Loads sentences whose tokenized length (default tokenizer) is at most
/// `max_len`. Line indices are preserved from the file; filtering does not
/// renumber.
pub fn load_sentences(
    path: impl AsRef<Path>,
    max_len: usize,
) -> Result<Vec<RawSentence>, CorpusError> {
    load_sentences_with(path, max_len, &WhitespaceTokenizer::default())
}

/// As [`load_sentences`], with an explicit tokenizer deciding the length count.
pub fn load_sentences_with(
    path: impl AsRef<Path>,
    max_len: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<RawSentence>, CorpusError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    // Drop the empty chunk a trailing LF would otherwise produce.
    let content = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    let mut out = Vec::new();
    if content.is_empty() {
        return Ok(out);
    }
    for (line_index, raw) in content.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let text = std::str::from_utf8(raw).map_err(|_| CorpusError::Encoding {
            path: path.display().to_string(),
            line: line_index,
        })?;
        if tokenizer.tokenize(text).len() <= max_len {
            out.push(RawSentence {
                text: text.to_string(),
                line_index,
            });
        }
    }
    Ok(out)
}

/// Token/id bijection with the four specials pinned at ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            token_to_id,
            id_to_token: tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    /// Id for a token, [`UNK_ID`] when absent.
    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Attaches ids to tokens, mapping out-of-vocabulary tokens to UNK while
    /// keeping their surface form.
    pub fn sequence(&self, tokens: Vec<String>) -> Result<TokenSequence, CorpusError> {
        let ids = tokens.iter().map(|t| self.id_of(t)).collect();
        TokenSequence::new(tokens, ids)
    }

    /// SHA-256 over the id-ordered token list, one token per line.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.id_to_token {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex_string(&hasher.finalize())
    }

    /// One token per line, line number == id; first four lines are specials.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let mut body = String::new();
        for t in &self.id_to_token {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let bad = |reason: &str| CorpusError::BadVocabFile {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(bad("fewer than four lines"));
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *special {
                return Err(bad(&format!(
                    "line {i} must be {special:?}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if let Some(prev) = seen.insert(t.clone(), i) {
                return Err(bad(&format!("token {t:?} on lines {prev} and {i}")));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Builds a vocabulary from tokenized sentences: the four specials plus the
/// most frequent tokens (frequency descending, ties broken lexicographically),
/// truncated to `max_size` entries total. Tokens under `min_freq` are dropped.
pub fn build_vocabulary(
    corpus: &[Vec<String>],
    min_freq: usize,
    max_size: usize,
) -> Result<Vocabulary, CorpusError> {
    if max_size < SPECIAL_TOKENS.len() + 1 {
        return Err(CorpusError::MaxSizeTooSmall(max_size));
    }
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for token in sentence {
            *counts.entry(token.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq && !SPECIAL_TOKENS.contains(&t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    for (token, _) in ranked.into_iter().take(max_size - SPECIAL_TOKENS.len()) {
        tokens.push(token.to_string());
    }
    Ok(Vocabulary::from_tokens(tokens))
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}
