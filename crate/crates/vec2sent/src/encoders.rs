//! Sentence encoders: pooling over token embeddings, plus an adapter for
//! vectors computed by external models.
//!
//! Native encoders (average, max, hierarchical window pooling and their
//! concatenation) operate on a user-supplied token embedding table. Anything
//! else enters through precomputed embedding files aligned line-for-line with
//! the corpus.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenSequence, UNK_TOKEN};

/// Magic prefix of the binary embedding file format.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"V2SEMB01";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot encode an empty token sequence")]
    EmptySequence,
    #[error("embedding table vector for {token:?} has length {got}, expected {expected}")]
    InconsistentDim {
        token: String,
        got: usize,
        expected: usize,
    },
    #[error("hierarchical window width must be at least 1")]
    BadWindow,
    #[error("concat parts come from different sentences (lines {0} and {1})")]
    MixedSources(usize, usize),
    #[error("concat needs at least one part")]
    EmptyConcat,
    #[error("line {line_index} is out of range for {count} stored vectors")]
    LookupOutOfRange { line_index: usize, count: usize },
    #[error("embedding file {path}: {reason}")]
    BadEmbeddingFile { path: String, reason: String },
    #[error("declared dimension {declared} does not match file dimension {found}")]
    DimMismatch { declared: usize, found: usize },
    #[error("encoder of kind {0} needs a token embedding table")]
    MissingTable(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("non-finite value in embedding for line {0}")]
    NonFinite(usize),
}

/// Fixed token-to-vector lookup with a dedicated vector for unknown tokens.
#[derive(Debug, Clone)]
pub struct TokenEmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
}

impl TokenEmbeddingTable {
    pub fn new(
        dim: usize,
        vectors: HashMap<String, Vec<f64>>,
        unk: Vec<f64>,
    ) -> Result<Self, EncoderError> {
        if unk.len() != dim {
            return Err(EncoderError::InconsistentDim {
                token: UNK_TOKEN.to_string(),
                got: unk.len(),
                expected: dim,
            });
        }
        for (token, v) in &vectors {
            if v.len() != dim {
                return Err(EncoderError::InconsistentDim {
                    token: token.clone(),
                    got: v.len(),
                    expected: dim,
                });
            }
        }
        Ok(Self { dim, vectors, unk })
    }

    /// Deterministic random table: one uniform(-1, 1) vector per token, plus
    /// an unknown-token vector, all drawn from a seeded stream in token order.
    pub fn random(tokens: &[String], dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new(-1.0, 1.0);
        let draw = |rng: &mut ChaCha8Rng| (0..dim).map(|_| dist.sample(rng)).collect();
        let unk: Vec<f64> = draw(&mut rng);
        let vectors = tokens
            .iter()
            .map(|t| (t.clone(), draw(&mut rng)))
            .collect();
        Self { dim, vectors, unk }
    }

    /// Reads a text table, one `token v1 .. vd` entry per line. A first line
    /// containing exactly two integers is treated as a count/dim header and
    /// skipped. A row for `<unk>` becomes the unknown-token vector; otherwise
    /// the zero vector is used.
    pub fn from_text_file(path: impl AsRef<Path>) -> Result<Self, EncoderError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |reason: String| EncoderError::BadEmbeddingFile {
            path: path.display().to_string(),
            reason,
        };
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok()) {
                continue; // count/dim header
            }
            if fields.len() < 2 {
                return Err(bad(format!("line {i}: expected token and values")));
            }
            let token = fields[0].to_string();
            let values: Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.parse()).collect();
            let values =
                values.map_err(|e| bad(format!("line {i}: unparseable value ({e})")))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(bad(format!(
                        "line {i}: dimension {} differs from {d}",
                        values.len()
                    )))
                }
                _ => {}
            }
            vectors.insert(token, values);
        }
        let dim = dim.ok_or_else(|| bad("no embedding rows".to_string()))?;
        let unk = vectors
            .get(UNK_TOKEN)
            .cloned()
            .unwrap_or_else(|| vec![0.0; dim]);
        Self::new(dim, vectors, unk)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    /// Vector for a token, falling back to the unknown-token vector.
    pub fn vector(&self, token: &str) -> &[f64] {
        self.vectors.get(token).map(Vec::as_slice).unwrap_or(&self.unk)
    }

    pub fn unk_vector(&self) -> &[f64] {
        &self.unk
    }
}

/// A d-dimensional sentence vector tagged with the encoder that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding {
    pub values: Vec<f64>,
    pub encoder_id: String,
    pub source_line: Option<usize>,
}

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Which pooling (or adapter) an encoder uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderKind {
    Avg,
    Max,
    Hier { n: usize },
    Concat { parts: Vec<EncoderKind> },
    Precomputed { path: PathBuf },
}

impl EncoderKind {
    /// Canonical id: `avg`, `max`, `hier` (or `hier:N` for non-default N),
    /// parts joined with `+` for concat, file stem for precomputed.
    pub fn default_id(&self) -> String {
        match self {
            EncoderKind::Avg => "avg".to_string(),
            EncoderKind::Max => "max".to_string(),
            EncoderKind::Hier { n: 3 } => "hier".to_string(),
            EncoderKind::Hier { n } => format!("hier:{n}"),
            EncoderKind::Concat { parts } => parts
                .iter()
                .map(|p| p.default_id())
                .collect::<Vec<_>>()
                .join("+"),
            EncoderKind::Precomputed { path } => format!(
                "precomputed:{}",
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "embeddings".to_string())
            ),
        }
    }

    /// Output dimensionality given a token table width.
    pub fn native_dim(&self, table_dim: usize) -> Option<usize> {
        match self {
            EncoderKind::Avg | EncoderKind::Max | EncoderKind::Hier { .. } => Some(table_dim),
            EncoderKind::Concat { parts } => {
                let mut total = 0;
                for p in parts {
                    total += p.native_dim(table_dim)?;
                }
                Some(total)
            }
            EncoderKind::Precomputed { .. } => None,
        }
    }
}

/// Encoder identity, kind and declared output dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub encoder_id: String,
    pub kind: EncoderKind,
    pub dim: usize,
}

impl EncoderSpec {
    pub fn native(kind: EncoderKind, table_dim: usize) -> Self {
        let dim = kind.native_dim(table_dim).expect("native kind");
        Self {
            encoder_id: kind.default_id(),
            kind,
            dim,
        }
    }
}

fn require_nonempty(tokens: &TokenSequence) -> Result<(), EncoderError> {
    if tokens.is_empty() {
        Err(EncoderError::EmptySequence)
    } else {
        Ok(())
    }
}

/// Mean of token vectors, summed in sorted-token order so any permutation of
/// the input produces a bitwise identical result.
pub fn encode_avg(
    tokens: &TokenSequence,
    table: &TokenEmbeddingTable,
) -> Result<SentenceEmbedding, EncoderError> {
    require_nonempty(tokens)?;
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| tokens.tokens[a].cmp(&tokens.tokens[b]));
    let mut sum = vec![0.0; table.dim()];
    for idx in order {
        for (s, v) in sum.iter_mut().zip(table.vector(&tokens.tokens[idx])) {
            *s += v;
        }
    }
    let n = tokens.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    Ok(SentenceEmbedding {
        values: sum,
        encoder_id: "avg".to_string(),
        source_line: None,
    })
}

/// Elementwise maximum over token vectors.
pub fn encode_max(
    tokens: &TokenSequence,
    table: &TokenEmbeddingTable,
) -> Result<SentenceEmbedding, EncoderError> {
    require_nonempty(tokens)?;
    let mut out = vec![f64::NEG_INFINITY; table.dim()];
    for token in &tokens.tokens {
        for (o, v) in out.iter_mut().zip(table.vector(token)) {
            if *v > *o {
                *o = *v;
            }
        }
    }
    Ok(SentenceEmbedding {
        values: out,
        encoder_id: "max".to_string(),
        source_line: None,
    })
}

/// Window pooling: average each width-`n` token window, then take the
/// elementwise max across windows. Sentences of at most `n` tokens form a
/// single window, which makes the result equal to [`encode_avg`].
pub fn encode_hier(
    tokens: &TokenSequence,
    table: &TokenEmbeddingTable,
    n: usize,
) -> Result<SentenceEmbedding, EncoderError> {
    if n < 1 {
        return Err(EncoderError::BadWindow);
    }
    require_nonempty(tokens)?;
    if tokens.len() <= n {
        let mut e = encode_avg(tokens, table)?;
        e.encoder_id = EncoderKind::Hier { n }.default_id();
        return Ok(e);
    }
    let dim = table.dim();
    let vecs: Vec<&[f64]> = tokens.tokens.iter().map(|t| table.vector(t)).collect();
    let mut out = vec![f64::NEG_INFINITY; dim];
    let inv = 1.0 / n as f64;
    for window in vecs.windows(n) {
        for d in 0..dim {
            let mut mean = 0.0;
            for v in window {
                mean += v[d];
            }
            mean *= inv;
            if mean > out[d] {
                out[d] = mean;
            }
        }
    }
    Ok(SentenceEmbedding {
        values: out,
        encoder_id: EncoderKind::Hier { n }.default_id(),
        source_line: None,
    })
}

/// Concatenates part embeddings of one sentence, in the given order.
pub fn encode_concat(parts: &[SentenceEmbedding]) -> Result<SentenceEmbedding, EncoderError> {
    if parts.is_empty() {
        return Err(EncoderError::EmptyConcat);
    }
    let mut source_line = None;
    for p in parts {
        match (source_line, p.source_line) {
            (None, s) => source_line = s,
            (Some(a), Some(b)) if a != b => return Err(EncoderError::MixedSources(a, b)),
            _ => {}
        }
    }
    let values: Vec<f64> = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
    let encoder_id = parts
        .iter()
        .map(|p| p.encoder_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(SentenceEmbedding {
        values,
        encoder_id,
        source_line,
    })
}

/// Sentence vectors produced outside the toolkit, loaded eagerly and looked
/// up by corpus line index.
#[derive(Debug, Clone)]
pub struct PrecomputedStore {
    encoder_id: String,
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl PrecomputedStore {
    /// Loads a text or binary embedding file; the binary format is detected
    /// by its magic prefix. `declared_dim`, when given, must match the file.
    pub fn load(
        path: impl AsRef<Path>,
        encoder_id: impl Into<String>,
        declared_dim: Option<usize>,
    ) -> Result<Self, EncoderError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let (dim, vectors) = if bytes.starts_with(EMBEDDING_MAGIC) {
            parse_binary_embeddings(&bytes, path)?
        } else {
            parse_text_embeddings(&bytes, path)?
        };
        if let Some(declared) = declared_dim {
            if declared != dim {
                return Err(EncoderError::DimMismatch {
                    declared,
                    found: dim,
                });
            }
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EncoderError::NonFinite(i));
            }
        }
        Ok(Self {
            encoder_id: encoder_id.into(),
            dim,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    /// Stored vector for a corpus line.
    pub fn lookup(&self, line_index: usize) -> Result<SentenceEmbedding, EncoderError> {
        let values = self
            .vectors
            .get(line_index)
            .ok_or(EncoderError::LookupOutOfRange {
                line_index,
                count: self.vectors.len(),
            })?
            .clone();
        Ok(SentenceEmbedding {
            values,
            encoder_id: self.encoder_id.clone(),
            source_line: Some(line_index),
        })
    }
}

fn parse_text_embeddings(
    bytes: &[u8],
    path: &Path,
) -> Result<(usize, Vec<Vec<f64>>), EncoderError> {
    let bad = |reason: String| EncoderError::BadEmbeddingFile {
        path: path.display().to_string(),
        reason,
    };
    let text = std::str::from_utf8(bytes).map_err(|_| bad("not valid UTF-8".to_string()))?;
    let mut vectors = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let values: Result<Vec<f64>, _> = line.split_whitespace().map(|f| f.parse()).collect();
        let values = values.map_err(|e| bad(format!("line {i}: unparseable value ({e})")))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(bad(format!(
                    "line {i}: dimension {} differs from {d}",
                    values.len()
                )))
            }
            _ => {}
        }
        vectors.push(values);
    }
    let dim = dim.ok_or_else(|| bad("no vectors".to_string()))?;
    if dim == 0 {
        return Err(bad("zero-dimensional vectors".to_string()));
    }
    Ok((dim, vectors))
}

fn parse_binary_embeddings(
    bytes: &[u8],
    path: &Path,
) -> Result<(usize, Vec<Vec<f64>>), EncoderError> {
    let bad = |reason: String| EncoderError::BadEmbeddingFile {
        path: path.display().to_string(),
        reason,
    };
    let mut cursor = &bytes[EMBEDDING_MAGIC.len()..];
    let mut u64buf = [0u8; 8];
    let mut u32buf = [0u8; 4];
    cursor
        .read_exact(&mut u64buf)
        .map_err(|_| bad("truncated header".to_string()))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    cursor
        .read_exact(&mut u32buf)
        .map_err(|_| bad("truncated header".to_string()))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    if dim == 0 {
        return Err(bad("zero-dimensional vectors".to_string()));
    }
    let expected = count * dim * 4;
    if cursor.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, expected {expected}",
            cursor.len()
        )));
    }
    let mut vectors = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            cursor.read_exact(&mut u32buf).expect("length checked");
            v.push(f32::from_le_bytes(u32buf) as f64);
        }
        vectors.push(v);
    }
    Ok((dim, vectors))
}

/// Writes vectors in the text format: one line per vector, space-separated.
pub fn write_text_embeddings<W: Write>(
    mut w: W,
    vectors: impl IntoIterator<Item = Vec<f64>>,
) -> io::Result<()> {
    for v in vectors {
        let line = v
            .iter()
            .map(|x| format!("{x}"))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Writes vectors in the binary format: magic, u64 count, u32 dim, then f32s.
pub fn write_binary_embeddings<W: Write>(
    mut w: W,
    dim: usize,
    vectors: &[Vec<f64>],
) -> io::Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(vectors.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for v in vectors {
        assert_eq!(v.len(), dim, "vector width must match declared dim");
        for x in v {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// A ready-to-use encoder: either native pooling over a token table or a
/// precomputed store. Immutable after construction, safe to share.
#[derive(Debug, Clone)]
pub enum Encoder {
    Native {
        spec: EncoderSpec,
        table: Arc<TokenEmbeddingTable>,
    },
    Precomputed {
        spec: EncoderSpec,
        store: Arc<PrecomputedStore>,
    },
}

impl Encoder {
    pub fn native(kind: EncoderKind, table: Arc<TokenEmbeddingTable>) -> Result<Self, EncoderError> {
        let dim = kind
            .native_dim(table.dim())
            .ok_or_else(|| EncoderError::MissingTable(kind.default_id()))?;
        let spec = EncoderSpec {
            encoder_id: kind.default_id(),
            kind,
            dim,
        };
        Ok(Encoder::Native { spec, table })
    }

    pub fn precomputed(store: PrecomputedStore) -> Self {
        let spec = EncoderSpec {
            encoder_id: store.encoder_id().to_string(),
            kind: EncoderKind::Precomputed {
                path: PathBuf::new(),
            },
            dim: store.dim(),
        };
        Encoder::Precomputed {
            spec,
            store: Arc::new(store),
        }
    }

    pub fn spec(&self) -> &EncoderSpec {
        match self {
            Encoder::Native { spec, .. } | Encoder::Precomputed { spec, .. } => spec,
        }
    }

    pub fn encoder_id(&self) -> &str {
        &self.spec().encoder_id
    }

    pub fn dim(&self) -> usize {
        self.spec().dim
    }

    /// Overrides the encoder id (checkpoints key on it).
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        match &mut self {
            Encoder::Native { spec, .. } | Encoder::Precomputed { spec, .. } => {
                spec.encoder_id = id.into();
            }
        }
        self
    }

    /// Embeds one sentence. Native kinds pool the tokens; the precomputed
    /// adapter looks the sentence up by line index.
    pub fn encode(
        &self,
        tokens: &TokenSequence,
        line_index: Option<usize>,
    ) -> Result<SentenceEmbedding, EncoderError> {
        match self {
            Encoder::Native { spec, table } => {
                let mut e = encode_kind(&spec.kind, tokens, table)?;
                e.encoder_id = spec.encoder_id.clone();
                e.source_line = line_index;
                Ok(e)
            }
            Encoder::Precomputed { spec, store } => {
                let line = line_index.ok_or(EncoderError::LookupOutOfRange {
                    line_index: usize::MAX,
                    count: store.len(),
                })?;
                let mut e = store.lookup(line)?;
                e.encoder_id = spec.encoder_id.clone();
                Ok(e)
            }
        }
    }
}

fn encode_kind(
    kind: &EncoderKind,
    tokens: &TokenSequence,
    table: &TokenEmbeddingTable,
) -> Result<SentenceEmbedding, EncoderError> {
    match kind {
        EncoderKind::Avg => encode_avg(tokens, table),
        EncoderKind::Max => encode_max(tokens, table),
        EncoderKind::Hier { n } => encode_hier(tokens, table, *n),
        EncoderKind::Concat { parts } => {
            let embedded: Result<Vec<_>, _> = parts
                .iter()
                .map(|p| encode_kind(p, tokens, table))
                .collect();
            encode_concat(&embedded?)
        }
        EncoderKind::Precomputed { .. } => {
            Err(EncoderError::MissingTable("precomputed".to_string()))
        }
    }
}
