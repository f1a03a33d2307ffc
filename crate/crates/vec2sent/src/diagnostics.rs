//! Reconstruction diagnostics: exact match, permutation match, BLEU, and an
//! injected soft scorer, aggregated into per-encoder reports.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenSequence;
use crate::decoder::TrainedDecoder;
use crate::encoders::Encoder;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("cannot aggregate over an empty pair list")]
    EmptyPairs,
    #[error("checkpoint was trained with encoder {expected:?}, got {got:?}")]
    EncoderMismatch { expected: String, got: String },
    #[error("encoding failed: {0}")]
    Encode(#[from] crate::encoders::EncoderError),
    #[error("generation failed: {0}")]
    Generate(#[from] crate::decoder::DecoderError),
    #[error("pairs file: {0}")]
    BadPairsFile(String),
}

/// An input sentence and its reconstruction, tokenized identically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub x: TokenSequence,
    pub y: TokenSequence,
}

/// Exact reconstruction: token sequences are equal element-wise.
pub fn is_id(x: &TokenSequence, y: &TokenSequence) -> bool {
    x.tokens == y.tokens
}

/// Reconstruction up to word order: the token multisets are equal.
pub fn is_perm(x: &TokenSequence, y: &TokenSequence) -> bool {
    if x.len() != y.len() {
        return false;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &x.tokens {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    for t in &y.tokens {
        match counts.get_mut(t.as_str()) {
            Some(c) => *c -= 1,
            None => return false,
        }
    }
    counts.values().all(|&c| c == 0)
}

/// Exact-match and permutation rates over a pair set, plus their ratio.
/// The ratio is undefined (None) when no pair is even a permutation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub id_rate: f64,
    pub perm_rate: f64,
    pub id_over_perm: Option<f64>,
}

pub fn rates(pairs: &[SentencePair]) -> Result<Rates, DiagnosticsError> {
    if pairs.is_empty() {
        return Err(DiagnosticsError::EmptyPairs);
    }
    let n = pairs.len() as f64;
    let id = pairs.iter().filter(|p| is_id(&p.x, &p.y)).count() as f64 / n;
    let perm = pairs.iter().filter(|p| is_perm(&p.x, &p.y)).count() as f64 / n;
    let ratio = if perm > 0.0 { Some(id / perm) } else { None };
    Ok(Rates {
        id_rate: id,
        perm_rate: perm,
        id_over_perm: ratio,
    })
}

const BLEU_MAX_ORDER: usize = 4;

/// Sentence-level BLEU-4 in [0, 100]; `x` is the single reference, `y` the
/// hypothesis.
///
/// Modified n-gram precisions use add-one smoothing for n >= 2; orders the
/// hypothesis is too short to instantiate are excluded from the geometric
/// mean, so a perfect one-token hypothesis still scores 100. An empty
/// hypothesis or zero unigram overlap scores 0.
pub fn bleu(x: &TokenSequence, y: &TokenSequence) -> f64 {
    let r = x.len();
    let c = y.len();
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=BLEU_MAX_ORDER.min(c) {
        let matches = clipped_ngram_matches(&x.tokens, &y.tokens, n);
        let possible = c - n + 1;
        let p = if n == 1 {
            if matches == 0 {
                return 0.0;
            }
            matches as f64 / possible as f64
        } else {
            (matches + 1) as f64 / (possible + 1) as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    100.0 * bp * (log_sum / orders as f64).exp()
}

fn clipped_ngram_matches(reference: &[String], hypothesis: &[String], n: usize) -> usize {
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    if reference.len() >= n {
        for g in reference.windows(n) {
            *ref_counts.entry(g).or_insert(0) += 1;
        }
    }
    let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
    for g in hypothesis.windows(n) {
        *hyp_counts.entry(g).or_insert(0) += 1;
    }
    hyp_counts
        .into_iter()
        .map(|(g, c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Arithmetic mean of per-pair sentence BLEU.
pub fn avg_bleu(pairs: &[SentencePair]) -> Result<f64, DiagnosticsError> {
    if pairs.is_empty() {
        return Err(DiagnosticsError::EmptyPairs);
    }
    Ok(pairs.iter().map(|p| bleu(&p.x, &p.y)).sum::<f64>() / pairs.len() as f64)
}

/// An external pairwise scorer over surface strings. Failures are reported
/// per pair so the caller can skip them.
pub type PairScorer<'a> = dyn Fn(&str, &str) -> Result<f64, String> + 'a;

/// Mean output of an injected scorer. `mean` is absent (not zero) when no
/// scorer is configured or every pair failed.
#[derive(Debug, Clone, PartialEq)]
pub struct MoverResult {
    pub mean: Option<f64>,
    /// Pairs the scorer failed on, skipped with a warning on stderr.
    pub skipped: usize,
}

pub fn mover_adapter(scorer: Option<&PairScorer>, pairs: &[SentencePair]) -> MoverResult {
    let Some(scorer) = scorer else {
        return MoverResult {
            mean: None,
            skipped: 0,
        };
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut skipped = 0usize;
    for p in pairs {
        match scorer(&p.x.text(), &p.y.text()) {
            Ok(v) => {
                sum += v;
                count += 1;
            }
            Err(e) => {
                skipped += 1;
                eprintln!("warning: scorer failed on pair {:?}: {e}", p.x.text());
            }
        }
    }
    MoverResult {
        mean: if count > 0 { Some(sum / count as f64) } else { None },
        skipped,
    }
}

/// Token-overlap F1 in [0, 100] over whitespace tokens. A lightweight
/// built-in soft scorer; heavier scorers are injected the same way.
pub fn lexical_overlap_f1(x: &str, y: &str) -> Result<f64, String> {
    let xs: Vec<&str> = x.split_whitespace().collect();
    let ys: Vec<&str> = y.split_whitespace().collect();
    if xs.is_empty() && ys.is_empty() {
        return Ok(100.0);
    }
    if xs.is_empty() || ys.is_empty() {
        return Ok(0.0);
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &xs {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for t in &ys {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    Ok(100.0 * 2.0 * overlap as f64 / (xs.len() + ys.len()) as f64)
}

/// Per-encoder diagnostic values over an evaluation set. Rates are fractions
/// in [0, 1]; BLEU and the soft score are in [0, 100].
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticReport {
    pub encoder_id: String,
    pub n_pairs: usize,
    pub id_rate: f64,
    pub perm_rate: f64,
    pub id_over_perm: Option<f64>,
    pub bleu: f64,
    pub mover: Option<f64>,
}

fn pct2(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl DiagnosticReport {
    /// JSON with the rate fields rendered as percentages with two decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("encoder_id".into(), self.encoder_id.clone().into());
        map.insert("n_pairs".into(), self.n_pairs.into());
        map.insert("id_rate".into(), pct2(self.id_rate).into());
        map.insert("perm_rate".into(), pct2(self.perm_rate).into());
        map.insert(
            "id_over_perm".into(),
            match self.id_over_perm {
                Some(v) => pct2(v).into(),
                None => serde_json::Value::Null,
            },
        );
        map.insert("bleu".into(), round2(self.bleu).into());
        if let Some(m) = self.mover {
            map.insert("mover".into(), round2(m).into());
        }
        serde_json::Value::Object(map)
    }

    /// Diagnostic values keyed by the row names used in score tables.
    pub fn as_rows(&self) -> Vec<(String, Option<f64>)> {
        vec![
            ("BLEU".to_string(), Some(self.bleu)),
            ("Mover".to_string(), self.mover),
            ("PERM".to_string(), Some(self.perm_rate * 100.0)),
            ("Id".to_string(), Some(self.id_rate * 100.0)),
            (
                "Id/PERM".to_string(),
                self.id_over_perm.map(|v| v * 100.0),
            ),
        ]
    }
}

/// A tokenized evaluation sentence with its corpus line (for precomputed
/// embedding lookup).
#[derive(Debug, Clone)]
pub struct EvalSentence {
    pub seq: TokenSequence,
    pub line_index: usize,
}

/// Encodes every evaluation sentence, greedily reconstructs it, and
/// aggregates all diagnostics. The pairs are returned alongside the report
/// so they can be written out for offline scoring.
pub fn diagnose(
    decoder: &TrainedDecoder,
    encoder: &Encoder,
    eval: &[EvalSentence],
    scorer: Option<&PairScorer>,
) -> Result<(DiagnosticReport, Vec<SentencePair>), DiagnosticsError> {
    if eval.is_empty() {
        return Err(DiagnosticsError::EmptyPairs);
    }
    if decoder.encoder_id() != encoder.encoder_id() {
        return Err(DiagnosticsError::EncoderMismatch {
            expected: decoder.encoder_id().to_string(),
            got: encoder.encoder_id().to_string(),
        });
    }
    let mut pairs = Vec::with_capacity(eval.len());
    for s in eval {
        let embedding = encoder.encode(&s.seq, Some(s.line_index))?;
        let gen = decoder.generate(&embedding.values)?;
        pairs.push(SentencePair {
            x: s.seq.clone(),
            y: gen.output,
        });
    }
    let r = rates(&pairs)?;
    let b = avg_bleu(&pairs)?;
    let mover = mover_adapter(scorer, &pairs);
    let report = DiagnosticReport {
        encoder_id: encoder.encoder_id().to_string(),
        n_pairs: pairs.len(),
        id_rate: r.id_rate,
        perm_rate: r.perm_rate,
        id_over_perm: r.id_over_perm,
        bleu: b,
        mover: mover.mean,
    };
    Ok((report, pairs))
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRecord {
    input: String,
    output: String,
}

/// Writes pairs as JSON-lines `{input, output}` records.
pub fn write_pairs<W: Write>(mut w: W, pairs: &[SentencePair]) -> std::io::Result<()> {
    for p in pairs {
        let rec = PairRecord {
            input: p.x.text(),
            output: p.y.text(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

/// Reads a pairs file back into surface-string pairs.
pub fn read_pairs<R: BufRead>(r: R) -> Result<Vec<(String, String)>, DiagnosticsError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| DiagnosticsError::BadPairsFile(format!("line {i}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|e| DiagnosticsError::BadPairsFile(format!("line {i}: {e}")))?;
        out.push((rec.input, rec.output));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence::new(
            tokens.iter().map(|t| t.to_string()).collect(),
            vec![0; tokens.len()].iter().map(|_| 4u32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn id_matches_equal_sequences() {
        assert!(is_id(&seq(&["a", "b"]), &seq(&["a", "b"])));
        assert!(!is_id(&seq(&["a", "b"]), &seq(&["b", "a"])));
        assert!(is_id(&seq(&[]), &seq(&[])));
    }

    #[test]
    fn perm_counts_duplicates() {
        assert!(is_perm(&seq(&["a", "b", "b"]), &seq(&["b", "a", "b"])));
        assert!(!is_perm(&seq(&["a", "b", "b"]), &seq(&["a", "b"])));
        assert!(!is_perm(&seq(&["a", "a", "b"]), &seq(&["a", "b", "b"])));
    }

    #[test]
    fn rates_all_identical_pairs() {
        let pairs = vec![
            SentencePair {
                x: seq(&["a"]),
                y: seq(&["a"]),
            };
            3
        ];
        let r = rates(&pairs).unwrap();
        assert_eq!(r.id_rate, 1.0);
        assert_eq!(r.perm_rate, 1.0);
        assert_eq!(r.id_over_perm, Some(1.0));
    }

    #[test]
    fn rates_ratio_undefined_when_no_permutations() {
        let pairs = vec![SentencePair {
            x: seq(&["a"]),
            y: seq(&["b"]),
        }];
        let r = rates(&pairs).unwrap();
        assert_eq!(r.id_over_perm, None);
    }

    #[test]
    fn rates_empty_is_error() {
        assert!(matches!(rates(&[]), Err(DiagnosticsError::EmptyPairs)));
    }

    #[test]
    fn bleu_perfect_match_is_100() {
        let x = seq(&["the", "cat", "sat", "down", "now"]);
        assert!((bleu(&x, &x) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_short_perfect_match_is_100() {
        // orders 2..4 have no possible n-grams and are excluded
        let x = seq(&["hi"]);
        assert!((bleu(&x, &x) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_empty_hypothesis_is_0() {
        assert_eq!(bleu(&seq(&["a", "b"]), &seq(&[])), 0.0);
    }

    #[test]
    fn bleu_swapped_middle_tokens_matches_hand_count() {
        // x = the cat sat down, y = the cat down sat
        //   p1 = 4/4
        //   p2 = (1+1)/(3+1)  (only "the cat" matches)
        //   p3 = (0+1)/(2+1)
        //   p4 = (0+1)/(1+1)
        //   bp = 1, bleu = 100 * (1 * 1/2 * 1/3 * 1/2)^(1/4)
        let x = seq(&["the", "cat", "sat", "down"]);
        let y = seq(&["the", "cat", "down", "sat"]);
        let expected = 100.0 * (1.0_f64 * 0.5 * (1.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu(&x, &y) - expected).abs() < 1e-9);
        assert!((bleu(&x, &y) - 53.72849659).abs() < 1e-6);
    }

    #[test]
    fn bleu_brevity_penalty_applies_to_short_hypothesis() {
        let x = seq(&["a", "b", "c", "d"]);
        let y = seq(&["a", "b"]);
        // p1 = 1, p2 = (1+1)/(1+1) = 1, bp = exp(1 - 4/2)
        let expected = 100.0 * (1.0f64 - 2.0).exp();
        assert!((bleu(&x, &y) - expected).abs() < 1e-9);
    }

    #[test]
    fn avg_bleu_is_the_mean() {
        let perfect = SentencePair {
            x: seq(&["a", "b", "c", "d"]),
            y: seq(&["a", "b", "c", "d"]),
        };
        let empty = SentencePair {
            x: seq(&["a", "b", "c", "d"]),
            y: seq(&[]),
        };
        let avg = avg_bleu(&[perfect, empty]).unwrap();
        assert!((avg - 50.0).abs() < 1e-12);
    }

    #[test]
    fn mover_mean_of_constant_scorer() {
        let pairs = vec![
            SentencePair {
                x: seq(&["a"]),
                y: seq(&["b"]),
            };
            4
        ];
        let scorer = |_: &str, _: &str| Ok(70.0);
        let r = mover_adapter(Some(&scorer), &pairs);
        assert_eq!(r.mean, Some(70.0));
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn mover_absent_without_scorer() {
        let pairs = vec![SentencePair {
            x: seq(&["a"]),
            y: seq(&["b"]),
        }];
        let r = mover_adapter(None, &pairs);
        assert_eq!(r.mean, None);
    }

    #[test]
    fn mover_skips_failing_pairs() {
        let pairs = vec![
            SentencePair {
                x: seq(&["a"]),
                y: seq(&["b"]),
            },
            SentencePair {
                x: seq(&["fail"]),
                y: seq(&["b"]),
            },
        ];
        let scorer = |x: &str, _: &str| {
            if x == "fail" {
                Err("boom".to_string())
            } else {
                Ok(60.0)
            }
        };
        let r = mover_adapter(Some(&scorer), &pairs);
        assert_eq!(r.mean, Some(60.0));
        assert_eq!(r.skipped, 1);
    }

    #[test]
    fn report_json_uses_two_decimal_percentages() {
        let report = DiagnosticReport {
            encoder_id: "avg".into(),
            n_pairs: 3,
            id_rate: 1.0 / 3.0,
            perm_rate: 2.0 / 3.0,
            id_over_perm: Some(0.5),
            bleu: 53.728496,
            mover: None,
        };
        let j = report.to_json();
        assert_eq!(j["id_rate"], 33.33);
        assert_eq!(j["perm_rate"], 66.67);
        assert_eq!(j["id_over_perm"], 50.0);
        assert_eq!(j["bleu"], 53.73);
        assert!(j.get("mover").is_none());
    }

    #[test]
    fn pairs_file_round_trip() {
        let pairs = vec![
            SentencePair {
                x: seq(&["i", "'m", "here", "."]),
                y: seq(&["i", "'m", "there", "."]),
            },
            SentencePair {
                x: seq(&["b"]),
                y: seq(&[]),
            },
        ];
        let mut buf = Vec::new();
        write_pairs(&mut buf, &pairs).unwrap();
        let back = read_pairs(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back[0].0, "i 'm here .");
        assert_eq!(back[0].1, "i 'm there .");
        assert_eq!(back[1].1, "");
    }

    fn arb_tokens() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(
            proptest::sample::select(vec!["a", "b", "c", "dog", "runs", "."]),
            0..8,
        )
        .prop_map(|v| v.into_iter().map(str::to_string).collect())
    }

    proptest! {
        #[test]
        fn id_implies_perm(x in arb_tokens(), y in arb_tokens()) {
            let sx = TokenSequence::new(x.clone(), vec![4; x.len()]).unwrap();
            let sy = TokenSequence::new(y.clone(), vec![4; y.len()]).unwrap();
            if is_id(&sx, &sy) {
                prop_assert!(is_perm(&sx, &sy));
            }
        }

        #[test]
        fn perm_is_symmetric(x in arb_tokens(), y in arb_tokens()) {
            let sx = TokenSequence::new(x.clone(), vec![4; x.len()]).unwrap();
            let sy = TokenSequence::new(y.clone(), vec![4; y.len()]).unwrap();
            prop_assert_eq!(is_perm(&sx, &sy), is_perm(&sy, &sx));
        }

        #[test]
        fn bleu_is_bounded_and_reflexive(x in arb_tokens(), y in arb_tokens()) {
            let sx = TokenSequence::new(x.clone(), vec![4; x.len()]).unwrap();
            let sy = TokenSequence::new(y.clone(), vec![4; y.len()]).unwrap();
            let b = bleu(&sx, &sy);
            prop_assert!((0.0..=100.0).contains(&b));
            if !sx.is_empty() {
                prop_assert!((bleu(&sx, &sx) - 100.0).abs() < 1e-9);
            }
        }
    }
}
