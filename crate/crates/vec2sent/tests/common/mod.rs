//! Shared helpers for the integration suites: brute-force oracles written
//! independently of the library code, a small template grammar for synthetic
//! corpora, and a lazily trained desk-scale decoder fixture.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vec2sent::corpus::{build_vocabulary, TokenSequence, Vocabulary};
use vec2sent::decoder::{
    train, Conditioning, DecoderCheckpoint, DecoderConfig, DecoderModel, HeadKind, Hyperparams,
    TrainedDecoder, TrainingMeta,
};
use vec2sent::encoders::{Encoder, EncoderKind, TokenEmbeddingTable};

// ---------------------------------------------------------------------------
// Brute-force oracles
// ---------------------------------------------------------------------------

/// Average ranks by pairwise counting: rank = (#smaller) + (#equal + 1) / 2.
pub fn oracle_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&x| {
            let less = values.iter().filter(|&&o| o < x).count() as f64;
            let equal = values.iter().filter(|&&o| o == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Spearman by definition: explicit average ranks, then Pearson computed
/// term by term.
pub fn oracle_spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = oracle_ranks(xs);
    let ry = oracle_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        None
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

/// Sentence BLEU by direct position scanning: for every hypothesis n-gram,
/// occurrences are counted with nested slice comparisons and clipped against
/// the reference counts. Same definition as the library metric (add-one
/// smoothing for n >= 2, short orders excluded, brevity penalty), computed
/// through an entirely separate path.
pub fn oracle_bleu(reference: &[&str], hypothesis: &[&str]) -> f64 {
    let c = hypothesis.len();
    let r = reference.len();
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let occurrences = |seq: &[&str], gram: &[&str]| -> usize {
        if seq.len() < gram.len() {
            return 0;
        }
        (0..=seq.len() - gram.len())
            .filter(|&i| &seq[i..i + gram.len()] == gram)
            .count()
    };
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=4usize.min(c) {
        let mut seen: Vec<&[&str]> = Vec::new();
        let mut matches = 0usize;
        for i in 0..=c - n {
            let gram = &hypothesis[i..i + n];
            if seen.iter().any(|g| g == &gram) {
                continue;
            }
            seen.push(gram);
            matches += occurrences(hypothesis, gram).min(occurrences(reference, gram));
        }
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

/// Mean-of-ranks ordering computed entirely with the counting oracle.
/// Returns encoder names best-first.
pub fn oracle_average_rank_order(
    rows: &[Vec<Option<f64>>],
    cols: &[String],
) -> Vec<String> {
    let n = cols.len();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for row in rows {
        let present: Vec<usize> = (0..n).filter(|&c| row[c].is_some()).collect();
        let values: Vec<f64> = present.iter().map(|&c| -row[c].unwrap()).collect();
        // negation makes "higher score" into "smaller value", so rank 1 = best
        let ranks = oracle_ranks(&values);
        for (k, &c) in present.iter().enumerate() {
            sums[c] += ranks[k];
            counts[c] += 1;
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|&c| counts[c] > 0).collect();
    order.sort_by(|&a, &b| {
        let ma = sums[a] / counts[a] as f64;
        let mb = sums[b] / counts[b] as f64;
        ma.partial_cmp(&mb).unwrap().then_with(|| cols[a].cmp(&cols[b]))
    });
    order.into_iter().map(|c| cols[c].clone()).collect()
}

// ---------------------------------------------------------------------------
// Template grammar
// ---------------------------------------------------------------------------

const DETS: [&str; 2] = ["the", "a"];
const ADJS: [&str; 14] = [
    "red", "big", "old", "small", "happy", "green", "tired", "young", "quiet", "brave", "tall",
    "clever", "gentle", "proud",
];
const NOUNS: [&str; 24] = [
    "dog", "cat", "bird", "horse", "child", "farmer", "teacher", "robot", "painter", "pilot",
    "singer", "doctor", "baker", "sailor", "nurse", "judge", "miner", "poet", "clown", "guard",
    "rabbit", "turtle", "monkey", "lizard",
];
const VERBS: [&str; 16] = [
    "sees", "likes", "finds", "follows", "helps", "calls", "greets", "watches", "thanks",
    "visits", "teaches", "carries", "draws", "feeds", "hears", "meets",
];
const ADVS: [&str; 10] = [
    "today", "quietly", "often", "again", "slowly", "early", "twice", "nearby", "gladly",
    "soon",
];

fn sample_sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::with_capacity(8);
    let noun_phrase = |rng: &mut ChaCha8Rng, out: &mut Vec<String>| {
        out.push(DETS.choose(rng).unwrap().to_string());
        if rng.gen_bool(0.5) {
            out.push(ADJS.choose(rng).unwrap().to_string());
        }
        out.push(NOUNS.choose(rng).unwrap().to_string());
    };
    noun_phrase(rng, &mut out);
    out.push(VERBS.choose(rng).unwrap().to_string());
    noun_phrase(rng, &mut out);
    if rng.gen_bool(0.4) {
        out.push(ADVS.choose(rng).unwrap().to_string());
    }
    out
}

/// Deterministic synthetic corpus: `n` sentences of 5..=8 tokens over a ~36
/// word vocabulary, distinct as multisets so that order-invariant encoders
/// stay injective on the corpus.
pub fn template_corpus(n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let sentence = sample_sentence(&mut rng);
        let mut key = sentence.clone();
        key.sort();
        if seen.insert(key) {
            out.push(sentence);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Desk-scale fixture
// ---------------------------------------------------------------------------

pub const DESK_TRAIN: usize = 1000;
pub const DESK_HELDOUT: usize = 200;
pub const DESK_EMB_DIM: usize = 32;
pub const DESK_SUBSET: usize = 200;
pub const DESK_MAX_EPOCHS: usize = 50;

pub struct DeskFixture {
    pub vocab: Vocabulary,
    pub table: Arc<TokenEmbeddingTable>,
    pub train_seqs: Vec<TokenSequence>,
    pub heldout_seqs: Vec<TokenSequence>,
    pub trained: TrainedDecoder,
    pub epochs_used: usize,
    pub first_epoch_loss: f64,
    pub final_loss: f64,
    /// Exact-match rate on the first [`DESK_SUBSET`] training sentences.
    pub subset_id_rate: f64,
    /// Directory holding checkpoint.v2s, vocab.txt, corpus.txt, subset.txt.
    pub dir: PathBuf,
}

fn sequences(vocab: &Vocabulary, tokens: &[Vec<String>]) -> Vec<TokenSequence> {
    tokens
        .iter()
        .map(|t| vocab.sequence(t.clone()).unwrap())
        .collect()
}

pub fn desk_corpus() -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let all = template_corpus(DESK_TRAIN + DESK_HELDOUT, 20_240_817);
    let train = all[..DESK_TRAIN].to_vec();
    let heldout = all[DESK_TRAIN..].to_vec();
    (train, heldout)
}

pub fn desk_vocab(train: &[Vec<String>], heldout: &[Vec<String>]) -> Vocabulary {
    let mut tokenized = train.to_vec();
    tokenized.extend_from_slice(heldout);
    build_vocabulary(&tokenized, 1, 100).unwrap()
}

pub fn id_rate_of(trained: &TrainedDecoder, encoder: &Encoder, seqs: &[TokenSequence]) -> f64 {
    let mut hits = 0usize;
    for seq in seqs {
        let e = encoder.encode(seq, None).unwrap();
        let g = trained.generate(&e.values).unwrap();
        if g.output.tokens == seq.tokens {
            hits += 1;
        }
    }
    hits as f64 / seqs.len() as f64
}

/// Trains the desk-scale decoder (avg encoder over fixed random 32-d token
/// embeddings, 1 layer, 64 hidden units, concat conditioning, softmax head),
/// probing the training subset every few epochs and stopping early once it
/// is reconstructed nearly perfectly. At most [`DESK_MAX_EPOCHS`] epochs run.
fn build_desk_fixture() -> DeskFixture {
    let (train_tokens, heldout_tokens) = desk_corpus();
    let vocab = desk_vocab(&train_tokens, &heldout_tokens);
    let content: Vec<String> = (0..vocab.len() as u32)
        .filter_map(|id| vocab.token_of(id).map(str::to_string))
        .filter(|t| !vec2sent::corpus::SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    let table = Arc::new(TokenEmbeddingTable::random(&content, DESK_EMB_DIM, 7));
    let encoder = Encoder::native(EncoderKind::Avg, Arc::clone(&table)).unwrap();
    let train_seqs = sequences(&vocab, &train_tokens);
    let heldout_seqs = sequences(&vocab, &heldout_tokens);

    let config = DecoderConfig {
        vocab_size: vocab.len(),
        cond_dim: DESK_EMB_DIM,
        word_dim: 64,
        hidden_dim: 64,
        num_layers: 1,
        conditioning: Conditioning::Concat,
        head: HeadKind::Softmax,
        mos_components: 5,
        max_gen_len: 12,
    };
    let mut model = DecoderModel::new(config, 42).unwrap();
    let hyper = Hyperparams {
        epochs: DESK_MAX_EPOCHS,
        batch_size: 8,
        learning_rate: 5e-3,
        clip_norm: 5.0,
        seed: 42,
    };
    let subset = &train_seqs[..DESK_SUBSET];
    let mut subset_id_rate = 0.0;
    let mut first_epoch_loss = f64::NAN;
    let placeholder = TrainingMeta {
        corpus_size: train_seqs.len(),
        epochs: 0,
        final_loss: None,
    };
    let meta = train(
        &mut model,
        |_, seq| encoder.encode(seq, None),
        &train_seqs,
        &hyper,
        |rec, current| {
            if rec.epoch == 0 {
                first_epoch_loss = rec.mean_loss;
            }
            if (rec.epoch + 1) % 5 != 0 && rec.epoch + 1 != DESK_MAX_EPOCHS {
                return true;
            }
            let probe =
                TrainedDecoder::new(current.clone(), vocab.clone(), "avg", placeholder).unwrap();
            subset_id_rate = id_rate_of(&probe, &encoder, subset);
            subset_id_rate < 0.95
        },
    )
    .unwrap();
    let epochs_used = meta.epochs;
    let final_loss = meta.final_loss.unwrap();
    let trained = TrainedDecoder::new(model, vocab.clone(), "avg", meta).unwrap();

    let dir = std::env::temp_dir().join(format!("v2s-desk-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    trained.checkpoint().save(dir.join("checkpoint.v2s")).unwrap();
    vocab.save(dir.join("vocab.txt")).unwrap();
    let corpus_text: String = train_tokens
        .iter()
        .map(|t| t.join(" ") + "\n")
        .collect();
    std::fs::write(dir.join("corpus.txt"), &corpus_text).unwrap();
    let subset_text: String = train_tokens[..DESK_SUBSET]
        .iter()
        .map(|t| t.join(" ") + "\n")
        .collect();
    std::fs::write(dir.join("subset.txt"), subset_text).unwrap();

    DeskFixture {
        vocab,
        table,
        train_seqs,
        heldout_seqs,
        trained,
        epochs_used,
        first_epoch_loss,
        final_loss,
        subset_id_rate,
        dir,
    }
}

static DESK: OnceLock<DeskFixture> = OnceLock::new();

pub fn desk_fixture() -> &'static DeskFixture {
    DESK.get_or_init(build_desk_fixture)
}

pub fn desk_avg_encoder(fixture: &DeskFixture) -> Encoder {
    Encoder::native(EncoderKind::Avg, Arc::clone(&fixture.table)).unwrap()
}

/// Loads the fixture's checkpoint from disk, as an independent process would.
pub fn reload_trained(fixture: &DeskFixture) -> TrainedDecoder {
    let ck = DecoderCheckpoint::load(fixture.dir.join("checkpoint.v2s")).unwrap();
    let vocab = Vocabulary::load(fixture.dir.join("vocab.txt")).unwrap();
    ck.into_trained(vocab).unwrap()
}
