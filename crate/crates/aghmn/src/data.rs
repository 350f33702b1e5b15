//! Corpus ingestion, vocabulary and embedding management, and a synthetic
//! contextual-emotion corpus generator.
//!
//! Corpus files are line-delimited JSON, one record per utterance:
//! `{"conv_id": ..., "turn": ..., "speaker": ..., "text": ..., "label": ...}`.
//! Label strings are mapped to indices through the configured labels list.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Index 0 of every vocabulary: the unknown word. Its embedding row is zero
/// and stays frozen during training.
pub const UNKNOWN_INDEX: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: String,
    pub tokens: Vec<String>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// One corpus line on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CorpusRecord {
    conv_id: String,
    turn: usize,
    speaker: String,
    text: String,
    label: String,
}

/// Lowercases, splits on whitespace, and breaks punctuation out into
/// separate single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Loads a corpus file, grouping records by conversation id (in order of
/// first appearance) and sorting each conversation by turn index.
pub fn load_conversations(path: &Path, labels: &[String]) -> Result<Vec<Conversation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_conversations(&text, labels)
}

pub fn parse_conversations(text: &str, labels: &[String]) -> Result<Vec<Conversation>> {
    let label_index: HashMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(usize, Utterance)>> = HashMap::new();

    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let label = *label_index.get(record.label.as_str()).ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("unknown label `{}`", record.label),
        })?;
        if record.turn == 0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("turn index must be >= 1 in conversation `{}`", record.conv_id),
            });
        }
        let tokens = tokenize(&record.text);
        if tokens.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "utterance empty after tokenization (conversation `{}`, turn {})",
                    record.conv_id, record.turn
                ),
            });
        }
        if !grouped.contains_key(&record.conv_id) {
            order.push(record.conv_id.clone());
        }
        let entry = grouped.entry(record.conv_id.clone()).or_default();
        if entry.iter().any(|(t, _)| *t == record.turn) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate turn {} in conversation `{}`", record.turn, record.conv_id),
            });
        }
        entry.push((
            record.turn,
            Utterance {
                speaker: record.speaker,
                tokens,
                label,
            },
        ));
    }

    let mut conversations = Vec::with_capacity(order.len());
    for id in order {
        let mut turns = grouped.remove(&id).expect("id recorded on first sight");
        turns.sort_by_key(|(t, _)| *t);
        conversations.push(Conversation {
            id,
            utterances: turns.into_iter().map(|(_, u)| u).collect(),
        });
    }
    Ok(conversations)
}

/// Serializes conversations back into the corpus line format. Token lists
/// are joined with single spaces.
pub fn serialize_conversations(conversations: &[Conversation], labels: &[String]) -> String {
    let mut out = String::new();
    for conv in conversations {
        for (i, utt) in conv.utterances.iter().enumerate() {
            let record = CorpusRecord {
                conv_id: conv.id.clone(),
                turn: i + 1,
                speaker: utt.speaker.clone(),
                text: utt.tokens.join(" "),
                label: labels[utt.label].clone(),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn save_conversations(path: &Path, conversations: &[Conversation], labels: &[String]) -> Result<()> {
    fs::write(path, serialize_conversations(conversations, labels))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Word-to-index map with index 0 reserved for unknown words.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    index_to_word: Vec<String>,
    #[serde(skip)]
    word_to_index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Rebuilds the lookup map; used from deserialization paths.
    pub fn from_words(index_to_word: Vec<String>) -> Self {
        let word_to_index = index_to_word
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary {
            index_to_word,
            word_to_index,
        }
    }

    /// Index for a word; out-of-vocabulary words map to [`UNKNOWN_INDEX`].
    pub fn index_of(&self, word: &str) -> usize {
        self.word_to_index.get(word).copied().unwrap_or(UNKNOWN_INDEX)
    }

    pub fn word(&self, index: usize) -> &str {
        &self.index_to_word[index]
    }

    /// Vocabulary size including the unknown slot.
    pub fn len(&self) -> usize {
        self.index_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_to_word.len() <= 1
    }

    pub fn words(&self) -> &[String] {
        &self.index_to_word
    }
}

/// Builds a vocabulary from corpus frequencies. Words below `min_freq` map
/// to unknown. Indices are assigned by descending frequency, ties broken
/// lexicographically, starting at 1.
pub fn build_vocab(conversations: &[Conversation], min_freq: usize) -> Vocabulary {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for conv in conversations {
        for utt in &conv.utterances {
            for token in &utt.tokens {
                *freq.entry(token.as_str()).or_default() += 1;
            }
        }
    }
    let mut entries: Vec<(&str, usize)> =
        freq.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut index_to_word = Vec::with_capacity(entries.len() + 1);
    index_to_word.push("<unk>".to_string());
    index_to_word.extend(entries.into_iter().map(|(w, _)| w.to_string()));
    Vocabulary::from_words(index_to_word)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Pretrained,
    Random,
}

/// Embedding matrix aligned with a vocabulary, one row per word.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub provenance: Vec<Provenance>,
}

impl EmbeddingTable {
    /// Fraction of non-unknown rows coming from the pretrained file.
    pub fn coverage(&self) -> f64 {
        if self.provenance.len() <= 1 {
            return 0.0;
        }
        let pretrained = self.provenance[1..]
            .iter()
            .filter(|p| **p == Provenance::Pretrained)
            .count();
        pretrained as f64 / (self.provenance.len() - 1) as f64
    }
}

/// Builds an embedding table with no pretrained file: every non-unknown row
/// is a seeded uniform draw from [-0.25, 0.25).
pub fn random_embeddings(vocab: &Vocabulary, d_w: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab.len();
    let mut matrix = Tensor::zeros(&[v, d_w]);
    let provenance = vec![Provenance::Random; v];
    for row in 1..v {
        for c in 0..d_w {
            matrix.data_mut()[row * d_w + c] = rng.random_range(-0.25..0.25);
        }
    }
    EmbeddingTable { matrix, provenance }
}

/// Loads pretrained vectors from a whitespace-separated text file, one word
/// per line. A first line consisting of exactly two integers is treated as a
/// `count dim` header and skipped. Vocabulary words missing from the file
/// get seeded random rows; the unknown row stays zero.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, d_w: usize, seed: u64) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pretrained: HashMap<String, Vec<f64>> = HashMap::new();
    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1
            && fields.len() == 2
            && fields[0].parse::<usize>().is_ok()
            && fields[1].parse::<usize>().is_ok()
        {
            continue;
        }
        let word = fields[0];
        let values: std::result::Result<Vec<f64>, _> =
            fields[1..].iter().map(|f| f.parse::<f64>()).collect();
        let values = values.map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad float for word `{word}`: {e}"),
        })?;
        if values.len() != d_w {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("word `{word}` has {} values, expected {d_w}", values.len()),
            });
        }
        pretrained.insert(word.to_string(), values);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vocab.len();
    let mut matrix = Tensor::zeros(&[v, d_w]);
    let mut provenance = vec![Provenance::Random; v];
    for (row, prov) in provenance.iter_mut().enumerate().skip(1) {
        if let Some(values) = pretrained.get(vocab.word(row)) {
            matrix.data_mut()[row * d_w..(row + 1) * d_w].copy_from_slice(values);
            *prov = Provenance::Pretrained;
        } else {
            for c in 0..d_w {
                matrix.data_mut()[row * d_w + c] = rng.random_range(-0.25..0.25);
            }
        }
    }
    Ok(EmbeddingTable { matrix, provenance })
}

// ── Synthetic corpus ─────────────────────────────────────────────────

/// Bookkeeping emitted next to a generated corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub n_conversations: usize,
    pub n_utterances: usize,
    pub n_classes: usize,
    pub carry_prob: f64,
    pub len_range: (usize, usize),
    pub labels: Vec<String>,
    pub keywords: Vec<Vec<String>>,
    pub fillers: Vec<String>,
    /// Utterances whose keywords were suppressed because the label was
    /// carried from the speaker's previous utterance.
    pub carried_count: usize,
    /// Exact accuracy of the keyword-lookup oracle (predict the keyword's
    /// class, or class 0 when no keyword is present) on this corpus.
    pub oracle_correct_count: usize,
}

const FILLERS: [&str; 14] = [
    "well", "so", "um", "right", "okay", "you", "know", "i", "mean", "just", "really", "kind",
    "of", "maybe",
];

const KEYWORDS_PER_CLASS: usize = 4;

fn class_keywords(n_classes: usize) -> Vec<Vec<String>> {
    // Deterministic pseudo-words, disjoint across classes and from fillers.
    let consonants = ["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    let vowels = ["a", "e", "i", "o", "u"];
    let mut pool = Vec::new();
    for c1 in consonants {
        for v1 in vowels {
            for c2 in consonants {
                pool.push(format!("{c1}{v1}{c2}o"));
            }
        }
    }
    (0..n_classes)
        .map(|class| {
            (0..KEYWORDS_PER_CLASS)
                .map(|j| pool[class * KEYWORDS_PER_CLASS + j].clone())
                .collect()
        })
        .collect()
}

/// Generates a deterministic corpus of two-speaker conversations in which a
/// fraction of utterances can only be classified from history.
///
/// Each class owns a disjoint keyword set. An ordinary utterance mixes
/// filler words with keywords of its own class. With probability
/// `carry_prob`, an utterance instead copies the label of the same
/// speaker's previous utterance and suppresses its keywords, so its class is
/// recoverable only from context. Speakers alternate, so "same speaker" is
/// always two turns back.
pub fn generate_synthetic(
    n_conversations: usize,
    len_range: (usize, usize),
    n_classes: usize,
    carry_prob: f64,
    seed: u64,
) -> Result<(Vec<Conversation>, GeneratorSpec)> {
    if n_classes < 2 {
        return Err(Error::contract(format!("need at least 2 classes, got {n_classes}")));
    }
    if len_range.0 == 0 || len_range.0 > len_range.1 {
        return Err(Error::contract(format!("bad length range {len_range:?}")));
    }
    if !(0.0..=1.0).contains(&carry_prob) {
        return Err(Error::contract(format!("carry probability {carry_prob} outside [0,1]")));
    }

    let keywords = class_keywords(n_classes);
    let fillers: Vec<String> = FILLERS.iter().map(|f| f.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut conversations = Vec::with_capacity(n_conversations);
    let mut n_utterances = 0;
    let mut carried_count = 0;
    let mut oracle_correct_count = 0;

    for conv_idx in 0..n_conversations {
        let length = rng.random_range(len_range.0..=len_range.1);
        let mut utterances: Vec<Utterance> = Vec::with_capacity(length);
        for turn in 0..length {
            let speaker = if turn % 2 == 0 { "A" } else { "B" };
            let prev_same = if turn >= 2 { Some(utterances[turn - 2].label) } else { None };
            let carried = prev_same.is_some() && rng.random_bool(carry_prob);

            let (label, tokens) = if carried {
                let label = prev_same.expect("checked above");
                let n_fill = rng.random_range(3..=6);
                let tokens: Vec<String> = (0..n_fill)
                    .map(|_| fillers.choose(&mut rng).expect("nonempty").clone())
                    .collect();
                (label, tokens)
            } else {
                let label = rng.random_range(0..n_classes);
                let n_fill = rng.random_range(1..=3);
                let n_kw = rng.random_range(1..=2);
                let mut tokens: Vec<String> = (0..n_fill)
                    .map(|_| fillers.choose(&mut rng).expect("nonempty").clone())
                    .collect();
                for _ in 0..n_kw {
                    tokens.push(keywords[label].choose(&mut rng).expect("nonempty").clone());
                }
                tokens.shuffle(&mut rng);
                (label, tokens)
            };

            // What the keyword oracle would predict.
            let oracle_pred = tokens
                .iter()
                .find_map(|tok| keywords.iter().position(|set| set.contains(tok)))
                .unwrap_or(0);
            if oracle_pred == label {
                oracle_correct_count += 1;
            }
            if carried {
                carried_count += 1;
            }
            n_utterances += 1;
            utterances.push(Utterance {
                speaker: speaker.to_string(),
                tokens,
                label,
            });
        }
        conversations.push(Conversation {
            id: format!("synth-{conv_idx:04}"),
            utterances,
        });
    }

    let spec = GeneratorSpec {
        seed,
        n_conversations,
        n_utterances,
        n_classes,
        carry_prob,
        len_range,
        labels: (0..n_classes).map(|c| format!("c{c}")).collect(),
        keywords,
        fillers,
        carried_count,
        oracle_correct_count,
    };
    Ok((conversations, spec))
}

/// Runs the keyword-lookup oracle over a corpus: predict the class owning a
/// keyword found in the utterance, class 0 otherwise. Returns accuracy.
pub fn keyword_oracle_accuracy(conversations: &[Conversation], keywords: &[Vec<String>]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for conv in conversations {
        for utt in &conv.utterances {
            let pred = utt
                .tokens
                .iter()
                .find_map(|tok| keywords.iter().position(|set| set.contains(tok)))
                .unwrap_or(0);
            if pred == utt.label {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|c| format!("c{c}")).collect()
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Hello, World!  it's fine"),
            vec!["hello", ",", "world", "!", "it", "'", "s", "fine"]
        );
        assert_eq!(tokenize("  \t "), Vec::<String>::new());
    }

    #[test]
    fn two_line_fixture_loads_one_conversation() {
        let text = concat!(
            r#"{"conv_id":"d1","turn":1,"speaker":"A","text":"hi there","label":"c0"}"#,
            "\n",
            r#"{"conv_id":"d1","turn":2,"speaker":"B","text":"hello","label":"c1"}"#,
            "\n",
        );
        let convs = parse_conversations(text, &labels(2)).unwrap();
        assert_eq!(convs.len(), 1);
        assert_eq!(convs[0].len(), 2);
        assert_eq!(convs[0].utterances[0].tokens, vec!["hi", "there"]);
        assert_eq!(convs[0].utterances[1].label, 1);
    }

    #[test]
    fn out_of_order_turns_are_sorted() {
        let text = concat!(
            r#"{"conv_id":"d1","turn":2,"speaker":"B","text":"second","label":"c0"}"#,
            "\n",
            r#"{"conv_id":"d1","turn":1,"speaker":"A","text":"first","label":"c1"}"#,
            "\n",
        );
        let convs = parse_conversations(text, &labels(2)).unwrap();
        assert_eq!(convs[0].utterances[0].tokens, vec!["first"]);
        assert_eq!(convs[0].utterances[1].tokens, vec!["second"]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"conv_id":"d1","turn":1,"speaker":"A","text":"ok","label":"c0"}"#,
            "\n",
            "not json\n",
        );
        let err = parse_conversations(text, &labels(2)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_utterance_after_tokenization_is_rejected() {
        let text = r#"{"conv_id":"d9","turn":3,"speaker":"A","text":"   ","label":"c0"}"#;
        let err = parse_conversations(text, &labels(2)).unwrap_err().to_string();
        assert!(err.contains("d9") && err.contains('3'), "{err}");
    }

    #[test]
    fn load_after_serialize_is_identity() {
        let (convs, spec) = generate_synthetic(8, (3, 7), 3, 0.3, 11).unwrap();
        let text = serialize_conversations(&convs, &spec.labels);
        let reloaded = parse_conversations(&text, &spec.labels).unwrap();
        assert_eq!(convs, reloaded);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let convs = vec![Conversation {
            id: "c".into(),
            utterances: vec![Utterance {
                speaker: "A".into(),
                tokens: vec!["a".into(), "a".into(), "b".into()],
                label: 0,
            }],
        }];
        let vocab = build_vocab(&convs, 1);
        assert_eq!(vocab.index_of("a"), 1);
        assert_eq!(vocab.index_of("b"), 2);
        assert_eq!(vocab.index_of("zzz"), UNKNOWN_INDEX);

        let vocab = build_vocab(&convs, 2);
        assert_eq!(vocab.index_of("a"), 1);
        assert_eq!(vocab.index_of("b"), UNKNOWN_INDEX);
    }

    #[test]
    fn vocab_is_deterministic() {
        let (convs, _) = generate_synthetic(20, (3, 9), 4, 0.3, 5).unwrap();
        let a = build_vocab(&convs, 1);
        let b = build_vocab(&convs, 1);
        assert_eq!(a.words(), b.words());
    }

    #[test]
    fn embeddings_with_empty_file_are_random_except_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        std::fs::write(&path, "").unwrap();
        let convs = vec![Conversation {
            id: "c".into(),
            utterances: vec![Utterance {
                speaker: "A".into(),
                tokens: vec!["apple".into(), "pear".into()],
                label: 0,
            }],
        }];
        let vocab = build_vocab(&convs, 1);
        let table = load_embeddings(&path, &vocab, 4, 3).unwrap();
        assert_eq!(table.matrix.row(UNKNOWN_INDEX), &[0.0; 4]);
        assert!(table.matrix.row(1).iter().any(|v| *v != 0.0));
        assert_eq!(table.coverage(), 0.0);
    }

    #[test]
    fn embeddings_copy_matching_rows_and_report_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        std::fs::write(&path, "2 3\napple 0.1 0.2 0.3\nmissing 1 2 3\n").unwrap();
        let convs = vec![Conversation {
            id: "c".into(),
            utterances: vec![Utterance {
                speaker: "A".into(),
                tokens: vec!["apple".into(), "pear".into(), "plum".into()],
                label: 0,
            }],
        }];
        let vocab = build_vocab(&convs, 1);
        let table = load_embeddings(&path, &vocab, 3, 3).unwrap();
        let apple_row = table.matrix.row(vocab.index_of("apple"));
        assert_eq!(apple_row, &[0.1, 0.2, 0.3]);
        assert_eq!(table.provenance[vocab.index_of("apple")], Provenance::Pretrained);
        assert_eq!(table.provenance[vocab.index_of("pear")], Provenance::Random);
        // Hand count: 1 pretrained of 3 non-unknown rows.
        assert!((table.coverage() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn embeddings_dimension_mismatch_names_word() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vecs.txt");
        std::fs::write(&path, "apple 0.1 0.2\n").unwrap();
        let convs = vec![Conversation {
            id: "c".into(),
            utterances: vec![Utterance {
                speaker: "A".into(),
                tokens: vec!["apple".into()],
                label: 0,
            }],
        }];
        let vocab = build_vocab(&convs, 1);
        let err = load_embeddings(&path, &vocab, 3, 3).unwrap_err().to_string();
        assert!(err.contains("apple"), "{err}");
    }

    #[test]
    fn synthetic_corpus_is_seed_deterministic() {
        let (a, spec_a) = generate_synthetic(12, (4, 8), 4, 0.3, 7).unwrap();
        let (b, spec_b) = generate_synthetic(12, (4, 8), 4, 0.3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&spec_a).unwrap(),
            serde_json::to_string(&spec_b).unwrap()
        );
        let (c, _) = generate_synthetic(12, (4, 8), 4, 0.3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_counts_match_declared_totals() {
        let (convs, spec) = generate_synthetic(120, (4, 10), 4, 0.3, 2).unwrap();
        assert_eq!(convs.len(), spec.n_conversations);
        let total: usize = convs.iter().map(Conversation::len).sum();
        assert_eq!(total, spec.n_utterances);
    }

    #[test]
    fn zero_carry_probability_makes_keywords_sufficient() {
        let (convs, spec) = generate_synthetic(50, (4, 10), 4, 0.0, 3).unwrap();
        assert_eq!(spec.carried_count, 0);
        let acc = keyword_oracle_accuracy(&convs, &spec.keywords);
        assert_eq!(acc, 1.0);
        assert_eq!(spec.oracle_correct_count, spec.n_utterances);
    }

    #[test]
    fn oracle_accuracy_matches_declared_count() {
        let (convs, spec) = generate_synthetic(80, (4, 10), 4, 0.3, 9).unwrap();
        let acc = keyword_oracle_accuracy(&convs, &spec.keywords);
        let declared = spec.oracle_correct_count as f64 / spec.n_utterances as f64;
        assert_eq!(acc, declared);
        assert!(spec.carried_count > 0);
    }

    #[test]
    fn carried_labels_cap_keyword_oracle_near_one_minus_half_p() {
        // With two classes, carried utterances are right at chance 1/2, so
        // the oracle lands near 1 - p/2.
        let p = 0.3;
        let (convs, spec) = generate_synthetic(300, (10, 16), 2, p, 13).unwrap();
        let acc = keyword_oracle_accuracy(&convs, &spec.keywords);
        assert!((acc - (1.0 - 0.5 * p)).abs() < 0.05, "oracle accuracy {acc}");
    }

    #[test]
    fn label_marginals_are_near_uniform_at_scale() {
        let n_classes = 4;
        let (convs, _) = generate_synthetic(500, (4, 10), n_classes, 0.3, 21).unwrap();
        let mut counts = vec![0usize; n_classes];
        let mut total = 0usize;
        for conv in &convs {
            for utt in &conv.utterances {
                counts[utt.label] += 1;
                total += 1;
            }
        }
        for c in counts {
            let frac = c as f64 / total as f64;
            assert!((frac - 1.0 / n_classes as f64).abs() < 0.05, "marginal {frac}");
        }
    }

    #[test]
    fn every_token_maps_to_an_embedding_row() {
        let (convs, _) = generate_synthetic(10, (3, 6), 3, 0.3, 4).unwrap();
        let vocab = build_vocab(&convs, 1);
        let table = random_embeddings(&vocab, 5, 0);
        for conv in &convs {
            for utt in &conv.utterances {
                for tok in &utt.tokens {
                    let idx = vocab.index_of(tok);
                    assert!(idx < table.matrix.rows());
                }
            }
        }
    }
}
