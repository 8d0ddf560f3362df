//! Samples, tokenization, dynamic-padding batching, and corpus statistics.
//!
//! Dataset files are UTF-8 JSON lines, one object per record with keys
//! `id`, `text`, and `label` (`"human"` or `"machine"`). Word and character
//! counts are always recomputed from the text, never trusted from input.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const LABEL_HUMAN: u8 = 0;
pub const LABEL_MACHINE: u8 = 1;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    /// 0 = human, 1 = machine.
    pub label: u8,
    /// Whitespace-delimited token count, recomputed from `text`.
    pub word_count: usize,
    /// Unicode scalar count, recomputed from `text`.
    pub char_count: usize,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: u8) -> Self {
        let text = text.into();
        let word_count = text.split_whitespace().count();
        let char_count = text.chars().count();
        Sample {
            id: id.into(),
            text,
            label,
            word_count,
            char_count,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord<'a> {
    id: &'a str,
    text: &'a str,
    label: &'a str,
}

fn label_name(label: u8) -> &'static str {
    if label == LABEL_MACHINE {
        "machine"
    } else {
        "human"
    }
}

/// Writes samples as JSON lines.
pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for s in samples {
        let record = SampleRecord {
            id: &s.id,
            text: &s.text,
            label: label_name(s.label),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Dataset {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Reads a JSON-lines dataset, recomputing word/char counts.
pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Dataset {
                line: i + 1,
                message: e.to_string(),
            })?;
        let id = record
            .get("id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Dataset {
                line: i + 1,
                message: "missing string field `id`".into(),
            })?;
        let text = record
            .get("text")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Dataset {
                line: i + 1,
                message: "missing string field `text`".into(),
            })?;
        let label = match record.get("label").and_then(|v| v.as_str()) {
            Some("human") => LABEL_HUMAN,
            Some("machine") => LABEL_MACHINE,
            other => {
                return Err(Error::Dataset {
                    line: i + 1,
                    message: format!("label must be \"human\" or \"machine\", got {other:?}"),
                })
            }
        };
        samples.push(Sample::new(id, text, label));
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(samples)
}

// ── vocabulary and tokenization ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    /// Words by id; ids 0 and 1 are reserved for PAD and UNK.
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Splits text into lowercase word tokens on whitespace and punctuation.
fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// The most frequent `vocab_size - 2` words plus PAD and UNK. Frequency ties
/// break lexicographically, so the vocabulary is deterministic.
pub fn build_vocab(samples: &[Sample], vocab_size: usize) -> Result<Vocab> {
    if vocab_size < 3 {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} too small: need room for PAD, UNK and at least one word"
        )));
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for s in samples {
        for w in word_tokens(&s.text) {
            *freq.entry(w).or_insert(0) += 1;
        }
    }
    if freq.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
    words.extend(ranked.into_iter().take(vocab_size - 2).map(|(w, _)| w));
    Ok(Vocab::from_words(words))
}

/// Token ids for a text; unknown words map to UNK and empty text yields a
/// single UNK token.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    let ids: Vec<usize> = word_tokens(text).map(|w| vocab.id_of(&w)).collect();
    if ids.is_empty() {
        vec![UNK_ID]
    } else {
        ids
    }
}

// ── batching ────────────────────────────────────────────────────────────

/// One dynamically padded micro-batch. `T` is the longest (possibly
/// truncated) sequence in this batch, never wider.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Row-major `[B, T]` token ids, PAD-filled.
    pub token_ids: Vec<usize>,
    /// Row-major `[B, T]`; 1.0 marks real tokens, left-aligned.
    pub mask: Vec<f64>,
    pub labels: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
}

/// Tokenizes, optionally shuffles, head-truncates at `max_seq_len` (the
/// opening of a document carries its topical signal), and packs consecutive
/// runs of `micro_batch` samples padded to their own longest member.
/// `shuffle = None` keeps the input order.
pub fn make_batches(
    samples: &[Sample],
    vocab: &Vocab,
    micro_batch: usize,
    max_seq_len: usize,
    shuffle: Option<&mut crate::rng::StreamRng>,
) -> Result<Vec<Batch>> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if micro_batch == 0 || max_seq_len == 0 {
        return Err(Error::Config(
            "micro_batch and max_seq_len must be positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(rng) = shuffle {
        shuffle_in_place(&mut order, rng);
    }

    let mut batches = Vec::new();
    for chunk in order.chunks(micro_batch) {
        let rows: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| {
                let mut ids = tokenize(&samples[i].text, vocab);
                ids.truncate(max_seq_len);
                ids
            })
            .collect();
        let seq = rows.iter().map(Vec::len).max().unwrap_or(1);
        let b = rows.len();
        let mut token_ids = vec![PAD_ID; b * seq];
        let mut mask = vec![0.0; b * seq];
        for (r, ids) in rows.iter().enumerate() {
            for (c, &id) in ids.iter().enumerate() {
                token_ids[r * seq + c] = id;
                mask[r * seq + c] = 1.0;
            }
        }
        let labels = chunk.iter().map(|&i| samples[i].label).collect();
        batches.push(Batch {
            token_ids,
            mask,
            labels,
            batch: b,
            seq,
        });
    }
    Ok(batches)
}

fn shuffle_in_place(order: &mut [usize], rng: &mut crate::rng::StreamRng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

// ── statistics and length control ───────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassStats {
    pub samples: usize,
    pub avg_words: f64,
    pub avg_chars: f64,
    pub max_words: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusStats {
    pub human: ClassStats,
    pub machine: ClassStats,
}

/// Per-class sample count, mean word count, mean character count and max
/// word count. Averages are raw f64 means; callers round for display.
pub fn corpus_stats(samples: &[Sample]) -> Result<CorpusStats> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let class = |label: u8| -> ClassStats {
        let subset: Vec<&Sample> = samples.iter().filter(|s| s.label == label).collect();
        let n = subset.len();
        if n == 0 {
            return ClassStats {
                samples: 0,
                avg_words: 0.0,
                avg_chars: 0.0,
                max_words: 0,
            };
        }
        ClassStats {
            samples: n,
            avg_words: subset.iter().map(|s| s.word_count as f64).sum::<f64>() / n as f64,
            avg_chars: subset.iter().map(|s| s.char_count as f64).sum::<f64>() / n as f64,
            max_words: subset.iter().map(|s| s.word_count).max().unwrap_or(0),
        }
    };
    Ok(CorpusStats {
        human: class(LABEL_HUMAN),
        machine: class(LABEL_MACHINE),
    })
}

/// Word-count band, inclusive on both ends; `None` means unbounded above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthBand {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl LengthBand {
    pub fn unbounded() -> Self {
        LengthBand { lo: 0, hi: None }
    }

    pub fn contains(&self, words: usize) -> bool {
        words >= self.lo && self.hi.is_none_or(|hi| words <= hi)
    }

    fn hi_string(&self) -> String {
        self.hi.map_or_else(|| "inf".to_string(), |h| h.to_string())
    }
}

impl std::fmt::Display for LengthBand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi_string())
    }
}

/// The subset whose word counts fall in the band. Errors, naming the class,
/// if the band empties either class: a one-class subset cannot measure
/// length-controlled performance.
pub fn length_controlled_eval_set(samples: &[Sample], band: LengthBand) -> Result<Vec<Sample>> {
    let subset: Vec<Sample> = samples
        .iter()
        .filter(|s| band.contains(s.word_count))
        .cloned()
        .collect();
    for (label, name) in [(LABEL_HUMAN, "human"), (LABEL_MACHINE, "machine")] {
        if !subset.iter().any(|s| s.label == label) {
            return Err(Error::EmptyClassInBand {
                class: name.to_string(),
                lo: band.lo.to_string(),
                hi: band.hi_string(),
            });
        }
    }
    Ok(subset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seeder;

    fn sample(text: &str, label: u8) -> Sample {
        Sample::new("s", text, label)
    }

    #[test]
    fn counts_are_recomputed_from_text() {
        let s = Sample::new("x", "Hello brave  new world", LABEL_HUMAN);
        assert_eq!(s.word_count, 4);
        assert_eq!(s.char_count, 22);
    }

    #[test]
    fn tokenize_empty_text_gives_single_unk() {
        let vocab = Vocab::from_words(vec!["<pad>".into(), "<unk>".into(), "a".into()]);
        assert_eq!(tokenize("", &vocab), vec![UNK_ID]);
        assert_eq!(tokenize("   ", &vocab), vec![UNK_ID]);
    }

    #[test]
    fn tokenize_is_deterministic_and_maps_oov_to_unk() {
        let vocab = Vocab::from_words(vec!["<pad>".into(), "<unk>".into(), "alpha".into()]);
        let a = tokenize("Alpha zebra", &vocab);
        let b = tokenize("Alpha zebra", &vocab);
        assert_eq!(a, b);
        assert_eq!(a, vec![2, UNK_ID]);
    }

    #[test]
    fn tokenize_splits_punctuation_and_lowercases() {
        let vocab = Vocab::from_words(vec![
            "<pad>".into(),
            "<unk>".into(),
            "one".into(),
            "two".into(),
        ]);
        assert_eq!(tokenize("One, two. TWO!", &vocab), vec![2, 3, 3]);
    }

    #[test]
    fn vocab_keeps_most_frequent_with_lexicographic_ties() {
        let samples = vec![sample("a a a b b c", LABEL_HUMAN)];
        let vocab = build_vocab(&samples, 4).unwrap();
        assert_eq!(vocab.words(), &["<pad>", "<unk>", "a", "b"]);

        // Tie between x and y with room for one: x wins.
        let tied = vec![sample("x y", LABEL_HUMAN)];
        let vocab = build_vocab(&tied, 3).unwrap();
        assert_eq!(vocab.words(), &["<pad>", "<unk>", "x"]);
    }

    #[test]
    fn vocab_build_is_deterministic() {
        let samples = vec![sample("red green blue red green red", LABEL_HUMAN)];
        assert_eq!(
            build_vocab(&samples, 5).unwrap(),
            build_vocab(&samples, 5).unwrap()
        );
    }

    #[test]
    fn vocab_rejects_empty_or_tiny() {
        assert!(build_vocab(&[], 10).is_err());
        let s = vec![sample("a", LABEL_HUMAN)];
        assert!(build_vocab(&s, 2).is_err());
    }

    #[test]
    fn batches_pad_to_their_own_longest() {
        let vocab = Vocab::from_words(
            ["<pad>", "<unk>", "a", "b", "c", "d", "e"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        let samples = vec![
            sample("a b c d e", LABEL_HUMAN),
            sample("a b c", LABEL_MACHINE),
        ];
        let batches = make_batches(&samples, &vocab, 2, 512, None).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.seq, 5);
        assert_eq!(&b.mask[5..], &[1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(&b.token_ids[5..], &[2, 3, 4, PAD_ID, PAD_ID]);
    }

    #[test]
    fn long_sequences_are_head_truncated() {
        let vocab = Vocab::from_words(vec!["<pad>".into(), "<unk>".into(), "w".into()]);
        let text = vec!["w"; 700].join(" ");
        let samples = vec![Sample::new("long", text, LABEL_HUMAN)];
        let batches = make_batches(&samples, &vocab, 1, 512, None).unwrap();
        assert_eq!(batches[0].seq, 512);
        assert!(batches[0].mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn unshuffled_batches_preserve_input_order() {
        let vocab = Vocab::from_words(vec!["<pad>".into(), "<unk>".into(), "t".into()]);
        let samples: Vec<Sample> = (0..5)
            .map(|i| Sample::new(format!("s{i}"), "t", if i % 2 == 0 { 0 } else { 1 }))
            .collect();
        let batches = make_batches(&samples, &vocab, 2, 16, None).unwrap();
        let labels: Vec<u8> = batches.iter().flat_map(|b| b.labels.clone()).collect();
        assert_eq!(labels, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let vocab = Vocab::from_words(vec!["<pad>".into(), "<unk>".into(), "t".into()]);
        let samples: Vec<Sample> = (0..64)
            .map(|i| Sample::new(format!("s{i}"), "t", (i % 2) as u8))
            .collect();
        let a = make_batches(
            &samples,
            &vocab,
            8,
            16,
            Some(&mut Seeder::new(5).stream("data/shuffle")),
        )
        .unwrap();
        let b = make_batches(
            &samples,
            &vocab,
            8,
            16,
            Some(&mut Seeder::new(5).stream("data/shuffle")),
        )
        .unwrap();
        let c = make_batches(
            &samples,
            &vocab,
            8,
            16,
            Some(&mut Seeder::new(6).stream("data/shuffle")),
        )
        .unwrap();
        let flat = |bs: &[Batch]| {
            bs.iter()
                .flat_map(|b| b.labels.clone())
                .collect::<Vec<u8>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn stats_match_hand_tally() {
        let samples = vec![
            sample("one two three", LABEL_HUMAN),
            sample("a b c d e", LABEL_HUMAN),
            sample("hi", LABEL_MACHINE),
        ];
        let stats = corpus_stats(&samples).unwrap();
        assert_eq!(stats.human.samples, 2);
        assert_eq!(stats.human.avg_words, 4.0);
        assert_eq!(stats.human.max_words, 5);
        assert_eq!(stats.machine.samples, 1);
        assert_eq!(stats.machine.avg_words, 1.0);
        assert_eq!(stats.machine.avg_chars, 2.0);
    }

    #[test]
    fn single_sample_stats_equal_its_counts() {
        let s = sample("lone wolf", LABEL_MACHINE);
        let stats = corpus_stats(std::slice::from_ref(&s)).unwrap();
        assert_eq!(stats.machine.avg_words, s.word_count as f64);
        assert_eq!(stats.machine.avg_chars, s.char_count as f64);
    }

    #[test]
    fn unbounded_band_is_identity() {
        let samples = vec![sample("a", LABEL_HUMAN), sample("b", LABEL_MACHINE)];
        let out = length_controlled_eval_set(&samples, LengthBand::unbounded()).unwrap();
        assert_eq!(out, samples);
    }

    #[test]
    fn impossible_band_names_the_empty_class() {
        let samples = vec![sample("a", LABEL_HUMAN), sample("b", LABEL_MACHINE)];
        let err = length_controlled_eval_set(
            &samples,
            LengthBand {
                lo: 1_000_000,
                hi: None,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("human"));
    }

    #[test]
    fn jsonl_round_trip_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let samples = vec![
            Sample::new("a1", "The quick brown fox", LABEL_HUMAN),
            Sample::new("b2", "jumps over", LABEL_MACHINE),
        ];
        write_jsonl(&path, &samples).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, samples);
    }
}
