//! Whitespace tokenization, file ingestion and deterministic batching.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_RESERVED: u32 = 4;

const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

/// Inclusive gold-score range of scored pair files.
pub const GOLD_RANGE: (f64, f64) = (0.0, 5.0);

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Reserved ids followed by the given tokens, in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Vocab {
            ids: HashMap::new(),
            tokens: Vec::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens) {
            v.ids.insert(t.clone(), v.tokens.len() as u32);
            v.tokens.push(t);
        }
        v
    }
}

fn words(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence.split_whitespace().map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceCorpus {
    pub sentences: Vec<String>,
    pub source: Option<PathBuf>,
}

impl SentenceCorpus {
    pub fn new(sentences: Vec<String>) -> Result<Self> {
        if sentences.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::Data("corpus contains an empty sentence".into()));
        }
        Ok(SentenceCorpus {
            sentences,
            source: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Most frequent lowercased whitespace tokens, ties broken lexicographically;
/// `max_size` counts the four reserved ids.
pub fn build_vocab(corpus: &SentenceCorpus, max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in &corpus.sentences {
        for w in words(s) {
            if RESERVED.contains(&w.as_str()) {
                continue;
            }
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let keep = max_size.saturating_sub(NUM_RESERVED as usize);
    Ok(Vocab::from_tokens(ranked.into_iter().take(keep).map(|(w, _)| w)))
}

/// Lowercase, split on whitespace, map through `vocab` with UNK fallback.
pub fn tokenize(sentence: &str, vocab: &Vocab) -> Vec<u32> {
    words(sentence)
        .map(|w| match vocab.id(&w) {
            Some(id) if id >= NUM_RESERVED => id,
            _ => UNK_ID,
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// One sentence per line; blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<SentenceCorpus> {
    let text = read(path)?;
    let sentences: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if sentences.is_empty() {
        return Err(Error::Data(format!("{} contains no sentences", path.display())));
    }
    Ok(SentenceCorpus {
        sentences,
        source: Some(path.to_path_buf()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub a: String,
    pub b: String,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredPairSet {
    pub pairs: Vec<ScoredPair>,
}

impl ScoredPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs with gold score at least `min_gold`.
    pub fn at_least(&self, min_gold: f64) -> ScoredPairSet {
        ScoredPairSet {
            pairs: self
                .pairs
                .iter()
                .filter(|p| p.gold >= min_gold)
                .cloned()
                .collect(),
        }
    }
}

pub fn parse_scored_pairs(text: &str, path: &Path) -> Result<ScoredPairSet> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, n, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let (a, b) = (fields[0].trim(), fields[1].trim());
        if a.is_empty() || b.is_empty() {
            return Err(parse_err(path, n, "empty sentence"));
        }
        let gold: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, n, format!("score {:?} is not a number", fields[2])))?;
        if !(GOLD_RANGE.0..=GOLD_RANGE.1).contains(&gold) {
            return Err(parse_err(path, n, format!("score {gold} outside [0, 5]")));
        }
        pairs.push(ScoredPair {
            a: a.to_string(),
            b: b.to_string(),
            gold,
        });
    }
    Ok(ScoredPairSet { pairs })
}

/// Rows `sentence_a<TAB>sentence_b<TAB>score` with score in [0, 5].
pub fn load_scored_pairs(path: &Path) -> Result<ScoredPairSet> {
    parse_scored_pairs(&read(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSet {
    pub examples: Vec<(String, usize)>,
}

impl LabeledSet {
    /// Labels must cover `0..=max_label` without gaps.
    pub fn new(examples: Vec<(String, usize)>) -> Result<Self> {
        if let Some(max) = examples.iter().map(|e| e.1).max() {
            let mut seen = vec![false; max + 1];
            for e in &examples {
                seen[e.1] = true;
            }
            if let Some(gap) = seen.iter().position(|s| !s) {
                return Err(Error::Data(format!("labels are not dense: class {gap} missing")));
            }
        }
        Ok(LabeledSet { examples })
    }

    pub fn num_classes(&self) -> usize {
        self.examples.iter().map(|e| e.1 + 1).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Rows `label<TAB>sentence`.
pub fn load_labeled(path: &Path) -> Result<LabeledSet> {
    let text = read(path)?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, sentence) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i + 1, "expected label<TAB>sentence"))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("label {label:?} is not a class index")))?;
        if sentence.trim().is_empty() {
            return Err(parse_err(path, i + 1, "empty sentence"));
        }
        examples.push((sentence.trim().to_string(), label));
    }
    LabeledSet::new(examples)
}

/// Shuffle sentence indices with `epoch_seed` and cut into batches of
/// `batch_size`; a trailing batch smaller than two is dropped.
pub fn make_batches(corpus_len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch size {batch_size} < 2 leaves no in-batch negatives"
        )));
    }
    let mut order: Vec<usize> = (0..corpus_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(s: &[&str]) -> SentenceCorpus {
        SentenceCorpus::new(s.iter().map(|x| x.to_string()).collect()).unwrap()
    }

    #[test]
    fn vocab_frequency_order() {
        let v = build_vocab(&corpus(&["a b", "a"]), 10).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(1), Some("[CLS]"));
    }

    #[test]
    fn vocab_tie_break_and_cap() {
        let v = build_vocab(&corpus(&["x y"]), 5).unwrap();
        assert_eq!(v.id("x"), Some(4));
        assert_eq!(v.id("y"), None);
        assert_eq!(tokenize("x y", &v), vec![4, UNK_ID]);
    }

    #[test]
    fn vocab_empty_corpus() {
        let c = SentenceCorpus {
            sentences: vec![],
            source: None,
        };
        assert!(matches!(build_vocab(&c, 10), Err(Error::Data(_))));
    }

    #[test]
    fn tokenize_cases() {
        let v = Vocab::from_tokens(["a".to_string(), "b".to_string()]);
        assert_eq!(tokenize("A b", &v), vec![4, 5]);
        let v = Vocab::from_tokens(["a".to_string()]);
        assert_eq!(tokenize("a zzz", &v), vec![4, UNK_ID]);
        assert!(tokenize("", &v).is_empty());
        // Reserved surface forms never map to reserved ids.
        assert_eq!(tokenize("[cls] [MASK]", &v), vec![UNK_ID, UNK_ID]);
    }

    #[test]
    fn scored_pairs_parsing() {
        let p = Path::new("x.tsv");
        let set = parse_scored_pairs("good day\tnice day\t4.5\n", p).unwrap();
        assert_eq!(set.pairs, vec![ScoredPair { a: "good day".into(), b: "nice day".into(), gold: 4.5 }]);
        match parse_scored_pairs("a\tb\t1\nonly\ttwo\n", p) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_scored_pairs("a\tb\t9.0", p), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_scored_pairs("a\tb\tx", p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_scored_pairs(Path::new("/nonexistent/x.tsv")), Err(Error::Io { .. })));
    }

    #[test]
    fn labels_must_be_dense() {
        assert!(LabeledSet::new(vec![("a".into(), 0), ("b".into(), 2)]).is_err());
        assert_eq!(LabeledSet::new(vec![("a".into(), 1), ("b".into(), 0)]).unwrap().num_classes(), 2);
    }

    #[test]
    fn batching_sizes() {
        let sizes = |n, b| make_batches(n, b, 3).unwrap().iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(10, 4), vec![4, 4, 2]);
        assert_eq!(sizes(5, 4), vec![4]);
        assert_eq!(make_batches(10, 4, 9).unwrap(), make_batches(10, 4, 9).unwrap());
        assert_ne!(make_batches(10, 4, 9).unwrap(), make_batches(10, 4, 10).unwrap());
        assert!(matches!(make_batches(10, 1, 0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn batches_partition_retained(n in 0usize..60, b in 2usize..9, seed in any::<u64>()) {
            let batches = make_batches(n, b, seed).unwrap();
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            let retained = seen.len();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), retained);
            let expected = if n % b == 1 { n - 1 } else { n };
            prop_assert_eq!(retained, expected);
        }

        #[test]
        fn own_corpus_never_unk(words in proptest::collection::vec("[a-e]{1,3}", 1..30)) {
            let sentences: Vec<String> = words.chunks(3).map(|c| c.join(" ")).collect();
            let c = SentenceCorpus::new(sentences.clone()).unwrap();
            let v = build_vocab(&c, 200).unwrap();
            for s in &sentences {
                prop_assert!(!tokenize(s, &v).contains(&UNK_ID));
            }
        }
    }
}
