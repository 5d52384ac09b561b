//! Corpus ingestion: tokenization, vocabulary, pair files and pretrained
//! word vectors.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Real, Tensor};

pub const PAD: u32 = 0;
pub const OOV: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<unk>";

/// Default utterance length cap; longer utterances keep their first tokens.
pub const DEFAULT_MAX_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {malformed} of {total} lines are malformed")]
    Format {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },
    #[error("embedding file {path}: {reason}")]
    Embeddings { path: PathBuf, reason: String },
    #[error("embedding dimension {found} in file does not match configured {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot build a vocabulary from an empty dataset")]
    EmptyDataset,
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("cannot encode an empty utterance")]
    EmptyUtterance,
    #[error("max_len must be at least 1")]
    InvalidMaxLen,
}

/// Lowercases, splits on whitespace and isolates every character that is
/// neither alphanumeric nor whitespace as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(ch.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Canonical form used for exact-text comparisons (echo detection, pool
/// deduplication, duplicate-response exclusion).
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Vocabulary over `tokens` in the given order, after the reserved
    /// padding and out-of-vocabulary entries. Duplicates are dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(PAD_TOKEN.to_string(), PAD);
        index.insert(OOV_TOKEN.to_string(), OOV);
        for t in tokens {
            let t = t.into();
            if !index.contains_key(&t) {
                index.insert(t.clone(), all.len() as u32);
                all.push(t);
            }
        }
        Self { tokens: all, index }
    }

    /// Rebuilds from the full token list as written by [`Vocabulary::tokens`].
    pub fn from_saved(tokens: Vec<String>) -> Option<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != OOV_TOKEN {
            return None;
        }
        let v = Self::from_tokens(tokens[2..].iter().cloned());
        (v.tokens.len() == tokens.len()).then_some(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// Counts tokens over both sides of every pair and keeps those seen at least
/// `min_count` times, most frequent first (ties alphabetical). `max_size`
/// caps the total size including the two reserved entries.
pub fn build_vocab(dataset: &PairDataset, min_count: usize, max_size: Option<usize>) -> Result<Vocabulary, TextError> {
    if min_count == 0 {
        return Err(TextError::InvalidMinCount);
    }
    if dataset.is_empty() {
        return Err(TextError::EmptyDataset);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for pair in dataset.pairs() {
        for tok in tokenize(&pair.context).into_iter().chain(tokenize(&pair.response)) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && t != PAD_TOKEN && t != OOV_TOKEN)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(cap) = max_size {
        ranked.truncate(cap.saturating_sub(2));
    }
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t)))
}

/// An utterance as vocabulary ids, never empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenIdSequence(Vec<u32>);

impl TokenIdSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self, TextError> {
        if ids.is_empty() {
            return Err(TextError::EmptyUtterance);
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn encode_utterance(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<TokenIdSequence, TextError> {
    if max_len == 0 {
        return Err(TextError::InvalidMaxLen);
    }
    if tokens.is_empty() {
        return Err(TextError::EmptyUtterance);
    }
    let ids = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t).unwrap_or(OOV))
        .collect();
    TokenIdSequence::new(ids)
}

/// Tokenizes and encodes in one go.
pub fn encode_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenIdSequence, TextError> {
    encode_utterance(&tokenize(text), vocab, max_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub context: String,
    pub response: String,
}

impl Pair {
    pub fn new(context: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            context: context.into(),
            response: response.into(),
        }
    }
}

/// Context/response pairs; both sides of every retained pair tokenize to at
/// least one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairDataset {
    pairs: Vec<Pair>,
    split: Split,
}

impl PairDataset {
    /// Drops pairs with an empty-after-tokenization side.
    pub fn new(pairs: Vec<Pair>, split: Split) -> Self {
        let pairs = pairs
            .into_iter()
            .filter(|p| !tokenize(&p.context).is_empty() && !tokenize(&p.response).is_empty())
            .collect();
        Self { pairs, split }
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Consecutive slice `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Self {
        Self {
            pairs: self.pairs[start.min(self.len())..end.min(self.len())].to_vec(),
            split,
        }
    }

    /// Writes the pairs as context<TAB>response lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&p.context);
            out.push('\t');
            out.push_str(&p.response);
            out.push('\n');
        }
        out
    }
}

/// Line accounting from [`load_pairs`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    pub malformed: usize,
    pub empty_after_tokenization: usize,
}

/// Parses a pair file held in memory. Lines without exactly one tab are
/// counted as malformed and skipped; blank lines are ignored.
pub fn parse_pairs(content: &str, split: Split) -> (PairDataset, LoadReport) {
    let mut report = LoadReport::default();
    let mut pairs = Vec::new();
    for line in content.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(c), Some(r), None) => {
                if tokenize(c).is_empty() || tokenize(r).is_empty() {
                    report.empty_after_tokenization += 1;
                } else {
                    pairs.push(Pair::new(c, r));
                }
            }
            _ => report.malformed += 1,
        }
    }
    (PairDataset { pairs, split }, report)
}

/// Loads a UTF-8 TSV pair file. More than half malformed lines is a format
/// error rather than a partial load.
pub fn load_pairs(path: impl AsRef<Path>, split: Split) -> Result<(PairDataset, LoadReport), TextError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (dataset, report) = parse_pairs(&content, split);
    if report.malformed * 2 > report.lines {
        return Err(TextError::Format {
            path: path.to_path_buf(),
            malformed: report.malformed,
            total: report.lines,
        });
    }
    if report.lines == 0 {
        log::warn!("{}: no pairs found", path.display());
    } else if report.malformed > 0 {
        log::warn!(
            "{}: skipped {} malformed of {} lines",
            path.display(),
            report.malformed,
            report.lines
        );
    }
    Ok((dataset, report))
}

/// Word vector table. Row 0 is padding: always zero, never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<F> {
    pub table: Tensor<F>,
    pub trainable: bool,
}

impl<F: Real> EmbeddingMatrix<F> {
    /// Uniform(-0.1, 0.1) rows, trainable.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut data = vec![F::zero(); vocab_size * dim];
        for v in &mut data[dim..] {
            *v = F::from_f64(rng.gen_range(-0.1..0.1));
        }
        Self {
            table: Tensor::from_parts(vec![vocab_size, dim], data),
            trainable: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn cast<G: Real>(&self) -> EmbeddingMatrix<G> {
        EmbeddingMatrix {
            table: self.table.cast(),
            trainable: self.trainable,
        }
    }
}

/// Parses word2vec text vectors held in memory. See [`load_word_embeddings`].
pub fn parse_word_embeddings<F: Real>(
    content: &str,
    vocab: &Vocabulary,
    emb_dim: usize,
    rng: &mut impl Rng,
    origin: &Path,
) -> Result<EmbeddingMatrix<F>, TextError> {
    let bad = |reason: String| TextError::Embeddings {
        path: origin.to_path_buf(),
        reason,
    };
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut fields = header.split_whitespace();
    let _count: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    let dim: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(format!("bad header {header:?}")))?;
    if dim != emb_dim {
        return Err(TextError::DimensionMismatch {
            expected: emb_dim,
            found: dim,
        });
    }

    // Missing rows are drawn first, in vocabulary order, so they only
    // depend on the seed and the vocabulary.
    let mut matrix = EmbeddingMatrix::<F>::random(vocab.len(), emb_dim, rng);
    matrix.trainable = false;
    for (lineno, line) in lines.enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let Some(id) = vocab.id(word) else { continue };
        if id == PAD {
            continue;
        }
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?;
        if values.len() != emb_dim {
            return Err(bad(format!(
                "line {}: expected {emb_dim} values, found {}",
                lineno + 2,
                values.len()
            )));
        }
        let start = id as usize * emb_dim;
        for (dst, v) in matrix.table.data_mut()[start..start + emb_dim].iter_mut().zip(values) {
            *dst = F::from_f64(v);
        }
    }
    Ok(matrix)
}

/// Loads word2vec text format (`count dim` header, then `token v1 .. vdim`
/// per line). Rows for vocabulary tokens found in the file are copied;
/// the rest are uniform(-0.1, 0.1) from `rng`. The result is frozen.
pub fn load_word_embeddings<F: Real>(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    emb_dim: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingMatrix<F>, TextError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_word_embeddings(&content, vocab, emb_dim, rng, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("What happened to your car?"),
            toks(&["what", "happened", "to", "your", "car", "?"])
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Hello"), toks(&["hello"]));
        assert_eq!(tokenize("Hello."), toks(&["hello", "."]));
        assert_eq!(tokenize("You're  crazy"), toks(&["you", "'", "re", "crazy"]));
    }

    #[test]
    fn vocab_respects_min_count() {
        let ds = PairDataset::new(vec![Pair::new("a a", "b")], Split::Train);
        let v = build_vocab(&ds, 2, None).unwrap();
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
        assert_eq!(v.id(PAD_TOKEN), Some(PAD));
        assert_eq!(v.id(OOV_TOKEN), Some(OOV));
    }

    #[test]
    fn vocab_keeps_everything_without_limits() {
        let ds = PairDataset::new(vec![Pair::new("x y z", "y z w"), Pair::new("q", "x")], Split::Train);
        let v = build_vocab(&ds, 1, None).unwrap();
        assert_eq!(v.len(), 2 + 5);
        for t in ["x", "y", "z", "w", "q"] {
            assert!(v.id(t).is_some(), "{t}");
        }
    }

    #[test]
    fn vocab_cap_keeps_most_frequent() {
        // c:3, a:2, b:2 (alphabetical tie-break puts a before b), d:1
        let ds = PairDataset::new(vec![Pair::new("c c a b", "c a b d")], Split::Train);
        let v = build_vocab(&ds, 1, Some(4)).unwrap();
        assert_eq!(v.tokens(), &toks(&[PAD_TOKEN, OOV_TOKEN, "c", "a"]));
    }

    #[test]
    fn vocab_rejects_empty_dataset_and_zero_min_count() {
        let empty = PairDataset::new(vec![], Split::Train);
        assert!(matches!(build_vocab(&empty, 1, None), Err(TextError::EmptyDataset)));
        let ds = PairDataset::new(vec![Pair::new("a", "b")], Split::Train);
        assert!(matches!(build_vocab(&ds, 0, None), Err(TextError::InvalidMinCount)));
    }

    #[test]
    fn encode_trims_from_the_right() {
        let words: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::from_tokens(words.clone());
        let seq = encode_utterance(&words, &v, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(seq.len(), 20);
        let expected: Vec<u32> = (0..20).map(|i| v.id(&words[i]).unwrap()).collect();
        assert_eq!(seq.ids(), expected.as_slice());
    }

    #[test]
    fn encode_maps_unknown_to_oov() {
        let v = Vocabulary::from_tokens(["hello", "there"]);
        let known = encode_utterance(&toks(&["hello", "there"]), &v, 20).unwrap();
        assert!(!known.ids().contains(&OOV));
        let unknown = encode_utterance(&toks(&["hello", "stranger"]), &v, 20).unwrap();
        assert_eq!(unknown.ids()[1], OOV);
        assert!(matches!(encode_utterance(&[], &v, 20), Err(TextError::EmptyUtterance)));
        assert!(matches!(
            encode_utterance(&toks(&["hello"]), &v, 0),
            Err(TextError::InvalidMaxLen)
        ));
    }

    #[test]
    fn parse_pairs_counts_malformed_lines() {
        let (ds, report) = parse_pairs(
            "The Beatles are the best.\tThey are the best musical group ever.\n",
            Split::Test,
        );
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.pairs()[0].response, "They are the best musical group ever.");
        assert_eq!(report.malformed, 0);

        let (ds, report) = parse_pairs("a\tb\tc\td\nhi\tthere\n", Split::Train);
        assert_eq!(ds.len(), 1);
        assert_eq!(report.malformed, 1);

        let (ds, report) = parse_pairs("", Split::Train);
        assert!(ds.is_empty());
        assert_eq!(report.lines, 0);

        let (ds, report) = parse_pairs("...\t ok\n", Split::Train);
        assert_eq!(ds.len(), 1);
        assert_eq!(report.empty_after_tokenization, 0);
        let (ds, report) = parse_pairs(" \t ok\nfine\tfine\n", Split::Train);
        assert_eq!(ds.len(), 1);
        assert_eq!(report.empty_after_tokenization, 1);
    }

    #[test]
    fn load_pairs_rejects_mostly_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "no tab here\nnor here\nok\tfine\n").unwrap();
        assert!(matches!(load_pairs(&path, Split::Train), Err(TextError::Format { .. })));

        let empty = dir.path().join("empty.tsv");
        fs::write(&empty, "").unwrap();
        let (ds, _) = load_pairs(&empty, Split::Train).unwrap();
        assert!(ds.is_empty());

        assert!(matches!(
            load_pairs(dir.path().join("missing.tsv"), Split::Train),
            Err(TextError::Io { .. })
        ));
    }

    #[test]
    fn word_embeddings_copy_rows_and_seed_the_rest() {
        let v = Vocabulary::from_tokens(["hello", "world"]);
        let file = "2 3\nhello 0.5 -0.25 1\nother 9 9 9\n";
        let load = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            parse_word_embeddings::<f32>(file, &v, 3, &mut rng, Path::new("mem")).unwrap()
        };
        let m = load(5);
        assert!(!m.trainable);
        let hello = v.id("hello").unwrap() as usize;
        assert_eq!(m.table.row(hello), &[0.5, -0.25, 1.0]);
        assert_eq!(m.table.row(0), &[0.0, 0.0, 0.0]);
        let world = v.id("world").unwrap() as usize;
        assert!(m.table.row(world).iter().all(|x| x.abs() < 0.1));
        assert_eq!(m, load(5));
        assert_ne!(m.table.row(world), load(6).table.row(world));
    }

    #[test]
    fn word_embeddings_reject_dimension_mismatch() {
        let v = Vocabulary::from_tokens(["hello"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = parse_word_embeddings::<f32>("1000 256\n", &v, 128, &mut rng, Path::new("mem"));
        assert!(matches!(
            err,
            Err(TextError::DimensionMismatch {
                expected: 128,
                found: 256
            })
        ));
    }

    #[test]
    fn vocabulary_round_trips_through_token_list() {
        let v = Vocabulary::from_tokens(["b", "a", "c"]);
        assert_eq!(Vocabulary::from_saved(v.tokens().to_vec()), Some(v));
        assert_eq!(Vocabulary::from_saved(vec!["x".into()]), None);
    }

    proptest! {
        #[test]
        fn encoding_is_deterministic_and_never_trims_short_input(text in "[a-z ?.!]{1,80}") {
            let ds = PairDataset::new(vec![Pair::new(text.clone(), "x")], Split::Train);
            prop_assume!(!ds.is_empty());
            let v = build_vocab(&ds, 1, None).unwrap();
            let toks = tokenize(&text);
            let a = encode_text(&text, &v, 20).unwrap();
            let b = encode_text(&text, &v, 20).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), toks.len().min(20));
            if toks.len() <= 20 {
                prop_assert_eq!(a.len(), toks.len());
            }
        }
    }
}
