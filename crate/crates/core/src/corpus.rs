//! Parallel text, vocabularies, mini-batches and CSS support sets.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{self, AlignmentLinkSet, GoldAlignment, GoldSet};
use crate::rng::Rng;

pub const NULL_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NULL_TOKEN: &str = "<null>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("parallel files are not line-aligned: {l1} lines vs {l2} lines")]
    LineCountMismatch { l1: usize, l2: usize },
    #[error("empty corpus: {0}")]
    Empty(String),
    #[error("token `{0}` collides with a reserved vocabulary entry")]
    ReservedToken(String),
    #[error("malformed vocabulary: {0}")]
    BadVocabulary(String),
    #[error("invalid synthetic corpus request: {0}")]
    BadSynthConfig(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    L1,
    L2,
}

/// Token ↔ id map. Ids 0 and 1 are reserved for NULL and UNK on both sides;
/// NULL only ever occurs on the L1 side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens = vec![NULL_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Rebuilds a vocabulary from its ordered token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[NULL_ID] != NULL_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(CorpusError::BadVocabulary("reserved entries missing".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::BadVocabulary(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary in first-occurrence order. With `max_size`, only the
    /// most frequent corpus tokens are kept (ties broken by first occurrence).
    pub fn build<'a, I>(sentences: I, max_size: Option<usize>) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut order: Vec<&'a str> = Vec::new();
        let mut counts: HashMap<&'a str, usize> = HashMap::new();
        for sentence in sentences {
            for tok in sentence {
                if tok == NULL_TOKEN || tok == UNK_TOKEN {
                    return Err(CorpusError::ReservedToken(tok.clone()));
                }
                let c = counts.entry(tok.as_str()).or_insert(0);
                if *c == 0 {
                    order.push(tok.as_str());
                }
                *c += 1;
            }
        }
        let kept: Vec<&str> = match max_size {
            Some(limit) if order.len() > limit => {
                let mut ranked: Vec<(usize, &str)> = order.iter().copied().enumerate().collect();
                ranked.sort_by(|a, b| counts[b.1].cmp(&counts[a.1]).then(a.0.cmp(&b.0)));
                let keep: BTreeSet<usize> = ranked.iter().take(limit).map(|(pos, _)| *pos).collect();
                keep.into_iter().map(|pos| order[pos]).collect()
            }
            _ => order,
        };
        let mut vocab = Self::new();
        for tok in kept {
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: &str) -> usize {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.index.get(tok).copied()
    }

    pub fn id_or_unk(&self, tok: &str) -> usize {
        self.id(tok).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One line-aligned sentence pair as token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    /// 1-based line number in the source files.
    pub id: usize,
    /// L1 ids, NULL at position 0.
    pub x: Vec<usize>,
    /// L2 ids.
    pub y: Vec<usize>,
}

impl SentencePair {
    pub fn new(id: usize, words: Vec<usize>, y: Vec<usize>) -> Self {
        let mut x = Vec::with_capacity(words.len() + 1);
        x.push(NULL_ID);
        x.extend(words);
        Self { id, x, y }
    }

    /// L1 length including NULL.
    pub fn m(&self) -> usize {
        self.x.len()
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// L1 words without NULL.
    pub fn words(&self) -> &[usize] {
        &self.x[1..]
    }

    pub fn num_tokens(&self) -> usize {
        self.x.len() - 1 + self.y.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub l1_vocab: Vocabulary,
    pub l2_vocab: Vocabulary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Pairs with either side longer than this (before NULL padding) are dropped.
    pub max_len: usize,
    pub max_vocab: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { max_len: 50, max_vocab: None }
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().map(tokenize).collect())
}

/// Tokenized lines of one side of a parallel text.
pub type TokenLines = Vec<Vec<String>>;

/// Reads two line-aligned files; fails when their line counts differ.
pub fn read_pair_files(l1: &Path, l2: &Path) -> Result<(TokenLines, TokenLines)> {
    let a = read_lines(l1)?;
    let b = read_lines(l2)?;
    if a.len() != b.len() {
        return Err(CorpusError::LineCountMismatch { l1: a.len(), l2: b.len() });
    }
    Ok((a, b))
}

/// Builds a training corpus from tokenized lines: filters by length, drops
/// pairs with an empty side and builds both vocabularies from the survivors.
pub fn corpus_from_lines(
    l1: &[Vec<String>],
    l2: &[Vec<String>],
    opts: &LoadOptions,
) -> Result<ParallelCorpus> {
    if l1.len() != l2.len() {
        return Err(CorpusError::LineCountMismatch { l1: l1.len(), l2: l2.len() });
    }
    let keep: Vec<usize> = (0..l1.len())
        .filter(|&k| {
            let (a, b) = (l1[k].len(), l2[k].len());
            a >= 1 && b >= 1 && a <= opts.max_len && b <= opts.max_len
        })
        .collect();
    if keep.is_empty() {
        return Err(CorpusError::Empty("no sentence pair survived filtering".into()));
    }
    let l1_vocab = Vocabulary::build(keep.iter().map(|&k| l1[k].as_slice()), opts.max_vocab)?;
    let l2_vocab = Vocabulary::build(keep.iter().map(|&k| l2[k].as_slice()), opts.max_vocab)?;
    let pairs = keep
        .iter()
        .map(|&k| {
            SentencePair::new(
                k + 1,
                l1[k].iter().map(|t| l1_vocab.id_or_unk(t)).collect(),
                l2[k].iter().map(|t| l2_vocab.id_or_unk(t)).collect(),
            )
        })
        .collect();
    Ok(ParallelCorpus { pairs, l1_vocab, l2_vocab })
}

/// Reads a line-aligned training corpus.
pub fn load_parallel(l1: &Path, l2: &Path, opts: &LoadOptions) -> Result<ParallelCorpus> {
    let (a, b) = read_pair_files(l1, l2)?;
    corpus_from_lines(&a, &b, opts)
}

/// Maps lines through fixed vocabularies (unseen tokens become UNK). No line
/// is dropped, so sentence ids stay equal to line numbers; either side may be empty.
pub fn pairs_from_lines(
    l1: &[Vec<String>],
    l2: &[Vec<String>],
    l1_vocab: &Vocabulary,
    l2_vocab: &Vocabulary,
) -> Result<Vec<SentencePair>> {
    if l1.len() != l2.len() {
        return Err(CorpusError::LineCountMismatch { l1: l1.len(), l2: l2.len() });
    }
    Ok(l1
        .iter()
        .zip(l2)
        .enumerate()
        .map(|(k, (a, b))| {
            SentencePair::new(
                k + 1,
                a.iter().map(|t| l1_vocab.id_or_unk(t)).collect(),
                b.iter().map(|t| l2_vocab.id_or_unk(t)).collect(),
            )
        })
        .collect())
}

pub fn load_with_vocab(
    l1: &Path,
    l2: &Path,
    l1_vocab: &Vocabulary,
    l2_vocab: &Vocabulary,
) -> Result<Vec<SentencePair>> {
    let (a, b) = read_pair_files(l1, l2)?;
    pairs_from_lines(&a, &b, l1_vocab, l2_vocab)
}

/// A mini-batch of sentence pairs borrowed from a corpus.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub pairs: Vec<&'a SentencePair>,
}

impl Batch<'_> {
    pub fn size(&self) -> usize {
        self.pairs.len()
    }
}

/// Shuffles deterministically under `seed` and cuts into batches of
/// `batch_size`; the final partial batch is kept.
pub fn make_batches(pairs: &[SentencePair], batch_size: usize, seed: u64) -> Vec<Batch<'_>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| Batch { pairs: chunk.iter().map(|&k| &pairs[k]).collect() })
        .collect()
}

/// Explicit class set C and sampled negatives N for one softmax head.
///
/// Normaliser estimate: Σ_{C} e^{u} + κ Σ_{N} e^{u}.
#[derive(Clone, Debug, PartialEq)]
pub struct CssSupport {
    side: Side,
    classes: Vec<usize>,
    num_positive: usize,
    kappa: f64,
    position: HashMap<usize, usize>,
}

impl CssSupport {
    pub fn new(side: Side, positive: Vec<usize>, negative: Vec<usize>, kappa: f64) -> Self {
        assert!(kappa > 0.0, "kappa must be positive");
        let num_positive = positive.len();
        let mut classes = positive;
        classes.extend(negative);
        let position: HashMap<usize, usize> =
            classes.iter().enumerate().map(|(p, &c)| (c, p)).collect();
        assert_eq!(position.len(), classes.len(), "C and N must be disjoint and duplicate-free");
        Self { side, classes, num_positive, kappa, position }
    }

    /// C = whole support, N = ∅; reproduces the exact softmax.
    pub fn full(side: Side, vocab_size: usize) -> Self {
        Self::new(side, (0..vocab_size).collect(), Vec::new(), 1.0)
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn positive(&self) -> &[usize] {
        &self.classes[..self.num_positive]
    }

    pub fn negative(&self) -> &[usize] {
        &self.classes[self.num_positive..]
    }

    /// C followed by N.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Additive log-weight per class in [`classes`](Self::classes) order:
    /// 0 on C, ln κ on N.
    pub fn log_weights(&self) -> Vec<f64> {
        let lk = self.kappa.ln();
        (0..self.classes.len())
            .map(|p| if p < self.num_positive { 0.0 } else { lk })
            .collect()
    }

    /// Position of `class` in [`classes`](Self::classes) if it belongs to C.
    pub fn positive_position(&self, class: usize) -> Option<usize> {
        self.position.get(&class).copied().filter(|&p| p < self.num_positive)
    }
}

/// Builds C from the batch tokens of one side (NULL included for L1) and
/// samples `n_neg` negatives uniformly without replacement from the complement.
pub fn build_css_support(
    batch: &[&SentencePair],
    vocab_size: usize,
    side: Side,
    n_neg: usize,
    seed: u64,
) -> CssSupport {
    let mut positive = BTreeSet::new();
    for pair in batch {
        match side {
            Side::L1 => positive.extend(pair.x.iter().copied()),
            Side::L2 => positive.extend(pair.y.iter().copied()),
        }
    }
    if side == Side::L1 {
        positive.insert(NULL_ID);
    }
    let complement: Vec<usize> = (0..vocab_size).filter(|c| !positive.contains(c)).collect();
    let take = n_neg.min(complement.len());
    let mut negative: Vec<usize> = if take == complement.len() {
        complement.clone()
    } else {
        let mut rng = Rng::seed_from_u64(seed);
        index::sample(&mut rng, complement.len(), take).into_iter().map(|k| complement[k]).collect()
    };
    negative.sort_unstable();
    let kappa = if negative.is_empty() { 1.0 } else { complement.len() as f64 / negative.len() as f64 };
    CssSupport::new(side, positive.into_iter().collect(), negative, kappa)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub seed: u64,
    pub v1: usize,
    pub v2: usize,
    pub n_pairs: usize,
    pub len_range: (usize, usize),
    pub shuffle_l2: bool,
}

/// Permutation-dictionary corpus with known alignments.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub l1: Vec<Vec<String>>,
    pub l2: Vec<Vec<String>>,
    /// L1 type k translates to L2 type `dictionary[k]`.
    pub dictionary: Vec<usize>,
    /// `order[p][j]` is the 0-based L1 word position that produced L2 position j.
    pub order: Vec<Vec<usize>>,
    pub gold: GoldSet,
}

pub fn l1_type_token(k: usize) -> String {
    format!("a{k}")
}

pub fn l2_type_token(k: usize) -> String {
    format!("b{k}")
}

/// Generates a synthetic parallel corpus. Each L1 sentence draws its length
/// uniformly from `len_range` and its words uniformly without replacement
/// from the `v1` types, so every L2 word has exactly one source position.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let (lo, hi) = cfg.len_range;
    if cfg.n_pairs == 0 {
        return Err(CorpusError::Empty("zero pairs requested".into()));
    }
    if cfg.v1 < 2 || cfg.v2 < cfg.v1 {
        return Err(CorpusError::BadSynthConfig("need v2 ≥ v1 ≥ 2".into()));
    }
    if lo < 1 || hi < lo || hi > cfg.v1 {
        return Err(CorpusError::BadSynthConfig(format!(
            "length range [{lo}, {hi}] must satisfy 1 ≤ lo ≤ hi ≤ v1"
        )));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut targets: Vec<usize> = (0..cfg.v2).collect();
    targets.shuffle(&mut rng);
    let dictionary = targets[..cfg.v1].to_vec();

    let mut out = SynthCorpus {
        l1: Vec::with_capacity(cfg.n_pairs),
        l2: Vec::with_capacity(cfg.n_pairs),
        dictionary,
        order: Vec::with_capacity(cfg.n_pairs),
        gold: GoldSet::new(),
    };
    for p in 0..cfg.n_pairs {
        let len = rng.gen_range(lo..=hi);
        let words: Vec<usize> = index::sample(&mut rng, cfg.v1, len).into_vec();
        let mut order: Vec<usize> = (0..len).collect();
        if cfg.shuffle_l2 {
            order.shuffle(&mut rng);
        }
        let l2: Vec<String> = order.iter().map(|&i| l2_type_token(out.dictionary[words[i]])).collect();
        let mut links = AlignmentLinkSet::new();
        for (j, &i) in order.iter().enumerate() {
            links.insert(j + 1, i + 1);
        }
        out.gold.insert(p + 1, GoldAlignment::from_sure(links));
        out.l1.push(words.iter().map(|&w| l1_type_token(w)).collect());
        out.l2.push(l2);
        out.order.push(order);
    }
    Ok(out)
}

fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{}", line.join(" ")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

impl SynthCorpus {
    /// Writes `l1.txt`, `l2.txt` and `gold.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_lines(&dir.join("l1.txt"), &self.l1)?;
        write_lines(&dir.join("l2.txt"), &self.l2)?;
        let gold_path = dir.join("gold.txt");
        alignment::write_gold(&gold_path, &self.gold).map_err(io_err(&gold_path))
    }

    /// Sub-range of pairs `[start, end)` renumbered from 1.
    pub fn slice(&self, start: usize, end: usize) -> SynthCorpus {
        SynthCorpus {
            l1: self.l1[start..end].to_vec(),
            l2: self.l2[start..end].to_vec(),
            dictionary: self.dictionary.clone(),
            order: self.order[start..end].to_vec(),
            gold: (start..end)
                .map(|p| (p - start + 1, self.gold[&(p + 1)].clone()))
                .collect(),
        }
    }
}
