//! Alignment links, approximate Viterbi prediction and alignment error rate.
//!
//! Links are `(j, i)` pairs: 1-based L2 position first, 1-based L1 position
//! second, where L1 positions exclude NULL. Gold and predicted alignments
//! share one text format, one link per line:
//!
//! ```text
//! # sid j i [S|P]   (j: L2 position, i: L1 position, both 1-based)
//! 1 1 2 S
//! 1 2 1 P
//! ```
//!
//! A missing flag means S. Sure links are also possible links.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::SentencePair;
use crate::model::{EmbedAlign, ModelError};
use crate::parallel::{self, Execution};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("gold alignment violates S ⊆ P")]
    SureNotPossible,
}

pub type Result<T> = std::result::Result<T, AlignmentError>;

/// Predicted links of one sentence pair.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AlignmentLinkSet {
    links: BTreeSet<(usize, usize)>,
}

impl AlignmentLinkSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, l2_pos: usize, l1_pos: usize) -> bool {
        self.links.insert((l2_pos, l1_pos))
    }

    pub fn contains(&self, l2_pos: usize, l1_pos: usize) -> bool {
        self.links.contains(&(l2_pos, l1_pos))
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.links.iter()
    }

    pub fn as_set(&self) -> &BTreeSet<(usize, usize)> {
        &self.links
    }
}

impl FromIterator<(usize, usize)> for AlignmentLinkSet {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        Self { links: iter.into_iter().collect() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GoldAlignment {
    pub sure: BTreeSet<(usize, usize)>,
    pub possible: BTreeSet<(usize, usize)>,
}

impl GoldAlignment {
    pub fn from_sure(links: AlignmentLinkSet) -> Self {
        Self { sure: links.links.clone(), possible: links.links }
    }

    pub fn is_consistent(&self) -> bool {
        self.sure.is_subset(&self.possible)
    }
}

/// Gold alignments keyed by 1-based sentence id.
pub type GoldSet = BTreeMap<usize, GoldAlignment>;

/// Per-position argmax over L1 positions given `scores[i][j]` for L1
/// position `i` (0 = NULL) and L2 position `j`. Ties go to the lowest word
/// position; NULL wins only when strictly better than every word, and NULL
/// winners produce no link.
pub fn argmax_links(scores: &[Vec<f64>], n: usize) -> AlignmentLinkSet {
    let mut links = AlignmentLinkSet::new();
    if scores.len() < 2 {
        return links;
    }
    for j in 0..n {
        let mut best = 1;
        for i in 2..scores.len() {
            if scores[i][j] > scores[best][j] {
                best = i;
            }
        }
        if scores[best][j] >= scores[0][j] {
            links.insert(j + 1, best);
        }
    }
    links
}

/// Approximate Viterbi alignment: conditions on the posterior means and picks
/// argmax_i P(y_j | u_i) under the exact L2 head. The uniform alignment prior
/// is constant in i and therefore left out.
pub fn viterbi_align(model: &EmbedAlign, pair: &SentencePair) -> std::result::Result<AlignmentLinkSet, ModelError> {
    model.check_pair(pair)?;
    let post = model.posterior(&pair.x)?;
    let table = model.l2_log_prob_table(&post.loc);
    let scores: Vec<Vec<f64>> = table.iter().map(|row| pair.y.iter().map(|&y| row[y]).collect()).collect();
    Ok(argmax_links(&scores, pair.n()))
}

/// [`viterbi_align`] over a corpus, keyed by sentence id.
pub fn align_corpus(
    model: &EmbedAlign,
    pairs: &[SentencePair],
    exec: Execution,
) -> std::result::Result<BTreeMap<usize, AlignmentLinkSet>, ModelError> {
    let links = parallel::map_indexed(exec, pairs, |_, p| viterbi_align(model, p));
    pairs.iter().zip(links).map(|(p, l)| Ok((p.id, l?))).collect()
}

/// Token-level L2 prediction accuracy: the fraction of L2 tokens equal to
/// argmax_y Σ_i (1/m) P(y | u_i), with u the posterior means.
pub fn l2_accuracy(model: &EmbedAlign, pairs: &[SentencePair], exec: Execution) -> std::result::Result<f64, ModelError> {
    let parts = parallel::map_indexed(exec, pairs, |_, pair| -> std::result::Result<(usize, usize), ModelError> {
        model.check_pair(pair)?;
        let post = model.posterior(&pair.x)?;
        let table = model.l2_log_prob_table(&post.loc);
        let vy = model.config().l2_vocab_size;
        let marginal: Vec<f64> = (0..vy).map(|y| table.iter().map(|row| row[y].exp()).sum()).collect();
        let mut best = 0;
        for y in 1..vy {
            if marginal[y] > marginal[best] {
                best = y;
            }
        }
        Ok((pair.y.iter().filter(|&&y| y == best).count(), pair.n()))
    });
    let (mut hit, mut total) = (0, 0);
    for part in parts {
        let (h, t) = part?;
        hit += h;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Link counts for AER: |A|, |S|, |A∩S|, |A∩P| and |P|.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AerCounts {
    pub predicted: usize,
    pub sure: usize,
    pub possible: usize,
    pub hit_sure: usize,
    pub hit_possible: usize,
}

impl AerCounts {
    pub fn of(pred: &AlignmentLinkSet, gold: &GoldAlignment) -> Result<Self> {
        if !gold.is_consistent() {
            return Err(AlignmentError::SureNotPossible);
        }
        Ok(Self {
            predicted: pred.len(),
            sure: gold.sure.len(),
            possible: gold.possible.len(),
            hit_sure: pred.links.intersection(&gold.sure).count(),
            hit_possible: pred.links.intersection(&gold.possible).count(),
        })
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            predicted: self.predicted + other.predicted,
            sure: self.sure + other.sure,
            possible: self.possible + other.possible,
            hit_sure: self.hit_sure + other.hit_sure,
            hit_possible: self.hit_possible + other.hit_possible,
        }
    }

    /// 1 − (|A∩S| + |A∩P|) / (|A| + |S|), 0 when both A and S are empty.
    pub fn aer(&self) -> f64 {
        let denom = self.predicted + self.sure;
        if denom == 0 {
            return 0.0;
        }
        1.0 - (self.hit_sure + self.hit_possible) as f64 / denom as f64
    }
}

pub fn aer(pred: &AlignmentLinkSet, gold: &GoldAlignment) -> Result<f64> {
    Ok(AerCounts::of(pred, gold)?.aer())
}

/// Corpus-level counts over every gold sentence; sentences missing from
/// `pred` count as empty predictions.
pub fn corpus_counts(pred: &BTreeMap<usize, AlignmentLinkSet>, gold: &GoldSet) -> Result<AerCounts> {
    let empty = AlignmentLinkSet::new();
    let mut total = AerCounts::default();
    for (sid, g) in gold {
        total = total.merge(AerCounts::of(pred.get(sid).unwrap_or(&empty), g)?);
    }
    Ok(total)
}

/// Corpus-level AER, computed per sentence concurrently and merged by summation.
pub fn corpus_aer(
    exec: Execution,
    pred: &BTreeMap<usize, AlignmentLinkSet>,
    gold: &GoldSet,
) -> Result<f64> {
    let entries: Vec<(&usize, &GoldAlignment)> = gold.iter().collect();
    let empty = AlignmentLinkSet::new();
    let parts = parallel::map_indexed(exec, &entries, |_, (sid, g)| {
        AerCounts::of(pred.get(*sid).unwrap_or(&empty), g)
    });
    let mut total = AerCounts::default();
    for p in parts {
        total = total.merge(p?);
    }
    Ok(total.aer())
}

pub fn parse_gold_str(text: &str) -> Result<GoldSet> {
    let mut out = GoldSet::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let line_no = k + 1;
        let bad = |msg: &str| AlignmentError::Parse { line: line_no, msg: msg.to_string() };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(bad("expected `sid j i [S|P]`"));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(bad(&format!("{what} `{s}` is not a positive integer"))),
            }
        };
        let sid = num(fields[0], "sentence id")?;
        let j = num(fields[1], "L2 position")?;
        let i = num(fields[2], "L1 position")?;
        let sure = match fields.get(3).copied() {
            None | Some("S") => true,
            Some("P") => false,
            Some(other) => return Err(bad(&format!("unknown flag `{other}`"))),
        };
        let entry = out.entry(sid).or_default();
        if sure {
            entry.sure.insert((j, i));
        }
        entry.possible.insert((j, i));
    }
    Ok(out)
}

pub fn parse_gold(path: &Path) -> Result<GoldSet> {
    let text = fs::read_to_string(path)
        .map_err(|source| AlignmentError::Io { path: path.display().to_string(), source })?;
    parse_gold_str(&text)
}

const HEADER: &str = "# sid j i [S|P]  (j: L2 position, i: L1 position, 1-based)";

pub fn write_gold(path: &Path, gold: &GoldSet) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{HEADER}")?;
    for (sid, g) in gold {
        for &(j, i) in &g.possible {
            let flag = if g.sure.contains(&(j, i)) { "S" } else { "P" };
            writeln!(w, "{sid} {j} {i} {flag}")?;
        }
    }
    w.flush()
}

/// Writes predictions in the gold format with flag S, one block per sentence.
pub fn write_predictions(path: &Path, pred: &BTreeMap<usize, AlignmentLinkSet>) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{HEADER}")?;
    for (sid, links) in pred {
        for &(j, i) in links.iter() {
            writeln!(w, "{sid} {j} {i} S")?;
        }
    }
    w.flush()
}
