//! Lexical substitution by density overlap, GAP, word/sentence embeddings,
//! cosine similarity and Spearman correlation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use thiserror::Error;

use crate::corpus::{tokenize, Vocabulary, NULL_ID, UNK_ID};
use crate::gaussian::{kl_diag_gaussian, GaussianError};
use crate::model::{EmbedAlign, ModelError};
use crate::parallel::{self, Execution};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// KL between two diagonal Gaussians given as (loc, scale).
pub fn kl_diag(p: (&[f64], &[f64]), q: (&[f64], &[f64])) -> Result<f64> {
    Ok(kl_diag_gaussian(p.0, p.1, q.0, q.1)?)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::Contract(format!("vector sizes {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Generalised average precision of gold weights listed in system order.
pub fn gap(ranked: &[f64]) -> Result<f64> {
    let score = |weights: &[f64]| {
        let mut cum = 0.0;
        let mut total = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            cum += w;
            if w > 0.0 {
                total += cum / (k + 1) as f64;
            }
        }
        total
    };
    let mut ideal: Vec<f64> = ranked.iter().copied().filter(|&w| w > 0.0).collect();
    if ideal.is_empty() {
        return Err(EvalError::Undefined("GAP needs at least one positive gold weight".into()));
    }
    ideal.sort_by(|a, b| b.total_cmp(a));
    Ok(score(ranked) / score(&ideal))
}

/// Average ranks starting at 1; ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of the average ranks.
pub fn spearman(system: &[f64], gold: &[f64]) -> Result<f64> {
    if system.len() != gold.len() || system.len() < 2 {
        return Err(EvalError::Contract("spearman needs two equal-length lists of at least 2".into()));
    }
    let (a, b) = (average_ranks(system), average_ranks(gold));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(EvalError::Undefined("spearman of a constant list".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// One lexical substitution item. `position` indexes `sentence` (0-based,
/// NULL not counted).
#[derive(Clone, Debug, PartialEq)]
pub struct LexSubInstance {
    pub target: String,
    pub position: usize,
    pub sentence: Vec<String>,
    pub candidates: Vec<(String, f64)>,
}

/// Parses `target position<TAB>sentence<TAB>cand:w;cand:w` lines. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_lexsub_str(text: &str) -> Result<Vec<LexSubInstance>> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| EvalError::Parse { line: k + 1, msg: msg.to_string() };
        let fields: Vec<&str> = line.split('\t').collect();
        let [head, sentence, cands] = fields[..] else {
            return Err(err("expected three tab-separated fields"));
        };
        let mut head_parts = head.split_whitespace();
        let (Some(target), Some(pos), None) = (head_parts.next(), head_parts.next(), head_parts.next()) else {
            return Err(err("expected `target position`"));
        };
        let position: usize = pos.parse().map_err(|_| err("bad position"))?;
        let sentence = tokenize(sentence);
        if position >= sentence.len() {
            return Err(err("position outside the sentence"));
        }
        let mut candidates = Vec::new();
        for c in cands.split(';').filter(|c| !c.trim().is_empty()) {
            let (tok, w) = c.trim().rsplit_once(':').ok_or_else(|| err("candidate without weight"))?;
            let w: f64 = w.parse().map_err(|_| err("bad candidate weight"))?;
            if !(w >= 0.0) {
                return Err(err("negative candidate weight"));
            }
            candidates.push((tok.to_string(), w));
        }
        if !candidates.iter().any(|(_, w)| *w > 0.0) {
            return Err(err("no candidate with positive weight"));
        }
        out.push(LexSubInstance { target: target.to_string(), position, sentence, candidates });
    }
    Ok(out)
}

pub fn parse_lexsub(path: &Path) -> Result<Vec<LexSubInstance>> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    parse_lexsub_str(&text)
}

/// Parses `token1 token2 score` lines.
pub fn parse_wordsim_str(text: &str) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [a, b, s] = parts[..] else {
            return Err(EvalError::Parse { line: k + 1, msg: "expected `token1 token2 score`".into() });
        };
        let s: f64 = s.parse().map_err(|_| EvalError::Parse { line: k + 1, msg: "bad score".into() })?;
        out.push((a.to_string(), b.to_string(), s));
    }
    Ok(out)
}

pub fn parse_wordsim(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    parse_wordsim_str(&text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankMetric {
    /// KL(candidate ‖ target), ascending.
    Kl,
    /// KL(target ‖ candidate), ascending.
    KlReverse,
    /// Cosine of posterior means, descending.
    Cosine,
}

fn lookup(vocab: &Vocabulary, tok: &str) -> usize {
    match vocab.id(tok) {
        Some(id) => id,
        None => {
            warn!("`{tok}` is not in the L1 vocabulary; using the unknown-word id");
            UNK_ID
        }
    }
}

/// A candidate with its score under the chosen metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub token: String,
    pub gold_weight: f64,
    pub score: f64,
}

/// Ranks candidates by substituting each into the target's slot, re-encoding,
/// and comparing its posterior with the target's. Stable: equal scores keep
/// the input order.
pub fn rank_candidates(inst: &LexSubInstance, model: &EmbedAlign, vocab: &Vocabulary, metric: RankMetric) -> Result<Vec<Ranked>> {
    let mut ids: Vec<usize> = inst.sentence.iter().map(|t| lookup(vocab, t)).collect();
    ids.insert(0, NULL_ID);
    let slot = inst.position + 1;
    let target = model.posterior(&ids)?;
    let (t_loc, t_scale) = (target.loc.row(slot).to_vec(), target.scale.row(slot).to_vec());
    let mut ranked = Vec::with_capacity(inst.candidates.len());
    for (tok, w) in &inst.candidates {
        let mut sub = ids.clone();
        sub[slot] = lookup(vocab, tok);
        let post = model.posterior(&sub)?;
        let (c_loc, c_scale) = (post.loc.row(slot), post.scale.row(slot));
        let score = match metric {
            RankMetric::Kl => kl_diag((c_loc, c_scale), (&t_loc, &t_scale))?,
            RankMetric::KlReverse => kl_diag((&t_loc, &t_scale), (c_loc, c_scale))?,
            RankMetric::Cosine => cosine(c_loc, &t_loc)?,
        };
        ranked.push(Ranked { token: tok.clone(), gold_weight: *w, score });
    }
    match metric {
        RankMetric::Cosine => ranked.sort_by(|a, b| b.score.total_cmp(&a.score)),
        _ => ranked.sort_by(|a, b| a.score.total_cmp(&b.score)),
    }
    Ok(ranked)
}

/// GAP per instance (in input order) and their mean.
pub fn lexsub_gap(
    instances: &[LexSubInstance],
    model: &EmbedAlign,
    vocab: &Vocabulary,
    metric: RankMetric,
    exec: Execution,
) -> Result<(Vec<f64>, f64)> {
    let parts = parallel::map_indexed(exec, instances, |_, inst| {
        let ranked = rank_candidates(inst, model, vocab, metric)?;
        gap(&ranked.iter().map(|r| r.gold_weight).collect::<Vec<_>>())
    });
    let scores: Vec<f64> = parts.into_iter().collect::<Result<_>>()?;
    let mean = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
    Ok((scores, mean))
}

/// Mean posterior location over every occurrence of `token` in `sentences`
/// (L1 ids without NULL). Falls back to the unknown word when the token never
/// occurs.
pub fn type_embedding(token: usize, sentences: &[Vec<usize>], model: &EmbedAlign) -> Result<Vec<f64>> {
    let d = model.config().latent_dim;
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for s in sentences.iter().filter(|s| s.contains(&token)) {
        let mut ids = vec![NULL_ID];
        ids.extend(s);
        let post = model.posterior(&ids)?;
        for (i, &w) in s.iter().enumerate() {
            if w == token {
                sum.iter_mut().zip(post.loc.row(i + 1)).for_each(|(a, b)| *a += b);
                count += 1;
            }
        }
    }
    if count == 0 {
        warn!("token id {token} does not occur; embedding it out of context as the unknown word");
        let post = model.posterior(&[NULL_ID, UNK_ID])?;
        return Ok(post.loc.row(1).to_vec());
    }
    Ok(sum.into_iter().map(|v| v / count as f64).collect())
}

/// Type embeddings of every word id occurring in `sentences`, encoding each
/// sentence once.
pub fn type_embeddings(sentences: &[Vec<usize>], model: &EmbedAlign, exec: Execution) -> Result<BTreeMap<usize, Vec<f64>>> {
    let posts = parallel::map_indexed(exec, sentences, |_, s| {
        let mut ids = vec![NULL_ID];
        ids.extend(s);
        model.posterior(&ids)
    });
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (s, post) in sentences.iter().zip(posts) {
        let post = post?;
        for (i, &w) in s.iter().enumerate() {
            let entry = acc.entry(w).or_insert_with(|| (vec![0.0; post.dim()], 0));
            entry.0.iter_mut().zip(post.loc.row(i + 1)).for_each(|(a, b)| *a += b);
            entry.1 += 1;
        }
    }
    Ok(acc.into_iter().map(|(w, (sum, n))| (w, sum.into_iter().map(|v| v / n as f64).collect())).collect())
}

/// Mean in-context posterior location over the words of a sentence (L1 ids
/// without NULL).
pub fn sentence_embedding(words: &[usize], model: &EmbedAlign) -> Result<Vec<f64>> {
    if words.is_empty() {
        return Err(EvalError::Contract("empty sentence".into()));
    }
    let mut ids = vec![NULL_ID];
    ids.extend(words);
    let post = model.posterior(&ids)?;
    let d = post.dim();
    let mut out = vec![0.0; d];
    for i in 1..ids.len() {
        out.iter_mut().zip(post.loc.row(i)).for_each(|(a, b)| *a += b);
    }
    Ok(out.into_iter().map(|v| v / words.len() as f64).collect())
}

/// Spearman correlation between cosine similarities of type embeddings and
/// gold scores. Returns the coefficient and the number of pairs used.
pub fn wordsim_spearman(
    pairs: &[(String, String, f64)],
    sentences: &[Vec<usize>],
    model: &EmbedAlign,
    vocab: &Vocabulary,
) -> Result<(f64, usize)> {
    let mut sys = Vec::with_capacity(pairs.len());
    let mut gold = Vec::with_capacity(pairs.len());
    for (a, b, g) in pairs {
        let ea = type_embedding(lookup(vocab, a), sentences, model)?;
        let eb = type_embedding(lookup(vocab, b), sentences, model)?;
        sys.push(cosine(&ea, &eb)?);
        gold.push(*g);
    }
    Ok((spearman(&sys, &gold)?, pairs.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::model::{EncoderKind, ModelConfig};
    use approx::assert_relative_eq;

    #[test]
    fn kl_fixtures_and_asymmetry() {
        assert_eq!(kl_diag((&[0.2], &[0.7]), (&[0.2], &[0.7])).unwrap(), 0.0);
        assert!((kl_diag((&[0.0], &[1.0]), (&[0.0], &[2.0])).unwrap() - 0.3181472).abs() < 1e-7);
        let ab = kl_diag((&[0.0], &[1.0]), (&[1.0], &[3.0])).unwrap();
        let ba = kl_diag((&[1.0], &[3.0]), (&[0.0], &[1.0])).unwrap();
        assert!((ab - ba).abs() > 1e-3);
        assert!(kl_diag((&[0.0], &[0.0]), (&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn cosine_fixtures() {
        assert_relative_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_relative_eq!(cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 0.8, epsilon = 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(EvalError::ZeroVector)));
    }

    #[test]
    fn gap_fixtures() {
        assert_relative_eq!(gap(&[2.0, 0.0, 1.0]).unwrap(), 3.0 / 3.5, epsilon = 1e-15);
        assert!((gap(&[2.0, 0.0, 1.0]).unwrap() - 0.857143).abs() < 1e-6);
        assert_eq!(gap(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(gap(&[3.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(gap(&[0.0, 0.0]), Err(EvalError::Undefined(_))));
    }

    #[test]
    fn spearman_fixtures() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-15);
        // ranks [1, 2.5, 2.5, 4] vs [1, 3, 2, 4]: cov 4.5, var 4.5 and 5
        let expected = 4.5 / (4.5_f64 * 5.0).sqrt();
        assert_relative_eq!(spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), expected, epsilon = 1e-15);
        assert!(matches!(spearman(&[1.0, 1.0], &[1.0, 2.0]), Err(EvalError::Undefined(_))));
    }

    #[test]
    fn lexsub_parsing() {
        let text = "bright 1\tthe bright sun\tshiny:3;smart:0;vivid:1\n";
        let inst = parse_lexsub_str(text).unwrap();
        assert_eq!(inst[0].position, 1);
        assert_eq!(inst[0].candidates[0], ("shiny".to_string(), 3.0));
        assert!(parse_lexsub_str("x 5\ta b\tc:1\n").is_err());
        assert!(parse_lexsub_str("x 0\ta b\tc:0\n").is_err());
        let ws = parse_wordsim_str("a b 3.5\n").unwrap();
        assert_eq!(ws[0].2, 3.5);
    }

    fn setup(encoder: EncoderKind) -> (EmbedAlign, Vocabulary) {
        let words: Vec<String> = ["the", "bright", "sun", "shiny", "vivid", "smart"].iter().map(|w| w.to_string()).collect();
        let vocab = Vocabulary::build([words.as_slice()], None).unwrap();
        let cfg = ModelConfig {
            encoder,
            latent_dim: 3,
            embed_dim: 4,
            hierarchical: false,
            sentence_dim: 2,
            l1_vocab_size: vocab.len(),
            l2_vocab_size: 4,
        };
        (EmbedAlign::new(cfg, 12).unwrap(), vocab)
    }

    #[test]
    fn self_substitution_ranks_first() {
        let (model, vocab) = setup(EncoderKind::Birnn);
        let inst = parse_lexsub_str("bright 1\tthe bright sun\tshiny:1;bright:2;vivid:1\n").unwrap().remove(0);
        for metric in [RankMetric::Kl, RankMetric::KlReverse, RankMetric::Cosine] {
            let ranked = rank_candidates(&inst, &model, &vocab, metric).unwrap();
            assert_eq!(ranked[0].token, "bright", "{metric:?}");
        }
        let ranked = rank_candidates(&inst, &model, &vocab, RankMetric::Kl).unwrap();
        assert_eq!(ranked[0].score, 0.0);
    }

    #[test]
    fn ranking_matches_brute_force_on_bow() {
        let (model, vocab) = setup(EncoderKind::Bow);
        let inst = parse_lexsub_str("bright 1\tthe bright sun\tshiny:1;smart:2;vivid:1;sun:0\n").unwrap().remove(0);
        let ranked = rank_candidates(&inst, &model, &vocab, RankMetric::Kl).unwrap();
        // BoW posteriors are context free, so each divergence can be computed
        // from a one-word sentence
        let post = |tok: &str| model.posterior(&[NULL_ID, vocab.id(tok).unwrap()]).unwrap();
        let t = post("bright");
        let mut expected: Vec<(String, f64)> = inst
            .candidates
            .iter()
            .map(|(c, _)| {
                let p = post(c);
                (c.clone(), kl_diag_gaussian(p.loc.row(1), p.scale.row(1), t.loc.row(1), t.scale.row(1)).unwrap())
            })
            .collect();
        expected.sort_by(|a, b| a.1.total_cmp(&b.1));
        let got: Vec<&str> = ranked.iter().map(|r| r.token.as_str()).collect();
        let want: Vec<&str> = expected.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn embedding_properties() {
        let (model, vocab) = setup(EncoderKind::Bow);
        let id = |t: &str| vocab.id(t).unwrap();
        let single = model.posterior(&[NULL_ID, id("sun")]).unwrap();
        let one = sentence_embedding(&[id("sun")], &model).unwrap();
        assert_eq!(one, single.loc.row(1));
        let two = sentence_embedding(&[id("sun"), id("sun")], &model).unwrap();
        for (a, b) in two.iter().zip(&one) {
            assert_relative_eq!(*a, *b, max_relative = 1e-15);
        }
        assert!(sentence_embedding(&[], &model).is_err());

        let sents = vec![vec![id("the"), id("sun")], vec![id("sun"), id("bright")]];
        let te = type_embedding(id("sun"), &sents, &model).unwrap();
        for (a, b) in te.iter().zip(single.loc.row(1)) {
            assert_relative_eq!(*a, *b, max_relative = 1e-14);
        }

        let (rnn, vocab) = setup(EncoderKind::Birnn);
        let p1 = rnn.posterior(&[NULL_ID, id("the"), id("sun")]).unwrap();
        let p2 = rnn.posterior(&[NULL_ID, id("sun"), id("bright")]).unwrap();
        let te = type_embedding(vocab.id("sun").unwrap(), &sents, &rnn).unwrap();
        for (k, v) in te.iter().enumerate() {
            assert_relative_eq!(*v, (p1.loc.get2(2, k) + p2.loc.get2(1, k)) / 2.0, max_relative = 1e-14);
        }
        let all = type_embeddings(&sents, &rnn, Execution::Parallel).unwrap();
        assert_eq!(all.len(), 3);
        for (a, b) in all[&vocab.id("sun").unwrap()].iter().zip(&te) {
            assert_relative_eq!(*a, *b, max_relative = 1e-14);
        }
    }
}
