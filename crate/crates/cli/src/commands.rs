use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::warn;

use embedalign::alignment::{self, corpus_counts, parse_gold, write_predictions};
use embedalign::baselines::{self, Nibm, NibmConfig, NibmTrainConfig};
use embedalign::corpus::{self, SentencePair, SynthConfig, Vocabulary, NULL_ID};
use embedalign::model::{EmbedAlign, EncoderKind};
use embedalign::parallel::Execution;
use embedalign::rng;
use embedalign::semeval::{self, RankMetric};
use embedalign::training::{self, Checkpoint, TrainData, TrainingError};

use crate::config::Config;
use crate::{AlignArgs, Baseline, EmbedMode, LexSubMetric, SynthArgs};

pub fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// 3 for numerical failures during training, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<TrainingError>(),
            Some(TrainingError::NonFiniteGradient { .. } | TrainingError::NonFiniteLoss { .. })
        )
    });
    if numerical {
        3
    } else {
        2
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: args.seed,
        v1: args.v1,
        v2: args.v2,
        n_pairs: args.pairs,
        len_range: (args.len[0], args.len[1]),
        shuffle_l2: args.shuffle,
    };
    let data = corpus::synth_corpus(&cfg)?;
    let held = args.valid_pairs + args.test_pairs;
    if held == 0 {
        data.write(&args.out)?;
        println!("wrote {} pairs to {}", args.pairs, args.out.display());
        return Ok(());
    }
    if held >= args.pairs {
        bail!("--valid-pairs + --test-pairs must leave at least one training pair");
    }
    let train_end = args.pairs - held;
    let valid_end = train_end + args.valid_pairs;
    for (name, start, end) in [("train", 0, train_end), ("valid", train_end, valid_end), ("test", valid_end, args.pairs)] {
        if end > start {
            data.slice(start, end).write(&args.out.join(name))?;
        }
    }
    println!(
        "wrote {} train, {} valid and {} test pairs to {}",
        train_end,
        args.valid_pairs,
        args.test_pairs,
        args.out.display()
    );
    Ok(())
}

pub fn train(config_path: &Path, hierarchical: Option<bool>, exec: Execution) -> Result<()> {
    let mut cfg = Config::load(config_path)?;
    if let Some(h) = hierarchical {
        cfg.model.hierarchical = h;
    }
    let p = &cfg.paths;
    let corpus = corpus::load_parallel(&p.train_l1, &p.train_l2, &cfg.data.load_options())?;
    let valid = corpus::load_with_vocab(&p.valid_l1, &p.valid_l2, &corpus.l1_vocab, &corpus.l2_vocab)?;
    let gold = match &p.valid_gold {
        Some(path) => Some(parse_gold(path)?),
        None => None,
    };
    let model_cfg = cfg.model.model_config(corpus.l1_vocab.len(), corpus.l2_vocab.len());
    let model = EmbedAlign::new(model_cfg, rng::derive_seed(cfg.training.seed, "init", 0))?;
    let data = TrainData { train: &corpus.pairs, valid: &valid, valid_gold: gold.as_ref() };
    let out = training::train(model, &data, &cfg.training, exec)?;

    ensure_parent(&p.metrics)?;
    training::write_metrics(&p.metrics, &out.metrics)?;
    let ck = Checkpoint {
        model: out.best,
        l1_vocab: corpus.l1_vocab,
        l2_vocab: corpus.l2_vocab,
        updates: out.updates,
        best_aer: out.best_aer,
    };
    ensure_parent(&p.checkpoint)?;
    ck.save(&p.checkpoint)?;
    match out.best_aer {
        Some(a) => println!("best epoch {} validation AER {a:.6}", out.best_epoch),
        None => println!("trained {} epochs (no validation gold)", out.metrics.len()),
    }
    Ok(())
}

/// Fails when a side of the input has tokens but none of them is known to
/// the vocabulary: the corpus and model do not belong together.
fn check_overlap(lines: &[Vec<String>], vocab: &Vocabulary, side: &str) -> Result<()> {
    let total: usize = lines.iter().map(Vec::len).sum();
    let known = lines.iter().flatten().filter(|t| vocab.id(t).is_some()).count();
    if total > 0 && known == 0 {
        bail!("vocabulary mismatch: no {side} token of the input is in the checkpoint vocabulary");
    }
    if known < total {
        warn!("{} of {total} {side} tokens are unknown to the checkpoint", total - known);
    }
    Ok(())
}

pub fn align(args: &AlignArgs, exec: Execution) -> Result<()> {
    let (l1, l2) = corpus::read_pair_files(&args.l1, &args.l2)?;
    let pred = match args.baseline {
        None => {
            let path = args.checkpoint.as_ref().context("--checkpoint is required without --baseline")?;
            let ck = Checkpoint::load(path)?;
            check_overlap(&l1, &ck.l1_vocab, "L1")?;
            check_overlap(&l2, &ck.l2_vocab, "L2")?;
            let pairs = corpus::pairs_from_lines(&l1, &l2, &ck.l1_vocab, &ck.l2_vocab)?;
            alignment::align_corpus(&ck.model, &pairs, exec)?
        }
        Some(kind) => {
            let v1 = Vocabulary::build(l1.iter().map(Vec::as_slice), None)?;
            let v2 = Vocabulary::build(l2.iter().map(Vec::as_slice), None)?;
            let pairs = corpus::pairs_from_lines(&l1, &l2, &v1, &v2)?;
            match kind {
                Baseline::Ibm1 => {
                    let (table, _) = baselines::ibm1_train(&pairs, v1.len(), v2.len(), args.iterations, exec)?;
                    if let Some(out) = &args.table_out {
                        baselines::write_ibm1_table(out, &table, &v1, &v2)
                            .with_context(|| format!("writing {}", out.display()))?;
                    }
                    baselines::ibm1_align_corpus(&pairs, &table, exec)
                }
                Baseline::Nibm => {
                    let cfg = NibmConfig {
                        encoder: EncoderKind::Bow,
                        hidden: args.hidden,
                        l1_vocab_size: v1.len(),
                        l2_vocab_size: v2.len(),
                    };
                    let model = Nibm::new(cfg, rng::derive_seed(args.seed, "nibm-init", 0));
                    let train_pairs: Vec<SentencePair> = pairs.iter().filter(|p| p.n() > 0).cloned().collect();
                    let tc = NibmTrainConfig { epochs: args.epochs, batch_size: 100, lr: 1e-3, n_neg: 1000, css: true, seed: args.seed };
                    let model = baselines::nibm_train(model, &train_pairs, &tc, exec)?;
                    model.align_corpus(&pairs, exec)?
                }
            }
        }
    };
    ensure_parent(&args.out)?;
    write_predictions(&args.out, &pred).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

pub fn eval_aer(pred: &Path, gold: &Path, exec: Execution) -> Result<()> {
    let pred_sets = parse_gold(pred)?;
    let gold = parse_gold(gold)?;
    let links = pred_sets.into_iter().map(|(k, g)| (k, g.possible.into_iter().collect())).collect();
    let aer = alignment::corpus_aer(exec, &links, &gold)?;
    let c = corpus_counts(&links, &gold)?;
    println!("{aer:.6}");
    println!("|A|={} |S|={} |P|={}", c.predicted, c.sure, c.possible);
    Ok(())
}

fn rank_metric(m: LexSubMetric) -> RankMetric {
    match m {
        LexSubMetric::Kl => RankMetric::Kl,
        LexSubMetric::KlReverse => RankMetric::KlReverse,
        LexSubMetric::Cosine => RankMetric::Cosine,
    }
}

pub fn eval_lexsub(checkpoint: &Path, input: &Path, metric: LexSubMetric, exec: Execution) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let instances = semeval::parse_lexsub(input)?;
    let (scores, mean) = semeval::lexsub_gap(&instances, &ck.model, &ck.l1_vocab, rank_metric(metric), exec)?;
    for (k, g) in scores.iter().enumerate() {
        println!("{}\t{g:.6}", k + 1);
    }
    println!("mean\t{mean:.6}");
    Ok(())
}

fn l1_ids(lines: &[Vec<String>], vocab: &Vocabulary) -> Vec<Vec<usize>> {
    lines.iter().map(|l| l.iter().map(|t| vocab.id_or_unk(t)).collect()).collect()
}

pub fn eval_wordsim(checkpoint: &Path, input: &Path, corpus_path: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let pairs = semeval::parse_wordsim(input)?;
    let sentences = l1_ids(&corpus::read_lines(corpus_path)?, &ck.l1_vocab);
    let (rho, n) = semeval::wordsim_spearman(&pairs, &sentences, &ck.model, &ck.l1_vocab)?;
    println!("{rho:.6}");
    println!("pairs\t{n}");
    Ok(())
}

fn write_vector(w: &mut impl Write, key: &str, v: &[f64]) -> std::io::Result<()> {
    write!(w, "{key}")?;
    for x in v {
        write!(w, " {x}")?;
    }
    writeln!(w)
}

pub fn embed(checkpoint: &Path, corpus_path: &Path, mode: EmbedMode, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let lines = corpus::read_lines(corpus_path)?;
    let sentences = l1_ids(&lines, &ck.l1_vocab);
    ensure_parent(out)?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    match mode {
        EmbedMode::Type => {
            let table = semeval::type_embeddings(&sentences, &ck.model, Execution::Parallel)?;
            let mut seen = BTreeSet::new();
            for tok in lines.iter().flatten() {
                if seen.insert(tok.as_str()) {
                    let id = ck.l1_vocab.id_or_unk(tok);
                    debug_assert_ne!(id, NULL_ID);
                    write_vector(&mut w, tok, &table[&id])?;
                }
            }
        }
        EmbedMode::Sentence => {
            for (k, s) in sentences.iter().enumerate() {
                if s.is_empty() {
                    warn!("line {} is empty; skipped", k + 1);
                    continue;
                }
                write_vector(&mut w, &(k + 1).to_string(), &semeval::sentence_embedding(s, &ck.model)?)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
