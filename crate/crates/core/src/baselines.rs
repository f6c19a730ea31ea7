//! Alignment baselines: IBM model 1 trained by EM, and a neural IBM1 whose
//! lexical distribution P(y | x_i) comes from a small network.
//!
//! Both work on the NULL-padded L1 sequences of the main model and use a
//! uniform alignment prior over the m positions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{argmax_links, AlignmentLinkSet};
use crate::autodiff::{self, Gradients, ParamStore, Tape, Tensor, Var};
use crate::corpus::{self, CssSupport, SentencePair, Side, Vocabulary};
use crate::model::{self, check_ids, lstm_shapes, EncoderKind, ModelError, Result};
use crate::parallel::{self, Execution};
use crate::rng;
use crate::training::{adam_step, glorot_with, AdamConfig, AdamState, TrainingError};

/// Lexical table t(y | x), one row per L1 type.
#[derive(Clone, Debug, PartialEq)]
pub struct Ibm1Table {
    vx: usize,
    vy: usize,
    t: Vec<f64>,
}

impl Ibm1Table {
    pub fn uniform(vx: usize, vy: usize) -> Self {
        Self { vx, vy, t: vec![1.0 / vy as f64; vx * vy] }
    }

    /// Builds a table from explicit rows; each row is renormalised.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let vx = rows.len();
        let vy = rows.first().map_or(0, Vec::len);
        let mut t = Vec::with_capacity(vx * vy);
        for r in rows {
            assert_eq!(r.len(), vy, "ragged table");
            let z: f64 = r.iter().sum();
            t.extend(r.iter().map(|v| v / z));
        }
        Self { vx, vy, t }
    }

    pub fn l1_size(&self) -> usize {
        self.vx
    }

    pub fn l2_size(&self) -> usize {
        self.vy
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.t[x * self.vy + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.t[x * self.vy..(x + 1) * self.vy]
    }

    /// argmax_y t(y | x), ties to the lowest id.
    pub fn best_translation(&self, x: usize) -> usize {
        let row = self.row(x);
        let mut best = 0;
        for y in 1..self.vy {
            if row[y] > row[best] {
                best = y;
            }
        }
        best
    }
}

fn check_table(t: &Ibm1Table, pair: &SentencePair) -> Result<()> {
    check_ids(Side::L1, &pair.x, t.vx)?;
    check_ids(Side::L2, &pair.y, t.vy)
}

/// Expected counts of one pair as sparse (x, y, count) triples.
fn expected_counts(t: &Ibm1Table, pair: &SentencePair) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(pair.m() * pair.n());
    for &y in &pair.y {
        let z: f64 = pair.x.iter().map(|&x| t.prob(x, y)).sum();
        for &x in &pair.x {
            out.push((x, y, t.prob(x, y) / z));
        }
    }
    out
}

/// One EM iteration. Expected counts are computed per pair under `exec` and
/// merged in corpus order; every row with counts is renormalised, rows
/// without counts are left as they were.
pub fn ibm1_em_step(pairs: &[SentencePair], t: &Ibm1Table, exec: Execution) -> Result<Ibm1Table> {
    for p in pairs {
        check_table(t, p)?;
    }
    let parts = parallel::map_indexed(exec, pairs, |_, p| expected_counts(t, p));
    let mut counts = vec![0.0; t.vx * t.vy];
    for part in parts {
        for (x, y, c) in part {
            counts[x * t.vy + y] += c;
        }
    }
    let mut next = t.clone();
    for x in 0..t.vx {
        let row = &counts[x * t.vy..(x + 1) * t.vy];
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            for (dst, c) in next.t[x * t.vy..(x + 1) * t.vy].iter_mut().zip(row) {
                *dst = c / z;
            }
        }
    }
    Ok(next)
}

/// Σ_pairs Σ_j log Σ_i (1/m) t(y_j | x_i).
pub fn ibm1_log_likelihood(pairs: &[SentencePair], t: &Ibm1Table) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let m = p.m() as f64;
            p.y.iter().map(|&y| (p.x.iter().map(|&x| t.prob(x, y)).sum::<f64>() / m).ln()).sum::<f64>()
        })
        .sum()
}

/// Runs `iterations` EM steps from the uniform table; returns the table and
/// the log-likelihood before each step and after the last.
pub fn ibm1_train(
    pairs: &[SentencePair],
    vx: usize,
    vy: usize,
    iterations: usize,
    exec: Execution,
) -> Result<(Ibm1Table, Vec<f64>)> {
    let mut t = Ibm1Table::uniform(vx, vy);
    let mut trace = vec![ibm1_log_likelihood(pairs, &t)];
    for _ in 0..iterations {
        t = ibm1_em_step(pairs, &t, exec)?;
        trace.push(ibm1_log_likelihood(pairs, &t));
    }
    Ok((t, trace))
}

/// â_j = argmax_i t(y_j | x_i) with the tie and NULL rules of [`argmax_links`].
pub fn ibm1_align(pair: &SentencePair, t: &Ibm1Table) -> AlignmentLinkSet {
    let scores: Vec<Vec<f64>> = pair.x.iter().map(|&x| pair.y.iter().map(|&y| t.prob(x, y)).collect()).collect();
    argmax_links(&scores, pair.n())
}

pub fn ibm1_align_corpus(pairs: &[SentencePair], t: &Ibm1Table, exec: Execution) -> BTreeMap<usize, AlignmentLinkSet> {
    let links = parallel::map_indexed(exec, pairs, |_, p| ibm1_align(p, t));
    pairs.iter().map(|p| p.id).zip(links).collect()
}

/// Writes "x_token y_token prob" for every entry with prob ≥ 1e-6.
pub fn write_ibm1_table(path: &Path, t: &Ibm1Table, l1: &Vocabulary, l2: &Vocabulary) -> io::Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    for x in 0..t.vx {
        for y in 0..t.vy {
            let p = t.prob(x, y);
            if p >= 1e-6 {
                writeln!(f, "{} {} {}", l1.token(x).unwrap_or("?"), l2.token(y).unwrap_or("?"), p)?;
            }
        }
    }
    f.flush()
}

/// Neural IBM1 parameter names.
pub mod names {
    pub const EMB: &str = "nibm.emb";
    pub const HID_W: &str = "nibm.hid.w";
    pub const HID_B: &str = "nibm.hid.b";
    pub const OUT_W: &str = "nibm.out.w";
    pub const OUT_B: &str = "nibm.out.b";
    pub const FWD: &str = "nibm.fwd";
    pub const BWD: &str = "nibm.bwd";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NibmConfig {
    pub encoder: EncoderKind,
    /// Embedding and hidden width d_x.
    pub hidden: usize,
    pub l1_vocab_size: usize,
    pub l2_vocab_size: usize,
}

impl NibmConfig {
    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, vx, vy) = (self.hidden, self.l1_vocab_size, self.l2_vocab_size);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            (names::EMB.into(), vec![vx, h]),
            (names::OUT_W.into(), vec![vy, h]),
            (names::OUT_B.into(), vec![vy]),
        ];
        match self.encoder {
            EncoderKind::Bow => {
                out.push((names::HID_W.into(), vec![h, h]));
                out.push((names::HID_B.into(), vec![h]));
            }
            EncoderKind::Birnn => {
                out.extend(lstm_shapes(names::FWD, h, h));
                out.extend(lstm_shapes(names::BWD, h, h));
            }
        }
        out
    }
}

/// Neural IBM1: P(y | x_i) = softmax(O r_i + c) where r_i is a tanh MLP over
/// the embedding of x_i (or the summed BiLSTM state at i).
#[derive(Clone, Debug, PartialEq)]
pub struct Nibm {
    pub config: NibmConfig,
    pub params: ParamStore,
}

impl Nibm {
    pub fn new(config: NibmConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        for (name, shape) in config.shapes() {
            let t = if shape.len() == 2 {
                glorot_with(&shape, &mut rng::rng_for(seed, &name, 0)).expect("2-d shape")
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Self { config, params }
    }

    pub fn zeroed(config: NibmConfig) -> Self {
        let mut params = ParamStore::new();
        for (name, shape) in config.shapes() {
            params.insert(name, Tensor::zeros(&shape));
        }
        Self { config, params }
    }

    fn check(&self, pair: &SentencePair) -> Result<()> {
        check_ids(Side::L1, &pair.x, self.config.l1_vocab_size)?;
        check_ids(Side::L2, &pair.y, self.config.l2_vocab_size)
    }

    pub fn log_likelihood(&self, pair: &SentencePair, css: Option<&CssSupport>) -> Result<f64> {
        self.check(pair)?;
        let mut tape = Tape::new(&self.params);
        let ll = nibm_log_likelihood(&mut tape, &self.config, pair, css)?;
        Ok(tape.value(ll).item())
    }

    pub fn log_likelihood_and_gradients(&self, pair: &SentencePair, css: Option<&CssSupport>) -> Result<(f64, Gradients)> {
        self.check(pair)?;
        let mut tape = Tape::new(&self.params);
        let ll = nibm_log_likelihood(&mut tape, &self.config, pair, css)?;
        Ok((tape.value(ll).item(), tape.backward(ll)?))
    }

    /// log P(y | x_i) for every position i; `[m][v_y]`.
    pub fn log_prob_table(&self, x: &[usize]) -> Result<Vec<Vec<f64>>> {
        check_ids(Side::L1, x, self.config.l1_vocab_size)?;
        let mut tape = Tape::new(&self.params);
        let r = nibm_repr(&mut tape, &self.config, x)?;
        let (w, b) = (tape.param(names::OUT_W)?, tape.param(names::OUT_B)?);
        let logits = tape.linear(r, w, Some(b))?;
        let lp = tape.log_softmax_rows(logits)?;
        let t = tape.value(lp);
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    }

    pub fn align(&self, pair: &SentencePair) -> Result<AlignmentLinkSet> {
        self.check(pair)?;
        let table = self.log_prob_table(&pair.x)?;
        let scores: Vec<Vec<f64>> = table.iter().map(|row| pair.y.iter().map(|&y| row[y]).collect()).collect();
        Ok(argmax_links(&scores, pair.n()))
    }

    pub fn align_corpus(&self, pairs: &[SentencePair], exec: Execution) -> Result<BTreeMap<usize, AlignmentLinkSet>> {
        let links = parallel::map_indexed(exec, pairs, |_, p| self.align(p));
        pairs.iter().zip(links).map(|(p, l)| Ok((p.id, l?))).collect()
    }
}

fn nibm_repr(tape: &mut Tape, cfg: &NibmConfig, x: &[usize]) -> Result<Var> {
    let emb = tape.param(names::EMB)?;
    let e = tape.gather_rows(emb, x)?;
    match cfg.encoder {
        EncoderKind::Bow => {
            let (w, b) = (tape.param(names::HID_W)?, tape.param(names::HID_B)?);
            let pre = tape.linear(e, w, Some(b))?;
            Ok(tape.tanh(pre))
        }
        EncoderKind::Birnn => {
            let rows: Vec<Var> = (0..x.len()).map(|i| tape.row(e, i)).collect::<autodiff::Result<_>>()?;
            let fwd = model::lstm(tape, names::FWD, &rows, cfg.hidden)?;
            let rev: Vec<Var> = rows.iter().rev().copied().collect();
            let mut bwd = model::lstm(tape, names::BWD, &rev, cfg.hidden)?;
            bwd.reverse();
            let summed: Vec<Var> =
                fwd.iter().zip(&bwd).map(|(&a, &b)| tape.add(a, b)).collect::<autodiff::Result<_>>()?;
            Ok(tape.stack_rows(&summed)?)
        }
    }
}

/// Σ_j [logsumexp_i log P(y_j | r_i) − ln m], optionally CSS-normalised.
pub fn nibm_log_likelihood(tape: &mut Tape, cfg: &NibmConfig, pair: &SentencePair, css: Option<&CssSupport>) -> Result<Var> {
    let r = nibm_repr(tape, cfg, &pair.x)?;
    let (w, b) = (tape.param(names::OUT_W)?, tape.param(names::OUT_B)?);
    let table = match css {
        None => {
            let logits = tape.linear(r, w, Some(b))?;
            let lp = tape.log_softmax_rows(logits)?;
            tape.gather_cols(lp, &pair.y)?
        }
        Some(css) => {
            let pos: Vec<usize> = pair
                .y
                .iter()
                .map(|&y| {
                    css.positive_position(y)
                        .ok_or_else(|| ModelError::Contract(format!("L2 class {y} is not in the CSS class set C")))
                })
                .collect::<Result<_>>()?;
            let wg = tape.gather_rows(w, css.classes())?;
            let bg = tape.select(b, css.classes())?;
            let scores = tape.linear(r, wg, Some(bg))?;
            let lw = tape.constant(Tensor::vector(css.log_weights()));
            let shifted = tape.add_row_vector(scores, lw)?;
            let lse = tape.logsumexp_rows(shifted)?;
            let picked = tape.gather_cols(scores, &pos)?;
            tape.sub_col_vector(picked, lse)?
        }
    };
    let by_target = tape.transpose(table)?;
    let lse = tape.logsumexp_rows(by_target)?;
    let lm = tape.add_scalar(lse, -(pair.m() as f64).ln());
    Ok(tape.sum(lm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NibmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_neg: usize,
    pub css: bool,
    pub seed: u64,
}

/// Maximises the summed log-likelihood with Adam; batches, CSS supports and
/// merge order follow the main training loop.
pub fn nibm_train(
    mut model: Nibm,
    pairs: &[SentencePair],
    cfg: &NibmTrainConfig,
    exec: Execution,
) -> std::result::Result<Nibm, TrainingError> {
    let mut adam = AdamState::new(&model.params, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut updates = 0u64;
    for epoch in 1..=cfg.epochs {
        let batches = corpus::make_batches(pairs, cfg.batch_size, rng::derive_seed(cfg.seed, "nibm-shuffle", epoch as u64));
        for batch in &batches {
            let css = cfg.css.then(|| {
                let seed = rng::derive_seed(cfg.seed, "nibm-css", updates);
                corpus::build_css_support(&batch.pairs, model.config.l2_vocab_size, Side::L2, cfg.n_neg, seed)
            });
            let parts = parallel::map_indexed(exec, &batch.pairs, |_, p| model.log_likelihood_and_gradients(p, css.as_ref()));
            let mut grads = Gradients::zeros_like(&model.params);
            for part in parts {
                let (ll, g) = part?;
                if !ll.is_finite() {
                    return Err(TrainingError::NonFiniteLoss { update: updates });
                }
                grads.accumulate(&g);
            }
            grads.scale(-1.0);
            adam_step(&mut model.params, &grads, &mut adam)?;
            updates += 1;
        }
    }
    Ok(model)
}
